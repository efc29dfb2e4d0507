//! Multi-resolution hash encoding over 3D or 4D inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Spatial hash primes, one per input dimension.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub input_dims: usize,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.levels == 0 {
            return Err("levels must be >= 1".into());
        }
        if !self.table_size.is_power_of_two() {
            return Err(format!("table size {} is not a power of two", self.table_size));
        }
        if self.features_per_level == 0 {
            return Err("features_per_level must be >= 1".into());
        }
        if !(3..=4).contains(&self.input_dims) {
            return Err(format!("input_dims must be 3 or 4, got {}", self.input_dims));
        }
        if self.base_resolution == 0 || !(self.growth_factor >= 1.0) {
            return Err("base resolution must be >= 1 and growth factor >= 1".into());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.features_per_level
    }

    /// Lattice cells per axis at `level`.
    pub fn resolution(&self, level: usize) -> f64 {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor()
    }
}

/// A hash grid's view into a flat parameter array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    pub offset: usize,
}

/// Table slot of an integer lattice vertex.
#[inline]
pub fn hash_vertex(vertex: &[u32], table_size: usize) -> usize {
    let mut h = 0u32;
    for (v, p) in vertex.iter().zip(HASH_PRIMES) {
        h ^= v.wrapping_mul(p);
    }
    (h as usize) & (table_size - 1)
}

/// One lattice cell's corners at one level: table slots and weights.
struct Corners {
    slots: [usize; 16],
    weights: [f64; 16],
    count: usize,
}

impl HashGrid {
    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Clamps `x` into [0, 1]; reports whether any coordinate moved.
    pub fn clamp_input(x: &[f64], out: &mut [f64; 4]) -> bool {
        let mut clamped = false;
        for (o, &v) in out.iter_mut().zip(x) {
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            clamped |= c != v;
            *o = c;
        }
        clamped
    }

    fn corners(&self, level: usize, x: &[f64; 4]) -> Corners {
        let dims = self.config.input_dims;
        let res = self.config.resolution(level);
        let mut base = [0u32; 4];
        let mut frac = [0f64; 4];
        for d in 0..dims {
            let p = x[d] * res;
            let f = p.floor();
            base[d] = f as u32;
            frac[d] = p - f;
        }
        let count = 1usize << dims;
        let mut corners = Corners {
            slots: [0; 16],
            weights: [0.0; 16],
            count,
        };
        let mut vertex = [0u32; 4];
        for c in 0..count {
            let mut w = 1.0;
            for d in 0..dims {
                if (c >> d) & 1 == 1 {
                    vertex[d] = base[d] + 1;
                    w *= frac[d];
                } else {
                    vertex[d] = base[d];
                    w *= 1.0 - frac[d];
                }
            }
            corners.slots[c] = hash_vertex(&vertex[..dims], self.config.table_size);
            corners.weights[c] = w;
        }
        corners
    }

    #[inline]
    fn entry(&self, level: usize, slot: usize) -> usize {
        self.offset + (level * self.config.table_size + slot) * self.config.features_per_level
    }

    /// Writes the `levels * features_per_level` encoding of `x` into `out`.
    /// Returns true when `x` had to be clamped into the unit cube.
    pub fn encode<R: Real>(&self, params: &[R], x: &[f64], out: &mut [R]) -> bool {
        let mut xc = [0.0; 4];
        let clamped = Self::clamp_input(&x[..self.config.input_dims], &mut xc);
        let nf = self.config.features_per_level;
        for level in 0..self.config.levels {
            let corners = self.corners(level, &xc);
            let dst = &mut out[level * nf..(level + 1) * nf];
            dst.iter_mut().for_each(|v| *v = R::zero());
            for c in 0..corners.count {
                let w = R::of(corners.weights[c]);
                let e = self.entry(level, corners.slots[c]);
                for (f, v) in dst.iter_mut().enumerate() {
                    *v += w * params[e + f];
                }
            }
        }
        clamped
    }

    /// Accumulates `d_out` (gradient w.r.t. the encoding of `x`) into the
    /// table entries of `grads`.
    pub fn backward<R: Real>(&self, x: &[f64], d_out: &[R], grads: &mut [R]) {
        let mut xc = [0.0; 4];
        Self::clamp_input(&x[..self.config.input_dims], &mut xc);
        let nf = self.config.features_per_level;
        for level in 0..self.config.levels {
            let g = &d_out[level * nf..(level + 1) * nf];
            if g.iter().all(|v| *v == R::zero()) {
                continue;
            }
            let corners = self.corners(level, &xc);
            for c in 0..corners.count {
                let w = R::of(corners.weights[c]);
                let e = self.entry(level, corners.slots[c]);
                for (f, gv) in g.iter().enumerate() {
                    grads[e + f] += w * *gv;
                }
            }
        }
    }

    pub fn init_values<R: Real>(&self, rng: &mut impl Rng, scale: f64) -> Vec<R> {
        (0..self.config.param_count())
            .map(|_| R::of(rng.gen_range(-scale..scale)))
            .collect()
    }
}
