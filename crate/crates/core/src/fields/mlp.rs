//! Fully connected networks with ReLU hidden layers and a linear output.

use rand::Rng;

use crate::optimizer::{OptimError, ParamVector};
use crate::real::Real;

/// An MLP's view into a flat parameter array. Layer `l` stores a row-major
/// `widths[l + 1] x widths[l]` weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub offset: usize,
}

/// How freshly created weights are drawn.
#[derive(Debug, Clone, Copy)]
pub enum MlpInit {
    /// He-uniform hidden layers and a `scale`-scaled uniform output layer.
    He { output_scale: f64 },
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Size of the activation buffer: input, every hidden layer and output.
    pub fn activation_len(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn max_width(&self) -> usize {
        *self.widths.iter().max().unwrap()
    }

    /// Appends one segment per weight matrix and bias vector under `name`.
    pub fn register<R: Real>(
        widths: &[usize],
        name: &str,
        params: &mut ParamVector<R>,
        rng: &mut impl Rng,
        init: MlpInit,
    ) -> Result<Mlp, OptimError> {
        let offset = params.len();
        let layers = widths.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let MlpInit::He { output_scale } = init;
            let bound = if l + 1 == layers {
                output_scale * (1.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let w: Vec<R> = (0..fan_in * fan_out)
                .map(|_| R::of(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }))
                .collect();
            params.push(&format!("{name}.{l}.weight"), w)?;
            params.push(&format!("{name}.{l}.bias"), vec![R::zero(); fan_out])?;
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            offset,
        })
    }

    /// Offset of layer `l`'s weights and bias within the flat array.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = self.offset;
        for k in 0..l {
            off += self.widths[k] * self.widths[k + 1] + self.widths[k + 1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    pub fn bias_offset(&self, layer: usize) -> usize {
        self.layer_offsets(layer).1
    }

    pub fn weight_offset(&self, layer: usize) -> usize {
        self.layer_offsets(layer).0
    }

    /// Forward pass. `acts` receives `[input | hidden.. | output]`; the
    /// output is the tail `output_dim()` values.
    pub fn forward<R: Real>(&self, params: &[R], input: &[R], acts: &mut [R]) {
        let n_in = self.widths[0];
        acts[..n_in].copy_from_slice(&input[..n_in]);
        self.forward_in_place(params, acts);
    }

    /// Forward pass when the input already occupies `acts[..input_dim()]`.
    pub fn forward_in_place<R: Real>(&self, params: &[R], acts: &mut [R]) {
        let mut start = 0;
        let mut off = self.offset;
        for l in 0..self.layers() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (prev, rest) = acts.split_at_mut(start + fi);
            let x = &prev[start..];
            let y = &mut rest[..fo];
            let w = &params[off..off + fi * fo];
            let b = &params[off + fi * fo..off + fi * fo + fo];
            let hidden = l + 1 < self.layers();
            for (o, yv) in y.iter_mut().enumerate() {
                let row = &w[o * fi..(o + 1) * fi];
                let mut s = b[o];
                for (wv, xv) in row.iter().zip(x) {
                    s += *wv * *xv;
                }
                *yv = if hidden && s < R::zero() { R::zero() } else { s };
            }
            start += fi;
            off += fi * fo + fo;
        }
    }

    pub fn output<'a, R>(&self, acts: &'a [R]) -> &'a [R] {
        &acts[acts.len() - self.output_dim()..]
    }

    /// Backward pass from `d_out`. Accumulates weight gradients into `grads`
    /// and writes the input gradient into `d_input` (if given). `scratch`
    /// needs `2 * max_width()` entries.
    pub fn backward<R: Real>(
        &self,
        params: &[R],
        acts: &[R],
        d_out: &[R],
        grads: &mut [R],
        d_input: Option<&mut [R]>,
        scratch: &mut [R],
    ) {
        let mw = self.max_width();
        let (delta, next) = scratch[..2 * mw].split_at_mut(mw);
        let n_out = self.output_dim();
        delta[..n_out].copy_from_slice(&d_out[..n_out]);
        let mut ends = Vec::with_capacity(self.widths.len());
        let mut acc = 0;
        for w in &self.widths {
            ends.push(acc);
            acc += w;
        }
        let mut d_input = d_input;
        for l in (0..self.layers()).rev() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let x = &acts[ends[l]..ends[l] + fi];
            let (w_off, b_off) = self.layer_offsets(l);
            let need_input_grad = l > 0 || d_input.is_some();
            if need_input_grad {
                next[..fi].iter_mut().for_each(|v| *v = R::zero());
            }
            for o in 0..fo {
                let d = delta[o];
                if d == R::zero() {
                    continue;
                }
                grads[b_off + o] += d;
                let row = w_off + o * fi;
                for i in 0..fi {
                    grads[row + i] += d * x[i];
                }
                if need_input_grad {
                    for i in 0..fi {
                        next[i] += d * params[row + i];
                    }
                }
            }
            if l > 0 {
                // through the ReLU that produced this layer's input
                for i in 0..fi {
                    delta[i] = if x[i] > R::zero() { next[i] } else { R::zero() };
                }
            } else if let Some(dst) = d_input.as_deref_mut() {
                dst[..fi].copy_from_slice(&next[..fi]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{grad_check, Objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Readout {
        mlp: Mlp,
        inputs: Vec<Vec<f64>>,
    }

    impl Readout {
        fn run(&self, params: &[f64], grads: Option<&mut Vec<f64>>) -> f64 {
            let mut acts = vec![0.0; self.mlp.activation_len()];
            let mut scratch = vec![0.0; 2 * self.mlp.max_width()];
            let mut total = 0.0;
            let mut grads = grads;
            for x in &self.inputs {
                self.mlp.forward(params, x, &mut acts);
                let out = self.mlp.output(&acts).to_vec();
                total += out.iter().map(|o| o.tanh()).sum::<f64>();
                if let Some(g) = grads.as_deref_mut() {
                    let d: Vec<f64> = out.iter().map(|o| 1.0 - o.tanh().powi(2)).collect();
                    let mut d_in = vec![0.0; x.len()];
                    self.mlp.backward(params, &acts, &d, g, Some(&mut d_in), &mut scratch);
                }
            }
            total
        }
    }

    impl Objective for Readout {
        fn value(&self, p: &[f64]) -> f64 {
            self.run(p, None)
        }
        fn gradient(&self, p: &[f64]) -> Vec<f64> {
            let mut g = vec![0.0; p.len()];
            self.run(p, Some(&mut g));
            g
        }
    }

    fn setup() -> (Mlp, ParamVector<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamVector::new();
        let mlp = Mlp::register(&[5, 8, 8, 3], "m", &mut p, &mut rng, MlpInit::He { output_scale: 1.0 }).unwrap();
        for b in 0..3 {
            let off = mlp.bias_offset(b);
            for v in &mut p.values_mut()[off..off + mlp.widths[b + 1]] {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        (mlp, p, rng)
    }

    #[test]
    fn layout_and_segments() {
        let (mlp, p, _) = setup();
        assert_eq!(mlp.param_count(), p.len());
        assert_eq!(p.segments().len(), 6);
        assert_eq!(p.segment("m.1.bias").unwrap().offset, mlp.bias_offset(1));
    }

    #[test]
    fn zero_weights_output_bias() {
        let (mlp, mut p, _) = setup();
        for l in 0..3 {
            let w = mlp.weight_offset(l);
            let n = mlp.widths[l] * mlp.widths[l + 1];
            p.values_mut()[w..w + n].iter_mut().for_each(|v| *v = 0.0);
        }
        let b = mlp.bias_offset(2);
        let expected = p.values()[b..b + 3].to_vec();
        let mut acts = vec![0.0; mlp.activation_len()];
        mlp.forward(p.values(), &[1.0, -2.0, 3.0, 0.5, 9.0], &mut acts);
        assert_eq!(mlp.output(&acts), &expected[..]);
    }

    #[test]
    fn weight_and_input_gradients() {
        let (mlp, p, mut rng) = setup();
        let r = Readout {
            mlp,
            inputs: (0..16).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        };
        let report = grad_check(&r, &p, 1e-3, 64, 2, None).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        // input gradient against central differences
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acts = vec![0.0; r.mlp.activation_len()];
        let mut scratch = vec![0.0; 2 * r.mlp.max_width()];
        let f = |x: &[f64]| {
            let mut a = vec![0.0; r.mlp.activation_len()];
            r.mlp.forward(p.values(), x, &mut a);
            r.mlp.output(&a).iter().sum::<f64>()
        };
        r.mlp.forward(p.values(), &x, &mut acts);
        let mut g = vec![0.0; p.len()];
        let mut d_in = vec![0.0; 5];
        r.mlp.backward(p.values(), &acts, &[1.0; 3], &mut g, Some(&mut d_in), &mut scratch);
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let num = (f(&xp) - f(&xm)) / 2e-6;
            assert!((num - d_in[i]).abs() < 1e-6);
        }
    }
}
