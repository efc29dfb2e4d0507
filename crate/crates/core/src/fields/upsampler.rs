//! Convolutional RGB decoder: conv3x3, ReLU, nearest upsample, conv3x3,
//! ReLU, conv3x3, sigmoid. Images are row-major with interleaved channels.

use rand::Rng;

use crate::optimizer::{OptimError, ParamVector};
use crate::real::{sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.weight + ((o * self.in_ch + i) * 3 + ky) * 3 + kx
    }

    fn register<R: Real>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        params: &mut ParamVector<R>,
    ) -> Result<Conv, OptimError> {
        let weight = params.push(&format!("{name}.weight"), vec![R::zero(); out_ch * in_ch * 9])?.start;
        let bias = params.push(&format!("{name}.bias"), vec![R::zero(); out_ch])?.start;
        Ok(Conv {
            in_ch,
            out_ch,
            weight,
            bias,
        })
    }

    /// Zero-padded 3x3 convolution of an `h x w x in_ch` image.
    fn forward<R: Real>(&self, params: &[R], input: &[R], h: usize, w: usize, out: &mut [R]) {
        for y in 0..h {
            for x in 0..w {
                let dst = &mut out[(y * w + x) * self.out_ch..(y * w + x + 1) * self.out_ch];
                dst.copy_from_slice(&params[self.bias..self.bias + self.out_ch]);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &input[(sy as usize * w + sx as usize) * self.in_ch..][..self.in_ch];
                        for (o, d) in dst.iter_mut().enumerate() {
                            for (i, v) in src.iter().enumerate() {
                                *d += params[self.w(o, i, ky, kx)] * *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward<R: Real>(
        &self,
        params: &[R],
        input: &[R],
        h: usize,
        w: usize,
        d_out: &[R],
        grads: &mut [R],
        mut d_input: Option<&mut [R]>,
    ) {
        if let Some(di) = d_input.as_deref_mut() {
            di.iter_mut().for_each(|v| *v = R::zero());
        }
        for y in 0..h {
            for x in 0..w {
                let g = &d_out[(y * w + x) * self.out_ch..(y * w + x + 1) * self.out_ch];
                for (o, gv) in g.iter().enumerate() {
                    grads[self.bias + o] += *gv;
                }
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * self.in_ch;
                        for (o, gv) in g.iter().enumerate() {
                            if *gv == R::zero() {
                                continue;
                            }
                            for i in 0..self.in_ch {
                                let wi = self.w(o, i, ky, kx);
                                grads[wi] += *gv * input[base + i];
                                if let Some(di) = d_input.as_deref_mut() {
                                    di[base + i] += *gv * params[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Parameter views of the three convolutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upsampler {
    pub in_ch: usize,
    pub channels: usize,
    pub conv: [Conv; 3],
}

/// Activations of one upsampler pass.
#[derive(Debug, Clone)]
pub struct UpsampleTape<R> {
    pub factor: usize,
    pub h: usize,
    pub w: usize,
    input: Vec<R>,
    a1: Vec<R>,
    up: Vec<R>,
    a2: Vec<R>,
    /// `(h*factor) x (w*factor) x 3` colors in [0, 1].
    pub rgb: Vec<R>,
}

impl Upsampler {
    /// Registers parameters initialized so that, at factor 1, the output is
    /// sigmoid of the first three input channels. Each of those channels is
    /// carried through a +/- ReLU pair; the remaining hidden channels start
    /// with small random weights and no influence on the output.
    pub fn register<R: Real>(
        in_ch: usize,
        channels: usize,
        params: &mut ParamVector<R>,
        rng: &mut impl Rng,
    ) -> Result<Upsampler, OptimError> {
        let conv = [
            Conv::register("upsampler.0", in_ch, channels, params)?,
            Conv::register("upsampler.1", channels, channels, params)?,
            Conv::register("upsampler.2", channels, 3, params)?,
        ];
        let p = params.values_mut();
        let [c1, c2, c3] = conv;
        for c in 0..3 {
            p[c1.w(2 * c, c, 1, 1)] = R::one();
            p[c1.w(2 * c + 1, c, 1, 1)] = -R::one();
            p[c2.w(2 * c, 2 * c, 1, 1)] = R::one();
            p[c2.w(2 * c + 1, 2 * c + 1, 1, 1)] = R::one();
            p[c3.w(c, 2 * c, 1, 1)] = R::one();
            p[c3.w(c, 2 * c + 1, 1, 1)] = -R::one();
        }
        for (cv, fan_in) in [(c1, in_ch * 9), (c2, channels * 9)] {
            let bound = 0.5 * (6.0 / fan_in as f64).sqrt();
            for o in 6..channels {
                for i in 0..cv.in_ch {
                    for k in 0..9 {
                        p[cv.w(o, i, k / 3, k % 3)] = R::of(rng.gen_range(-bound..bound));
                    }
                }
                p[cv.bias + o] = R::of(0.1);
            }
        }
        Ok(Upsampler { in_ch, channels, conv })
    }

    /// Decodes an `h x w x in_ch` feature image to `(h*factor) x (w*factor) x 3`.
    pub fn forward<R: Real>(&self, params: &[R], input: &[R], h: usize, w: usize, factor: usize) -> UpsampleTape<R> {
        let c = self.channels;
        let (hh, ww) = (h * factor, w * factor);
        let mut a1 = vec![R::zero(); h * w * c];
        self.conv[0].forward(params, input, h, w, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.max(R::zero()));
        let mut up = vec![R::zero(); hh * ww * c];
        for y in 0..hh {
            for x in 0..ww {
                let src = ((y / factor) * w + x / factor) * c;
                up[(y * ww + x) * c..][..c].copy_from_slice(&a1[src..src + c]);
            }
        }
        let mut a2 = vec![R::zero(); hh * ww * c];
        self.conv[1].forward(params, &up, hh, ww, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.max(R::zero()));
        let mut rgb = vec![R::zero(); hh * ww * 3];
        self.conv[2].forward(params, &a2, hh, ww, &mut rgb);
        rgb.iter_mut().for_each(|v| *v = sigmoid(*v));
        UpsampleTape {
            factor,
            h,
            w,
            input: input.to_vec(),
            a1,
            up,
            a2,
            rgb,
        }
    }

    /// Accumulates parameter gradients from dL/drgb and returns dL/dinput.
    pub fn backward<R: Real>(&self, params: &[R], tape: &UpsampleTape<R>, d_rgb: &[R], grads: &mut [R]) -> Vec<R> {
        let c = self.channels;
        let (h, w, f) = (tape.h, tape.w, tape.factor);
        let (hh, ww) = (h * f, w * f);
        let d_z3: Vec<R> = d_rgb
            .iter()
            .zip(&tape.rgb)
            .map(|(g, y)| *g * *y * (R::one() - *y))
            .collect();
        let mut d_a2 = vec![R::zero(); hh * ww * c];
        self.conv[2].backward(params, &tape.a2, hh, ww, &d_z3, grads, Some(&mut d_a2));
        for (d, a) in d_a2.iter_mut().zip(&tape.a2) {
            if *a <= R::zero() {
                *d = R::zero();
            }
        }
        let mut d_up = vec![R::zero(); hh * ww * c];
        self.conv[1].backward(params, &tape.up, hh, ww, &d_a2, grads, Some(&mut d_up));
        let mut d_a1 = vec![R::zero(); h * w * c];
        for y in 0..hh {
            for x in 0..ww {
                let dst = ((y / f) * w + x / f) * c;
                for k in 0..c {
                    d_a1[dst + k] += d_up[(y * ww + x) * c + k];
                }
            }
        }
        for (d, a) in d_a1.iter_mut().zip(&tape.a1) {
            if *a <= R::zero() {
                *d = R::zero();
            }
        }
        let mut d_in = vec![R::zero(); h * w * self.in_ch];
        self.conv[0].backward(params, &tape.input, h, w, &d_a1, grads, Some(&mut d_in));
        d_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{grad_check, Objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Upsampler, ParamVector<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamVector::new();
        let u = Upsampler::register(5, 8, &mut p, &mut rng).unwrap();
        let img: Vec<f64> = (0..4 * 3 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (u, p, img)
    }

    #[test]
    fn factor_one_init_is_sigmoid_of_first_channels() {
        let (u, p, img) = setup();
        let tape = u.forward(p.values(), &img, 4, 3, 1);
        for px in 0..12 {
            for c in 0..3 {
                let expect = 1.0 / (1.0 + (-img[px * 5 + c]).exp());
                assert!((tape.rgb[px * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_scales_with_factor() {
        let (u, p, img) = setup();
        let tape = u.forward(p.values(), &img, 4, 3, 2);
        assert_eq!(tape.rgb.len(), 8 * 6 * 3);
        assert!(tape.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    struct Probe {
        u: Upsampler,
        img: Vec<f64>,
        target: Vec<f64>,
    }

    impl Objective for Probe {
        fn value(&self, p: &[f64]) -> f64 {
            let t = self.u.forward(p, &self.img, 4, 3, 2);
            t.rgb.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum()
        }
        fn gradient(&self, p: &[f64]) -> Vec<f64> {
            let t = self.u.forward(p, &self.img, 4, 3, 2);
            let d: Vec<f64> = t.rgb.iter().zip(&self.target).map(|(a, b)| 2.0 * (a - b)).collect();
            let mut g = vec![0.0; p.len()];
            self.u.backward(p, &t, &d, &mut g);
            g
        }
    }

    #[test]
    fn parameter_and_input_gradients() {
        let (u, mut p, img) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // move away from the exact initialization so all paths are active
        for v in p.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let target: Vec<f64> = (0..8 * 6 * 3).map(|_| rng.gen()).collect();
        let probe = Probe { u, img: img.clone(), target };
        let r = grad_check(&probe, &p, 1e-4, 64, 5, None).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let t = u.forward(p.values(), &img, 4, 3, 2);
        let d: Vec<f64> = t.rgb.iter().zip(&probe.target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut g = vec![0.0; p.len()];
        let d_in = u.backward(p.values(), &t, &d, &mut g);
        for i in [0, 7, 23, 41, 59] {
            let f = |delta: f64| {
                let mut x = img.clone();
                x[i] += delta;
                let t = u.forward(p.values(), &x, 4, 3, 2);
                t.rgb.iter().zip(&probe.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            };
            let num = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((num - d_in[i]).abs() < 1e-6 * num.abs().max(1.0), "{i}: {num} vs {}", d_in[i]);
        }
    }
}
