//! Flat parameter storage, Adam, and the finite-difference gradient checker.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in segment `{segment}` at index {index}")]
    NonFiniteGradient { segment: String, index: usize },
    #[error("parameter/gradient layouts differ")]
    LayoutMismatch,
    #[error("objective is not deterministic: {first} != {second}")]
    Nondeterministic { first: f64, second: f64 },
    #[error("duplicate segment `{0}`")]
    DuplicateSegment(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Named, disjoint, contiguous segments over one flat array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<R> {
    values: Vec<R>,
    segments: Vec<Segment>,
}

impl<R: Real> Default for ParamVector<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamVector<R> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            segments: Vec::new(),
        }
    }

    /// Appends a named segment and returns its range in the flat array.
    pub fn push(&mut self, name: &str, values: Vec<R>) -> Result<Range<usize>, OptimError> {
        if self.segment(name).is_some() {
            return Err(OptimError::DuplicateSegment(name.to_string()));
        }
        let seg = Segment {
            name: name.to_string(),
            offset: self.values.len(),
            len: values.len(),
        };
        let range = seg.range();
        self.values.extend(values);
        self.segments.push(seg);
        Ok(range)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[R]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [R]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    /// Segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&Segment> {
        let k = self.segments.partition_point(|s| s.offset + s.len <= i);
        self.segments.get(k).filter(|s| s.range().contains(&i))
    }

    /// Zero-filled vector with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![R::zero(); self.values.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn same_layout<S>(&self, other: &ParamVector<S>) -> bool {
        self.segments == other.segments && self.values.len() == other.values.len()
    }

    pub fn cast<S: Real>(&self) -> ParamVector<S> {
        ParamVector {
            values: self.values.iter().map(|v| S::of(v.f64())).collect(),
            segments: self.segments.clone(),
        }
    }

    /// Replaces all values; the layout is kept.
    pub fn set_values(&mut self, values: Vec<R>) -> Result<(), OptimError> {
        if values.len() != self.values.len() {
            return Err(OptimError::LayoutMismatch);
        }
        self.values = values;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), OptimError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(OptimError::NonFiniteGradient {
                segment: self.segment_of(index).map(|s| s.name.clone()).unwrap_or_default(),
                index,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay per step; 1.0 keeps it constant.
    #[serde(default = "one")]
    pub lr_decay: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            lr_decay: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<R: Real> AdamState<R> {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![R::zero(); n],
            v: vec![R::zero(); n],
            step: 0,
            config,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powf(self.step as f64)
    }
}

/// One bias-corrected Adam update. Fails without touching anything if a
/// gradient is not finite.
pub fn adam_step<R: Real>(
    params: &mut ParamVector<R>,
    grads: &ParamVector<R>,
    state: &mut AdamState<R>,
) -> Result<(), OptimError> {
    if !params.same_layout(grads) || state.m.len() != params.len() {
        return Err(OptimError::LayoutMismatch);
    }
    grads.check_finite()?;
    let lr = state.current_lr();
    state.step += 1;
    let c = state.config;
    let k = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(k);
    let bc2 = 1.0 - c.beta2.powi(k);
    let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
    let (one_b1, one_b2) = (R::of(1.0 - c.beta1), R::of(1.0 - c.beta2));
    let step_size = R::of(lr / bc1);
    let inv_bc2 = R::of(1.0 / bc2);
    let eps = R::of(c.eps);
    for (((p, &g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let denom = (*v * inv_bc2).sqrt() + eps;
        *p -= step_size * *m / denom;
    }
    Ok(())
}

/// A scalar function of a flat parameter array with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> f64;
    fn gradient(&self, params: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_segment: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient with central differences on `samples`
/// coordinates. Coordinates are drawn from the gradient's nonzero support
/// first (hash tables are mostly untouched by any one loss), then from the
/// remaining coordinates. `segment_prefix` restricts the candidates.
pub fn grad_check(
    objective: &dyn Objective,
    params: &ParamVector<f64>,
    eps: f64,
    samples: usize,
    seed: u64,
    segment_prefix: Option<&str>,
) -> Result<GradCheckReport, OptimError> {
    let theta = params.values().to_vec();
    let first = objective.value(&theta);
    let second = objective.value(&theta);
    if first.to_bits() != second.to_bits() {
        return Err(OptimError::Nondeterministic { first, second });
    }
    let analytic = objective.gradient(&theta);
    if analytic.len() != theta.len() {
        return Err(OptimError::LayoutMismatch);
    }

    let candidates: Vec<usize> = params
        .segments()
        .iter()
        .filter(|s| segment_prefix.is_none_or(|p| s.name.starts_with(p)))
        .flat_map(|s| s.range())
        .collect();
    let (support, rest): (Vec<usize>, Vec<usize>) =
        candidates.iter().partition(|&&i| analytic[i] != 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if support.len() > samples {
        sample(&mut rng, support.len(), samples).into_iter().map(|k| support[k]).collect()
    } else {
        support.clone()
    };
    let missing = samples.saturating_sub(chosen.len()).min(rest.len());
    chosen.extend(sample(&mut rng, rest.len(), missing).into_iter().map(|k| rest[k]));
    chosen.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: chosen.first().copied().unwrap_or(0),
        worst_segment: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: chosen.len(),
    };
    let mut probe = theta.clone();
    for &i in &chosen {
        probe[i] = theta[i] + eps;
        let plus = objective.value(&probe);
        probe[i] = theta[i] - eps;
        let minus = objective.value(&probe);
        probe[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report.worst_segment = params
        .segment_of(report.worst_index)
        .map(|s| s.name.clone())
        .unwrap_or_default();
    Ok(report)
}
