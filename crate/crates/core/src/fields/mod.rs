//! Learnable scene representation: hash encodings, the environment and
//! actor-aware encoders, the direction-only sky field and the shared decoder.

pub mod checkpoint;
pub mod hashgrid;
pub mod mlp;
pub mod upsampler;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{ActorTrack, GeometryError, Pose};
use crate::optimizer::{OptimError, ParamVector};
use crate::real::{sigmoid, Real};
use hashgrid::{HashGrid, HashGridConfig};
use mlp::{Mlp, MlpInit};
use upsampler::Upsampler;

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("unknown actor `{0}`")]
    UnknownActor(String),
    #[error("feature dimension {got} does not match decoder input {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Sizes of every learnable component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub env_grid: HashGridConfig,
    pub actor_static_grid: HashGridConfig,
    pub actor_dynamic_grid: HashGridConfig,
    /// Per-actor embedding width E.
    pub embedding_dim: usize,
    /// Appearance feature width F_app.
    pub appearance_dim: usize,
    /// Common width both encoders are projected to before the decoder.
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub sky_octaves: usize,
    pub upsampler_channels: usize,
    /// Initial bias of the geometry output; negative starts the scene nearly empty.
    pub density_bias: f64,
    /// Actor boxes are enlarged by this factor before encoding.
    pub actor_box_scale: f64,
    pub grid_init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        let actor = |dims| HashGridConfig {
            levels: 4,
            table_size: 1 << 12,
            features_per_level: 2,
            base_resolution: 4,
            growth_factor: 2.0,
            input_dims: dims,
        };
        Self {
            env_grid: HashGridConfig {
                levels: 8,
                table_size: 1 << 14,
                features_per_level: 2,
                base_resolution: 16,
                growth_factor: 1.5,
                input_dims: 3,
            },
            actor_static_grid: actor(3),
            actor_dynamic_grid: actor(4),
            embedding_dim: 4,
            appearance_dim: 8,
            latent_dim: 16,
            hidden_width: 32,
            hidden_layers: 2,
            sky_octaves: 4,
            upsampler_channels: 16,
            density_bias: -2.0,
            actor_box_scale: 1.1,
            grid_init_scale: 1e-4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: String| Err(FieldError::InvalidConfig(m));
        for (name, g, dims) in [
            ("env_grid", &self.env_grid, 3),
            ("actor_static_grid", &self.actor_static_grid, 3),
            ("actor_dynamic_grid", &self.actor_dynamic_grid, 4),
        ] {
            if let Err(e) = g.validate() {
                return bad(format!("{name}: {e}"));
            }
            if g.input_dims != dims {
                return bad(format!("{name} must take {dims}D input"));
            }
        }
        if self.actor_static_grid.output_dim() != self.actor_dynamic_grid.output_dim() {
            return bad("static and dynamic actor grids must have equal output width".into());
        }
        if self.appearance_dim < 3 {
            return bad("appearance_dim must be >= 3".into());
        }
        if self.latent_dim == 0 || self.hidden_width == 0 || !(1..=16).contains(&self.sky_octaves) {
            return bad("latent_dim and hidden_width must be >= 1, sky_octaves in 1..=16".into());
        }
        if self.upsampler_channels < 6 {
            return bad("upsampler_channels must be >= 6".into());
        }
        if !(self.actor_box_scale >= 1.0) {
            return bad("actor_box_scale must be >= 1".into());
        }
        Ok(())
    }

    pub fn sky_input_dim(&self) -> usize {
        3 * 2 * self.sky_octaves
    }

    fn hidden(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        w.push(output);
        w
    }
}

/// Axis-aligned world-frame bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, FieldError> {
        if (0..3).any(|i| !(max[i] > min[i]) || !min[i].is_finite() || !max[i].is_finite()) {
            return Err(FieldError::InvalidConfig(format!("degenerate bounds {min:?} .. {max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Smallest box containing every point.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Option<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        any.then_some(Self { min, max })
    }

    pub fn padded(&self, pad_low: [f64; 3], pad_high: [f64; 3]) -> Self {
        Self {
            min: std::array::from_fn(|i| self.min[i] - pad_low[i]),
            max: std::array::from_fn(|i| self.max[i] + pad_high[i]),
        }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    /// Maps the box onto [0, 1]^3 (points outside map outside).
    pub fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.min[i]) / (self.max[i] - self.min[i]))
    }

    /// Parametric entry and exit distances of a ray, if it meets the box.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - origin[i]) / dir[i];
            let b = (self.max[i] - origin[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0).then_some((t0, t1))
    }
}

/// An encoder output; `clamped` reports an input outside the valid domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<R> {
    pub values: Vec<R>,
    pub clamped: bool,
}

/// Which encoder produced a feature; selects the projection into the decoder.
#[derive(Debug, Clone, Copy)]
pub enum EncodedFeature<'a, R> {
    Environment(&'a [R]),
    Actor(&'a [R]),
}

/// Offsets of every component inside the flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub env_grid: HashGrid,
    pub static_grid: HashGrid,
    pub dynamic_grid: HashGrid,
    pub embeddings: usize,
    pub n_actors: usize,
    pub env_proj: Mlp,
    pub actor_proj: Mlp,
    pub ratio: Mlp,
    pub decoder: Mlp,
    pub sky: Mlp,
    pub rgb_head: Mlp,
    pub upsampler: Upsampler,
}

impl ModelLayout {
    /// Registers every segment in `params` with freshly initialized values.
    pub fn build<R: Real>(
        config: &FieldConfig,
        n_actors: usize,
        params: &mut ParamVector<R>,
        seed: u64,
    ) -> Result<Self, FieldError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = |name: &str, c: HashGridConfig, params: &mut ParamVector<R>| {
            let g = HashGrid {
                config: c,
                offset: params.len(),
            };
            params.push(name, g.init_values(&mut rng, config.grid_init_scale))?;
            Ok::<_, FieldError>(g)
        };
        let env_grid = grid("env_grid", config.env_grid, params)?;
        let static_grid = grid("actor_static_grid", config.actor_static_grid, params)?;
        let dynamic_grid = grid("actor_dynamic_grid", config.actor_dynamic_grid, params)?;

        let embeddings = params.len();
        let emb: Vec<R> = (0..n_actors * config.embedding_dim)
            .map(|_| R::of(rng.gen_range(-0.01..0.01)))
            .collect();
        params.push("actor_embeddings", emb)?;

        let lin = MlpInit::He {
            output_scale: 3f64.sqrt(),
        };
        let d = config.latent_dim;
        let actor_feat = config.actor_static_grid.output_dim();
        let env_proj = Mlp::register(&[env_grid.output_dim(), d], "env_proj", params, &mut rng, lin)?;
        let actor_proj = Mlp::register(
            &[actor_feat + config.embedding_dim, d],
            "actor_proj",
            params,
            &mut rng,
            lin,
        )?;
        let ratio = Mlp::register(
            &config.hidden(2 * actor_feat, 1),
            "ratio_mlp",
            params,
            &mut rng,
            MlpInit::He { output_scale: 0.1 },
        )?;
        let decoder = Mlp::register(
            &config.hidden(d, 1 + config.appearance_dim),
            "decoder_mlp",
            params,
            &mut rng,
            MlpInit::He { output_scale: 1.0 },
        )?;
        params.values_mut()[decoder.bias_offset(decoder.layers() - 1)] = R::of(config.density_bias);
        let sky = Mlp::register(
            &config.hidden(config.sky_input_dim(), config.appearance_dim),
            "sky_mlp",
            params,
            &mut rng,
            MlpInit::He { output_scale: 1.0 },
        )?;
        let rgb_head = Mlp::register(
            &[config.appearance_dim, 3],
            "rgb_head",
            params,
            &mut rng,
            MlpInit::He { output_scale: 0.0 },
        )?;
        // rgb = sigmoid(first three appearance channels) at initialization
        let w = rgb_head.weight_offset(0);
        for c in 0..3 {
            params.values_mut()[w + c * config.appearance_dim + c] = R::one();
        }
        let upsampler = Upsampler::register(
            config.appearance_dim + 1,
            config.upsampler_channels,
            params,
            &mut rng,
        )?;
        Ok(Self {
            env_grid,
            static_grid,
            dynamic_grid,
            embeddings,
            n_actors,
            env_proj,
            actor_proj,
            ratio,
            decoder,
            sky,
            rgb_head,
            upsampler,
        })
    }
}

/// Where one sample point is evaluated, with inputs already normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleQuery {
    /// Scene-normalized position in [0, 1]^3.
    Env { x: [f64; 3] },
    /// Box-normalized position in [0, 1]^3 and normalized time.
    Actor { actor: usize, x: [f64; 3], t: f64 },
}

/// Intermediate values of one sample's forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct SampleTape<R> {
    pub query: SampleQuery,
    enc: Vec<R>,
    ratio_acts: Vec<R>,
    w: R,
    proj_acts: Vec<R>,
    dec_acts: Vec<R>,
    app: usize,
}

impl<R: Real> SampleTape<R> {
    /// Geometry output s.
    pub fn s(&self) -> R {
        self.dec_acts[self.dec_acts.len() - self.app_len() - 1]
    }

    /// Appearance feature f.
    pub fn f(&self) -> &[R] {
        &self.dec_acts[self.dec_acts.len() - self.app_len()..]
    }

    fn app_len(&self) -> usize {
        self.app
    }
}

/// Buffers reused by backward passes.
#[derive(Debug, Clone)]
pub struct Scratch<R> {
    mlp: Vec<R>,
    d_latent: Vec<R>,
    d_proj_in: Vec<R>,
    d_ratio_in: Vec<R>,
    d_static: Vec<R>,
    d_dynamic: Vec<R>,
    d_out: Vec<R>,
}

/// Sky field intermediates.
#[derive(Debug, Clone)]
pub struct SkyTape<R> {
    acts: Vec<R>,
}

impl<R: Real> SkyTape<R> {
    pub fn feature<'a>(&'a self, model: &SceneModel<R>) -> &'a [R] {
        model.layout.sky.output(&self.acts)
    }
}

/// Per-actor inverse box poses at one instant.
#[derive(Debug, Clone)]
pub struct ActorFrame {
    pub t_norm: f64,
    pub boxes: Vec<(usize, Pose)>,
}

/// The complete learnable scene.
#[derive(Debug, Clone)]
pub struct SceneModel<R> {
    pub config: FieldConfig,
    pub params: ParamVector<R>,
    pub layout: ModelLayout,
    pub tracks: Vec<ActorTrack>,
    pub scene_aabb: Aabb,
    pub time_range: (f64, f64),
}

/// Sin/cos of each direction component at `octaves` doubling frequencies.
pub fn encode_direction(d: &[f64; 3], octaves: usize, out: &mut [f64]) {
    let mut i = 0;
    for c in d {
        for k in 0..octaves {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * c;
            out[i] = a.sin();
            out[i + 1] = a.cos();
            i += 2;
        }
    }
}

impl<R: Real> SceneModel<R> {
    pub fn new(
        config: FieldConfig,
        tracks: Vec<ActorTrack>,
        scene_aabb: Aabb,
        time_range: (f64, f64),
        seed: u64,
    ) -> Result<Self, FieldError> {
        for t in &tracks {
            t.validate()?;
        }
        let mut params = ParamVector::new();
        let layout = ModelLayout::build(&config, tracks.len(), &mut params, seed)?;
        Ok(Self {
            config,
            params,
            layout,
            tracks,
            scene_aabb,
            time_range,
        })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<S: Real>(&self) -> SceneModel<S> {
        SceneModel {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
            tracks: self.tracks.clone(),
            scene_aabb: self.scene_aabb,
            time_range: self.time_range,
        }
    }

    pub fn actor_index(&self, actor_id: &str) -> Result<usize, FieldError> {
        self.tracks
            .iter()
            .position(|t| t.actor_id == actor_id)
            .ok_or_else(|| FieldError::UnknownActor(actor_id.to_string()))
    }

    pub fn normalize_time(&self, t: f64) -> f64 {
        let (t0, t1) = self.time_range;
        if t1 > t0 {
            (t - t0) / (t1 - t0)
        } else {
            0.0
        }
    }

    /// Inverse box poses of every actor at time `t`.
    pub fn actor_frame(&self, t: f64) -> ActorFrame {
        ActorFrame {
            t_norm: self.normalize_time(t),
            boxes: self
                .tracks
                .iter()
                .enumerate()
                .map(|(i, tr)| (i, tr.pose_at(t).inverse()))
                .collect(),
        }
    }

    /// Routes a world point to the actor whose (enlarged) box contains it,
    /// else to the environment; `None` outside the scene bounds.
    pub fn locate(&self, frame: &ActorFrame, p: &Vector3<f64>) -> Option<SampleQuery> {
        let s = self.config.actor_box_scale;
        for (i, inv) in &frame.boxes {
            let local = self.tracks[*i].to_box_local_at(inv, p);
            let c = local.coords.map(|v| v / s);
            if c.iter().all(|v| v.abs() <= 1.0) {
                return Some(SampleQuery::Actor {
                    actor: *i,
                    x: c.map(|v| 0.5 * (v + 1.0)),
                    t: frame.t_norm,
                });
            }
        }
        let x = [p.x, p.y, p.z];
        self.scene_aabb
            .contains(&x)
            .then(|| SampleQuery::Env {
                x: self.scene_aabb.normalize(&x),
            })
    }

    // ---- spec-level operations on the current parameters ----

    pub fn env_encode(&self, x_world: [f64; 3]) -> FeatureVector<R> {
        let g = &self.layout.env_grid;
        let mut values = vec![R::zero(); g.output_dim()];
        let clamped = g.encode(self.params.values(), &self.scene_aabb.normalize(&x_world), &mut values);
        FeatureVector { values, clamped }
    }

    /// Blended actor feature with the actor's embedding appended.
    pub fn actor_encode(&self, actor_id: &str, x_local: [f64; 3], t: f64) -> Result<FeatureVector<R>, FieldError> {
        let actor = self.actor_index(actor_id)?;
        let q = SampleQuery::Actor {
            actor,
            x: x_local.map(|v| 0.5 * (v + 1.0)),
            t: self.normalize_time(t),
        };
        let mut tape = self.new_tape();
        let clamped = self.encode_actor(self.params.values(), &q, &mut tape);
        let n = self.layout.actor_proj.input_dim();
        Ok(FeatureVector {
            values: tape.proj_acts[..n].to_vec(),
            clamped,
        })
    }

    /// Static branch, dynamic branch and blend weight of an actor feature.
    pub fn actor_branches(&self, actor_id: &str, x_local: [f64; 3], t: f64) -> Result<(Vec<R>, Vec<R>, R), FieldError> {
        let actor = self.actor_index(actor_id)?;
        let q = SampleQuery::Actor {
            actor,
            x: x_local.map(|v| 0.5 * (v + 1.0)),
            t: self.normalize_time(t),
        };
        let mut tape = self.new_tape();
        self.encode_actor(self.params.values(), &q, &mut tape);
        let n = self.layout.static_grid.output_dim();
        Ok((tape.enc[..n].to_vec(), tape.enc[n..2 * n].to_vec(), tape.w))
    }

    pub fn decode(&self, v: EncodedFeature<'_, R>) -> Result<(R, Vec<R>), FieldError> {
        let (proj, x) = match v {
            EncodedFeature::Environment(x) => (&self.layout.env_proj, x),
            EncodedFeature::Actor(x) => (&self.layout.actor_proj, x),
        };
        if x.len() != proj.input_dim() {
            return Err(FieldError::DimensionMismatch {
                expected: proj.input_dim(),
                got: x.len(),
            });
        }
        let mut tape = self.new_tape();
        tape.proj_acts[..x.len()].copy_from_slice(x);
        self.project_and_decode(self.params.values(), proj, &mut tape);
        Ok((tape.s(), tape.f().to_vec()))
    }

    /// Sky feature for a direction; flags and normalizes non-unit input.
    pub fn sky_eval(&self, d: [f64; 3]) -> FeatureVector<R> {
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let flagged = (n - 1.0).abs() > 1e-9;
        let du = if flagged && n > 0.0 { d.map(|v| v / n) } else { d };
        let mut tape = self.new_sky_tape();
        self.sky_forward(self.params.values(), &du, &mut tape);
        FeatureVector {
            values: tape.feature(self).to_vec(),
            clamped: flagged,
        }
    }

    // ---- tape-based forward/backward over an explicit parameter slice ----

    pub fn new_tape(&self) -> SampleTape<R> {
        let l = &self.layout;
        let enc = l.env_grid.output_dim().max(2 * l.static_grid.output_dim());
        let proj = l.env_proj.activation_len().max(l.actor_proj.activation_len());
        SampleTape {
            query: SampleQuery::Env { x: [0.0; 3] },
            enc: vec![R::zero(); enc],
            ratio_acts: vec![R::zero(); l.ratio.activation_len()],
            w: R::zero(),
            proj_acts: vec![R::zero(); proj],
            dec_acts: vec![R::zero(); l.decoder.activation_len()],
            app: self.config.appearance_dim,
        }
    }

    pub fn new_scratch(&self) -> Scratch<R> {
        let l = &self.layout;
        let mw = [&l.env_proj, &l.actor_proj, &l.ratio, &l.decoder, &l.sky]
            .iter()
            .map(|m| m.max_width())
            .max()
            .unwrap();
        let n = l.static_grid.output_dim();
        Scratch {
            mlp: vec![R::zero(); 2 * mw],
            d_latent: vec![R::zero(); self.config.latent_dim],
            d_proj_in: vec![R::zero(); mw],
            d_ratio_in: vec![R::zero(); 2 * n],
            d_static: vec![R::zero(); n],
            d_dynamic: vec![R::zero(); n],
            d_out: vec![R::zero(); 1 + self.config.appearance_dim],
        }
    }

    pub fn new_sky_tape(&self) -> SkyTape<R> {
        SkyTape {
            acts: vec![R::zero(); self.layout.sky.activation_len()],
        }
    }

    /// Writes static, dynamic, blended and embedding values into the tape.
    fn encode_actor(&self, params: &[R], q: &SampleQuery, tape: &mut SampleTape<R>) -> bool {
        let SampleQuery::Actor { actor, x, t } = *q else {
            unreachable!("encode_actor called with an environment query")
        };
        let l = &self.layout;
        let n = l.static_grid.output_dim();
        let mut clamped = l.static_grid.encode(params, &x, &mut tape.ratio_acts[..n]);
        clamped |= l.dynamic_grid.encode(params, &[x[0], x[1], x[2], t], &mut tape.ratio_acts[n..2 * n]);
        tape.enc[..2 * n].copy_from_slice(&tape.ratio_acts[..2 * n]);
        l.ratio.forward_in_place(params, &mut tape.ratio_acts);
        let w = sigmoid(l.ratio.output(&tape.ratio_acts)[0]);
        tape.w = w;
        for k in 0..n {
            tape.proj_acts[k] = w * tape.enc[k] + (R::one() - w) * tape.enc[n + k];
        }
        let e = self.config.embedding_dim;
        let emb = l.embeddings + actor * e;
        tape.proj_acts[n..n + e].copy_from_slice(&params[emb..emb + e]);
        clamped
    }

    /// Runs a projection whose input already sits in `proj_acts`, then the decoder.
    fn project_and_decode(&self, params: &[R], proj: &Mlp, tape: &mut SampleTape<R>) {
        let pa = &mut tape.proj_acts[..proj.activation_len()];
        proj.forward_in_place(params, pa);
        let d = self.config.latent_dim;
        tape.dec_acts[..d].copy_from_slice(proj.output(pa));
        self.layout.decoder.forward_in_place(params, &mut tape.dec_acts);
    }

    /// Full forward pass for one sample point. Returns s; f is `tape.f()`.
    pub fn forward_sample(&self, params: &[R], q: SampleQuery, tape: &mut SampleTape<R>) -> R {
        tape.query = q;
        let l = &self.layout;
        match q {
            SampleQuery::Env { x } => {
                let n = l.env_grid.output_dim();
                l.env_grid.encode(params, &x, &mut tape.proj_acts[..n]);
                self.project_and_decode(params, &l.env_proj, tape);
            }
            SampleQuery::Actor { .. } => {
                self.encode_actor(params, &q, tape);
                self.project_and_decode(params, &l.actor_proj, tape);
            }
        }
        tape.s()
    }

    /// Accumulates parameter gradients given dL/ds and dL/df for one sample.
    pub fn backward_sample(
        &self,
        params: &[R],
        tape: &SampleTape<R>,
        d_s: R,
        d_f: &[R],
        grads: &mut [R],
        scratch: &mut Scratch<R>,
    ) {
        let l = &self.layout;
        scratch.d_out[0] = d_s;
        scratch.d_out[1..].copy_from_slice(d_f);
        l.decoder.backward(
            params,
            &tape.dec_acts,
            &scratch.d_out,
            grads,
            Some(&mut scratch.d_latent),
            &mut scratch.mlp,
        );
        match tape.query {
            SampleQuery::Env { x } => {
                let p = &l.env_proj;
                p.backward(
                    params,
                    &tape.proj_acts[..p.activation_len()],
                    &scratch.d_latent,
                    grads,
                    Some(&mut scratch.d_proj_in),
                    &mut scratch.mlp,
                );
                l.env_grid.backward(&x, &scratch.d_proj_in[..p.input_dim()], grads);
            }
            SampleQuery::Actor { actor, x, t } => {
                let p = &l.actor_proj;
                p.backward(
                    params,
                    &tape.proj_acts[..p.activation_len()],
                    &scratch.d_latent,
                    grads,
                    Some(&mut scratch.d_proj_in),
                    &mut scratch.mlp,
                );
                let n = l.static_grid.output_dim();
                let e = self.config.embedding_dim;
                let emb = l.embeddings + actor * e;
                for k in 0..e {
                    grads[emb + k] += scratch.d_proj_in[n + k];
                }
                let w = tape.w;
                let mut d_w = R::zero();
                for k in 0..n {
                    let g = scratch.d_proj_in[k];
                    scratch.d_static[k] = w * g;
                    scratch.d_dynamic[k] = (R::one() - w) * g;
                    d_w += g * (tape.enc[k] - tape.enc[n + k]);
                }
                let d_logit = [d_w * w * (R::one() - w)];
                l.ratio.backward(
                    params,
                    &tape.ratio_acts,
                    &d_logit,
                    grads,
                    Some(&mut scratch.d_ratio_in),
                    &mut scratch.mlp,
                );
                for k in 0..n {
                    scratch.d_static[k] += scratch.d_ratio_in[k];
                    scratch.d_dynamic[k] += scratch.d_ratio_in[n + k];
                }
                l.static_grid.backward(&x, &scratch.d_static, grads);
                l.dynamic_grid.backward(&[x[0], x[1], x[2], t], &scratch.d_dynamic, grads);
            }
        }
    }

    /// Sky forward for a unit direction.
    pub fn sky_forward(&self, params: &[R], d: &[f64; 3], tape: &mut SkyTape<R>) {
        let mut enc = [0.0; 96];
        let n = self.config.sky_input_dim();
        encode_direction(d, self.config.sky_octaves, &mut enc[..n]);
        for (a, e) in tape.acts.iter_mut().zip(&enc[..n]) {
            *a = R::of(*e);
        }
        self.layout.sky.forward_in_place(params, &mut tape.acts);
    }

    pub fn sky_backward(&self, params: &[R], tape: &SkyTape<R>, d_f: &[R], grads: &mut [R], scratch: &mut Scratch<R>) {
        self.layout
            .sky
            .backward(params, &tape.acts, d_f, grads, None, &mut scratch.mlp);
    }

    /// Direct-mode color: sigmoid of the learned projection of a feature.
    pub fn rgb_forward(&self, params: &[R], feature: &[R]) -> [R; 3] {
        let h = &self.layout.rgb_head;
        let (w, b) = (h.weight_offset(0), h.bias_offset(0));
        let n = self.config.appearance_dim;
        std::array::from_fn(|c| {
            let row = &params[w + c * n..w + (c + 1) * n];
            let z = row.iter().zip(feature).fold(params[b + c], |acc, (wv, fv)| acc + *wv * *fv);
            sigmoid(z)
        })
    }

    /// Accumulates head gradients from dL/drgb and adds dL/dfeature into
    /// `d_feature`.
    pub fn rgb_backward(
        &self,
        params: &[R],
        feature: &[R],
        rgb: &[R; 3],
        d_rgb: &[R; 3],
        grads: &mut [R],
        d_feature: &mut [R],
    ) {
        let h = &self.layout.rgb_head;
        let (w, b) = (h.weight_offset(0), h.bias_offset(0));
        let n = self.config.appearance_dim;
        for c in 0..3 {
            let dz = d_rgb[c] * rgb[c] * (R::one() - rgb[c]);
            grads[b + c] += dz;
            for k in 0..n {
                grads[w + c * n + k] += dz * feature[k];
                d_feature[k] += dz * params[w + c * n + k];
            }
        }
    }
}
