//! Toy latent-diffusion backbone.
//!
//! Each block is a residual self-attention followed by a residual
//! cross-attention over token embeddings; a position-wise MLP conditioned on
//! the timestep maps the final features to an ε-prediction. Weights are
//! random and untrained. Attention probabilities are captured on every
//! forward, and the self-attention probabilities can be replaced wholesale.

use crate::error::{PdiError, Result};
use crate::latent::LatentGrid;
use crate::numerics::{
    seeded_gaussian, softmax_rows, softmax_rows_backward, token_embedding, RealMatrix,
    SeededStream,
};

/// Training-time step count the sampling schedule is drawn from.
pub const TRAIN_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

const POSITION_GAIN: f64 = 0.5;
/// Extra scale on the self-attention query and key weights. Sharper
/// self-attention makes the maps carry layout.
const SELF_ATTENTION_GAIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub model_width: usize,
    pub key_dim: usize,
    pub layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            model_width: 32,
            key_dim: 16,
            layers: 1,
        }
    }
}

impl ModelDims {
    pub fn with_resolution(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(PdiError::config(what.to_string()));
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.layers == 0 {
            return bad("latent dims and layer count must be positive");
        }
        if self.height > 64 || self.width > 64 {
            return bad("latent height/width must be <= 64");
        }
        if self.model_width < 4 || self.key_dim < 4 {
            return bad("model width and key dim must be >= 4");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub self_query: RealMatrix,
    pub self_key: RealMatrix,
    pub self_value: RealMatrix,
    pub cross_query: RealMatrix,
    pub cross_key: RealMatrix,
    pub cross_value: RealMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub input_proj: RealMatrix,
    pub positional: RealMatrix,
    pub layers: Vec<LayerParams>,
    pub time_proj: RealMatrix,
    pub mix_hidden: RealMatrix,
    pub mix_bias: Vec<f64>,
    pub mix_out: RealMatrix,
}

impl ModelParams {
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.model_width;
        let dk = dims.key_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut stream = SeededStream::new(seed);
        let mut draw = |rows: usize, cols: usize| {
            let mut v = seeded_gaussian(&mut stream, rows * cols);
            v.iter_mut().for_each(|x| *x *= scale);
            RealMatrix::from_raw(rows, cols, v)
        };
        let input_proj = draw(dims.channels, d);
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                self_query: draw(d, dk).scaled(SELF_ATTENTION_GAIN),
                self_key: draw(d, dk).scaled(SELF_ATTENTION_GAIN),
                self_value: draw(d, d),
                cross_query: draw(d, dk),
                cross_key: draw(d, dk),
                cross_value: draw(d, d),
            })
            .collect();
        let time_proj = draw(d, d);
        let mix_hidden = draw(d, d);
        let mix_bias = draw(1, d).into_values();
        let mix_out = draw(d, dims.channels);
        Ok(Self {
            dims,
            seed,
            input_proj,
            positional: positional_encoding(&dims),
            layers,
            time_proj,
            mix_hidden,
            mix_bias,
            mix_out,
        })
    }

    /// Stacks hash embeddings of `tokens` into an `L × d` matrix.
    pub fn embed(&self, tokens: &[String]) -> Result<PromptEmbedding> {
        if tokens.is_empty() {
            return Err(PdiError::ParseInput("prompt has no tokens".into()));
        }
        let d = self.dims.model_width;
        let mut values = Vec::with_capacity(tokens.len() * d);
        for tok in tokens {
            values.extend(token_embedding(tok, d)?);
        }
        Ok(PromptEmbedding {
            tokens: tokens.to_vec(),
            matrix: RealMatrix::from_raw(tokens.len(), d, values),
        })
    }
}

/// Fixed 2-D sinusoidal features: rows and columns each get `d/4` harmonics.
fn positional_encoding(dims: &ModelDims) -> RealMatrix {
    let d = dims.model_width;
    let harmonics = d / 4;
    RealMatrix::from_fn(dims.positions(), d, |p, k| {
        let (row, col) = ((p / dims.width) as f64, (p % dims.width) as f64);
        let j = k / 4;
        if j >= harmonics {
            return 0.0;
        }
        let fr = (j + 1) as f64 * std::f64::consts::PI / dims.height as f64;
        let fc = (j + 1) as f64 * std::f64::consts::PI / dims.width as f64;
        POSITION_GAIN
            * match k % 4 {
                0 => libm::sin(row * fr),
                1 => libm::cos(row * fr),
                2 => libm::sin(col * fc),
                _ => libm::cos(col * fc),
            }
    })
}

fn timestep_embedding(step: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let arg = step as f64 * freq;
        out[k] = libm::sin(arg);
        out[k + half] = libm::cos(arg);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<String>,
    pub matrix: RealMatrix,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sampling schedule: `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    train_steps: Vec<usize>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Linear betas over [`TRAIN_STEPS`], subsampled evenly to `steps`.
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 || steps > TRAIN_STEPS {
            return Err(PdiError::config(format!(
                "step count must be in 1..={TRAIN_STEPS}, got {steps}"
            )));
        }
        let mut cumulative = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let beta =
                BETA_START + (BETA_END - BETA_START) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let mut train_steps = vec![0];
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            let idx = t * TRAIN_STEPS / steps - 1;
            train_steps.push(idx + 1);
            alpha_bar.push(cumulative[idx]);
        }
        Ok(Self {
            steps,
            train_steps,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Training-scale timestep fed to the timestep embedding.
    pub fn train_step(&self, t: usize) -> usize {
        self.train_steps[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(PdiError::Index {
                index: t,
                valid: format!("1..={}", self.steps),
            });
        }
        Ok(())
    }
}

/// Attention probabilities from one forward pass, one matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedAttention {
    /// `HW × HW` per layer.
    pub self_maps: Vec<RealMatrix>,
    /// `HW × L` per layer.
    pub cross_maps: Vec<RealMatrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub noise_pred: LatentGrid,
    pub captured: CapturedAttention,
}

struct LayerTape {
    self_query: RealMatrix,
    self_key: RealMatrix,
    self_value: RealMatrix,
    self_probs: RealMatrix,
    overridden: bool,
    cross_key: RealMatrix,
    cross_value: RealMatrix,
    cross_probs: RealMatrix,
}

pub(crate) struct ForwardTape {
    layers: Vec<LayerTape>,
}

impl ForwardTape {
    pub(crate) fn cross_maps(&self) -> Vec<&RealMatrix> {
        self.layers.iter().map(|l| &l.cross_probs).collect()
    }
}

/// Model parameters plus the sampling schedule they are run under.
#[derive(Debug, Clone)]
pub struct Denoiser {
    params: ModelParams,
    schedule: Schedule,
}

impl Denoiser {
    pub fn new(params: ModelParams, schedule: Schedule) -> Self {
        Self { params, schedule }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn dims(&self) -> &ModelDims {
        &self.params.dims
    }

    pub fn embed(&self, tokens: &[String]) -> Result<PromptEmbedding> {
        self.params.embed(tokens)
    }

    fn check_inputs(&self, z: &LatentGrid, sa_override: Option<&[RealMatrix]>) -> Result<()> {
        let dims = &self.params.dims;
        if z.shape() != (dims.height, dims.width, dims.channels) {
            return Err(PdiError::shape(format!(
                "latent {:?} does not match model {}x{}x{}",
                z.shape(),
                dims.height,
                dims.width,
                dims.channels
            )));
        }
        if let Some(maps) = sa_override {
            let hw = dims.positions();
            let expected = format!("{} maps of {hw}x{hw}", dims.layers);
            if maps.len() != dims.layers
                || maps.iter().any(|m| m.rows() != hw || m.cols() != hw)
            {
                let got = maps
                    .iter()
                    .map(|m| format!("{}x{}", m.rows(), m.cols()))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(PdiError::AttentionShape {
                    expected,
                    got: format!("[{got}]"),
                });
            }
        }
        Ok(())
    }

    /// Runs the attention blocks, recording what the backward pass needs.
    /// Returns the final block features and the tape.
    fn attention_blocks(
        &self,
        z: &LatentGrid,
        prompt: &PromptEmbedding,
        sa_override: Option<&[RealMatrix]>,
    ) -> Result<(RealMatrix, ForwardTape)> {
        self.check_inputs(z, sa_override)?;
        let p = &self.params;
        let inv_sqrt_dk = 1.0 / (p.dims.key_dim as f64).sqrt();

        let mut h = z.to_matrix().matmul(&p.input_proj);
        h.add_assign(&p.positional);

        let mut layers = Vec::with_capacity(p.layers.len());
        for (l, lp) in p.layers.iter().enumerate() {
            let self_query = h.matmul(&lp.self_query);
            let self_key = h.matmul(&lp.self_key);
            let self_value = h.matmul(&lp.self_value);
            let (self_probs, overridden) = match sa_override {
                Some(maps) => (maps[l].clone(), true),
                None => {
                    let mut logits = self_query.matmul_t(&self_key);
                    logits.scale(inv_sqrt_dk);
                    (softmax_rows(&logits)?, false)
                }
            };
            let mut mid = h;
            mid.add_assign(&self_probs.matmul(&self_value));

            let cross_query = mid.matmul(&lp.cross_query);
            let cross_key = prompt.matrix.matmul(&lp.cross_key);
            let cross_value = prompt.matrix.matmul(&lp.cross_value);
            let mut logits = cross_query.matmul_t(&cross_key);
            logits.scale(inv_sqrt_dk);
            let cross_probs = softmax_rows(&logits)?;
            let mut out = mid;
            out.add_assign(&cross_probs.matmul(&cross_value));
            h = out;

            layers.push(LayerTape {
                self_query,
                self_key,
                self_value,
                self_probs,
                overridden,
                cross_key,
                cross_value,
                cross_probs,
            });
        }
        Ok((h, ForwardTape { layers }))
    }

    /// Predicts the noise in `z` at step `t`. With `sa_override`, the given
    /// probability maps replace the computed self-attention in every layer
    /// and are reported as captured.
    pub fn forward(
        &self,
        z: &LatentGrid,
        prompt: &PromptEmbedding,
        t: usize,
        sa_override: Option<&[RealMatrix]>,
    ) -> Result<ForwardOutput> {
        self.schedule.check_step(t)?;
        let (features, tape) = self.attention_blocks(z, prompt, sa_override)?;
        let p = &self.params;
        let d = p.dims.model_width;

        let temb = timestep_embedding(self.schedule.train_step(t), d);
        let time_row = RealMatrix::from_raw(1, d, temb).matmul(&p.time_proj);
        let mut pre = features;
        for r in 0..pre.rows() {
            let row = &mut pre.values_mut()[r * d..(r + 1) * d];
            for (v, tv) in row.iter_mut().zip(time_row.values()) {
                *v += tv;
            }
        }
        let mut hidden = pre.matmul(&p.mix_hidden);
        for r in 0..hidden.rows() {
            let row = &mut hidden.values_mut()[r * d..(r + 1) * d];
            for (v, b) in row.iter_mut().zip(&p.mix_bias) {
                *v = libm::tanh(*v + b);
            }
        }
        let eps = hidden.matmul(&p.mix_out);
        let (hgt, wid, ch) = (p.dims.height, p.dims.width, p.dims.channels);
        let captured = CapturedAttention {
            self_maps: tape.layers.iter().map(|l| l.self_probs.clone()).collect(),
            cross_maps: tape.layers.iter().map(|l| l.cross_probs.clone()).collect(),
        };
        Ok(ForwardOutput {
            noise_pred: LatentGrid::from_raw(hgt, wid, ch, eps.into_values()),
            captured,
        })
    }

    /// Cross-attention probabilities only, with the tape for
    /// [`Denoiser::cross_attention_vjp`].
    pub(crate) fn cross_attention_taped(
        &self,
        z: &LatentGrid,
        prompt: &PromptEmbedding,
        sa_override: Option<&[RealMatrix]>,
    ) -> Result<ForwardTape> {
        Ok(self.attention_blocks(z, prompt, sa_override)?.1)
    }

    /// Pulls `dL/dA_l` for every layer's cross-attention probabilities back
    /// to `dL/dz`. Overridden self-attention maps are constants.
    pub(crate) fn cross_attention_vjp(
        &self,
        tape: &ForwardTape,
        grad_cross: &[RealMatrix],
    ) -> LatentGrid {
        let p = &self.params;
        let inv_sqrt_dk = 1.0 / (p.dims.key_dim as f64).sqrt();
        let hw = p.dims.positions();
        let mut grad_h = RealMatrix::zeros(hw, p.dims.model_width);

        for (l, (lp, lt)) in p.layers.iter().zip(&tape.layers).enumerate().rev() {
            // out = mid + A·Vc
            let mut grad_a = grad_h.matmul_t(&lt.cross_value);
            grad_a.add_assign(&grad_cross[l]);
            let mut grad_logits = softmax_rows_backward(&lt.cross_probs, &grad_a);
            grad_logits.scale(inv_sqrt_dk);
            let grad_cq = grad_logits.matmul(&lt.cross_key);
            let mut grad_mid = grad_h;
            grad_mid.add_assign(&grad_cq.matmul_t(&lp.cross_query));

            // mid = h + P·V
            let grad_v = lt.self_probs.t_matmul(&grad_mid);
            let mut grad_in = grad_mid.clone();
            grad_in.add_assign(&grad_v.matmul_t(&lp.self_value));
            if !lt.overridden {
                let grad_p = grad_mid.matmul_t(&lt.self_value);
                let mut grad_s = softmax_rows_backward(&lt.self_probs, &grad_p);
                grad_s.scale(inv_sqrt_dk);
                let grad_q = grad_s.matmul(&lt.self_key);
                let grad_k = grad_s.t_matmul(&lt.self_query);
                grad_in.add_assign(&grad_q.matmul_t(&lp.self_query));
                grad_in.add_assign(&grad_k.matmul_t(&lp.self_key));
            }
            grad_h = grad_in;
        }
        let grad_z = grad_h.matmul_t(&p.input_proj);
        LatentGrid::from_raw(
            p.dims.height,
            p.dims.width,
            p.dims.channels,
            grad_z.into_values(),
        )
    }

    /// One deterministic DDIM update from `t` to `t - 1`.
    pub fn ddim_step(&self, z: &LatentGrid, noise_pred: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.schedule.check_step(t)?;
        if z.shape() != noise_pred.shape() {
            return Err(PdiError::shape("latent and noise prediction differ in shape"));
        }
        Ok(ddim_update(
            z,
            noise_pred,
            self.schedule.alpha_bar(t),
            self.schedule.alpha_bar(t - 1),
        ))
    }
}

/// `ẑ₀ = (z − √(1−ᾱ_t)·ε)/√ᾱ_t`, then `z_{t−1} = √ᾱ_{t−1}·ẑ₀ + √(1−ᾱ_{t−1})·ε`.
pub fn ddim_update(z: &LatentGrid, eps: &LatentGrid, alpha_bar_t: f64, alpha_bar_prev: f64) -> LatentGrid {
    let (sa, sb) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &ev)| {
            let x0 = (zv - sb * ev) / sa;
            pa * x0 + pb * ev
        })
        .collect();
    let (h, w, c) = z.shape();
    LatentGrid::from_raw(h, w, c, data)
}

/// Standard-normal starting latent shared by every branch.
pub fn sample_init(seed: u64, dims: &ModelDims) -> Result<LatentGrid> {
    dims.validate()?;
    let n = dims.positions() * dims.channels;
    let data = seeded_gaussian(&mut SeededStream::new(seed), n);
    Ok(LatentGrid::from_raw(dims.height, dims.width, dims.channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small() -> Denoiser {
        let dims = ModelDims::with_resolution(8, 8);
        Denoiser::new(ModelParams::init(3, dims).unwrap(), Schedule::new(20).unwrap())
    }

    #[test]
    fn params_are_deterministic() {
        let a = ModelParams::init(11, ModelDims::default()).unwrap();
        let b = ModelParams::init(11, ModelDims::default()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(12, ModelDims::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_dims() {
        let dims = ModelDims { key_dim: 0, ..ModelDims::default() };
        assert!(matches!(ModelParams::init(0, dims), Err(PdiError::Config(_))));
        let dims = ModelDims::with_resolution(65, 8);
        assert!(ModelParams::init(0, dims).is_err());
    }

    #[test]
    fn default_self_map_is_256_square() {
        let dims = ModelDims::default();
        let model = Denoiser::new(ModelParams::init(0, dims).unwrap(), Schedule::new(50).unwrap());
        let z = sample_init(1, &dims).unwrap();
        assert_eq!(z.len(), 768);
        let prompt = model.embed(&toks("a red dog")).unwrap();
        let out = model.forward(&z, &prompt, 50, None).unwrap();
        assert_eq!(out.captured.self_maps[0].rows(), 256);
        assert_eq!(out.captured.self_maps[0].cols(), 256);
        assert_eq!(out.captured.cross_maps[0].cols(), 3);
        assert!(out.captured.self_maps[0].is_row_stochastic(1e-6));
        assert!(out.captured.cross_maps[0].is_row_stochastic(1e-6));
    }

    #[test]
    fn identity_override_passes_through() {
        let model = small();
        let z = sample_init(5, model.dims()).unwrap();
        let prompt = model.embed(&toks("a cat")).unwrap();
        let id = [RealMatrix::identity(64)];
        let out = model.forward(&z, &prompt, 10, Some(&id)).unwrap();
        assert_eq!(out.captured.self_maps[0], id[0]);
    }

    #[test]
    fn override_with_own_map_is_bit_identical() {
        let model = small();
        let z = sample_init(6, model.dims()).unwrap();
        let prompt = model.embed(&toks("a blue cat")).unwrap();
        let plain = model.forward(&z, &prompt, 7, None).unwrap();
        let again = model
            .forward(&z, &prompt, 7, Some(&plain.captured.self_maps))
            .unwrap();
        assert!(plain.noise_pred.bit_eq(&again.noise_pred));
        let rerun = model.forward(&z, &prompt, 7, None).unwrap();
        assert!(plain.noise_pred.bit_eq(&rerun.noise_pred));
    }

    #[test]
    fn override_shape_is_checked() {
        let model = small();
        let z = sample_init(6, model.dims()).unwrap();
        let prompt = model.embed(&toks("a cat")).unwrap();
        let wrong = [RealMatrix::identity(16)];
        assert!(matches!(
            model.forward(&z, &prompt, 1, Some(&wrong)),
            Err(PdiError::AttentionShape { .. })
        ));
        assert!(model.forward(&z, &prompt, 0, None).is_err());
        assert!(model.forward(&z, &prompt, 21, None).is_err());
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = Schedule::new(50).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!(Schedule::new(0).is_err());
        assert!(Schedule::new(1001).is_err());
    }

    #[test]
    fn ddim_closed_forms() {
        let z = LatentGrid::new(1, 1, 1, vec![1.0]).unwrap();
        let zero = LatentGrid::filled(1, 1, 1, 0.0);
        let out = ddim_update(&z, &zero, 0.25, 0.64);
        assert!((out.data()[0] - (0.64f64 / 0.25).sqrt()).abs() < 1e-12);

        let same = ddim_update(&z, &zero, 0.5, 0.5);
        assert!((same.data()[0] - 1.0).abs() < 1e-15);

        // hand evaluation: x0 = (1 - sqrt(0.75)) / 0.5, z' = 0.8 x0 + 0.6
        let one = LatentGrid::filled(1, 1, 1, 1.0);
        let out = ddim_update(&z, &one, 0.25, 0.64);
        let x0 = (1.0 - 0.75f64.sqrt()) / 0.5;
        assert!((out.data()[0] - (0.8 * x0 + 0.6)).abs() < 1e-12);
    }

    #[test]
    fn ddim_step_range() {
        let model = small();
        let z = sample_init(0, model.dims()).unwrap();
        assert!(matches!(model.ddim_step(&z, &z, 0), Err(PdiError::Index { .. })));
        assert!(model.ddim_step(&z, &z, 20).is_ok());
    }

    #[test]
    fn init_latent_is_reproducible() {
        let dims = ModelDims::default();
        let a = sample_init(9, &dims).unwrap();
        assert!(a.bit_eq(&sample_init(9, &dims).unwrap()));
        assert!(!a.bit_eq(&sample_init(10, &dims).unwrap()));
    }

    #[test]
    fn multi_layer_forward() {
        let dims = ModelDims {
            layers: 3,
            ..ModelDims::with_resolution(4, 4)
        };
        let model = Denoiser::new(ModelParams::init(1, dims).unwrap(), Schedule::new(5).unwrap());
        let z = sample_init(2, &dims).unwrap();
        let prompt = model.embed(&toks("a dog")).unwrap();
        let out = model.forward(&z, &prompt, 3, None).unwrap();
        assert_eq!(out.captured.self_maps.len(), 3);
        assert_eq!(out.captured.cross_maps.len(), 3);
    }
}
