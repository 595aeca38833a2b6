//! Multi-branch sampling with shared self-attention and masked latent
//! injection.
//!
//! All branches start from the same latent. For the first `S` steps every
//! branch after the first reuses the first branch's self-attention
//! probabilities, and after each step the attribute branches are chained:
//! `z_{i+1} ← z_i + B_i ⊙ (ẑ_{i+1} − z_i)`. The remaining `T − S` steps run
//! each branch on its own.

use crate::denoiser::{
    sample_init, CapturedAttention, Denoiser, ForwardOutput, ModelDims, ModelParams,
    PromptEmbedding, Schedule,
};
use crate::error::{PdiError, Result};
use crate::latent::LatentGrid;
use crate::mask::{align_mask, binarize, subject_map, BinaryMask};
use crate::nurse::{nurse_update, NurseConfig, NurseContext, NurseSubject};
use crate::numerics::RealMatrix;
use crate::prompt::{DecompositionConfig, PromptPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSource {
    /// Mask `B_i` comes from the branch that introduces the attribute.
    #[default]
    Branch,
    /// Every mask comes from the first branch's cross-attention. Nursing then
    /// targets the first branch as well.
    First,
}

/// How the masked injection step is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Injection {
    #[default]
    Masked,
    /// Every mask is forced to zero.
    ZeroMasks,
    /// No injection at all; branches only share self-attention.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdiConfig {
    pub steps: usize,
    /// `S / T`.
    pub share_fraction: f64,
    pub tau: f64,
    pub mask_source: MaskSource,
    pub nurse: NurseConfig,
    pub decomposition: DecompositionConfig,
    /// Reuse the first branch's self-attention during the shared window.
    pub share_self_attention: bool,
    pub injection: Injection,
    pub model_seed: u64,
    pub dims: ModelDims,
    /// Run branch forwards of a step concurrently.
    pub parallel: bool,
    /// Keep every intermediate latent in the trace.
    pub record_latents: bool,
}

impl Default for PdiConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            share_fraction: 0.8,
            tau: 0.5,
            mask_source: MaskSource::Branch,
            nurse: NurseConfig::default(),
            decomposition: DecompositionConfig::B,
            share_self_attention: true,
            injection: Injection::Masked,
            model_seed: 0,
            dims: ModelDims::default(),
            parallel: false,
            record_latents: false,
        }
    }
}

impl PdiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(PdiError::config("step count must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.share_fraction) {
            return Err(PdiError::config(format!(
                "share fraction must be in [0, 1], got {}",
                self.share_fraction
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(PdiError::config(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        self.nurse.validate()?;
        self.dims.validate()
    }

    /// Number of leading steps `S` run with sharing and injection.
    pub fn shared_steps(&self) -> usize {
        (self.share_fraction * self.steps as f64).round() as usize
    }

    /// Number of leading steps with nursing active.
    pub fn nurse_steps(&self) -> usize {
        if self.nurse.inner_steps == 0 {
            0
        } else {
            self.nurse.window.min(self.shared_steps())
        }
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        self.validate()?;
        Ok(Denoiser::new(
            ModelParams::init(self.model_seed, self.dims)?,
            Schedule::new(self.steps)?,
        ))
    }
}

/// `z_prev + B ⊙ (z_hat − z_prev)`, with `B` broadcast across channels.
/// Binary masks make this a per-cell selection, so it is evaluated as one.
pub fn alm(z_prev: &LatentGrid, z_hat: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid> {
    if z_prev.shape() != z_hat.shape() {
        return Err(PdiError::shape(format!(
            "latents differ: {:?} vs {:?}",
            z_prev.shape(),
            z_hat.shape()
        )));
    }
    let (h, w, c) = z_prev.shape();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(PdiError::shape(format!(
            "{}x{} mask for a {h}x{w} latent",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = z_prev.clone();
    for (p, &b) in mask.values().iter().enumerate() {
        if b == 1 {
            out.data_mut()[p * c..(p + 1) * c].copy_from_slice(&z_hat.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLatent {
    /// Sub-prompt index of the branch.
    pub branch: usize,
    pub t: usize,
    pub latent: LatentGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub t: usize,
    pub branch: usize,
    pub align: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRow {
    pub t: usize,
    pub branch: usize,
    pub ones: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub latents: Vec<TraceLatent>,
    pub losses: Vec<LossRow>,
    pub masks: Vec<MaskRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Final latent per branch, in plan order.
    pub branches: Vec<LatentGrid>,
    pub trace: RunTrace,
}

impl RunOutput {
    /// The last branch, which carries every injected attribute.
    pub fn output(&self) -> &LatentGrid {
        self.branches.last().expect("a plan has at least one branch")
    }
}

/// Per-step observation passed to [`run_observed`].
#[derive(Debug)]
pub enum StepEvent<'a> {
    Attention {
        t: usize,
        branch: usize,
        captured: &'a CapturedAttention,
    },
    Mask {
        t: usize,
        branch: usize,
        mask: &'a BinaryMask,
    },
}

pub fn run(plan: &PromptPlan, cfg: &PdiConfig, seed: u64) -> Result<RunOutput> {
    run_observed(plan, cfg, seed, &mut |_| {})
}

struct BranchCtx {
    index: usize,
    prompt: PromptEmbedding,
    /// Subject span in this branch, for branches that add an attribute.
    subject: Option<NurseSubject>,
    /// Subject span of this branch's attribute inside the first branch.
    subject_in_first: Option<NurseSubject>,
}

pub fn run_observed(
    plan: &PromptPlan,
    cfg: &PdiConfig,
    seed: u64,
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<RunOutput> {
    let denoiser = cfg.denoiser()?;
    if plan.branches.is_empty() {
        return Err(PdiError::config("plan has no branches"));
    }
    let first = &plan.branches[0];
    let branches: Vec<BranchCtx> = plan
        .branches
        .iter()
        .map(|b| {
            Ok(BranchCtx {
                index: b.index,
                prompt: denoiser.embed(&b.tokens)?,
                subject: b.subject.as_ref().map(|s| NurseSubject {
                    text: s.text.clone(),
                    span: s.span.clone(),
                }),
                subject_in_first: b.subject.as_ref().map(|s| NurseSubject {
                    text: s.text.clone(),
                    span: first.entity_spans[s.entity].clone(),
                }),
            })
        })
        .collect::<Result<_>>()?;
    // injection chain runs from the attribute-free base prompt onwards
    let base = plan.branches.iter().position(|b| b.index == 1);
    let mut first_subjects: Vec<NurseSubject> = Vec::new();
    for s in branches.iter().filter_map(|b| b.subject_in_first.as_ref()) {
        if !first_subjects.contains(s) {
            first_subjects.push(s.clone());
        }
    }

    let dims = *denoiser.dims();
    let steps = cfg.steps;
    let shared = cfg.shared_steps();
    let nursed = cfg.nurse_steps();
    let init = sample_init(seed, &dims)?;
    let mut latents = vec![init; branches.len()];
    let mut trace = RunTrace::default();
    let record = |trace: &mut RunTrace, latents: &[LatentGrid], t: usize| {
        if cfg.record_latents {
            for (b, z) in branches.iter().zip(latents) {
                trace.latents.push(TraceLatent {
                    branch: b.index,
                    t,
                    latent: z.clone(),
                });
            }
        }
    };
    record(&mut trace, &latents, steps);

    for (step_no, t) in (1..=steps).rev().enumerate() {
        let in_shared = step_no < shared;
        let nurse_now = in_shared && step_no < nursed;

        if !in_shared {
            let outs = for_each_branch(cfg.parallel, branches.len(), |j| {
                denoiser.forward(&latents[j], &branches[j].prompt, t, None)
            })?;
            for (j, out) in outs.iter().enumerate() {
                observer(StepEvent::Attention {
                    t,
                    branch: branches[j].index,
                    captured: &out.captured,
                });
                latents[j] = denoiser.ddim_step(&latents[j], &out.noise_pred, t)?;
            }
            record(&mut trace, &latents, t - 1);
            continue;
        }

        if nurse_now && cfg.mask_source == MaskSource::First && !first_subjects.is_empty() {
            let ctx = NurseContext {
                denoiser: &denoiser,
                prompt: &branches[0].prompt,
                subjects: &first_subjects,
                sa_override: None,
            };
            let outcome = nurse_update(&latents[0], &ctx, &cfg.nurse)?;
            trace.losses.push(loss_row(t, branches[0].index, &outcome.report));
            latents[0] = outcome.latent;
        }
        let lead = denoiser.forward(&latents[0], &branches[0].prompt, t, None)?;
        let shared_maps: Option<&[RealMatrix]> = cfg
            .share_self_attention
            .then_some(lead.captured.self_maps.as_slice());

        let nurse_branches = nurse_now && cfg.mask_source == MaskSource::Branch;
        let rest = for_each_branch(cfg.parallel, branches.len() - 1, |k| {
            let j = k + 1;
            let b = &branches[j];
            let mut z = latents[j].clone();
            let mut loss = None;
            if let (true, Some(subject)) = (nurse_branches, &b.subject) {
                let subjects = std::slice::from_ref(subject);
                let ctx = NurseContext {
                    denoiser: &denoiser,
                    prompt: &b.prompt,
                    subjects,
                    sa_override: shared_maps,
                };
                let outcome = nurse_update(&z, &ctx, &cfg.nurse)?;
                loss = Some(loss_row(t, b.index, &outcome.report));
                z = outcome.latent;
            }
            let out = denoiser.forward(&z, &b.prompt, t, shared_maps)?;
            Ok((z, out, loss))
        })?;

        let mut outs: Vec<ForwardOutput> = Vec::with_capacity(branches.len());
        outs.push(lead);
        for (k, (z, out, loss)) in rest.into_iter().enumerate() {
            latents[k + 1] = z;
            trace.losses.extend(loss);
            outs.push(out);
        }
        for (j, out) in outs.iter().enumerate() {
            observer(StepEvent::Attention {
                t,
                branch: branches[j].index,
                captured: &out.captured,
            });
            latents[j] = denoiser.ddim_step(&latents[j], &out.noise_pred, t)?;
        }

        if let (Some(base), false) = (base, cfg.injection == Injection::Off) {
            for k in base..branches.len() - 1 {
                let next = &branches[k + 1];
                let mask = match cfg.injection {
                    Injection::ZeroMasks => BinaryMask::zeros(dims.height, dims.width),
                    _ => {
                        let (captured, subject) = match cfg.mask_source {
                            MaskSource::Branch => (&outs[k + 1].captured, next.subject.as_ref()),
                            MaskSource::First => (&outs[0].captured, next.subject_in_first.as_ref()),
                        };
                        let subject = subject.ok_or_else(|| {
                            PdiError::config(format!("branch {} has no subject", next.index))
                        })?;
                        let map = subject_map(captured, subject.span.clone(), dims.height, dims.width)?;
                        align_mask(&binarize(&map, cfg.tau)?, dims.height, dims.width)?
                    }
                };
                observer(StepEvent::Mask {
                    t,
                    branch: next.index,
                    mask: &mask,
                });
                trace.masks.push(MaskRow {
                    t,
                    branch: next.index,
                    ones: mask.count_ones(),
                    degenerate: mask.is_degenerate(),
                });
                latents[k + 1] = alm(&latents[k], &latents[k + 1], &mask)?;
            }
        }
        record(&mut trace, &latents, t - 1);
    }

    Ok(RunOutput {
        branches: latents,
        trace,
    })
}

fn loss_row(t: usize, branch: usize, report: &crate::nurse::LossReport) -> LossRow {
    LossRow {
        t,
        branch,
        align: report.align,
        entropy: report.entropy,
        total: report.total,
    }
}

#[cfg(feature = "parallel")]
fn for_each_branch<T: Send>(
    parallel: bool,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    // a single-thread pool only adds scheduling overhead
    if parallel && n > 1 && rayon::current_num_threads() > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn for_each_branch<T: Send>(
    _parallel: bool,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{decompose, parse_prompt};

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> LatentGrid {
        LatentGrid::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn alm_identities() {
        let a = grid(3, 3, 3, |i| i as f64 * 0.1 - 1.0);
        let b = grid(3, 3, 3, |i| (i as f64).sin());
        assert!(alm(&a, &b, &BinaryMask::zeros(3, 3)).unwrap().bit_eq(&a));
        assert!(alm(&a, &b, &BinaryMask::ones(3, 3)).unwrap().bit_eq(&b));
    }

    #[test]
    fn alm_single_cell() {
        let zeros = LatentGrid::filled(2, 2, 3, 0.0);
        let ones = LatentGrid::filled(2, 2, 3, 1.0);
        let mask = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let out = alm(&zeros, &ones, &mask).unwrap();
        assert_eq!(out.data()[..3], [1.0, 1.0, 1.0]);
        assert!(out.data()[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alm_shape_errors() {
        let a = LatentGrid::filled(2, 2, 3, 0.0);
        let b = LatentGrid::filled(2, 3, 3, 0.0);
        assert!(matches!(alm(&a, &b, &BinaryMask::zeros(2, 2)), Err(PdiError::Shape(_))));
        assert!(matches!(alm(&a, &a, &BinaryMask::zeros(4, 4)), Err(PdiError::Shape(_))));
    }

    fn small_cfg() -> PdiConfig {
        PdiConfig {
            steps: 10,
            dims: ModelDims::with_resolution(8, 8),
            ..PdiConfig::default()
        }
    }

    fn plan(text: &str) -> PromptPlan {
        decompose(&parse_prompt(text).unwrap(), DecompositionConfig::B)
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.share_fraction = 1.5;
        assert!(run(&plan("a red dog"), &cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.tau = 1.0;
        assert!(run(&plan("a red dog"), &cfg, 0).is_err());
        assert_eq!(PdiConfig::default().shared_steps(), 40);
        assert_eq!(PdiConfig::default().nurse_steps(), 10);
    }

    #[test]
    fn parallel_matches_serial() {
        let p = plan("a red teddy bear wearing a green tracksuit");
        let serial = run(&p, &small_cfg(), 5).unwrap();
        let cfg = PdiConfig { parallel: true, ..small_cfg() };
        let par = run(&p, &cfg, 5).unwrap();
        for (a, b) in serial.branches.iter().zip(&par.branches) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(serial.trace, par.trace);
    }

    #[test]
    fn zero_masks_tie_attribute_branches() {
        let p = plan("a red dog with sunglasses and a blue cat");
        let cfg = PdiConfig {
            injection: Injection::ZeroMasks,
            record_latents: true,
            ..small_cfg()
        };
        let out = run(&p, &cfg, 1).unwrap();
        let shared_end = cfg.steps - cfg.shared_steps();
        for t in shared_end..cfg.steps {
            let at_t: Vec<_> = out.trace.latents.iter().filter(|e| e.t == t && e.branch >= 1).collect();
            assert_eq!(at_t.len(), p.branches.len() - 1);
            assert!(at_t.windows(2).all(|w| w[0].latent.bit_eq(&w[1].latent)), "t={t}");
        }
    }

    #[test]
    fn mask_source_first_nurses_first_branch() {
        let p = plan("a red teddy bear wearing a green tracksuit");
        let cfg = PdiConfig { mask_source: MaskSource::First, ..small_cfg() };
        let out = run(&p, &cfg, 2).unwrap();
        assert!(out.trace.losses.iter().all(|r| r.branch == 0));
        assert_eq!(out.trace.losses.len(), cfg.nurse_steps());
        let cfg = small_cfg();
        let out = run(&p, &cfg, 2).unwrap();
        assert!(out.trace.losses.iter().all(|r| r.branch >= 2));
        assert_eq!(out.trace.losses.len(), 2 * cfg.nurse_steps());
    }

    #[test]
    fn single_branch_plan_runs() {
        let p = plan("a dog and a cat");
        let out = run(&p, &small_cfg(), 3).unwrap();
        assert_eq!(out.branches.len(), 1);
        assert!(out.trace.masks.is_empty());
    }
}
