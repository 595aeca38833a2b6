//! Demo operations in plain Rust; `lib.rs` wraps them for the browser.

use pdi_core::denoiser::{sample_init, Denoiser, ModelDims, ModelParams, Schedule};
use pdi_core::io::{map_to_grey, RgbImage};
use pdi_core::latent::LatentGrid;
use pdi_core::mask::{subject_map, BinaryMask};
use pdi_core::nurse::{nurse_update, NurseConfig, NurseContext, NurseSubject};
use pdi_core::pdi::{run_observed, PdiConfig, StepEvent};
use pdi_core::prompt::{decompose, parse_prompt, DecompositionConfig, PromptPlan};
use pdi_core::{PdiError, Result};

/// Largest side accepted from the page; larger grids stall the tab.
pub const MAX_SIZE: usize = 32;

pub fn plan(prompt: &str, config: &str) -> Result<PromptPlan> {
    let config: DecompositionConfig = config.parse()?;
    Ok(decompose(&parse_prompt(prompt)?, config))
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size > MAX_SIZE {
        return Err(PdiError::Config(format!("size must be in 1..={MAX_SIZE}, got {size}")));
    }
    Ok(())
}

fn rgba_from_rgb(img: &RgbImage) -> Vec<u8> {
    img.pixels.iter().flat_map(|&[r, g, b]| [r, g, b, 255]).collect()
}

fn rgba_from_grey(grey: &[u8]) -> Vec<u8> {
    grey.iter().flat_map(|&v| [v, v, v, 255]).collect()
}

pub fn latent_rgba(z: &LatentGrid) -> Vec<u8> {
    rgba_from_rgb(&RgbImage::from_latent(z))
}

pub fn mask_rgba(mask: &BinaryMask) -> Vec<u8> {
    rgba_from_grey(&mask.values().iter().map(|&b| b * 255).collect::<Vec<_>>())
}

pub struct Branch {
    pub index: usize,
    pub text: String,
    pub image: Vec<u8>,
    /// Mask from the last shared step, for branches that inject an attribute.
    pub mask: Option<Vec<u8>>,
}

pub struct Generation {
    pub size: usize,
    pub branches: Vec<Branch>,
}

pub fn generate(prompt: &str, config: &str, seed: u64, size: usize, steps: usize) -> Result<Generation> {
    check_size(size)?;
    let plan = plan(prompt, config)?;
    let cfg = PdiConfig {
        steps,
        decomposition: config.parse()?,
        dims: ModelDims::with_resolution(size, size),
        ..PdiConfig::default()
    };
    let mut masks: Vec<Option<Vec<u8>>> = vec![None; plan.branches.len()];
    let out = run_observed(&plan, &cfg, seed, &mut |ev| {
        if let StepEvent::Mask { branch, mask, .. } = ev {
            if let Some(pos) = plan.branches.iter().position(|b| b.index == branch) {
                masks[pos] = Some(mask_rgba(mask));
            }
        }
    })?;
    let branches = plan
        .branches
        .iter()
        .zip(&out.branches)
        .zip(masks)
        .map(|((b, z), mask)| Branch {
            index: b.index,
            text: b.text.clone(),
            image: latent_rgba(z),
            mask,
        })
        .collect();
    Ok(Generation { size, branches })
}

pub struct SubjectRefinement {
    pub subject: String,
    pub before: Vec<u8>,
    pub after: Vec<u8>,
}

pub struct Refinement {
    pub size: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub subjects: Vec<SubjectRefinement>,
}

/// Runs `steps` refinement updates on the initial latent of the last
/// sub-prompt and returns each subject's attention map before and after.
pub fn refine(prompt: &str, seed: u64, size: usize, steps: usize, alpha: f64) -> Result<Refinement> {
    check_size(size)?;
    let plan = plan(prompt, "A")?;
    let last = plan.branches.last().expect("a plan has at least one branch");
    let subjects: Vec<NurseSubject> = plan
        .entities
        .iter()
        .zip(&last.entity_spans)
        .map(|(text, span)| NurseSubject { text: text.clone(), span: span.clone() })
        .collect();
    let dims = ModelDims::with_resolution(size, size);
    let schedule = Schedule::new(50)?;
    let t = schedule.steps();
    let denoiser = Denoiser::new(ModelParams::init(seed, dims)?, schedule);
    let embedding = denoiser.embed(&last.tokens)?;
    let ctx = NurseContext { denoiser: &denoiser, prompt: &embedding, subjects: &subjects, sa_override: None };
    let cfg = NurseConfig { inner_steps: steps, alpha, ..NurseConfig::default() };
    let z = sample_init(seed, denoiser.dims())?;
    let outcome = nurse_update(&z, &ctx, &cfg)?;
    let maps = |z: &LatentGrid| -> Result<Vec<Vec<u8>>> {
        let captured = denoiser.forward(z, &embedding, t, None)?.captured;
        subjects
            .iter()
            .map(|s| Ok(rgba_from_grey(&map_to_grey(subject_map(&captured, s.span.clone(), size, size)?.values()))))
            .collect()
    };
    let subjects = subjects
        .iter()
        .zip(maps(&z)?)
        .zip(maps(&outcome.latent)?)
        .map(|((s, before), after)| SubjectRefinement { subject: s.text.clone(), before, after })
        .collect();
    Ok(Refinement {
        size,
        loss_before: outcome.initial.total,
        loss_after: outcome.report.total,
        subjects,
    })
}
