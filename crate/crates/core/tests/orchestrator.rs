use std::collections::HashMap;
use std::path::PathBuf;

use pdi_core::denoiser::{sample_init, ModelDims};
use pdi_core::io::{latent_bytes, parse_latent};
use pdi_core::latent::LatentGrid;
use pdi_core::mask::{binarize, subject_map, BinaryMask};
use pdi_core::nurse::{nurse_update, NurseContext, NurseSubject};
use pdi_core::pdi::{alm, run, run_observed, Injection, PdiConfig, StepEvent};
use pdi_core::prompt::{decompose, parse_prompt, DecompositionConfig, PromptPlan};
use proptest::prelude::*;

const TEDDY: &str = "a red teddy bear wearing a green tracksuit";
const GOLDEN_SEED: u64 = 2024;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn teddy_plan() -> PromptPlan {
    decompose(&parse_prompt(TEDDY).unwrap(), DecompositionConfig::A)
}

fn golden_cfg() -> PdiConfig {
    PdiConfig {
        dims: ModelDims::with_resolution(4, 4),
        decomposition: DecompositionConfig::A,
        ..PdiConfig::default()
    }
}

/// Step-by-step re-execution of the sampler written against the component
/// APIs only, with injection as an explicit per-cell loop.
fn reference_run(plan: &PromptPlan, cfg: &PdiConfig, seed: u64) -> Vec<LatentGrid> {
    let den = cfg.denoiser().unwrap();
    let dims = *den.dims();
    let prompts: Vec<_> = plan.branches.iter().map(|b| den.embed(&b.tokens).unwrap()).collect();
    let n = plan.branches.len();
    let mut z = vec![sample_init(seed, &dims).unwrap(); n];
    let shared = (cfg.share_fraction * cfg.steps as f64).round() as usize;
    let nursed = cfg.nurse.window.min(shared);
    let base = plan.branches.iter().position(|b| b.index == 1).unwrap();
    for (k, t) in (1..=cfg.steps).rev().enumerate() {
        if k >= shared {
            for j in 0..n {
                let eps = den.forward(&z[j], &prompts[j], t, None).unwrap().noise_pred;
                z[j] = den.ddim_step(&z[j], &eps, t).unwrap();
            }
            continue;
        }
        let lead = den.forward(&z[0], &prompts[0], t, None).unwrap();
        let maps = lead.captured.self_maps.clone();
        let mut captured = vec![lead.captured];
        let mut eps = vec![lead.noise_pred];
        for j in 1..n {
            if let (true, Some(s)) = (k < nursed, &plan.branches[j].subject) {
                let subjects = [NurseSubject { text: s.text.clone(), span: s.span.clone() }];
                let ctx = NurseContext {
                    denoiser: &den,
                    prompt: &prompts[j],
                    subjects: &subjects,
                    sa_override: Some(&maps),
                };
                z[j] = nurse_update(&z[j], &ctx, &cfg.nurse).unwrap().latent;
            }
            let out = den.forward(&z[j], &prompts[j], t, Some(&maps)).unwrap();
            captured.push(out.captured);
            eps.push(out.noise_pred);
        }
        for j in 0..n {
            z[j] = den.ddim_step(&z[j], &eps[j], t).unwrap();
        }
        for i in base..n - 1 {
            let span = plan.branches[i + 1].subject.as_ref().unwrap().span.clone();
            let map = subject_map(&captured[i + 1], span, dims.height, dims.width).unwrap();
            let mask = binarize(&map, cfg.tau).unwrap();
            let mut data = z[i].data().to_vec();
            let c = dims.channels;
            for p in 0..dims.height * dims.width {
                if mask.values()[p] == 1 {
                    data[p * c..(p + 1) * c].copy_from_slice(&z[i + 1].data()[p * c..(p + 1) * c]);
                }
            }
            z[i + 1] = LatentGrid::new(dims.height, dims.width, c, data).unwrap();
        }
    }
    z
}

#[test]
fn golden_teddy_run() {
    let plan = teddy_plan();
    let cfg = golden_cfg();
    let out = run(&plan, &cfg, GOLDEN_SEED).unwrap();
    let reference = reference_run(&plan, &cfg, GOLDEN_SEED);
    for (a, b) in out.branches.iter().zip(&reference) {
        assert!(a.bit_eq(b));
    }
    let path = fixture("golden_teddy_4x4.dpl");
    let bytes = latent_bytes(out.output());
    if std::env::var_os("PDI_BLESS").is_some() {
        std::fs::write(&path, &bytes).unwrap();
    }
    let stored = std::fs::read(&path).expect("golden fixture present");
    assert_eq!(bytes, stored);
    assert_eq!(parse_latent(&stored).unwrap().shape(), (4, 4, 3));
}

#[test]
fn branches_start_equal_and_runs_repeat() {
    let plan = teddy_plan();
    let cfg = PdiConfig { record_latents: true, ..golden_cfg() };
    let a = run(&plan, &cfg, 9).unwrap();
    let b = run(&plan, &cfg, 9).unwrap();
    let init: Vec<_> = a.trace.latents.iter().filter(|e| e.t == cfg.steps).collect();
    assert_eq!(init.len(), plan.branches.len());
    assert!(init.windows(2).all(|w| w[0].latent.bit_eq(&w[1].latent)));
    assert_eq!(a.trace, b.trace);
}

#[test]
fn full_sharing_with_identical_prompts_ties_branches() {
    let mut plan = teddy_plan();
    let tokens = plan.branches[0].tokens.clone();
    for b in &mut plan.branches {
        b.tokens = tokens.clone();
    }
    let mut cfg = PdiConfig {
        share_fraction: 1.0,
        injection: Injection::Off,
        steps: 20,
        dims: ModelDims::with_resolution(8, 8),
        ..PdiConfig::default()
    };
    cfg.nurse.inner_steps = 0;
    let out = run(&plan, &cfg, 4).unwrap();
    assert!(out.branches.windows(2).all(|w| w[0].bit_eq(&w[1])));
}

#[test]
fn injection_is_local_to_masked_cells() {
    let plan = decompose(
        &parse_prompt("a red dog with sunglasses and a blue cat with a necklace").unwrap(),
        DecompositionConfig::B,
    );
    let cfg = PdiConfig {
        steps: 20,
        dims: ModelDims::with_resolution(8, 8),
        record_latents: true,
        ..PdiConfig::default()
    };
    let mut masks: HashMap<(usize, usize), BinaryMask> = HashMap::new();
    let out = run_observed(&plan, &cfg, 11, &mut |ev| {
        if let StepEvent::Mask { t, branch, mask } = ev {
            masks.insert((t, branch), mask.clone());
        }
    })
    .unwrap();
    assert_eq!(masks.len(), cfg.shared_steps() * (plan.branches.len() - 2));
    let latent = |t: usize, branch: usize| {
        &out.trace.latents.iter().find(|e| e.t == t && e.branch == branch).unwrap().latent
    };
    let mut checked = 0;
    for ((t, branch), mask) in &masks {
        let (prev, next) = (latent(t - 1, branch - 1), latent(t - 1, *branch));
        let c = prev.channels();
        for (p, &b) in mask.values().iter().enumerate() {
            if b == 0 {
                let cell = p * c..(p + 1) * c;
                assert_eq!(prev.data()[cell.clone()], next.data()[cell]);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

fn chain(start: &LatentGrid, steps: &[(LatentGrid, BinaryMask)]) -> LatentGrid {
    steps
        .iter()
        .fold(start.clone(), |z, (hat, mask)| alm(&z, hat, mask).unwrap())
}

proptest! {
    #[test]
    fn disjoint_masks_commute(seed in any::<u64>(), cells in proptest::collection::vec(0u8..3, 16)) {
        let dims = ModelDims::with_resolution(4, 4);
        let grid = |s: u64| sample_init(s, &dims).unwrap();
        let mask = |owner: u8| BinaryMask::new(4, 4, cells.iter().map(|&c| u8::from(c == owner)).collect()).unwrap();
        let steps = [(grid(seed ^ 1), mask(1)), (grid(seed ^ 2), mask(2))];
        let swapped = [steps[1].clone(), steps[0].clone()];
        prop_assert!(chain(&grid(seed), &steps).bit_eq(&chain(&grid(seed), &swapped)));
    }
}
