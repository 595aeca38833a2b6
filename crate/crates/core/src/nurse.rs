//! Test-time attention refinement.
//!
//! The objective pulls each subject's attention centroid onto its brightest
//! point and sharpens the map through an entropy penalty:
//! `L = Σ‖centroid − peak‖² + λ·Σ H(M̄)`. The latent is moved by plain
//! gradient descent, with the gradient taken analytically through the
//! cross-attention path of the denoiser. The peak is frozen while
//! differentiating.

use std::ops::Range;

use crate::denoiser::{Denoiser, PromptEmbedding};
use crate::error::{PdiError, Result};
use crate::latent::LatentGrid;
use crate::mask::SubjectMap;
use crate::numerics::RealMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NurseConfig {
    /// Weight of the entropy term.
    pub lambda: f64,
    /// Gradient step size.
    pub alpha: f64,
    /// Gradient steps per timestep; zero disables nursing.
    pub inner_steps: usize,
    /// Number of leading timesteps nursing is active for (capped by the
    /// shared window).
    pub window: usize,
}

impl Default for NurseConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.05,
            inner_steps: 1,
            window: 10,
        }
    }
}

impl NurseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PdiError::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(PdiError::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Weighted centre `(c_w, c_h)` of a map.
pub fn centroid(map: &SubjectMap) -> Result<(f64, f64)> {
    let total: f64 = map.values().iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(PdiError::DegenerateMap("map has no positive mass".into()));
    }
    let (mut sw, mut sh) = (0.0, 0.0);
    for h in 0..map.height() {
        for w in 0..map.width() {
            let v = map.get(h, w);
            sw += w as f64 * v;
            sh += h as f64 * v;
        }
    }
    Ok((sw / total, sh / total))
}

/// Position `(w, h)` of the largest entry; the first in row-major order wins ties.
pub fn peak(map: &SubjectMap) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.values().iter().enumerate() {
        if v > map.values()[best] {
            best = i;
        }
    }
    (best % map.width(), best / map.width())
}

fn align_term(map: &SubjectMap, frozen_peak: (usize, usize)) -> Result<f64> {
    let (cw, ch) = centroid(map)?;
    let (pw, ph) = (frozen_peak.0 as f64, frozen_peak.1 as f64);
    Ok((cw - pw).powi(2) + (ch - ph).powi(2))
}

/// `Σ_i ‖centroid_i − peak_i‖²`.
pub fn align_loss(maps: &[SubjectMap]) -> Result<f64> {
    maps.iter().map(|m| align_term(m, peak(m))).sum()
}

/// Shannon entropy (nats) of the map renormalized to sum one.
pub fn entropy_loss(map: &SubjectMap) -> Result<f64> {
    let total: f64 = map.values().iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(PdiError::DegenerateMap("map has no positive mass".into()));
    }
    Ok(map
        .values()
        .iter()
        .map(|&v| {
            let p = v / total;
            if p > 0.0 {
                -p * libm::log(p)
            } else {
                0.0
            }
        })
        .sum())
}

/// `dL/dM` for one subject map: alignment with a frozen peak plus
/// `λ`-weighted entropy.
fn map_gradient(map: &SubjectMap, frozen_peak: (usize, usize), lambda: f64) -> Result<Vec<f64>> {
    let total: f64 = map.values().iter().sum();
    let (cw, ch) = centroid(map)?;
    let entropy = entropy_loss(map)?;
    let (pw, ph) = (frozen_peak.0 as f64, frozen_peak.1 as f64);
    let mut grad = Vec::with_capacity(map.values().len());
    for h in 0..map.height() {
        for w in 0..map.width() {
            let v = map.get(h, w);
            let d_align = 2.0 * ((cw - pw) * (w as f64 - cw) + (ch - ph) * (h as f64 - ch)) / total;
            let p = v / total;
            let d_ent = if p > 0.0 {
                (-libm::log(p) - entropy) / total
            } else {
                0.0
            };
            grad.push(d_align + lambda * d_ent);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub align: f64,
    pub entropy: f64,
    pub total: f64,
    pub centroids: Vec<(f64, f64)>,
    pub peaks: Vec<(usize, usize)>,
    /// Subjects whose map had no usable mass and were left out.
    pub skipped: Vec<String>,
}

/// One subject to refine: its name and token span in the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NurseSubject {
    pub text: String,
    pub span: Range<usize>,
}

/// Everything the loss needs besides the latent.
#[derive(Debug, Clone, Copy)]
pub struct NurseContext<'a> {
    pub denoiser: &'a Denoiser,
    pub prompt: &'a PromptEmbedding,
    pub subjects: &'a [NurseSubject],
    pub sa_override: Option<&'a [RealMatrix]>,
}

impl NurseContext<'_> {
    fn subject_maps(&self, z: &LatentGrid) -> Result<(Vec<Option<SubjectMap>>, crate::denoiser::ForwardTape)> {
        let tape = self
            .denoiser
            .cross_attention_taped(z, self.prompt, self.sa_override)?;
        let dims = self.denoiser.dims();
        let layers = tape.cross_maps();
        let mut maps = Vec::with_capacity(self.subjects.len());
        for subject in self.subjects {
            if subject.span.is_empty() || subject.span.end > self.prompt.len() {
                return Err(PdiError::Span(format!(
                    "subject {:?} span {:?} outside {} tokens",
                    subject.text,
                    subject.span,
                    self.prompt.len()
                )));
            }
            let weight = 1.0 / (layers.len() * subject.span.len()) as f64;
            let mut values = vec![0.0; dims.positions()];
            for layer in &layers {
                for (p, v) in values.iter_mut().enumerate() {
                    *v += layer.row(p)[subject.span.clone()].iter().sum::<f64>() * weight;
                }
            }
            let usable = values.iter().sum::<f64>() > 0.0;
            maps.push(if usable {
                Some(SubjectMap::new(dims.height, dims.width, values)?.labelled(0, &subject.text))
            } else {
                None
            });
        }
        Ok((maps, tape))
    }

    /// Loss at `z`. Peaks are taken from `z` itself unless `frozen_peaks`
    /// supplies them (one per subject).
    pub fn loss(
        &self,
        z: &LatentGrid,
        lambda: f64,
        frozen_peaks: Option<&[(usize, usize)]>,
    ) -> Result<LossReport> {
        let (maps, _) = self.subject_maps(z)?;
        self.report(&maps, lambda, frozen_peaks)
    }

    fn report(
        &self,
        maps: &[Option<SubjectMap>],
        lambda: f64,
        frozen_peaks: Option<&[(usize, usize)]>,
    ) -> Result<LossReport> {
        let mut report = LossReport::default();
        for (i, (map, subject)) in maps.iter().zip(self.subjects).enumerate() {
            let Some(map) = map else {
                report.skipped.push(subject.text.clone());
                continue;
            };
            let pk = frozen_peaks.map_or_else(|| peak(map), |p| p[i]);
            report.align += align_term(map, pk)?;
            report.entropy += entropy_loss(map)?;
            report.centroids.push(centroid(map)?);
            report.peaks.push(pk);
        }
        report.total = report.align + lambda * report.entropy;
        Ok(report)
    }

    /// Loss and analytic `dL/dz` at `z` with the peaks frozen at their
    /// current positions.
    pub fn loss_and_gradient(&self, z: &LatentGrid, lambda: f64) -> Result<(LossReport, LatentGrid)> {
        let (maps, tape) = self.subject_maps(z)?;
        let report = self.report(&maps, lambda, None)?;
        let dims = self.denoiser.dims();
        let layers = tape.cross_maps();
        let tokens = self.prompt.len();
        let mut grad_cross = vec![RealMatrix::zeros(dims.positions(), tokens); layers.len()];
        for (map, subject) in maps.iter().zip(self.subjects) {
            let Some(map) = map else { continue };
            let g_map = map_gradient(map, peak(map), lambda)?;
            let weight = 1.0 / (layers.len() * subject.span.len()) as f64;
            for g in grad_cross.iter_mut() {
                let vals = g.values_mut();
                for (p, gm) in g_map.iter().enumerate() {
                    for j in subject.span.clone() {
                        vals[p * tokens + j] += gm * weight;
                    }
                }
            }
        }
        let grad = self.denoiser.cross_attention_vjp(&tape, &grad_cross);
        Ok((report, grad))
    }
}

#[derive(Debug, Clone)]
pub struct NurseOutcome {
    pub latent: LatentGrid,
    /// Losses before the first update.
    pub initial: LossReport,
    /// Losses after the last update.
    pub report: LossReport,
}

/// `inner_steps` iterations of `z ← z − α·∇_z L`.
pub fn nurse_update(z: &LatentGrid, ctx: &NurseContext<'_>, cfg: &NurseConfig) -> Result<NurseOutcome> {
    cfg.validate()?;
    if ctx.subjects.is_empty() {
        return Err(PdiError::config("nursing needs at least one subject"));
    }
    let mut latent = z.clone();
    let mut initial = None;
    for _ in 0..cfg.inner_steps {
        let (report, grad) = ctx.loss_and_gradient(&latent, cfg.lambda)?;
        initial.get_or_insert(report);
        for (v, g) in latent.data_mut().iter_mut().zip(grad.data()) {
            *v -= cfg.alpha * g;
        }
    }
    let report = ctx.loss(&latent, cfg.lambda, None)?;
    let initial = initial.unwrap_or_else(|| report.clone());
    Ok(NurseOutcome {
        latent,
        initial,
        report,
    })
}

/// Central difference of `f` along flat coordinate `index`.
pub fn fd_partial(f: &impl Fn(&LatentGrid) -> f64, z: &LatentGrid, index: usize, eps: f64) -> f64 {
    let mut probe = z.clone();
    let base = probe.data()[index];
    probe.data_mut()[index] = base + eps;
    let plus = f(&probe);
    probe.data_mut()[index] = base - eps;
    let minus = f(&probe);
    (plus - minus) / (2.0 * eps)
}

/// Central-difference gradient over every coordinate.
pub fn fd_gradient(f: impl Fn(&LatentGrid) -> f64, z: &LatentGrid, eps: f64) -> LatentGrid {
    let data = (0..z.len()).map(|i| fd_partial(&f, z, i, eps)).collect();
    let (h, w, c) = z.shape();
    LatentGrid::from_raw(h, w, c, data)
}

/// Largest relative gap between the analytic and the finite-difference
/// gradient over the sampled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// `(flat index, analytic, finite difference)` per sampled coordinate.
    pub samples: Vec<(usize, f64, f64)>,
}

/// `|fd − an| / max(|fd|, |an|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

pub fn gradient_check(
    ctx: &NurseContext<'_>,
    z: &LatentGrid,
    lambda: f64,
    coordinates: usize,
    eps: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let (report, grad) = ctx.loss_and_gradient(z, lambda)?;
    let peaks = report.peaks.clone();
    let f = |x: &LatentGrid| ctx.loss(x, lambda, Some(&peaks)).map_or(f64::NAN, |r| r.total);
    let mut stream = crate::numerics::SeededStream::new(seed);
    let mut samples = Vec::with_capacity(coordinates);
    let mut max_relative_error: f64 = 0.0;
    for _ in 0..coordinates {
        let i = stream.next_below(z.len() as u64) as usize;
        let fd = fd_partial(&f, z, i, eps);
        let an = grad.data()[i];
        max_relative_error = max_relative_error.max(relative_error(an, fd));
        samples.push((i, an, fd));
    }
    Ok(GradientCheck {
        max_relative_error,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{sample_init, ModelDims, ModelParams, Schedule};
    use crate::numerics::{seeded_gaussian, SeededStream};
    use proptest::prelude::*;

    fn delta(h: usize, w: usize, at: &[(usize, usize)]) -> SubjectMap {
        let mut v = vec![0.0; h * w];
        for &(r, c) in at {
            v[r * w + c] = 1.0;
        }
        SubjectMap::new(h, w, v).unwrap()
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(centroid(&delta(8, 8, &[(5, 3)])).unwrap(), (3.0, 5.0));
        let uniform = SubjectMap::new(4, 6, vec![0.3; 24]).unwrap();
        let (cw, ch) = centroid(&uniform).unwrap();
        assert!((cw - 2.5).abs() < 1e-12 && (ch - 1.5).abs() < 1e-12);
        assert_eq!(centroid(&delta(3, 3, &[(0, 0), (0, 2)])).unwrap(), (1.0, 0.0));
        let zero = SubjectMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(centroid(&zero), Err(PdiError::DegenerateMap(_))));
    }

    #[test]
    fn peak_cases() {
        assert_eq!(peak(&delta(4, 8, &[(2, 7)])), (7, 2));
        assert_eq!(peak(&SubjectMap::new(3, 3, vec![0.5; 9]).unwrap()), (0, 0));
        let mut v = vec![0.1; 12];
        v[3] = 0.9;
        v[9] = 0.9;
        assert_eq!(peak(&SubjectMap::new(3, 4, v).unwrap()), (3, 0));
    }

    #[test]
    fn align_loss_cases() {
        assert_eq!(align_loss(&[delta(4, 4, &[(1, 2)])]).unwrap(), 0.0);
        // centroid (1, 0), peak (0, 0)
        let mut v = vec![0.0; 9];
        v[0] = 0.5;
        v[2] = 0.5 - 1e-9;
        let m = SubjectMap::new(3, 3, v).unwrap();
        assert!((align_loss(std::slice::from_ref(&m)).unwrap() - 1.0).abs() < 1e-8);
        // centroid (2, 0) vs peak (0, 0) -> 4
        let far = SubjectMap::new(1, 5, vec![0.5, 0.0, 0.0, 0.0, 0.5 - 1e-9]).unwrap();
        let total = align_loss(&[m, far]).unwrap();
        assert!((total - 5.0).abs() < 1e-7, "{total}");
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy_loss(&delta(2, 2, &[(1, 1)])).unwrap(), 0.0);
        let uniform = SubjectMap::new(2, 2, vec![0.25; 4]).unwrap();
        assert!((entropy_loss(&uniform).unwrap() - 4f64.ln()).abs() < 1e-9);
        let half = SubjectMap::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((entropy_loss(&half).unwrap() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fd_gradient_closed_forms() {
        let z = LatentGrid::new(2, 2, 1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let g = fd_gradient(|x| x.data().iter().map(|v| v * v).sum(), &z, 1e-4);
        for (gv, zv) in g.data().iter().zip(z.data()) {
            assert!((gv - 2.0 * zv).abs() < 1e-6);
        }
        let g = fd_gradient(|_| 3.0, &z, 1e-4);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = fd_gradient(|x| x.data()[0], &z, 1e-4);
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!(g.data()[1..].iter().all(|v| v.abs() < 1e-9));
    }

    fn model(h: usize) -> Denoiser {
        Denoiser::new(
            ModelParams::init(4, ModelDims::with_resolution(h, h)).unwrap(),
            Schedule::new(50).unwrap(),
        )
    }

    fn tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn zero_steps_is_identity() {
        let den = model(8);
        let prompt = den.embed(&tokens("a red teddy bear wearing a tracksuit")).unwrap();
        let subjects = [NurseSubject { text: "teddy bear".into(), span: 2..4 }];
        let ctx = NurseContext { denoiser: &den, prompt: &prompt, subjects: &subjects, sa_override: None };
        let z = sample_init(1, den.dims()).unwrap();
        let cfg = NurseConfig { inner_steps: 0, ..NurseConfig::default() };
        let out = nurse_update(&z, &ctx, &cfg).unwrap();
        assert!(out.latent.bit_eq(&z));
        assert_eq!(out.initial, out.report);
        assert_eq!(out.report, ctx.loss(&z, 1.0, None).unwrap());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let den = model(8);
        let prompt = den.embed(&tokens("a red teddy bear wearing a green tracksuit")).unwrap();
        let subjects = [
            NurseSubject { text: "teddy bear".into(), span: 2..4 },
            NurseSubject { text: "tracksuit".into(), span: 7..8 },
        ];
        let ctx = NurseContext { denoiser: &den, prompt: &prompt, subjects: &subjects, sa_override: None };
        let z = sample_init(2, den.dims()).unwrap();
        let check = gradient_check(&ctx, &z, 1.0, 20, 1e-4, 99).unwrap();
        assert_eq!(check.samples.len(), 20);
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn gradient_with_override_treats_maps_as_constant() {
        let den = model(4);
        let prompt = den.embed(&tokens("a blue cat")).unwrap();
        let subjects = [NurseSubject { text: "cat".into(), span: 2..3 }];
        let z0 = sample_init(3, den.dims()).unwrap();
        let fixed = den.forward(&z0, &prompt, 10, None).unwrap().captured.self_maps;
        let ctx = NurseContext { denoiser: &den, prompt: &prompt, subjects: &subjects, sa_override: Some(&fixed) };
        let z = sample_init(4, den.dims()).unwrap();
        let (report, grad) = ctx.loss_and_gradient(&z, 0.5).unwrap();
        let peaks = report.peaks.clone();
        let full = fd_gradient(|x| ctx.loss(x, 0.5, Some(&peaks)).unwrap().total, &z, 1e-4);
        for (a, n) in grad.data().iter().zip(full.data()) {
            assert!((a - n).abs() <= 1e-6 * n.abs().max(1.0), "{a} vs {n}");
        }
    }

    proptest! {
        #[test]
        fn report_identity_and_entropy_scaling(seed in any::<u64>(), lambda in 0.0f64..5.0, scale in 0.01f64..100.0) {
            let vals: Vec<f64> = seeded_gaussian(&mut SeededStream::new(seed), 36)
                .into_iter().map(|v| v.abs() + 1e-3).collect();
            let m = SubjectMap::new(6, 6, vals.clone()).unwrap();
            let scaled = SubjectMap::new(6, 6, vals.iter().map(|v| v * scale).collect()).unwrap();
            let e = entropy_loss(&m).unwrap();
            prop_assert!((e - entropy_loss(&scaled).unwrap()).abs() < 1e-9);
            let a = align_loss(&[m]).unwrap();
            prop_assert!(a >= 0.0);
            let total = a + lambda * e;
            prop_assert!((total - (a + lambda * e)).abs() < 1e-9);
        }
    }
}
