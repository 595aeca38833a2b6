//! Subject masks from cross-attention: average, min–max normalize, threshold.

use std::ops::Range;

use crate::denoiser::CapturedAttention;
use crate::error::{PdiError, Result};
use crate::numerics::check_finite;

/// Maps whose value range is below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Averaged cross-attention of one subject on the attention grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub source_branch: usize,
    pub subject: String,
}

impl SubjectMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(PdiError::shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        check_finite(&values)?;
        if values.iter().any(|&v| v < 0.0) {
            return Err(PdiError::config("subject map values must be nonnegative"));
        }
        Ok(Self {
            height,
            width,
            values,
            source_branch: 0,
            subject: String::new(),
        })
    }

    pub fn labelled(mut self, branch: usize, subject: impl Into<String>) -> Self {
        self.source_branch = branch;
        self.subject = subject.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Mean over layers and span tokens of the captured cross-attention,
/// reshaped to `height × width`.
pub fn subject_map(
    captured: &CapturedAttention,
    span: Range<usize>,
    height: usize,
    width: usize,
) -> Result<SubjectMap> {
    if span.is_empty() {
        return Err(PdiError::Span(format!("empty span {span:?}")));
    }
    let Some(first) = captured.cross_maps.first() else {
        return Err(PdiError::shape("no cross-attention layers captured"));
    };
    if span.end > first.cols() {
        return Err(PdiError::Span(format!(
            "span {span:?} exceeds {} tokens",
            first.cols()
        )));
    }
    if first.rows() != height * width {
        return Err(PdiError::shape(format!(
            "{} attention rows cannot form a {height}x{width} grid",
            first.rows()
        )));
    }
    let weight = 1.0 / (captured.cross_maps.len() * span.len()) as f64;
    let mut values = vec![0.0; height * width];
    for layer in &captured.cross_maps {
        for (p, v) in values.iter_mut().enumerate() {
            let row = layer.row(p);
            *v += row[span.clone()].iter().sum::<f64>() * weight;
        }
    }
    SubjectMap::new(height, width, values)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
    degenerate: bool,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height * width != values.len() {
            return Err(PdiError::shape("mask size does not match its dimensions"));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(PdiError::config("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
            degenerate: false,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
            degenerate: false,
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
            degenerate: false,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.values[h * self.width + w]
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// `1[(m − min)/(max − min) > τ]`. A constant map yields an all-zero mask
/// flagged as degenerate.
pub fn binarize(map: &SubjectMap, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(PdiError::config(format!("threshold must be in (0, 1), got {tau}")));
    }
    let (lo, hi) = map.range();
    let span = hi - lo;
    if span < DEGENERATE_RANGE {
        let mut mask = BinaryMask::zeros(map.height, map.width);
        mask.degenerate = true;
        return Ok(mask);
    }
    let values = map
        .values
        .iter()
        .map(|&v| u8::from((v - lo) / span > tau))
        .collect();
    Ok(BinaryMask {
        height: map.height,
        width: map.width,
        values,
        degenerate: false,
    })
}

/// Nearest-neighbour block upsampling to `height × width`.
pub fn align_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    if height == 0
        || width == 0
        || !height.is_multiple_of(mask.height)
        || !width.is_multiple_of(mask.width)
    {
        return Err(PdiError::config(format!(
            "cannot scale a {}x{} mask to {height}x{width}",
            mask.height, mask.width
        )));
    }
    if (height, width) == (mask.height, mask.width) {
        return Ok(mask.clone());
    }
    let (sh, sw) = (height / mask.height, width / mask.width);
    let values = (0..height * width)
        .map(|p| mask.get((p / width) / sh, (p % width) / sw))
        .collect();
    Ok(BinaryMask {
        height,
        width,
        values,
        degenerate: mask.degenerate,
    })
}
