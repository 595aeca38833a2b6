//! Browser bindings for the sampler demo.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js_err(e: pdi_core::PdiError) -> JsError {
    JsError::new(&e.to_string())
}

/// Sub-prompt listing as `index<TAB>text<TAB>subject` lines.
#[wasm_bindgen]
pub fn decompose(prompt: &str, config: &str) -> Result<String, JsError> {
    demo::plan(prompt, config).map(|p| p.to_tsv()).map_err(js_err)
}

#[wasm_bindgen]
pub struct Generation(demo::Generation);

#[wasm_bindgen]
impl Generation {
    pub fn size(&self) -> usize {
        self.0.size
    }

    pub fn branch_count(&self) -> usize {
        self.0.branches.len()
    }

    pub fn label(&self, i: usize) -> String {
        let b = &self.0.branches[i];
        format!("p{}: {}", b.index, b.text)
    }

    /// RGBA pixels of branch `i`'s final latent.
    pub fn image(&self, i: usize) -> Vec<u8> {
        self.0.branches[i].image.clone()
    }

    /// RGBA mask of branch `i`, empty when the branch injects nothing.
    pub fn mask(&self, i: usize) -> Vec<u8> {
        self.0.branches[i].mask.clone().unwrap_or_default()
    }
}

#[wasm_bindgen]
pub fn generate(prompt: &str, config: &str, seed: u64, size: usize, steps: usize) -> Result<Generation, JsError> {
    demo::generate(prompt, config, seed, size, steps).map(Generation).map_err(js_err)
}

#[wasm_bindgen]
pub struct Refinement(demo::Refinement);

#[wasm_bindgen]
impl Refinement {
    pub fn size(&self) -> usize {
        self.0.size
    }

    pub fn loss_before(&self) -> f64 {
        self.0.loss_before
    }

    pub fn loss_after(&self) -> f64 {
        self.0.loss_after
    }

    pub fn subject_count(&self) -> usize {
        self.0.subjects.len()
    }

    pub fn subject(&self, i: usize) -> String {
        self.0.subjects[i].subject.clone()
    }

    pub fn before(&self, i: usize) -> Vec<u8> {
        self.0.subjects[i].before.clone()
    }

    pub fn after(&self, i: usize) -> Vec<u8> {
        self.0.subjects[i].after.clone()
    }
}

#[wasm_bindgen]
pub fn refine(prompt: &str, seed: u64, size: usize, steps: usize, alpha: f64) -> Result<Refinement, JsError> {
    demo::refine(prompt, seed, size, steps, alpha).map(Refinement).map_err(js_err)
}
