//! Browser bindings: architecture inspection, the sub-pixel reshape and the
//! byte mutation used in the robustness experiment. Every export returns a
//! JSON string so the page needs no generated TypeScript types.

use brca::data::{mutate, padded_length, prepare};
use brca::layers::{pixel_shuffle_tensor, ShuffleOrder};
use brca::model::{param_layer_count, recursion_count, stage_shapes, Stage};
use brca::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest feature or length accepted by the shuffle demo; the page draws one
/// cell per element.
const SHUFFLE_LIMIT: usize = 64;

#[derive(Debug, Serialize)]
pub struct Architecture {
    pub raw_len: usize,
    pub padded_len: usize,
    pub recursions: usize,
    pub param_layers: usize,
    pub stages: Vec<Stage>,
}

pub fn architecture(n: usize, raw_len: usize) -> Result<Architecture, String> {
    if n == 0 || n % 2 != 0 {
        return Err(format!("n must be a positive even number, got {n}"));
    }
    let padded_len = padded_length(raw_len).map_err(|e| e.to_string())?;
    Ok(Architecture {
        raw_len,
        padded_len,
        recursions: recursion_count(padded_len).map_err(|e| e.to_string())?,
        param_layers: param_layer_count(n, padded_len).map_err(|e| e.to_string())?,
        stages: stage_shapes(padded_len).map_err(|e| e.to_string())?,
    })
}

#[derive(Debug, Serialize)]
pub struct ShuffleMap {
    pub features: usize,
    pub len: usize,
    /// `source[f][t]` is the `[feature, position]` of the input element that
    /// lands at output `[f, t]` of shape `[features / 2, 2 * len]`.
    pub source: Vec<Vec<[usize; 2]>>,
}

pub fn shuffle_map(features: usize, len: usize, order: &str) -> Result<ShuffleMap, String> {
    if features == 0 || features % 2 != 0 || features > SHUFFLE_LIMIT {
        return Err(format!("features must be even and in 2..={SHUFFLE_LIMIT}"));
    }
    if len == 0 || len > SHUFFLE_LIMIT {
        return Err(format!("length must be in 1..={SHUFFLE_LIMIT}"));
    }
    let order: ShuffleOrder = order.parse().map_err(|e: brca::Error| e.to_string())?;
    // Tag every element with its flat index; f64 holds these exactly.
    let tags: Vec<f64> = (0..features * len).map(|i| i as f64).collect();
    let input = Tensor::new(&[features, len], tags).map_err(|e| e.to_string())?;
    let out = pixel_shuffle_tensor(&input, order).map_err(|e| e.to_string())?;
    let out_len = 2 * len;
    let source = out
        .values()
        .chunks(out_len)
        .map(|row| {
            row.iter()
                .map(|&v| {
                    let i = v as usize;
                    [i / len, i % len]
                })
                .collect()
        })
        .collect();
    Ok(ShuffleMap { features, len, source })
}

#[derive(Debug, Serialize)]
pub struct Mutation {
    pub original: Vec<u8>,
    pub mutated: Vec<u8>,
    pub changed: Vec<usize>,
    pub padded_len: usize,
    pub eos_position: usize,
}

pub fn mutation(text: &str, p: f64, seed: u64) -> Result<Mutation, String> {
    let original = text.as_bytes().to_vec();
    let sample = prepare(&original).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mutated = mutate(&original, p, &mut rng).map_err(|e| e.to_string())?;
    let changed = original
        .iter()
        .zip(&mutated)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| i)
        .collect();
    Ok(Mutation {
        original,
        mutated,
        changed,
        padded_len: sample.padded_len(),
        eos_position: sample.eos_position(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

/// Padded length, recursion count, depth and per-stage shapes.
#[wasm_bindgen(js_name = inspectArchitecture)]
pub fn inspect_architecture(n: usize, raw_len: usize) -> Result<String, JsValue> {
    to_js(architecture(n, raw_len))
}

/// Source coordinates of every output cell of the sub-pixel reshape.
#[wasm_bindgen(js_name = shuffleMap)]
pub fn shuffle_map_js(features: usize, len: usize, order: &str) -> Result<String, JsValue> {
    to_js(shuffle_map(features, len, order))
}

/// Seeded byte mutation of `text` with per-byte probability `p`.
#[wasm_bindgen(js_name = mutateText)]
pub fn mutate_text(text: &str, p: f64, seed: u32) -> Result<String, JsValue> {
    to_js(mutation(text, p, u64::from(seed)))
}
