//! Browser demo for `lfprobe`.
//!
//! Three operations are exported to JavaScript, each taking plain numbers or
//! strings and returning a JSON document:
//!
//! * [`sae_demo`] trains a sparse autoencoder on data drawn from a known
//!   dictionary and reports the loss trace and recovery per feature.
//! * [`kendall_demo`] computes Kendall's tau-b between two pasted lists.
//! * [`pca_demo`] projects synthetic activation deltas onto their first two
//!   principal components.
//!
//! The `*_json` functions hold the logic and are ordinary Rust, so they are
//! tested natively; the exported wrappers only convert errors to `JsValue`.

use lfprobe::analysis::{kendall_tau, pca_separability};
use lfprobe::probes::Polarity;
use lfprobe::sae::{self, mmcs, FeatureDictionary, SaeTrainConfig};
use lfprobe::synthetic::{dictionary_data, separable_delta_samples, DictionaryDataConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bounds that keep a single call responsive in a browser tab.
pub const MAX_EXAMPLES: usize = 200_000;
pub const MAX_DIM: usize = 64;
pub const MAX_SAMPLES: usize = 5_000;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] lfprobe::Error),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("could not encode result: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, DemoError>;

#[derive(Serialize)]
struct SaeDemo {
    trace: Vec<sae::TracePoint>,
    mean_mmcs: f64,
    per_feature: Vec<f64>,
    dead_features: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SaeDemoParams {
    pub n_features: usize,
    pub dim: usize,
    pub hidden_size: usize,
    pub alpha: f64,
    pub n_examples: usize,
    pub tied: bool,
    pub seed: u64,
}

pub fn sae_demo_json(p: SaeDemoParams) -> Result<String> {
    if p.dim == 0 || p.dim > MAX_DIM || p.hidden_size == 0 || p.hidden_size > 2 * MAX_DIM {
        return Err(DemoError::Input(format!(
            "dimension must be in 1..={MAX_DIM} and hidden size in 1..={}",
            2 * MAX_DIM
        )));
    }
    if p.n_features == 0 || p.n_features > p.hidden_size {
        return Err(DemoError::Input(format!(
            "need between 1 and {} true features (the hidden size)",
            p.hidden_size
        )));
    }
    if p.n_examples > MAX_EXAMPLES {
        return Err(DemoError::Input(format!(
            "at most {MAX_EXAMPLES} training examples"
        )));
    }
    let data_cfg = DictionaryDataConfig {
        n_features: p.n_features,
        dim: p.dim,
        max_active: 3.min(p.n_features),
        coefficient_scale: 0.01,
    };
    let (truth, data) = dictionary_data(data_cfg, 5_000, p.seed)?;
    let cfg = SaeTrainConfig {
        hidden_size: p.hidden_size,
        tied: p.tied,
        alpha: p.alpha,
        n_examples: p.n_examples,
        seed: p.seed.wrapping_add(1),
        log_every: (p.n_examples / 32 / 100).max(1),
        ..SaeTrainConfig::default()
    };
    let (ae, trace) = sae::train(&data, 0, &cfg)?;
    let learned = FeatureDictionary::from_autoencoder(&ae, "learned");
    let truth = FeatureDictionary::from_rows(&truth, 0, "truth");
    let dead_features = learned.dead.len();
    let m = mmcs(&truth, &learned)?;
    Ok(serde_json::to_string(&SaeDemo {
        trace,
        mean_mmcs: m.mean,
        per_feature: m.per_feature,
        dead_features,
    })?)
}

/// Parses numbers separated by commas, semicolons or whitespace.
pub fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| DemoError::Input(format!("{t:?} is not a number")))
        })
        .collect()
}

#[derive(Serialize)]
struct KendallDemo {
    tau: f64,
    p_value: f64,
    n: usize,
    concordant: u64,
    discordant: u64,
    ties_x: u64,
    ties_y: u64,
    ties_both: u64,
}

pub fn kendall_demo_json(x: &str, y: &str) -> Result<String> {
    let (x, y) = (parse_numbers(x)?, parse_numbers(y)?);
    let r = kendall_tau(&x, &y)?;
    Ok(serde_json::to_string(&KendallDemo {
        tau: r.tau,
        p_value: r.p_value,
        n: r.n,
        concordant: r.concordant,
        discordant: r.discordant,
        ties_x: r.ties_x,
        ties_y: r.ties_y,
        ties_both: r.ties_both,
    })?)
}

#[derive(Serialize)]
struct PcaDemo {
    explained_variance_ratio: Vec<f64>,
    /// `[pc1, pc2, +1 | -1]` per sample.
    points: Vec<[f64; 3]>,
}

pub fn pca_demo_json(n: usize, dim: usize, margin: f64, noise: f64, seed: u64) -> Result<String> {
    if n > MAX_SAMPLES || dim > MAX_DIM {
        return Err(DemoError::Input(format!(
            "at most {MAX_SAMPLES} samples of dimension {MAX_DIM}"
        )));
    }
    let samples = separable_delta_samples(n, dim, margin, noise, seed)?;
    let r = pca_separability(&samples)?;
    let points = r
        .projection
        .iter()
        .map(|&(a, b, pol)| [a, b, if pol == Polarity::Positive { 1.0 } else { -1.0 }])
        .collect();
    Ok(serde_json::to_string(&PcaDemo {
        explained_variance_ratio: r.explained_variance_ratio,
        points,
    })?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

// JavaScript numbers are f64; seeds arrive as f64 and are truncated.
fn seed_from(value: f64) -> u64 {
    value.max(0.0) as u64
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sae_demo(
    n_features: usize,
    dim: usize,
    hidden_size: usize,
    alpha: f64,
    n_examples: usize,
    tied: bool,
    seed: f64,
) -> std::result::Result<String, JsValue> {
    js(sae_demo_json(SaeDemoParams {
        n_features,
        dim,
        hidden_size,
        alpha,
        n_examples,
        tied,
        seed: seed_from(seed),
    }))
}

#[wasm_bindgen]
pub fn kendall_demo(x: &str, y: &str) -> std::result::Result<String, JsValue> {
    js(kendall_demo_json(x, y))
}

#[wasm_bindgen]
pub fn pca_demo(
    n: usize,
    dim: usize,
    margin: f64,
    noise: f64,
    seed: f64,
) -> std::result::Result<String, JsValue> {
    js(pca_demo_json(n, dim, margin, noise, seed_from(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_separators() {
        assert_eq!(
            parse_numbers("1, 2;3\n 4.5 ").unwrap(),
            vec![1.0, 2.0, 3.0, 4.5]
        );
        assert!(parse_numbers("").unwrap().is_empty());
        assert!(matches!(parse_numbers("1, x"), Err(DemoError::Input(_))));
    }

    #[test]
    fn seeds_truncate_and_clamp() {
        assert_eq!(seed_from(7.9), 7);
        assert_eq!(seed_from(-3.0), 0);
    }
}
