//! Contrastive activation deltas and the probes that predict them.
//!
//! For a triple `(x+, x0, x−)` each selected layer's MLP activations are
//! condensed through that layer's autoencoder. `Δ+` is the sum over layers
//! of the Euclidean distance between the condensed codes of `x+` and `x0`
//! at the target token (averaged over the span), and `Δ−` likewise for
//! `x−`. Positive samples carry `+Δ+`, negative samples `−Δ−`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_distance, xavier_init, AdamConfig, AdamState, Matrix};
use crate::sae::SparseAutoencoder;
use crate::tensorio::{
    read_activations, write_activations, ActivationDataset, Container, ContrastiveTriple,
    TripleMode, Vocabulary, MAGIC_PROBE,
};
use crate::toymodel::{CapturedActivations, TinyTransformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSample {
    /// Concatenated condensed activations across the selected layers.
    pub features: Vec<f64>,
    pub raw_delta: f64,
    pub normalized_delta: f64,
    pub polarity: Polarity,
    pub token: Option<String>,
}

/// How per-layer distances combine into one delta.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaCombine {
    /// Sum of per-layer Euclidean distances.
    #[default]
    SumOfLayers,
    /// Euclidean distance of the concatenated codes.
    Concatenated,
}

/// Encodes each captured layer with its autoencoder. The autoencoders must
/// be listed in the same layer order as the captured activations.
pub fn condense(
    captured: &CapturedActivations,
    autoencoders: &[SparseAutoencoder],
) -> Result<Vec<Matrix>> {
    let ae_layers: Vec<usize> = autoencoders.iter().map(|a| a.layer_index).collect();
    if ae_layers != captured.layers {
        return Err(Error::shape(format!(
            "autoencoder layers {ae_layers:?} do not match captured layers {:?}",
            captured.layers
        )));
    }
    captured
        .activations
        .iter()
        .zip(autoencoders)
        .map(|(a, ae)| ae.encode(a))
        .collect()
}

/// Condensed codes of one token sequence, one matrix per selected layer.
pub fn condensed_codes(
    model: &TinyTransformer,
    autoencoders: &[SparseAutoencoder],
    tokens: &[u32],
) -> Result<Vec<Matrix>> {
    let layers: Vec<usize> = autoencoders.iter().map(|a| a.layer_index).collect();
    let out = model.forward(tokens, &layers)?;
    condense(&out.captured, autoencoders)
}

/// Delta between two condensed sequences at `positions`: combine the
/// per-layer distances at each position, then average over positions.
pub fn delta_from_codes(
    a: &[Matrix],
    b: &[Matrix],
    positions: &[usize],
    combine: DeltaCombine,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("different numbers of layers"));
    }
    if positions.is_empty() {
        return Err(Error::invalid("no positions to compare"));
    }
    let mut total = 0.0;
    for &t in positions {
        let mut per_layer = Vec::with_capacity(a.len());
        let mut sq = 0.0;
        for (la, lb) in a.iter().zip(b) {
            if t >= la.rows() || t >= lb.rows() {
                return Err(Error::invalid(format!("position {t} outside the sequence")));
            }
            let d = l2_distance(la.row(t), lb.row(t));
            per_layer.push(d);
            sq += d * d;
        }
        total += match combine {
            DeltaCombine::SumOfLayers => per_layer.iter().sum::<f64>(),
            DeltaCombine::Concatenated => sq.sqrt(),
        };
    }
    Ok(total / positions.len() as f64)
}

fn mean_rows(codes: &[Matrix], positions: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in codes {
        let mut acc = vec![0.0; layer.cols()];
        for &t in positions {
            for (o, v) in acc.iter_mut().zip(layer.row(t)) {
                *o += v;
            }
        }
        out.extend(acc.into_iter().map(|v| v / positions.len() as f64));
    }
    out
}

fn compared_positions(triple: &ContrastiveTriple, other_len: usize) -> Vec<usize> {
    match (triple.mode, triple.target_span) {
        (TripleMode::PerToken, Some((s, e))) => (s..e).collect(),
        _ => (0..triple.neutral.len().min(other_len)).collect(),
    }
}

/// Everything needed to turn triples into probe samples.
pub struct DeltaContext<'a> {
    pub model: &'a TinyTransformer,
    pub autoencoders: &'a [SparseAutoencoder],
    pub vocab: &'a Vocabulary,
    pub combine: DeltaCombine,
}

/// `(Δ+, Δ−)` for one triple.
pub fn activation_delta(triple: &ContrastiveTriple, ctx: &DeltaContext<'_>) -> Result<(f64, f64)> {
    let (pos, neg) = delta_samples(triple, ctx, false)?;
    Ok((pos.raw_delta, -neg.raw_delta))
}

/// The positive and negative samples one triple contributes. Features are
/// the condensed codes of the polar element at the compared positions.
/// `swap_labels` exchanges the polarity labels (for tasks where the
/// "positive" element is the undesired one).
pub fn delta_samples(
    triple: &ContrastiveTriple,
    ctx: &DeltaContext<'_>,
    swap_labels: bool,
) -> Result<(DeltaSample, DeltaSample)> {
    triple.validate()?;
    let codes = |seq: &[String]| -> Result<Vec<Matrix>> {
        condensed_codes(ctx.model, ctx.autoencoders, &ctx.vocab.encode(seq)?)
    };
    let c_pos = codes(&triple.positive)?;
    let c_neu = codes(&triple.neutral)?;
    let c_neg = codes(&triple.negative)?;
    let p_pos = compared_positions(triple, triple.positive.len());
    let p_neg = compared_positions(triple, triple.negative.len());
    let d_pos = delta_from_codes(&c_pos, &c_neu, &p_pos, ctx.combine)?;
    let d_neg = delta_from_codes(&c_neg, &c_neu, &p_neg, ctx.combine)?;
    let token = |seq: &[String]| triple.target_span.map(|(s, e)| seq[s..e].join(" "));
    let (lp, ln) = if swap_labels {
        (Polarity::Negative, Polarity::Positive)
    } else {
        (Polarity::Positive, Polarity::Negative)
    };
    Ok((
        DeltaSample {
            features: mean_rows(&c_pos, &p_pos),
            raw_delta: lp.sign() * d_pos,
            normalized_delta: 0.0,
            polarity: lp,
            token: token(&triple.positive),
        },
        DeltaSample {
            features: mean_rows(&c_neg, &p_neg),
            raw_delta: ln.sign() * d_neg,
            normalized_delta: 0.0,
            polarity: ln,
            token: token(&triple.negative),
        },
    ))
}

/// Per-side scale factors applied by [`normalize_deltas`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaScales {
    pub positive: f64,
    pub negative: f64,
}

/// Scales each polarity so its largest magnitude maps to `±target_max`.
pub fn normalize_deltas(samples: &mut [DeltaSample], target_max: f64) -> Result<DeltaScales> {
    if !(target_max > 0.0) {
        return Err(Error::invalid(format!(
            "target_max must be positive, got {target_max}"
        )));
    }
    let max_of = |p: Polarity| {
        samples
            .iter()
            .filter(|s| s.polarity == p)
            .map(|s| s.raw_delta.abs())
            .fold(0.0, f64::max)
    };
    let (mp, mn) = (max_of(Polarity::Positive), max_of(Polarity::Negative));
    if !(mp > 0.0) || !(mn > 0.0) {
        return Err(Error::Insufficient(format!(
            "need a non-zero delta on both sides (max positive {mp}, max negative {mn})"
        )));
    }
    let scales = DeltaScales {
        positive: target_max / mp,
        negative: target_max / mn,
    };
    for s in samples.iter_mut() {
        s.normalized_delta = s.raw_delta
            * match s.polarity {
                Polarity::Positive => scales.positive,
                Polarity::Negative => scales.negative,
            };
    }
    Ok(scales)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Logistic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub kind: ProbeKind,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scales: Option<DeltaScales>,
    /// Ridge coefficient (linear) or `[learning rate, epochs]` (logistic).
    pub training: serde_json::Value,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Probe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Linear: `wᵀx + b`. Logistic: `σ(wᵀx + b)`.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        let z = self.logit(features)?;
        Ok(match self.kind {
            ProbeKind::Linear => z,
            ProbeKind::Logistic => sigmoid(z),
        })
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "{} features for a probe of dimension {}",
                features.len(),
                self.weights.len()
            )));
        }
        Ok(dot(&self.weights, features) + self.bias)
    }

    /// Logistic probes classify by the sign of the logit.
    pub fn classify(&self, features: &[f64]) -> Result<Polarity> {
        Ok(if self.logit(features)? > 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        })
    }

    /// A linear probe that was never trained: Xavier weights, zero bias.
    pub fn xavier_baseline(dim: usize, seed: u64) -> Result<Self> {
        Ok(Probe {
            kind: ProbeKind::Linear,
            weights: xavier_init(1, dim, seed)?.into_vec(),
            bias: 0.0,
            scales: None,
            training: json!({"untrained": true, "seed": seed}),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            MAGIC_PROBE,
            json!({
                "kind": self.kind,
                "bias": self.bias,
                "scales": self.scales,
                "training": self.training,
            }),
        );
        c.push("weights", Matrix::row_vector(&self.weights));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: ProbeKind = serde_json::from_value(c.metadata["kind"].clone())
            .map_err(|e| Error::Config(format!("probe kind: {e}")))?;
        let scales: Option<DeltaScales> = serde_json::from_value(c.metadata["scales"].clone())
            .map_err(|e| Error::Config(format!("probe scales: {e}")))?;
        Ok(Probe {
            kind,
            weights: c.section("weights")?.as_slice().to_vec(),
            bias: c.meta_f64("bias")?,
            scales,
            training: c.metadata["training"].clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(MAGIC_PROBE, path)?)
    }
}

fn feature_matrix(samples: &[DeltaSample]) -> Result<Matrix> {
    let dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
    if let Some(bad) = samples.iter().position(|s| s.features.len() != dim) {
        return Err(Error::shape(format!(
            "sample {bad} has {} features, expected {dim}",
            samples[bad].features.len()
        )));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let m = Matrix::from_rows(&rows)?;
    if let Some((r, c)) = m.first_non_finite() {
        return Err(Error::NonFinite { row: r, col: c });
    }
    Ok(m)
}

/// Closed-form ridge regression of `normalized_delta` on the features, with
/// an unpenalized bias.
pub fn fit_linear(samples: &[DeltaSample], lambda: f64) -> Result<Probe> {
    if samples.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{} samples, need at least 2",
            samples.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "ridge coefficient {lambda} must be >= 0"
        )));
    }
    let x = feature_matrix(samples)?;
    let y: Vec<f64> = samples.iter().map(|s| s.normalized_delta).collect();
    let (weights, bias) = ridge(&x, &y, lambda)?;
    Ok(Probe {
        kind: ProbeKind::Linear,
        weights,
        bias,
        scales: None,
        training: json!({"ridge_lambda": lambda}),
    })
}

/// Ridge on centered data: `(XcᵀXc + λI) w = Xcᵀ yc`, `b = ȳ − x̄ᵀw`.
/// Falls back to an SVD least-squares solve when the system is singular.
pub fn ridge(x: &Matrix, y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let (m, p) = x.shape();
    if y.len() != m {
        return Err(Error::shape(format!("{m} rows but {} targets", y.len())));
    }
    let mean_x = x.column_means();
    let mean_y = y.iter().sum::<f64>() / m as f64;
    let xc = DMatrix::from_fn(m, p, |r, c| x[(r, c)] - mean_x[c]);
    let yc = DVector::from_iterator(m, y.iter().map(|v| v - mean_y));
    let mut gram = xc.transpose() * &xc;
    for i in 0..p {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Diverged(format!("ridge solve failed: {e}")))?,
    };
    let w: Vec<f64> = w.iter().copied().collect();
    let bias = mean_y - dot(&mean_x, &w);
    Ok((w, bias))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            learning_rate: 0.05,
            epochs: 500,
            seed: 0,
        }
    }
}

/// Mean binary cross-entropy and its gradient `(∂w, ∂b)`.
pub fn logistic_loss_and_grad(
    weights: &[f64],
    bias: f64,
    x: &Matrix,
    labels: &[f64],
) -> (f64, Vec<f64>, f64) {
    let m = x.rows() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = dot(weights, x.row(r)) + bias;
        // log(1 + e^z) − y·z, written to avoid overflow
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let err = sigmoid(z) - y;
        for (g, v) in gw.iter_mut().zip(x.row(r)) {
            *g += err * v;
        }
        gb += err;
    }
    gw.iter_mut().for_each(|g| *g /= m);
    (loss / m, gw, gb / m)
}

/// Full-batch Adam on cross-entropy. Labels come from sample polarity;
/// weights start from a seeded Xavier draw, bias from 0.
pub fn fit_logistic(samples: &[DeltaSample], cfg: &LogisticConfig) -> Result<Probe> {
    let labels: Vec<f64> = samples
        .iter()
        .map(|s| f64::from(u8::from(s.polarity == Polarity::Positive)))
        .collect();
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Insufficient(
            "logistic probe needs both classes".into(),
        ));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let x = feature_matrix(samples)?;
    let mut w = xavier_init(1, x.cols(), cfg.seed)?;
    let mut b = Matrix::zeros(1, 1);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let (mut opt_w, mut opt_b) = (
        AdamState::for_param(&w, adam),
        AdamState::for_param(&b, adam),
    );
    for epoch in 0..cfg.epochs {
        let (loss, gw, gb) = logistic_loss_and_grad(w.as_slice(), b[(0, 0)], &x, &labels);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "logistic loss {loss} at epoch {epoch}"
            )));
        }
        opt_w.step(&mut w, &Matrix::row_vector(&gw))?;
        opt_b.step(&mut b, &Matrix::filled(1, 1, gb))?;
    }
    Ok(Probe {
        kind: ProbeKind::Logistic,
        weights: w.into_vec(),
        bias: b[(0, 0)],
        scales: None,
        training: json!({"learning_rate": cfg.learning_rate, "epochs": cfg.epochs, "seed": cfg.seed}),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    /// Row of the companion feature file.
    pub features_ref: usize,
    pub raw_delta: f64,
    pub normalized_delta: f64,
    pub polarity: Polarity,
    pub token: Option<String>,
}

/// Writes delta records as JSON lines and their features as an LFPA file.
pub fn write_delta_dataset(
    samples: &[DeltaSample],
    jsonl_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
    model_id: &str,
) -> Result<()> {
    let x = feature_matrix(samples)?;
    write_activations(
        &ActivationDataset::new(model_id, u32::MAX, &x),
        features_path,
    )?;
    let path = jsonl_path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (i, s) in samples.iter().enumerate() {
        let rec = DeltaRecord {
            features_ref: i,
            raw_delta: s.raw_delta,
            normalized_delta: s.normalized_delta,
            polarity: s.polarity,
            token: s.token.clone(),
        };
        writeln!(
            f,
            "{}",
            serde_json::to_string(&rec).expect("record serializes")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Features come back at f32 precision.
pub fn read_delta_dataset(
    jsonl_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
) -> Result<Vec<DeltaSample>> {
    let features = read_activations(features_path)?;
    let path = jsonl_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: DeltaRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.features_ref >= features.rows {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "features_ref {} beyond {} rows",
                    rec.features_ref, features.rows
                ),
            });
        }
        out.push(DeltaSample {
            features: features
                .row(rec.features_ref)
                .iter()
                .map(|&v| f64::from(v))
                .collect(),
            raw_delta: rec.raw_delta,
            normalized_delta: rec.normalized_delta,
            polarity: rec.polarity,
            token: rec.token,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rng_from_seed};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn sample(features: Vec<f64>, raw: f64) -> DeltaSample {
        DeltaSample {
            features,
            raw_delta: raw,
            normalized_delta: raw,
            polarity: if raw >= 0.0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
            token: None,
        }
    }

    #[test]
    fn condense_identity_and_layer_check() {
        let acts = Matrix::from_rows(&[[0.5, 0.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
        let captured = CapturedActivations {
            layers: vec![1],
            activations: vec![acts.clone()],
        };
        let mut ae = SparseAutoencoder::identity(3, 0.0);
        ae.layer_index = 1;
        let out = condense(&captured, std::slice::from_ref(&ae)).unwrap();
        assert_eq!(out[0], acts);
        assert_eq!(out[0].cols(), ae.hidden_size());
        ae.layer_index = 2;
        assert!(condense(&captured, &[ae]).is_err());
    }

    #[test]
    fn delta_arithmetic() {
        // two layers, per-layer distances 1 and 2 at the target
        let a = vec![
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[[0.0, 2.0]]).unwrap(),
        ];
        let b = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 2)];
        assert_eq!(
            delta_from_codes(&a, &b, &[0], DeltaCombine::SumOfLayers).unwrap(),
            3.0
        );
        assert!(
            (delta_from_codes(&a, &b, &[0], DeltaCombine::Concatenated).unwrap() - 5f64.sqrt())
                .abs()
                < 1e-12
        );
        assert_eq!(
            delta_from_codes(&a, &a, &[0], DeltaCombine::SumOfLayers).unwrap(),
            0.0
        );
        // span of two tokens with per-token deltas 1 and 3
        let s = vec![Matrix::from_rows(&[[1.0], [3.0]]).unwrap()];
        let z = vec![Matrix::zeros(2, 1)];
        assert_eq!(
            delta_from_codes(&s, &z, &[0, 1], DeltaCombine::SumOfLayers).unwrap(),
            2.0
        );
        assert!(delta_from_codes(&s, &z, &[5], DeltaCombine::SumOfLayers).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut s = vec![
            sample(vec![], 2.0),
            sample(vec![], 4.0),
            sample(vec![], -3.0),
        ];
        normalize_deltas(&mut s, 4.0).unwrap();
        assert_eq!(
            s.iter().map(|x| x.normalized_delta).collect::<Vec<_>>(),
            vec![2.0, 4.0, -4.0]
        );
        let mut s = vec![
            sample(vec![], 1.0),
            sample(vec![], 5.0),
            sample(vec![], -1.0),
        ];
        normalize_deltas(&mut s, 4.0).unwrap();
        assert!((s[0].normalized_delta - 0.8).abs() < 1e-12 && s[1].normalized_delta == 4.0);
        let mut only_pos = vec![sample(vec![], 1.0)];
        assert!(normalize_deltas(&mut only_pos, 4.0).is_err());
        let mut zero_neg = vec![
            sample(vec![], 1.0),
            DeltaSample {
                polarity: Polarity::Negative,
                ..sample(vec![], 0.0)
            },
        ];
        assert!(normalize_deltas(&mut zero_neg, 4.0).is_err());
    }

    #[test]
    fn linear_recovers_generating_weights() {
        let mut rng = rng_from_seed(4);
        let w = [1.5, -2.0, 0.25];
        let samples: Vec<DeltaSample> = (0..30)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(x.clone(), dot(&w, &x))
            })
            .collect();
        let p = fit_linear(&samples, 0.0).unwrap();
        for (a, b) in p.weights.iter().zip(w) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(p.bias.abs() < 1e-6);
        for s in &samples {
            assert!((p.predict(&s.features).unwrap() - s.normalized_delta).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_target_with_zero_features() {
        let samples = vec![sample(vec![0.0, 0.0], 1.7), sample(vec![0.0, 0.0], 1.7)];
        let p = fit_linear(&samples, 1e-4).unwrap();
        assert!((p.bias - 1.7).abs() < 1e-12);
        let p0 = fit_linear(&samples, 0.0).unwrap();
        assert!((p0.bias - 1.7).abs() < 1e-12);
    }

    #[test]
    fn linear_on_two_x1() {
        let samples: Vec<DeltaSample> = (0..10)
            .map(|i| {
                let x1 = i as f64 * 0.3 - 1.0;
                let x2 = ((i * 7) % 5) as f64;
                sample(vec![x1, x2], 2.0 * x1)
            })
            .collect();
        let p = fit_linear(&samples, 1e-4).unwrap();
        assert!((p.predict(&[1.0, 0.0]).unwrap() - 2.0).abs() < 1e-3);
        assert!(p.predict(&[1.0]).is_err());
    }

    #[test]
    fn predict_examples() {
        let lin = Probe {
            kind: ProbeKind::Linear,
            weights: vec![0.0; 3],
            bias: 0.7,
            scales: None,
            training: json!({}),
        };
        assert_eq!(lin.predict(&[1.0, 2.0, 3.0]).unwrap(), 0.7);
        let log = Probe {
            kind: ProbeKind::Logistic,
            weights: vec![0.0],
            bias: 0.0,
            scales: None,
            training: json!({}),
        };
        assert_eq!(log.predict(&[4.0]).unwrap(), 0.5);
    }

    fn separable(n: usize, seed: u64) -> Vec<DeltaSample> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let x = vec![
                    s * (1.0 + rng.random_range(0.0..1.0)),
                    rng.random_range(-1.0..1.0),
                ];
                sample(x, s)
            })
            .collect()
    }

    #[test]
    fn logistic_separates_with_margin() {
        let data = separable(60, 2);
        let p = fit_logistic(&data, &LogisticConfig::default()).unwrap();
        for s in &data {
            assert_eq!(p.classify(&s.features).unwrap(), s.polarity);
        }
        let one_class: Vec<DeltaSample> = data
            .iter()
            .filter(|s| s.polarity == Polarity::Positive)
            .cloned()
            .collect();
        assert!(fit_logistic(&one_class, &LogisticConfig::default()).is_err());
    }

    #[test]
    fn logistic_symmetric_data_has_zero_bias() {
        let base = separable(20, 3);
        let mut data = base.clone();
        for s in &base {
            data.push(sample(
                s.features.iter().map(|v| -v).collect(),
                -s.raw_delta,
            ));
        }
        let p = fit_logistic(
            &data,
            &LogisticConfig {
                epochs: 3000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(p.bias.abs() <= 1e-3, "bias {}", p.bias);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let data = separable(12, 5);
        let x = feature_matrix(&data).unwrap();
        let y: Vec<f64> = data
            .iter()
            .map(|s| f64::from(u8::from(s.polarity == Polarity::Positive)))
            .collect();
        let w0 = xavier_init(1, 2, 0).unwrap();
        let (_, gw, gb) = logistic_loss_and_grad(w0.as_slice(), 0.0, &x, &y);
        let fd = finite_diff_grad(
            |w| logistic_loss_and_grad(w.as_slice(), 0.0, &x, &y).0,
            &w0,
            1e-6,
        )
        .unwrap();
        for (a, b) in gw.iter().zip(fd.as_slice()) {
            assert!((a - b).abs() < 1e-4);
        }
        let fdb = finite_diff_grad(
            |b| logistic_loss_and_grad(w0.as_slice(), b[(0, 0)], &x, &y).0,
            &Matrix::zeros(1, 1),
            1e-6,
        )
        .unwrap();
        assert!((gb - fdb[(0, 0)]).abs() < 1e-4);
    }

    #[test]
    fn probe_and_delta_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = fit_linear(&separable(10, 1), 1e-4).unwrap();
        p.save(dir.path().join("p.lfpp")).unwrap();
        assert_eq!(Probe::load(dir.path().join("p.lfpp")).unwrap(), p);
        let mut samples = separable(6, 8);
        samples[0].token = Some("great".into());
        for s in &mut samples {
            for v in &mut s.features {
                *v = f64::from(*v as f32);
            }
        }
        write_delta_dataset(
            &samples,
            dir.path().join("d.jsonl"),
            dir.path().join("d.lfpa"),
            "toy",
        )
        .unwrap();
        assert_eq!(
            read_delta_dataset(dir.path().join("d.jsonl"), dir.path().join("d.lfpa")).unwrap(),
            samples
        );
    }

    proptest! {
        #[test]
        fn normalization_is_monotone(pos in prop::collection::vec(0.01f64..10.0, 1..10), neg in prop::collection::vec(0.01f64..10.0, 1..10)) {
            let mut s: Vec<DeltaSample> = pos.iter().map(|&v| sample(vec![], v)).chain(neg.iter().map(|&v| sample(vec![], -v))).collect();
            normalize_deltas(&mut s, 4.0).unwrap();
            for a in &s {
                prop_assert!(a.normalized_delta.abs() <= 4.0 + 1e-12);
                prop_assert!(a.normalized_delta * a.raw_delta >= 0.0);
                for b in &s {
                    if a.polarity == b.polarity && a.raw_delta < b.raw_delta {
                        prop_assert!(a.normalized_delta <= b.normalized_delta);
                    }
                }
            }
            let maxp = s.iter().map(|x| x.normalized_delta).fold(f64::MIN, f64::max);
            let minn = s.iter().map(|x| x.normalized_delta).fold(f64::MAX, f64::min);
            prop_assert!((maxp - 4.0).abs() < 1e-12 && (minn + 4.0).abs() < 1e-12);
        }

        #[test]
        fn linear_fit_scales_with_targets(c in 0.1f64..5.0, seed in 0u64..100) {
            let mut rng = rng_from_seed(seed);
            let samples: Vec<DeltaSample> = (0..12).map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(x, rng.random_range(-2.0..2.0))
            }).collect();
            let scaled: Vec<DeltaSample> = samples.iter().map(|s| DeltaSample { normalized_delta: c * s.normalized_delta, ..s.clone() }).collect();
            let a = fit_linear(&samples, 0.0).unwrap();
            let b = fit_linear(&scaled, 0.0).unwrap();
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                prop_assert!((c * wa - wb).abs() < 1e-8);
            }
            prop_assert!((c * a.bias - b.bias).abs() < 1e-8);
        }
    }
}
