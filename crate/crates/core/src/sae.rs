//! Sparse autoencoders over MLP activations.
//!
//! `c = ReLU(W_E x + b_E)`, `x̂ = W_D c`, and the training loss is the
//! batch mean of `‖x − x̂‖²` plus `α` times the batch mean of `‖c‖₁`.
//! With tied weights there is no decoder matrix at all: decoding uses
//! `W_Eᵀ`, and the gradient flows through both uses of `W_E`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_similarity, l2_norm, rng_from_seed, xavier_init, AdamConfig, AdamState, Matrix,
};
use crate::tensorio::{Container, MAGIC_DICTIONARY, MAGIC_SAE};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder {
    /// Encoder, `h × n`.
    pub w_e: Matrix,
    /// Encoder bias, `1 × h`.
    pub b_e: Matrix,
    /// Decoder, `n × h`; `None` when tied.
    pub w_d: Option<Matrix>,
    pub alpha: f64,
    pub layer_index: usize,
    /// Subtracted from inputs before encoding and added back after decoding.
    pub input_center: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeGradients {
    pub w_e: Matrix,
    pub b_e: Matrix,
    pub w_d: Option<Matrix>,
}

impl SparseAutoencoder {
    /// Xavier-initialized weights, zero bias.
    pub fn new(
        input_dim: usize,
        hidden_size: usize,
        tied: bool,
        alpha: f64,
        layer_index: usize,
        seed: u64,
    ) -> Result<Self> {
        let w_e = xavier_init(hidden_size, input_dim, seed)?;
        let w_d = if tied {
            None
        } else {
            Some(xavier_init(input_dim, hidden_size, seed.wrapping_add(1))?)
        };
        Ok(SparseAutoencoder {
            w_e,
            b_e: Matrix::zeros(1, hidden_size),
            w_d,
            alpha,
            layer_index,
            input_center: None,
        })
    }

    /// A tied autoencoder with `W_E = I` and zero bias.
    pub fn identity(n: usize, alpha: f64) -> Self {
        SparseAutoencoder {
            w_e: Matrix::identity(n),
            b_e: Matrix::zeros(1, n),
            w_d: None,
            alpha,
            layer_index: 0,
            input_center: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_e.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_e.rows()
    }

    pub fn is_tied(&self) -> bool {
        self.w_d.is_none()
    }

    /// The decoder as an `n × h` matrix, materializing `W_Eᵀ` when tied.
    pub fn decoder(&self) -> Matrix {
        match &self.w_d {
            Some(d) => d.clone(),
            None => self.w_e.transpose(),
        }
    }

    fn pre_activation(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, autoencoder expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut z = match &self.input_center {
            Some(mu) => {
                let mut centered = batch.clone();
                let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
                centered.add_row_broadcast(&neg);
                centered.matmul_t(&self.w_e)
            }
            None => batch.matmul_t(&self.w_e),
        };
        z.add_row_broadcast(self.b_e.as_slice());
        Ok(z)
    }

    /// Feature coefficients, one row per input row.
    pub fn encode(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.pre_activation(batch)?.map(|z| z.max(0.0)))
    }

    pub fn encode_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(&Matrix::row_vector(x))?.into_vec())
    }

    pub fn decode(&self, codes: &Matrix) -> Result<Matrix> {
        if codes.cols() != self.hidden_size() {
            return Err(Error::shape(format!(
                "codes have {} columns, autoencoder has {} features",
                codes.cols(),
                self.hidden_size()
            )));
        }
        let mut out = match &self.w_d {
            Some(d) => codes.matmul_t(d),
            None => codes.matmul(&self.w_e),
        };
        if let Some(mu) = &self.input_center {
            out.add_row_broadcast(mu);
        }
        Ok(out)
    }

    pub fn decode_vec(&self, c: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode(&Matrix::row_vector(c))?.into_vec())
    }

    /// Column `i` of the decoder: the direction feature `i` writes.
    pub fn feature_direction(&self, i: usize) -> Vec<f64> {
        match &self.w_d {
            Some(d) => d.column(i),
            None => self.w_e.row(i).to_vec(),
        }
    }

    pub fn loss(&self, batch: &Matrix) -> Result<SaeLoss> {
        let codes = self.encode(batch)?;
        Ok(self.loss_from_codes(batch, &codes)?.0)
    }

    fn loss_from_codes(&self, batch: &Matrix, codes: &Matrix) -> Result<(SaeLoss, Matrix)> {
        let recon = self.decode(codes)?;
        let m = batch.rows().max(1) as f64;
        let residual = recon.sub(batch);
        let reconstruction = residual.as_slice().iter().map(|r| r * r).sum::<f64>() / m;
        let sparsity = self.alpha * codes.as_slice().iter().sum::<f64>() / m;
        Ok((
            SaeLoss {
                total: reconstruction + sparsity,
                reconstruction,
                sparsity,
            },
            residual,
        ))
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn gradients(&self, batch: &Matrix) -> Result<(SaeLoss, SaeGradients)> {
        let z = self.pre_activation(batch)?;
        let codes = z.map(|v| v.max(0.0));
        let (loss, residual) = self.loss_from_codes(batch, &codes)?;
        let m = batch.rows().max(1) as f64;
        let d_recon = residual.scaled(2.0 / m);
        let (mut d_codes, mut g_we, g_wd) = match &self.w_d {
            Some(d) => (
                d_recon.matmul(d),
                Matrix::zeros(self.hidden_size(), self.input_dim()),
                Some(d_recon.t_matmul(&codes)),
            ),
            None => (d_recon.matmul_t(&self.w_e), codes.t_matmul(&d_recon), None),
        };
        let l1 = self.alpha / m;
        for (dc, &zv) in d_codes.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *dc = if zv > 0.0 { *dc + l1 } else { 0.0 };
        }
        let centered;
        let x = match &self.input_center {
            Some(mu) => {
                let mut c = batch.clone();
                let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
                c.add_row_broadcast(&neg);
                centered = c;
                &centered
            }
            None => batch,
        };
        g_we.add_assign(&d_codes.t_matmul(x));
        let g_b = Matrix::row_vector(&d_codes.column_sums());
        Ok((
            loss,
            SaeGradients {
                w_e: g_we,
                b_e: g_b,
                w_d: g_wd,
            },
        ))
    }

    /// Mean count of strictly positive coefficients per sample.
    pub fn true_sparsity(&self, batch: &Matrix) -> Result<f64> {
        let codes = self.encode(batch)?;
        if codes.rows() == 0 {
            return Ok(0.0);
        }
        Ok(codes.as_slice().iter().filter(|&&c| c > 0.0).count() as f64 / codes.rows() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.w_e.is_finite()
            && self.b_e.is_finite()
            && self.w_d.as_ref().is_none_or(|d| d.is_finite())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            MAGIC_SAE,
            json!({
                "tied": self.is_tied(),
                "alpha": self.alpha,
                "layer_index": self.layer_index,
                "hidden_size": self.hidden_size(),
                "input_dim": self.input_dim(),
                "centered": self.input_center.is_some(),
            }),
        );
        c.push("w_e", self.w_e.clone());
        c.push("b_e", self.b_e.clone());
        if let Some(d) = &self.w_d {
            c.push("w_d", d.clone());
        }
        if let Some(mu) = &self.input_center {
            c.push("input_center", Matrix::row_vector(mu));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let tied = c.meta_bool("tied")?;
        let h = c.meta_u64("hidden_size")? as usize;
        let n = c.meta_u64("input_dim")? as usize;
        let w_e = c.section("w_e")?.clone();
        let b_e = c.section("b_e")?.clone();
        let w_d = if tied {
            None
        } else {
            Some(c.section("w_d")?.clone())
        };
        let input_center = if c.meta_bool("centered")? {
            Some(c.section("input_center")?.as_slice().to_vec())
        } else {
            None
        };
        if w_e.shape() != (h, n)
            || b_e.shape() != (1, h)
            || w_d.as_ref().is_some_and(|d| d.shape() != (n, h))
            || input_center.as_ref().is_some_and(|mu| mu.len() != n)
        {
            return Err(Error::shape("autoencoder sections disagree with metadata"));
        }
        let ae = SparseAutoencoder {
            w_e,
            b_e,
            w_d,
            alpha: c.meta_f64("alpha")?,
            layer_index: c.meta_u64("layer_index")? as usize,
            input_center,
        };
        if !ae.is_finite() {
            return Err(Error::Diverged(
                "checkpoint holds non-finite parameters".into(),
            ));
        }
        Ok(ae)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::read(MAGIC_SAE, path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    pub hidden_size: usize,
    pub tied: bool,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_examples: usize,
    pub seed: u64,
    /// Record a trace point every this many optimizer steps.
    pub log_every: usize,
    pub mean_center: bool,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            hidden_size: 32,
            tied: true,
            alpha: 0.001,
            learning_rate: 1e-3,
            batch_size: 32,
            n_examples: 75_000,
            seed: 0,
            log_every: 100,
            mean_center: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub examples_seen: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub true_sparsity: f64,
}

pub fn trace_to_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,examples_seen,total,reconstruction,true_sparsity\n");
    for p in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step, p.examples_seen, p.total, p.reconstruction, p.true_sparsity
        ));
    }
    out
}

/// Trains an autoencoder with Adam on minibatches drawn by reshuffling the
/// rows each pass, until `n_examples` rows have been consumed.
pub fn train(
    data: &Matrix,
    layer_index: usize,
    cfg: &SaeTrainConfig,
) -> Result<(SparseAutoencoder, Vec<TracePoint>)> {
    let n = data.cols();
    if cfg.batch_size == 0 || data.rows() < cfg.batch_size {
        return Err(Error::Insufficient(format!(
            "{} rows for batch size {}",
            data.rows(),
            cfg.batch_size
        )));
    }
    if cfg.hidden_size != n && cfg.hidden_size != 2 * n {
        log::warn!(
            "hidden size {} is neither n = {n} nor 2n; continuing",
            cfg.hidden_size
        );
    }
    if let Some((r, c)) = data.first_non_finite() {
        return Err(Error::NonFinite { row: r, col: c });
    }
    let mut ae = SparseAutoencoder::new(
        n,
        cfg.hidden_size,
        cfg.tied,
        cfg.alpha,
        layer_index,
        cfg.seed,
    )?;
    if cfg.mean_center {
        ae.input_center = Some(data.column_means());
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut opt_e = AdamState::for_param(&ae.w_e, adam);
    let mut opt_b = AdamState::for_param(&ae.b_e, adam);
    let mut opt_d = ae.w_d.as_ref().map(|d| AdamState::for_param(d, adam));

    let mut rng = rng_from_seed(cfg.seed ^ 0x5ae5_ae5a);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::new();
    let mut seen = 0;
    let mut step = 0;
    let log_every = cfg.log_every.max(1);
    while seen < cfg.n_examples {
        let take = cfg.batch_size.min(cfg.n_examples - seen);
        let mut idx = Vec::with_capacity(take);
        while idx.len() < take {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let grab = (take - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + grab]);
            cursor += grab;
        }
        let batch = data.select_rows(&idx);
        let (loss, g) = ae.gradients(&batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged(format!(
                "SAE loss became {} at step {step}; last trace point {:?}",
                loss.total,
                trace.last()
            )));
        }
        if step % log_every == 0 {
            trace.push(TracePoint {
                step,
                examples_seen: seen,
                total: loss.total,
                reconstruction: loss.reconstruction,
                true_sparsity: ae.true_sparsity(&batch)?,
            });
        }
        opt_e.step(&mut ae.w_e, &g.w_e)?;
        opt_b.step(&mut ae.b_e, &g.b_e)?;
        if let (Some(d), Some(gd), Some(o)) = (ae.w_d.as_mut(), g.w_d.as_ref(), opt_d.as_mut()) {
            o.step(d, gd)?;
        }
        seen += take;
        step += 1;
    }
    if step > 0 {
        let sample = data.select_rows(&order[..cfg.batch_size.min(order.len())]);
        let loss = ae.loss(&sample)?;
        trace.push(TracePoint {
            step,
            examples_seen: seen,
            total: loss.total,
            reconstruction: loss.reconstruction,
            true_sparsity: ae.true_sparsity(&sample)?,
        });
    }
    Ok((ae, trace))
}

/// Unit-normalized decoder directions. Features whose direction has zero
/// norm are left out and listed in `dead`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDictionary {
    /// One unit-norm feature per row.
    pub features: Matrix,
    /// Original feature index of each row.
    pub indices: Vec<usize>,
    pub dead: Vec<usize>,
    pub layer_index: usize,
    pub source: String,
}

impl FeatureDictionary {
    /// Builds from rows, normalizing each and skipping zero rows.
    pub fn from_rows(rows: &Matrix, layer_index: usize, source: impl Into<String>) -> Self {
        let mut data = Vec::new();
        let mut indices = Vec::new();
        let mut dead = Vec::new();
        for r in 0..rows.rows() {
            let v = rows.row(r);
            let norm = l2_norm(v);
            if norm > 0.0 && norm.is_finite() {
                data.extend(v.iter().map(|x| x / norm));
                indices.push(r);
            } else {
                dead.push(r);
            }
        }
        let features =
            Matrix::from_vec(indices.len(), rows.cols(), data).expect("row lengths agree");
        FeatureDictionary {
            features,
            indices,
            dead,
            layer_index,
            source: source.into(),
        }
    }

    pub fn from_autoencoder(ae: &SparseAutoencoder, source: impl Into<String>) -> Self {
        Self::from_rows(&ae.decoder().transpose(), ae.layer_index, source)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            MAGIC_DICTIONARY,
            json!({"layer_index": self.layer_index, "source": self.source, "dead": self.dead}),
        );
        c.push("features", self.features.clone());
        let idx: Vec<f64> = self.indices.iter().map(|&i| i as f64).collect();
        c.push("indices", Matrix::row_vector(&idx));
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmcsResult {
    pub mean: f64,
    /// For each feature of the first dictionary, its best cosine match.
    pub per_feature: Vec<f64>,
}

/// Mean over `d1`'s features of the maximum cosine similarity to any
/// feature of `d2`. `d1` must not be larger than `d2`.
pub fn mmcs(d1: &FeatureDictionary, d2: &FeatureDictionary) -> Result<MmcsResult> {
    let per_feature = max_cosines(d1, d2)?;
    let mean = per_feature.iter().sum::<f64>() / per_feature.len() as f64;
    Ok(MmcsResult { mean, per_feature })
}

fn max_cosines(d1: &FeatureDictionary, d2: &FeatureDictionary) -> Result<Vec<f64>> {
    if d1.is_empty() || d2.is_empty() {
        return Err(Error::Insufficient("empty dictionary".into()));
    }
    if d1.dim() != d2.dim() {
        return Err(Error::shape(format!(
            "dictionary dimensions {} and {}",
            d1.dim(),
            d2.dim()
        )));
    }
    if d1.len() > d2.len() {
        return Err(Error::invalid(format!(
            "first dictionary ({}) must not be larger than the second ({})",
            d1.len(),
            d2.len()
        )));
    }
    Ok((0..d1.len())
        .map(|i| {
            (0..d2.len())
                .map(|j| cosine_similarity(d1.features.row(i), d2.features.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// The `k` features of `d1` with the highest max-cosine against `d2`,
/// as `(original feature index, similarity)`, best first, ties by index.
pub fn top_similarity_features(
    d1: &FeatureDictionary,
    d2: &FeatureDictionary,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if k > d1.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds dictionary size {}",
            d1.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let sims = max_cosines(d1, d2)?;
    let mut ranked: Vec<(usize, f64)> = d1.indices.iter().copied().zip(sims).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}
