//! A small decoder-only transformer: single-head causal attention and a
//! ReLU MLP per layer, both on the residual stream, with no layer norm.
//!
//! Per layer, with the residual stream `X` (one row per position):
//!
//! ```text
//! Q = X·W_q   K = X·W_k   V = X·W_v
//! A = softmax(Q·Kᵀ / √d + causal mask)     O = A·V
//! H = X + O
//! M = ReLU(H·W_in + b_in)                   (captured "MLP activations", width 4d)
//! X' = H + M·W_out + b_out
//! ```
//!
//! Logits are `X_final · W_unembed`. The backward pass is written out by
//! hand and checked against finite differences in the tests.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{
    log_softmax_at, rng_from_seed, softmax_in_place, xavier_with_rng, Matrix, Rng,
};
use crate::tensorio::{Container, MAGIC_MODEL};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub max_context: usize,
}

impl ModelConfig {
    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl LayerParams {
    fn zeros(d: usize) -> Self {
        LayerParams {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_in: Matrix::zeros(d, 4 * d),
            b_in: Matrix::zeros(1, 4 * d),
            w_out: Matrix::zeros(4 * d, d),
            b_out: Matrix::zeros(1, d),
        }
    }

    const NAMES: [&'static str; 7] = ["w_q", "w_k", "w_v", "w_in", "b_in", "w_out", "b_out"];
    const MLP_NAMES: [&'static str; 4] = ["w_in", "b_in", "w_out", "b_out"];

    fn tensors(&self) -> [&Matrix; 7] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub unembedding: Matrix,
}

/// MLP hidden activations for the requested layers, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedActivations {
    pub layers: Vec<usize>,
    pub activations: Vec<Matrix>,
}

impl CapturedActivations {
    pub fn get(&self, layer: usize) -> Option<&Matrix> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.activations[i])
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `positions × vocab`, next-token logits.
    pub logits: Matrix,
    pub captured: CapturedActivations,
}

/// Everything the backward pass needs, plus the attention patterns.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    tokens: Vec<u32>,
    layers: Vec<LayerTrace>,
    final_stream: Matrix,
    pub logits: Matrix,
}

#[derive(Clone, Debug)]
struct LayerTrace {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attention: Matrix,
    h: Matrix,
    pre_act: Matrix,
    mlp: Matrix,
}

impl ForwardTrace {
    pub fn attention(&self, layer: usize) -> &Matrix {
        &self.layers[layer].attention
    }

    pub fn mlp_activations(&self, layer: usize) -> &Matrix {
        &self.layers[layer].mlp
    }
}

/// Rewrites a layer's MLP hidden activations (`positions × 4d`) in place
/// before they are projected back onto the residual stream.
pub type MlpHook<'a> = &'a dyn Fn(usize, &mut Matrix) -> Result<()>;

impl TinyTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let ModelConfig {
            vocab_size: v,
            d_model: d,
            n_layers,
            max_context,
        } = config;
        if v == 0 || d == 0 || n_layers == 0 || max_context == 0 {
            return Err(Error::invalid(format!(
                "degenerate model config {config:?}"
            )));
        }
        let depth_scale = 1.0 / (2.0 * n_layers as f64).sqrt();
        let token_embedding = xavier_with_rng(v, d, rng)?;
        let position_embedding = xavier_with_rng(max_context, d, rng)?.scaled(0.5);
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(LayerParams {
                w_q: xavier_with_rng(d, d, rng)?,
                w_k: xavier_with_rng(d, d, rng)?,
                w_v: xavier_with_rng(d, d, rng)?.scaled(depth_scale),
                w_in: xavier_with_rng(d, 4 * d, rng)?,
                b_in: Matrix::zeros(1, 4 * d),
                w_out: xavier_with_rng(4 * d, d, rng)?.scaled(depth_scale),
                b_out: Matrix::zeros(1, d),
            });
        }
        let unembedding = xavier_with_rng(d, v, rng)?;
        Ok(TinyTransformer {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    /// Same architecture, every parameter zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let c = self.config;
        TinyTransformer {
            config: c,
            token_embedding: Matrix::zeros(c.vocab_size, c.d_model),
            position_embedding: Matrix::zeros(c.max_context, c.d_model),
            layers: (0..c.n_layers)
                .map(|_| LayerParams::zeros(c.d_model))
                .collect(),
            unembedding: Matrix::zeros(c.d_model, c.vocab_size),
        }
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.unembedding);
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.named_params().into_iter().map(|(_, m)| m).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max context {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::invalid(format!(
                "token id {t} out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for every position plus MLP activations of `capture` layers.
    pub fn forward(&self, tokens: &[u32], capture: &[usize]) -> Result<ForwardOutput> {
        self.forward_with_hook(tokens, capture, None)
    }

    pub fn forward_with_hook(
        &self,
        tokens: &[u32],
        capture: &[usize],
        hook: Option<MlpHook<'_>>,
    ) -> Result<ForwardOutput> {
        if let Some(&l) = capture.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(Error::invalid(format!("no layer {l} to capture")));
        }
        let trace = self.trace(tokens, hook)?;
        let activations = capture
            .iter()
            .map(|&l| trace.layers[l].mlp.clone())
            .collect();
        Ok(ForwardOutput {
            logits: trace.logits,
            captured: CapturedActivations {
                layers: capture.to_vec(),
                activations,
            },
        })
    }

    /// Full forward pass keeping every intermediate.
    pub fn trace(&self, tokens: &[u32], hook: Option<MlpHook<'_>>) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let len = tokens.len();
        let mut x = Matrix::zeros(len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.token_embedding.row(tok as usize))
                .zip(self.position_embedding.row(t))
            {
                *o = e + p;
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut traces = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let q = x.matmul(&p.w_q);
            let k = x.matmul(&p.w_k);
            let v = x.matmul(&p.w_v);
            let mut attention = q.matmul_t(&k);
            for i in 0..len {
                let row = attention.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j <= i {
                        *s * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(row);
            }
            let mut h = attention.matmul(&v);
            h.add_assign(&x);
            let mut pre_act = h.matmul(&p.w_in);
            pre_act.add_row_broadcast(p.b_in.as_slice());
            let mut mlp = pre_act.map(|z| z.max(0.0));
            if let Some(hook) = hook {
                hook(l, &mut mlp)?;
            }
            let mut out = mlp.matmul(&p.w_out);
            out.add_row_broadcast(p.b_out.as_slice());
            out.add_assign(&h);
            traces.push(LayerTrace {
                input: std::mem::replace(&mut x, out),
                q,
                k,
                v,
                attention,
                h,
                pre_act,
                mlp,
            });
        }
        let logits = x.matmul(&self.unembedding);
        if let Some((r, c)) = logits.first_non_finite() {
            return Err(Error::Diverged(format!("non-finite logit at ({r}, {c})")));
        }
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            layers: traces,
            final_stream: x,
            logits,
        })
    }

    /// Gradient of a scalar objective given `∂objective/∂logits`, accumulated
    /// into `grads`. Only valid for traces recorded without a hook.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Matrix, grads: &mut TinyTransformer) {
        let d = self.config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        grads
            .unembedding
            .add_assign(&trace.final_stream.t_matmul(d_logits));
        let mut dx = d_logits.matmul_t(&self.unembedding);
        for (l, (p, t)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let g = &mut grads.layers[l];
            // MLP block
            let dy = dx;
            g.w_out.add_assign(&t.mlp.t_matmul(&dy));
            add_row(&mut g.b_out, &dy.column_sums());
            let mut dz = dy.matmul_t(&p.w_out);
            for (dzv, &z) in dz.as_mut_slice().iter_mut().zip(t.pre_act.as_slice()) {
                if z <= 0.0 {
                    *dzv = 0.0;
                }
            }
            g.w_in.add_assign(&t.h.t_matmul(&dz));
            add_row(&mut g.b_in, &dz.column_sums());
            let mut dh = dz.matmul_t(&p.w_in);
            dh.add_assign(&dy);
            // attention block: H = X + A·V
            let d_attn = dh.matmul_t(&t.v);
            let dv = t.attention.t_matmul(&dh);
            let mut ds = Matrix::zeros(d_attn.rows(), d_attn.cols());
            for i in 0..ds.rows() {
                let a = t.attention.row(i);
                let da = d_attn.row(i);
                let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
                for (j, s) in ds.row_mut(i).iter_mut().enumerate() {
                    *s = a[j] * (da[j] - inner) * scale;
                }
            }
            let dq = ds.matmul(&t.k);
            let dk = ds.t_matmul(&t.q);
            g.w_q.add_assign(&t.input.t_matmul(&dq));
            g.w_k.add_assign(&t.input.t_matmul(&dk));
            g.w_v.add_assign(&t.input.t_matmul(&dv));
            let mut dx_new = dh;
            dx_new.add_assign(&dq.matmul_t(&p.w_q));
            dx_new.add_assign(&dk.matmul_t(&p.w_k));
            dx_new.add_assign(&dv.matmul_t(&p.w_v));
            dx = dx_new;
        }
        for (pos, &tok) in trace.tokens.iter().enumerate() {
            let src = dx.row(pos);
            for (o, v) in grads
                .token_embedding
                .row_mut(tok as usize)
                .iter_mut()
                .zip(src)
            {
                *o += v;
            }
            for (o, v) in grads.position_embedding.row_mut(pos).iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    /// Log-probability of `tokens[i + 1]` given `tokens[..=i]` for each
    /// `i` in `from..len - 1`.
    pub fn sequence_logprobs(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>> {
        let out = self.forward(tokens, &[])?;
        Ok(logprobs_from_logits(&out.logits, tokens, from))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            MAGIC_MODEL,
            json!({
                "vocab_size": self.config.vocab_size,
                "d_model": self.config.d_model,
                "n_layers": self.config.n_layers,
                "max_context": self.config.max_context,
            }),
        );
        for (name, m) in self.named_params() {
            c.push(name, m.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig {
            vocab_size: c.meta_u64("vocab_size")? as usize,
            d_model: c.meta_u64("d_model")? as usize,
            n_layers: c.meta_u64("n_layers")? as usize,
            max_context: c.meta_u64("max_context")? as usize,
        };
        let mut model = TinyTransformer {
            config,
            ..TinyTransformer::zeros_like_config(config)
        };
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let m = c.section(name)?;
            if m.shape() != slot.shape() {
                return Err(Error::shape(format!(
                    "section {name}: {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m.clone();
        }
        Ok(model)
    }

    fn zeros_like_config(config: ModelConfig) -> Self {
        let shell = TinyTransformer {
            config,
            token_embedding: Matrix::zeros(0, 0),
            position_embedding: Matrix::zeros(0, 0),
            layers: Vec::new(),
            unembedding: Matrix::zeros(0, 0),
        };
        shell.zeros_like()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::read(MAGIC_MODEL, path)?)
    }
}

fn add_row(dst: &mut Matrix, src: &[f64]) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src) {
        *d += s;
    }
}

pub fn logprobs_from_logits(logits: &Matrix, tokens: &[u32], from: usize) -> Vec<f64> {
    (from..tokens.len().saturating_sub(1))
        .map(|i| log_softmax_at(logits.row(i), tokens[i + 1] as usize))
        .collect()
}

/// Samples `n_tokens` continuations of `prefix`.
pub fn generate(
    model: &TinyTransformer,
    prefix: &[u32],
    n_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    let mut rng = rng_from_seed(seed);
    generate_with(model, prefix, n_tokens, temperature, &mut rng, None)
}

/// Autoregressive sampling from `softmax(logits / temperature)`, drawing
/// exactly one uniform variate per generated token.
pub fn generate_with(
    model: &TinyTransformer,
    prefix: &[u32],
    n_tokens: usize,
    temperature: f64,
    rng: &mut Rng,
    hook: Option<MlpHook<'_>>,
) -> Result<Vec<u32>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if prefix.len() + n_tokens > model.config.max_context {
        return Err(Error::invalid(format!(
            "prefix {} + {n_tokens} new tokens exceeds max context {}",
            prefix.len(),
            model.config.max_context
        )));
    }
    let mut tokens = prefix.to_vec();
    model.check_tokens(&tokens)?;
    for _ in 0..n_tokens {
        let out = model.forward_with_hook(&tokens, &[], hook)?;
        let mut probs: Vec<f64> = out
            .logits
            .row(tokens.len() - 1)
            .iter()
            .map(|l| l / temperature)
            .collect();
        softmax_in_place(&mut probs);
        let u: f64 = rng.random();
        tokens.push(sample_index(&probs, u) as u32);
    }
    Ok(tokens)
}

/// Inverse-CDF draw; falls back to the last non-zero entry on round-off.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_nonzero
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    HighestDivergence,
    LowestLayers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DivergenceOptions {
    pub top_k: usize,
    pub mode: SelectionMode,
    /// Restrict the per-layer norm to MLP parameters.
    pub mlp_only: bool,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        DivergenceOptions {
            top_k: 5,
            mode: SelectionMode::HighestDivergence,
            mlp_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub divergences: Vec<f64>,
    /// Ascending layer indices.
    pub selected_layers: Vec<usize>,
    pub mode: SelectionMode,
}

/// Per-layer ℓ2 norm of the parameter difference and the layer selection.
/// Equal divergences are ordered by lower layer index.
pub fn parameter_divergence(
    base: &TinyTransformer,
    tuned: &TinyTransformer,
    options: DivergenceOptions,
) -> Result<DivergenceReport> {
    if base.config != tuned.config {
        return Err(Error::shape(format!(
            "architecture mismatch: {:?} vs {:?}",
            base.config, tuned.config
        )));
    }
    let n_layers = base.config.n_layers;
    if options.top_k == 0 || options.top_k > n_layers {
        return Err(Error::invalid(format!(
            "top_k = {} outside 1..={n_layers}",
            options.top_k
        )));
    }
    let divergences: Vec<f64> = base
        .layers
        .iter()
        .zip(&tuned.layers)
        .map(|(a, b)| {
            LayerParams::NAMES
                .iter()
                .zip(a.tensors().into_iter().zip(b.tensors()))
                .filter(|(name, _)| !options.mlp_only || LayerParams::MLP_NAMES.contains(name))
                .map(|(_, (x, y))| {
                    x.as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut selected: Vec<usize> = match options.mode {
        SelectionMode::LowestLayers => (0..options.top_k).collect(),
        SelectionMode::HighestDivergence => {
            let mut order: Vec<usize> = (0..n_layers).collect();
            order.sort_by(|&a, &b| divergences[b].total_cmp(&divergences[a]).then(a.cmp(&b)));
            order.truncate(options.top_k);
            order
        }
    };
    selected.sort_unstable();
    Ok(DivergenceReport {
        divergences,
        selected_layers: selected,
        mode: options.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn small() -> TinyTransformer {
        TinyTransformer::new(
            ModelConfig {
                vocab_size: 11,
                d_model: 8,
                n_layers: 2,
                max_context: 10,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = small();
        let t = m.trace(&[4], None).unwrap();
        assert_eq!(t.logits.shape(), (1, 11));
        for l in 0..2 {
            assert_eq!(t.attention(l).as_slice(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = small();
        let t = m.trace(&[1, 2, 3, 4, 5, 6, 7, 8], None).unwrap();
        for l in 0..2 {
            let a = t.attention(l);
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(a.row(i)[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn causal_prefix_logits_unchanged() {
        let m = small();
        let a = m.forward(&[1, 2, 3, 4, 5], &[]).unwrap().logits;
        let b = m.forward(&[1, 2, 3, 9, 0], &[]).unwrap().logits;
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn embedding_only_path_when_value_and_mlp_out_are_zero() {
        let mut m = small();
        for l in &mut m.layers {
            l.w_v.fill(0.0);
            l.w_out.fill(0.0);
        }
        let tokens = [3u32, 1, 7];
        let got = m.forward(&tokens, &[]).unwrap().logits;
        for (pos, &tok) in tokens.iter().enumerate() {
            let stream: Vec<f64> = m
                .token_embedding
                .row(tok as usize)
                .iter()
                .zip(m.position_embedding.row(pos))
                .map(|(a, b)| a + b)
                .collect();
            let want = Matrix::row_vector(&stream).matmul(&m.unembedding);
            for (g, w) in got.row(pos).iter().zip(want.as_slice()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_validation() {
        let m = small();
        assert!(m.forward(&[11], &[]).is_err());
        assert!(m.forward(&[0; 11], &[]).is_err());
        assert!(m.forward(&[], &[]).is_err());
        assert!(m.forward(&[1], &[2]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = small();
        let tokens = [1u32, 5, 2, 9, 4];
        let targets = [5u32, 2, 9, 4, 0];
        // objective: summed next-token log-likelihood
        let objective = |model: &TinyTransformer| -> f64 {
            let logits = model.forward(&tokens, &[]).unwrap().logits;
            (0..tokens.len())
                .map(|i| log_softmax_at(logits.row(i), targets[i] as usize))
                .sum()
        };
        let trace = m.trace(&tokens, None).unwrap();
        let mut d_logits = Matrix::zeros(tokens.len(), 11);
        for i in 0..tokens.len() {
            let mut p = trace.logits.row(i).to_vec();
            softmax_in_place(&mut p);
            for (j, pj) in p.iter().enumerate() {
                d_logits[(i, j)] = (j == targets[i] as usize) as u8 as f64 - pj;
            }
        }
        let mut grads = m.zeros_like();
        m.backward(&trace, &d_logits, &mut grads);

        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let base = m.params()[idx].clone();
            let fd = finite_diff_grad(
                |x| {
                    let mut probe = m.clone();
                    *probe.params_mut()[idx] = x.clone();
                    objective(&probe)
                },
                &base,
                1e-6,
            )
            .unwrap();
            let analytic = grads.params()[idx];
            let err = relative_error(analytic, &fd);
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn generation_contracts() {
        let m = small();
        assert_eq!(generate(&m, &[1, 2], 0, 1.0, 5).unwrap(), vec![1, 2]);
        let a = generate(&m, &[1, 2], 6, 1.0, 5).unwrap();
        assert_eq!(a, generate(&m, &[1, 2], 6, 1.0, 5).unwrap());
        assert!(generate(&m, &[1], 3, 0.0, 1).is_err());
        assert!(generate(&m, &[1], 3, -1.0, 1).is_err());
        assert!(generate(&m, &[1, 2], 9, 1.0, 1).is_err());
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let m = small();
        let sampled = generate(&m, &[3, 4], 6, 1e-6, 99).unwrap();
        let mut greedy = vec![3u32, 4];
        for _ in 0..6 {
            let logits = m.forward(&greedy, &[]).unwrap().logits;
            let row = logits.row(greedy.len() - 1);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            greedy.push(best as u32);
        }
        assert_eq!(sampled, greedy);
    }

    #[test]
    fn divergence_examples() {
        let base = small();
        let same = parameter_divergence(
            &base,
            &base,
            DivergenceOptions {
                top_k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(same.divergences, vec![0.0, 0.0]);
        assert_eq!(same.selected_layers, vec![0, 1]);

        let mut tuned = base.clone();
        tuned.layers[1].w_in[(2, 3)] += 3.0;
        let opts = DivergenceOptions {
            top_k: 1,
            ..Default::default()
        };
        let r = parameter_divergence(&base, &tuned, opts).unwrap();
        assert!(r.divergences[0] == 0.0 && (r.divergences[1] - 3.0).abs() < 1e-12);
        assert_eq!(r.selected_layers, vec![1]);
        let back = parameter_divergence(&tuned, &base, opts).unwrap();
        assert_eq!(back.divergences, r.divergences);

        let mut attn_only = base.clone();
        attn_only.layers[0].w_q[(0, 0)] += 1.0;
        let mlp = parameter_divergence(
            &base,
            &attn_only,
            DivergenceOptions {
                top_k: 1,
                mlp_only: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(mlp.divergences, vec![0.0, 0.0]);

        let low = parameter_divergence(
            &base,
            &tuned,
            DivergenceOptions {
                top_k: 1,
                mode: SelectionMode::LowestLayers,
                mlp_only: false,
            },
        )
        .unwrap();
        assert_eq!(low.selected_layers, vec![0]);
        assert!(parameter_divergence(
            &base,
            &tuned,
            DivergenceOptions {
                top_k: 3,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let back = TinyTransformer::from_container(&m.to_container()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.to_container().to_bytes(), back.to_container().to_bytes());
    }
}
