//! Zero-ablation of dictionary features inside the MLP of a running model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{reward_ids, RewardConfig};
use crate::numerics::{derive_seed, rng_from_seed, Matrix};
use crate::sae::SparseAutoencoder;
use crate::toymodel::{generate_with, ForwardOutput, TinyTransformer};

/// How an ablated feature is removed from an activation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// `a − Σ c_i d_i`: the feature contributions go, the autoencoder
    /// residual stays.
    #[default]
    Subtract,
    /// Replace `a` by the decoding of its codes with the ablated features
    /// zeroed. Loses whatever the autoencoder fails to reconstruct.
    Replace,
}

#[derive(Clone, Debug)]
pub struct LayerAblation<'a> {
    pub layer: usize,
    pub autoencoder: &'a SparseAutoencoder,
    pub features: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct AblationSpec<'a> {
    pub layers: Vec<LayerAblation<'a>>,
    pub mode: AblationMode,
}

/// Serializable record of what was ablated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTarget {
    pub layer: usize,
    pub features: Vec<usize>,
}

impl<'a> AblationSpec<'a> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.features.is_empty())
    }

    pub fn targets(&self) -> Vec<AblationTarget> {
        self.layers
            .iter()
            .map(|l| AblationTarget {
                layer: l.layer,
                features: l.features.clone(),
            })
            .collect()
    }

    pub fn validate(&self, model: &TinyTransformer) -> Result<()> {
        let width = model.config.mlp_width();
        let mut seen = Vec::new();
        for l in &self.layers {
            if l.layer >= model.config.n_layers {
                return Err(Error::invalid(format!(
                    "ablation layer {} but model has {} layers",
                    l.layer, model.config.n_layers
                )));
            }
            if seen.contains(&l.layer) {
                return Err(Error::invalid(format!("layer {} listed twice", l.layer)));
            }
            seen.push(l.layer);
            if l.autoencoder.input_dim() != width {
                return Err(Error::shape(format!(
                    "autoencoder for layer {} reads {} dims, MLP width is {width}",
                    l.layer,
                    l.autoencoder.input_dim()
                )));
            }
            if let Some(&bad) = l
                .features
                .iter()
                .find(|&&f| f >= l.autoencoder.hidden_size())
            {
                return Err(Error::invalid(format!(
                    "feature {bad} out of range for layer {} ({} features)",
                    l.layer,
                    l.autoencoder.hidden_size()
                )));
            }
        }
        Ok(())
    }

    fn apply(&self, layer: usize, acts: &mut Matrix) -> Result<()> {
        let Some(entry) = self.layers.iter().find(|l| l.layer == layer) else {
            return Ok(());
        };
        if entry.features.is_empty() {
            return Ok(());
        }
        let ae = entry.autoencoder;
        let mut codes = ae.encode(acts)?;
        match self.mode {
            AblationMode::Subtract => {
                for r in 0..acts.rows() {
                    remove_features(acts.row_mut(r), codes.row(r), ae, &entry.features, -1.0);
                }
            }
            AblationMode::Replace => {
                for r in 0..codes.rows() {
                    let row = codes.row_mut(r);
                    for &f in &entry.features {
                        row[f] = 0.0;
                    }
                }
                *acts = ae.decode(&codes)?;
            }
        }
        Ok(())
    }
}

/// Adds `sign · c_i · d_i` to `row` for every listed feature. Zero
/// coefficients are skipped so the row stays bit-identical.
fn remove_features(
    row: &mut [f64],
    codes: &[f64],
    ae: &SparseAutoencoder,
    features: &[usize],
    sign: f64,
) {
    for &f in features {
        let c = codes[f];
        if c == 0.0 {
            continue;
        }
        for (a, d) in row.iter_mut().zip(ae.feature_direction(f)) {
            *a += sign * c * d;
        }
    }
}

/// Subtracts the listed features' contributions from one activation row,
/// using coefficients already computed for that row.
pub fn subtract_contribution(
    row: &mut [f64],
    codes: &[f64],
    ae: &SparseAutoencoder,
    features: &[usize],
) {
    remove_features(row, codes, ae, features, -1.0);
}

/// Inverse of [`subtract_contribution`] for the same coefficients.
pub fn add_contribution(
    row: &mut [f64],
    codes: &[f64],
    ae: &SparseAutoencoder,
    features: &[usize],
) {
    remove_features(row, codes, ae, features, 1.0);
}

/// Forward pass with the spec applied at every listed layer; captured
/// activations are the post-ablation ones.
pub fn ablated_forward(
    model: &TinyTransformer,
    tokens: &[u32],
    capture: &[usize],
    spec: &AblationSpec<'_>,
) -> Result<ForwardOutput> {
    spec.validate(model)?;
    let hook = |l: usize, a: &mut Matrix| spec.apply(l, a);
    model.forward_with_hook(tokens, capture, Some(&hook))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub before: f64,
    pub after: f64,
    pub n_completions: usize,
    pub spec: Vec<AblationTarget>,
    pub mode: AblationMode,
}

#[derive(Clone, Copy, Debug)]
pub struct CompletionSettings {
    pub n_completions: usize,
    pub completion_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Mean reward of sampled completions with and without ablation. Completion
/// `i` continues prefix `i mod len` with its own sampler stream, so both
/// runs see identical random draws and only the ablation differs.
pub fn ablation_reward_eval(
    model: &TinyTransformer,
    spec: &AblationSpec<'_>,
    prefixes: &[Vec<u32>],
    values: &[f64],
    reward_cfg: &RewardConfig,
    settings: CompletionSettings,
) -> Result<AblationOutcome> {
    if settings.n_completions == 0 {
        return Err(Error::invalid("n_completions must be at least 1"));
    }
    if prefixes.is_empty() {
        return Err(Error::Insufficient("no prefixes to complete".into()));
    }
    if values.len() != model.config.vocab_size {
        return Err(Error::shape(format!(
            "{} lexicon values for a vocabulary of {}",
            values.len(),
            model.config.vocab_size
        )));
    }
    spec.validate(model)?;
    let before = mean_reward(model, None, prefixes, values, reward_cfg, settings)?;
    let after = if spec.is_empty() {
        before
    } else {
        mean_reward(model, Some(spec), prefixes, values, reward_cfg, settings)?
    };
    Ok(AblationOutcome {
        before,
        after,
        n_completions: settings.n_completions,
        spec: spec.targets(),
        mode: spec.mode,
    })
}

fn mean_reward(
    model: &TinyTransformer,
    spec: Option<&AblationSpec<'_>>,
    prefixes: &[Vec<u32>],
    values: &[f64],
    reward_cfg: &RewardConfig,
    s: CompletionSettings,
) -> Result<f64> {
    let one = |i: usize| -> Result<f64> {
        let prefix = &prefixes[i % prefixes.len()];
        let mut rng = rng_from_seed(derive_seed(s.seed, &format!("completion-{i}")));
        let hook = |l: usize, a: &mut Matrix| spec.map_or(Ok(()), |sp| sp.apply(l, a));
        let tokens = generate_with(
            model,
            prefix,
            s.completion_len,
            s.temperature,
            &mut rng,
            Some(&hook),
        )?;
        Ok(reward_ids(&tokens[prefix.len()..], values, reward_cfg))
    };
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(s.n_completions);
    let rewards: Vec<f64> = if workers <= 1 {
        (0..s.n_completions).map(one).collect::<Result<_>>()?
    } else {
        let chunk = s.n_completions.div_ceil(workers);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let one = &one;
                    scope.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(s.n_completions))
                            .map(one)
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("completion worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(s.n_completions);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    // summed in index order so the result does not depend on thread count
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{toy_lexicon, toy_vocabulary};
    use crate::toymodel::ModelConfig;
    use proptest::prelude::*;

    fn model() -> TinyTransformer {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            max_context: 16,
        };
        TinyTransformer::new(cfg, 5).unwrap()
    }

    fn sae(model: &TinyTransformer, seed: u64) -> SparseAutoencoder {
        SparseAutoencoder::new(model.config.mlp_width(), 12, true, 0.001, 0, seed).unwrap()
    }

    #[test]
    fn empty_spec_is_identity() {
        let m = model();
        let toks = [1, 4, 7, 2, 9];
        let plain = m.forward(&toks, &[0, 1]).unwrap();
        let ablated = ablated_forward(&m, &toks, &[0, 1], &AblationSpec::empty()).unwrap();
        assert_eq!(plain.logits, ablated.logits);
        let ae = sae(&m, 1);
        let spec = AblationSpec {
            layers: vec![LayerAblation {
                layer: 1,
                autoencoder: &ae,
                features: vec![],
            }],
            mode: AblationMode::Subtract,
        };
        assert_eq!(
            ablated_forward(&m, &toks, &[], &spec).unwrap().logits,
            plain.logits
        );
    }

    #[test]
    fn identity_autoencoder_zeroes_coordinate() {
        let m = model();
        let ae = SparseAutoencoder::identity(m.config.mlp_width(), 0.0);
        let toks = [3, 1, 4, 1, 5];
        let plain = m.forward(&toks, &[0]).unwrap().captured.activations[0].clone();
        let j = (0..plain.cols())
            .find(|&c| plain.column(c).iter().any(|&v| v > 0.0))
            .unwrap();
        let spec = AblationSpec {
            layers: vec![LayerAblation {
                layer: 0,
                autoencoder: &ae,
                features: vec![j],
            }],
            mode: AblationMode::Subtract,
        };
        let after = ablated_forward(&m, &toks, &[0], &spec)
            .unwrap()
            .captured
            .activations[0]
            .clone();
        for r in 0..plain.rows() {
            for c in 0..plain.cols() {
                let want = if c == j { 0.0 } else { plain[(r, c)] };
                assert_eq!(after[(r, c)], want);
            }
        }
    }

    #[test]
    fn zero_coefficient_feature_changes_nothing() {
        let m = model();
        let mut ae = sae(&m, 2);
        // a strongly negative bias keeps feature 3 at zero on every input
        ae.b_e.as_mut_slice()[3] = -1e6;
        let spec = AblationSpec {
            layers: vec![LayerAblation {
                layer: 0,
                autoencoder: &ae,
                features: vec![3],
            }],
            mode: AblationMode::Subtract,
        };
        let toks = [2, 2, 8, 1];
        assert_eq!(
            ablated_forward(&m, &toks, &[], &spec).unwrap().logits,
            m.forward(&toks, &[]).unwrap().logits
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let m = model();
        let ae = sae(&m, 3);
        let bad_feature = AblationSpec {
            layers: vec![LayerAblation {
                layer: 0,
                autoencoder: &ae,
                features: vec![12],
            }],
            mode: AblationMode::Subtract,
        };
        assert!(ablated_forward(&m, &[1, 2], &[], &bad_feature).is_err());
        let bad_layer = AblationSpec {
            layers: vec![LayerAblation {
                layer: 2,
                autoencoder: &ae,
                features: vec![0],
            }],
            mode: AblationMode::Subtract,
        };
        assert!(bad_layer.validate(&m).is_err());
        let small = SparseAutoencoder::new(4, 4, true, 0.0, 0, 1).unwrap();
        let bad_width = AblationSpec {
            layers: vec![LayerAblation {
                layer: 0,
                autoencoder: &small,
                features: vec![0],
            }],
            mode: AblationMode::Subtract,
        };
        assert!(bad_width.validate(&m).is_err());
    }

    #[test]
    fn replace_mode_uses_reconstruction() {
        let m = model();
        let ae = SparseAutoencoder::identity(m.config.mlp_width(), 0.0);
        let toks = [1, 2, 3];
        let spec = AblationSpec {
            layers: vec![LayerAblation {
                layer: 1,
                autoencoder: &ae,
                features: vec![0],
            }],
            mode: AblationMode::Replace,
        };
        let sub = AblationSpec {
            mode: AblationMode::Subtract,
            ..spec.clone()
        };
        // with a perfect autoencoder both modes agree
        let a = ablated_forward(&m, &toks, &[], &spec).unwrap().logits;
        let b = ablated_forward(&m, &toks, &[], &sub).unwrap().logits;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_eval_empty_spec_and_reproducibility() {
        let vocab = toy_vocabulary();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 2,
            max_context: 12,
        };
        let m = TinyTransformer::new(cfg, 9).unwrap();
        let values = vocab.values(&toy_lexicon());
        let rc = RewardConfig::new(toy_lexicon());
        let prefixes = vec![vocab.encode(&["the", "movie"]).unwrap()];
        let s = CompletionSettings {
            n_completions: 5,
            completion_len: 4,
            temperature: 1.0,
            seed: 3,
        };
        let r =
            ablation_reward_eval(&m, &AblationSpec::empty(), &prefixes, &values, &rc, s).unwrap();
        assert_eq!(r.before, r.after);
        let ae = SparseAutoencoder::new(cfg.mlp_width(), 8, true, 0.0, 1, 4).unwrap();
        let spec = AblationSpec {
            layers: vec![LayerAblation {
                layer: 1,
                autoencoder: &ae,
                features: vec![0, 1],
            }],
            mode: AblationMode::Subtract,
        };
        let one = CompletionSettings {
            n_completions: 1,
            ..s
        };
        let a = ablation_reward_eval(&m, &spec, &prefixes, &values, &rc, one).unwrap();
        let b = ablation_reward_eval(&m, &spec, &prefixes, &values, &rc, one).unwrap();
        assert_eq!(a, b);
        assert!(ablation_reward_eval(
            &m,
            &spec,
            &prefixes,
            &values,
            &rc,
            CompletionSettings {
                n_completions: 0,
                ..s
            }
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn ablation_is_causally_local(toks in prop::collection::vec(0u32..20, 2..10), seed in 0u64..20, split in 1usize..9) {
            // positions before the first one with a non-zero ablated
            // coefficient cannot see the ablation through causal attention
            let m = model();
            let ae = sae(&m, seed);
            let spec = AblationSpec {
                layers: vec![LayerAblation { layer: 0, autoencoder: &ae, features: vec![0, 5] }],
                mode: AblationMode::Subtract,
            };
            let plain = m.forward(&toks, &[0]).unwrap();
            let codes = ae.encode(&plain.captured.activations[0]).unwrap();
            let first = (0..toks.len()).find(|&t| codes[(t, 0)] != 0.0 || codes[(t, 5)] != 0.0).unwrap_or(toks.len());
            let ablated = ablated_forward(&m, &toks, &[], &spec).unwrap();
            for t in 0..first.min(split) {
                prop_assert_eq!(plain.logits.row(t), ablated.logits.row(t));
            }
        }

        #[test]
        fn subtract_then_add_restores(seed in 0u64..50, row in prop::collection::vec(0.0f64..3.0, 32)) {
            let ae = SparseAutoencoder::new(32, 16, seed % 2 == 0, 0.0, 0, seed).unwrap();
            let codes = ae.encode_vec(&row).unwrap();
            let features = [0, 3, 7, 15];
            let mut a = row.clone();
            subtract_contribution(&mut a, &codes, &ae, &features);
            add_contribution(&mut a, &codes, &ae, &features);
            for (x, y) in a.iter().zip(&row) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
