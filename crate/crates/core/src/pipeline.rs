//! End-to-end orchestration over a working directory of artifacts.
//!
//! Each stage reads the artifacts of earlier stages from `paths.work_dir`
//! and overwrites its own outputs, so rerunning a stage with the same
//! config and inputs reproduces the same files. All randomness comes from
//! `run.seed`, split per stage with [`derive_seed`] and a fixed label.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablate::{
    ablation_reward_eval, AblationMode, AblationOutcome, AblationSpec, CompletionSettings,
    LayerAblation,
};
use crate::analysis::{
    frequency_vs_error, kendall_tau, pca_separability, polarity_restricted_tau, sign_accuracy,
    strong_positive_feature_frequency, SignAccuracy, StrongPositiveReport, TauResult,
};
use crate::error::{Error, Result};
use crate::explain::{
    explain_features, write_explanations, ExplainRequest, LlmClient, LlmClientConfig,
};
use crate::finetune::{
    ppo_train, pretrain, reward_trace_csv, PpoConfig, PretrainConfig, RewardConfig,
    RewardTracePoint,
};
use crate::numerics::{derive_seed, rng_from_seed, Matrix};
use crate::probes::{
    delta_samples, fit_linear, fit_logistic, normalize_deltas, read_delta_dataset,
    write_delta_dataset, DeltaCombine, DeltaContext, DeltaSample, LogisticConfig, Polarity, Probe,
};
use crate::sae::{
    self, mmcs, top_similarity_features, FeatureDictionary, SaeTrainConfig, SparseAutoencoder,
};
use crate::synthetic;
use crate::tensorio::{
    load_contrastive, load_lexicon, parse_contrastive, parse_lexicon, read_activations,
    write_activations, write_contrastive, ActivationDataset, ContrastiveTriple, RewardLexicon,
    Vocabulary,
};
use crate::toymodel::{
    generate_with, parameter_divergence, DivergenceOptions, ModelConfig, SelectionMode,
    TinyTransformer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub selection: SelectionSection,
    pub sae: SaeSection,
    pub probe: ProbeSection,
    pub analysis: AnalysisSection,
    pub paths: PathsSection,
    pub explain: ExplainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub max_context: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            n_layers: 4,
            max_context: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub corpus_docs: usize,
    pub doc_len: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            corpus_docs: 4000,
            doc_len: 24,
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

/// Reward shaping and PPO settings. Defaults are the full-scale values;
/// [`PipelineConfig::desk`] raises the learning rate and shortens the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub n_prefixes: usize,
    pub prefix_len: usize,
    pub scale_divisor: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mini_batch_size: usize,
    pub learning_rate: f64,
    pub kl_coefficient: f64,
    pub clip_epsilon: f64,
    pub max_grad_norm: f64,
    pub completion_len: usize,
    pub temperature: f64,
    pub baseline_decay: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let ppo = PpoConfig::default();
        FinetuneSection {
            n_prefixes: 200,
            prefix_len: 4,
            scale_divisor: 5.0,
            clip_low: -10.0,
            clip_high: 10.0,
            steps: ppo.steps,
            batch_size: ppo.batch_size,
            mini_batch_size: ppo.mini_batch_size,
            learning_rate: ppo.learning_rate,
            kl_coefficient: ppo.kl_coefficient,
            clip_epsilon: ppo.clip_epsilon,
            max_grad_norm: ppo.max_grad_norm,
            completion_len: ppo.completion_len,
            temperature: ppo.temperature,
            baseline_decay: ppo.baseline_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub top_k: usize,
    pub mode: SelectionMode,
    pub mlp_only: bool,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            top_k: 3,
            mode: SelectionMode::HighestDivergence,
            mlp_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    /// Documents run through the tuned model to build activation datasets.
    pub activation_docs: usize,
    pub tied: bool,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_examples: usize,
    pub log_every: usize,
    pub mean_center: bool,
    /// Extra ℓ1 coefficients, each trained once at hidden size n.
    pub l1_sweep: Vec<f64>,
}

impl Default for SaeSection {
    fn default() -> Self {
        let s = SaeTrainConfig::default();
        SaeSection {
            activation_docs: 1000,
            tied: s.tied,
            alpha: s.alpha,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            n_examples: s.n_examples,
            log_every: s.log_every,
            mean_center: s.mean_center,
            l1_sweep: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub n_triples: usize,
    /// Fraction of triples held out for evaluation.
    pub holdout_fraction: f64,
    pub ridge_lambda: f64,
    pub target_max: f64,
    pub combine: DeltaCombine,
    pub swap_labels: bool,
    pub logistic_learning_rate: f64,
    pub logistic_epochs: usize,
    /// Features most correlated with the normalized delta, used for
    /// ablation and the strong-positive frequency table.
    pub reward_features: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let l = LogisticConfig::default();
        ProbeSection {
            n_triples: 1500,
            holdout_fraction: 0.2,
            ridge_lambda: 1e-4,
            target_max: 4.0,
            combine: DeltaCombine::SumOfLayers,
            swap_labels: false,
            logistic_learning_rate: l.learning_rate,
            logistic_epochs: l.epochs,
            reward_features: 5,
        }
    }
}

/// Full-scale ablation uses 1000 completions of 30-token prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub strong_positive_threshold: f64,
    pub ablation_completions: usize,
    pub ablation_prefix_len: usize,
    pub ablation_mode: AblationMode,
    pub generations: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            strong_positive_threshold: 3.0,
            ablation_completions: 100,
            ablation_prefix_len: 8,
            ablation_mode: AblationMode::Subtract,
            generations: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub work_dir: PathBuf,
    /// Lexicon TSV; the built-in 40-word lexicon when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Contrastive JSONL; generated from templates when absent.
    #[serde(default)]
    pub contrastive: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub features_per_layer: usize,
    pub top_tokens: usize,
    pub task: String,
    pub client: LlmClientConfig,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            features_per_layer: 10,
            top_tokens: 20,
            task: "sentiment of movie reviews: the model was rewarded for positive words".into(),
            client: LlmClientConfig::default(),
        }
    }
}

/// PPO learning rate of the desk profile.
pub const DESK_PPO_LEARNING_RATE: f64 = 3e-4;
/// PPO steps of the desk profile.
pub const DESK_PPO_STEPS: usize = 30;
/// ℓ1 coefficient of the desk profile. With MLP activation norms around 2.5
/// the default 0.001 leaves most features active on every token; 0.1 keeps
/// roughly one in ten active while reconstructing over 90% of the energy.
pub const DESK_SAE_ALPHA: f64 = 0.1;

impl PipelineConfig {
    /// Section defaults everywhere, writing into `work_dir`.
    pub fn with_defaults(work_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            run: RunSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            selection: SelectionSection::default(),
            sae: SaeSection::default(),
            probe: ProbeSection::default(),
            analysis: AnalysisSection::default(),
            paths: PathsSection {
                work_dir: work_dir.into(),
                lexicon: None,
                contrastive: None,
            },
            explain: ExplainSection::default(),
        }
    }

    /// The laptop-scale profile: section defaults plus the overrides above.
    pub fn desk(work_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::with_defaults(work_dir);
        cfg.finetune.learning_rate = DESK_PPO_LEARNING_RATE;
        cfg.finetune.steps = DESK_PPO_STEPS;
        cfg.sae.alpha = DESK_SAE_ALPHA;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.n_layers == 0 || self.model.d_model == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.selection.top_k == 0 || self.selection.top_k > self.model.n_layers {
            return bad(format!(
                "selection.top_k = {} must be in 1..={}",
                self.selection.top_k, self.model.n_layers
            ));
        }
        let f = &self.finetune;
        if f.prefix_len == 0 || f.prefix_len + f.completion_len > self.model.max_context {
            return bad(format!(
                "finetune prefix_len {} + completion_len {} must fit max_context {}",
                f.prefix_len, f.completion_len, self.model.max_context
            ));
        }
        let a = &self.analysis;
        if a.ablation_prefix_len == 0
            || a.ablation_prefix_len + f.completion_len > self.model.max_context
        {
            return bad(
                "analysis.ablation_prefix_len + completion_len must fit max_context".into(),
            );
        }
        if self.pretrain.doc_len > self.model.max_context || self.pretrain.doc_len < 2 {
            return bad("pretrain.doc_len must be in 2..=max_context".into());
        }
        if !(self.probe.holdout_fraction > 0.0 && self.probe.holdout_fraction < 1.0) {
            return bad("probe.holdout_fraction must be in (0, 1)".into());
        }
        self.ppo_config(0)
            .validate()
            .map_err(|e| Error::Config(format!("[finetune] {e}")))?;
        Ok(())
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.run.seed, label)
    }

    pub fn ppo_config(&self, seed: u64) -> PpoConfig {
        let f = &self.finetune;
        PpoConfig {
            clip_epsilon: f.clip_epsilon,
            kl_coefficient: f.kl_coefficient,
            batch_size: f.batch_size,
            mini_batch_size: f.mini_batch_size,
            max_grad_norm: f.max_grad_norm,
            learning_rate: f.learning_rate,
            steps: f.steps,
            seed,
            completion_len: f.completion_len,
            temperature: f.temperature,
            baseline_decay: f.baseline_decay,
        }
    }

    pub fn lexicon(&self) -> Result<RewardLexicon> {
        match &self.paths.lexicon {
            Some(p) => load_lexicon(p),
            None => Ok(synthetic::toy_lexicon()),
        }
    }

    /// The built-in vocabulary followed by any lexicon words it lacks.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let lex = self.lexicon()?;
        let base = synthetic::toy_vocabulary();
        let extra: Vec<String> = lex
            .words()
            .filter(|w| base.id(w).is_none())
            .map(str::to_string)
            .collect();
        Vocabulary::new(base.words().iter().cloned().chain(extra))
    }

    pub fn reward_config(&self) -> Result<RewardConfig> {
        let rc = RewardConfig {
            lexicon: self.lexicon()?,
            scale_divisor: self.finetune.scale_divisor,
            clip_low: self.finetune.clip_low,
            clip_high: self.finetune.clip_high,
        };
        rc.validate()?;
        Ok(rc)
    }

    fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            max_context: self.model.max_context,
        }
    }

    fn sae_config(&self, hidden_size: usize, alpha: f64, seed: u64) -> SaeTrainConfig {
        SaeTrainConfig {
            hidden_size,
            tied: self.sae.tied,
            alpha,
            learning_rate: self.sae.learning_rate,
            batch_size: self.sae.batch_size,
            n_examples: self.sae.n_examples,
            seed,
            log_every: self.sae.log_every,
            mean_center: self.sae.mean_center,
        }
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts {
            dir: self.paths.work_dir.clone(),
        }
    }
}

/// File names of every artifact inside the working directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    fn file(&self, name: impl AsRef<Path>) -> PathBuf {
        self.dir.join(name)
    }
    pub fn base_model(&self) -> PathBuf {
        self.file("base.lfpm")
    }
    pub fn tuned_model(&self) -> PathBuf {
        self.file("tuned.lfpm")
    }
    pub fn pretrain_loss(&self) -> PathBuf {
        self.file("pretrain_loss.csv")
    }
    pub fn reward_trace(&self) -> PathBuf {
        self.file("reward_trace.csv")
    }
    pub fn selection(&self) -> PathBuf {
        self.file("selection.json")
    }
    pub fn activations(&self, layer: usize) -> PathBuf {
        self.file(format!("layer_{layer}.lfpa"))
    }
    pub fn sae(&self, layer: usize, hidden: usize) -> PathBuf {
        self.file(format!("sae_l{layer}_h{hidden}.lfps"))
    }
    pub fn sae_trace(&self, layer: usize, hidden: usize) -> PathBuf {
        self.file(format!("sae_l{layer}_h{hidden}_trace.csv"))
    }
    pub fn dictionary(&self, layer: usize, hidden: usize) -> PathBuf {
        self.file(format!("dict_l{layer}_h{hidden}.lfpd"))
    }
    pub fn sweep_trace(&self, layer: usize, alpha: f64) -> PathBuf {
        self.file(format!("sae_l{layer}_alpha{alpha}_trace.csv"))
    }
    pub fn mmcs(&self) -> PathBuf {
        self.file("mmcs.csv")
    }
    pub fn deltas(&self) -> PathBuf {
        self.file("deltas.jsonl")
    }
    pub fn delta_features(&self) -> PathBuf {
        self.file("deltas_features.lfpa")
    }
    pub fn split(&self) -> PathBuf {
        self.file("split.json")
    }
    pub fn linear_probe(&self) -> PathBuf {
        self.file("probe_linear.lfpp")
    }
    pub fn logistic_probe(&self) -> PathBuf {
        self.file("probe_logistic.lfpp")
    }
    pub fn predictions(&self) -> PathBuf {
        self.file("predictions.csv")
    }
    pub fn reward_features(&self) -> PathBuf {
        self.file("reward_features.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.file("summary.json")
    }
    pub fn pca(&self) -> PathBuf {
        self.file("pca.csv")
    }
    pub fn frequency(&self) -> PathBuf {
        self.file("frequency.csv")
    }
    pub fn strong_positive(&self) -> PathBuf {
        self.file("strong_positive.csv")
    }
    pub fn ablation(&self) -> PathBuf {
        self.file("ablation.json")
    }
    pub fn explanations(&self) -> PathBuf {
        self.file("explanations.jsonl")
    }
    pub fn lexicon_export(&self) -> PathBuf {
        self.file("lexicon.tsv")
    }
    pub fn contrastive_export(&self) -> PathBuf {
        self.file("contrastive.jsonl")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Finetune,
    SampleActivations,
    TrainSae,
    Probe,
    Report,
    Explain,
    Ablate,
    ExportFormats,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Finetune,
        Stage::SampleActivations,
        Stage::TrainSae,
        Stage::Probe,
        Stage::Report,
        Stage::Explain,
        Stage::Ablate,
        Stage::ExportFormats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::SampleActivations => "sample-activations",
            Stage::TrainSae => "train-sae",
            Stage::Probe => "probe",
            Stage::Report => "report",
            Stage::Explain => "explain",
            Stage::Ablate => "ablate",
            Stage::ExportFormats => "export-formats",
        }
    }
}

/// What a stage would do, for `--dry-run`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub stage: &'static str,
    pub steps: Vec<String>,
    pub reads: Vec<PathBuf>,
    pub writes: Vec<PathBuf>,
}

impl std::fmt::Display for Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "stage {}", self.stage)?;
        for s in &self.steps {
            writeln!(f, "  - {s}")?;
        }
        for p in &self.reads {
            writeln!(f, "  read  {}", p.display())?;
        }
        for p in &self.writes {
            writeln!(f, "  write {}", p.display())?;
        }
        Ok(())
    }
}

/// Builds the execution plan without touching the filesystem. Layer-
/// dependent file names are shown with `{l}` because the selection is not
/// known until the models exist.
pub fn plan(cfg: &PipelineConfig, stage: Stage) -> Plan {
    let a = cfg.artifacts();
    let n = cfg.model.d_model * 4;
    let pattern = |s: &str| a.dir.join(s);
    let (steps, reads, writes): (Vec<String>, Vec<PathBuf>, Vec<PathBuf>) = match stage {
        Stage::Finetune => (
            vec![
                format!(
                    "pre-train toy LM (d={}, L={}) for {} steps on {} synthetic documents",
                    cfg.model.d_model,
                    cfg.model.n_layers,
                    cfg.pretrain.steps,
                    cfg.pretrain.corpus_docs
                ),
                format!(
                    "PPO for {} steps, batch {}, lr {}",
                    cfg.finetune.steps, cfg.finetune.batch_size, cfg.finetune.learning_rate
                ),
            ],
            vec![],
            vec![
                a.base_model(),
                a.pretrain_loss(),
                a.tuned_model(),
                a.reward_trace(),
            ],
        ),
        Stage::SampleActivations => (
            vec![
                format!(
                    "select {} layers by {:?}",
                    cfg.selection.top_k, cfg.selection.mode
                ),
                format!(
                    "record MLP activations over {} documents",
                    cfg.sae.activation_docs
                ),
            ],
            vec![a.base_model(), a.tuned_model()],
            vec![a.selection(), pattern("layer_{l}.lfpa")],
        ),
        Stage::TrainSae => (
            vec![
                format!(
                    "train autoencoders with h = {n} and h = {} per selected layer",
                    2 * n
                ),
                format!("l1 sweep over {:?}", cfg.sae.l1_sweep),
            ],
            vec![a.selection(), pattern("layer_{l}.lfpa")],
            vec![
                pattern("sae_l{l}_h{h}.lfps"),
                pattern("sae_l{l}_h{h}_trace.csv"),
                pattern("dict_l{l}_h{h}.lfpd"),
                a.mmcs(),
            ],
        ),
        Stage::Probe => (
            vec![
                format!(
                    "compute deltas for {} contrastive triples",
                    cfg.probe.n_triples
                ),
                "fit linear and logistic probes on the training split".into(),
            ],
            vec![
                a.tuned_model(),
                a.selection(),
                pattern("layer_{l}.lfpa"),
                pattern("sae_l{l}_h{h}.lfps"),
            ],
            vec![
                a.deltas(),
                a.delta_features(),
                a.split(),
                a.linear_probe(),
                a.logistic_probe(),
                a.predictions(),
                a.reward_features(),
            ],
        ),
        Stage::Report => (
            vec![
                "held-out tau, sign accuracy, baseline, PCA, frequency, strong-positive, ablation"
                    .into(),
            ],
            vec![
                a.deltas(),
                a.delta_features(),
                a.split(),
                a.linear_probe(),
                a.logistic_probe(),
                a.reward_trace(),
            ],
            vec![a.summary(), a.pca(), a.frequency(), a.strong_positive()],
        ),
        Stage::Explain => (
            vec![format!(
                "describe {} features per layer (mock = {})",
                cfg.explain.features_per_layer, cfg.explain.client.mock
            )],
            vec![
                a.selection(),
                pattern("sae_l{l}_h{h}.lfps"),
                pattern("layer_{l}.lfpa"),
            ],
            vec![a.explanations()],
        ),
        Stage::Ablate => (
            vec![format!(
                "ablate {} reward features over {} completions",
                cfg.probe.reward_features, cfg.analysis.ablation_completions
            )],
            vec![
                a.tuned_model(),
                a.reward_features(),
                pattern("sae_l{l}_h{h}.lfps"),
            ],
            vec![a.ablation()],
        ),
        Stage::ExportFormats => (
            vec!["write the lexicon TSV and contrastive JSONL and read them back".into()],
            vec![],
            vec![a.lexicon_export(), a.contrastive_export()],
        ),
    };
    Plan {
        stage: stage.name(),
        steps,
        reads,
        writes,
    }
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    match stage {
        Stage::Finetune => finetune(cfg).map(|_| ()),
        Stage::SampleActivations => sample_activations(cfg).map(|_| ()),
        Stage::TrainSae => train_saes(cfg).map(|_| ()),
        Stage::Probe => probe(cfg).map(|_| ()),
        Stage::Report => report(cfg).map(|_| ()),
        Stage::Explain => explain(cfg).map(|_| ()),
        Stage::Ablate => ablate(cfg).map(|_| ()),
        Stage::ExportFormats => export_formats(cfg).map(|_| ()),
    }
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Summary> {
    finetune(cfg)?;
    sample_activations(cfg)?;
    train_saes(cfg)?;
    probe(cfg)?;
    explain(cfg)?;
    export_formats(cfg)?;
    report(cfg)
}

fn ensure_dir(cfg: &PipelineConfig) -> Result<Artifacts> {
    let a = cfg.artifacts();
    std::fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
    Ok(a)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutput {
    pub pretrain_losses: Vec<f64>,
    pub reward_trace: Vec<RewardTracePoint>,
}

/// Pre-trains the base model, then PPO fine-tunes a copy of it.
pub fn finetune(cfg: &PipelineConfig) -> Result<FinetuneOutput> {
    let a = ensure_dir(cfg)?;
    let vocab = cfg.vocabulary()?;
    let reward_cfg = cfg.reward_config()?;
    let model = TinyTransformer::new(cfg.model_config(&vocab), cfg.seed("model-init"))?;
    let corpus = synthetic::pretraining_corpus(
        &vocab,
        cfg.pretrain.corpus_docs,
        cfg.pretrain.doc_len,
        cfg.seed("corpus"),
    );
    let pcfg = PretrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        learning_rate: cfg.pretrain.learning_rate,
        seed: cfg.seed("pretrain"),
    };
    log::info!("pre-training for {} steps", pcfg.steps);
    let (base, losses) = pretrain(model, &corpus, &pcfg)?;
    base.save(a.base_model())?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&a.pretrain_loss(), &csv)?;

    let prefixes = synthetic::prefixes(
        &vocab,
        cfg.finetune.n_prefixes,
        cfg.finetune.prefix_len,
        cfg.seed("prefixes"),
    );
    log::info!("PPO for {} steps", cfg.finetune.steps);
    let (tuned, trace) = ppo_train(
        base.clone(),
        &base,
        &prefixes,
        &vocab,
        &reward_cfg,
        &cfg.ppo_config(cfg.seed("ppo")),
    )?;
    tuned.save(a.tuned_model())?;
    write_text(&a.reward_trace(), &reward_trace_csv(&trace))?;
    Ok(FinetuneOutput {
        pretrain_losses: losses,
        reward_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub divergences: Vec<f64>,
    pub selected_layers: Vec<usize>,
    pub mode: SelectionMode,
    pub rows_per_layer: usize,
}

fn load_models(a: &Artifacts) -> Result<(TinyTransformer, TinyTransformer)> {
    Ok((
        TinyTransformer::load(a.base_model())?,
        TinyTransformer::load(a.tuned_model())?,
    ))
}

/// Selects layers by parameter divergence and records the tuned model's MLP
/// activations on fresh synthetic documents for each of them.
pub fn sample_activations(cfg: &PipelineConfig) -> Result<Selection> {
    let a = ensure_dir(cfg)?;
    let (base, tuned) = load_models(&a)?;
    let vocab = cfg.vocabulary()?;
    let report = parameter_divergence(
        &base,
        &tuned,
        DivergenceOptions {
            top_k: cfg.selection.top_k,
            mode: cfg.selection.mode,
            mlp_only: cfg.selection.mlp_only,
        },
    )?;
    let docs = synthetic::pretraining_corpus(
        &vocab,
        cfg.sae.activation_docs,
        cfg.pretrain.doc_len,
        cfg.seed("activation-docs"),
    );
    let layers = report.selected_layers.clone();
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    let (mut token_ids, mut sequence_ids) = (Vec::new(), Vec::new());
    for (s, doc) in docs.iter().enumerate() {
        let out = tuned.forward(doc, &layers)?;
        for (buf, acts) in per_layer.iter_mut().zip(&out.captured.activations) {
            buf.extend_from_slice(acts.as_slice());
        }
        token_ids.extend_from_slice(doc);
        sequence_ids.extend(std::iter::repeat_n(s as u32, doc.len()));
    }
    let width = tuned.config.mlp_width();
    for (&l, data) in layers.iter().zip(per_layer) {
        let m = Matrix::from_vec(token_ids.len(), width, data)?;
        let mut ds = ActivationDataset::new("tuned", l as u32, &m);
        ds.token_ids = Some(token_ids.clone());
        ds.sequence_ids = Some(sequence_ids.clone());
        write_activations(&ds, a.activations(l))?;
    }
    let selection = Selection {
        divergences: report.divergences,
        selected_layers: layers,
        mode: report.mode,
        rows_per_layer: token_ids.len(),
    };
    write_json(&a.selection(), &selection)?;
    Ok(selection)
}

fn load_selection(a: &Artifacts) -> Result<Selection> {
    read_json(&a.selection())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmcsRow {
    pub layer: usize,
    pub small: usize,
    pub large: usize,
    pub mmcs: f64,
    pub dead_small: usize,
    pub dead_large: usize,
}

/// Trains the two autoencoders (h = n and h = 2n) on every selected layer,
/// plus one autoencoder per extra ℓ1 coefficient.
pub fn train_saes(cfg: &PipelineConfig) -> Result<Vec<MmcsRow>> {
    let a = ensure_dir(cfg)?;
    let selection = load_selection(&a)?;
    let mut rows = Vec::new();
    for &l in &selection.selected_layers {
        let data = read_activations(a.activations(l))?.to_matrix();
        let n = data.cols();
        let mut dicts = Vec::new();
        for h in [n, 2 * n] {
            let scfg = cfg.sae_config(h, cfg.sae.alpha, cfg.seed(&format!("sae-l{l}-h{h}")));
            log::info!("training autoencoder layer {l} h {h}");
            let (ae, trace) = sae::train(&data, l, &scfg)?;
            ae.save(a.sae(l, h))?;
            write_text(&a.sae_trace(l, h), &sae::trace_to_csv(&trace))?;
            let dict = FeatureDictionary::from_autoencoder(&ae, format!("sae_l{l}_h{h}"));
            dict.to_container().write(a.dictionary(l, h))?;
            dicts.push(dict);
        }
        let overlap = mmcs(&dicts[0], &dicts[1])?;
        rows.push(MmcsRow {
            layer: l,
            small: n,
            large: 2 * n,
            mmcs: overlap.mean,
            dead_small: dicts[0].dead.len(),
            dead_large: dicts[1].dead.len(),
        });
        for &alpha in &cfg.sae.l1_sweep {
            let scfg = cfg.sae_config(n, alpha, cfg.seed(&format!("sae-sweep-l{l}-{alpha}")));
            let (_, trace) = sae::train(&data, l, &scfg)?;
            write_text(&a.sweep_trace(l, alpha), &sae::trace_to_csv(&trace))?;
        }
    }
    let mut csv = String::from("layer,small,large,mmcs,dead_small,dead_large\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.layer, r.small, r.large, r.mmcs, r.dead_small, r.dead_large
        ));
    }
    write_text(&a.mmcs(), &csv)?;
    Ok(rows)
}

/// The h = n autoencoder of every selected layer, checked against the
/// activation files they were trained on.
fn load_probe_autoencoders(
    a: &Artifacts,
    selection: &Selection,
    width: usize,
) -> Result<Vec<SparseAutoencoder>> {
    let mut out = Vec::new();
    for &l in &selection.selected_layers {
        let path = a.activations(l);
        if !path.exists() {
            return Err(Error::invalid(format!(
                "no activation file for selected layer {l}: {}",
                path.display()
            )));
        }
        let ae = SparseAutoencoder::load(a.sae(l, width))?;
        if ae.layer_index != l || ae.input_dim() != width {
            return Err(Error::shape(format!(
                "autoencoder {} is for layer {} with {} inputs, expected layer {l} with {width}",
                a.sae(l, width).display(),
                ae.layer_index,
                ae.input_dim()
            )));
        }
        out.push(ae);
    }
    Ok(out)
}

fn load_triples(cfg: &PipelineConfig) -> Result<Vec<ContrastiveTriple>> {
    match &cfg.paths.contrastive {
        Some(p) => load_contrastive(p),
        None => Ok(synthetic::contrastive_triples(
            cfg.probe.n_triples,
            cfg.seed("triples"),
        )),
    }
}

/// Which triples went to training and which were held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_triples: Vec<usize>,
    pub test_triples: Vec<usize>,
}

impl Split {
    /// Sample indices: triple `t` contributes samples `2t` and `2t + 1`.
    fn samples(triples: &[usize]) -> Vec<usize> {
        triples.iter().flat_map(|&t| [2 * t, 2 * t + 1]).collect()
    }
    pub fn train_samples(&self) -> Vec<usize> {
        Self::samples(&self.train_triples)
    }
    pub fn test_samples(&self) -> Vec<usize> {
        Self::samples(&self.test_triples)
    }
}

fn split_triples(n: usize, holdout: f64, seed: u64) -> Split {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_test = ((n as f64 * holdout).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Split {
        train_triples: train,
        test_triples: test,
    }
}

/// A feature of the concatenated representation, located in its layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardFeature {
    /// Index into the concatenated feature vector.
    pub index: usize,
    pub layer: usize,
    pub feature: usize,
    /// Pearson correlation of the code with the normalized delta.
    pub correlation: f64,
}

/// The `k` features whose codes correlate most positively with the
/// normalized delta over `samples`. Constant features are skipped.
pub fn reward_correlated_features(
    samples: &[&DeltaSample],
    layers: &[(usize, usize)],
    k: usize,
) -> Result<Vec<RewardFeature>> {
    let Some(first) = samples.first() else {
        return Err(Error::Insufficient(
            "no samples for feature correlation".into(),
        ));
    };
    let dim = first.features.len();
    if layers.iter().map(|(_, h)| h).sum::<usize>() != dim {
        return Err(Error::shape(
            "layer sizes do not add up to the feature dimension",
        ));
    }
    let n = samples.len() as f64;
    let y: Vec<f64> = samples.iter().map(|s| s.normalized_delta).collect();
    let my = y.iter().sum::<f64>() / n;
    let vy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let mut scored = Vec::new();
    for j in 0..dim {
        let mx = samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
        let (mut cov, mut vx) = (0.0, 0.0);
        for (s, yv) in samples.iter().zip(&y) {
            let dx = s.features[j] - mx;
            cov += dx * (yv - my);
            vx += dx * dx;
        }
        if vx > 0.0 && vy > 0.0 {
            scored.push((j, cov / (vx * vy).sqrt()));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let locate = |mut j: usize| {
        for &(l, h) in layers {
            if j < h {
                return (l, j);
            }
            j -= h;
        }
        unreachable!("index checked against the dimension")
    };
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(index, correlation)| {
            let (layer, feature) = locate(index);
            RewardFeature {
                index,
                layer,
                feature,
                correlation,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutput {
    pub samples: Vec<DeltaSample>,
    pub split: Split,
    pub linear: Probe,
    pub logistic: Probe,
    pub reward_features: Vec<RewardFeature>,
}

/// Computes contrastive deltas, fits both probes on the training triples and
/// writes held-out predictions against the lexicon values.
pub fn probe(cfg: &PipelineConfig) -> Result<ProbeOutput> {
    let a = ensure_dir(cfg)?;
    let tuned = TinyTransformer::load(a.tuned_model())?;
    let selection = load_selection(&a)?;
    let width = tuned.config.mlp_width();
    let aes = load_probe_autoencoders(&a, &selection, width)?;
    let vocab = cfg.vocabulary()?;
    let lexicon = cfg.lexicon()?;
    let triples = load_triples(cfg)?;
    if triples.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{} triples, need at least 2",
            triples.len()
        )));
    }
    let ctx = DeltaContext {
        model: &tuned,
        autoencoders: &aes,
        vocab: &vocab,
        combine: cfg.probe.combine,
    };
    let mut samples = Vec::with_capacity(2 * triples.len());
    for t in &triples {
        let (p, n) = delta_samples(t, &ctx, cfg.probe.swap_labels)?;
        samples.push(p);
        samples.push(n);
    }
    let split = split_triples(triples.len(), cfg.probe.holdout_fraction, cfg.seed("split"));
    let train_idx = split.train_samples();
    let mut train: Vec<DeltaSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let scales = normalize_deltas(&mut train, cfg.probe.target_max)?;
    for s in samples.iter_mut() {
        let k = match s.polarity {
            Polarity::Positive => scales.positive,
            Polarity::Negative => scales.negative,
        };
        s.normalized_delta = (s.raw_delta * k).clamp(-cfg.probe.target_max, cfg.probe.target_max);
    }
    let train: Vec<DeltaSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut linear = fit_linear(&train, cfg.probe.ridge_lambda)?;
    linear.scales = Some(scales);
    let mut logistic = fit_logistic(
        &train,
        &LogisticConfig {
            learning_rate: cfg.probe.logistic_learning_rate,
            epochs: cfg.probe.logistic_epochs,
            seed: cfg.seed("logistic"),
        },
    )?;
    logistic.scales = Some(scales);

    let layer_sizes: Vec<(usize, usize)> = aes
        .iter()
        .map(|ae| (ae.layer_index, ae.hidden_size()))
        .collect();
    let train_refs: Vec<&DeltaSample> = train.iter().collect();
    let reward_features =
        reward_correlated_features(&train_refs, &layer_sizes, cfg.probe.reward_features)?;

    write_delta_dataset(&samples, a.deltas(), a.delta_features(), "tuned")?;
    write_json(&a.split(), &split)?;
    linear.save(a.linear_probe())?;
    logistic.save(a.logistic_probe())?;
    write_json(&a.reward_features(), &reward_features)?;

    let mut csv = String::from("token,predicted,true\n");
    for i in split.test_samples() {
        let s = &samples[i];
        let Some(tok) = &s.token else { continue };
        let Some(truth) = lexicon.get(tok) else {
            continue;
        };
        csv.push_str(&format!("{tok},{},{truth}\n", linear.predict(&s.features)?));
    }
    write_text(&a.predictions(), &csv)?;
    Ok(ProbeOutput {
        samples,
        split,
        linear,
        logistic,
        reward_features,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub seed: u64,
    pub tau: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarityTaus {
    pub positive: Option<TauResult>,
    pub negative: Option<TauResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub steps: usize,
    pub first_decile_mean: f64,
    pub last_decile_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySummary {
    pub tau: f64,
    pub p_value: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Held-out Kendall tau between linear-probe predictions and lexicon values.
    pub tau: f64,
    pub p_value: f64,
    pub n_test: usize,
    pub tau_detail: TauResult,
    pub sign_accuracy: SignAccuracy,
    pub polarity_tau: PolarityTaus,
    pub baseline: BaselineRow,
    pub logistic_accuracy: f64,
    pub pca_explained_variance_ratio: Vec<f64>,
    pub frequency: Option<FrequencySummary>,
    pub strong_positive: Option<StrongPositiveReport>,
    pub ablation: AblationOutcome,
    pub reward: RewardSummary,
}

/// Mean over the first and last tenth of a reward trace.
pub fn reward_deciles(trace: &[RewardTracePoint]) -> Result<RewardSummary> {
    if trace.is_empty() {
        return Err(Error::Insufficient("empty reward trace".into()));
    }
    let k = (trace.len() / 10).max(1);
    let mean =
        |s: &[RewardTracePoint]| s.iter().map(|p| p.mean_reward).sum::<f64>() / s.len() as f64;
    Ok(RewardSummary {
        steps: trace.len(),
        first_decile_mean: mean(&trace[..k]),
        last_decile_mean: mean(&trace[trace.len() - k..]),
    })
}

pub fn parse_reward_trace(text: &str) -> Result<Vec<RewardTracePoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,mean_reward,mean_kl")) => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected reward trace header {other:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| Error::Parse {
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", f.len())));
            }
            Ok(RewardTracePoint {
                step: f[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                mean_reward: f[1].parse().map_err(|e| bad(format!("mean_reward: {e}")))?,
                mean_kl: f[2].parse().map_err(|e| bad(format!("mean_kl: {e}")))?,
            })
        })
        .collect()
}

fn load_reward_features(a: &Artifacts) -> Result<Vec<RewardFeature>> {
    read_json(&a.reward_features())
}

/// Ablates the reward-correlated features in the tuned model and compares
/// mean completion reward before and after.
pub fn ablate(cfg: &PipelineConfig) -> Result<AblationOutcome> {
    let a = ensure_dir(cfg)?;
    let tuned = TinyTransformer::load(a.tuned_model())?;
    let selection = load_selection(&a)?;
    let aes = load_probe_autoencoders(&a, &selection, tuned.config.mlp_width())?;
    let features = load_reward_features(&a)?;
    let outcome = ablation_with(cfg, &tuned, &aes, &features)?;
    write_json(&a.ablation(), &outcome)?;
    Ok(outcome)
}

fn ablation_with(
    cfg: &PipelineConfig,
    model: &TinyTransformer,
    aes: &[SparseAutoencoder],
    features: &[RewardFeature],
) -> Result<AblationOutcome> {
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for f in features {
        by_layer.entry(f.layer).or_default().push(f.feature);
    }
    let mut layers = Vec::new();
    for (layer, feats) in by_layer {
        let ae = aes
            .iter()
            .find(|ae| ae.layer_index == layer)
            .ok_or_else(|| Error::invalid(format!("no autoencoder for layer {layer}")))?;
        layers.push(LayerAblation {
            layer,
            autoencoder: ae,
            features: feats,
        });
    }
    let spec = AblationSpec {
        layers,
        mode: cfg.analysis.ablation_mode,
    };
    let vocab = cfg.vocabulary()?;
    let prefixes = synthetic::prefixes(
        &vocab,
        cfg.analysis.ablation_completions,
        cfg.analysis.ablation_prefix_len,
        cfg.seed("ablation-prefixes"),
    );
    ablation_reward_eval(
        model,
        &spec,
        &prefixes,
        &vocab.values(&cfg.lexicon()?),
        &cfg.reward_config()?,
        CompletionSettings {
            n_completions: cfg.analysis.ablation_completions,
            completion_len: cfg.finetune.completion_len,
            temperature: cfg.finetune.temperature,
            seed: cfg.seed("ablation"),
        },
    )
}

/// Computes every statistic from the stored artifacts; nothing is retrained.
pub fn report(cfg: &PipelineConfig) -> Result<Summary> {
    let a = ensure_dir(cfg)?;
    let tuned = TinyTransformer::load(a.tuned_model())?;
    let selection = load_selection(&a)?;
    let aes = load_probe_autoencoders(&a, &selection, tuned.config.mlp_width())?;
    let samples = read_delta_dataset(a.deltas(), a.delta_features())?;
    let split: Split = read_json(&a.split())?;
    let linear = Probe::load(a.linear_probe())?;
    let logistic = Probe::load(a.logistic_probe())?;
    let features = load_reward_features(&a)?;
    let lexicon = cfg.lexicon()?;
    let vocab = cfg.vocabulary()?;
    if let Some(&bad) = split
        .test_samples()
        .iter()
        .chain(&split.train_samples())
        .find(|&&i| i >= samples.len())
    {
        return Err(Error::shape(format!(
            "split refers to sample {bad} of {}",
            samples.len()
        )));
    }

    // held-out samples whose token has a lexicon value
    let test: Vec<(&DeltaSample, String, f64)> = split
        .test_samples()
        .into_iter()
        .filter_map(|i| {
            let s = &samples[i];
            let tok = s.token.clone()?;
            let v = lexicon.get(&tok)?;
            Some((s, tok, v))
        })
        .collect();
    let predict = |p: &Probe| -> Result<Vec<f64>> {
        test.iter()
            .map(|(s, _, _)| p.predict(&s.features))
            .collect()
    };
    let predicted = predict(&linear)?;
    let truth: Vec<f64> = test.iter().map(|t| t.2).collect();
    let tau = kendall_tau(&predicted, &truth)?;
    let accuracy = sign_accuracy(&predicted, &truth)?;
    let polarity_tau = PolarityTaus {
        positive: polarity_restricted_tau(&predicted, &truth, Polarity::Positive).ok(),
        negative: polarity_restricted_tau(&predicted, &truth, Polarity::Negative).ok(),
    };
    let baseline_seed = cfg.seed("xavier-baseline");
    let baseline_probe = Probe::xavier_baseline(linear.dim(), baseline_seed)?;
    let baseline_tau = kendall_tau(&predict(&baseline_probe)?, &truth)?;

    let test_all: Vec<&DeltaSample> = split
        .test_samples()
        .into_iter()
        .map(|i| &samples[i])
        .collect();
    let mut correct = 0;
    for s in &test_all {
        correct += usize::from(logistic.classify(&s.features)? == s.polarity);
    }
    let logistic_accuracy = correct as f64 / test_all.len().max(1) as f64;

    let pca = pca_separability(&samples)?;
    write_text(&a.pca(), &pca.to_csv())?;

    // generation frequency of each held-out token against its mean error
    let gen_prefixes = synthetic::prefixes(
        &vocab,
        cfg.analysis.generations,
        cfg.finetune.prefix_len,
        cfg.seed("generation-prefixes"),
    );
    let mut rng = rng_from_seed(cfg.seed("generations"));
    let mut generations = Vec::with_capacity(gen_prefixes.len());
    for p in &gen_prefixes {
        let toks = generate_with(
            &tuned,
            p,
            cfg.finetune.completion_len,
            cfg.finetune.temperature,
            &mut rng,
            None,
        )?;
        generations.push(vocab.decode(&toks[p.len()..]));
    }
    let mut per_token: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for ((_, tok, v), p) in test.iter().zip(&predicted) {
        let e = per_token.entry(tok.as_str()).or_default();
        e.0 += (p - v).abs();
        e.1 += 1;
    }
    let tokens: Vec<String> = per_token.keys().map(|t| t.to_string()).collect();
    let errors: Vec<f64> = per_token.values().map(|(s, n)| s / *n as f64).collect();
    let frequency = match frequency_vs_error(&tokens, &errors, &generations) {
        Ok(r) => {
            write_text(&a.frequency(), &r.to_csv())?;
            Some(FrequencySummary {
                tau: r.tau.tau,
                p_value: r.tau.p_value,
                tokens: r.rows.len(),
            })
        }
        Err(e) => {
            log::warn!("frequency analysis skipped: {e}");
            None
        }
    };

    let indices: Vec<usize> = features.iter().map(|f| f.index).collect();
    let strong_positive = match strong_positive_feature_frequency(
        &samples,
        &linear,
        &indices,
        cfg.analysis.strong_positive_threshold,
    ) {
        Ok(r) => {
            let mut csv = String::from("feature,layer,layer_feature,frequency\n");
            for ((idx, freq), f) in r.per_feature.iter().zip(&features) {
                csv.push_str(&format!("{idx},{},{},{freq}\n", f.layer, f.feature));
            }
            csv.push_str(&format!("average,,,{}\n", r.all_feature_mean));
            write_text(&a.strong_positive(), &csv)?;
            Some(r)
        }
        Err(e) => {
            log::warn!("strong-positive analysis skipped: {e}");
            None
        }
    };

    let ablation = ablation_with(cfg, &tuned, &aes, &features)?;
    let reward = reward_deciles(&parse_reward_trace(&read_text(&a.reward_trace())?)?)?;
    let summary = Summary {
        tau: tau.tau,
        p_value: tau.p_value,
        n_test: tau.n,
        tau_detail: tau,
        sign_accuracy: accuracy,
        polarity_tau,
        baseline: BaselineRow {
            seed: baseline_seed,
            tau: baseline_tau.tau,
            p_value: baseline_tau.p_value,
        },
        logistic_accuracy,
        pca_explained_variance_ratio: pca.explained_variance_ratio,
        frequency,
        strong_positive,
        ablation,
        reward,
    };
    write_json(&a.summary(), &summary)?;
    Ok(summary)
}

/// Describes the features shared by each layer's two dictionaries and asks
/// whether each description relates to the fine-tuning task.
pub fn explain(cfg: &PipelineConfig) -> Result<Vec<crate::explain::FeatureExplanation>> {
    let a = ensure_dir(cfg)?;
    let selection = load_selection(&a)?;
    let vocab = cfg.vocabulary()?;
    let mut requests = Vec::new();
    for &l in &selection.selected_layers {
        let ds = read_activations(a.activations(l))?;
        let n = ds.hidden_dim;
        let small = SparseAutoencoder::load(a.sae(l, n))?;
        let large = SparseAutoencoder::load(a.sae(l, 2 * n))?;
        let d1 = FeatureDictionary::from_autoencoder(&small, "small");
        let d2 = FeatureDictionary::from_autoencoder(&large, "large");
        let k = cfg.explain.features_per_layer.min(d1.len());
        let top = top_similarity_features(&d1, &d2, k)?;
        let codes = small.encode(&ds.to_matrix())?;
        let token_ids = ds
            .token_ids
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("layer {l} activations carry no token ids")))?;
        for (row_in_dict, _) in top {
            let feature = d1.indices[row_in_dict];
            let mut rows: Vec<usize> = (0..codes.rows()).collect();
            rows.sort_by(|&x, &y| {
                codes[(y, feature)]
                    .total_cmp(&codes[(x, feature)])
                    .then(x.cmp(&y))
            });
            let pairs: Vec<(String, f64)> = rows
                .into_iter()
                .take(cfg.explain.top_tokens)
                .map(|r| (vocab.word(token_ids[r]).to_string(), codes[(r, feature)]))
                .collect();
            requests.push(ExplainRequest {
                layer: l,
                feature,
                pairs,
            });
        }
    }
    let client = LlmClient::from_config(cfg.explain.client.clone())?;
    let out = explain_features(&client, &requests, &cfg.explain.task)?;
    write_explanations(&out, a.explanations())?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportOutput {
    pub lexicon_entries: usize,
    pub triples: usize,
}

/// Writes the lexicon and contrastive triples in their interchange formats
/// and checks that both read back unchanged.
pub fn export_formats(cfg: &PipelineConfig) -> Result<ExportOutput> {
    let a = ensure_dir(cfg)?;
    let lexicon = cfg.lexicon()?;
    let tsv = lexicon.to_tsv();
    write_text(&a.lexicon_export(), &tsv)?;
    if parse_lexicon(&read_text(&a.lexicon_export())?)? != lexicon {
        return Err(Error::invalid("lexicon did not survive a TSV round trip"));
    }
    let triples = load_triples(cfg)?;
    write_contrastive(&triples, a.contrastive_export())?;
    if parse_contrastive(&read_text(&a.contrastive_export())?)? != triples {
        return Err(Error::invalid(
            "contrastive triples did not survive a JSONL round trip",
        ));
    }
    Ok(ExportOutput {
        lexicon_entries: lexicon.len(),
        triples: triples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::desk(dir);
        cfg.model = ModelSection {
            d_model: 8,
            n_layers: 2,
            max_context: 24,
        };
        cfg.pretrain = PretrainSection {
            corpus_docs: 50,
            doc_len: 12,
            steps: 5,
            batch_size: 4,
            learning_rate: 3e-3,
        };
        cfg.finetune.steps = 2;
        cfg.finetune.batch_size = 8;
        cfg.finetune.mini_batch_size = 4;
        cfg.finetune.n_prefixes = 10;
        cfg.finetune.completion_len = 6;
        cfg.selection.top_k = 2;
        cfg.sae.activation_docs = 20;
        cfg.sae.n_examples = 200;
        cfg.sae.l1_sweep = vec![0.002];
        cfg.probe.n_triples = 40;
        cfg.probe.logistic_epochs = 20;
        cfg.analysis.ablation_completions = 4;
        cfg.analysis.generations = 10;
        cfg.analysis.strong_positive_threshold = -100.0;
        cfg.explain.features_per_layer = 2;
        cfg
    }

    #[test]
    fn toml_round_trip_and_rejections() {
        let cfg = PipelineConfig::desk("/tmp/x");
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);

        let unknown = text.replace("[probe]\n", "[probe]\nbogus = 1\n");
        let err = PipelineConfig::from_toml(&unknown).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line"), "{err}");

        let missing = text.replace("[analysis]", "[analysis_gone]");
        assert!(PipelineConfig::from_toml(&missing).is_err());

        let mut bad = cfg.clone();
        bad.selection.top_k = 9;
        assert!(PipelineConfig::from_toml(&bad.to_toml()).is_err());
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let text = "[run]\n[model]\n[pretrain]\n[finetune]\n[selection]\n[sae]\n[probe]\n[analysis]\n[explain]\n[paths]\nwork_dir = \"out\"\n";
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg, PipelineConfig::with_defaults("out"));
        assert_eq!(cfg.finetune.learning_rate, 1e-6);
        assert_eq!(cfg.sae.alpha, 0.001);
        assert_eq!(cfg.sae.n_examples, 75_000);
        assert_eq!(cfg.analysis.strong_positive_threshold, 3.0);
    }

    #[test]
    fn plans_do_not_touch_disk() {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path().join("never");
        let cfg = PipelineConfig::desk(&work);
        for s in Stage::ALL {
            let p = plan(&cfg, s);
            assert_eq!(p.stage, s.name());
            assert!(!p.writes.is_empty());
            assert!(p.to_string().starts_with("stage "));
        }
        assert!(!work.exists());
    }

    #[test]
    fn split_is_a_partition() {
        let s = split_triples(50, 0.2, 4);
        assert_eq!(s.test_triples.len(), 10);
        let mut all: Vec<usize> = s
            .train_triples
            .iter()
            .chain(&s.test_triples)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(s.test_samples().len(), 20);
    }

    #[test]
    fn reward_feature_correlation() {
        let mk = |f: Vec<f64>, d: f64| DeltaSample {
            features: f,
            raw_delta: d,
            normalized_delta: d,
            polarity: if d > 0.0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
            token: None,
        };
        let samples = [
            mk(vec![1.0, 0.0, 5.0, 0.0], 2.0),
            mk(vec![2.0, 1.0, 5.0, 0.0], 3.0),
            mk(vec![0.0, 2.0, 5.0, 1.0], -1.0),
        ];
        let refs: Vec<&DeltaSample> = samples.iter().collect();
        let top = reward_correlated_features(&refs, &[(1, 2), (3, 2)], 2).unwrap();
        assert_eq!(top[0].index, 0);
        assert_eq!((top[0].layer, top[0].feature), (1, 0));
        assert!(top.iter().all(|f| f.index != 2), "constant feature skipped");
        assert!(reward_correlated_features(&refs, &[(1, 3)], 1).is_err());
    }

    #[test]
    fn reward_trace_parsing() {
        let trace = vec![
            RewardTracePoint {
                step: 0,
                mean_reward: 1.0,
                mean_kl: 0.0,
            },
            RewardTracePoint {
                step: 1,
                mean_reward: 2.5,
                mean_kl: 0.1,
            },
        ];
        assert_eq!(
            parse_reward_trace(&reward_trace_csv(&trace)).unwrap(),
            trace
        );
        assert!(parse_reward_trace("a,b\n").is_err());
        let d = reward_deciles(&trace).unwrap();
        assert_eq!((d.first_decile_mean, d.last_decile_mean), (1.0, 2.5));
    }

    #[test]
    fn tiny_pipeline_runs_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let summary = run_all(&cfg).unwrap();
        let a = cfg.artifacts();
        for p in [
            a.base_model(),
            a.tuned_model(),
            a.mmcs(),
            a.predictions(),
            a.explanations(),
            a.summary(),
        ] {
            assert!(p.exists(), "{}", p.display());
        }
        let sel = load_selection(&a).unwrap();
        assert_eq!(sel.selected_layers.len(), 2);
        assert_eq!(read_activations(a.activations(0)).unwrap().rows, 20 * 12);
        assert!(a.sweep_trace(0, 0.002).exists());
        assert!(read_text(&a.predictions())
            .unwrap()
            .starts_with("token,predicted,true\n"));
        let json: serde_json::Value =
            serde_json::from_str(&read_text(&a.summary()).unwrap()).unwrap();
        for key in ["tau", "p_value", "sign_accuracy", "ablation", "baseline"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let first = read_text(&a.summary()).unwrap();
        let again = report(&cfg).unwrap();
        assert_eq!(again, summary);
        assert_eq!(read_text(&a.summary()).unwrap(), first);
        assert_eq!(read_text(&a.mmcs()).unwrap().lines().count(), 3);
    }

    #[test]
    fn zero_step_finetune_copies_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.finetune.steps = 0;
        finetune(&cfg).unwrap();
        let a = cfg.artifacts();
        assert_eq!(
            std::fs::read(a.base_model()).unwrap(),
            std::fs::read(a.tuned_model()).unwrap()
        );
        assert_eq!(
            read_text(&a.reward_trace()).unwrap(),
            "step,mean_reward,mean_kl\n"
        );
    }

    #[test]
    fn probe_refuses_mismatched_layers() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        finetune(&cfg).unwrap();
        sample_activations(&cfg).unwrap();
        train_saes(&cfg).unwrap();
        let a = cfg.artifacts();
        std::fs::remove_file(a.activations(1)).unwrap();
        assert!(probe(&cfg).is_err());
    }
}
