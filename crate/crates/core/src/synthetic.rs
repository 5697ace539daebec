//! The built-in toy world: a 40-word sentiment lexicon, a small movie-review
//! vocabulary, a polarity-coherent document generator for pre-training,
//! contrastive triples built from the same sentence templates, and
//! synthetic datasets with known ground truth for the SAE and probes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, rng_from_seed, Matrix, Rng};
use crate::probes::{DeltaSample, Polarity};
use crate::tensorio::{ContrastiveTriple, RewardLexicon, Vocabulary};

pub const POSITIVE_ADJECTIVES: [(&str, f64); 15] = [
    ("great", 3.1),
    ("precious", 2.7),
    ("marvelous", 2.9),
    ("wonderful", 2.7),
    ("excellent", 2.7),
    ("brilliant", 2.8),
    ("amazing", 2.8),
    ("superb", 3.1),
    ("delightful", 2.9),
    ("charming", 2.5),
    ("fun", 2.3),
    ("good", 1.9),
    ("nice", 1.8),
    ("perfect", 2.7),
    ("beautiful", 2.9),
];
pub const NEGATIVE_ADJECTIVES: [(&str, f64); 15] = [
    ("weak", -1.9),
    ("dreadful", -1.9),
    ("cowardly", -1.6),
    ("bad", -2.5),
    ("awful", -2.0),
    ("terrible", -2.1),
    ("boring", -1.3),
    ("horrible", -2.5),
    ("poor", -2.1),
    ("dull", -1.7),
    ("stupid", -2.4),
    ("ugly", -2.3),
    ("disappointing", -2.2),
    ("annoying", -1.8),
    ("sad", -2.1),
];
pub const POSITIVE_VERBS: [(&str, f64); 3] = [("loved", 2.9), ("enjoyed", 2.2), ("adored", 2.7)];
pub const NEGATIVE_VERBS: [(&str, f64); 3] =
    [("despised", -1.7), ("hated", -2.7), ("disliked", -1.9)];
/// Lexicon words with their own fixed sentence frames.
pub const POSITIVE_PHRASE_WORDS: [(&str, f64); 2] = [("award", 2.5), ("beautifully", 2.7)];
pub const NEGATIVE_PHRASE_WORDS: [(&str, f64); 2] = [("mess", -1.5), ("waste", -1.8)];

pub const NEUTRAL_ADJECTIVES: [&str; 10] = [
    "okay", "average", "ordinary", "plain", "typical", "long", "short", "standard", "simple",
    "usual",
];
pub const NEUTRAL_VERBS: [&str; 3] = ["watched", "saw", "rated"];
pub const NOUNS: [&str; 10] = [
    "movie", "film", "plot", "acting", "story", "cast", "script", "ending", "music", "director",
];
pub const FUNCTION_WORDS: [&str; 16] = [
    "the", "a", "an", "this", "it", "i", "was", "is", "really", "very", "and", "deserves", "made",
    "of", "time", ".",
];

pub fn toy_lexicon() -> RewardLexicon {
    let all = POSITIVE_ADJECTIVES
        .iter()
        .chain(&NEGATIVE_ADJECTIVES)
        .chain(&POSITIVE_VERBS)
        .chain(&NEGATIVE_VERBS)
        .chain(&POSITIVE_PHRASE_WORDS)
        .chain(&NEGATIVE_PHRASE_WORDS)
        .copied();
    RewardLexicon::from_pairs(all).expect("built-in lexicon is well formed")
}

/// Function words, nouns, neutral words and the lexicon, in that order.
pub fn toy_vocabulary() -> Vocabulary {
    let lex = POSITIVE_ADJECTIVES
        .iter()
        .chain(&NEGATIVE_ADJECTIVES)
        .chain(&POSITIVE_VERBS)
        .chain(&NEGATIVE_VERBS)
        .chain(&POSITIVE_PHRASE_WORDS)
        .chain(&NEGATIVE_PHRASE_WORDS)
        .map(|(w, _)| *w);
    let words = FUNCTION_WORDS
        .iter()
        .copied()
        .chain(NOUNS)
        .chain(NEUTRAL_ADJECTIVES)
        .chain(NEUTRAL_VERBS)
        .chain(lex);
    Vocabulary::new(words).expect("built-in vocabulary has no duplicates")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocPolarity {
    Positive,
    Negative,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

fn pick_sentiment(polarity: DocPolarity, rng: &mut Rng) -> Sentiment {
    let u: f64 = rng.random();
    match polarity {
        DocPolarity::Positive if u < 0.8 => Sentiment::Positive,
        DocPolarity::Negative if u < 0.8 => Sentiment::Negative,
        DocPolarity::Positive | DocPolarity::Negative => Sentiment::Neutral,
        DocPolarity::Mixed if u < 0.4 => Sentiment::Positive,
        DocPolarity::Mixed if u < 0.8 => Sentiment::Negative,
        DocPolarity::Mixed => Sentiment::Neutral,
    }
}

fn adjective(s: Sentiment, rng: &mut Rng) -> &'static str {
    match s {
        Sentiment::Positive => POSITIVE_ADJECTIVES.choose(rng).unwrap().0,
        Sentiment::Negative => NEGATIVE_ADJECTIVES.choose(rng).unwrap().0,
        Sentiment::Neutral => NEUTRAL_ADJECTIVES.choose(rng).unwrap(),
    }
}

fn verb(s: Sentiment, rng: &mut Rng) -> &'static str {
    match s {
        Sentiment::Positive => POSITIVE_VERBS.choose(rng).unwrap().0,
        Sentiment::Negative => NEGATIVE_VERBS.choose(rng).unwrap().0,
        Sentiment::Neutral => NEUTRAL_VERBS.choose(rng).unwrap(),
    }
}

fn noun(rng: &mut Rng) -> &'static str {
    NOUNS.choose(rng).unwrap()
}

/// One sentence of the toy grammar.
fn sentence(polarity: DocPolarity, rng: &mut Rng) -> Vec<&'static str> {
    let kind: f64 = rng.random();
    let s = pick_sentiment(polarity, rng);
    if kind < 0.7 {
        let frame = rng.random_range(0..5);
        let n = noun(rng);
        match frame {
            0 => vec!["the", n, "was", adjective(s, rng), "."],
            1 => vec!["the", n, "was", "really", adjective(s, rng), "."],
            2 => {
                let s2 = pick_sentiment(polarity, rng);
                vec![
                    "this",
                    n,
                    "is",
                    adjective(s, rng),
                    "and",
                    adjective(s2, rng),
                    ".",
                ]
            }
            3 => vec!["it", "was", "a", adjective(s, rng), n, "."],
            _ => vec!["the", n, "is", "very", adjective(s, rng), "."],
        }
    } else if kind < 0.85 {
        vec!["i", verb(s, rng), "the", noun(rng), "."]
    } else {
        let n = noun(rng);
        match (s, rng.random_bool(0.5)) {
            (Sentiment::Positive, true) => vec!["the", n, "deserves", "an", "award", "."],
            (Sentiment::Positive, false) => vec!["the", n, "was", "beautifully", "made", "."],
            (Sentiment::Negative, true) => vec!["the", n, "was", "a", "mess", "."],
            (Sentiment::Negative, false) => {
                vec!["the", n, "was", "a", "waste", "of", "time", "."]
            }
            (Sentiment::Neutral, _) => vec!["i", verb(s, rng), "the", n, "."],
        }
    }
}

/// A document of exactly `len` tokens whose sentiment words mostly agree
/// with `polarity`.
pub fn sample_document(polarity: DocPolarity, len: usize, rng: &mut Rng) -> Vec<&'static str> {
    let mut doc = Vec::with_capacity(len + 8);
    while doc.len() < len {
        doc.extend(sentence(polarity, rng));
    }
    doc.truncate(len);
    doc
}

fn sample_polarity(rng: &mut Rng) -> DocPolarity {
    match rng.random_range(0..5) {
        0 | 1 => DocPolarity::Positive,
        2 | 3 => DocPolarity::Negative,
        _ => DocPolarity::Mixed,
    }
}

/// Pre-training documents: 40% positive, 40% negative, 20% mixed.
pub fn pretraining_corpus(
    vocab: &Vocabulary,
    n_docs: usize,
    len: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = rng_from_seed(seed);
    (0..n_docs)
        .map(|_| {
            let p = sample_polarity(&mut rng);
            vocab
                .encode(&sample_document(p, len, &mut rng))
                .expect("grammar only emits vocabulary words")
        })
        .collect()
}

/// Opening tokens of documents, used as generation prefixes.
pub fn prefixes(vocab: &Vocabulary, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    pretraining_corpus(vocab, n, len, seed)
}

/// Positive, negative and neutral choices for one contrastive slot.
#[derive(Clone, Copy, Debug)]
enum SlotKind {
    Adjective,
    Verb,
}

/// Contrastive triples: a context sentence of random polarity followed by
/// a frame whose slot holds a positive, neutral or negative word. Every
/// positive and negative adjective or verb appears in turn, so the lexicon
/// is covered evenly.
pub fn contrastive_triples(n: usize, seed: u64) -> Vec<ContrastiveTriple> {
    let mut rng = rng_from_seed(seed);
    let mut pos_words: Vec<(&str, SlotKind)> = POSITIVE_ADJECTIVES
        .iter()
        .map(|(w, _)| (*w, SlotKind::Adjective))
        .chain(POSITIVE_VERBS.iter().map(|(w, _)| (*w, SlotKind::Verb)))
        .collect();
    let neg_adj: Vec<&str> = NEGATIVE_ADJECTIVES.iter().map(|(w, _)| *w).collect();
    let neg_verb: Vec<&str> = NEGATIVE_VERBS.iter().map(|(w, _)| *w).collect();
    let mut neg_cycle: Vec<&str> = neg_adj.clone();
    neg_cycle.shuffle(&mut rng);
    pos_words.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (positive, kind) = pos_words[i % pos_words.len()];
        let context = sentence(sample_polarity(&mut rng), &mut rng);
        let n_word = noun(&mut rng);
        let (frame, negative, neutral): (Vec<&str>, &str, &str) = match kind {
            SlotKind::Adjective => {
                let neg = neg_adj[(i / pos_words.len() + i) % neg_adj.len()];
                let neu = *NEUTRAL_ADJECTIVES.choose(&mut rng).unwrap();
                let frame = match rng.random_range(0..3) {
                    0 => vec!["the", n_word, "was", "{}", "."],
                    1 => vec!["the", n_word, "was", "really", "{}", "."],
                    _ => vec!["it", "was", "a", "{}", n_word, "."],
                };
                (frame, neg, neu)
            }
            SlotKind::Verb => {
                let neg = *neg_verb.choose(&mut rng).unwrap();
                let neu = *NEUTRAL_VERBS.choose(&mut rng).unwrap();
                (vec!["i", "{}", "the", n_word, "."], neg, neu)
            }
        };
        let slot = context.len() + frame.iter().position(|w| *w == "{}").unwrap();
        let fill = |word: &str| -> Vec<String> {
            context
                .iter()
                .chain(&frame)
                .map(|w| if *w == "{}" { word } else { w }.to_string())
                .collect()
        };
        out.push(
            ContrastiveTriple::per_token(
                fill(positive),
                fill(neutral),
                fill(negative),
                (slot, slot + 1),
            )
            .expect("template triples are valid"),
        );
    }
    out
}

/// A known dictionary and data drawn as sparse non-negative combinations of it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DictionaryDataConfig {
    pub n_features: usize,
    pub dim: usize,
    /// Each sample uses between 1 and `max_active` features.
    pub max_active: usize,
    /// Coefficients are uniform on `(0, coefficient_scale]`.
    pub coefficient_scale: f64,
}

impl Default for DictionaryDataConfig {
    fn default() -> Self {
        DictionaryDataConfig {
            n_features: 32,
            dim: 16,
            max_active: 3,
            coefficient_scale: 1.0,
        }
    }
}

/// Returns `(dictionary, data)`: unit-norm features as rows of an
/// `n_features × dim` matrix, and `n_samples × dim` data.
pub fn dictionary_data(
    cfg: DictionaryDataConfig,
    n_samples: usize,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    if cfg.max_active == 0 || cfg.max_active > cfg.n_features || cfg.dim == 0 {
        return Err(Error::invalid(format!(
            "bad dictionary data config {cfg:?}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dictionary = Matrix::zeros(cfg.n_features, cfg.dim);
    for f in 0..cfg.n_features {
        let row = dictionary.row_mut(f);
        for v in row.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        let norm = l2_norm(row);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = Matrix::zeros(n_samples, cfg.dim);
    let features: Vec<usize> = (0..cfg.n_features).collect();
    for s in 0..n_samples {
        let k = rng.random_range(1..=cfg.max_active);
        for &f in features.choose_multiple(&mut rng, k) {
            let c = cfg.coefficient_scale * (1.0 - rng.random::<f64>());
            let d = dictionary.row(f).to_vec();
            for (x, dv) in data.row_mut(s).iter_mut().zip(d) {
                *x += c * dv;
            }
        }
    }
    Ok((dictionary, data))
}

/// Probe inputs for two linearly separable classes. Every feature vector is
/// a shared non-negative offset plus `±margin/2` along a fixed random unit
/// direction plus isotropic noise of standard deviation `noise`; positives
/// and negatives alternate. Raw deltas are `±|N(2, 0.5)|`, already in the
/// normalized range.
pub fn separable_delta_samples(
    n: usize,
    dim: usize,
    margin: f64,
    noise: f64,
    seed: u64,
) -> Result<Vec<DeltaSample>> {
    if dim == 0 || !(margin > 0.0) || !(noise >= 0.0) {
        return Err(Error::invalid(format!(
            "separable samples need dim > 0, margin > 0, noise >= 0 (got {dim}, {margin}, {noise})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut direction: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
    let norm = l2_norm(&direction);
    direction.iter_mut().for_each(|v| *v /= norm);
    let offset: Vec<f64> = (0..dim).map(|_| rng.random_range(1.0..2.0)).collect();
    let size = Normal::new(2.0, 0.5).expect("valid normal");
    Ok((0..n)
        .map(|i| {
            let polarity = if i % 2 == 0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let shift = polarity.sign() * margin / 2.0;
            let features = offset
                .iter()
                .zip(&direction)
                .map(|(o, d)| o + shift * d + noise * unit.sample(&mut rng))
                .collect();
            let delta = polarity.sign() * f64::abs(size.sample(&mut rng));
            DeltaSample {
                features,
                raw_delta: delta,
                normalized_delta: delta,
                polarity,
                token: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_has_forty_words_and_table_values() {
        let lex = toy_lexicon();
        assert_eq!(lex.len(), 40);
        assert_eq!(lex.iter().filter(|(_, v)| *v > 0.0).count(), 20);
        for (w, v) in [
            ("award", 2.5),
            ("loved", 2.9),
            ("great", 3.1),
            ("precious", 2.7),
            ("beautifully", 2.7),
            ("marvelous", 2.9),
            ("despised", -1.7),
            ("weak", -1.9),
            ("dreadful", -1.9),
            ("cowardly", -1.6),
            ("bad", -2.5),
        ] {
            assert_eq!(lex.get(w), Some(v), "{w}");
        }
    }

    #[test]
    fn vocabulary_covers_lexicon_and_round_trips() {
        let v = toy_vocabulary();
        let lex = toy_lexicon();
        assert!(lex.words().all(|w| v.id(w).is_some()));
        let ids = v.encode(&["the", "movie", "was", "great", "."]).unwrap();
        assert_eq!(v.decode(&ids), vec!["the", "movie", "was", "great", "."]);
        assert!(v.encode(&["zebra"]).is_err());
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }

    #[test]
    fn documents_have_requested_length_and_lean_to_polarity() {
        let v = toy_vocabulary();
        let values = v.values(&toy_lexicon());
        let mut rng = rng_from_seed(1);
        let mut pos = 0.0;
        let mut neg = 0.0;
        for _ in 0..200 {
            let d = v
                .encode(&sample_document(DocPolarity::Positive, 24, &mut rng))
                .unwrap();
            assert_eq!(d.len(), 24);
            pos += d.iter().map(|&t| values[t as usize]).sum::<f64>();
            let d = v
                .encode(&sample_document(DocPolarity::Negative, 24, &mut rng))
                .unwrap();
            neg += d.iter().map(|&t| values[t as usize]).sum::<f64>();
        }
        assert!(pos > 0.0 && neg < 0.0);
    }

    #[test]
    fn triples_are_valid_and_span_the_slot() {
        let lex = toy_lexicon();
        let triples = contrastive_triples(60, 4);
        assert_eq!(triples.len(), 60);
        for t in &triples {
            t.validate().unwrap();
            let (a, b) = t.target_span.unwrap();
            assert_eq!(b, a + 1);
            assert!(lex.get(&t.positive[a]).unwrap() > 0.0);
            assert!(lex.get(&t.negative[a]).unwrap() < 0.0);
            assert!(lex.get(&t.neutral[a]).is_none());
            assert_eq!(t.positive[..a], t.neutral[..a]);
        }
        assert_eq!(triples, contrastive_triples(60, 4));
    }

    #[test]
    fn dictionary_data_is_unit_norm_and_deterministic() {
        let (d, x) = dictionary_data(DictionaryDataConfig::default(), 50, 9).unwrap();
        assert_eq!(d.shape(), (32, 16));
        assert_eq!(x.shape(), (50, 16));
        for r in 0..32 {
            assert!((l2_norm(d.row(r)) - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            dictionary_data(DictionaryDataConfig::default(), 50, 9)
                .unwrap()
                .1,
            x
        );
    }

    #[test]
    fn separable_samples_shape() {
        let s = separable_delta_samples(10, 6, 1.0, 0.0, 3).unwrap();
        assert_eq!(s.len(), 10);
        for (i, x) in s.iter().enumerate() {
            assert_eq!(x.polarity == Polarity::Positive, i % 2 == 0);
            assert_eq!(x.raw_delta > 0.0, i % 2 == 0);
            assert_eq!(x.features.len(), 6);
        }
        // without noise the two classes are two points a margin apart
        assert!((crate::numerics::l2_distance(&s[0].features, &s[1].features) - 1.0).abs() < 1e-12);
        assert_eq!(s[0].features, s[2].features);
        assert_eq!(separable_delta_samples(10, 6, 1.0, 0.0, 3).unwrap(), s);
        assert!(separable_delta_samples(10, 0, 1.0, 0.0, 3).is_err());
    }
}
