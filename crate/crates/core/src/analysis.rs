//! Rank correlation and the report statistics built on top of it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pca, Matrix};
use crate::probes::{DeltaSample, Polarity, Probe};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauResult {
    pub tau: f64,
    pub p_value: f64,
    pub n: usize,
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in x only.
    pub ties_x: u64,
    /// Pairs tied in y only.
    pub ties_y: u64,
    /// Pairs tied in both.
    pub ties_both: u64,
}

impl TauResult {
    pub fn total_pairs(&self) -> u64 {
        self.concordant + self.discordant + self.ties_x + self.ties_y + self.ties_both
    }
}

/// Sizes of runs of equal values in an already sorted slice.
fn tie_groups(sorted: &[f64]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            out.push((j - i) as u64);
        }
        i = j;
    }
    out
}

fn pairs(t: u64) -> u64 {
    t * (t - 1) / 2
}

/// Counts pairs `i < j` with `v[i] > v[j]`, sorting `v` as a side effect.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall tau-b in O(n log n), with a two-sided p-value from the normal
/// approximation using the tie-adjusted variance. If either input is
/// entirely tied the coefficient is undefined; tau = 0 and p = 1 are
/// reported.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<TauResult> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "{} x values vs {} y values",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Insufficient(format!(
            "kendall tau needs n >= 2, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in kendall tau input"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();

    let x_groups = tie_groups(&xs);
    let n1: u64 = x_groups.iter().map(|&t| pairs(t)).sum();
    let mut n3 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && xs[j] == xs[i] && ys[j] == ys[i] {
            j += 1;
        }
        n3 += pairs((j - i) as u64);
        i = j;
    }
    let discordant = count_inversions(&mut ys, &mut Vec::with_capacity(n));
    // ys is now sorted
    let y_groups = tie_groups(&ys);
    let n2: u64 = y_groups.iter().map(|&t| pairs(t)).sum();
    let n0 = pairs(n as u64);
    let concordant = (n0 + n3) - n1 - n2 - discordant;

    let s = concordant as f64 - discordant as f64;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    let (tau, p_value) = if denom == 0.0 {
        (0.0, 1.0)
    } else {
        let var = tie_adjusted_variance(n, &x_groups, &y_groups);
        let p = if var > 0.0 {
            libm::erfc(s.abs() / var.sqrt() / std::f64::consts::SQRT_2)
        } else {
            1.0
        };
        ((s / denom).clamp(-1.0, 1.0), p.clamp(0.0, 1.0))
    };
    Ok(TauResult {
        tau,
        p_value,
        n,
        concordant,
        discordant,
        ties_x: n1 - n3,
        ties_y: n2 - n3,
        ties_both: n3,
    })
}

/// Variance of `C − D` under independence, corrected for ties.
fn tie_adjusted_variance(n: usize, xg: &[u64], yg: &[u64]) -> f64 {
    let nf = n as f64;
    let m = nf * (nf - 1.0);
    let sum = |g: &[u64], f: &dyn Fn(f64) -> f64| g.iter().map(|&t| f(t as f64)).sum::<f64>();
    let x_pairs = sum(xg, &|t| t * (t - 1.0) / 2.0);
    let y_pairs = sum(yg, &|t| t * (t - 1.0) / 2.0);
    let x_cubic = sum(xg, &|t| t * (t - 1.0) * (t - 2.0));
    let y_cubic = sum(yg, &|t| t * (t - 1.0) * (t - 2.0));
    let x_var = sum(xg, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let y_var = sum(yg, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let third = if n > 2 {
        x_cubic * y_cubic / (9.0 * m * (nf - 2.0))
    } else {
        0.0
    };
    (m * (2.0 * nf + 5.0) - x_var - y_var) / 18.0 + 2.0 * x_pairs * y_pairs / m + third
}

/// Largest `n` accepted by [`kendall_exact_p_value`].
pub const EXACT_P_MAX_N: usize = 12;

/// Two-sided exact p-value for tie-free data with `n <= 12`, from the
/// distribution of inversion counts over all permutations.
pub fn kendall_exact_p_value(x: &[f64], y: &[f64]) -> Result<f64> {
    let r = kendall_tau(x, y)?;
    if r.n > EXACT_P_MAX_N {
        return Err(Error::invalid(format!(
            "exact p-value supports n <= {EXACT_P_MAX_N}, got {}",
            r.n
        )));
    }
    if r.ties_x + r.ties_y + r.ties_both > 0 {
        return Err(Error::invalid("exact p-value requires tie-free data"));
    }
    let counts = inversion_distribution(r.n);
    let total: f64 = counts.iter().sum();
    let d = r.discordant.min(r.concordant) as usize;
    let tail: f64 = counts[..=d].iter().sum();
    Ok((2.0 * tail / total).min(1.0))
}

/// Number of permutations of `n` items with `k` inversions, for every `k`.
pub fn inversion_distribution(n: usize) -> Vec<f64> {
    let mut dist = vec![1.0];
    for m in 2..=n {
        let mut next = vec![0.0; dist.len() + m - 1];
        for (k, &c) in dist.iter().enumerate() {
            for add in 0..m {
                next[k + add] += c;
            }
        }
        dist = next;
    }
    dist
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignAccuracy {
    /// Among positive truths, the fraction predicted positive.
    pub positive: Option<f64>,
    /// Among negative truths, the fraction predicted negative.
    pub negative: Option<f64>,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Entries with a zero truth value, left out of both classes.
    pub excluded_zero: usize,
}

pub fn sign_accuracy(predicted: &[f64], truth: &[f64]) -> Result<SignAccuracy> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    let (mut pos_ok, mut n_pos, mut neg_ok, mut n_neg, mut zero) = (0, 0, 0, 0, 0);
    for (&p, &t) in predicted.iter().zip(truth) {
        if t > 0.0 {
            n_pos += 1;
            pos_ok += usize::from(p > 0.0);
        } else if t < 0.0 {
            n_neg += 1;
            neg_ok += usize::from(p < 0.0);
        } else {
            zero += 1;
        }
    }
    let frac = |ok: usize, n: usize| (n > 0).then(|| ok as f64 / n as f64);
    Ok(SignAccuracy {
        positive: frac(pos_ok, n_pos),
        negative: frac(neg_ok, n_neg),
        n_positive: n_pos,
        n_negative: n_neg,
        excluded_zero: zero,
    })
}

/// Kendall tau over the entries whose truth has the requested sign.
pub fn polarity_restricted_tau(
    predicted: &[f64],
    truth: &[f64],
    polarity: Polarity,
) -> Result<TauResult> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("predicted and truth lengths differ"));
    }
    let (p, t): (Vec<f64>, Vec<f64>) = predicted
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t * polarity.sign() > 0.0)
        .map(|(&p, &t)| (p, t))
        .unzip();
    if p.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{} {polarity:?} entries, need at least 2",
            p.len()
        )));
    }
    kendall_tau(&p, &t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub token: String,
    pub frequency: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub rows: Vec<FrequencyRow>,
    pub tau: TauResult,
}

impl FrequencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,frequency,abs_error\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.token, r.frequency, r.error));
        }
        out
    }
}

/// Pairs each token's absolute prediction error with the fraction of
/// generations that contain it, and rank-correlates the two.
pub fn frequency_vs_error<S: AsRef<str>>(
    tokens: &[String],
    abs_errors: &[f64],
    generations: &[Vec<S>],
) -> Result<FrequencyReport> {
    if generations.is_empty() {
        return Err(Error::Insufficient("empty generation corpus".into()));
    }
    if tokens.len() != abs_errors.len() {
        return Err(Error::shape("tokens and errors differ in length"));
    }
    let sets: Vec<HashSet<&str>> = generations
        .iter()
        .map(|g| g.iter().map(|w| w.as_ref()).collect())
        .collect();
    let rows: Vec<FrequencyRow> = tokens
        .iter()
        .zip(abs_errors)
        .map(|(t, &e)| FrequencyRow {
            token: t.clone(),
            frequency: sets.iter().filter(|s| s.contains(t.as_str())).count() as f64
                / sets.len() as f64,
            error: e,
        })
        .collect();
    let f: Vec<f64> = rows.iter().map(|r| r.frequency).collect();
    let tau = kendall_tau(&f, abs_errors)?;
    Ok(FrequencyReport { rows, tau })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongPositiveReport {
    pub threshold: f64,
    pub qualifying: usize,
    /// `(feature index, activation frequency)` for each listed feature.
    pub per_feature: Vec<(usize, f64)>,
    pub listed_mean: f64,
    /// Mean activation frequency over every feature.
    pub all_feature_mean: f64,
}

/// Over samples whose probe prediction exceeds `threshold`, how often each
/// listed feature is active (strictly positive).
pub fn strong_positive_feature_frequency(
    samples: &[DeltaSample],
    probe: &Probe,
    features: &[usize],
    threshold: f64,
) -> Result<StrongPositiveReport> {
    let mut qualifying = Vec::new();
    for s in samples {
        if probe.predict(&s.features)? > threshold {
            qualifying.push(s);
        }
    }
    if qualifying.is_empty() {
        return Err(Error::Insufficient(format!(
            "no samples above threshold {threshold} (of {})",
            samples.len()
        )));
    }
    let dim = probe.dim();
    if let Some(&bad) = features.iter().find(|&&f| f >= dim) {
        return Err(Error::invalid(format!(
            "feature {bad} beyond dimension {dim}"
        )));
    }
    let freq = |f: usize| {
        qualifying.iter().filter(|s| s.features[f] > 0.0).count() as f64 / qualifying.len() as f64
    };
    let per_feature: Vec<(usize, f64)> = features.iter().map(|&f| (f, freq(f))).collect();
    let listed_mean = if per_feature.is_empty() {
        0.0
    } else {
        per_feature.iter().map(|(_, v)| v).sum::<f64>() / per_feature.len() as f64
    };
    let all_feature_mean = (0..dim).map(freq).sum::<f64>() / dim.max(1) as f64;
    Ok(StrongPositiveReport {
        threshold,
        qualifying: qualifying.len(),
        per_feature,
        listed_mean,
        all_feature_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaSeparability {
    pub explained_variance_ratio: Vec<f64>,
    /// First two coordinates (second is 0 for one-dimensional input).
    pub projection: Vec<(f64, f64, Polarity)>,
}

impl PcaSeparability {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pc1,pc2,polarity\n");
        for (a, b, p) in &self.projection {
            let label = match p {
                Polarity::Positive => "positive",
                Polarity::Negative => "negative",
            };
            out.push_str(&format!("{a},{b},{label}\n"));
        }
        out
    }
}

pub fn pca_separability(samples: &[DeltaSample]) -> Result<PcaSeparability> {
    if samples.len() < 2 {
        return Err(Error::Insufficient("PCA needs at least two samples".into()));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let x = Matrix::from_rows(&rows)?;
    let k = 2.min(x.rows()).min(x.cols());
    let result = pca(&x, k)?;
    let proj = result.project(&x);
    let projection = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                proj[(i, 0)],
                if k > 1 { proj[(i, 1)] } else { 0.0 },
                s.polarity,
            )
        })
        .collect();
    Ok(PcaSeparability {
        explained_variance_ratio: result.explained_variance_ratio,
        projection,
    })
}
