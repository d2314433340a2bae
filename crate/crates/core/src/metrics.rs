//! Score-agreement metrics: Pearson correlation, tolerance accuracy,
//! ICC(2,1) reliability, categorical percent agreement, embedding-based
//! textual agreement, and VAD mapping for free-text emotion labels.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::backend::{BackendError, EmbeddingBackend};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("paired vectors differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("score {value} at index {index} outside [0, 5]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("correlation undefined: a vector has zero variance")]
    ZeroVariance,
    #[error("tolerance must be >= 0, got {0}")]
    InvalidTolerance(f64),
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedMatrix { row: usize, expected: usize, got: usize },
    #[error("rating matrix needs n >= 2 subjects and k >= 2 raters, got {n} x {k}")]
    MatrixTooSmall { n: usize, k: usize },
    #[error("anova denominator is degenerate; ratings carry no usable variance")]
    DegenerateAnova,
    #[error("input matrix is empty")]
    EmptyInput,
    #[error("embedding for subject {subject}, rater {rater} has zero norm")]
    DegenerateEmbedding { subject: usize, rater: usize },
    #[error("embedding backend returned {got} vectors for {expected} texts")]
    EmbeddingCountMismatch { expected: usize, got: usize },
    #[error("term {0:?} not found in VAD lexicon")]
    TermNotFound(String),
    #[error("malformed lexicon line {line}: {reason}")]
    MalformedLexicon { line: usize, reason: String },
    #[error("embedding backend failure")]
    Backend(#[from] BackendError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Predicted and reference scores for the same items, both in [0, 5].
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    preds: Vec<f64>,
    refs: Vec<f64>,
}

impl PairedScores {
    pub fn new(preds: Vec<f64>, refs: Vec<f64>) -> Result<Self, MetricsError> {
        if preds.len() != refs.len() {
            return Err(MetricsError::LengthMismatch { left: preds.len(), right: refs.len() });
        }
        for (index, &v) in preds.iter().chain(refs.iter()).enumerate() {
            let index = index % preds.len().max(1);
            if !v.is_finite() {
                return Err(MetricsError::NonFinite { index });
            }
            if !(0.0..=5.0).contains(&v) {
                return Err(MetricsError::ScoreOutOfRange { index, value: v });
            }
        }
        Ok(PairedScores { preds, refs })
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn preds(&self) -> &[f64] {
        &self.preds
    }

    pub fn refs(&self) -> &[f64] {
        &self.refs
    }
}

/// Pearson product-moment correlation between predictions and references.
pub fn lcc(p: &PairedScores) -> Result<f64, MetricsError> {
    pearson(&p.preds, &p.refs)
}

/// Pearson correlation of two raw vectors (no score-range restriction).
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::InsufficientData { needed: 2, got: a.len() });
    }
    if let Some(index) = a.iter().chain(b.iter()).position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite { index: index % a.len() });
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

/// Fraction of pairs with |pred − ref| ≤ tol. The boundary counts as correct:
/// a gap of exactly `tol` is "within" tolerance.
pub fn tolerance_acc(p: &PairedScores, tol: f64) -> Result<f64, MetricsError> {
    if tol.is_nan() || tol < 0.0 {
        return Err(MetricsError::InvalidTolerance(tol));
    }
    if p.is_empty() {
        return Err(MetricsError::InsufficientData { needed: 1, got: 0 });
    }
    let hits = p
        .preds
        .iter()
        .zip(&p.refs)
        .filter(|(&x, &y)| (x - y).abs() <= tol)
        .count();
    Ok(hits as f64 / p.len() as f64)
}

/// Default tolerance for [`tolerance_acc`].
pub const DEFAULT_TOLERANCE: f64 = 1.0;

/// Complete `n_subjects × k_raters` rating matrix (no missing cells).
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    values: Array2<f64>,
}

impl RatingMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let n = rows.len();
        let k = rows.first().map_or(0, |r| r.len());
        for (row, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(MetricsError::RaggedMatrix { row, expected: k, got: r.len() });
            }
        }
        if n < 2 || k < 2 {
            return Err(MetricsError::MatrixTooSmall { n, k });
        }
        let mut values = Array2::zeros((n, k));
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(MetricsError::NonFinite { index: i * k + j });
                }
                values[[i, j]] = v;
            }
        }
        Ok(RatingMatrix { values })
    }

    pub fn from_array(values: Array2<f64>) -> Result<Self, MetricsError> {
        let rows: Vec<Vec<f64>> = values.rows().into_iter().map(|r| r.to_vec()).collect();
        Self::new(&rows)
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn k_raters(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Intraclass correlation ICC(2,1): two-way random effects, absolute
/// agreement, single rater.
///
/// With `MSR`, `MSC`, `MSE` the mean squares for subjects (rows), raters
/// (columns) and residual:
///
/// ```text
/// ICC(2,1) = (MSR − MSE) / (MSR + (k−1)·MSE + (k/n)·(MSC − MSE))
/// ```
pub fn icc_2_1(m: &RatingMatrix) -> Result<f64, MetricsError> {
    let n = m.n_subjects();
    let k = m.k_raters();
    let v = &m.values;
    let grand = v.mean().unwrap();
    let row_means: Vec<f64> = (0..n).map(|i| v.row(i).mean().unwrap()).collect();
    let col_means: Vec<f64> = (0..k).map(|j| v.column(j).mean().unwrap()).collect();

    let msr =
        k as f64 * row_means.iter().map(|r| (r - grand).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let msc =
        n as f64 * col_means.iter().map(|c| (c - grand).powi(2)).sum::<f64>() / (k as f64 - 1.0);
    let mut sse = 0.0;
    for i in 0..n {
        for j in 0..k {
            sse += (v[[i, j]] - row_means[i] - col_means[j] + grand).powi(2);
        }
    }
    let mse = sse / ((n as f64 - 1.0) * (k as f64 - 1.0));

    let kf = k as f64;
    let nf = n as f64;
    let denom = msr + (kf - 1.0) * mse + (kf / nf) * (msc - mse);
    let scale = msr.abs().max(msc.abs()).max(mse.abs());
    if denom.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(MetricsError::DegenerateAnova);
    }
    Ok((msr - mse) / denom)
}

/// Per subject, the fraction of raters matching the modal label (ties broken
/// toward the lexicographically smallest label), averaged over subjects.
pub fn percent_agreement(labels: &[Vec<String>]) -> Result<f64, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = labels[0].len();
    if k == 0 {
        return Err(MetricsError::EmptyInput);
    }
    for (row, r) in labels.iter().enumerate() {
        if r.len() != k {
            return Err(MetricsError::RaggedMatrix { row, expected: k, got: r.len() });
        }
    }

    let mut total = 0.0;
    for row in labels {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for label in row {
            *counts.entry(label.as_str()).or_insert(0) += 1;
        }
        // Highest count; among equal counts the lexicographically smallest
        // label is the mode.
        let (_, mode_count) = counts
            .iter()
            .map(|(&label, &count)| (label, count))
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
            .unwrap();
        total += mode_count as f64 / k as f64;
    }
    Ok(total / labels.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per subject, the mean cosine similarity over all unordered rater pairs of
/// the embedded texts, averaged over subjects. All texts are embedded in one
/// batched backend call.
pub fn embedding_agreement(
    texts: &[Vec<String>],
    embed: &dyn EmbeddingBackend,
) -> Result<f64, MetricsError> {
    if texts.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = texts[0].len();
    for (row, r) in texts.iter().enumerate() {
        if r.len() != k {
            return Err(MetricsError::RaggedMatrix { row, expected: k, got: r.len() });
        }
    }
    if k < 2 {
        return Err(MetricsError::InsufficientData { needed: 2, got: k });
    }

    let flat: Vec<String> = texts.iter().flatten().cloned().collect();
    let vectors = embed.embed(&flat)?;
    if vectors.len() != flat.len() {
        return Err(MetricsError::EmbeddingCountMismatch {
            expected: flat.len(),
            got: vectors.len(),
        });
    }

    let mut total = 0.0;
    for (subject, _) in texts.iter().enumerate() {
        let row = &vectors[subject * k..(subject + 1) * k];
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..k {
            for b in (a + 1)..k {
                let sim = cosine(&row[a], &row[b]).ok_or({
                    // Report the first zero-norm member of the failing pair.
                    let rater = if row[a].iter().all(|&x| x == 0.0) { a } else { b };
                    MetricsError::DegenerateEmbedding { subject, rater }
                })?;
                sum += sim;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / texts.len() as f64)
}

/// Valence–arousal–dominance coordinates, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vad {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

/// Emotion-term lexicon mapping lowercase terms to VAD triples. Loaded from
/// an external tab-separated file (`term<TAB>valence<TAB>arousal<TAB>dominance`);
/// the lexicon itself is not bundled with the library.
#[derive(Debug, Clone, Default)]
pub struct VadLexicon {
    entries: HashMap<String, Vad>,
}

impl VadLexicon {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vad)>) -> Self {
        VadLexicon {
            entries: entries
                .into_iter()
                .map(|(term, vad)| (term.trim().to_lowercase(), vad))
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut entries = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 4 {
                return Err(MetricsError::MalformedLexicon {
                    line,
                    reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            }
            let term = fields[0].trim().to_lowercase();
            if term.is_empty() {
                return Err(MetricsError::MalformedLexicon {
                    line,
                    reason: "empty term".to_string(),
                });
            }
            let mut nums = [0.0f64; 3];
            for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
                let v: f64 = field.trim().parse().map_err(|_| MetricsError::MalformedLexicon {
                    line,
                    reason: format!("bad number {field:?}"),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::MalformedLexicon {
                        line,
                        reason: format!("value {v} outside [0, 1]"),
                    });
                }
                *slot = v;
            }
            entries.insert(term, Vad { valence: nums[0], arousal: nums[1], dominance: nums[2] });
        }
        Ok(VadLexicon { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<Vad> {
        self.entries.get(term.trim().to_lowercase().as_str()).copied()
    }
}

/// Map a free-text emotion description to VAD coordinates.
///
/// The full lowercased string is looked up first; failing that, it is split
/// on whitespace, punctuation-stripped, and the matched tokens are averaged
/// componentwise. A description matching nothing is an error — silently
/// guessing a coordinate would corrupt downstream agreement statistics.
pub fn map_emotion_to_vad(term: &str, lexicon: &VadLexicon) -> Result<Vad, MetricsError> {
    let normalized = term.trim().to_lowercase();
    if let Some(vad) = lexicon.get(&normalized) {
        return Ok(vad);
    }
    let mut acc = Vad { valence: 0.0, arousal: 0.0, dominance: 0.0 };
    let mut matched = 0usize;
    for token in normalized.split_whitespace() {
        let token = token.trim_matches(|c: char| !c.is_alphanumeric());
        if token.is_empty() {
            continue;
        }
        if let Some(vad) = lexicon.get(token) {
            acc.valence += vad.valence;
            acc.arousal += vad.arousal;
            acc.dominance += vad.dominance;
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(MetricsError::TermNotFound(term.to_string()));
    }
    let n = matched as f64;
    Ok(Vad { valence: acc.valence / n, arousal: acc.arousal / n, dominance: acc.dominance / n })
}

/// Per-dimension ICC(2,1) of emotion labels mapped through the VAD lexicon,
/// plus their mean (the reported emotion-agreement figure).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VadIccReport {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
    pub mean: f64,
}

/// Inter-rater reliability of free-text emotion labels: map every label into
/// VAD space, compute ICC(2,1) separately per dimension, and average.
pub fn vad_icc(labels: &[Vec<String>], lexicon: &VadLexicon) -> Result<VadIccReport, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut v_rows = Vec::with_capacity(labels.len());
    let mut a_rows = Vec::with_capacity(labels.len());
    let mut d_rows = Vec::with_capacity(labels.len());
    for row in labels {
        let mut v = Vec::with_capacity(row.len());
        let mut a = Vec::with_capacity(row.len());
        let mut d = Vec::with_capacity(row.len());
        for label in row {
            let vad = map_emotion_to_vad(label, lexicon)?;
            v.push(vad.valence);
            a.push(vad.arousal);
            d.push(vad.dominance);
        }
        v_rows.push(v);
        a_rows.push(a);
        d_rows.push(d);
    }
    let valence = icc_2_1(&RatingMatrix::new(&v_rows)?)?;
    let arousal = icc_2_1(&RatingMatrix::new(&a_rows)?)?;
    let dominance = icc_2_1(&RatingMatrix::new(&d_rows)?)?;
    Ok(VadIccReport { valence, arousal, dominance, mean: (valence + arousal + dominance) / 3.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{HashEmbedding, TableEmbedding};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pairs(preds: &[f64], refs: &[f64]) -> PairedScores {
        PairedScores::new(preds.to_vec(), refs.to_vec()).unwrap()
    }

    /// Independent ANOVA oracle using the classical sum-of-squares
    /// subtraction route (SSE = SST − SSR − SSC), deliberately different
    /// from the residual formulation in `icc_2_1`.
    fn icc_oracle(rows: &[Vec<f64>]) -> f64 {
        let n = rows.len() as f64;
        let k = rows[0].len() as f64;
        let all: Vec<f64> = rows.iter().flatten().copied().collect();
        let grand = all.iter().sum::<f64>() / (n * k);
        let sst: f64 = all.iter().map(|v| (v - grand).powi(2)).sum();
        let ssr: f64 = rows
            .iter()
            .map(|r| {
                let mean = r.iter().sum::<f64>() / k;
                k * (mean - grand).powi(2)
            })
            .sum();
        let ssc: f64 = (0..rows[0].len())
            .map(|j| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                n * (mean - grand).powi(2)
            })
            .sum();
        let sse = sst - ssr - ssc;
        let msr = ssr / (n - 1.0);
        let msc = ssc / (k - 1.0);
        let mse = sse / ((n - 1.0) * (k - 1.0));
        (msr - mse) / (msr + (k - 1.0) * mse + (k / n) * (msc - mse))
    }

    #[test]
    fn lcc_is_one_on_identical_nonconstant_vectors() {
        let p = pairs(&[1.0, 2.0, 3.5], &[1.0, 2.0, 3.5]);
        assert_eq!(lcc(&p).unwrap(), 1.0);
    }

    #[test]
    fn lcc_is_minus_one_on_reflected_vectors() {
        let p = pairs(&[1.0, 2.0, 3.0], &[4.0, 3.0, 2.0]);
        assert!((lcc(&p).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn lcc_matches_hand_computed_oracle() {
        let p = pairs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]);
        assert!((lcc(&p).unwrap() - 0.9819805060619659).abs() < 1e-15);
    }

    #[test]
    fn lcc_rejects_constant_and_short_inputs() {
        let p = pairs(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(lcc(&p), Err(MetricsError::ZeroVariance)));
        let p = pairs(&[1.0], &[2.0]);
        assert!(matches!(lcc(&p), Err(MetricsError::InsufficientData { .. })));
    }

    #[test]
    fn paired_scores_validate_range_and_length() {
        assert!(matches!(
            PairedScores::new(vec![1.0], vec![1.0, 2.0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            PairedScores::new(vec![5.1], vec![1.0]),
            Err(MetricsError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            PairedScores::new(vec![f64::NAN], vec![1.0]),
            Err(MetricsError::NonFinite { .. })
        ));
    }

    #[test]
    fn near_zero_correlation_on_independent_uniforms() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20_260_101);
        let preds: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..=5.0)).collect();
        let refs: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..=5.0)).collect();
        let r = lcc(&pairs(&preds, &refs)).unwrap();
        assert!(r.abs() < 0.1, "independent uniforms correlated at {r}");
    }

    #[test]
    fn tolerance_acc_matches_per_pair_oracle() {
        // |Δ| per pair: {1.0, 1.5, 0.5} → 2 of 3 within 1.0 (boundary counts).
        let p = pairs(&[1.0, 2.5, 4.0], &[2.0, 4.0, 4.5]);
        assert!((tolerance_acc(&p, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tolerance_acc_edge_cases() {
        let p = pairs(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!(tolerance_acc(&p, 0.0).unwrap(), 1.0);
        assert_eq!(tolerance_acc(&p, f64::INFINITY).unwrap(), 1.0);
        assert!(matches!(
            tolerance_acc(&p, -0.5),
            Err(MetricsError::InvalidTolerance(_))
        ));
        let empty = PairedScores::new(vec![], vec![]).unwrap();
        assert!(matches!(
            tolerance_acc(&empty, 1.0),
            Err(MetricsError::InsufficientData { .. })
        ));
    }

    #[test]
    fn icc_is_one_under_perfect_agreement() {
        let m = RatingMatrix::new(&[
            vec![1.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0],
            vec![4.5, 4.5, 4.5],
        ])
        .unwrap();
        assert!((icc_2_1(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn icc_matches_oracle_on_fixed_matrix() {
        let rows = vec![
            vec![1.0, 1.0, 2.0],
            vec![2.0, 2.0, 2.0],
            vec![3.0, 3.0, 4.0],
            vec![5.0, 4.0, 5.0],
        ];
        let ours = icc_2_1(&RatingMatrix::new(&rows).unwrap()).unwrap();
        assert!((ours - icc_oracle(&rows)).abs() < 1e-12, "{ours} vs {}", icc_oracle(&rows));
    }

    #[test]
    fn icc_matches_oracle_on_random_matrices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for trial in 0..100 {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..5).map(|_| rng.random_range(0.0..=5.0)).collect())
                .collect();
            let ours = icc_2_1(&RatingMatrix::new(&rows).unwrap()).unwrap();
            let oracle = icc_oracle(&rows);
            assert!(
                (ours - oracle).abs() < 1e-9,
                "trial {trial}: {ours} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn icc_degenerates_on_constant_matrix() {
        let m = RatingMatrix::new(&[vec![3.0, 3.0], vec![3.0, 3.0]]).unwrap();
        assert!(matches!(icc_2_1(&m), Err(MetricsError::DegenerateAnova)));
    }

    #[test]
    fn rating_matrix_validates_shape() {
        assert!(matches!(
            RatingMatrix::new(&[vec![1.0, 2.0], vec![1.0]]),
            Err(MetricsError::RaggedMatrix { .. })
        ));
        assert!(matches!(
            RatingMatrix::new(&[vec![1.0, 2.0]]),
            Err(MetricsError::MatrixTooSmall { n: 1, k: 2 })
        ));
        assert!(matches!(
            RatingMatrix::new(&[vec![1.0], vec![2.0]]),
            Err(MetricsError::MatrixTooSmall { n: 2, k: 1 })
        ));
    }

    #[test]
    fn percent_agreement_examples() {
        let unanimous = vec![
            vec!["a".to_string(), "a".to_string()],
            vec!["b".to_string(), "b".to_string()],
        ];
        assert_eq!(percent_agreement(&unanimous).unwrap(), 1.0);

        let one = vec![vec!["A".to_string(), "A".to_string(), "B".to_string()]];
        assert!((percent_agreement(&one).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        // Tie between A and B: mode is the lexicographically smaller A.
        let tie = vec![vec!["A".to_string(), "B".to_string()]];
        assert_eq!(percent_agreement(&tie).unwrap(), 0.5);

        let single = vec![vec!["x".to_string()]];
        assert_eq!(percent_agreement(&single).unwrap(), 1.0);

        assert!(matches!(percent_agreement(&[]), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn embedding_agreement_identical_texts_is_one() {
        let texts = vec![
            vec!["calm".to_string(), "calm".to_string(), "calm".to_string()],
            vec!["sad".to_string(), "sad".to_string(), "sad".to_string()],
        ];
        let r = embedding_agreement(&texts, &HashEmbedding::default()).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_agreement_orthogonal_is_zero() {
        let mut table = TableEmbedding::default();
        table.insert("a", vec![1.0, 0.0]);
        table.insert("b", vec![0.0, 1.0]);
        let texts = vec![vec!["a".to_string(), "b".to_string()]];
        assert_eq!(embedding_agreement(&texts, &table).unwrap(), 0.0);
    }

    #[test]
    fn embedding_agreement_pairwise_enumeration() {
        // Raters e1, e1, e2 with orthonormal e1 ⊥ e2: pairs {1, 0, 0} → 1/3.
        let mut table = TableEmbedding::default();
        table.insert("x", vec![1.0, 0.0]);
        table.insert("y", vec![0.0, 1.0]);
        let texts = vec![vec!["x".to_string(), "x".to_string(), "y".to_string()]];
        let r = embedding_agreement(&texts, &table).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn embedding_agreement_rejects_degenerate_inputs() {
        let mut table = TableEmbedding::default();
        table.insert("z", vec![0.0, 0.0]);
        table.insert("a", vec![1.0, 0.0]);
        let texts = vec![vec!["a".to_string(), "z".to_string()]];
        assert!(matches!(
            embedding_agreement(&texts, &table),
            Err(MetricsError::DegenerateEmbedding { subject: 0, rater: 1 })
        ));
        let single = vec![vec!["a".to_string()]];
        assert!(matches!(
            embedding_agreement(&single, &table),
            Err(MetricsError::InsufficientData { .. })
        ));
    }

    fn tiny_lexicon() -> VadLexicon {
        VadLexicon::from_entries([
            ("calm".to_string(), Vad { valence: 0.7, arousal: 0.2, dominance: 0.5 }),
            ("gentle".to_string(), Vad { valence: 0.8, arousal: 0.3, dominance: 0.4 }),
            ("angry".to_string(), Vad { valence: 0.1, arousal: 0.9, dominance: 0.8 }),
        ])
    }

    #[test]
    fn vad_lookup_and_token_averaging() {
        let lex = tiny_lexicon();
        let direct = map_emotion_to_vad("Calm", &lex).unwrap();
        assert_eq!(direct, Vad { valence: 0.7, arousal: 0.2, dominance: 0.5 });

        // "calm, gentle" → componentwise mean of the two rows.
        let avg = map_emotion_to_vad("calm, gentle", &lex).unwrap();
        assert!((avg.valence - 0.75).abs() < 1e-15);
        assert!((avg.arousal - 0.25).abs() < 1e-15);
        assert!((avg.dominance - 0.45).abs() < 1e-15);

        assert!(matches!(
            map_emotion_to_vad("zxqv", &lex),
            Err(MetricsError::TermNotFound(_))
        ));
    }

    #[test]
    fn vad_lexicon_parses_and_validates_tsv() {
        let lex = VadLexicon::parse("# comment\ncalm\t0.7\t0.2\t0.5\n\nAngry\t0.1\t0.9\t0.8\n")
            .unwrap();
        assert_eq!(lex.len(), 2);
        assert!(lex.get("angry").is_some(), "terms are lowercased on load");

        assert!(matches!(
            VadLexicon::parse("calm\t0.7\t0.2\n"),
            Err(MetricsError::MalformedLexicon { line: 1, .. })
        ));
        assert!(matches!(
            VadLexicon::parse("calm\t0.7\t0.2\t1.5\n"),
            Err(MetricsError::MalformedLexicon { .. })
        ));
    }

    #[test]
    fn vad_icc_averages_three_dimensions() {
        let lex = tiny_lexicon();
        let labels = vec![
            vec!["calm".to_string(), "calm".to_string()],
            vec!["angry".to_string(), "angry".to_string()],
            vec!["gentle".to_string(), "gentle".to_string()],
        ];
        let report = vad_icc(&labels, &lex).unwrap();
        assert!((report.valence - 1.0).abs() < 1e-9);
        assert!((report.mean - (report.valence + report.arousal + report.dominance) / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn lcc_invariant_under_positive_affine(
            base in proptest::collection::vec(0.0f64..=1.0, 3..40),
            noise in proptest::collection::vec(0.0f64..=1.0, 3..40),
            a in 0.1f64..=2.0,
            b in 0.0f64..=2.0,
        ) {
            let n = base.len().min(noise.len());
            let xs: Vec<f64> = base[..n].to_vec();
            let ys: Vec<f64> = noise[..n].to_vec();
            // Keep transformed values inside [0, 5]: x ∈ [0,1], a ≤ 2, b ≤ 2.
            let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let p0 = PairedScores::new(xs, ys.clone());
            let p1 = PairedScores::new(xt, ys);
            if let (Ok(p0), Ok(p1)) = (p0, p1) {
                match (lcc(&p0), lcc(&p1)) {
                    (Ok(r0), Ok(r1)) => prop_assert!((r0 - r1).abs() < 1e-9),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "diverged: {a:?} vs {b:?}"),
                }
            }
        }

        #[test]
        fn lcc_flips_sign_under_reflection(
            base in proptest::collection::vec(0.0f64..=5.0, 3..40),
            noise in proptest::collection::vec(0.0f64..=5.0, 3..40),
        ) {
            let n = base.len().min(noise.len());
            let xs: Vec<f64> = base[..n].to_vec();
            let ys: Vec<f64> = noise[..n].to_vec();
            let reflected: Vec<f64> = xs.iter().map(|x| 5.0 - x).collect();
            let p0 = PairedScores::new(xs, ys.clone()).unwrap();
            let p1 = PairedScores::new(reflected, ys).unwrap();
            if let (Ok(r0), Ok(r1)) = (lcc(&p0), lcc(&p1)) {
                prop_assert!((r0 + r1).abs() < 1e-9);
            }
        }

        #[test]
        fn tolerance_acc_monotone_in_tol(
            preds in proptest::collection::vec(0.0f64..=5.0, 1..30),
            refs in proptest::collection::vec(0.0f64..=5.0, 1..30),
            t1 in 0.0f64..=5.0,
            t2 in 0.0f64..=5.0,
        ) {
            let n = preds.len().min(refs.len());
            let p = PairedScores::new(preds[..n].to_vec(), refs[..n].to_vec()).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(tolerance_acc(&p, lo).unwrap() <= tolerance_acc(&p, hi).unwrap());
            prop_assert_eq!(tolerance_acc(&p, f64::INFINITY).unwrap(), 1.0);
        }

        #[test]
        fn percent_agreement_is_one_iff_unanimous(
            rows in proptest::collection::vec(
                proptest::collection::vec(0u8..3, 2..5),
                1..6,
            ),
        ) {
            let labels: Vec<Vec<String>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v.to_string()).collect())
                .collect();
            // Ragged rows are rejected, not measured.
            let k = labels[0].len();
            prop_assume!(labels.iter().all(|r| r.len() == k));
            let result = percent_agreement(&labels).unwrap();
            let unanimous = labels.iter().all(|r| r.iter().all(|v| v == &r[0]));
            prop_assert_eq!(result == 1.0, unanimous);
            prop_assert!(result > 0.0 && result <= 1.0);
        }

        #[test]
        fn embedding_agreement_stays_in_unit_interval(
            rows in proptest::collection::vec(
                proptest::collection::vec(0u8..5, 2..4),
                1..5,
            ),
        ) {
            let k = rows[0].len();
            prop_assume!(rows.iter().all(|r| r.len() == k));
            let texts: Vec<Vec<String>> = rows
                .iter()
                .map(|r| r.iter().map(|v| format!("label-{v}")).collect())
                .collect();
            let r = embedding_agreement(&texts, &HashEmbedding::default()).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
