//! Adaptive audio attention bias: masks, gated coefficients, biased
//! attention, dynamic traces, gradient checks and a lossless export format.
//!
//! The kernel rescales attention by a per-key bias vector `B` and
//! renormalizes each row back to unit sum:
//!
//! ```text
//! A(Q, K, V) = norm( softmax(Q Kᵀ / √d) ⊙ B ) V
//! B[j] = 2·σ(w_p·x_j)        if j is a prompt position      ∈ (0, 2)
//!        1 + σ(w_a·x_j)      if j is an audio position      ∈ (1, 2)
//!        σ(w_c·x_j)          if j is a chain-of-thought pos ∈ (0, 1)
//!        1                   otherwise (base)
//! ```
//!
//! The bias is keyed by key position and broadcast over query rows; each
//! gate reads that key position's own hidden-state row `x_j`, so a
//! position's coefficient is fixed the moment the position is minted. That
//! makes autoregressive behavior a pure prefix property: the step-`t` bias
//! vector is exactly the first `t + 1` entries of the full vector (see
//! [`dynamic_bias_trace`]), matching a KV-cache implementation where gates
//! are evaluated once per new token.
//!
//! The four region masks partition the sequence: every position belongs to
//! exactly one of prompt / audio / cot / base. Score-span positions fold
//! into base; focus positions fold into cot. All math is `f64`.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{AnnotatedSequence, RegionTag};

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("region masks do not partition the sequence")]
    MaskNotPartition,
    #[error("non-finite value in {0}")]
    NonFiniteInput(String),
    #[error("attention requires at least one key position")]
    EmptySequence,
    #[error("bad export header: {0:?}")]
    BadHeader(String),
    #[error("export data line {line}: {reason}")]
    BadExport { line: usize, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Binary region masks over a token sequence. A valid set is a partition:
/// each position is true in exactly one mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMaskSet {
    pub prompt: Vec<bool>,
    pub audio: Vec<bool>,
    pub cot: Vec<bool>,
    pub base: Vec<bool>,
}

/// The four mask kinds, in mask-set field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Prompt,
    Audio,
    Cot,
    Base,
}

impl RegionMaskSet {
    pub fn len(&self) -> usize {
        self.prompt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt.is_empty()
    }

    /// True when all four masks have equal length and every position is
    /// covered by exactly one of them.
    pub fn is_partition(&self) -> bool {
        let n = self.prompt.len();
        if self.audio.len() != n || self.cot.len() != n || self.base.len() != n {
            return false;
        }
        (0..n).all(|i| {
            [self.prompt[i], self.audio[i], self.cot[i], self.base[i]]
                .iter()
                .filter(|&&b| b)
                .count()
                == 1
        })
    }

    pub fn from_kinds(kinds: &[MaskKind]) -> Self {
        RegionMaskSet {
            prompt: kinds.iter().map(|k| *k == MaskKind::Prompt).collect(),
            audio: kinds.iter().map(|k| *k == MaskKind::Audio).collect(),
            cot: kinds.iter().map(|k| *k == MaskKind::Cot).collect(),
            base: kinds.iter().map(|k| *k == MaskKind::Base).collect(),
        }
    }

    /// Mask kind at position `i` (panics if not a partition at `i`).
    pub fn kind_at(&self, i: usize) -> MaskKind {
        match (self.prompt[i], self.audio[i], self.cot[i]) {
            (true, false, false) => MaskKind::Prompt,
            (false, true, false) => MaskKind::Audio,
            (false, false, true) => MaskKind::Cot,
            (false, false, false) if self.base[i] => MaskKind::Base,
            _ => panic!("masks do not partition at position {i}"),
        }
    }
}

/// Project an annotated sequence onto the four bias masks.
///
/// Focus positions are chain-of-thought positions as far as the bias is
/// concerned; explicit score spans get no special treatment and fold into
/// base.
pub fn build_masks(seq: &AnnotatedSequence) -> RegionMaskSet {
    let kinds: Vec<MaskKind> = seq
        .tokens
        .iter()
        .map(|t| match t.tag {
            RegionTag::Prompt => MaskKind::Prompt,
            RegionTag::Audio => MaskKind::Audio,
            RegionTag::Cot | RegionTag::Focus => MaskKind::Cot,
            RegionTag::Score | RegionTag::Base => MaskKind::Base,
        })
        .collect();
    RegionMaskSet::from_kinds(&kinds)
}

/// Gate weights for the three learned bias components.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasParams {
    pub w_prompt: Array1<f64>,
    pub w_audio: Array1<f64>,
    pub w_cot: Array1<f64>,
}

impl BiasParams {
    pub fn dim(&self) -> usize {
        self.w_prompt.len()
    }

    pub fn zeros(dim: usize) -> Self {
        BiasParams {
            w_prompt: Array1::zeros(dim),
            w_audio: Array1::zeros(dim),
            w_cot: Array1::zeros(dim),
        }
    }

    /// Deterministic standard-normal initialization.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Array1<f64> {
            Array1::from_iter((0..n).map(|_| StandardNormal.sample(&mut rng)))
        };
        BiasParams {
            w_prompt: draw(dim),
            w_audio: draw(dim),
            w_cot: draw(dim),
        }
    }

    fn check_finite(&self) -> Result<(), BiasError> {
        for (name, w) in [("w_prompt", &self.w_prompt), ("w_audio", &self.w_audio), ("w_cot", &self.w_cot)] {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(BiasError::NonFiniteInput(name.to_string()));
            }
            if w.len() != self.w_prompt.len() {
                return Err(BiasError::ShapeMismatch(format!(
                    "{name} has dim {}, expected {}",
                    w.len(),
                    self.w_prompt.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-key bias coefficients for one (partial) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub coeffs: Array1<f64>,
}

impl BiasMatrix {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// The identity bias (all ones): attention reduces to plain softmax.
    pub fn ones(len: usize) -> Self {
        BiasMatrix { coeffs: Array1::ones(len) }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Linear coefficients `(offset, scale)` of each gated component:
/// `B[j] = offset + scale * σ(w · x_j)`.
fn component_affine(kind: MaskKind) -> (f64, f64) {
    match kind {
        MaskKind::Prompt => (0.0, 2.0),
        MaskKind::Audio => (1.0, 1.0),
        MaskKind::Cot => (0.0, 1.0),
        MaskKind::Base => (1.0, 0.0),
    }
}

fn gate(params: &BiasParams, kind: MaskKind, x_row: ndarray::ArrayView1<'_, f64>) -> f64 {
    let w = match kind {
        MaskKind::Prompt => &params.w_prompt,
        MaskKind::Audio => &params.w_audio,
        MaskKind::Cot => &params.w_cot,
        MaskKind::Base => return 0.0,
    };
    sigmoid(w.dot(&x_row))
}

/// Compute the per-key bias vector for hidden states `x` (`L × d`).
pub fn compute_bias(
    x: &Array2<f64>,
    masks: &RegionMaskSet,
    params: &BiasParams,
) -> Result<BiasMatrix, BiasError> {
    params.check_finite()?;
    if !masks.is_partition() {
        return Err(BiasError::MaskNotPartition);
    }
    if masks.len() != x.nrows() {
        return Err(BiasError::ShapeMismatch(format!(
            "masks cover {} positions but x has {} rows",
            masks.len(),
            x.nrows()
        )));
    }
    if x.ncols() != params.dim() {
        return Err(BiasError::ShapeMismatch(format!(
            "x has {} columns but gate weights have dim {}",
            x.ncols(),
            params.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BiasError::NonFiniteInput("x".to_string()));
    }

    let coeffs = Array1::from_iter((0..x.nrows()).map(|j| {
        let kind = masks.kind_at(j);
        let (offset, scale) = component_affine(kind);
        offset + scale * gate(params, kind, x.row(j))
    }));
    Ok(BiasMatrix { coeffs })
}

/// Row-stochastic attention weights: `norm(softmax(QKᵀ/√d) ⊙ B)`.
///
/// Exposed separately from [`biased_attention`] so tests and traces can
/// inspect the weight matrix itself.
pub fn biased_attention_weights(
    q: &Array2<f64>,
    k: &Array2<f64>,
    bias: &BiasMatrix,
) -> Result<Array2<f64>, BiasError> {
    if q.ncols() != k.ncols() {
        return Err(BiasError::ShapeMismatch(format!(
            "q has {} columns, k has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() == 0 {
        return Err(BiasError::EmptySequence);
    }
    if bias.len() != k.nrows() {
        return Err(BiasError::ShapeMismatch(format!(
            "bias covers {} keys but k has {} rows",
            bias.len(),
            k.nrows()
        )));
    }
    if q.iter().chain(k.iter()).chain(bias.coeffs.iter()).any(|v| !v.is_finite()) {
        return Err(BiasError::NonFiniteInput("attention inputs".to_string()));
    }
    if bias.coeffs.iter().any(|&b| b <= 0.0) {
        // All bias components are strictly positive by construction; zero or
        // negative entries would break row renormalization.
        return Err(BiasError::NonFiniteInput("bias coefficients must be positive".to_string()));
    }

    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    let mut weights = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() * bias.coeffs[j];
            weights[[i, j]] = p;
            denom += p;
        }
        for j in 0..row.len() {
            weights[[i, j]] /= denom;
        }
    }
    Ok(weights)
}

/// Full biased attention: `norm(softmax(QKᵀ/√d) ⊙ B) V`.
pub fn biased_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    bias: &BiasMatrix,
) -> Result<Array2<f64>, BiasError> {
    if v.nrows() != k.nrows() {
        return Err(BiasError::ShapeMismatch(format!(
            "k has {} rows, v has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(BiasError::NonFiniteInput("v".to_string()));
    }
    Ok(biased_attention_weights(q, k, bias)?.dot(v))
}

/// Per-step bias vectors for autoregressive decoding.
///
/// `trace[t]` is the bias over key positions `0..=t` — the vector the model
/// would apply while generating position `t`. Because gates are evaluated
/// from each key position's own hidden state, `trace[t]` is a prefix of
/// `trace[t+1]`: once a region's end token has passed, its positions keep
/// their coefficient while newly minted positions fall under whatever region
/// (or base behavior) is active for them.
pub fn dynamic_bias_trace(
    x: &Array2<f64>,
    seq: &AnnotatedSequence,
    params: &BiasParams,
) -> Result<Vec<BiasMatrix>, BiasError> {
    if seq.len() != x.nrows() {
        return Err(BiasError::ShapeMismatch(format!(
            "sequence has {} tokens but x has {} rows",
            seq.len(),
            x.nrows()
        )));
    }
    let masks = build_masks(seq);
    let full = compute_bias(x, &masks, params)?;
    Ok((0..seq.len())
        .map(|t| BiasMatrix { coeffs: full.coeffs.slice(ndarray::s![..=t]).to_owned() })
        .collect())
}

/// A self-contained random attention instance for gradient checking.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub masks: RegionMaskSet,
}

impl GradProbe {
    /// Deterministic probe with standard-normal matrices and a random region
    /// assignment that touches all four mask kinds when `len >= 4`.
    pub fn random(seed: u64, len: usize, dim: usize) -> GradProbe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| -> Array2<f64> {
            Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng))
        };
        let x = mat(len, dim);
        let q = mat(len, dim);
        let k = mat(len, dim);
        let v = mat(len, dim);
        let all = [MaskKind::Prompt, MaskKind::Audio, MaskKind::Cot, MaskKind::Base];
        let kinds: Vec<MaskKind> = (0..len)
            .map(|i| {
                if i < all.len() {
                    // Guarantee coverage of every region.
                    all[i]
                } else {
                    all[rand::Rng::random_range(&mut rng, 0..all.len())]
                }
            })
            .collect();
        GradProbe { x, q, k, v, masks: RegionMaskSet::from_kinds(&kinds) }
    }
}

/// Scalar probe loss: the sum of all biased-attention outputs.
pub fn probe_loss(probe: &GradProbe, params: &BiasParams) -> Result<f64, BiasError> {
    let bias = compute_bias(&probe.x, &probe.masks, params)?;
    let out = biased_attention(&probe.q, &probe.k, &probe.v, &bias)?;
    Ok(out.sum())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error across all gate-weight components.
    pub max_rel_err: f64,
    /// Component label where the worst error occurred, e.g. `"w_audio[3]"`.
    pub worst_component: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare analytic gate-weight gradients of [`probe_loss`] against central
/// finite differences at step `eps`.
///
/// The analytic path differentiates through the row renormalization: with
/// `P = softmax(QKᵀ/√d)`, `Z_i = Σ_k P_ik B_k` and row output sums `o_i`,
///
/// ```text
/// ∂L/∂B_m   = Σ_i P_im (v̄_m − o_i) / Z_i          (v̄_m = Σ_c V_mc)
/// ∂L/∂w_rc  = Σ_{m ∈ region r} ∂L/∂B_m · scale_r · g_m (1 − g_m) · x_mc
/// ```
///
/// Regions with no positions contribute exactly zero gradient (their gates
/// are detached from the loss).
pub fn grad_check(
    params: &BiasParams,
    probe: &GradProbe,
    eps: f64,
) -> Result<GradCheckReport, BiasError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(BiasError::NonFiniteInput(format!("eps = {eps}")));
    }
    let analytic = analytic_gradients(probe, params)?;

    fn weight_mut(p: &mut BiasParams, r: usize) -> &mut Array1<f64> {
        match r {
            0 => &mut p.w_prompt,
            1 => &mut p.w_audio,
            _ => &mut p.w_cot,
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut perturbed = params.clone();
    for r in 0..3 {
        let dim = params.dim();
        for c in 0..dim {
            let orig = weight_mut(&mut perturbed, r)[c];
            weight_mut(&mut perturbed, r)[c] = orig + eps;
            let plus = probe_loss(probe, &perturbed)?;
            weight_mut(&mut perturbed, r)[c] = orig - eps;
            let minus = probe_loss(probe, &perturbed)?;
            weight_mut(&mut perturbed, r)[c] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }

    let mut max_rel_err = 0.0;
    let mut worst_component = String::from("none");
    let names = ["w_prompt", "w_audio", "w_cot"];
    for (idx, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / f64::max((a.abs() + n.abs()) / 2.0, 1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            let dim = params.dim();
            worst_component = format!("{}[{}]", names[idx / dim], idx % dim);
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_component, analytic, numeric })
}

/// Flat analytic gradient `[∂L/∂w_prompt..., ∂L/∂w_audio..., ∂L/∂w_cot...]`.
fn analytic_gradients(probe: &GradProbe, params: &BiasParams) -> Result<Vec<f64>, BiasError> {
    let bias = compute_bias(&probe.x, &probe.masks, params)?;
    let (q, k, v, x) = (&probe.q, &probe.k, &probe.v, &probe.x);
    if v.nrows() != k.nrows() {
        return Err(BiasError::ShapeMismatch("k/v row mismatch".to_string()));
    }

    // Plain softmax probabilities P (no bias).
    let p = biased_attention_weights(q, k, &BiasMatrix::ones(k.nrows()))?;
    let l = k.nrows();

    // Z_i = Σ_k P_ik B_k ; o_i = Σ_c (W V)_ic with W the renormalized rows.
    let v_rowsum: Vec<f64> = (0..l).map(|m| v.row(m).sum()).collect();
    let nq = q.nrows();
    let mut z = vec![0.0; nq];
    let mut o = vec![0.0; nq];
    for i in 0..nq {
        for m in 0..l {
            z[i] += p[[i, m]] * bias.coeffs[m];
        }
        for m in 0..l {
            o[i] += p[[i, m]] * bias.coeffs[m] * v_rowsum[m] / z[i];
        }
    }

    // ∂L/∂B_m
    let mut dldb = vec![0.0; l];
    for m in 0..l {
        for i in 0..nq {
            dldb[m] += p[[i, m]] * (v_rowsum[m] - o[i]) / z[i];
        }
    }

    let mut grads = Vec::with_capacity(3 * params.dim());
    for (kind, w) in [
        (MaskKind::Prompt, &params.w_prompt),
        (MaskKind::Audio, &params.w_audio),
        (MaskKind::Cot, &params.w_cot),
    ] {
        let (_, scale) = component_affine(kind);
        for c in 0..params.dim() {
            let mut g = 0.0;
            for m in 0..l {
                if probe.masks.kind_at(m) == kind {
                    let s = sigmoid(w.dot(&x.row(m)));
                    g += dldb[m] * scale * s * (1.0 - s) * x[[m, c]];
                }
            }
            grads.push(g);
        }
    }
    Ok(grads)
}

pub const EXPORT_HEADER: &str = "CEAEVAL-BIAS v1";

/// Write a bias trace in the portable text format:
///
/// ```text
/// CEAEVAL-BIAS v1
/// count=<n>
/// <rows> <cols>
/// <row-major values, 17 significant digits, one row per line>
/// ...
/// ```
///
/// Values are printed with enough digits to reconstruct every `f64` exactly,
/// so export → import is bitwise lossless.
pub fn export_bias(trace: &[BiasMatrix], mut out: impl Write) -> Result<(), BiasError> {
    let io_err = |source: std::io::Error| BiasError::Io { path: "<writer>".into(), source };
    for m in trace {
        if m.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(BiasError::NonFiniteInput("bias trace".to_string()));
        }
    }
    writeln!(out, "{EXPORT_HEADER}").map_err(io_err)?;
    writeln!(out, "count={}", trace.len()).map_err(io_err)?;
    for m in trace {
        writeln!(out, "1 {}", m.len()).map_err(io_err)?;
        let row = m
            .coeffs
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "{row}").map_err(io_err)?;
    }
    Ok(())
}

pub fn export_bias_to_path(trace: &[BiasMatrix], path: impl AsRef<Path>) -> Result<(), BiasError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| BiasError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    export_bias(trace, std::io::BufWriter::new(file))
}

/// Parse a bias trace written by [`export_bias`].
pub fn import_bias(reader: impl BufRead) -> Result<Vec<BiasMatrix>, BiasError> {
    let mut lines = reader.lines().enumerate();
    let io_err = |source: std::io::Error| BiasError::Io { path: "<reader>".into(), source };

    let mut next_line = |expect: &str| -> Result<(usize, String), BiasError> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n + 1, l)),
            Some((_, Err(e))) => Err(io_err(e)),
            None => Err(BiasError::BadExport {
                line: 0,
                reason: format!("unexpected end of data, expected {expect}"),
            }),
        }
    };

    let (_, header) = next_line("header")?;
    if header.trim_end() != EXPORT_HEADER {
        return Err(BiasError::BadHeader(header));
    }
    let (line_no, count_line) = next_line("count")?;
    let count: usize = count_line
        .trim_end()
        .strip_prefix("count=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| BiasError::BadExport {
            line: line_no,
            reason: format!("expected count=<n>, got {count_line:?}"),
        })?;

    let mut trace = Vec::with_capacity(count);
    for _ in 0..count {
        let (line_no, dims) = next_line("matrix dimensions")?;
        let mut parts = dims.split_whitespace();
        let dims_err = || BiasError::BadExport {
            line: line_no,
            reason: format!("expected `<rows> <cols>`, got {dims:?}"),
        };
        let rows: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(dims_err)?;
        let cols: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(dims_err)?;
        if parts.next().is_some() {
            return Err(dims_err());
        }

        let mut values = Vec::with_capacity(rows * cols);
        while values.len() < rows * cols {
            let (line_no, data) = next_line("matrix values")?;
            for tok in data.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| BiasError::BadExport {
                    line: line_no,
                    reason: format!("bad value {tok:?}"),
                })?;
                values.push(v);
            }
            if values.len() > rows * cols {
                return Err(BiasError::BadExport {
                    line: line_no,
                    reason: format!("expected {} values, found more", rows * cols),
                });
            }
        }
        trace.push(BiasMatrix { coeffs: Array1::from_vec(values) });
    }
    Ok(trace)
}

pub fn import_bias_from_path(path: impl AsRef<Path>) -> Result<Vec<BiasMatrix>, BiasError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| BiasError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    import_bias(std::io::BufReader::new(file))
}
