//! Similarity scorers over token embedding matrices.
//!
//! The primary scorer forms the raw token-similarity matrix `S = E_q E_y^T`,
//! turns it into a row-stochastic interaction matrix `A` with a
//! temperature-controlled row-wise softmax, and fuses `A` with the
//! normalized similarities `Ŝ` (from row-wise L2-normalized copies of the
//! embeddings) through a Frobenius inner product. The softmax reads raw `S`
//! while the values come from `Ŝ`; the asymmetry is intentional.
//!
//! All scores are averaged over query-token rows so they stay in `[-1, 1]`
//! and remain comparable across queries of different length; per-query
//! rankings are unaffected by the constant factor.
//!
//! Besides the softmax scorer there are three variants used for controlled
//! comparisons: MaxSim (one-hot row selection, the `τ → 0` limit of the
//! softmax scorer), mean-pooled cosine, and a target-mean softmax that
//! pools `E_y` into a single row before interacting.

use serde::{Deserialize, Serialize};

use crate::mat::{dot, l2_norm, Mat};

#[derive(Debug, thiserror::Error)]
pub enum InteractionError {
    #[error("embedding dimension mismatch: query {query} vs target {target}")]
    DimensionMismatch { query: usize, target: usize },
    #[error("empty embedding matrix")]
    EmptyMatrix,
    #[error("interaction temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
}

/// Which scorer to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    /// Row-wise softmax interaction fused with normalized similarities.
    SoftmaxToken,
    /// One-hot row selection of the best raw similarity.
    Maxsim,
    /// Cosine similarity of mean-pooled embeddings.
    MeanCosine,
    /// Softmax scorer against the row-mean of the target embeddings.
    SoftmaxYmean,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::SoftmaxToken => "softmax_token",
            InteractionKind::Maxsim => "maxsim",
            InteractionKind::MeanCosine => "mean_cosine",
            InteractionKind::SoftmaxYmean => "softmax_ymean",
        }
    }
}

/// Scorer selection plus the interaction temperature used by softmax kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub kind: InteractionKind,
    /// Softmax temperature. Two tuned presets ship:
    /// [`InteractionConfig::TEMPERATURE_DEFAULT`] (0.5) and
    /// [`InteractionConfig::TEMPERATURE_SHARP`] (0.1); reported sweeps
    /// disagree on which wins, so both are first-class and 0.5 is the
    /// default.
    pub temperature: f64,
}

impl InteractionConfig {
    /// Default temperature preset.
    pub const TEMPERATURE_DEFAULT: f64 = 0.5;
    /// Sharper preset favoring token-level selection.
    pub const TEMPERATURE_SHARP: f64 = 0.1;

    pub fn new(kind: InteractionKind, temperature: f64) -> Self {
        InteractionConfig { kind, temperature }
    }

    pub fn softmax_token() -> Self {
        InteractionConfig::new(InteractionKind::SoftmaxToken, Self::TEMPERATURE_DEFAULT)
    }

    pub fn mean_cosine() -> Self {
        InteractionConfig::new(InteractionKind::MeanCosine, Self::TEMPERATURE_DEFAULT)
    }

    fn validate(&self) -> Result<(), InteractionError> {
        match self.kind {
            InteractionKind::SoftmaxToken | InteractionKind::SoftmaxYmean => {
                if !(self.temperature > 0.0) {
                    return Err(InteractionError::InvalidTemperature(self.temperature));
                }
            }
            InteractionKind::Maxsim | InteractionKind::MeanCosine => {}
        }
        Ok(())
    }
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig::softmax_token()
    }
}

/// Full intermediate view of one scored pair.
#[derive(Debug, Clone)]
pub struct SimilarityBreakdown {
    /// Raw token similarities `S = E_q E_y^T`.
    pub raw: Mat,
    /// Normalized token similarities `Ŝ`.
    pub normalized: Mat,
    /// Interaction matrix `A`; row-stochastic for softmax kinds, one-hot
    /// rows for MaxSim, absent for mean-pooled cosine.
    pub interaction: Option<Mat>,
    pub score: f64,
}

fn check_pair(e_q: &Mat, e_y: &Mat) -> Result<(), InteractionError> {
    if e_q.rows() == 0 || e_y.rows() == 0 {
        return Err(InteractionError::EmptyMatrix);
    }
    if e_q.cols() != e_y.cols() {
        return Err(InteractionError::DimensionMismatch {
            query: e_q.cols(),
            target: e_y.cols(),
        });
    }
    Ok(())
}

/// Computes `(S, Ŝ)`. Zero embedding rows yield zero `Ŝ` rows rather than
/// NaN.
pub fn token_similarity(e_q: &Mat, e_y: &Mat) -> Result<(Mat, Mat), InteractionError> {
    check_pair(e_q, e_y)?;
    let raw = e_q.matmul_nt(e_y);
    let normalized = e_q.row_l2_normalized().matmul_nt(&e_y.row_l2_normalized());
    Ok((raw, normalized))
}

/// Row-wise softmax of `s / tau`, stabilized by row-max subtraction.
fn row_softmax(s: &Mat, tau: f64) -> Mat {
    let mut a = Mat::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let row = s.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        {
            let out = a.row_mut(i);
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - max) / tau).exp();
                out[j] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
    }
    a
}

/// Soft late interaction score: mean over query rows of `Σ_j A_ij Ŝ_ij`.
pub fn sim_softmax(e_q: &Mat, e_y: &Mat, tau: f64) -> Result<f64, InteractionError> {
    if !(tau > 0.0) {
        return Err(InteractionError::InvalidTemperature(tau));
    }
    let (raw, normalized) = token_similarity(e_q, e_y)?;
    let a = row_softmax(&raw, tau);
    let mut total = 0.0;
    for i in 0..a.rows() {
        total += dot(a.row(i), normalized.row(i));
    }
    Ok(total / a.rows() as f64)
}

/// MaxSim score: per query row select the argmax of raw `S` (ties go to the
/// lowest column index) and average the selected `Ŝ` entries.
pub fn sim_maxsim(e_q: &Mat, e_y: &Mat) -> Result<f64, InteractionError> {
    let (raw, normalized) = token_similarity(e_q, e_y)?;
    let mut total = 0.0;
    for i in 0..raw.rows() {
        let row = raw.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        total += normalized.get(i, best);
    }
    Ok(total / raw.rows() as f64)
}

/// Cosine similarity of the row-means. A zero mean vector scores 0.
pub fn sim_mean_cosine(e_q: &Mat, e_y: &Mat) -> Result<f64, InteractionError> {
    check_pair(e_q, e_y)?;
    let a = e_q.mean_row();
    let b = e_y.mean_row();
    let na = l2_norm(&a);
    let nb = l2_norm(&b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(&a, &b) / (na * nb))
}

/// Softmax scorer with `E_y` replaced by its single row-mean; with one
/// target row the interaction matrix degenerates to an all-ones column, so
/// the score is the mean cosine between each query token and the pooled
/// target.
pub fn sim_softmax_ymean(e_q: &Mat, e_y: &Mat, tau: f64) -> Result<f64, InteractionError> {
    check_pair(e_q, e_y)?;
    let pooled = Mat::from_rows(&[e_y.mean_row()]);
    sim_softmax(e_q, &pooled, tau)
}

/// Scores one pair with the configured scorer.
pub fn score(
    config: &InteractionConfig,
    e_q: &Mat,
    e_y: &Mat,
) -> Result<f64, InteractionError> {
    config.validate()?;
    match config.kind {
        InteractionKind::SoftmaxToken => sim_softmax(e_q, e_y, config.temperature),
        InteractionKind::Maxsim => sim_maxsim(e_q, e_y),
        InteractionKind::MeanCosine => sim_mean_cosine(e_q, e_y),
        InteractionKind::SoftmaxYmean => sim_softmax_ymean(e_q, e_y, config.temperature),
    }
}

/// Scores one pair and keeps every intermediate matrix.
pub fn breakdown(
    config: &InteractionConfig,
    e_q: &Mat,
    e_y: &Mat,
) -> Result<SimilarityBreakdown, InteractionError> {
    config.validate()?;
    match config.kind {
        InteractionKind::SoftmaxToken => {
            let (raw, normalized) = token_similarity(e_q, e_y)?;
            let a = row_softmax(&raw, config.temperature);
            let mut total = 0.0;
            for i in 0..a.rows() {
                total += dot(a.row(i), normalized.row(i));
            }
            let score = total / a.rows() as f64;
            Ok(SimilarityBreakdown {
                raw,
                normalized,
                interaction: Some(a),
                score,
            })
        }
        InteractionKind::Maxsim => {
            let (raw, normalized) = token_similarity(e_q, e_y)?;
            let mut a = Mat::zeros(raw.rows(), raw.cols());
            let mut total = 0.0;
            for i in 0..raw.rows() {
                let row = raw.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                a.set(i, best, 1.0);
                total += normalized.get(i, best);
            }
            let score = total / raw.rows() as f64;
            Ok(SimilarityBreakdown {
                raw,
                normalized,
                interaction: Some(a),
                score,
            })
        }
        InteractionKind::MeanCosine => {
            let (raw, normalized) = token_similarity(e_q, e_y)?;
            let score = sim_mean_cosine(e_q, e_y)?;
            Ok(SimilarityBreakdown {
                raw,
                normalized,
                interaction: None,
                score,
            })
        }
        InteractionKind::SoftmaxYmean => {
            let pooled = Mat::from_rows(&[e_y.mean_row()]);
            let mut b = breakdown(
                &InteractionConfig::new(InteractionKind::SoftmaxToken, config.temperature),
                e_q,
                &pooled,
            )?;
            // raw/normalized are against the pooled target row
            b.interaction = b.interaction.take();
            Ok(b)
        }
    }
}

// ---------------------------------------------------------------------------
// Backward kernels. Each returns (dE_q, dE_y) for an upstream scalar
// gradient on the score. MaxSim has no gradient path; the loss layer rejects
// it before getting here.
// ---------------------------------------------------------------------------

/// Gradient of row-wise L2 normalization: given `d` on the normalized row
/// `u = x/|x|`, the gradient on `x` is `(d - u (u·d)) / |x|`. Zero rows get
/// zero gradient, matching the zero-row convention of the forward pass.
fn normalize_backward_row(x: &[f64], d_norm: &[f64], d_x: &mut [f64]) {
    let norm = l2_norm(x);
    if norm == 0.0 {
        return;
    }
    let u: Vec<f64> = x.iter().map(|v| v / norm).collect();
    let ud = dot(&u, d_norm);
    for j in 0..x.len() {
        d_x[j] += (d_norm[j] - u[j] * ud) / norm;
    }
}

/// Backward pass of [`sim_softmax`].
pub(crate) fn softmax_backward(
    e_q: &Mat,
    e_y: &Mat,
    tau: f64,
    upstream: f64,
) -> Result<(Mat, Mat), InteractionError> {
    if !(tau > 0.0) {
        return Err(InteractionError::InvalidTemperature(tau));
    }
    check_pair(e_q, e_y)?;
    let n = e_q.rows();
    let m = e_y.rows();
    let h = e_q.cols();

    let raw = e_q.matmul_nt(e_y);
    let q_hat = e_q.row_l2_normalized();
    let y_hat = e_y.row_l2_normalized();
    let s_hat = q_hat.matmul_nt(&y_hat);
    let a = row_softmax(&raw, tau);

    let inv_n = 1.0 / n as f64;
    // dA = upstream * Ŝ / n ; dŜ = upstream * A / n
    // softmax backward per row: dS_ij = A_ij (dA_ij - Σ_k A_ik dA_ik) / τ
    let mut d_raw = Mat::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let sh_row = s_hat.row(i);
        let mut inner = 0.0;
        for j in 0..m {
            inner += a_row[j] * upstream * sh_row[j] * inv_n;
        }
        let out = d_raw.row_mut(i);
        for j in 0..m {
            let da = upstream * sh_row[j] * inv_n;
            out[j] = a_row[j] * (da - inner) / tau;
        }
    }

    let mut d_eq = Mat::zeros(n, h);
    let mut d_ey = Mat::zeros(m, h);
    // raw path: S = E_q E_y^T
    for i in 0..n {
        for j in 0..m {
            let g = d_raw.get(i, j);
            if g == 0.0 {
                continue;
            }
            let yr = e_y.row(j);
            let qr = e_q.row(i);
            let dq = d_eq.row_mut(i);
            for k in 0..h {
                dq[k] += g * yr[k];
            }
            let dy = d_ey.row_mut(j);
            for k in 0..h {
                dy[k] += g * qr[k];
            }
        }
    }
    // normalized path: Ŝ = Ê_q Ê_y^T with dŜ = upstream * A / n
    let mut d_qhat = Mat::zeros(n, h);
    let mut d_yhat = Mat::zeros(m, h);
    for i in 0..n {
        let a_row = a.row(i);
        for j in 0..m {
            let g = upstream * a_row[j] * inv_n;
            let yh = y_hat.row(j);
            let qh = q_hat.row(i);
            let dq = d_qhat.row_mut(i);
            for k in 0..h {
                dq[k] += g * yh[k];
            }
            let dy = d_yhat.row_mut(j);
            for k in 0..h {
                dy[k] += g * qh[k];
            }
        }
    }
    for i in 0..n {
        normalize_backward_row(e_q.row(i), d_qhat.row(i), d_eq.row_mut(i));
    }
    for j in 0..m {
        normalize_backward_row(e_y.row(j), d_yhat.row(j), d_ey.row_mut(j));
    }
    Ok((d_eq, d_ey))
}

fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, d_a: &mut [f64], d_b: &mut [f64]) {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let ab = dot(a, b);
    let denom = na * nb;
    for k in 0..a.len() {
        d_a[k] += upstream * (b[k] / denom - ab * a[k] / (na * na * denom));
        d_b[k] += upstream * (a[k] / denom - ab * b[k] / (nb * nb * denom));
    }
}

/// Backward pass of [`sim_mean_cosine`].
pub(crate) fn mean_cosine_backward(
    e_q: &Mat,
    e_y: &Mat,
    upstream: f64,
) -> Result<(Mat, Mat), InteractionError> {
    check_pair(e_q, e_y)?;
    let a = e_q.mean_row();
    let b = e_y.mean_row();
    let h = e_q.cols();
    let mut d_a = vec![0.0; h];
    let mut d_b = vec![0.0; h];
    cosine_backward(&a, &b, upstream, &mut d_a, &mut d_b);

    let mut d_eq = Mat::zeros(e_q.rows(), h);
    let inv_n = 1.0 / e_q.rows() as f64;
    for i in 0..e_q.rows() {
        let row = d_eq.row_mut(i);
        for k in 0..h {
            row[k] = d_a[k] * inv_n;
        }
    }
    let mut d_ey = Mat::zeros(e_y.rows(), h);
    let inv_m = 1.0 / e_y.rows() as f64;
    for j in 0..e_y.rows() {
        let row = d_ey.row_mut(j);
        for k in 0..h {
            row[k] = d_b[k] * inv_m;
        }
    }
    Ok((d_eq, d_ey))
}

/// Backward pass of [`sim_softmax_ymean`]: softmax backward against the
/// pooled target row, with the pooled gradient spread back over the target
/// rows.
pub(crate) fn softmax_ymean_backward(
    e_q: &Mat,
    e_y: &Mat,
    tau: f64,
    upstream: f64,
) -> Result<(Mat, Mat), InteractionError> {
    check_pair(e_q, e_y)?;
    let pooled = Mat::from_rows(&[e_y.mean_row()]);
    let (d_eq, d_pooled) = softmax_backward(e_q, &pooled, tau, upstream)?;
    let h = e_y.cols();
    let inv_m = 1.0 / e_y.rows() as f64;
    let mut d_ey = Mat::zeros(e_y.rows(), h);
    for j in 0..e_y.rows() {
        let row = d_ey.row_mut(j);
        for k in 0..h {
            row[k] = d_pooled.get(0, k) * inv_m;
        }
    }
    Ok((d_eq, d_ey))
}

/// Dispatches the backward kernel for a differentiable scorer.
pub(crate) fn score_backward(
    config: &InteractionConfig,
    e_q: &Mat,
    e_y: &Mat,
    upstream: f64,
) -> Result<(Mat, Mat), InteractionError> {
    match config.kind {
        InteractionKind::SoftmaxToken => softmax_backward(e_q, e_y, config.temperature, upstream),
        InteractionKind::MeanCosine => mean_cosine_backward(e_q, e_y, upstream),
        InteractionKind::SoftmaxYmean => {
            softmax_ymean_backward(e_q, e_y, config.temperature, upstream)
        }
        InteractionKind::Maxsim => unreachable!("rejected by the loss layer"),
    }
}
