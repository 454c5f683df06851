//! The contrastive loss family over bipartite in-batch graphs, and exact
//! analytic gradients of every loss with respect to the encoder parameters.
//!
//! Four losses share one batch representation:
//!
//! - `infonce`: standard one-positive-per-row InfoNCE with diagonal pairs;
//! - `mtm_asymmetric`: node-wise averaging over each query's full positive
//!   set, with the averaging outside the log;
//! - `mtm_symmetric`: the asymmetric loss applied in both directions, the
//!   second on the transposed matrix with transposed edges;
//! - `mtm_pairwise`: every edge treated as an independent pair with the two
//!   directional InfoNCE terms, ignoring positive-set structure.
//!
//! The weighted sum of symmetric losses over the job / vacancy-sentence /
//! alternative graphs is the training objective (`mtm_total`).
//!
//! All log-sum-exp computations subtract the row maximum first. Losses and
//! gradients are evaluated in a fixed order so results are bitwise
//! reproducible for a fixed batch.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderParams, GradientStore, TokenSequence};
use crate::interaction::{self, InteractionConfig, InteractionKind};
use crate::mat::Mat;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("expected a square matrix with diagonal positives, got {rows}×{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("loss temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("{side} node {index} has no positive edge")]
    MissingPositive { side: &'static str, index: usize },
    #[error("positive edge ({q}, {y}) is out of range for a {rows}×{cols} batch")]
    EdgeOutOfRange {
        q: usize,
        y: usize,
        rows: usize,
        cols: usize,
    },
    #[error("empty edge set")]
    EmptyEdges,
    #[error("batch contains a non-finite similarity")]
    NonFiniteScores,
    #[error("all loss weights are zero")]
    AllWeightsZero,
    #[error("loss weights must be non-negative")]
    NegativeWeight,
    #[error("scorer {0} is not differentiable and cannot be trained through")]
    NonDifferentiableScorer(&'static str),
    #[error("non-finite gradient in parameter block: {block}")]
    NonFiniteGradient { block: &'static str },
    #[error(transparent)]
    Interaction(#[from] interaction::InteractionError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
}

/// Pairwise scores for one in-batch bipartite graph, the unit every loss
/// consumes.
#[derive(Debug, Clone)]
pub struct BatchSimilarityMatrix {
    values: Mat,
    tau: f64,
    /// Deduplicated positive edges `(query row, target column)`.
    positives: Vec<(usize, usize)>,
}

impl BatchSimilarityMatrix {
    pub fn new(
        values: Mat,
        tau: f64,
        positives: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, LossError> {
        if !(tau > 0.0) {
            return Err(LossError::InvalidTemperature(tau));
        }
        if !values.is_finite() {
            return Err(LossError::NonFiniteScores);
        }
        let mut seen = std::collections::HashSet::new();
        let mut deduped = Vec::new();
        for (q, y) in positives {
            if q >= values.rows() || y >= values.cols() {
                return Err(LossError::EdgeOutOfRange {
                    q,
                    y,
                    rows: values.rows(),
                    cols: values.cols(),
                });
            }
            if seen.insert((q, y)) {
                deduped.push((q, y));
            }
        }
        Ok(BatchSimilarityMatrix {
            values,
            tau,
            positives: deduped,
        })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn positives(&self) -> &[(usize, usize)] {
        &self.positives
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    /// The same batch seen from the target side.
    pub fn transposed(&self) -> Self {
        BatchSimilarityMatrix {
            values: self.values.transposed(),
            tau: self.tau,
            positives: self.positives.iter().map(|&(q, y)| (y, q)).collect(),
        }
    }

    fn positives_per_row(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.values.rows()];
        for &(q, y) in &self.positives {
            rows[q].push(y);
        }
        rows
    }
}

fn log_sum_exp(scaled: &[f64]) -> f64 {
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn row_softmax_scaled(values: &Mat, tau: f64) -> Mat {
    let mut p = Mat::zeros(values.rows(), values.cols());
    for i in 0..values.rows() {
        let row = values.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let out = p.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - max) / tau).exp();
            out[j] = e;
            sum += e;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Standard InfoNCE over a square batch with diagonal positives: the mean
/// over rows of the negative log-probability of the diagonal entry.
pub fn infonce(batch: &BatchSimilarityMatrix) -> Result<f64, LossError> {
    let (loss, _) = infonce_with_dscores(batch)?;
    Ok(loss)
}

fn infonce_with_dscores(batch: &BatchSimilarityMatrix) -> Result<(f64, Mat), LossError> {
    let n = batch.rows();
    if n != batch.cols() {
        return Err(LossError::NonSquare {
            rows: batch.rows(),
            cols: batch.cols(),
        });
    }
    let tau = batch.tau();
    let mut loss = 0.0;
    let p = row_softmax_scaled(batch.values(), tau);
    let mut d = Mat::zeros(n, n);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = batch.values().row(i);
        let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
        loss += -scaled[i] + log_sum_exp(&scaled);
        let dst = d.row_mut(i);
        for j in 0..n {
            let indicator = if i == j { 1.0 } else { 0.0 };
            dst[j] = inv_n * (p.get(i, j) - indicator) / tau;
        }
    }
    Ok((loss * inv_n, d))
}

/// One-to-many loss over the query side: for each query, the mean over its
/// positives of the negative log-probability against all in-batch targets,
/// then the mean over queries. The averaging sits outside the log.
pub fn mtm_asymmetric(batch: &BatchSimilarityMatrix) -> Result<f64, LossError> {
    let (loss, _) = asymmetric_with_dscores(batch)?;
    Ok(loss)
}

fn asymmetric_with_dscores(batch: &BatchSimilarityMatrix) -> Result<(f64, Mat), LossError> {
    let n_q = batch.rows();
    let tau = batch.tau();
    let per_row = batch.positives_per_row();
    for (i, pos) in per_row.iter().enumerate() {
        if pos.is_empty() {
            return Err(LossError::MissingPositive {
                side: "query",
                index: i,
            });
        }
    }
    let p = row_softmax_scaled(batch.values(), tau);
    let mut loss = 0.0;
    let mut d = Mat::zeros(n_q, batch.cols());
    let inv_q = 1.0 / n_q as f64;
    for (i, pos) in per_row.iter().enumerate() {
        let row = batch.values().row(i);
        let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
        let lse = log_sum_exp(&scaled);
        let inv_pos = 1.0 / pos.len() as f64;
        let mut term = 0.0;
        for &y in pos {
            term += -scaled[y] + lse;
        }
        loss += term * inv_pos;
        let dst = d.row_mut(i);
        for j in 0..batch.cols() {
            dst[j] = inv_q * p.get(i, j) / tau;
        }
        for &y in pos {
            dst[y] -= inv_q * inv_pos / tau;
        }
    }
    Ok((loss * inv_q, d))
}

/// Symmetric many-to-many loss: the asymmetric loss plus the asymmetric
/// loss of the transposed matrix with transposed edges.
pub fn mtm_symmetric(batch: &BatchSimilarityMatrix) -> Result<f64, LossError> {
    let (loss, _) = symmetric_with_dscores(batch)?;
    Ok(loss)
}

fn symmetric_with_dscores(batch: &BatchSimilarityMatrix) -> Result<(f64, Mat), LossError> {
    let (forward, d_forward) = asymmetric_with_dscores(batch).map_err(promote_query_error)?;
    let transposed = batch.transposed();
    let (backward, d_backward) = asymmetric_with_dscores(&transposed).map_err(|e| match e {
        LossError::MissingPositive { index, .. } => LossError::MissingPositive {
            side: "target",
            index,
        },
        other => other,
    })?;
    let mut d = d_forward;
    let d_b = d_backward.transposed();
    for (dst, src) in d.as_mut_slice().iter_mut().zip(d_b.as_slice()) {
        *dst += src;
    }
    Ok((forward + backward, d))
}

fn promote_query_error(e: LossError) -> LossError {
    e
}

/// Pairwise variant: the mean over edges of the two directional InfoNCE
/// terms, with in-batch negatives from the same graph. Other positives of a
/// node act as negatives for each edge; the positive-set structure is
/// deliberately ignored.
pub fn mtm_pairwise(batch: &BatchSimilarityMatrix) -> Result<f64, LossError> {
    let (loss, _) = pairwise_with_dscores(batch)?;
    Ok(loss)
}

fn pairwise_with_dscores(batch: &BatchSimilarityMatrix) -> Result<(f64, Mat), LossError> {
    if batch.positives().is_empty() {
        return Err(LossError::EmptyEdges);
    }
    let tau = batch.tau();
    let values = batch.values();
    let n_q = batch.rows();
    let n_y = batch.cols();
    let p_row = row_softmax_scaled(values, tau);
    let transposed = values.transposed();
    let p_col = row_softmax_scaled(&transposed, tau).transposed();

    let row_lse: Vec<f64> = (0..n_q)
        .map(|i| {
            let scaled: Vec<f64> = values.row(i).iter().map(|v| v / tau).collect();
            log_sum_exp(&scaled)
        })
        .collect();
    let col_lse: Vec<f64> = (0..n_y)
        .map(|j| {
            let scaled: Vec<f64> = (0..n_q).map(|i| values.get(i, j) / tau).collect();
            log_sum_exp(&scaled)
        })
        .collect();

    let mut deg_row = vec![0usize; n_q];
    let mut deg_col = vec![0usize; n_y];
    for &(q, y) in batch.positives() {
        deg_row[q] += 1;
        deg_col[y] += 1;
    }

    let inv_e = 1.0 / batch.positives().len() as f64;
    let mut loss = 0.0;
    for &(q, y) in batch.positives() {
        let s = values.get(q, y) / tau;
        loss += (-s + row_lse[q]) + (-s + col_lse[y]);
    }
    loss *= inv_e;

    let mut d = Mat::zeros(n_q, n_y);
    for i in 0..n_q {
        for j in 0..n_y {
            let mut g = deg_row[i] as f64 * p_row.get(i, j) + deg_col[j] as f64 * p_col.get(i, j);
            if batch.positives().iter().any(|&(q, y)| q == i && y == j) {
                g -= 2.0;
            }
            d.set(i, j, inv_e * g / tau);
        }
    }
    Ok((loss, d))
}

/// Importance weights for the three skill-centric graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub jobs: f64,
    pub vacancies: f64,
    pub alternatives: f64,
}

impl LossWeights {
    pub fn new(jobs: f64, vacancies: f64, alternatives: f64) -> Self {
        LossWeights {
            jobs,
            vacancies,
            alternatives,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.jobs, self.vacancies, self.alternatives];
        if all.iter().any(|w| *w < 0.0) {
            return Err(LossError::NegativeWeight);
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(LossError::AllWeightsZero);
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.jobs, self.vacancies, self.alternatives]
    }
}

impl Default for LossWeights {
    /// Tuned defaults: jobs 1.0, vacancy sentences 0.5, alternatives 0.5.
    fn default() -> Self {
        LossWeights::new(1.0, 0.5, 0.5)
    }
}

/// Weighted sum of symmetric losses over up to three graphs. Zero-weight
/// graphs are skipped entirely, so they may be absent or degenerate.
pub fn mtm_total(
    graphs: &[(Option<&BatchSimilarityMatrix>, f64)],
) -> Result<f64, LossError> {
    if graphs.iter().any(|(_, w)| *w < 0.0) {
        return Err(LossError::NegativeWeight);
    }
    if graphs.iter().all(|(_, w)| *w == 0.0) {
        return Err(LossError::AllWeightsZero);
    }
    let mut total = 0.0;
    for (batch, weight) in graphs {
        if *weight == 0.0 {
            continue;
        }
        let batch = batch.ok_or(LossError::EmptyEdges)?;
        total += weight * mtm_symmetric(batch)?;
    }
    Ok(total)
}

/// Which loss to drive the pipeline with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Infonce,
    MtmAsymmetric,
    MtmSymmetric,
    MtmPairwise,
}

/// Computes a loss and its gradient with respect to the score matrix.
pub fn loss_with_dscores(
    kind: LossKind,
    batch: &BatchSimilarityMatrix,
) -> Result<(f64, Mat), LossError> {
    match kind {
        LossKind::Infonce => infonce_with_dscores(batch),
        LossKind::MtmAsymmetric => asymmetric_with_dscores(batch),
        LossKind::MtmSymmetric => symmetric_with_dscores(batch),
        LossKind::MtmPairwise => pairwise_with_dscores(batch),
    }
}

/// One bipartite graph's worth of batch inputs for the training pipeline.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub queries: Vec<TokenSequence>,
    pub targets: Vec<TokenSequence>,
    pub edges: Vec<(usize, usize)>,
    pub tau: f64,
    pub weight: f64,
}

fn encode_all(
    params: &EncoderParams,
    sequences: &[TokenSequence],
) -> Result<Vec<Mat>, LossError> {
    sequences
        .iter()
        .map(|t| encoder::encode(params, t).map_err(LossError::from))
        .collect()
}

fn batch_scores(
    config: &InteractionConfig,
    e_q: &[Mat],
    e_y: &[Mat],
    tau: f64,
    edges: &[(usize, usize)],
) -> Result<BatchSimilarityMatrix, LossError> {
    let mut values = Mat::zeros(e_q.len(), e_y.len());
    for (i, q) in e_q.iter().enumerate() {
        for (j, y) in e_y.iter().enumerate() {
            values.set(i, j, interaction::score(config, q, y)?);
        }
    }
    BatchSimilarityMatrix::new(values, tau, edges.iter().copied())
}

/// Total loss of the composed pipeline encode → score → loss over the given
/// graphs, each weighted. Used directly by finite-difference oracles.
pub fn pipeline_loss(
    params: &EncoderParams,
    graphs: &[GraphBatch],
    config: &InteractionConfig,
    kind: LossKind,
) -> Result<f64, LossError> {
    let mut total = 0.0;
    for graph in graphs {
        if graph.weight == 0.0 {
            continue;
        }
        let e_q = encode_all(params, &graph.queries)?;
        let e_y = encode_all(params, &graph.targets)?;
        let batch = batch_scores(config, &e_q, &e_y, graph.tau, &graph.edges)?;
        let (loss, _) = loss_with_dscores(kind, &batch)?;
        total += graph.weight * loss;
    }
    Ok(total)
}

/// Exact analytic gradients of the composed pipeline with respect to every
/// encoder parameter, together with the loss value.
///
/// The weighted multi-graph objective is this function with
/// `LossKind::MtmSymmetric` and one [`GraphBatch`] per enabled graph.
pub fn pipeline_gradients(
    params: &EncoderParams,
    graphs: &[GraphBatch],
    config: &InteractionConfig,
    kind: LossKind,
) -> Result<(f64, GradientStore), LossError> {
    if config.kind == InteractionKind::Maxsim {
        return Err(LossError::NonDifferentiableScorer("maxsim"));
    }
    let mut grads = GradientStore::zeros_like(params);
    let mut total = 0.0;
    for graph in graphs {
        if graph.weight == 0.0 {
            continue;
        }
        let e_q = encode_all(params, &graph.queries)?;
        let e_y = encode_all(params, &graph.targets)?;
        let batch = batch_scores(config, &e_q, &e_y, graph.tau, &graph.edges)?;
        let (loss, dscores) = loss_with_dscores(kind, &batch)?;
        total += graph.weight * loss;

        for (i, q_emb) in e_q.iter().enumerate() {
            for (j, y_emb) in e_y.iter().enumerate() {
                let upstream = graph.weight * dscores.get(i, j);
                if upstream == 0.0 {
                    continue;
                }
                let (d_eq, d_ey) = interaction::score_backward(config, q_emb, y_emb, upstream)?;
                encoder::encode_backward(params, &graph.queries[i], &d_eq, &mut grads);
                encoder::encode_backward(params, &graph.targets[j], &d_ey, &mut grads);
            }
        }
    }
    if let Some(block) = grads.first_non_finite_block() {
        return Err(LossError::NonFiniteGradient { block });
    }
    Ok((total, grads))
}
