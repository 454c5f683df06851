//! Target-space embedding cache and the query-time ranking path.
//!
//! A [`TargetCache`] holds one token embedding matrix per target, built
//! either by the reference encoder or imported from a file of externally
//! produced embeddings. Ranking a query takes a single encoder pass for the
//! query and scores it against the cached targets, so query latency is
//! independent of how the target embeddings were produced.
//!
//! Cache entries are quantized to f32 at build time — the file format's
//! precision — so a cache survives serialization bit-exactly and the cached
//! scoring path is identical before and after a round trip.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::corpus::{TaskSpec, TextSpace};
use crate::encoder::{self, EncoderParams};
use crate::interaction::{
    self, sim_maxsim, InteractionConfig, InteractionKind,
};
use crate::mat::{dot, Mat};
use crate::wire::{self, WireError};

/// Cache file magic.
pub const CACHE_MAGIC: &[u8; 4] = b"UWEC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RankerError {
    #[error("cache dimension {cache} does not match encoder dimension {encoder}")]
    DimMismatch { cache: usize, encoder: usize },
    #[error("unknown query id {0:?}")]
    UnknownQueryId(String),
    #[error("no cache available for target space {0:?}")]
    MissingCache(String),
    #[error("bad cache file {path}: {reason}")]
    BadCacheFile { path: PathBuf, reason: String },
    #[error("duplicate target id {0:?} in cache")]
    DuplicateTargetId(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Interaction(#[from] interaction::InteractionError),
}

/// One cached target: its id, raw token embeddings, and precomputed
/// derived forms used by the scorers.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub id: String,
    /// Raw (non-normalized) token embeddings at f32 precision.
    pub embeddings: Mat,
    normalized: Mat,
    mean: Vec<f64>,
}

impl CacheEntry {
    fn new(id: String, embeddings: Mat) -> Self {
        let normalized = embeddings.row_l2_normalized();
        let mean = embeddings.mean_row();
        CacheEntry {
            id,
            embeddings,
            normalized,
            mean,
        }
    }
}

/// Persisted token embeddings for an entire target space.
#[derive(Debug, Clone)]
pub struct TargetCache {
    pub space_name: String,
    pub dim: usize,
    entries: Vec<CacheEntry>,
}

impl TargetCache {
    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn quantize_f32(m: &Mat) -> Mat {
    Mat::from_vec(
        m.rows(),
        m.cols(),
        m.as_slice().iter().map(|&v| f64::from(v as f32)).collect(),
    )
}

/// Encodes every target text and stores the matrices, entry order equal to
/// space order. Deterministic in `(params, space)`.
pub fn build_cache(
    params: &EncoderParams,
    space: &TextSpace,
    max_tokens: Option<usize>,
) -> Result<TargetCache, RankerError> {
    let mut entries = Vec::with_capacity(space.len());
    for item in space.items() {
        let tokens = params.tokenize(&item.text, max_tokens);
        let emb = encoder::encode(params, &tokens)?;
        entries.push(CacheEntry::new(item.id.clone(), quantize_f32(&emb)));
    }
    Ok(TargetCache {
        space_name: space.name.clone(),
        dim: params.dim,
        entries,
    })
}

/// Builds a cache from externally produced `(id, token embedding matrix)`
/// pairs, e.g. exported by a pretrained backbone. The matrices pass through
/// the same f32 quantization the file format applies.
pub fn cache_from_embeddings(
    space_name: impl Into<String>,
    dim: usize,
    entries: impl IntoIterator<Item = (String, Mat)>,
) -> Result<TargetCache, RankerError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (id, emb) in entries {
        if emb.cols() != dim {
            return Err(RankerError::DimMismatch {
                cache: emb.cols(),
                encoder: dim,
            });
        }
        if !seen.insert(id.clone()) {
            return Err(RankerError::DuplicateTargetId(id));
        }
        out.push(CacheEntry::new(id, quantize_f32(&emb)));
    }
    Ok(TargetCache {
        space_name: space_name.into(),
        dim,
        entries: out,
    })
}

/// Serializes: magic, version, entry count, dim; per entry the id
/// (u16 byte length + UTF-8), token count, then row-major f32 LE values.
pub fn save_cache(cache: &TargetCache, path: impl AsRef<Path>) -> Result<(), RankerError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    wire::put_u32(&mut buf, CACHE_VERSION);
    wire::put_u32(&mut buf, cache.entries.len() as u32);
    wire::put_u32(&mut buf, cache.dim as u32);
    for entry in &cache.entries {
        let id_bytes = entry.id.as_bytes();
        wire::put_u16(&mut buf, id_bytes.len() as u16);
        buf.extend_from_slice(id_bytes);
        wire::put_u32(&mut buf, entry.embeddings.rows() as u32);
        wire::put_f32_slice(&mut buf, entry.embeddings.as_slice());
    }
    fs::write(path, buf).map_err(|source| RankerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a cache file; matrices round-trip bit-exactly against
/// [`save_cache`]. The space name is not stored in the file and defaults to
/// the file stem.
pub fn load_cache(path: impl AsRef<Path>) -> Result<TargetCache, RankerError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| RankerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rd = wire::Reader::new(&bytes);
    let run = |rd: &mut wire::Reader| -> Result<(usize, Vec<CacheEntry>), WireError> {
        rd.expect_magic(CACHE_MAGIC)?;
        let version = rd.u32()?;
        if version != CACHE_VERSION {
            return Err(WireError::Version(version));
        }
        let count = rd.u32()? as usize;
        let dim = rd.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = rd.u16()? as usize;
            let id = rd.string(id_len)?;
            let rows = rd.u32()? as usize;
            let data = rd.f32_vec(rows * dim)?;
            entries.push(CacheEntry::new(id, Mat::from_vec(rows, dim, data)));
        }
        rd.expect_end()?;
        Ok((dim, entries))
    };
    let (dim, entries) = run(&mut rd).map_err(|e| RankerError::BadCacheFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.clone()) {
            return Err(RankerError::DuplicateTargetId(e.id.clone()));
        }
    }
    Ok(TargetCache {
        space_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cache".into()),
        dim,
        entries,
    })
}

/// Score rows and the ranking permutation for one query.
#[derive(Debug, Clone)]
pub struct RankedOutput {
    pub query_id: String,
    /// One score per target in target-space order; an excluded self target
    /// carries `f64::NEG_INFINITY` and ranks last.
    pub scores: Vec<f64>,
    /// Target indices by descending score; ties order by ascending target id.
    pub ranking: Vec<usize>,
}

impl RankedOutput {
    /// Builds the ranking permutation from scores, applying the tie rule.
    pub fn from_scores(query_id: String, scores: Vec<f64>, target_ids: &[String]) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| target_ids[a].cmp(&target_ids[b]))
        });
        RankedOutput {
            query_id,
            scores,
            ranking,
        }
    }

    /// Target ids in rank order.
    pub fn ranked_ids<'a>(&self, target_ids: &'a [String]) -> Vec<&'a str> {
        self.ranking.iter().map(|&i| target_ids[i].as_str()).collect()
    }
}

/// Scores a query embedding against a prepared cache entry, reusing the
/// entry's precomputed normalized rows and mean vector.
fn score_against_entry(
    config: &InteractionConfig,
    e_q: &Mat,
    entry: &CacheEntry,
) -> Result<f64, RankerError> {
    match config.kind {
        InteractionKind::SoftmaxToken => {
            let tau = config.temperature;
            if !(tau > 0.0) {
                return Err(interaction::InteractionError::InvalidTemperature(tau).into());
            }
            let q_hat = e_q.row_l2_normalized();
            let mut total = 0.0;
            for i in 0..e_q.rows() {
                let q_row = e_q.row(i);
                let qh_row = q_hat.row(i);
                // raw similarities drive the softmax, normalized ones are read
                let raw: Vec<f64> =
                    (0..entry.embeddings.rows())
                        .map(|j| dot(q_row, entry.embeddings.row(j)))
                        .collect();
                let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                let mut acc = 0.0;
                for (j, &s) in raw.iter().enumerate() {
                    let w = ((s - max) / tau).exp();
                    denom += w;
                    acc += w * dot(qh_row, entry.normalized.row(j));
                }
                total += acc / denom;
            }
            Ok(total / e_q.rows() as f64)
        }
        InteractionKind::Maxsim => Ok(sim_maxsim(e_q, &entry.embeddings)?),
        InteractionKind::MeanCosine => {
            let q_mean = e_q.mean_row();
            let na = crate::mat::l2_norm(&q_mean);
            let nb = crate::mat::l2_norm(&entry.mean);
            if na == 0.0 || nb == 0.0 {
                return Ok(0.0);
            }
            Ok(dot(&q_mean, &entry.mean) / (na * nb))
        }
        InteractionKind::SoftmaxYmean => {
            let pooled = Mat::from_rows(&[entry.mean.clone()]);
            Ok(interaction::sim_softmax_ymean(e_q, &pooled, config.temperature)?)
        }
    }
}

/// Scores the same pair without any precomputation, straight from raw
/// matrices. The cached path must agree with this to within 1e-6.
pub fn score_direct(
    config: &InteractionConfig,
    e_q: &Mat,
    e_y: &Mat,
) -> Result<f64, RankerError> {
    Ok(interaction::score(config, e_q, e_y)?)
}

/// Ranks one query text against the cache: one encoder pass for the query,
/// then one score per cached target. With `exclude_self`, the target whose
/// id equals `query_id` is masked to the sentinel score and ranks last.
pub fn rank_query(
    query_id: &str,
    query_text: &str,
    params: &EncoderParams,
    cache: &TargetCache,
    config: &InteractionConfig,
    exclude_self: bool,
) -> Result<RankedOutput, RankerError> {
    if cache.dim != params.dim {
        return Err(RankerError::DimMismatch {
            cache: cache.dim,
            encoder: params.dim,
        });
    }
    let tokens = params.tokenize(query_text, None);
    let e_q = encoder::encode(params, &tokens)?;
    rank_embedding(query_id, &e_q, cache, config, exclude_self)
}

/// Ranks an already-encoded query against the cache.
pub fn rank_embedding(
    query_id: &str,
    e_q: &Mat,
    cache: &TargetCache,
    config: &InteractionConfig,
    exclude_self: bool,
) -> Result<RankedOutput, RankerError> {
    let mut scores = Vec::with_capacity(cache.len());
    for entry in cache.entries() {
        if exclude_self && entry.id == query_id {
            scores.push(f64::NEG_INFINITY);
        } else {
            scores.push(score_against_entry(config, e_q, entry)?);
        }
    }
    let target_ids: Vec<String> = cache.entries().iter().map(|e| e.id.clone()).collect();
    Ok(RankedOutput::from_scores(
        query_id.to_string(),
        scores,
        &target_ids,
    ))
}

/// The full ranking matrix of a task plus instrumentation.
#[derive(Debug, Clone)]
pub struct RankingMatrix {
    pub task: String,
    pub target_ids: Vec<String>,
    pub outputs: Vec<RankedOutput>,
    /// Query-side encoder passes performed; exactly one per query.
    pub query_encodes: u64,
}

impl RankingMatrix {
    pub fn output_for(&self, query_id: &str) -> Option<&RankedOutput> {
        self.outputs.iter().find(|o| o.query_id == query_id)
    }
}

/// Ranks every query of a task against the cached target space. When
/// `exclude_self` is requested by the task and a query id is absent from
/// the target space, the exclusion is simply a no-op for that query.
pub fn rank_task(
    task: &TaskSpec,
    params: &EncoderParams,
    cache: &TargetCache,
    config: &InteractionConfig,
) -> Result<RankingMatrix, RankerError> {
    if cache.dim != params.dim {
        return Err(RankerError::DimMismatch {
            cache: cache.dim,
            encoder: params.dim,
        });
    }
    let mut outputs = Vec::with_capacity(task.query_space.len());
    let mut query_encodes = 0u64;
    for item in task.query_space.items() {
        let tokens = params.tokenize(&item.text, None);
        let e_q = encoder::encode(params, &tokens)?;
        query_encodes += 1;
        outputs.push(rank_embedding(
            &item.id,
            &e_q,
            cache,
            config,
            task.exclude_self,
        )?);
    }
    Ok(RankingMatrix {
        task: task.name.clone(),
        target_ids: cache.entries().iter().map(|e| e.id.clone()).collect(),
        outputs,
        query_encodes,
    })
}

/// Builds the cache for a task's target space unless one is supplied.
pub fn cache_for_task(
    task: &TaskSpec,
    params: &EncoderParams,
    prebuilt: Option<Arc<TargetCache>>,
) -> Result<Arc<TargetCache>, RankerError> {
    match prebuilt {
        Some(c) => {
            if c.dim != params.dim {
                return Err(RankerError::DimMismatch {
                    cache: c.dim,
                    encoder: params.dim,
                });
            }
            Ok(c)
        }
        None => Ok(Arc::new(build_cache(params, &task.target_space, None)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelType, Qrels, SpaceRole, TextItem, TextSpace};
    use crate::encoder::init_params;

    fn space(items: &[(&str, &str)]) -> Arc<TextSpace> {
        Arc::new(
            TextSpace::new(
                "targets",
                SpaceRole::Generic,
                items
                    .iter()
                    .map(|(id, text)| TextItem {
                        id: id.to_string(),
                        text: text.to_string(),
                    })
                    .collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn single_target_cache_and_ranking() {
        let params = init_params(1, 256, 8, false).unwrap();
        let sp = space(&[("t1", "welding metal parts")]);
        let cache = build_cache(&params, &sp, None).unwrap();
        assert_eq!(cache.len(), 1);
        let out = rank_query(
            "q",
            "welding",
            &params,
            &cache,
            &InteractionConfig::softmax_token(),
            false,
        )
        .unwrap();
        assert_eq!(out.ranking, vec![0]);
    }

    #[test]
    fn cache_file_round_trips_bitwise() {
        let params = init_params(2, 256, 8, false).unwrap();
        let sp = space(&[("a", "alpha beta"), ("b", "gamma"), ("c", "delta epsilon zeta")]);
        let cache = build_cache(&params, &sp, None).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_cache(&cache, f.path()).unwrap();
        let loaded = load_cache(f.path()).unwrap();
        assert_eq!(loaded.dim, cache.dim);
        assert_eq!(loaded.len(), cache.len());
        for (a, b) in cache.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.embeddings, b.embeddings); // bitwise, thanks to build-time quantization
        }
        // and the bytes themselves are stable
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_cache(&loaded, f2.path()).unwrap();
        assert_eq!(fs::read(f.path()).unwrap(), fs::read(f2.path()).unwrap());
    }

    #[test]
    fn imported_embeddings_score_like_encoder_built_cache() {
        let params = init_params(3, 256, 8, false).unwrap();
        let sp = space(&[("a", "alpha beta"), ("b", "gamma delta")]);
        let built = build_cache(&params, &sp, None).unwrap();
        // export the same matrices through the external-import path
        let imported = cache_from_embeddings(
            "imported",
            8,
            built
                .entries()
                .iter()
                .map(|e| (e.id.clone(), e.embeddings.clone())),
        )
        .unwrap();
        let cfg = InteractionConfig::softmax_token();
        let out_a = rank_query("q", "alpha gamma", &params, &built, &cfg, false).unwrap();
        let out_b = rank_query("q", "alpha gamma", &params, &imported, &cfg, false).unwrap();
        assert_eq!(out_a.scores, out_b.scores);
        assert_eq!(out_a.ranking, out_b.ranking);
    }

    #[test]
    fn cached_scores_match_direct_scores() {
        let params = init_params(4, 512, 12, true).unwrap();
        let texts: Vec<(String, String)> = (0..30)
            .map(|i| (format!("t{i:02}"), format!("target text number {i} with words")))
            .collect();
        let refs: Vec<(&str, &str)> = texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let sp = space(&refs);
        let cache = build_cache(&params, &sp, None).unwrap();
        let configs = [
            InteractionConfig::new(InteractionKind::SoftmaxToken, 0.5),
            InteractionConfig::new(InteractionKind::Maxsim, 0.5),
            InteractionConfig::new(InteractionKind::MeanCosine, 0.5),
            InteractionConfig::new(InteractionKind::SoftmaxYmean, 0.5),
        ];
        let q_tokens = params.tokenize("some query text here", None);
        let e_q = encoder::encode(&params, &q_tokens).unwrap();
        for cfg in &configs {
            let ranked = rank_embedding("q", &e_q, &cache, cfg, false).unwrap();
            for (j, item) in sp.items().iter().enumerate() {
                let t_tokens = params.tokenize(&item.text, None);
                let e_y = encoder::encode(&params, &t_tokens).unwrap();
                let direct = score_direct(cfg, &e_q, &e_y).unwrap();
                assert!(
                    (ranked.scores[j] - direct).abs() < 1e-6,
                    "{:?}: cached {} vs direct {}",
                    cfg.kind,
                    ranked.scores[j],
                    direct
                );
            }
        }
    }

    #[test]
    fn hand_scored_ranking_order() {
        // three targets with known mean-cosine scores 0.9-ish, low, mid
        let e_q = Mat::from_rows(&[vec![1.0, 0.0]]);
        let entries = vec![
            ("a".to_string(), Mat::from_rows(&[vec![0.9, 0.1]])),
            ("b".to_string(), Mat::from_rows(&[vec![0.1, 0.9]])),
            ("c".to_string(), Mat::from_rows(&[vec![0.5, 0.5]])),
        ];
        let cache = cache_from_embeddings("t", 2, entries).unwrap();
        let cfg = InteractionConfig::new(InteractionKind::MeanCosine, 0.5);
        let out = rank_embedding("q", &e_q, &cache, &cfg, false).unwrap();
        assert_eq!(out.ranking, vec![0, 2, 1]);
    }

    #[test]
    fn exclude_self_ranks_last_with_sentinel() {
        let params = init_params(5, 256, 8, false).unwrap();
        let sp = space(&[("q1", "query text"), ("t2", "other text")]);
        let cache = build_cache(&params, &sp, None).unwrap();
        let out = rank_query(
            "q1",
            "query text",
            &params,
            &cache,
            &InteractionConfig::softmax_token(),
            true,
        )
        .unwrap();
        assert_eq!(out.scores[0], f64::NEG_INFINITY);
        assert_eq!(*out.ranking.last().unwrap(), 0);
    }

    #[test]
    fn equal_scores_order_by_ascending_target_id() {
        let e_q = Mat::from_rows(&[vec![1.0, 0.0]]);
        // all three targets identical, so all scores tie
        let entries = vec![
            ("zz".to_string(), Mat::from_rows(&[vec![1.0, 0.0]])),
            ("aa".to_string(), Mat::from_rows(&[vec![1.0, 0.0]])),
            ("mm".to_string(), Mat::from_rows(&[vec![1.0, 0.0]])),
        ];
        let cache = cache_from_embeddings("t", 2, entries).unwrap();
        let cfg = InteractionConfig::new(InteractionKind::MeanCosine, 0.5);
        let out = rank_embedding("q", &e_q, &cache, &cfg, false).unwrap();
        // indices of "aa", "mm", "zz"
        assert_eq!(out.ranking, vec![1, 2, 0]);
    }

    #[test]
    fn rank_task_counts_one_encode_per_query_and_matches_per_query_calls() {
        let params = init_params(6, 256, 8, false).unwrap();
        let queries = space(&[("q1", "first query"), ("q2", "second query")]);
        let targets = space(&[("t1", "one"), ("t2", "two"), ("t3", "three")]);
        let mut qrels = Qrels::new();
        qrels.add("q1", "t1");
        qrels.add("q2", "t2");
        let task = TaskSpec::new(
            "toy",
            queries,
            targets.clone(),
            qrels,
            LabelType::One,
            false,
            "toy",
        )
        .unwrap();
        let cache = build_cache(&params, &targets, None).unwrap();
        let cfg = InteractionConfig::softmax_token();
        let matrix = rank_task(&task, &params, &cache, &cfg).unwrap();
        assert_eq!(matrix.query_encodes, 2);
        assert_eq!(matrix.outputs.len(), 2);
        for item in task.query_space.items() {
            let solo = rank_query(&item.id, &item.text, &params, &cache, &cfg, false).unwrap();
            let row = matrix.output_for(&item.id).unwrap();
            assert_eq!(row.scores, solo.scores);
            assert_eq!(row.ranking, solo.ranking);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let params = init_params(7, 256, 8, false).unwrap();
        let other = init_params(7, 256, 6, false).unwrap();
        let sp = space(&[("a", "text")]);
        let cache = build_cache(&other, &sp, None).unwrap();
        assert!(matches!(
            rank_query("q", "text", &params, &cache, &InteractionConfig::softmax_token(), false),
            Err(RankerError::DimMismatch { cache: 6, encoder: 8 })
        ));
    }
}
