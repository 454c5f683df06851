//! Ranking engine and contrastive-training toolkit for work-domain text.
//!
//! The crate covers the full loop of a token-level bi-encoder ranking
//! system at desk scale:
//!
//! - [`corpus`]: text spaces, bipartite graphs, task manifests, qrels, and
//!   the vacancy job-title dedup/merge procedure;
//! - [`encoder`]: a deterministic hashed-vocabulary reference encoder
//!   producing token embedding matrices, plus its checkpoint format;
//! - [`interaction`]: soft late interaction scoring and its ablation
//!   variants (MaxSim, mean-pooled cosine, target-mean softmax);
//! - [`contrastive`]: the many-to-many InfoNCE loss family over bipartite
//!   in-batch graphs with exact analytic gradients;
//! - [`sampler`]: deterministic skill-centric mini-batch sampling and
//!   vacancy-sentence augmentation;
//! - [`trainer`]: the AdamW loop with linear warmup/decay, periodic
//!   validation, and best-checkpoint retention;
//! - [`ranker`]: the target-space embedding cache and query-time ranking;
//! - [`metrics`]: AP/MAP and RP@10, macro-aggregation across tasks, and the
//!   latency benchmarking protocol.
//!
//! External model weights never link into this crate; embeddings produced
//! elsewhere integrate through the cache file format.

pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod interaction;
pub mod mat;
pub mod metrics;
pub mod ranker;
pub mod sampler;
pub mod trainer;
mod wire;

pub use contrastive::{BatchSimilarityMatrix, LossKind, LossWeights};
pub use corpus::{BipartiteGraph, Qrels, SpaceRole, TaskSpec, TextItem, TextSpace};
pub use encoder::{EncoderParams, TokenSequence};
pub use interaction::{InteractionConfig, InteractionKind};
pub use mat::Mat;
pub use metrics::{AggregatedMetrics, BenchReport, TaskMetrics};
pub use ranker::{RankedOutput, TargetCache};
pub use sampler::{BatchSampler, GraphKind, MiniBatch};
pub use trainer::{lr_at, train, CheckpointRecord, TrainConfig, TrainOutcome, TrainingGraphs};
