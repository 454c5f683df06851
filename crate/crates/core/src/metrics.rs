//! Ranking metrics (AP/MAP, RP@10), macro-aggregation across tasks, and the
//! latency benchmarking protocol.
//!
//! Metrics depend only on the ranking permutation, never on score
//! magnitudes, and all internal values live in `[0, 1]`; rendering in
//! percentage points happens at the CLI.
//!
//! Aggregation averages tasks sharing a `task_group` first, then takes the
//! unweighted mean over groups, so subsets of one task type do not outvote
//! the rest.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty relevant set for query {query:?}")]
    EmptyRelevant { query: String },
    #[error("query {query:?} missing from the ranking matrix")]
    MissingQuery { query: String },
    #[error("no tasks to aggregate")]
    NoTasks,
    #[error("task {task:?} has no evaluated queries")]
    NoQueries { task: String },
}

/// How RP@10 normalizes; see [`rp_at_k`] and [`rp_at_k_strict`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpVariant {
    /// Relevant found in the top `k`, over `min(R, k)`. Equals hit@k on
    /// single-label tasks.
    #[default]
    HitNormalized,
    /// Precision over the top `min(R, k)` positions only.
    Strict,
}

/// Average precision of one ranking against a binary relevant set:
/// `(1/R) Σ_k precision@k` over the ranks `k` holding a relevant item.
///
/// With a single relevant item this is exactly the reciprocal rank.
pub fn average_precision<S: AsRef<str>>(
    ranked_ids: &[S],
    relevant: &BTreeSet<String>,
) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevant {
            query: String::new(),
        });
    }
    let mut hits = 0u32;
    let mut sum = 0.0;
    for (pos, id) in ranked_ids.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += f64::from(hits) / (pos + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// R-Precision@k: relevant items inside the top `k`, normalized by
/// `min(R, k)`.
pub fn rp_at_k<S: AsRef<str>>(
    ranked_ids: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevant {
            query: String::new(),
        });
    }
    let hits = ranked_ids
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count();
    Ok(hits as f64 / relevant.len().min(k) as f64)
}

/// Strict variant: precision over the first `min(R, k)` positions.
pub fn rp_at_k_strict<S: AsRef<str>>(
    ranked_ids: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevant {
            query: String::new(),
        });
    }
    let depth = relevant.len().min(k);
    let hits = ranked_ids
        .iter()
        .take(depth)
        .filter(|id| relevant.contains(id.as_ref()))
        .count();
    Ok(hits as f64 / depth as f64)
}

/// Reciprocal rank of the first relevant item, 0 when none is ranked.
pub fn reciprocal_rank<S: AsRef<str>>(ranked_ids: &[S], relevant: &BTreeSet<String>) -> f64 {
    for (pos, id) in ranked_ids.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            return 1.0 / (pos + 1) as f64;
        }
    }
    0.0
}

/// Per-task metric results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub task_group: String,
    /// Mean average precision in `[0, 1]`.
    pub map: f64,
    /// RP@10 in `[0, 1]`.
    pub rp_at_10: f64,
    pub queries: usize,
}

/// One query's contribution: its ranked target ids and relevant set.
pub struct QueryJudgement<'a> {
    pub query_id: &'a str,
    pub ranked_ids: Vec<&'a str>,
    pub relevant: BTreeSet<String>,
}

/// Averages AP and RP@10 over a task's queries.
pub fn evaluate_task<'a>(
    task_name: &str,
    task_group: &str,
    judgements: impl IntoIterator<Item = QueryJudgement<'a>>,
    rp_variant: RpVariant,
) -> Result<TaskMetrics, MetricError> {
    let mut map_sum = 0.0;
    let mut rp_sum = 0.0;
    let mut count = 0usize;
    for j in judgements {
        if j.relevant.is_empty() {
            return Err(MetricError::EmptyRelevant {
                query: j.query_id.to_string(),
            });
        }
        map_sum += average_precision(&j.ranked_ids, &j.relevant)?;
        rp_sum += match rp_variant {
            RpVariant::HitNormalized => rp_at_k(&j.ranked_ids, &j.relevant, 10)?,
            RpVariant::Strict => rp_at_k_strict(&j.ranked_ids, &j.relevant, 10)?,
        };
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::NoQueries {
            task: task_name.to_string(),
        });
    }
    Ok(TaskMetrics {
        task: task_name.to_string(),
        task_group: task_group.to_string(),
        map: map_sum / count as f64,
        rp_at_10: rp_sum / count as f64,
        queries: count,
    })
}

/// Per-group means plus the final macro average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregatedMetrics {
    pub groups: Vec<GroupMetrics>,
    pub task_avg_map: f64,
    pub task_avg_rp_at_10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub map: f64,
    pub rp_at_10: f64,
    pub tasks: usize,
}

/// Averages tasks sharing a `task_group` first, then takes the unweighted
/// mean over groups. Group order follows first appearance.
pub fn macro_aggregate(per_task: &[TaskMetrics]) -> Result<AggregatedMetrics, MetricError> {
    if per_task.is_empty() {
        return Err(MetricError::NoTasks);
    }
    let mut groups: Vec<GroupMetrics> = Vec::new();
    for t in per_task {
        match groups.iter_mut().find(|g| g.group == t.task_group) {
            Some(g) => {
                g.map += t.map;
                g.rp_at_10 += t.rp_at_10;
                g.tasks += 1;
            }
            None => groups.push(GroupMetrics {
                group: t.task_group.clone(),
                map: t.map,
                rp_at_10: t.rp_at_10,
                tasks: 1,
            }),
        }
    }
    for g in &mut groups {
        g.map /= g.tasks as f64;
        g.rp_at_10 /= g.tasks as f64;
    }
    let n = groups.len() as f64;
    let task_avg_map = groups.iter().map(|g| g.map).sum::<f64>() / n;
    let task_avg_rp_at_10 = groups.iter().map(|g| g.rp_at_10).sum::<f64>() / n;
    Ok(AggregatedMetrics {
        groups,
        task_avg_map,
        task_avg_rp_at_10,
    })
}

/// Evaluates a task from its full ranking matrix: one judgement per qrels
/// query, with the self target dropped from the relevant set first when the
/// task excludes it.
pub fn evaluate_ranking(
    task: &crate::corpus::TaskSpec,
    matrix: &crate::ranker::RankingMatrix,
    rp_variant: RpVariant,
) -> Result<TaskMetrics, MetricError> {
    let by_query: std::collections::HashMap<&str, &crate::ranker::RankedOutput> = matrix
        .outputs
        .iter()
        .map(|o| (o.query_id.as_str(), o))
        .collect();
    let mut judgements = Vec::with_capacity(task.qrels.len());
    for (query_id, relevant) in task.qrels.iter() {
        let output = by_query
            .get(query_id.as_str())
            .ok_or_else(|| MetricError::MissingQuery {
                query: query_id.clone(),
            })?;
        let mut relevant = relevant.clone();
        if task.exclude_self {
            relevant.remove(query_id);
        }
        if relevant.is_empty() {
            return Err(MetricError::EmptyRelevant {
                query: query_id.clone(),
            });
        }
        judgements.push(QueryJudgement {
            query_id,
            ranked_ids: output.ranked_ids(&matrix.target_ids),
            relevant,
        });
    }
    evaluate_task(&task.name, &task.task_group, judgements, rp_variant)
}

/// Latency bench settings; defaults follow the measurement protocol of
/// 30 warmup queries and 100 measured queries per task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub measured: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 30,
            measured: 100,
            seed: 0,
        }
    }
}

/// One task's queries for the bench harness.
#[derive(Debug, Clone)]
pub struct BenchTask {
    pub name: String,
    pub query_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLatency {
    pub task: String,
    pub mean_ms: f64,
    pub se_ms: f64,
    pub queries_measured: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Latency report: per-task mean ± standard error, plus the macro mean ±
/// standard error over task means (not pooled queries).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub measured: usize,
    pub per_task: Vec<TaskLatency>,
    pub macro_mean_ms: f64,
    pub macro_se_ms: f64,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Times `rank_fn` per query, task by task, strictly sequentially.
///
/// For each task a seeded shuffle fixes the query order; the first
/// `warmup` calls (cycling when the task is small) are discarded, then
/// `measured` queries are timed — all of them, with a note, when fewer are
/// available. Cache building is the caller's job and excluded from timing.
pub fn bench_latency<F>(
    mut rank_fn: F,
    tasks: &[BenchTask],
    opts: &BenchOptions,
) -> Result<BenchReport, MetricError>
where
    F: FnMut(usize, &str),
{
    use rand::{Rng, SeedableRng};
    if tasks.is_empty() {
        return Err(MetricError::NoTasks);
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (task_index, task) in tasks.iter().enumerate() {
        if task.query_ids.is_empty() {
            return Err(MetricError::NoQueries {
                task: task.name.clone(),
            });
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed ^ task_index as u64);
        let mut order: Vec<usize> = (0..task.query_ids.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for w in 0..opts.warmup {
            let q = &task.query_ids[order[w % order.len()]];
            rank_fn(task_index, q);
        }

        let take = opts.measured.min(order.len());
        let mut spans_ms = Vec::with_capacity(take);
        for &qi in order.iter().take(take) {
            let q = &task.query_ids[qi];
            let start = Instant::now();
            rank_fn(task_index, q);
            spans_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let (mean_ms, se_ms) = mean_and_se(&spans_ms);
        per_task.push(TaskLatency {
            task: task.name.clone(),
            mean_ms,
            se_ms,
            queries_measured: take,
            note: (take < opts.measured)
                .then(|| format!("only {take} queries available of {} requested", opts.measured)),
        });
    }
    let means: Vec<f64> = per_task.iter().map(|t| t.mean_ms).collect();
    let (macro_mean_ms, macro_se_ms) = mean_and_se(&means);
    Ok(BenchReport {
        warmup: opts.warmup,
        measured: opts.measured,
        per_task,
        macro_mean_ms,
        macro_se_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relevant(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ap_single_relevant_at_rank_one() {
        let ranked = ["a", "b", "c"];
        assert_eq!(average_precision(&ranked, &relevant(&["a"])).unwrap(), 1.0);
    }

    #[test]
    fn ap_two_relevant_ranks_one_and_three() {
        let ranked = ["a", "b", "c", "d"];
        let ap = average_precision(&ranked, &relevant(&["a", "c"])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ap_single_relevant_equals_reciprocal_rank() {
        let ranked = ["x", "y", "z", "w"];
        for (k, id) in ranked.iter().enumerate() {
            let rel = relevant(&[id]);
            let ap = average_precision(&ranked, &rel).unwrap();
            assert_eq!(ap, 1.0 / (k + 1) as f64);
            assert_eq!(ap, reciprocal_rank(&ranked, &rel));
        }
    }

    #[test]
    fn ap_rejects_empty_relevant() {
        let ranked = ["a"];
        assert!(average_precision(&ranked, &BTreeSet::new()).is_err());
    }

    #[test]
    fn rp_hand_counts() {
        let ranked: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        // single relevant inside / outside the top 10
        assert_eq!(rp_at_k(&ranked, &relevant(&["t4"]), 10).unwrap(), 1.0);
        assert_eq!(rp_at_k(&ranked, &relevant(&["t15"]), 10).unwrap(), 0.0);

        // R=20 with exactly 7 relevant inside the top 10
        let mut rel = BTreeSet::new();
        for i in 0..7 {
            rel.insert(format!("t{i}"));
        }
        for i in 10..20 {
            rel.insert(format!("t{i}"));
        }
        for i in 0..3 {
            rel.insert(format!("x{i}")); // relevant but never retrieved
        }
        assert_eq!(rel.len(), 20);
        assert!((rp_at_k(&ranked, &rel, 10).unwrap() - 0.7).abs() < 1e-15);

        // R=3, 2 relevant in the top 10
        let rel = relevant(&["t0", "t9", "t15"]);
        assert!((rp_at_k(&ranked, &rel, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn strict_variant_uses_shallower_depth() {
        let ranked = ["a", "b", "c", "d"];
        let rel = relevant(&["b", "d"]);
        // min(R, 10) = 2: only "b" is inside the first 2 positions
        assert_eq!(rp_at_k_strict(&ranked, &rel, 10).unwrap(), 0.5);
        // hit-normalized counts both within the top 10
        assert_eq!(rp_at_k(&ranked, &rel, 10).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_averages_queries() {
        let j1 = QueryJudgement {
            query_id: "q1",
            ranked_ids: vec!["a", "b"],
            relevant: relevant(&["a"]),
        };
        let j2 = QueryJudgement {
            query_id: "q2",
            ranked_ids: vec!["a", "b"],
            relevant: relevant(&["b"]),
        };
        let m = evaluate_task("t", "g", [j1, j2], RpVariant::HitNormalized).unwrap();
        assert_eq!(m.queries, 2);
        assert!((m.map - 0.75).abs() < 1e-15);
        assert_eq!(m.rp_at_10, 1.0);
    }

    #[test]
    fn evaluate_matches_prefix_enumeration_oracle() {
        use rand::{Rng, SeedableRng};
        // independent oracle: recompute precision at every prefix from scratch
        fn oracle_ap(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
            let mut sum = 0.0;
            for k in 1..=ranked.len() {
                if relevant.contains(&ranked[k - 1]) {
                    let hits = ranked[..k].iter().filter(|id| relevant.contains(*id)).count();
                    sum += hits as f64 / k as f64;
                }
            }
            sum / relevant.len() as f64
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..=20);
            let ranked: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let r = rng.gen_range(1..=n.min(10));
            let mut rel = BTreeSet::new();
            while rel.len() < r {
                rel.insert(format!("t{}", rng.gen_range(0..n)));
            }
            let ids: Vec<&str> = ranked.iter().map(String::as_str).collect();
            let ap = average_precision(&ids, &rel).unwrap();
            assert_eq!(ap, oracle_ap(&ranked, &rel));
        }
    }

    #[test]
    fn macro_aggregation_matches_published_task_average() {
        // seven per-task MAPs with the two extraction subsets grouped
        let mk = |task: &str, group: &str, map: f64, rp: f64| TaskMetrics {
            task: task.into(),
            task_group: group.into(),
            map: map / 100.0,
            rp_at_10: rp / 100.0,
            queries: 1,
        };
        let per_task = vec![
            mk("job2skill", "job2skill", 17.9, 37.8),
            mk("skill2job", "skill2job", 37.3, 49.4),
            mk("jobnorm", "jobnorm", 39.3, 60.8),
            mk("skillnorm", "skillnorm", 88.9, 95.9),
            mk("skillsim", "skillsim", 10.4, 33.8),
            mk("skillextr-t", "skillextract", 52.3, 73.5),
            mk("skillextr-h", "skillextract", 42.3, 64.2),
        ];
        let agg = macro_aggregate(&per_task).unwrap();
        assert_eq!(agg.groups.len(), 6);
        let extraction = agg.groups.iter().find(|g| g.group == "skillextract").unwrap();
        assert!((extraction.map * 100.0 - 47.3).abs() < 1e-9);
        assert!((agg.task_avg_map * 100.0 - 40.2).abs() < 0.05);
        assert!((agg.task_avg_rp_at_10 * 100.0 - 57.7).abs() < 0.1);
    }

    #[test]
    fn single_task_aggregates_to_itself() {
        let t = TaskMetrics {
            task: "only".into(),
            task_group: "g".into(),
            map: 0.42,
            rp_at_10: 0.9,
            queries: 3,
        };
        let agg = macro_aggregate(&[t.clone()]).unwrap();
        assert_eq!(agg.task_avg_map, t.map);
        assert_eq!(agg.task_avg_rp_at_10, t.rp_at_10);
    }

    #[test]
    fn grouped_equal_tasks_contribute_their_value() {
        let mk = |task: &str| TaskMetrics {
            task: task.into(),
            task_group: "shared".into(),
            map: 0.6,
            rp_at_10: 0.5,
            queries: 1,
        };
        let agg = macro_aggregate(&[mk("a"), mk("b")]).unwrap();
        assert_eq!(agg.task_avg_map, 0.6);
    }

    #[test]
    fn two_point_macro_se_is_half_the_gap() {
        let (mean, se) = mean_and_se(&[10.0, 20.0]);
        assert_eq!(mean, 15.0);
        assert!((se - 5.0).abs() < 1e-12);
    }

    #[test]
    fn bench_uses_all_queries_when_short_and_notes_it() {
        let tasks = vec![BenchTask {
            name: "tiny".into(),
            query_ids: (0..5).map(|i| format!("q{i}")).collect(),
        }];
        let opts = BenchOptions {
            warmup: 3,
            measured: 100,
            seed: 1,
        };
        let report = bench_latency(|_, _| {}, &tasks, &opts).unwrap();
        assert_eq!(report.per_task[0].queries_measured, 5);
        assert!(report.per_task[0].note.is_some());
        assert_eq!(report.warmup, 3);
        assert_eq!(report.measured, 100);
    }

    #[test]
    fn bench_report_counts_calls() {
        let tasks = vec![
            BenchTask {
                name: "a".into(),
                query_ids: (0..50).map(|i| format!("q{i}")).collect(),
            },
            BenchTask {
                name: "b".into(),
                query_ids: (0..50).map(|i| format!("q{i}")).collect(),
            },
        ];
        let opts = BenchOptions {
            warmup: 5,
            measured: 10,
            seed: 2,
        };
        let mut calls = 0usize;
        let report = bench_latency(|_, _| calls += 1, &tasks, &opts).unwrap();
        assert_eq!(calls, 2 * (5 + 10));
        assert_eq!(report.per_task.len(), 2);
        assert!(report.per_task.iter().all(|t| t.note.is_none()));
    }
}
