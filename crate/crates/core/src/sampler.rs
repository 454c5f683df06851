//! Deterministic mini-batch construction over skill-centric bipartite
//! graphs, plus vacancy-sentence prefix/suffix augmentation.
//!
//! A batch draws `n` skills uniformly without replacement from the skills
//! that have at least one edge in every enabled graph, then one positive
//! target per skill per graph. The in-batch edge set records *all* edges
//! among the sampled nodes, so a skill that co-occurs with another skill's
//! positive is never treated as its negative. Batches are a pure function
//! of `(seed, step)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::BipartiteGraph;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("requested {requested} skills but only {available} are eligible in every enabled graph")]
    NotEnoughEligibleSkills { requested: usize, available: usize },
    #[error("no graphs supplied")]
    NoGraphs,
    #[error("graphs do not share a query space")]
    MismatchedQuerySpaces,
    #[error("augmentation pool is empty but probability is > 0")]
    EmptyAugmentationPool,
}

/// Which training graph a batch slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphKind {
    Jobs,
    VacancySentences,
    SkillAlternatives,
}

impl GraphKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Jobs => "jobs",
            GraphKind::VacancySentences => "vacancy_sentences",
            GraphKind::SkillAlternatives => "skill_alternatives",
        }
    }
}

/// Targets and in-batch edges sampled for one graph.
#[derive(Debug, Clone)]
pub struct GraphBatchDraw {
    pub kind: GraphKind,
    /// One drawn positive per batch skill; the same target id may occupy
    /// several slots when skills share it.
    pub target_indices: Vec<usize>,
    pub target_ids: Vec<String>,
    pub target_texts: Vec<String>,
    /// All `(skill slot, target slot)` pairs backed by a graph edge.
    pub edges: Vec<(usize, usize)>,
}

/// A sampled mini-batch: the skill slice plus one target slice per graph.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub skill_indices: Vec<usize>,
    pub skill_ids: Vec<String>,
    pub skill_texts: Vec<String>,
    pub graphs: Vec<GraphBatchDraw>,
}

struct GraphState {
    kind: GraphKind,
    graph: std::sync::Arc<BipartiteGraph>,
    adjacency: Vec<Vec<usize>>,
}

/// Precomputed sampling state over the enabled graphs.
pub struct BatchSampler {
    graphs: Vec<GraphState>,
    /// Skills with at least one edge in every enabled graph, ascending.
    eligible: Vec<usize>,
}

impl BatchSampler {
    pub fn new(
        graphs: Vec<(GraphKind, std::sync::Arc<BipartiteGraph>)>,
    ) -> Result<Self, SamplerError> {
        if graphs.is_empty() {
            return Err(SamplerError::NoGraphs);
        }
        let skill_count = graphs[0].1.query_space.len();
        for (_, g) in &graphs {
            if g.query_space.len() != skill_count
                || g.query_space.name != graphs[0].1.query_space.name
            {
                return Err(SamplerError::MismatchedQuerySpaces);
            }
        }
        let states: Vec<GraphState> = graphs
            .into_iter()
            .map(|(kind, graph)| {
                let mut adjacency = graph.adjacency();
                for targets in &mut adjacency {
                    targets.sort_unstable();
                }
                GraphState {
                    kind,
                    graph,
                    adjacency,
                }
            })
            .collect();
        let eligible = (0..skill_count)
            .filter(|&s| states.iter().all(|st| !st.adjacency[s].is_empty()))
            .collect();
        Ok(BatchSampler {
            graphs: states,
            eligible,
        })
    }

    pub fn eligible_skills(&self) -> &[usize] {
        &self.eligible
    }

    /// RNG stream for one `(seed, step)` pair: the seed keys the cipher and
    /// the step selects the stream, so steps are independent and replayable.
    fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }

    /// Draws the batch for `(seed, step)`.
    pub fn sample_batch(&self, n: usize, seed: u64, step: u64) -> Result<MiniBatch, SamplerError> {
        if n > self.eligible.len() {
            return Err(SamplerError::NotEnoughEligibleSkills {
                requested: n,
                available: self.eligible.len(),
            });
        }
        let mut rng = Self::step_rng(seed, step);

        // partial Fisher-Yates: uniform without replacement
        let mut pool: Vec<usize> = self.eligible.clone();
        for i in 0..n {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let skill_indices: Vec<usize> = pool[..n].to_vec();

        let skill_space = &self.graphs[0].graph.query_space;
        let skill_ids: Vec<String> = skill_indices
            .iter()
            .map(|&s| skill_space.get(s).id.clone())
            .collect();
        let skill_texts: Vec<String> = skill_indices
            .iter()
            .map(|&s| skill_space.get(s).text.clone())
            .collect();

        let mut graphs = Vec::with_capacity(self.graphs.len());
        for state in &self.graphs {
            let mut target_indices = Vec::with_capacity(n);
            for &s in &skill_indices {
                let candidates = &state.adjacency[s];
                let pick = candidates[rng.gen_range(0..candidates.len())];
                target_indices.push(pick);
            }
            // record every edge among the sampled nodes
            let mut edges = Vec::new();
            for (qi, &s) in skill_indices.iter().enumerate() {
                for (ti, &t) in target_indices.iter().enumerate() {
                    if state.graph.has_edge(s, t) {
                        edges.push((qi, ti));
                    }
                }
            }
            let target_space = &state.graph.target_space;
            graphs.push(GraphBatchDraw {
                kind: state.kind,
                target_ids: target_indices
                    .iter()
                    .map(|&t| target_space.get(t).id.clone())
                    .collect(),
                target_texts: target_indices
                    .iter()
                    .map(|&t| target_space.get(t).text.clone())
                    .collect(),
                target_indices,
                edges,
            });
        }

        Ok(MiniBatch {
            skill_indices,
            skill_ids,
            skill_texts,
            graphs,
        })
    }

    /// Vacancy sentences whose every linked skill is outside the batch;
    /// the pool augmentation may draw from.
    pub fn augmentation_pool(
        &self,
        kind: GraphKind,
        batch_skills: &[usize],
    ) -> Vec<(usize, String)> {
        let in_batch: std::collections::HashSet<usize> = batch_skills.iter().copied().collect();
        let Some(state) = self.graphs.iter().find(|g| g.kind == kind) else {
            return Vec::new();
        };
        let target_space = &state.graph.target_space;
        let mut linked_to_batch = vec![false; target_space.len()];
        for &(s, t) in state.graph.edges() {
            if in_batch.contains(&s) {
                linked_to_batch[t] = true;
            }
        }
        let mut has_edge = vec![false; target_space.len()];
        for &(_, t) in state.graph.edges() {
            has_edge[t] = true;
        }
        (0..target_space.len())
            .filter(|&t| has_edge[t] && !linked_to_batch[t])
            .map(|t| (t, target_space.get(t).text.clone()))
            .collect()
    }
}

/// With probability `p`, concatenates a pool sentence before or after the
/// input (fair coin) with a single space; otherwise returns the input
/// unchanged. Pool sentences must belong to skills absent from the current
/// batch — see [`BatchSampler::augmentation_pool`].
pub fn augment_vacancy<R: Rng>(
    sentence: &str,
    pool: &[(usize, String)],
    p: f64,
    rng: &mut R,
) -> Result<String, SamplerError> {
    if p > 0.0 && pool.is_empty() {
        return Err(SamplerError::EmptyAugmentationPool);
    }
    if p <= 0.0 || rng.gen_range(0.0..1.0) >= p {
        return Ok(sentence.to_string());
    }
    let (_, extra) = &pool[rng.gen_range(0..pool.len())];
    if rng.gen_bool(0.5) {
        Ok(format!("{extra} {sentence}"))
    } else {
        Ok(format!("{sentence} {extra}"))
    }
}

/// Training length rule: one epoch covers the largest per-graph unique edge
/// count, in batches of `n`.
pub fn steps_per_epoch(graphs: &[&BipartiteGraph], n: usize) -> usize {
    let max_edges = graphs.iter().map(|g| g.edge_count()).max().unwrap_or(0);
    max_edges.div_ceil(n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SpaceRole, TextItem, TextSpace};
    use std::sync::Arc;

    fn space(prefix: &str, n: usize, role: SpaceRole) -> Arc<TextSpace> {
        let items = (0..n)
            .map(|i| TextItem {
                id: format!("{prefix}{i}"),
                text: format!("{prefix} text {i}"),
            })
            .collect();
        Arc::new(TextSpace::new(format!("{prefix}s"), role, items).unwrap())
    }

    fn graph(
        skills: &Arc<TextSpace>,
        targets: &Arc<TextSpace>,
        edges: &[(usize, usize)],
    ) -> Arc<BipartiteGraph> {
        Arc::new(BipartiteGraph::new_unchecked(
            skills.clone(),
            targets.clone(),
            edges.to_vec(),
        ))
    }

    fn two_graph_sampler() -> BatchSampler {
        let skills = space("s", 6, SpaceRole::Skill);
        let jobs = space("j", 5, SpaceRole::Job);
        let sents = space("v", 6, SpaceRole::VacancySentence);
        let g_j = graph(
            &skills,
            &jobs,
            &[(0, 0), (1, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 1), (5, 2)],
        );
        let g_v = graph(
            &skills,
            &sents,
            &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5)],
        );
        BatchSampler::new(vec![
            (GraphKind::Jobs, g_j),
            (GraphKind::VacancySentences, g_v),
        ])
        .unwrap()
    }

    #[test]
    fn same_seed_and_step_reproduce_the_batch() {
        let sampler = two_graph_sampler();
        let a = sampler.sample_batch(4, 99, 3).unwrap();
        let b = sampler.sample_batch(4, 99, 3).unwrap();
        assert_eq!(a.skill_indices, b.skill_indices);
        for (ga, gb) in a.graphs.iter().zip(&b.graphs) {
            assert_eq!(ga.target_indices, gb.target_indices);
            assert_eq!(ga.edges, gb.edges);
        }
        let c = sampler.sample_batch(4, 99, 4).unwrap();
        // different step almost surely differs somewhere
        assert!(
            a.skill_indices != c.skill_indices
                || a.graphs[0].target_indices != c.graphs[0].target_indices
        );
    }

    #[test]
    fn forced_choice_single_positive() {
        let sampler = two_graph_sampler();
        // skill s0 has only job j0
        for step in 0..50 {
            let batch = sampler.sample_batch(4, 7, step).unwrap();
            if let Some(slot) = batch.skill_indices.iter().position(|&s| s == 0) {
                assert_eq!(batch.graphs[0].target_indices[slot], 0);
            }
        }
    }

    #[test]
    fn shared_positive_recorded_for_both_skills() {
        // skills s0, s1 both linked to j0 only
        let skills = space("s", 2, SpaceRole::Skill);
        let jobs = space("j", 1, SpaceRole::Job);
        let g = graph(&skills, &jobs, &[(0, 0), (1, 0)]);
        let sampler = BatchSampler::new(vec![(GraphKind::Jobs, g)]).unwrap();
        let batch = sampler.sample_batch(2, 0, 0).unwrap();
        let draw = &batch.graphs[0];
        // every (skill, slot) pair is an edge: nothing is a negative here
        let mut expected: Vec<(usize, usize)> = Vec::new();
        for qi in 0..2 {
            for ti in 0..2 {
                expected.push((qi, ti));
            }
        }
        assert_eq!(draw.edges, expected);
        // the id-level projection covers both underlying edges
        let id_edges: std::collections::HashSet<(String, String)> = draw
            .edges
            .iter()
            .map(|&(qi, ti)| (batch.skill_ids[qi].clone(), draw.target_ids[ti].clone()))
            .collect();
        assert!(id_edges.contains(&("s0".into(), "j0".into())));
        assert!(id_edges.contains(&("s1".into(), "j0".into())));
    }

    #[test]
    fn every_batch_node_has_a_positive() {
        let sampler = two_graph_sampler();
        for step in 0..200 {
            let batch = sampler.sample_batch(4, 123, step).unwrap();
            for draw in &batch.graphs {
                let mut row_covered = vec![false; batch.skill_indices.len()];
                let mut col_covered = vec![false; draw.target_indices.len()];
                for &(q, t) in &draw.edges {
                    row_covered[q] = true;
                    col_covered[t] = true;
                }
                assert!(row_covered.iter().all(|&c| c), "skill without positive");
                assert!(col_covered.iter().all(|&c| c), "target without positive");
            }
        }
    }

    #[test]
    fn oversized_batch_rejected() {
        let sampler = two_graph_sampler();
        assert!(matches!(
            sampler.sample_batch(7, 0, 0),
            Err(SamplerError::NotEnoughEligibleSkills { requested: 7, available: 6 })
        ));
    }

    #[test]
    fn skills_missing_a_graph_edge_are_excluded() {
        let skills = space("s", 3, SpaceRole::Skill);
        let jobs = space("j", 3, SpaceRole::Job);
        let sents = space("v", 3, SpaceRole::VacancySentence);
        let g_j = graph(&skills, &jobs, &[(0, 0), (1, 1), (2, 2)]);
        // skill 2 has no vacancy sentence
        let g_v = graph(&skills, &sents, &[(0, 0), (1, 1)]);
        let sampler = BatchSampler::new(vec![
            (GraphKind::Jobs, g_j),
            (GraphKind::VacancySentences, g_v),
        ])
        .unwrap();
        assert_eq!(sampler.eligible_skills(), &[0, 1]);
    }

    #[test]
    fn sampling_frequency_close_to_uniform() {
        let sampler = two_graph_sampler();
        let steps = 6000u64;
        let n = 3;
        let mut counts = vec![0usize; 6];
        for step in 0..steps {
            let batch = sampler.sample_batch(n, 2024, step).unwrap();
            for &s in &batch.skill_indices {
                counts[s] += 1;
            }
        }
        let expected = steps as f64 * n as f64 / 6.0;
        for (s, &c) in counts.iter().enumerate() {
            let rel = (c as f64 - expected).abs() / expected;
            assert!(rel < 0.05, "skill {s}: count {c}, expected {expected:.1}");
        }
    }

    #[test]
    fn augmentation_probability_zero_and_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = vec![(0usize, "extra sentence".to_string())];
        let out = augment_vacancy("base", &pool, 0.0, &mut rng).unwrap();
        assert_eq!(out, "base");
        // p = 0 tolerates an empty pool
        assert_eq!(augment_vacancy("base", &[], 0.0, &mut rng).unwrap(), "base");

        for _ in 0..20 {
            let out = augment_vacancy("base", &pool, 1.0, &mut rng).unwrap();
            assert_eq!(out.len(), "base".len() + "extra sentence".len() + 1);
            assert!(out == "extra sentence base" || out == "base extra sentence");
        }
    }

    #[test]
    fn augmentation_rejects_empty_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            augment_vacancy("base", &[], 0.5, &mut rng),
            Err(SamplerError::EmptyAugmentationPool)
        ));
    }

    #[test]
    fn augmentation_frequency_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = vec![(0usize, "pad".to_string())];
        let trials = 10_000;
        let mut augmented = 0;
        for _ in 0..trials {
            if augment_vacancy("x", &pool, 0.8, &mut rng).unwrap() != "x" {
                augmented += 1;
            }
        }
        let freq = augmented as f64 / trials as f64;
        assert!((freq - 0.8).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn augmentation_pool_excludes_in_batch_skills() {
        let sampler = two_graph_sampler();
        let batch = sampler.sample_batch(3, 5, 0).unwrap();
        let pool = sampler.augmentation_pool(GraphKind::VacancySentences, &batch.skill_indices);
        // sentences map 1:1 to skills here, so the pool is the out-of-batch rest
        assert_eq!(pool.len(), 3);
        for (t, _) in &pool {
            assert!(!batch.skill_indices.contains(t));
        }
    }

    #[test]
    fn epoch_length_follows_largest_graph() {
        let skills = space("s", 3, SpaceRole::Skill);
        let jobs = space("j", 3, SpaceRole::Job);
        let g1 = graph(&skills, &jobs, &[(0, 0), (1, 1), (2, 2)]);
        let g2 = graph(&skills, &jobs, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]);
        assert_eq!(steps_per_epoch(&[&g1, &g2], 2), 3); // ceil(5 / 2)
    }
}
