//! Data model and ingestion for text spaces, bipartite graphs, task
//! manifests, and the vacancy job-title dedup/merge procedure.
//!
//! File formats:
//! - space files: line-delimited JSON objects `{"id", "text"}`, with an
//!   optional first header line starting with `#!` carrying `{"name", "role"}`;
//! - graph files: tab-separated `query_id<TAB>target_id`, `#` comments;
//! - qrels files: tab-separated `query_id<TAB>target_id`, relevance 1;
//! - task manifests: a JSON object pointing at the files above.
//!
//! All loaded values are immutable afterwards and safe to share across
//! threads behind `Arc`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Errors raised while loading or validating corpus data.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate id {id:?} in {path} (lines {first_line} and {second_line})")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("space header role {header:?} does not match requested role {requested:?}")]
    RoleMismatch { header: SpaceRole, requested: SpaceRole },
    #[error("edge references unknown {side} id {id:?}")]
    DanglingEndpoint { side: &'static str, id: String },
    #[error("qrels references unknown {side} id {id:?} for task {task:?}")]
    QrelsDangling {
        task: String,
        side: &'static str,
        id: String,
    },
    #[error("task {task:?} is single-label but query {query:?} has {count} relevant targets")]
    LabelCardinality {
        task: String,
        query: String,
        count: usize,
    },
    #[error("invalid task manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
}

/// Role a text space plays in the training data structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceRole {
    Skill,
    Job,
    VacancySentence,
    SkillAlternative,
    Generic,
}

impl fmt::Display for SpaceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpaceRole::Skill => "skill",
            SpaceRole::Job => "job",
            SpaceRole::VacancySentence => "vacancy_sentence",
            SpaceRole::SkillAlternative => "skill_alternative",
            SpaceRole::Generic => "generic",
        };
        f.write_str(s)
    }
}

/// One identified text, the atom every query and target space is made of.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
}

/// A named, ordered collection of identified texts.
#[derive(Debug, Clone)]
pub struct TextSpace {
    pub name: String,
    pub role: SpaceRole,
    items: Vec<TextItem>,
    index: HashMap<String, usize>,
}

impl TextSpace {
    /// Builds a space from items, rejecting duplicate ids.
    pub fn new(
        name: impl Into<String>,
        role: SpaceRole,
        items: Vec<TextItem>,
    ) -> Result<Self, CorpusError> {
        let name = name.into();
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if let Some(prev) = index.insert(item.id.clone(), i) {
                return Err(CorpusError::DuplicateId {
                    path: PathBuf::from(&name),
                    id: item.id.clone(),
                    first_line: prev + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(TextSpace {
            name,
            role,
            items,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[TextItem] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &TextItem {
        &self.items[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }
}

#[derive(Serialize, Deserialize)]
struct SpaceHeader {
    name: String,
    role: SpaceRole,
}

#[derive(Serialize, Deserialize)]
struct SpaceRecord {
    id: String,
    text: String,
}

/// Loads a line-delimited space file.
///
/// A leading `#!{"name", "role"}` header supplies the space name; when
/// present its role must agree with `role`. Item order follows file order.
pub fn load_space(path: impl AsRef<Path>, role: SpaceRole) -> Result<TextSpace, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "space".to_string());

    let mut items = Vec::new();
    let mut first_line_of: HashMap<String, usize> = HashMap::new();
    for (lineno0, line) in content.lines().enumerate() {
        let lineno = lineno0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix("#!") {
            if lineno != 1 {
                return Err(CorpusError::MalformedLine {
                    path: path.to_path_buf(),
                    line: lineno,
                    reason: "#! header allowed only on the first line".into(),
                });
            }
            let header: SpaceHeader =
                serde_json::from_str(header).map_err(|e| CorpusError::MalformedLine {
                    path: path.to_path_buf(),
                    line: lineno,
                    reason: format!("bad header: {e}"),
                })?;
            if header.role != role {
                return Err(CorpusError::RoleMismatch {
                    header: header.role,
                    requested: role,
                });
            }
            name = header.name;
            continue;
        }
        let rec: SpaceRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                reason: e.to_string(),
            })?;
        if rec.id.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                reason: "empty id".into(),
            });
        }
        if rec.text.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                reason: format!("empty text for id {:?}", rec.id),
            });
        }
        if let Some(&first) = first_line_of.get(&rec.id) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                id: rec.id,
                first_line: first,
                second_line: lineno,
            });
        }
        first_line_of.insert(rec.id.clone(), lineno);
        items.push(TextItem {
            id: rec.id,
            text: rec.text,
        });
    }

    TextSpace::new(name, role, items)
}

/// Writes a space in the format `load_space` reads; `load ∘ serialize` is
/// the identity on spaces, order included.
pub fn serialize_space(space: &TextSpace, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    let header = SpaceHeader {
        name: space.name.clone(),
        role: space.role,
    };
    writeln!(out, "#!{}", serde_json::to_string(&header).expect("header json"))
        .map_err(io_err)?;
    for item in space.items() {
        let rec = SpaceRecord {
            id: item.id.clone(),
            text: item.text.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record json")).map_err(io_err)?;
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Observed edges between a query space and a target space.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    pub query_space: Arc<TextSpace>,
    pub target_space: Arc<TextSpace>,
    /// Deduplicated `(query index, target index)` pairs in first-seen order.
    edges: Vec<(usize, usize)>,
    edge_set: HashSet<(usize, usize)>,
}

impl BipartiteGraph {
    /// Builds a graph without invariant checks; pair with [`validate_graph`]
    /// for raw edge lists.
    pub fn new_unchecked(
        query_space: Arc<TextSpace>,
        target_space: Arc<TextSpace>,
        edges: Vec<(usize, usize)>,
    ) -> Self {
        let edge_set = edges.iter().copied().collect();
        BipartiteGraph {
            query_space,
            target_space,
            edges,
            edge_set,
        }
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, q: usize, t: usize) -> bool {
        self.edge_set.contains(&(q, t))
    }

    /// Target indices linked to query `q`, in first-seen edge order.
    pub fn targets_of(&self, q: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|(qi, _)| *qi == q)
            .map(|&(_, t)| t)
            .collect()
    }

    /// Per-query adjacency lists over the whole query space.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.query_space.len()];
        for &(q, t) in &self.edges {
            adj[q].push(t);
        }
        adj
    }

    /// Number of edges incident to target `t`.
    pub fn target_degree(&self, t: usize) -> usize {
        self.edges.iter().filter(|(_, ti)| *ti == t).count()
    }
}

/// Loads a tab-separated edge list, deduplicating repeated edges and
/// rejecting endpoints absent from either space.
pub fn load_graph(
    path: impl AsRef<Path>,
    query_space: Arc<TextSpace>,
    target_space: Arc<TextSpace>,
) -> Result<BipartiteGraph, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for (lineno0, line) in content.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (q, t) = line.split_once('\t').ok_or_else(|| CorpusError::MalformedLine {
            path: path.to_path_buf(),
            line: lineno,
            reason: "expected query_id<TAB>target_id".into(),
        })?;
        let qi = query_space
            .index_of(q)
            .ok_or_else(|| CorpusError::DanglingEndpoint {
                side: "query",
                id: q.to_string(),
            })?;
        let ti = target_space
            .index_of(t)
            .ok_or_else(|| CorpusError::DanglingEndpoint {
                side: "target",
                id: t.to_string(),
            })?;
        if seen.insert((qi, ti)) {
            edges.push((qi, ti));
        }
    }
    Ok(BipartiteGraph::new_unchecked(query_space, target_space, edges))
}

/// Findings from [`validate_graph`]; empty means the graph is ready for
/// sampling and loss construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// Query-space items with no edge at all (would break the "at least one
    /// positive per query" guarantee if sampled).
    pub isolated_queries: Vec<String>,
    /// Edges present more than once in the underlying edge list.
    pub duplicate_edges: Vec<(String, String)>,
    /// Edge endpoints that fall outside their space (only possible for
    /// graphs assembled by hand).
    pub dangling_queries: Vec<String>,
    pub dangling_targets: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.isolated_queries.is_empty()
            && self.duplicate_edges.is_empty()
            && self.dangling_queries.is_empty()
            && self.dangling_targets.is_empty()
    }
}

/// Checks a graph against its invariants and reports every violation,
/// categorized. Never fails; an empty report means all invariants hold.
pub fn validate_graph(g: &BipartiteGraph) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut covered = vec![false; g.query_space.len()];
    let mut seen = HashSet::new();
    for &(q, t) in g.edges() {
        if q >= g.query_space.len() {
            report.dangling_queries.push(format!("#{q}"));
            continue;
        }
        if t >= g.target_space.len() {
            report.dangling_targets.push(format!("#{t}"));
            continue;
        }
        covered[q] = true;
        if !seen.insert((q, t)) {
            report.duplicate_edges.push((
                g.query_space.get(q).id.clone(),
                g.target_space.get(t).id.clone(),
            ));
        }
    }
    for (q, covered) in covered.iter().enumerate() {
        if !covered {
            report.isolated_queries.push(g.query_space.get(q).id.clone());
        }
    }
    report
}

/// Binary relevance judgments: query id to its non-empty relevant set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn add(&mut self, query_id: impl Into<String>, target_id: impl Into<String>) {
        self.map
            .entry(query_id.into())
            .or_default()
            .insert(target_id.into());
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.map.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }
}

/// Loads tab-separated qrels (`query_id<TAB>target_id`, relevance 1).
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut qrels = Qrels::new();
    for (lineno0, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (q, t) = line.split_once('\t').ok_or_else(|| CorpusError::MalformedLine {
            path: path.to_path_buf(),
            line: lineno0 + 1,
            reason: "expected query_id<TAB>target_id".into(),
        })?;
        qrels.add(q, t);
    }
    Ok(qrels)
}

/// Whether each query carries one or several relevant targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelType {
    One,
    Multi,
}

/// A ranking task: query space, target space, relevance labels, and the
/// flags metrics need.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub query_space: Arc<TextSpace>,
    pub target_space: Arc<TextSpace>,
    pub qrels: Qrels,
    pub label_type: LabelType,
    /// Mask the target whose id equals the query id when ranking.
    pub exclude_self: bool,
    /// Tasks sharing a group are averaged together before the final macro
    /// average.
    pub task_group: String,
}

impl TaskSpec {
    /// Validates qrels coverage and label cardinality against the spaces.
    pub fn new(
        name: impl Into<String>,
        query_space: Arc<TextSpace>,
        target_space: Arc<TextSpace>,
        qrels: Qrels,
        label_type: LabelType,
        exclude_self: bool,
        task_group: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let name = name.into();
        for (q, targets) in qrels.iter() {
            if !query_space.contains(q) {
                return Err(CorpusError::QrelsDangling {
                    task: name,
                    side: "query",
                    id: q.clone(),
                });
            }
            for t in targets {
                if !target_space.contains(t) {
                    return Err(CorpusError::QrelsDangling {
                        task: name,
                        side: "target",
                        id: t.clone(),
                    });
                }
            }
            if label_type == LabelType::One && targets.len() != 1 {
                return Err(CorpusError::LabelCardinality {
                    task: name,
                    query: q.clone(),
                    count: targets.len(),
                });
            }
        }
        Ok(TaskSpec {
            name,
            query_space,
            target_space,
            qrels,
            label_type,
            exclude_self,
            task_group: task_group.into(),
        })
    }
}

#[derive(Deserialize)]
struct TaskManifest {
    name: String,
    query_space: String,
    target_space: String,
    qrels: String,
    label_type: LabelType,
    #[serde(default)]
    exclude_self: bool,
    task_group: String,
    #[serde(default)]
    query_role: Option<SpaceRole>,
    #[serde(default)]
    target_role: Option<SpaceRole>,
}

/// Loads a task manifest and every file it references. Relative paths are
/// resolved against the manifest's directory.
pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: TaskManifest =
        serde_json::from_str(&content).map_err(|e| CorpusError::BadManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let query_space = Arc::new(load_space(
        resolve(&manifest.query_space),
        manifest.query_role.unwrap_or(SpaceRole::Generic),
    )?);
    let target_space = Arc::new(load_space(
        resolve(&manifest.target_space),
        manifest.target_role.unwrap_or(SpaceRole::Generic),
    )?);
    let qrels = load_qrels(resolve(&manifest.qrels))?;
    TaskSpec::new(
        manifest.name,
        query_space,
        target_space,
        qrels,
        manifest.label_type,
        manifest.exclude_self,
        manifest.task_group,
    )
}

/// One scraped vacancy: its title and per-skill prediction confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawVacancyRecord {
    pub title: String,
    /// `(skill_id, confidence in [0,1])` pairs; may be empty pre-filter.
    pub skills: Vec<(String, f64)>,
}

/// A merged job profile after title dedup.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedJobProfile {
    /// Most frequent original casing among the duplicates (ties: first seen).
    pub title: String,
    /// Retained skills with their mean prediction confidence, ordered by
    /// confidence descending, ties by skill id.
    pub skills: Vec<(String, f64)>,
}

/// Case-fold plus whitespace canonicalization used for title merging.
fn title_key(title: &str) -> String {
    title
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn title_surface(title: &str) -> String {
    title.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Merges vacancy records case-agnostically by title.
///
/// A skill is retained iff it occurs in at least half of the duplicate
/// records for its title (inclusive, so a 2-record tie keeps the skill).
/// Retained skills are ordered by mean prediction confidence descending,
/// ties by skill id, and cut off at `max_profile`. Within one record a
/// repeated skill counts once, at its highest confidence.
pub fn dedup_merge_jobs(
    records: &[RawVacancyRecord],
    max_profile: usize,
) -> Vec<MergedJobProfile> {
    // key -> indices of records, preserving first-seen key order
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        let key = title_key(&rec.title);
        groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Vec::new()
        });
        groups.get_mut(&key).expect("just inserted").push(i);
    }

    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let members = &groups[&key];
        let n = members.len();

        // canonical surface form: most frequent casing, ties first seen
        let mut surface_counts: Vec<(String, usize)> = Vec::new();
        for &i in members {
            let surface = title_surface(&records[i].title);
            match surface_counts.iter_mut().find(|(s, _)| *s == surface) {
                Some((_, c)) => *c += 1,
                None => surface_counts.push((surface, 1)),
            }
        }
        // strictly-greater comparison keeps the first surface form on ties
        let mut title = String::new();
        let mut best = 0usize;
        for (surface, count) in &surface_counts {
            if *count > best {
                best = *count;
                title = surface.clone();
            }
        }

        // per-skill: records it occurs in and its confidences (one per record)
        let mut skill_order: Vec<String> = Vec::new();
        let mut occurrences: HashMap<String, Vec<f64>> = HashMap::new();
        for &i in members {
            let mut per_record: HashMap<&str, f64> = HashMap::new();
            for (skill, conf) in &records[i].skills {
                let entry = per_record.entry(skill.as_str()).or_insert(f64::MIN);
                if *conf > *entry {
                    *entry = *conf;
                }
            }
            let mut keys: Vec<&str> = per_record.keys().copied().collect();
            keys.sort_unstable();
            for skill in keys {
                if !occurrences.contains_key(skill) {
                    skill_order.push(skill.to_string());
                }
                occurrences
                    .entry(skill.to_string())
                    .or_default()
                    .push(per_record[skill]);
            }
        }

        let mut retained: Vec<(String, f64)> = skill_order
            .into_iter()
            .filter_map(|skill| {
                let confs = &occurrences[&skill];
                // majority vote: occurs in >= 50% of the duplicates
                if 2 * confs.len() >= n {
                    let mean = confs.iter().sum::<f64>() / confs.len() as f64;
                    Some((skill, mean))
                } else {
                    None
                }
            })
            .collect();
        retained.sort_by(|(id_a, conf_a), (id_b, conf_b)| {
            conf_b
                .partial_cmp(conf_a)
                .expect("finite confidence")
                .then_with(|| id_a.cmp(id_b))
        });
        retained.truncate(max_profile);

        out.push(MergedJobProfile {
            title,
            skills: retained,
        });
    }
    out
}

/// Default profile cutoff applied after merging.
pub const DEFAULT_MAX_PROFILE: usize = 200;
