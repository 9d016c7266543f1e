//! Subgraph feature extraction: path features around entities and between
//! entity pairs, enumerated exactly over simple paths.
//!
//! Each feature is itself a KB query. A pair feature `<designed->located_in>`
//! returns every pair connected by that edge sequence; an entity feature
//! `<nationality>:Italy` returns every entity with that path to `Italy`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

pub const DEFAULT_MAX_LEN: usize = 2;
pub const DEFAULT_FANOUT_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathFeature {
    pub edges: Vec<RelationId>,
    pub terminal: Option<EntityId>,
}

impl PathFeature {
    pub fn path(edges: Vec<RelationId>) -> Self {
        PathFeature { edges, terminal: None }
    }

    /// The same query read from the other end: edges reversed and inverted.
    pub fn reversed(&self) -> Self {
        PathFeature {
            edges: self.edges.iter().rev().map(|r| r.inverse()).collect(),
            terminal: None,
        }
    }
}

/// Canonical string form: `<l1->l2>` plus `:entity` for terminal features.
pub fn format_feature(f: &PathFeature, g: &KnowledgeGraph) -> Result<String> {
    let mut s = String::from("<");
    for (i, r) in f.edges.iter().enumerate() {
        if i > 0 {
            s.push_str("->");
        }
        s.push_str(&g.relation_name(*r));
    }
    s.push('>');
    if let Some(t) = f.terminal {
        write!(s, ":{}", g.entity_name(t)?).expect("string write");
    }
    Ok(s)
}

pub fn parse_feature(s: &str, g: &KnowledgeGraph) -> Result<PathFeature> {
    let bad = |m: &str| Error::Parse {
        position: format!("feature {s:?}"),
        message: m.to_string(),
    };
    let body = s.strip_prefix('<').ok_or_else(|| bad("missing '<'"))?;
    // labels never contain '>' or end in '-', so the first '>' outside an
    // arrow closes the path
    let close = body
        .char_indices()
        .find(|&(i, c)| c == '>' && !body[..i].ends_with('-'))
        .map(|(i, _)| i)
        .ok_or_else(|| bad("missing '>'"))?;
    let (inner, rest) = (&body[..close], &body[close + 1..]);
    if inner.is_empty() {
        return Err(bad("empty path"));
    }
    let edges = inner
        .split("->")
        .map(|name| g.parse_relation(name).ok_or_else(|| bad(&format!("unknown relation {name:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let terminal = match rest {
        "" => None,
        _ => {
            let name = rest.strip_prefix(':').ok_or_else(|| bad("trailing text after '>'"))?;
            Some(g.entity_id(name).ok_or_else(|| bad(&format!("unknown entity {name:?}")))?)
        }
    };
    Ok(PathFeature { edges, terminal })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub u32);

#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    features: Vec<PathFeature>,
    index: HashMap<PathFeature, FeatureId>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, f: &PathFeature) -> FeatureId {
        if let Some(&id) = self.index.get(f) {
            return id;
        }
        let id = FeatureId(self.features.len() as u32);
        self.features.push(f.clone());
        self.index.insert(f.clone(), id);
        id
    }

    pub fn get(&self, f: &PathFeature) -> Option<FeatureId> {
        self.index.get(f).copied()
    }

    pub fn feature(&self, id: FeatureId) -> &PathFeature {
        &self.features[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn vector(&mut self, paths: &[PathFeature]) -> FeatureVector {
        paths.iter().map(|p| self.intern(p)).collect()
    }
}

/// Binary sparse vector: the sorted set of active feature ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct FeatureVector(Vec<FeatureId>);

impl FeatureVector {
    pub fn contains(&self, f: FeatureId) -> bool {
        self.0.binary_search(&f).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<FeatureId> for FeatureVector {
    fn from_iter<I: IntoIterator<Item = FeatureId>>(iter: I) -> Self {
        let mut v: Vec<FeatureId> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        FeatureVector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfeConfig {
    pub max_len: usize,
    pub fanout_cap: usize,
}

impl Default for SfeConfig {
    fn default() -> Self {
        SfeConfig {
            max_len: DEFAULT_MAX_LEN,
            fanout_cap: DEFAULT_FANOUT_CAP,
        }
    }
}

/// Extraction metadata written next to the feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfeStats {
    pub max_len: usize,
    pub fanout_cap: usize,
    pub truncated_edges: usize,
    pub rows: usize,
}

/// Path enumerator over a graph, with per-(node, relation) fan-out capped.
pub struct Sfe<'g> {
    graph: &'g KnowledgeGraph,
    config: SfeConfig,
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    truncated: usize,
}

impl<'g> Sfe<'g> {
    pub fn new(graph: &'g KnowledgeGraph, config: SfeConfig) -> Result<Self> {
        if config.max_len == 0 || config.fanout_cap == 0 {
            return Err(Error::Validation("sfe max_len and fanout_cap must be positive".into()));
        }
        let mut truncated = 0;
        let mut adjacency = Vec::with_capacity(graph.entity_count());
        for e in graph.entities() {
            let mut by_rel: BTreeMap<RelationId, Vec<EntityId>> = BTreeMap::new();
            for (r, n) in graph.incident(e)? {
                by_rel.entry(r).or_default().push(n);
            }
            let mut steps = Vec::new();
            for (r, mut targets) in by_rel {
                if targets.len() > config.fanout_cap {
                    targets.sort_unstable();
                    truncated += targets.len() - config.fanout_cap;
                    targets.truncate(config.fanout_cap);
                }
                steps.extend(targets.into_iter().map(|t| (r, t)));
            }
            adjacency.push(steps);
        }
        Ok(Sfe {
            graph,
            config,
            adjacency,
            truncated,
        })
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn config(&self) -> SfeConfig {
        self.config
    }

    /// Traversal steps dropped by the fan-out cap, counted once per direction.
    pub fn truncated_edges(&self) -> usize {
        self.truncated
    }

    fn check(&self, e: EntityId) -> Result<()> {
        if e.index() < self.adjacency.len() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(e.0))
        }
    }

    /// Edge sequences of all simple paths `e1 ~> e2` up to `max_len` edges.
    /// A node paired with itself has no such path.
    pub fn pair_paths(&self, e1: EntityId, e2: EntityId) -> Result<Vec<PathFeature>> {
        self.check(e1)?;
        self.check(e2)?;
        let mut found = BTreeSet::new();
        if e1 != e2 {
            let mut path = Vec::new();
            let mut nodes = vec![e1];
            self.walk_to(e2, &mut nodes, &mut path, &mut found);
        }
        Ok(found.into_iter().map(PathFeature::path).collect())
    }

    fn walk_to(
        &self,
        target: EntityId,
        nodes: &mut Vec<EntityId>,
        path: &mut Vec<RelationId>,
        found: &mut BTreeSet<Vec<RelationId>>,
    ) {
        let here = *nodes.last().expect("non-empty path");
        for &(r, next) in &self.adjacency[here.index()] {
            if nodes.contains(&next) {
                continue;
            }
            path.push(r);
            if next == target {
                found.insert(path.clone());
            } else if path.len() < self.config.max_len {
                nodes.push(next);
                self.walk_to(target, nodes, path, found);
                nodes.pop();
            }
            path.pop();
        }
    }

    /// Every simple path leaving `e`, both bare and annotated with its end node.
    pub fn entity_paths(&self, e: EntityId) -> Result<Vec<PathFeature>> {
        self.check(e)?;
        let mut found = BTreeSet::new();
        let mut path = Vec::new();
        let mut nodes = vec![e];
        self.walk_from(&mut nodes, &mut path, &mut found);
        Ok(found.into_iter().collect())
    }

    fn walk_from(&self, nodes: &mut Vec<EntityId>, path: &mut Vec<RelationId>, found: &mut BTreeSet<PathFeature>) {
        let here = *nodes.last().expect("non-empty path");
        for &(r, next) in &self.adjacency[here.index()] {
            if nodes.contains(&next) {
                continue;
            }
            path.push(r);
            found.insert(PathFeature::path(path.clone()));
            found.insert(PathFeature {
                edges: path.clone(),
                terminal: Some(next),
            });
            if path.len() < self.config.max_len {
                nodes.push(next);
                self.walk_from(nodes, path, found);
                nodes.pop();
            }
            path.pop();
        }
    }

    /// Entity paths for one argument, pair paths for two.
    pub fn paths(&self, args: &[EntityId]) -> Result<Vec<PathFeature>> {
        match args {
            [e] => self.entity_paths(*e),
            [a, b] => self.pair_paths(*a, *b),
            _ => Err(Error::Validation(format!("feature key of {} entities", args.len()))),
        }
    }

    pub fn extract_pair_features(&self, table: &mut FeatureTable, e1: EntityId, e2: EntityId) -> Result<FeatureVector> {
        Ok(table.vector(&self.pair_paths(e1, e2)?))
    }

    pub fn extract_entity_features(&self, table: &mut FeatureTable, e: EntityId) -> Result<FeatureVector> {
        Ok(table.vector(&self.entity_paths(e)?))
    }

    /// Extracts paths for many keys, splitting the work over `threads`
    /// scoped threads. Output order follows `keys`.
    pub fn paths_for_keys(&self, keys: &[Vec<EntityId>], threads: usize) -> Result<Vec<Vec<PathFeature>>> {
        let threads = threads.max(1);
        if threads == 1 || keys.len() < 2 {
            return keys.iter().map(|k| self.paths(k)).collect();
        }
        let chunk = keys.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Vec<PathFeature>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = keys
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|k| self.paths(k)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("sfe worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(keys.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}

/// Free-function form with the default fan-out cap.
pub fn extract_pair_features(
    g: &KnowledgeGraph,
    table: &mut FeatureTable,
    e1: EntityId,
    e2: EntityId,
    max_len: usize,
) -> Result<FeatureVector> {
    let sfe = Sfe::new(g, SfeConfig { max_len, ..SfeConfig::default() })?;
    sfe.extract_pair_features(table, e1, e2)
}

pub fn extract_entity_features(g: &KnowledgeGraph, table: &mut FeatureTable, e: EntityId, max_len: usize) -> Result<FeatureVector> {
    let sfe = Sfe::new(g, SfeConfig { max_len, ..SfeConfig::default() })?;
    sfe.extract_entity_features(table, e)
}

/// Runs a path as a query: every node reachable from `start` by following
/// `edges` in order over the full graph.
pub fn execute_path(g: &KnowledgeGraph, start: EntityId, edges: &[RelationId]) -> Result<BTreeSet<EntityId>> {
    let mut frontier = BTreeSet::from([start]);
    for &want in edges {
        let mut next = BTreeSet::new();
        for &n in &frontier {
            next.extend(g.incident(n)?.filter(|&(r, _)| r == want).map(|(_, t)| t));
        }
        frontier = next;
    }
    Ok(frontier)
}

/// Row key of the feature matrix: `name` or `name1|name2`.
pub fn row_key(g: &KnowledgeGraph, args: &[EntityId]) -> Result<String> {
    Ok(args
        .iter()
        .map(|&a| g.entity_name(a))
        .collect::<Result<Vec<_>>>()?
        .join("|"))
}

pub fn parse_row_key(g: &KnowledgeGraph, key: &str) -> Result<Vec<EntityId>> {
    key.split('|')
        .map(|n| g.entity_id(n).ok_or_else(|| Error::UnknownEntityName(n.to_string())))
        .collect()
}

/// Writes `key<TAB>f1 f2 ...` rows, sorted by key, features sorted as strings.
pub fn write_feature_matrix<W: Write>(g: &KnowledgeGraph, rows: &[(Vec<EntityId>, Vec<PathFeature>)], mut w: W) -> Result<()> {
    let mut lines = Vec::with_capacity(rows.len());
    for (args, paths) in rows {
        let mut feats = paths.iter().map(|p| format_feature(p, g)).collect::<Result<Vec<_>>>()?;
        feats.sort();
        lines.push((row_key(g, args)?, feats.join(" ")));
    }
    lines.sort();
    for (key, feats) in lines {
        writeln!(w, "{key}\t{feats}").map_err(|e| Error::io("<feature matrix>", e))?;
    }
    Ok(())
}

pub fn read_feature_matrix(
    text: &str,
    g: &KnowledgeGraph,
    table: &mut FeatureTable,
) -> Result<HashMap<Vec<EntityId>, FeatureVector>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fail = |m: String| Error::load("feature matrix", i + 1, m);
        let (key, feats) = line.split_once('\t').ok_or_else(|| fail("missing TAB".into()))?;
        let args = parse_row_key(g, key).map_err(|e| fail(e.to_string()))?;
        let mut ids = Vec::new();
        for f in feats.split(' ').filter(|s| !s.is_empty()) {
            let p = parse_feature(f, g).map_err(|e| fail(e.to_string()))?;
            ids.push(table.intern(&p));
        }
        out.insert(args, ids.into_iter().collect());
    }
    Ok(out)
}
