//! Interned, labeled multigraph loaded from a triple file.
//!
//! Every relation label `r` read from the file gets two ids: the forward
//! relation and its synthesized inverse, serialized as `r_inv`. The file only
//! ever stores forward edges; inverse traversal goes through `in_adjacency`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Suffix that marks an inverse relation in every serialized form.
pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Forward relations have even ids, their inverses the following odd id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

impl RelationId {
    fn forward(label: u32) -> Self {
        RelationId(label * 2)
    }

    pub fn inverse(self) -> Self {
        RelationId(self.0 ^ 1)
    }

    pub fn is_inverse(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn label_index(self) -> usize {
        (self.0 >> 1) as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub triples_read: usize,
    pub duplicates: usize,
    pub edges: usize,
    pub entities: usize,
    pub relation_labels: usize,
    pub mediators: usize,
}

impl fmt::Display for LoadSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} triples read, {} duplicates dropped, {} edges, {} entities, {} relation labels, {} mediators",
            self.triples_read, self.duplicates, self.edges, self.entities, self.relation_labels, self.mediators
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    labels: Vec<String>,
    label_index: HashMap<String, u32>,
    out_adjacency: Vec<Vec<(RelationId, EntityId)>>,
    in_adjacency: Vec<Vec<(RelationId, EntityId)>>,
    mediator: Vec<bool>,
    seen: HashSet<(u32, u32, u32)>,
    edge_count: usize,
}

pub(crate) fn validate_entity_name(name: &str) -> std::result::Result<(), String> {
    if name.is_empty() {
        return Err("empty entity name".into());
    }
    if name.chars().any(|c| c.is_whitespace() || c == '|') {
        return Err(format!("entity name {name:?} contains whitespace or '|'"));
    }
    Ok(())
}

fn validate_label(label: &str) -> std::result::Result<(), String> {
    if label.is_empty() {
        return Err("empty relation label".into());
    }
    if label.chars().any(|c| c.is_whitespace() || c == '<' || c == '>') {
        return Err(format!("relation label {label:?} contains whitespace, '<' or '>'"));
    }
    if label.ends_with('-') {
        return Err(format!("relation label {label:?} ends with '-'"));
    }
    if label.ends_with(INVERSE_SUFFIX) {
        return Err(format!(
            "relation label {label:?} ends with the reserved inverse suffix {INVERSE_SUFFIX:?}"
        ));
    }
    Ok(())
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a TAB-separated triple file and an optional mediator list.
    pub fn load(path: &Path, mediator_path: Option<&Path>) -> Result<(Self, LoadSummary)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mediators = match mediator_path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::parse(&text, mediators.as_deref())
    }

    pub fn parse(text: &str, mediators: Option<&str>) -> Result<(Self, LoadSummary)> {
        let mut graph = Self::new();
        let mut summary = LoadSummary::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::load(
                    "kb",
                    lineno + 1,
                    format!("expected 3 TAB-separated fields, found {}", fields.len()),
                ));
            }
            summary.triples_read += 1;
            let added = graph
                .add_triple(fields[0], fields[1], fields[2])
                .map_err(|msg| Error::load("kb", lineno + 1, msg))?;
            if !added {
                summary.duplicates += 1;
            }
        }
        if let Some(text) = mediators {
            for (lineno, raw) in text.lines().enumerate() {
                let name = raw.trim();
                if name.is_empty() || name.starts_with('#') {
                    continue;
                }
                let id = graph.entity_id(name).ok_or_else(|| {
                    Error::load(
                        "mediators",
                        lineno + 1,
                        format!("mediator {name:?} does not occur in any triple"),
                    )
                })?;
                graph.mediator[id.index()] = true;
            }
        }
        summary.edges = graph.edge_count;
        summary.entities = graph.entity_count();
        summary.relation_labels = graph.labels.len();
        summary.mediators = graph.mediator.iter().filter(|m| **m).count();
        Ok((graph, summary))
    }

    /// Adds a forward edge, interning names in first-appearance order.
    /// Returns `Ok(false)` when the triple was already present.
    pub fn add_triple(&mut self, subject: &str, relation: &str, object: &str) -> std::result::Result<bool, String> {
        validate_entity_name(subject)?;
        validate_label(relation)?;
        validate_entity_name(object)?;
        let s = self.intern_entity(subject);
        let label = match self.label_index.get(relation) {
            Some(&l) => l,
            None => {
                let l = self.labels.len() as u32;
                self.labels.push(relation.to_string());
                self.label_index.insert(relation.to_string(), l);
                l
            }
        };
        let o = self.intern_entity(object);
        if !self.seen.insert((s.0, label, o.0)) {
            return Ok(false);
        }
        let r = RelationId::forward(label);
        self.out_adjacency[s.index()].push((r, o));
        self.in_adjacency[o.index()].push((r, s));
        self.edge_count += 1;
        Ok(true)
    }

    pub fn set_mediator(&mut self, e: EntityId, flag: bool) -> Result<()> {
        self.check(e)?;
        self.mediator[e.index()] = flag;
        Ok(())
    }

    /// Returns the id for `name`, adding it as an isolated node if absent.
    /// Used to register corpus entities that never appear in the KB.
    pub fn ensure_entity(&mut self, name: &str) -> Result<EntityId> {
        validate_entity_name(name).map_err(Error::Validation)?;
        Ok(self.intern_entity(name))
    }

    fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = EntityId(self.entity_names.len() as u32);
        self.entity_names.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        self.out_adjacency.push(Vec::new());
        self.in_adjacency.push(Vec::new());
        self.mediator.push(false);
        id
    }

    fn check(&self, e: EntityId) -> Result<()> {
        if e.index() < self.entity_names.len() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(e.0))
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entity_names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn relation_label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entity_names.len() as u32).map(EntityId)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn entity_name(&self, e: EntityId) -> Result<&str> {
        self.entity_names
            .get(e.index())
            .map(String::as_str)
            .ok_or(Error::UnknownEntity(e.0))
    }

    /// Forward relation id for a label as written in the KB file.
    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.label_index.get(label).map(|&l| RelationId::forward(l))
    }

    /// Resolves a serialized relation name, accepting the `_inv` suffix.
    pub fn parse_relation(&self, name: &str) -> Option<RelationId> {
        match name.strip_suffix(INVERSE_SUFFIX) {
            Some(base) => self.relation_id(base).map(RelationId::inverse),
            None => self.relation_id(name),
        }
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.labels[r.label_index()]
    }

    pub fn relation_name(&self, r: RelationId) -> String {
        let label = self.relation_label(r);
        if r.is_inverse() {
            format!("{label}{INVERSE_SUFFIX}")
        } else {
            label.to_string()
        }
    }

    pub fn is_mediator(&self, e: EntityId) -> Result<bool> {
        self.check(e)?;
        Ok(self.mediator[e.index()])
    }

    pub fn out_edges(&self, e: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.check(e)?;
        Ok(&self.out_adjacency[e.index()])
    }

    /// Incoming edges as `(forward relation, source)`.
    pub fn in_edges(&self, e: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.check(e)?;
        Ok(&self.in_adjacency[e.index()])
    }

    /// All edges touching `e` as traversal steps: outgoing edges with their
    /// forward relation, then incoming edges with the inverse relation.
    pub fn incident(&self, e: EntityId) -> Result<impl Iterator<Item = (RelationId, EntityId)> + '_> {
        self.check(e)?;
        let out = self.out_adjacency[e.index()].iter().copied();
        let inc = self.in_adjacency[e.index()]
            .iter()
            .map(|&(r, s)| (r.inverse(), s));
        Ok(out.chain(inc))
    }

    pub fn neighbors(&self, e: EntityId) -> Result<BTreeSet<EntityId>> {
        Ok(self.incident(e)?.map(|(_, n)| n).collect())
    }

    /// Entities two hops away through a node flagged as a mediator.
    pub fn mediator_neighbors(&self, e: EntityId) -> Result<BTreeSet<EntityId>> {
        let mut out = BTreeSet::new();
        for m in self.neighbors(e)? {
            if m == e || !self.mediator[m.index()] {
                continue;
            }
            for (_, x) in self.incident(m)? {
                if x != e && x != m {
                    out.insert(x);
                }
            }
        }
        Ok(out)
    }

    /// Stored forward triples in insertion order per subject.
    pub fn triples(&self) -> impl Iterator<Item = (EntityId, RelationId, EntityId)> + '_ {
        self.out_adjacency
            .iter()
            .enumerate()
            .flat_map(|(s, edges)| edges.iter().map(move |&(r, o)| (EntityId(s as u32), r, o)))
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, r, o) in self.triples() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_names[s.index()],
                self.relation_label(r),
                self.entity_names[o.index()]
            )?;
        }
        Ok(())
    }

    pub fn write_mediators<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in self.entities() {
            if self.mediator[e.index()] {
                writeln!(w, "{}", self.entity_names[e.index()])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::palladio_graph;

    fn names(g: &KnowledgeGraph, set: &BTreeSet<EntityId>) -> Vec<String> {
        let mut v: Vec<String> = set.iter().map(|e| g.entity_name(*e).unwrap().to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn palladio_fixture_counts() {
        let g = palladio_graph();
        assert_eq!(g.entity_count(), 5);
        assert_eq!(g.relation_label_count(), 4);
        assert_eq!(g.edge_count(), 5);
    }

    #[test]
    fn empty_file() {
        let (g, s) = KnowledgeGraph::parse("", None).unwrap();
        assert_eq!(g.entity_count(), 0);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(s.triples_read, 0);
    }

    #[test]
    fn duplicate_triples_collapse() {
        let (g, s) = KnowledgeGraph::parse("a\tr\tb\na\tr\tb\n", None).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(s.duplicates, 1);
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let (g, _) = KnowledgeGraph::parse("# header\n\na\tr\tb\r\n", None).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.entity_name(EntityId(1)).unwrap(), "b");
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let err = KnowledgeGraph::parse("a\tr\tb\na\tr\n", None).unwrap_err();
        assert!(matches!(err, Error::Load { line: 2, .. }), "{err}");
        let err = KnowledgeGraph::parse("a\t\tb\n", None).unwrap_err();
        assert!(matches!(err, Error::Load { line: 1, .. }), "{err}");
        let err = KnowledgeGraph::parse("a\tr_inv\tb\n", None).unwrap_err();
        assert!(matches!(err, Error::Load { line: 1, .. }), "{err}");
    }

    #[test]
    fn mediator_must_occur_in_a_triple() {
        let err = KnowledgeGraph::parse("a\tr\tb\n", Some("b\nzzz\n")).unwrap_err();
        assert!(matches!(err, Error::Load { line: 2, .. }), "{err}");
    }

    #[test]
    fn out_edges_in_insertion_order() {
        let g = palladio_graph();
        let p = g.entity_id("Palladio").unwrap();
        let got: Vec<(String, String)> = g
            .out_edges(p)
            .unwrap()
            .iter()
            .map(|&(r, o)| (g.relation_name(r), g.entity_name(o).unwrap().to_string()))
            .collect();
        let want = [("nationality", "Italy"), ("type", "architect"), ("designed", "VillaCapra")];
        assert_eq!(
            got,
            want.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect::<Vec<_>>()
        );
        let architect = g.entity_id("architect").unwrap();
        assert!(g.out_edges(architect).unwrap().is_empty());
        assert!(matches!(g.out_edges(EntityId(99)), Err(Error::UnknownEntity(99))));
    }

    #[test]
    fn neighbors_of_fixture() {
        let g = palladio_graph();
        let italy = g.entity_id("Italy").unwrap();
        assert_eq!(names(&g, &g.neighbors(italy).unwrap()), ["Palladio", "VillaCapra", "country"]);
        let architect = g.entity_id("architect").unwrap();
        assert_eq!(names(&g, &g.neighbors(architect).unwrap()), ["Palladio"]);
        assert!(g.neighbors(EntityId(5)).is_err());
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let mut g = palladio_graph();
        let lone = g.ensure_entity("Lone").unwrap();
        assert!(g.out_edges(lone).unwrap().is_empty());
        assert!(g.neighbors(lone).unwrap().is_empty());
        assert!(g.mediator_neighbors(lone).unwrap().is_empty());
    }

    #[test]
    fn self_loop_is_its_own_neighbor() {
        let (g, _) = KnowledgeGraph::parse("a\tr\ta\n", None).unwrap();
        let a = g.entity_id("a").unwrap();
        assert_eq!(g.neighbors(a).unwrap().into_iter().collect::<Vec<_>>(), vec![a]);
    }

    #[test]
    fn mediator_two_hop() {
        let kb = "A\tr1\tM\nM\tr2\tB\n";
        let (g, _) = KnowledgeGraph::parse(kb, Some("M\n")).unwrap();
        let a = g.entity_id("A").unwrap();
        assert_eq!(names(&g, &g.mediator_neighbors(a).unwrap()), ["B"]);
        let (g, _) = KnowledgeGraph::parse(kb, None).unwrap();
        assert!(g.mediator_neighbors(a).unwrap().is_empty());
        let g = palladio_graph();
        let p = g.entity_id("Palladio").unwrap();
        assert!(g.mediator_neighbors(p).unwrap().is_empty());
    }

    #[test]
    fn inverse_ids() {
        let g = palladio_graph();
        let r = g.relation_id("located_in").unwrap();
        assert_ne!(r, r.inverse());
        assert_eq!(r.inverse().inverse(), r);
        assert_eq!(g.relation_name(r.inverse()), "located_in_inv");
        assert_eq!(g.parse_relation("located_in_inv"), Some(r.inverse()));
        assert_eq!(g.parse_relation("nope_inv"), None);
    }
}
