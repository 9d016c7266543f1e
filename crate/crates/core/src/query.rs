//! Candidate generation and execution of single-blank conjunctive queries.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::logical_form::{LogicalForm, Predicate, PredicateInstance, Term, UNKNOWN_PREDICATE};
use crate::model::{sigmoid, Mode, PredicateModel, UNKNOWN_PROBABILITY};
use crate::sfe::{FeatureVector, PathFeature};

/// Maximum number of answers kept per query.
pub const MAX_ANSWERS: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Provenance {
    pub trained_with: bool,
    pub kb_direct: bool,
    pub kb_mediator: bool,
}

impl Provenance {
    pub fn kb_connected(self) -> bool {
        self.kb_direct || self.kb_mediator
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CandidateInfo {
    pub provenance: Provenance,
    /// Distinct query entities this candidate is KB-connected to.
    pub kb_links: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSet {
    pub entries: BTreeMap<EntityId, CandidateInfo>,
    /// Query entity names found neither in the KB nor in training.
    pub unresolved: Vec<String>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.entries.keys().copied()
    }
}

/// Which entities appeared together in a training predicate instance.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceIndex {
    partners: HashMap<EntityId, BTreeSet<EntityId>>,
}

impl CooccurrenceIndex {
    pub fn from_instances(instances: &[PredicateInstance]) -> Self {
        let mut idx = Self::default();
        for inst in instances {
            for &a in &inst.args {
                idx.partners.entry(a).or_default();
                for &b in &inst.args {
                    if a != b {
                        idx.partners.get_mut(&a).expect("just inserted").insert(b);
                    }
                }
            }
        }
        idx
    }

    pub fn add_pair(&mut self, a: EntityId, b: EntityId) {
        if a != b {
            self.partners.entry(a).or_default().insert(b);
            self.partners.entry(b).or_default().insert(a);
        }
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.partners.contains_key(&e)
    }

    pub fn partners(&self, e: EntityId) -> impl Iterator<Item = EntityId> + '_ {
        self.partners.get(&e).into_iter().flatten().copied()
    }
}

fn query_entity_ids(q: &LogicalForm, g: &KnowledgeGraph) -> (Vec<EntityId>, Vec<String>) {
    let mut ids = Vec::new();
    let mut unresolved = Vec::new();
    for name in q.entities() {
        match g.entity_id(name) {
            Some(id) => ids.push(id),
            None => unresolved.push(name.to_string()),
        }
    }
    (ids, unresolved)
}

/// Union over query entities of their training partners, KB neighbors, and
/// entities reachable through a mediator node. Query entities are excluded.
pub fn generate_candidates(q: &LogicalForm, g: &KnowledgeGraph, cooccurrence: &CooccurrenceIndex) -> Result<CandidateSet> {
    if q.blank.is_none() {
        return Err(Error::UnsupportedQuery("query has no blank variable".into()));
    }
    let (ids, mut unresolved) = query_entity_ids(q, g);
    if ids.is_empty() && unresolved.is_empty() {
        return Err(Error::UnsupportedQuery("query has no grounded entity".into()));
    }
    let mut out = CandidateSet::default();
    for &qe in &ids {
        let direct = g.neighbors(qe)?;
        let mediated = g.mediator_neighbors(qe)?;
        if direct.is_empty() && mediated.is_empty() && !cooccurrence.contains(qe) {
            unresolved.push(g.entity_name(qe)?.to_string());
            continue;
        }
        for e in cooccurrence.partners(qe) {
            out.entries.entry(e).or_default().provenance.trained_with = true;
        }
        for &e in &direct {
            out.entries.entry(e).or_default().provenance.kb_direct = true;
        }
        for &e in &mediated {
            out.entries.entry(e).or_default().provenance.kb_mediator = true;
        }
        for e in direct.union(&mediated) {
            out.entries.get_mut(e).expect("inserted above").kb_links += 1;
        }
    }
    for qe in &ids {
        out.entries.remove(qe);
    }
    out.unresolved = unresolved;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedAnswers {
    pub query_id: String,
    pub answers: Vec<(EntityId, f64)>,
    /// Entries before this index were scored; the rest were appended.
    pub scored: usize,
}

/// Probability for a conjunct whose entity argument is unknown to the graph:
/// it has no embedding and no path features.
fn detached_probability(model: &PredicateModel, p: &Predicate) -> f64 {
    if !model.contains(p) || p.name == UNKNOWN_PREDICATE {
        return UNKNOWN_PROBABILITY;
    }
    match (model.mode(), p.arity.as_usize()) {
        (Mode::Distributional, 2) => 0.0,
        _ => sigmoid(0.0),
    }
}

enum Arg {
    Known(EntityId),
    Unknown,
}

fn bind(term: &Term, blank: &str, candidate: EntityId, g: &KnowledgeGraph) -> Result<Arg> {
    match term {
        Term::Var(v) if v == blank => Ok(Arg::Known(candidate)),
        Term::Var(v) => Err(Error::UnsupportedQuery(format!("free variable {v:?} besides the blank {blank:?}"))),
        Term::Entity(name) => Ok(g.entity_id(name).map_or(Arg::Unknown, Arg::Known)),
    }
}

/// Probability that `candidate` fills the blank: the product of the
/// conjunct probabilities. Predicates the model never saw score as `unknown`.
pub fn candidate_probability<F>(q: &LogicalForm, candidate: EntityId, g: &KnowledgeGraph, model: &PredicateModel, paths: &mut F) -> Result<f64>
where
    F: FnMut(&[EntityId]) -> Result<Vec<PathFeature>>,
{
    let blank = q
        .blank
        .as_deref()
        .ok_or_else(|| Error::UnsupportedQuery("query has no blank variable".into()))?;
    let conjuncts = q
        .categories
        .iter()
        .map(|(p, t)| (Predicate::category(p.as_str()), vec![t]))
        .chain(q.relations.iter().map(|(p, a, b)| (Predicate::relation(p.as_str()), vec![a, b])));
    let mut prob = 1.0;
    for (pred, terms) in conjuncts {
        let pred = if model.contains(&pred) {
            pred
        } else {
            Predicate {
                name: UNKNOWN_PREDICATE.to_string(),
                arity: pred.arity,
            }
        };
        let mut args = Vec::with_capacity(terms.len());
        let mut detached = false;
        for t in terms {
            match bind(t, blank, candidate, g)? {
                Arg::Known(e) => args.push(e),
                Arg::Unknown => detached = true,
            }
        }
        let p = if detached {
            detached_probability(model, &pred)
        } else if model.contains(&pred) {
            let psi = if model.mode() == Mode::Distributional {
                FeatureVector::default()
            } else {
                model.restrict(&pred, &paths(&args)?)
            };
            model.score(&pred, &args, &psi)?
        } else {
            model.score(&pred, &args, &FeatureVector::default())?
        };
        prob *= p;
    }
    Ok(prob)
}

fn by_probability_then_name(g: &KnowledgeGraph) -> impl Fn(&(EntityId, f64), &(EntityId, f64)) -> Ordering + '_ {
    move |a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| g.entity_name(a.0).unwrap_or("").cmp(g.entity_name(b.0).unwrap_or("")))
    }
}

/// Scores every candidate, keeps those with non-zero probability, sorts by
/// probability (ties by entity name), and truncates to [`MAX_ANSWERS`].
pub fn execute_query<F>(
    query_id: &str,
    q: &LogicalForm,
    cands: &CandidateSet,
    g: &KnowledgeGraph,
    model: &PredicateModel,
    mut paths: F,
) -> Result<RankedAnswers>
where
    F: FnMut(&[EntityId]) -> Result<Vec<PathFeature>>,
{
    let mut answers = Vec::new();
    for e in cands.entities() {
        let p = candidate_probability(q, e, g, model, &mut paths)?;
        if p > 0.0 {
            answers.push((e, p));
        }
    }
    answers.sort_by(by_probability_then_name(g));
    answers.truncate(MAX_ANSWERS);
    let scored = answers.len();
    Ok(RankedAnswers {
        query_id: query_id.to_string(),
        answers,
        scored,
    })
}

/// Keeps the positively scored prefix and appends every KB-connected
/// candidate not already in it, most-connected first, then by name.
pub fn append_kb_candidates(scored: &RankedAnswers, cands: &CandidateSet, g: &KnowledgeGraph) -> RankedAnswers {
    let mut answers: Vec<(EntityId, f64)> = scored.answers[..scored.scored]
        .iter()
        .copied()
        .filter(|(_, p)| *p > 0.0)
        .collect();
    let prefix = answers.len();
    let present: BTreeSet<EntityId> = answers.iter().map(|(e, _)| *e).collect();
    let mut tail: Vec<(EntityId, usize)> = cands
        .entries
        .iter()
        .filter(|(e, info)| info.provenance.kb_connected() && !present.contains(e))
        .map(|(e, info)| (*e, info.kb_links))
        .collect();
    tail.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| g.entity_name(a.0).unwrap_or("").cmp(g.entity_name(b.0).unwrap_or("")))
    });
    answers.extend(tail.into_iter().map(|(e, _)| (e, 0.0)));
    answers.truncate(MAX_ANSWERS);
    RankedAnswers {
        query_id: scored.query_id.clone(),
        answers,
        scored: prefix.min(MAX_ANSWERS),
    }
}

/// Writes `queryId<TAB>rank<TAB>entity<TAB>probability`, ranks from 1.
pub fn write_run<W: Write>(runs: &[RankedAnswers], g: &KnowledgeGraph, mut w: W) -> Result<()> {
    for r in runs {
        for (i, (e, p)) in r.answers.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", r.query_id, i + 1, g.entity_name(*e)?, p).map_err(|e| Error::io("<run>", e))?;
        }
    }
    Ok(())
}
