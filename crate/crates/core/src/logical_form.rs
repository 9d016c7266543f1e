//! Surface predicates, predicate instances extracted from entity-linked
//! text, and fill-in-the-blank logical forms.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};

/// Relation name reserved for predicates the trained model has never seen.
pub const UNKNOWN_PREDICATE: &str = "unknown";

/// Minimum predicate frequency kept by [`filter_rare_predicates`] by default.
pub const DEFAULT_MIN_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arity {
    Category,
    Relation,
}

impl Arity {
    pub fn from_usize(n: usize) -> Option<Self> {
        match n {
            1 => Some(Arity::Category),
            2 => Some(Arity::Relation),
            _ => None,
        }
    }

    pub fn as_usize(self) -> usize {
        match self {
            Arity::Category => 1,
            Arity::Relation => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Predicate {
    pub name: String,
    pub arity: Arity,
}

impl Predicate {
    pub fn category(name: impl Into<String>) -> Self {
        Predicate {
            name: name.into(),
            arity: Arity::Category,
        }
    }

    pub fn relation(name: impl Into<String>) -> Self {
        Predicate {
            name: name.into(),
            arity: Arity::Relation,
        }
    }

    pub fn unknown_relation() -> Self {
        Self::relation(UNKNOWN_PREDICATE)
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.arity.as_usize())
    }
}

pub(crate) fn validate_predicate_name(name: &str) -> std::result::Result<(), String> {
    if name.is_empty() {
        return Err("empty predicate name".into());
    }
    if name.chars().any(char::is_whitespace) {
        return Err(format!("predicate name {name:?} contains whitespace"));
    }
    Ok(())
}

/// Index of an interned predicate. Categories and relations are numbered
/// independently, so the arity is part of the id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PredicateId {
    pub arity: Arity,
    pub index: u32,
}

#[derive(Debug, Clone, Default)]
pub struct PredicateTable {
    categories: Vec<String>,
    relations: Vec<String>,
    index: HashMap<Predicate, PredicateId>,
}

impl PredicateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, p: &Predicate) -> PredicateId {
        if let Some(&id) = self.index.get(p) {
            return id;
        }
        let names = match p.arity {
            Arity::Category => &mut self.categories,
            Arity::Relation => &mut self.relations,
        };
        let id = PredicateId {
            arity: p.arity,
            index: names.len() as u32,
        };
        names.push(p.name.clone());
        self.index.insert(p.clone(), id);
        id
    }

    pub fn get(&self, p: &Predicate) -> Option<PredicateId> {
        self.index.get(p).copied()
    }

    pub fn predicate(&self, id: PredicateId) -> Predicate {
        let name = match id.arity {
            Arity::Category => &self.categories[id.index as usize],
            Arity::Relation => &self.relations[id.index as usize],
        };
        Predicate {
            name: name.clone(),
            arity: id.arity,
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len() + self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PredicateInstance {
    pub predicate: Predicate,
    pub args: Vec<EntityId>,
}

impl PredicateInstance {
    pub fn new(predicate: Predicate, args: Vec<EntityId>) -> Result<Self> {
        if predicate.arity.as_usize() != args.len() {
            return Err(Error::Validation(format!(
                "predicate {predicate} applied to {} arguments",
                args.len()
            )));
        }
        Ok(PredicateInstance { predicate, args })
    }

    pub fn category(name: &str, e: EntityId) -> Self {
        PredicateInstance {
            predicate: Predicate::category(name),
            args: vec![e],
        }
    }

    pub fn relation(name: &str, e1: EntityId, e2: EntityId) -> Self {
        PredicateInstance {
            predicate: Predicate::relation(name),
            args: vec![e1, e2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Noun,
    Adj,
    Prep,
    Poss,
    Entity,
    Other,
}

impl FromStr for TokenClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "NOUN" => TokenClass::Noun,
            "ADJ" => TokenClass::Adj,
            "PREP" => TokenClass::Prep,
            "POSS" => TokenClass::Poss,
            "ENTITY" => TokenClass::Entity,
            "OTHER" => TokenClass::Other,
            _ => return Err(format!("unknown token class {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub class: TokenClass,
}

impl Token {
    pub fn new(surface: &str, class: TokenClass) -> Self {
        Token {
            surface: surface.to_string(),
            class,
        }
    }
}

/// Token span `[start, end)` linked to an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    tokens: Vec<Token>,
    mentions: Vec<Mention>,
}

impl AnnotatedSentence {
    /// Validates spans: in bounds, non-empty, non-overlapping, and covering
    /// every ENTITY token exactly once. Mentions are kept in span order.
    pub fn new(tokens: Vec<Token>, mut mentions: Vec<Mention>) -> Result<Self> {
        mentions.sort_by_key(|m| (m.start, m.end));
        let mut covered = vec![false; tokens.len()];
        for m in &mentions {
            if m.start >= m.end || m.end > tokens.len() {
                return Err(Error::Validation(format!(
                    "mention span [{}, {}) out of bounds for {} tokens",
                    m.start,
                    m.end,
                    tokens.len()
                )));
            }
            for c in &mut covered[m.start..m.end] {
                if *c {
                    return Err(Error::Validation(format!(
                        "mention span [{}, {}) overlaps another mention",
                        m.start, m.end
                    )));
                }
                *c = true;
            }
        }
        if let Some(i) = tokens
            .iter()
            .zip(&covered)
            .position(|(t, c)| t.class == TokenClass::Entity && !c)
        {
            return Err(Error::Validation(format!(
                "ENTITY token {:?} at {i} is not inside a mention",
                tokens[i].surface
            )));
        }
        Ok(AnnotatedSentence { tokens, mentions })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn mentions(&self) -> &[Mention] {
        &self.mentions
    }
}

/// A sentence position after collapsing each mention into one unit.
#[derive(Clone, Copy)]
enum Unit<'a> {
    Mention(EntityId),
    Word(&'a Token),
}

impl<'a> Unit<'a> {
    fn word(self) -> Option<&'a Token> {
        match self {
            Unit::Word(t) => Some(t),
            Unit::Mention(_) => None,
        }
    }

    fn entity(self) -> Option<EntityId> {
        match self {
            Unit::Mention(e) => Some(e),
            Unit::Word(_) => None,
        }
    }
}

fn is_modifier(t: &Token) -> bool {
    matches!(t.class, TokenClass::Noun | TokenClass::Adj)
}

fn is_comma(t: &Token) -> bool {
    t.surface == ","
}

fn is_determiner(t: &Token) -> bool {
    t.class == TokenClass::Other && matches!(t.surface.to_lowercase().as_str(), "the" | "a" | "an")
}

fn joined(words: &[&Token]) -> String {
    words
        .iter()
        .map(|t| t.surface.to_lowercase())
        .collect::<Vec<_>>()
        .join("_")
}

/// Noun/adjective run ending at a noun, read forward from `start`.
/// Returns the run and the position just past it.
fn modifier_run<'a>(units: &[Unit<'a>], start: usize) -> Option<(Vec<&'a Token>, usize)> {
    let mut run = Vec::new();
    let mut i = start;
    while let Some(t) = units.get(i).and_then(|u| u.word()).filter(|t| is_modifier(t)) {
        run.push(t);
        i += 1;
    }
    match run.last() {
        Some(t) if t.class == TokenClass::Noun => Some((run, i)),
        _ => None,
    }
}

/// `e1 , [det] h.. p [det..] e2` with head noun run `h..` and preposition `p`.
fn appositive_name(between: &[Unit<'_>]) -> Option<String> {
    let words: Vec<&Token> = between.iter().map(|u| u.word()).collect::<Option<_>>()?;
    let (first, rest) = words.split_first()?;
    if !is_comma(first) {
        return None;
    }
    let mut i = 0;
    if rest.first().is_some_and(|t| is_determiner(t)) {
        i = 1;
    }
    let run_start = i;
    while rest.get(i).is_some_and(|t| is_modifier(t)) {
        i += 1;
    }
    let run = &rest[run_start..i];
    if run.last()?.class != TokenClass::Noun {
        return None;
    }
    let prep = rest.get(i).filter(|t| t.class == TokenClass::Prep)?;
    if !rest[i + 1..].iter().all(|t| is_determiner(t)) {
        return None;
    }
    Some(format!("{}_{}", joined(run), prep.surface.to_lowercase()))
}

/// Emits predicate instances from the four surface patterns:
///
/// * category `n(e)`: a noun run directly before mention `e`, `n` its last noun;
/// * noun compound `w1_.._wk_N/N(e1, e2)`: mentions separated only by nouns/adjectives;
/// * appositive preposition `h_p(e1, e2)`: `e1 , h p e2`;
/// * possessive `'s_h(e1, e2)`: `e1 's h` next to mention `e2`, on either side.
///
/// Relations are only formed between adjacent mentions.
pub fn extract_instances(s: &AnnotatedSentence) -> Vec<PredicateInstance> {
    let mut units = Vec::new();
    let mut mention_at = Vec::new();
    let mut next = s.mentions.iter().peekable();
    let mut i = 0;
    while i < s.tokens.len() {
        match next.peek() {
            Some(m) if m.start == i => {
                mention_at.push(units.len());
                units.push(Unit::Mention(m.entity));
                i = m.end;
                next.next();
            }
            _ => {
                units.push(Unit::Word(&s.tokens[i]));
                i += 1;
            }
        }
    }

    let mut out = Vec::new();
    for (mi, &pos) in mention_at.iter().enumerate() {
        let e = units[pos].entity().expect("mention unit");

        let mut j = pos;
        while j > 0 && units[j - 1].word().is_some_and(is_modifier) {
            j -= 1;
        }
        if j < pos {
            let head = units[pos - 1].word().expect("word unit");
            if head.class == TokenClass::Noun {
                out.push(PredicateInstance::category(&head.surface.to_lowercase(), e));
            }
        }

        if mi > 0 {
            let prev_pos = mention_at[mi - 1];
            let prev = units[prev_pos].entity().expect("mention unit");
            let between = &units[prev_pos + 1..pos];
            let compound: Option<Vec<&Token>> = between.iter().map(|u| u.word()).collect();
            match compound {
                Some(words) if !words.is_empty() && words.iter().all(|t| is_modifier(t)) => {
                    out.push(PredicateInstance::relation(&format!("{}_N/N", joined(&words)), prev, e));
                }
                _ => {
                    if let Some(name) = appositive_name(between) {
                        out.push(PredicateInstance::relation(&name, prev, e));
                    }
                }
            }
        }

        let poss = units
            .get(pos + 1)
            .and_then(|u| u.word())
            .is_some_and(|t| t.class == TokenClass::Poss);
        if poss {
            if let Some((run, after)) = modifier_run(&units, pos + 2) {
                let following = match units.get(after) {
                    Some(Unit::Mention(x)) => Some(*x),
                    Some(Unit::Word(t)) if is_comma(t) => units.get(after + 1).and_then(|u| u.entity()),
                    _ => None,
                };
                let preceding = if pos >= 2 && units[pos - 1].word().is_some_and(is_comma) {
                    units[pos - 2].entity()
                } else {
                    None
                };
                if let Some(other) = following.or(preceding) {
                    out.push(PredicateInstance::relation(&format!("'s_{}", joined(&run)), e, other));
                }
            }
        }
    }
    out
}

/// Drops every instance whose `(name, arity)` occurs fewer than `min_count`
/// times. Returns the kept instances (input order) and the dropped predicates.
pub fn filter_rare_predicates(
    instances: &[PredicateInstance],
    min_count: usize,
) -> (Vec<PredicateInstance>, BTreeSet<Predicate>) {
    let mut counts: HashMap<&Predicate, usize> = HashMap::new();
    for inst in instances {
        *counts.entry(&inst.predicate).or_default() += 1;
    }
    let dropped: BTreeSet<Predicate> = counts
        .iter()
        .filter(|(_, &c)| c < min_count)
        .map(|(p, _)| (*p).clone())
        .collect();
    let kept = instances
        .iter()
        .filter(|i| !dropped.contains(&i.predicate))
        .cloned()
        .collect();
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Entity(String),
    Var(String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Entity(s) | Term::Var(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LogicalForm {
    pub categories: Vec<(String, Term)>,
    pub relations: Vec<(String, Term, Term)>,
    pub blank: Option<String>,
}

impl LogicalForm {
    /// Entity names mentioned anywhere in the form, in first-use order.
    pub fn entities(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        let terms = self
            .categories
            .iter()
            .map(|(_, t)| t)
            .chain(self.relations.iter().flat_map(|(_, a, b)| [a, b]));
        for t in terms {
            if let Term::Entity(name) = t {
                if !seen.contains(&name.as_str()) {
                    seen.push(name.as_str());
                }
            }
        }
        seen
    }
}

impl fmt::Display for LogicalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(b) = &self.blank {
            write!(f, "λ{b}.")?;
        }
        let conjuncts: Vec<String> = self
            .categories
            .iter()
            .map(|(p, t)| format!("{p}({t})"))
            .chain(self.relations.iter().map(|(p, a, b)| format!("{p}({a}, {b})")))
            .collect();
        f.write_str(&conjuncts.join(" ∧ "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub form: LogicalForm,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuery {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    categories: Vec<Vec<String>>,
    #[serde(default)]
    relations: Vec<Vec<String>>,
    blank: String,
}

fn parse_error(position: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        position: position.into(),
        message: message.into(),
    }
}

fn parse_raw_query(line: &str) -> Result<(Option<String>, LogicalForm)> {
    let raw: RawQuery = serde_json::from_str(line)
        .map_err(|e| parse_error(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let blank = raw.blank;
    if blank.is_empty() {
        return Err(parse_error("blank", "blank variable name is empty"));
    }
    let term = |s: &str| {
        if s == blank {
            Term::Var(s.to_string())
        } else {
            Term::Entity(s.to_string())
        }
    };
    let mut form = LogicalForm::default();
    for (i, c) in raw.categories.iter().enumerate() {
        let [name, arg] = c.as_slice() else {
            return Err(parse_error(
                format!("categories[{i}]"),
                format!("category conjunct needs [predicate, term], got {} fields", c.len()),
            ));
        };
        validate_predicate_name(name).map_err(|m| parse_error(format!("categories[{i}]"), m))?;
        form.categories.push((name.clone(), term(arg)));
    }
    for (i, r) in raw.relations.iter().enumerate() {
        let [name, a, b] = r.as_slice() else {
            return Err(parse_error(
                format!("relations[{i}]"),
                format!("relation conjunct needs [predicate, term, term], got {} fields", r.len()),
            ));
        };
        validate_predicate_name(name).map_err(|m| parse_error(format!("relations[{i}]"), m))?;
        form.relations.push((name.clone(), term(a), term(b)));
    }
    let used = form.categories.iter().any(|(_, t)| matches!(t, Term::Var(_)))
        || form
            .relations
            .iter()
            .any(|(_, a, b)| matches!(a, Term::Var(_)) || matches!(b, Term::Var(_)));
    if !used {
        return Err(parse_error("blank", format!("blank variable {blank:?} appears in no conjunct")));
    }
    form.blank = Some(blank);
    Ok((raw.id, form))
}

/// Parses one JSON query record such as
/// `{"categories":[["architect","x"]],"relations":[["architect_N/N","Italy","x"]],"blank":"x"}`.
/// Every argument other than the blank variable is an entity name.
pub fn parse_query(line: &str) -> Result<LogicalForm> {
    parse_raw_query(line).map(|(_, form)| form)
}

/// Like [`parse_query`] but requires the record's `"id"` field.
pub fn parse_query_record(line: &str) -> Result<Query> {
    let (id, form) = parse_raw_query(line)?;
    let id = id.ok_or_else(|| parse_error("id", "query record has no \"id\" field"))?;
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(parse_error("id", format!("query id {id:?} is empty or contains whitespace")));
    }
    Ok(Query { id, form })
}

pub fn parse_query_file(text: &str) -> Result<Vec<Query>> {
    let mut out: Vec<Query> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q = parse_query_record(line).map_err(|e| Error::load("queries", i + 1, e.to_string()))?;
        if out.iter().any(|p| p.id == q.id) {
            return Err(Error::load("queries", i + 1, format!("duplicate query id {:?}", q.id)));
        }
        out.push(q);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    predicate: String,
    arity: usize,
    args: Vec<String>,
}

#[derive(Deserialize)]
struct SentenceRecord {
    tokens: Vec<(String, String)>,
    mentions: Vec<(usize, usize, String)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
enum CorpusRecord {
    #[serde(rename = "instance")]
    Instance(InstanceRecord),
    #[serde(rename = "sentence")]
    Sentence(SentenceRecord),
}

/// Reads a line-delimited training corpus. Instance records are taken as-is;
/// sentence records go through [`extract_instances`]. Entity names not yet
/// in `graph` are registered as isolated nodes.
pub fn load_corpus(text: &str, graph: &mut KnowledgeGraph) -> Result<Vec<PredicateInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |m: String| Error::load("corpus", i + 1, m);
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        match record {
            CorpusRecord::Instance(r) => {
                let arity = Arity::from_usize(r.arity).ok_or_else(|| fail(format!("arity {} not in {{1, 2}}", r.arity)))?;
                validate_predicate_name(&r.predicate).map_err(fail)?;
                if r.args.len() != r.arity {
                    return Err(fail(format!("arity {} but {} arguments", r.arity, r.args.len())));
                }
                let args = r
                    .args
                    .iter()
                    .map(|a| graph.ensure_entity(a))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| fail(e.to_string()))?;
                out.push(PredicateInstance {
                    predicate: Predicate { name: r.predicate, arity },
                    args,
                });
            }
            CorpusRecord::Sentence(r) => {
                let tokens = r
                    .tokens
                    .iter()
                    .map(|(s, c)| c.parse().map(|class| Token::new(s, class)))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(fail)?;
                let mentions = r
                    .mentions
                    .iter()
                    .map(|(start, end, name)| {
                        graph.ensure_entity(name).map(|entity| Mention {
                            start: *start,
                            end: *end,
                            entity,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| fail(e.to_string()))?;
                let sentence = AnnotatedSentence::new(tokens, mentions).map_err(|e| fail(e.to_string()))?;
                out.extend(extract_instances(&sentence));
            }
        }
    }
    Ok(out)
}

/// Writes instances as `{"instance": ...}` corpus records.
pub fn write_instances<W: Write>(instances: &[PredicateInstance], graph: &KnowledgeGraph, mut w: W) -> Result<()> {
    for inst in instances {
        let args = inst
            .args
            .iter()
            .map(|&a| graph.entity_name(a).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        let record = serde_json::json!({
            "instance": InstanceRecord {
                predicate: inst.predicate.name.clone(),
                arity: inst.predicate.arity.as_usize(),
                args,
            }
        });
        writeln!(w, "{record}").map_err(|e| Error::io("<instances>", e))?;
    }
    Ok(())
}
