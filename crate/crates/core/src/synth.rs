//! Small fixtures: the Palladio graph and a seeded synthetic world whose
//! corpus predicates are noisy correlates of KB queries.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::kg::KnowledgeGraph;

/// The five-triple graph around Palladio.
pub fn palladio_graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for (s, r, o) in [
        ("Palladio", "nationality", "Italy"),
        ("Palladio", "type", "architect"),
        ("Palladio", "designed", "VillaCapra"),
        ("Italy", "type", "country"),
        ("VillaCapra", "located_in", "Italy"),
    ] {
        g.add_triple(s, r, o).expect("valid fixture triple");
    }
    g
}

/// Surface predicate planted as an exact copy of one KB relation, and the
/// pair feature it copies.
pub const EXACT_CORRELATE: (&str, &str) = ("'s_capital", "<capital_of_inv>");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticFixture {
    pub kb: String,
    pub mediators: String,
    pub corpus: String,
    pub queries: String,
    pub pool: String,
}

const PROFESSIONS: [&str; 4] = ["architect", "politician", "engineer", "writer"];
const COUNTRIES: usize = 16;
const CITIES_PER_COUNTRY: usize = 3;
const PERSONS: usize = 80;
const ORGS: usize = 24;
const BUILDINGS: usize = 32;
const MARRIAGES: usize = 12;
const RESIDENTIAL_CITIES: usize = 10;
const RESIDENTS_PER_CITY: usize = 4;

/// Names with a shuffled numbering so that alphabetical order carries no
/// information about an entity's role.
fn names(prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids.into_iter().map(|i| format!("{prefix}{i:03}")).collect()
}

#[derive(Default)]
struct Sentence {
    tokens: Vec<(String, &'static str)>,
    mentions: Vec<(usize, usize, String)>,
}

impl Sentence {
    fn entity(mut self, name: &str) -> Self {
        let i = self.tokens.len();
        self.tokens.push((name.to_string(), "ENTITY"));
        self.mentions.push((i, i + 1, name.to_string()));
        self
    }

    fn word(mut self, s: &str, class: &'static str) -> Self {
        self.tokens.push((s.to_string(), class));
        self
    }

    fn record(&self) -> String {
        json!({"sentence": {"tokens": self.tokens, "mentions": self.mentions}}).to_string()
    }
}

fn category_sentence(noun: &str, e: &str) -> String {
    Sentence::default()
        .word("the", "OTHER")
        .word(noun, "NOUN")
        .entity(e)
        .record()
}

fn compound_sentence(e1: &str, noun: &str, e2: &str) -> String {
    Sentence::default().entity(e1).word(noun, "NOUN").entity(e2).record()
}

fn appositive_sentence(e1: &str, noun: &str, prep: &str, e2: &str) -> String {
    Sentence::default()
        .entity(e1)
        .word(",", "OTHER")
        .word(noun, "NOUN")
        .word(prep, "PREP")
        .entity(e2)
        .record()
}

fn possessive_sentence(e1: &str, noun: &str, e2: &str) -> String {
    Sentence::default()
        .entity(e1)
        .word("'s", "POSS")
        .word(noun, "NOUN")
        .word(",", "OTHER")
        .entity(e2)
        .record()
}

struct Queries {
    lines: Vec<String>,
    truth: Vec<(String, String, BTreeSet<String>)>,
}

impl Queries {
    fn add(&mut self, categories: &[(&str, &str)], relations: &[(&str, &str, &str)], anchor: &str, answers: BTreeSet<String>) {
        let id = format!("q{:03}", self.lines.len() + 1);
        let cats: Vec<[&str; 2]> = categories.iter().map(|(p, t)| [*p, *t]).collect();
        let rels: Vec<[&str; 3]> = relations.iter().map(|(p, a, b)| [*p, *a, *b]).collect();
        let mut rec = serde_json::Map::new();
        rec.insert("id".into(), json!(id));
        if !cats.is_empty() {
            rec.insert("categories".into(), json!(cats));
        }
        rec.insert("relations".into(), json!(rels));
        rec.insert("blank".into(), json!("x"));
        self.lines.push(serde_json::Value::Object(rec).to_string());
        self.truth.push((id, anchor.to_string(), answers));
    }
}

/// Generates the synthetic world for `seed`.
///
/// The KB has about 300 entities and 12 relations. Marriages and residences
/// are mediator nodes. Residents have no KB edge besides their residence, so
/// path features cannot tell two residents of one city apart; only the
/// corpus says which of them are celebrities. Queries ask about facts whose
/// entity pairs never occur in the corpus. The pool judges, for every query,
/// the true answers and every other KB neighbor of the query entity.
pub fn generate(seed: u64) -> SyntheticFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let countries = names("Nation", COUNTRIES, &mut rng);
    let city_names = names("City", COUNTRIES * CITIES_PER_COUNTRY, &mut rng);
    let persons = names("Person", PERSONS, &mut rng);
    let orgs = names("Org", ORGS, &mut rng);
    let buildings = names("Building", BUILDINGS, &mut rng);
    let marriages = names("Marriage", MARRIAGES, &mut rng);
    let residents = names("Resident", RESIDENTIAL_CITIES * RESIDENTS_PER_CITY, &mut rng);
    let residences = names("Residence", residents.len(), &mut rng);

    let mut triples: Vec<(String, &str, String)> = Vec::new();
    let mut t = |s: &str, r: &'static str, o: &str| triples.push((s.to_string(), r, o.to_string()));

    // cities[c][0] is the capital of country c
    let cities: Vec<&[String]> = city_names.chunks(CITIES_PER_COUNTRY).collect();
    for (c, name) in countries.iter().enumerate() {
        t(name, "type", "country");
        t(&cities[c][0], "capital_of", name);
        for city in cities[c] {
            t(city, "located_in", name);
            t(city, "type", "city");
        }
    }

    let profession = |i: usize| PROFESSIONS[i % PROFESSIONS.len()];
    let mut nationality: Vec<usize> = (0..PERSONS).map(|_| rng.gen_range(0..COUNTRIES)).collect();
    let politicians: Vec<usize> = (0..PERSONS).filter(|i| profession(*i) == "politician").collect();
    let mut led: Vec<usize> = (0..COUNTRIES).collect();
    led.shuffle(&mut rng);
    let leaders: Vec<(usize, usize)> = politicians.iter().copied().zip(led).collect();
    for &(p, c) in &leaders {
        nationality[p] = c;
    }
    let born_in: Vec<String> = (0..PERSONS)
        .map(|i| {
            if rng.gen_bool(0.8) {
                cities[nationality[i]][rng.gen_range(0..CITIES_PER_COUNTRY)].clone()
            } else {
                city_names[rng.gen_range(0..city_names.len())].clone()
            }
        })
        .collect();
    let celebrity: Vec<bool> = (0..PERSONS).map(|_| rng.gen_bool(0.4)).collect();
    for i in 0..PERSONS {
        t(&persons[i], "type", profession(i));
        t(&persons[i], "nationality", &countries[nationality[i]]);
        t(&persons[i], "born_in", &born_in[i]);
    }
    for &(p, c) in &leaders {
        t(&persons[p], "leader_of", &countries[c]);
    }

    let architects: Vec<usize> = (0..PERSONS).filter(|i| profession(*i) == "architect").collect();
    let mut designer = Vec::with_capacity(BUILDINGS);
    for b in &buildings {
        let a = architects[rng.gen_range(0..architects.len())];
        let city = if rng.gen_bool(0.7) {
            &cities[nationality[a]][rng.gen_range(0..CITIES_PER_COUNTRY)]
        } else {
            &city_names[rng.gen_range(0..city_names.len())]
        };
        t(b, "type", "building");
        t(&persons[a], "designed", b);
        t(b, "building_in", city);
        designer.push(a);
    }

    let mut hq = Vec::with_capacity(ORGS);
    for o in &orgs {
        let city = city_names[rng.gen_range(0..city_names.len())].clone();
        t(o, "type", "company");
        t(o, "headquartered_in", &city);
        hq.push(city);
    }
    let mut employer: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, person) in persons.iter().enumerate() {
        let works = match profession(i) {
            "engineer" => true,
            "writer" => rng.gen_bool(0.5),
            _ => false,
        };
        if works {
            let o = rng.gen_range(0..ORGS);
            t(person, "works_for", &orgs[o]);
            employer.insert(i, o);
        }
    }

    let mut shuffled: Vec<usize> = (0..PERSONS).collect();
    shuffled.shuffle(&mut rng);
    let mut spouse: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, m) in marriages.iter().enumerate() {
        let (a, b) = (shuffled[2 * k], shuffled[2 * k + 1]);
        t(&persons[a], "marriage", m);
        t(&persons[b], "marriage", m);
        spouse.insert(a, b);
        spouse.insert(b, a);
    }

    let mut residential: Vec<&str> = city_names.iter().map(String::as_str).collect();
    residential.shuffle(&mut rng);
    residential.truncate(RESIDENTIAL_CITIES);
    let home = |r: usize| residential[r / RESIDENTS_PER_CITY];
    for (r, name) in residents.iter().enumerate() {
        t(name, "residence", &residences[r]);
        t(&residences[r], "located_in", home(r));
    }
    let resident_celebrity: Vec<bool> = (0..residents.len()).map(|_| rng.gen_bool(0.5)).collect();

    let mut kb = String::new();
    for (s, r, o) in &triples {
        kb.push_str(&format!("{s}\t{r}\t{o}\n"));
    }
    let mediators: String = marriages.iter().chain(&residences).map(|m| format!("{m}\n")).collect();
    let (graph, _) = KnowledgeGraph::parse(&kb, Some(&mediators)).expect("generated KB is valid");

    let mut corpus: Vec<String> = Vec::new();
    let mut queries = Queries {
        lines: Vec::new(),
        truth: Vec::new(),
    };
    let repeat = |rng: &mut ChaCha8Rng| rng.gen_range(1..=2);

    // categories
    for i in 0..PERSONS {
        if rng.gen_bool(0.6) {
            let noun = if rng.gen_bool(0.05) {
                PROFESSIONS[rng.gen_range(0..PROFESSIONS.len())]
            } else {
                profession(i)
            };
            corpus.push(category_sentence(noun, &persons[i]));
        }
        let says_celebrity = if celebrity[i] { rng.gen_bool(0.85) } else { rng.gen_bool(0.05) };
        if says_celebrity {
            for _ in 0..repeat(&mut rng) {
                corpus.push(category_sentence("celebrity", &persons[i]));
            }
        }
    }
    for (r, name) in residents.iter().enumerate() {
        let says_celebrity = if resident_celebrity[r] { rng.gen_bool(0.9) } else { rng.gen_bool(0.05) };
        if says_celebrity {
            for _ in 0..repeat(&mut rng) {
                corpus.push(category_sentence("celebrity", name));
            }
        }
    }
    for cs in &cities {
        if rng.gen_bool(0.8) {
            corpus.push(category_sentence("capital", &cs[0]));
        }
        for c in cs.iter() {
            if rng.gen_bool(0.5) {
                corpus.push(category_sentence("city", c));
            }
        }
    }
    for o in &orgs {
        if rng.gen_bool(0.5) {
            corpus.push(category_sentence("company", o));
        }
    }

    // 's_capital: exact copy of capital_of, six countries held out
    let mut order: Vec<usize> = (0..COUNTRIES).collect();
    order.shuffle(&mut rng);
    let (held, kept) = order.split_at(6);
    for &c in kept {
        for _ in 0..repeat(&mut rng) {
            corpus.push(possessive_sentence(&countries[c], "capital", &cities[c][0]));
        }
    }
    for &c in held {
        let answers = BTreeSet::from([cities[c][0].clone()]);
        queries.add(&[], &[("'s_capital", &countries[c], "x")], &countries[c], answers);
    }

    // president_of: noisy copy of leader_of
    let mut order: Vec<usize> = (0..leaders.len()).collect();
    order.shuffle(&mut rng);
    let (held, kept) = order.split_at(6);
    for &k in kept {
        let (p, c) = leaders[k];
        corpus.push(appositive_sentence(&persons[p], "president", "of", &countries[c]));
        if rng.gen_bool(0.2) {
            let other = politicians[rng.gen_range(0..politicians.len())];
            corpus.push(appositive_sentence(&persons[other], "president", "of", &countries[c]));
        }
    }
    let held_countries: BTreeSet<usize> = held.iter().map(|&k| leaders[k].1).collect();
    for &k in held {
        let (p, c) = leaders[k];
        queries.add(&[], &[("president_of", "x", &countries[c])], &countries[c], BTreeSet::from([persons[p].clone()]));
    }

    // architect_N/N(country, architect): nationality plus profession
    let mut by_country: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &a in &architects {
        by_country.entry(nationality[a]).or_default().push(a);
    }
    let mut compound_queries = 0;
    for (&c, arch) in &by_country {
        let is_query = compound_queries < 8 && arch.len() >= 2 && !held_countries.contains(&c);
        for (k, &a) in arch.iter().enumerate() {
            // a query country keeps at least one architect out of the corpus
            let withhold = is_query && (k == 0 || rng.gen_bool(0.5));
            if !withhold && rng.gen_bool(0.7) {
                corpus.push(compound_sentence(&countries[c], "architect", &persons[a]));
            }
        }
        if rng.gen_bool(0.15) {
            let p = (0..PERSONS)
                .filter(|&p| nationality[p] == c && profession(p) != "architect")
                .collect::<Vec<_>>();
            if let Some(&p) = p.choose(&mut rng) {
                corpus.push(compound_sentence(&countries[c], "architect", &persons[p]));
            }
        }
        if is_query {
            compound_queries += 1;
            let answers = arch.iter().map(|&a| persons[a].clone()).collect();
            queries.add(
                &[("architect", "x")],
                &[("architect_N/N", &countries[c], "x")],
                &countries[c],
                answers,
            );
        }
    }

    // native_of: noisy copy of born_in, corpus only
    for i in 0..PERSONS {
        if rng.gen_bool(0.6) {
            let city = if rng.gen_bool(0.15) {
                &city_names[rng.gen_range(0..city_names.len())]
            } else {
                &born_in[i]
            };
            corpus.push(appositive_sentence(&persons[i], "native", "of", city));
        }
    }

    // resident_of: copy of the residence path; six cities held out entirely
    for (k, &city) in residential.iter().enumerate() {
        let people = k * RESIDENTS_PER_CITY..(k + 1) * RESIDENTS_PER_CITY;
        if k < 6 {
            let answers = people
                .filter(|&r| resident_celebrity[r])
                .map(|r| residents[r].clone())
                .collect();
            queries.add(&[("celebrity", "x")], &[("resident_of", "x", city)], city, answers);
        } else {
            for r in people {
                for _ in 0..repeat(&mut rng) {
                    corpus.push(appositive_sentence(&residents[r], "resident", "of", city));
                }
            }
        }
    }

    // designer_of: copy of designed
    let held: BTreeSet<usize> = rand::seq::index::sample(&mut rng, BUILDINGS, 8).into_iter().collect();
    for (b, &a) in designer.iter().enumerate() {
        if held.contains(&b) {
            queries.add(&[], &[("designer_of", "x", &buildings[b])], &buildings[b], BTreeSet::from([persons[a].clone()]));
        } else if rng.gen_bool(0.8) {
            corpus.push(appositive_sentence(&persons[a], "designer", "of", &buildings[b]));
        }
    }

    // 's_employer: copy of works_for
    let workers: Vec<usize> = employer.keys().copied().collect();
    let held: BTreeSet<usize> = workers.choose_multiple(&mut rng, 8).copied().collect();
    for (&p, &o) in &employer {
        if held.contains(&p) {
            queries.add(&[], &[("'s_employer", &persons[p], "x")], &persons[p], BTreeSet::from([orgs[o].clone()]));
        } else if rng.gen_bool(0.8) {
            corpus.push(possessive_sentence(&persons[p], "employer", &orgs[o]));
        }
    }

    // company_in: copy of headquartered_in
    let held: BTreeSet<usize> = rand::seq::index::sample(&mut rng, ORGS, 6).into_iter().collect();
    for (o, city) in hq.iter().enumerate() {
        if held.contains(&o) {
            queries.add(&[], &[("company_in", &orgs[o], "x")], &orgs[o], BTreeSet::from([city.clone()]));
        } else if rng.gen_bool(0.8) {
            corpus.push(appositive_sentence(&orgs[o], "company", "in", city));
        }
    }

    // 's_spouse: reachable only through a marriage mediator
    let married: Vec<usize> = spouse.keys().copied().filter(|a| a < &spouse[a]).collect();
    let held: BTreeSet<usize> = married.choose_multiple(&mut rng, 5).copied().collect();
    for &a in &married {
        let b = spouse[&a];
        if held.contains(&a) {
            queries.add(&[], &[("'s_spouse", &persons[a], "x")], &persons[a], BTreeSet::from([persons[b].clone()]));
        } else {
            corpus.push(possessive_sentence(&persons[a], "spouse", &persons[b]));
            corpus.push(possessive_sentence(&persons[b], "spouse", &persons[a]));
        }
    }

    // 's_friend has no KB counterpart at all
    for _ in 0..60 {
        let a = rng.gen_range(0..PERSONS);
        let b = rng.gen_range(0..PERSONS);
        if a != b && spouse.get(&a) != Some(&b) {
            corpus.push(possessive_sentence(&persons[a], "friend", &persons[b]));
        }
    }

    // too rare to survive filtering
    for _ in 0..3 {
        let a = rng.gen_range(0..ORGS);
        let b = (a + 1) % ORGS;
        corpus.push(compound_sentence(&orgs[a], "rival", &orgs[b]));
    }

    corpus.shuffle(&mut rng);
    let mut corpus_text = corpus.join("\n");
    corpus_text.push('\n');
    let mut query_text = queries.lines.join("\n");
    query_text.push('\n');

    let mut pool = String::new();
    for (id, anchor, answers) in &queries.truth {
        let e = graph.entity_id(anchor).expect("query entity in KB");
        let mut judged: BTreeMap<String, bool> = BTreeMap::new();
        let near = graph.neighbors(e).expect("valid id");
        let far = graph.mediator_neighbors(e).expect("valid id");
        for n in near.union(&far) {
            judged.insert(graph.entity_name(*n).expect("valid id").to_string(), false);
        }
        for a in answers {
            judged.insert(a.clone(), true);
        }
        for (name, ok) in judged {
            pool.push_str(&format!("{id}\t{name}\t{}\n", u8::from(ok)));
        }
    }

    SyntheticFixture {
        kb,
        mediators,
        corpus: corpus_text,
        queries: query_text,
        pool,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logical_form::{filter_rare_predicates, load_corpus, parse_query_file, Predicate, DEFAULT_MIN_COUNT};

    #[test]
    fn palladio_shape() {
        let g = palladio_graph();
        assert_eq!(g.entity_count(), 5);
        assert!(g.entity_id("VillaCapra").is_some());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(3), generate(3));
        assert_ne!(generate(3).corpus, generate(4).corpus);
    }

    #[test]
    fn world_size_and_queries() {
        let fx = generate(0);
        let (mut g, summary) = KnowledgeGraph::parse(&fx.kb, Some(&fx.mediators)).unwrap();
        assert!((280..=320).contains(&summary.entities), "{summary}");
        assert_eq!(summary.relation_labels, 12);
        let queries = parse_query_file(&fx.queries).unwrap();
        assert!(queries.len() >= 40, "{}", queries.len());
        let instances = load_corpus(&fx.corpus, &mut g).unwrap();
        let (kept, dropped) = filter_rare_predicates(&instances, DEFAULT_MIN_COUNT);
        assert!(dropped.contains(&Predicate::relation("rival_N/N")));
        assert!(kept.iter().any(|i| i.predicate == Predicate::relation(EXACT_CORRELATE.0)));
    }

    #[test]
    fn held_out_pairs_never_in_corpus() {
        let fx = generate(1);
        let (mut g, _) = KnowledgeGraph::parse(&fx.kb, Some(&fx.mediators)).unwrap();
        let instances = load_corpus(&fx.corpus, &mut g).unwrap();
        let pairs: BTreeSet<(String, String)> = instances
            .iter()
            .filter(|i| i.args.len() == 2)
            .map(|i| {
                let n = |k: usize| g.entity_name(i.args[k]).unwrap().to_string();
                (n(0), n(1))
            })
            .collect();
        for line in fx.pool.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f[2] != "1" {
                continue;
            }
            let q = parse_query_file(&fx.queries).unwrap().into_iter().find(|q| q.id == f[0]).unwrap();
            for (_, a, b) in &q.form.relations {
                let name = |t: &crate::logical_form::Term| match t {
                    crate::logical_form::Term::Entity(e) => e.clone(),
                    crate::logical_form::Term::Var(_) => f[1].to_string(),
                };
                if q.form.categories.is_empty() || q.form.categories[0].0 == "celebrity" {
                    assert!(!pairs.contains(&(name(a), name(b))), "{line}");
                }
            }
        }
    }
}
