// Brute-force reference implementations shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ovsp_core::eval::ApMode;
use ovsp_core::feature_select::FeatureCounts;
use ovsp_core::sfe::FeatureId;
use ovsp_core::model::{EntityKey, Side};
use ovsp_core::{EntityId, KnowledgeGraph, Mode, ModelConfig, PathFeature, Predicate, PredicateModel, RelationId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Triple = (usize, usize, usize);

pub fn node(i: usize) -> String {
    format!("n{i:02}")
}

pub fn label(l: usize) -> String {
    format!("r{l}")
}

pub fn build_graph(triples: &[Triple]) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for &(s, l, o) in triples {
        g.add_triple(&node(s), &label(l), &node(o)).unwrap();
    }
    g
}

pub fn random_triples<R: Rng>(rng: &mut R, max_nodes: usize, max_edges: usize, labels: usize) -> Vec<Triple> {
    let n = rng.gen_range(2..=max_nodes);
    let m = rng.gen_range(1..=max_edges);
    (0..m)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..labels), rng.gen_range(0..n)))
        .collect()
}

/// One traversal step from `at`: (edge name, next node), scanning the raw triple list.
fn steps(triples: &[Triple], at: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for &(s, l, o) in triples {
        if s == at {
            out.push((label(l), o));
        }
        if o == at {
            out.push((format!("{}_inv", label(l)), s));
        }
    }
    out
}

fn dfs(
    triples: &[Triple],
    visited: &mut Vec<usize>,
    names: &mut Vec<String>,
    max_len: usize,
    emit: &mut dyn FnMut(&[String], usize),
) {
    if names.len() == max_len {
        return;
    }
    let at = *visited.last().unwrap();
    for (name, next) in steps(triples, at) {
        if visited.contains(&next) {
            continue;
        }
        names.push(name);
        visited.push(next);
        emit(names, next);
        dfs(triples, visited, names, max_len, emit);
        visited.pop();
        names.pop();
    }
}

/// Formatted pair features `a ~> b`: simple paths that reach `b` as their last node.
pub fn oracle_pair(triples: &[Triple], a: usize, b: usize, max_len: usize) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    if a == b {
        return out;
    }
    let mut visited = vec![a];
    let mut names = Vec::new();
    // paths through b are generated too but only those ending at b count,
    // and a simple path ending at b never passed through it before
    dfs(triples, &mut visited, &mut names, max_len, &mut |p, end| {
        if end == b {
            out.insert(format!("<{}>", p.join("->")));
        }
    });
    out
}

pub fn oracle_entity(triples: &[Triple], a: usize, max_len: usize) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut visited = vec![a];
    let mut names = Vec::new();
    dfs(triples, &mut visited, &mut names, max_len, &mut |p, end| {
        let f = format!("<{}>", p.join("->"));
        out.insert(format!("{f}:{}", node(end)));
        out.insert(f);
    });
    out
}

pub fn nodes_of(triples: &[Triple]) -> BTreeSet<usize> {
    triples.iter().flat_map(|&(s, _, o)| [s, o]).collect()
}

/// Score, filter, sort from the raw definition. Returns (feature, pmi) per predicate.
pub fn oracle_top_k(
    counts: &FeatureCounts,
    preds: &[Predicate],
    features: &[FeatureId],
    k: usize,
    min_feat_count: u64,
    name: &dyn Fn(FeatureId) -> String,
) -> BTreeMap<Predicate, Vec<(FeatureId, f64)>> {
    let mut out = BTreeMap::new();
    for p in preds {
        if counts.count_pred(p) == 0 {
            continue;
        }
        let mut rows: Vec<(FeatureId, u64, u64, u64)> = features
            .iter()
            .filter(|&&f| counts.count_joint(p, f) > 0 && counts.count_feat(f) >= min_feat_count)
            .map(|&f| (f, counts.count_joint(p, f), counts.count_pred(p), counts.count_feat(f)))
            .collect();
        // j1/(p*c1) > j2/(p*c2)  <=>  j1*c2 > j2*c1 (same predicate count)
        rows.sort_by(|x, y| {
            (y.1 * x.3)
                .cmp(&(x.1 * y.3))
                .then(y.1.cmp(&x.1))
                .then(name(x.0).cmp(&name(y.0)))
        });
        rows.truncate(k);
        out.insert(
            p.clone(),
            rows.into_iter()
                .map(|(f, j, cp, cf)| (f, j as f64 / (cp as f64 * cf as f64)))
                .collect(),
        );
    }
    out
}

pub fn oracle_ap(flags: &[bool], annotated: usize, mode: ApMode) -> f64 {
    let mut total = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let correct_so_far = flags[..=k].iter().filter(|&&c| c).count();
            total += correct_so_far as f64 / (k + 1) as f64;
        }
    }
    let hits = flags.iter().filter(|&&c| c).count();
    let denom = match mode {
        ApMode::Paper => flags.len(),
        ApMode::Standard => annotated.max(hits),
    };
    if denom == 0 {
        0.0
    } else {
        total / denom as f64
    }
}

pub fn oracle_rr(flags: &[bool]) -> f64 {
    for (k, &c) in flags.iter().enumerate() {
        if c {
            return 1.0 / (k as f64 + 1.0);
        }
    }
    0.0
}

/// Random pool and run text: (pool tsv, run tsv, per-query (flags, annotated)).
pub struct RandomEval {
    pub pool: String,
    pub run: String,
    pub truth: BTreeMap<String, (Vec<bool>, usize)>,
}

pub fn random_eval<R: Rng>(rng: &mut R) -> RandomEval {
    let queries = rng.gen_range(1..=8);
    let mut pool = String::new();
    let mut run = String::new();
    let mut truth = BTreeMap::new();
    for q in 0..queries {
        let qid = format!("q{q}");
        let universe = rng.gen_range(1..=20);
        // judgment per entity: None (unjudged), Some(bool)
        let judged: Vec<Option<bool>> = (0..universe)
            .map(|_| match rng.gen_range(0..4) {
                0 => None,
                1 => Some(true),
                _ => Some(false),
            })
            .collect();
        let mut annotated = 0;
        let mut any = false;
        for (e, j) in judged.iter().enumerate() {
            if let Some(c) = j {
                pool.push_str(&format!("{qid}\te{e}\t{}\n", *c as u8));
                annotated += *c as usize;
                any = true;
            }
        }
        if !any {
            pool.push_str(&format!("{qid}\tnobody\t0\n"));
        }
        let returned = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..=universe) };
        let mut order: Vec<usize> = (0..universe).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut flags = Vec::new();
        for (rank, &e) in order[..returned].iter().enumerate() {
            let prob = 1.0 - rank as f64 / 100.0;
            run.push_str(&format!("{qid}\t{}\te{e}\t{prob}\n", rank + 1));
            flags.push(judged[e].unwrap_or(false));
        }
        truth.insert(qid, (flags, annotated));
    }
    RandomEval { pool, run, truth }
}

/// Scalar logistic function, written out directly.
pub fn plain_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn toy_model(mode: Mode, rng: &mut ChaCha8Rng, dim: usize) -> (PredicateModel, Vec<PathFeature>) {
    let cfg = ModelConfig { mode, dim, ..ModelConfig::default() };
    let mut m = PredicateModel::empty(cfg).unwrap();
    let feats: Vec<PathFeature> = (0..6).map(|i| PathFeature::path(vec![RelationId(2 * i)])).collect();
    for p in [Predicate::category("c"), Predicate::relation("r")] {
        let id = m.add_predicate(&p, &feats);
        let params = m.params_mut(id);
        params.theta = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for w in params.omega.iter_mut() {
            w.1 = rng.gen_range(-2.0..2.0);
        }
    }
    for e in 0..4 {
        m.set_phi(EntityKey::Entity(EntityId(e)), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        m.set_phi(EntityKey::Pair(EntityId(e), EntityId(e + 1)), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    (m, feats)
}

pub fn subset(feats: &[PathFeature], mask: u8) -> Vec<PathFeature> {
    feats.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, f)| f.clone()).collect()
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for mode in Mode::ALL {
        let (mut m, feats) = toy_model(mode, &mut rng, 5);
        let p = Predicate::relation("r");
        let id = m.predicate_id(&p).unwrap();
        let pos_key = EntityKey::Pair(EntityId(0), EntityId(1));
        let neg_key = EntityKey::Pair(EntityId(2), EntityId(3));
        let pos_psi = m.restrict(&p, &subset(&feats, rng.gen()));
        let neg_psi = m.restrict(&p, &subset(&feats, rng.gen()));
        let loss = |m: &PredicateModel| {
            m.pair_loss(id, Side { key: pos_key, psi: &pos_psi }, Side { key: neg_key, psi: &neg_psi })
        };
        let grad = m.pair_gradient(id, Side { key: pos_key, psi: &pos_psi }, Side { key: neg_key, psi: &neg_psi });
        let mut check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        let trains_embeddings = mode != Mode::Formal;
        let trains_features = mode != Mode::Distributional;
        for i in 0..5 {
            let orig = m.params(id).theta[i];
            m.params_mut(id).theta[i] = orig + h;
            let up = loss(&m);
            m.params_mut(id).theta[i] = orig - h;
            let down = loss(&m);
            m.params_mut(id).theta[i] = orig;
            let numeric = if trains_embeddings { (up - down) / (2.0 * h) } else { 0.0 };
            check(grad.theta[i], numeric);
        }
        for key in [pos_key, neg_key] {
            let analytic = grad.phi.iter().find(|(k, _)| *k == key).map(|(_, v)| v.clone()).unwrap_or(vec![0.0; 5]);
            for i in 0..5 {
                let orig = m.phi(&key).unwrap()[i];
                m.phi_mut(&key).unwrap()[i] = orig + h;
                let up = loss(&m);
                m.phi_mut(&key).unwrap()[i] = orig - h;
                let down = loss(&m);
                m.phi_mut(&key).unwrap()[i] = orig;
                let numeric = if trains_embeddings { (up - down) / (2.0 * h) } else { 0.0 };
                check(analytic[i], numeric);
            }
        }
        for j in 0..m.params(id).omega.len() {
            let orig = m.params(id).omega[j].1;
            m.params_mut(id).omega[j].1 = orig + h;
            let up = loss(&m);
            m.params_mut(id).omega[j].1 = orig - h;
            let down = loss(&m);
            m.params_mut(id).omega[j].1 = orig;
            let numeric = if trains_features { (up - down) / (2.0 * h) } else { 0.0 };
            check(grad.omega[j], numeric);
        }
    }
    worst
}

