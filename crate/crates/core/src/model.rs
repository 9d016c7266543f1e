//! Predicate execution models.
//!
//! The probability that a predicate instance holds is
//! `σ(θ_πᵀ φ_x + ω_πᵀ ψ_π(x))`, where `x` is an entity (categories) or an
//! ordered entity pair (relations). `θ`/`φ` are learned embeddings, `ψ_π(x)`
//! is the binary vector of `π`'s selected path features that hold for `x`,
//! and `ω_π` weights those features. The distributional mode drops the
//! `ω` term, the formal mode drops the `θᵀφ` term.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_select::SelectedFeatures;
use crate::kg::{EntityId, KnowledgeGraph};
use crate::logical_form::{Arity, Predicate, PredicateId, PredicateInstance, PredicateTable, UNKNOWN_PREDICATE};
use crate::sfe::{format_feature, parse_feature, FeatureId, FeatureTable, FeatureVector, PathFeature};

const MODEL_MAGIC: &str = "ovsp-model";
const MODEL_VERSION: u32 = 1;

/// Probability assigned to the reserved `unknown` predicate.
pub const UNKNOWN_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Distributional,
    Formal,
    Combined,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Distributional, Mode::Formal, Mode::Combined];

    fn uses_embeddings(self) -> bool {
        self != Mode::Formal
    }

    fn uses_features(self) -> bool {
        self != Mode::Distributional
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Distributional => "distributional",
            Mode::Formal => "formal",
            Mode::Combined => "combined",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distributional" => Ok(Mode::Distributional),
            "formal" => Ok(Mode::Formal),
            "combined" => Ok(Mode::Combined),
            _ => Err(Error::Validation(format!("unknown model mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Combined,
            dim: 300,
            learning_rate: 0.05,
            epochs: 30,
            negatives_per_positive: 10,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.epochs > 0
            && self.negatives_per_positive > 0
            && self.l2.is_finite()
            && self.l2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid model config {self:?}")))
        }
    }
}

/// What a `φ` vector is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKey {
    Entity(EntityId),
    Pair(EntityId, EntityId),
}

impl EntityKey {
    pub fn from_args(args: &[EntityId]) -> Result<Self> {
        match *args {
            [e] => Ok(EntityKey::Entity(e)),
            [a, b] => Ok(EntityKey::Pair(a, b)),
            _ => Err(Error::Validation(format!("predicate argument list of length {}", args.len()))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredicateParams {
    pub theta: Vec<f64>,
    /// Weights over the predicate's selected features, in selection order.
    pub omega: Vec<(FeatureId, f64)>,
    omega_index: HashMap<FeatureId, usize>,
}

impl PredicateParams {
    fn new(dim: usize, features: Vec<FeatureId>) -> Self {
        let omega_index = features.iter().enumerate().map(|(i, f)| (*f, i)).collect();
        PredicateParams {
            theta: vec![0.0; dim],
            omega: features.into_iter().map(|f| (f, 0.0)).collect(),
            omega_index,
        }
    }

    pub fn weight(&self, f: FeatureId) -> Option<f64> {
        self.omega_index.get(&f).map(|&i| self.omega[i].1)
    }

    fn feature_product(&self, psi: &FeatureVector) -> f64 {
        psi.iter().filter_map(|f| self.weight(f)).sum()
    }
}

/// Gradient of one positive/negative ranking pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub theta: Vec<f64>,
    pub phi: Vec<(EntityKey, Vec<f64>)>,
    /// Parallel to the predicate's `omega`.
    pub omega: Vec<f64>,
}

/// One side of a ranking pair: the argument key and its restricted `ψ`.
#[derive(Debug, Clone, Copy)]
pub struct Side<'a> {
    pub key: EntityKey,
    pub psi: &'a FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean pair loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub pairs_per_epoch: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

#[derive(Debug, Clone)]
pub struct PredicateModel {
    config: ModelConfig,
    predicates: PredicateTable,
    categories: Vec<PredicateParams>,
    relations: Vec<PredicateParams>,
    features: FeatureTable,
    phi: HashMap<EntityKey, Vec<f64>>,
}

impl PredicateModel {
    /// A model with no predicates and no embeddings.
    pub fn empty(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(PredicateModel {
            config,
            predicates: PredicateTable::new(),
            categories: Vec::new(),
            relations: Vec::new(),
            features: FeatureTable::new(),
            phi: HashMap::new(),
        })
    }

    /// Sets up parameters for every predicate and argument key seen in
    /// `instances`. `θ` and `φ` start uniform in `±0.1/√dim` (zero in formal
    /// mode), `ω` starts at zero over each predicate's selected features.
    pub fn new(
        config: ModelConfig,
        instances: &[PredicateInstance],
        selected: &SelectedFeatures,
        selected_table: &FeatureTable,
    ) -> Result<Self> {
        let mut model = Self::empty(config)?;
        let preds: BTreeSet<&Predicate> = instances.iter().map(|i| &i.predicate).collect();
        for p in preds {
            let features: Vec<PathFeature> = selected
                .get(p)
                .iter()
                .map(|s| selected_table.feature(s.feature).clone())
                .collect();
            model.add_predicate(p, &features);
        }
        let keys: BTreeSet<EntityKey> = instances
            .iter()
            .map(|i| EntityKey::from_args(&i.args))
            .collect::<Result<_>>()?;
        for k in keys {
            model.phi.insert(k, vec![0.0; model.config.dim]);
        }
        if model.config.mode.uses_embeddings() {
            let bound = 0.1 / (model.config.dim as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
            for params in model.categories.iter_mut().chain(model.relations.iter_mut()) {
                for x in &mut params.theta {
                    *x = rng.gen_range(-bound..=bound);
                }
            }
            let mut keys: Vec<EntityKey> = model.phi.keys().copied().collect();
            keys.sort_unstable();
            for k in keys {
                for x in model.phi.get_mut(&k).expect("key present") {
                    *x = rng.gen_range(-bound..=bound);
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Registers a predicate with zero `θ` and zero weights over `features`.
    pub fn add_predicate(&mut self, p: &Predicate, features: &[PathFeature]) -> PredicateId {
        if let Some(id) = self.predicates.get(p) {
            return id;
        }
        let id = self.predicates.intern(p);
        let mut ids: Vec<FeatureId> = Vec::new();
        for f in features {
            let fid = self.features.intern(f);
            if !ids.contains(&fid) {
                ids.push(fid);
            }
        }
        let params = PredicateParams::new(self.config.dim, ids);
        match p.arity {
            Arity::Category => self.categories.push(params),
            Arity::Relation => self.relations.push(params),
        }
        id
    }

    pub fn predicate_id(&self, p: &Predicate) -> Option<PredicateId> {
        self.predicates.get(p)
    }

    pub fn contains(&self, p: &Predicate) -> bool {
        self.predicates.get(p).is_some()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    pub fn predicates(&self) -> impl Iterator<Item = Predicate> + '_ {
        let cats = (0..self.categories.len() as u32).map(|index| PredicateId {
            arity: Arity::Category,
            index,
        });
        let rels = (0..self.relations.len() as u32).map(|index| PredicateId {
            arity: Arity::Relation,
            index,
        });
        cats.chain(rels).map(|id| self.predicates.predicate(id))
    }

    pub fn params(&self, id: PredicateId) -> &PredicateParams {
        match id.arity {
            Arity::Category => &self.categories[id.index as usize],
            Arity::Relation => &self.relations[id.index as usize],
        }
    }

    pub fn params_mut(&mut self, id: PredicateId) -> &mut PredicateParams {
        match id.arity {
            Arity::Category => &mut self.categories[id.index as usize],
            Arity::Relation => &mut self.relations[id.index as usize],
        }
    }

    fn lookup(&self, p: &Predicate) -> Result<PredicateId> {
        self.predicates.get(p).ok_or_else(|| Error::UnknownPredicate {
            name: p.name.clone(),
            arity: p.arity.as_usize(),
        })
    }

    pub fn phi(&self, key: &EntityKey) -> Option<&[f64]> {
        self.phi.get(key).map(Vec::as_slice)
    }

    /// Inserts or replaces an embedding. Panics if the length is not `dim`.
    pub fn set_phi(&mut self, key: EntityKey, v: Vec<f64>) {
        assert_eq!(v.len(), self.config.dim, "phi length must equal dim");
        self.phi.insert(key, v);
    }

    pub fn phi_mut(&mut self, key: &EntityKey) -> Option<&mut Vec<f64>> {
        self.phi.get_mut(key)
    }

    pub fn phi_count(&self) -> usize {
        self.phi.len()
    }

    pub fn feature_table(&self) -> &FeatureTable {
        &self.features
    }

    /// `p`'s weights as `(feature, weight)` in selection order.
    pub fn omega(&self, p: &Predicate) -> Result<Vec<(&PathFeature, f64)>> {
        let id = self.lookup(p)?;
        Ok(self
            .params(id)
            .omega
            .iter()
            .map(|&(f, w)| (self.features.feature(f), w))
            .collect())
    }

    /// Restricts extracted paths to `p`'s selected features. Unknown
    /// predicates get an empty vector.
    pub fn restrict(&self, p: &Predicate, paths: &[PathFeature]) -> FeatureVector {
        let Some(id) = self.predicates.get(p) else {
            return FeatureVector::default();
        };
        let params = self.params(id);
        paths
            .iter()
            .filter_map(|f| self.features.get(f))
            .filter(|f| params.omega_index.contains_key(f))
            .collect()
    }

    /// Pre-sigmoid score; a missing `φ` contributes nothing.
    pub fn raw_score(&self, id: PredicateId, key: &EntityKey, psi: &FeatureVector) -> f64 {
        let params = self.params(id);
        let mut s = 0.0;
        if self.config.mode.uses_embeddings() {
            if let Some(phi) = self.phi.get(key) {
                s += dot(&params.theta, phi);
            }
        }
        if self.config.mode.uses_features() {
            s += params.feature_product(psi);
        }
        s
    }

    /// Truth probability of `p(args)`. The reserved `unknown` predicate
    /// scores 0.5; in distributional mode a relation over a pair without an
    /// embedding scores exactly 0.
    pub fn score(&self, p: &Predicate, args: &[EntityId], psi: &FeatureVector) -> Result<f64> {
        if p.arity.as_usize() != args.len() {
            return Err(Error::Validation(format!("{p} applied to {} arguments", args.len())));
        }
        let id = match self.predicates.get(p) {
            Some(id) => id,
            None if p.name == UNKNOWN_PREDICATE => return Ok(UNKNOWN_PROBABILITY),
            None => return Err(self.lookup(p).unwrap_err()),
        };
        let key = EntityKey::from_args(args)?;
        if self.config.mode == Mode::Distributional && p.arity == Arity::Relation && !self.phi.contains_key(&key) {
            return Ok(0.0);
        }
        Ok(sigmoid(self.raw_score(id, &key, psi)))
    }

    pub fn score_category(&self, c: &Predicate, e: EntityId, psi: &FeatureVector) -> Result<f64> {
        self.score(c, &[e], psi)
    }

    pub fn score_relation(&self, r: &Predicate, e1: EntityId, e2: EntityId, psi: &FeatureVector) -> Result<f64> {
        self.score(r, &[e1, e2], psi)
    }

    fn regularizer(&self, id: PredicateId, pos: &EntityKey, neg: &EntityKey) -> f64 {
        let params = self.params(id);
        let mut r = 0.0;
        if self.config.mode.uses_embeddings() {
            r += sq_norm(&params.theta);
            for key in touched(pos, neg) {
                if let Some(phi) = self.phi.get(key) {
                    r += sq_norm(phi);
                }
            }
        }
        if self.config.mode.uses_features() {
            r += params.omega.iter().map(|(_, w)| w * w).sum::<f64>();
        }
        self.config.l2 * r
    }

    /// `-log σ(s⁺ - s⁻) + l2 · (‖θ_π‖² + ‖φ⁺‖² + ‖φ⁻‖² + ‖ω_π‖²)` over the
    /// parameters this pair touches and the current mode trains.
    pub fn pair_loss(&self, id: PredicateId, pos: Side<'_>, neg: Side<'_>) -> f64 {
        let margin = self.raw_score(id, &pos.key, pos.psi) - self.raw_score(id, &neg.key, neg.psi);
        neg_log_sigmoid(margin) + self.regularizer(id, &pos.key, &neg.key)
    }

    pub fn pair_gradient(&self, id: PredicateId, pos: Side<'_>, neg: Side<'_>) -> PairGradient {
        let params = self.params(id);
        let dim = self.config.dim;
        let l2 = self.config.l2;
        let margin = self.raw_score(id, &pos.key, pos.psi) - self.raw_score(id, &neg.key, neg.psi);
        // d loss / d margin
        let g = -sigmoid(-margin);

        let mut theta = vec![0.0; dim];
        let mut phi = Vec::new();
        if self.config.mode.uses_embeddings() {
            for (i, t) in theta.iter_mut().enumerate() {
                *t = 2.0 * l2 * params.theta[i];
            }
            let phi_pos = self.phi.get(&pos.key);
            let phi_neg = self.phi.get(&neg.key);
            if let Some(v) = phi_pos {
                for (t, x) in theta.iter_mut().zip(v) {
                    *t += g * x;
                }
            }
            if let Some(v) = phi_neg {
                for (t, x) in theta.iter_mut().zip(v) {
                    *t -= g * x;
                }
            }
            for key in touched(&pos.key, &neg.key) {
                let Some(v) = self.phi.get(key) else { continue };
                let sign = (*key == pos.key) as i32 as f64 - (*key == neg.key) as i32 as f64;
                let grad = v
                    .iter()
                    .zip(&params.theta)
                    .map(|(x, t)| sign * g * t + 2.0 * l2 * x)
                    .collect();
                phi.push((*key, grad));
            }
        }

        let omega = if self.config.mode.uses_features() {
            params
                .omega
                .iter()
                .map(|&(f, w)| {
                    let diff = pos.psi.contains(f) as i32 as f64 - neg.psi.contains(f) as i32 as f64;
                    g * diff + 2.0 * l2 * w
                })
                .collect()
        } else {
            vec![0.0; params.omega.len()]
        };
        PairGradient { theta, phi, omega }
    }

    fn apply(&mut self, id: PredicateId, grad: &PairGradient, lr: f64) {
        let mode = self.config.mode;
        if mode.uses_embeddings() {
            let params = self.params_mut(id);
            for (t, g) in params.theta.iter_mut().zip(&grad.theta) {
                *t -= lr * g;
            }
            for (key, g) in &grad.phi {
                let v = self.phi.get_mut(key).expect("gradient only for present keys");
                for (x, d) in v.iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
        }
        if mode.uses_features() {
            let params = self.params_mut(id);
            for ((_, w), g) in params.omega.iter_mut().zip(&grad.omega) {
                *w -= lr * g;
            }
        }
    }

    /// Pairwise logistic ranking SGD. For every positive instance, each epoch
    /// draws `negatives_per_positive` argument tuples uniformly (with
    /// replacement) from that instance's candidate universe. `paths` supplies
    /// raw path features for an argument tuple.
    pub fn train<F>(&mut self, instances: &[PredicateInstance], mut paths: F, universes: &[Vec<Vec<EntityId>>]) -> Result<TrainReport>
    where
        F: FnMut(&[EntityId]) -> Result<Vec<PathFeature>>,
    {
        if instances.is_empty() {
            return Err(Error::Training("empty training set".into()));
        }
        if universes.len() != instances.len() {
            return Err(Error::Validation(format!(
                "{} candidate universes for {} instances",
                universes.len(),
                instances.len()
            )));
        }
        let mut ids = Vec::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            ids.push(self.lookup(&inst.predicate)?);
            if universes[i].is_empty() {
                return Err(Error::Training(format!("instance {i} ({}) has no negative candidates", inst.predicate)));
            }
            if let Some(bad) = universes[i].iter().find(|n| n.len() != inst.args.len()) {
                return Err(Error::Validation(format!("instance {i}: negative of length {} for {}", bad.len(), inst.predicate)));
            }
        }

        let mut cache: HashMap<(PredicateId, Vec<EntityId>), FeatureVector> = HashMap::new();
        let mut restricted = |model: &Self, id: PredicateId, args: &[EntityId]| -> Result<FeatureVector> {
            if let Some(v) = cache.get(&(id, args.to_vec())) {
                return Ok(v.clone());
            }
            let v = if model.config.mode.uses_features() {
                model.restrict(&model.predicates.predicate(id), &paths(args)?)
            } else {
                FeatureVector::default()
            };
            cache.insert((id, args.to_vec()), v.clone());
            Ok(v)
        };

        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut report = TrainReport {
            epoch_loss: Vec::with_capacity(cfg.epochs),
            pairs_per_epoch: instances.len() * cfg.negatives_per_positive,
        };
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let id = ids[i];
                let pos_args = &instances[i].args;
                let pos_key = EntityKey::from_args(pos_args)?;
                let pos_psi = restricted(self, id, pos_args)?;
                for _ in 0..cfg.negatives_per_positive {
                    let neg_args = &universes[i][rng.gen_range(0..universes[i].len())];
                    let neg_key = EntityKey::from_args(neg_args)?;
                    let neg_psi = restricted(self, id, neg_args)?;
                    let pos = Side { key: pos_key, psi: &pos_psi };
                    let neg = Side { key: neg_key, psi: &neg_psi };
                    let loss = self.pair_loss(id, pos, neg);
                    if !loss.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite loss {loss} at epoch {epoch}, instance {i} ({})",
                            instances[i].predicate
                        )));
                    }
                    total += loss;
                    let grad = self.pair_gradient(id, pos, neg);
                    self.apply(id, &grad, cfg.learning_rate);
                }
            }
            report.epoch_loss.push(total / report.pairs_per_epoch as f64);
        }
        Ok(report)
    }

    /// Writes the versioned text container. Floats are stored as the
    /// hexadecimal bit pattern of the `f64`, so reloading is bit-exact.
    pub fn save<W: Write>(&self, g: &KnowledgeGraph, mut w: W) -> Result<()> {
        let io = |e| Error::io("<model>", e);
        let omega_total: usize = self
            .categories
            .iter()
            .chain(&self.relations)
            .map(|p| p.omega.len())
            .sum();
        writeln!(w, "{MODEL_MAGIC}\t{MODEL_VERSION}").map_err(io)?;
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        writeln!(w, "config\t{cfg}").map_err(io)?;
        writeln!(w, "counts\t{}\t{}\t{}", self.predicate_count(), self.phi.len(), omega_total).map_err(io)?;
        let preds: Vec<Predicate> = self.predicates().collect();
        for p in &preds {
            let params = self.params(self.predicates.get(p).expect("own predicate"));
            writeln!(w, "predicate\t{}\t{}\t{}", p.name, p.arity.as_usize(), hex_vec(&params.theta)).map_err(io)?;
        }
        let mut keys: Vec<&EntityKey> = self.phi.keys().collect();
        keys.sort_unstable();
        for key in keys {
            let name = match *key {
                EntityKey::Entity(e) => g.entity_name(e)?.to_string(),
                EntityKey::Pair(a, b) => format!("{}|{}", g.entity_name(a)?, g.entity_name(b)?),
            };
            writeln!(w, "phi\t{name}\t{}", hex_vec(&self.phi[key])).map_err(io)?;
        }
        for p in &preds {
            let params = self.params(self.predicates.get(p).expect("own predicate"));
            for &(f, weight) in &params.omega {
                let feature = format_feature(self.features.feature(f), g)?;
                writeln!(w, "omega\t{}\t{}\t{feature}\t{:016x}", p.name, p.arity.as_usize(), weight.to_bits()).map_err(io)?;
            }
        }
        writeln!(w, "end").map_err(io)?;
        Ok(())
    }

    /// Parses a model written by [`PredicateModel::save`]; entity and
    /// relation names resolve against `g`.
    pub fn load(text: &str, g: &KnowledgeGraph) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let fail = |line: usize, m: String| Error::ModelFormat(format!("line {line}: {m}"));

        let (n, header) = lines.next().ok_or_else(|| Error::ModelFormat("empty model file".into()))?;
        let Some((magic, version)) = header.split_once('\t') else {
            return Err(fail(n, format!("bad header {header:?}")));
        };
        if magic != MODEL_MAGIC {
            return Err(fail(n, format!("bad header {header:?}")));
        }
        if version != MODEL_VERSION.to_string() {
            return Err(fail(n, format!("unsupported model version {version:?}, expected {MODEL_VERSION}")));
        }

        let (n, line) = lines.next().ok_or_else(|| fail(2, "missing config".into()))?;
        let cfg_text = line.strip_prefix("config\t").ok_or_else(|| fail(n, "missing config".into()))?;
        let config: ModelConfig = serde_json::from_str(cfg_text).map_err(|e| fail(n, e.to_string()))?;
        let mut model = Self::empty(config).map_err(|e| fail(n, e.to_string()))?;
        let dim = model.config.dim;

        let (n, line) = lines.next().ok_or_else(|| fail(3, "missing counts".into()))?;
        let counts: Vec<usize> = line
            .strip_prefix("counts\t")
            .ok_or_else(|| fail(n, "missing counts".into()))?
            .split('\t')
            .map(|s| s.parse().map_err(|_| fail(n, format!("bad count {s:?}"))))
            .collect::<Result<_>>()?;
        let [n_pred, n_phi, n_omega] = counts[..] else {
            return Err(fail(n, "expected 3 counts".into()));
        };

        let parse_pred = |line: usize, name: &str, arity: &str| -> Result<Predicate> {
            let arity = arity
                .parse::<usize>()
                .ok()
                .and_then(Arity::from_usize)
                .ok_or_else(|| fail(line, format!("bad arity {arity:?}")))?;
            Ok(Predicate {
                name: name.to_string(),
                arity,
            })
        };

        let mut ended = false;
        let (mut seen_pred, mut seen_phi, mut seen_omega) = (0, 0, 0);
        for (n, line) in lines.by_ref() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["predicate", name, arity, theta] => {
                    let p = parse_pred(n, name, arity)?;
                    if model.contains(&p) {
                        return Err(fail(n, format!("duplicate predicate {p}")));
                    }
                    let theta = unhex_vec(theta, dim).map_err(|m| fail(n, m))?;
                    let id = model.add_predicate(&p, &[]);
                    model.params_mut(id).theta = theta;
                    seen_pred += 1;
                }
                ["phi", key, values] => {
                    let args = key
                        .split('|')
                        .map(|s| g.entity_id(s).ok_or_else(|| fail(n, format!("unknown entity {s:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let key = EntityKey::from_args(&args).map_err(|e| fail(n, e.to_string()))?;
                    let v = unhex_vec(values, dim).map_err(|m| fail(n, m))?;
                    if model.phi.insert(key, v).is_some() {
                        return Err(fail(n, "duplicate phi key".into()));
                    }
                    seen_phi += 1;
                }
                ["omega", name, arity, feature, weight] => {
                    let p = parse_pred(n, name, arity)?;
                    let id = model.lookup(&p).map_err(|e| fail(n, e.to_string()))?;
                    let f = parse_feature(feature, g).map_err(|e| fail(n, e.to_string()))?;
                    let w = unhex(weight).map_err(|m| fail(n, m))?;
                    let fid = model.features.intern(&f);
                    let params = model.params_mut(id);
                    if params.omega_index.contains_key(&fid) {
                        return Err(fail(n, format!("duplicate omega feature {feature}")));
                    }
                    params.omega_index.insert(fid, params.omega.len());
                    params.omega.push((fid, w));
                    seen_omega += 1;
                }
                ["end"] => {
                    ended = true;
                    break;
                }
                _ => return Err(fail(n, format!("unrecognized record {:?}", fields.first().unwrap_or(&"")))),
            }
        }
        if !ended {
            return Err(Error::ModelFormat("truncated model file: missing end marker".into()));
        }
        if let Some((n, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(fail(n, format!("data after end marker: {extra:?}")));
        }
        if (seen_pred, seen_phi, seen_omega) != (n_pred, n_phi, n_omega) {
            return Err(Error::ModelFormat(format!(
                "record counts {seen_pred}/{seen_phi}/{seen_omega} do not match header {n_pred}/{n_phi}/{n_omega}"
            )));
        }
        Ok(model)
    }
}

fn touched<'a>(pos: &'a EntityKey, neg: &'a EntityKey) -> impl Iterator<Item = &'a EntityKey> {
    std::iter::once(pos).chain((neg != pos).then_some(neg))
}

fn hex_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:016x}", x.to_bits())).collect::<Vec<_>>().join(" ")
}

fn unhex(s: &str) -> std::result::Result<f64, String> {
    if s.len() != 16 {
        return Err(format!("bad float payload {s:?}"));
    }
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| format!("bad float payload {s:?}"))
}

fn unhex_vec(s: &str, dim: usize) -> std::result::Result<Vec<f64>, String> {
    let v = s.split(' ').map(unhex).collect::<std::result::Result<Vec<_>, _>>()?;
    if v.len() != dim {
        return Err(format!("vector of length {} where dim is {dim}", v.len()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationId;

    fn cfg(mode: Mode, dim: usize) -> ModelConfig {
        ModelConfig {
            mode,
            dim,
            ..ModelConfig::default()
        }
    }

    fn feat(i: u32) -> PathFeature {
        PathFeature::path(vec![RelationId(i)])
    }

    #[test]
    fn zero_parameters_score_half() {
        let mut m = PredicateModel::empty(cfg(Mode::Combined, 4)).unwrap();
        let c = Predicate::category("c");
        m.add_predicate(&c, &[feat(0)]);
        m.set_phi(EntityKey::Entity(EntityId(0)), vec![0.0; 4]);
        let psi = m.restrict(&c, &[feat(0)]);
        assert_eq!(m.score_category(&c, EntityId(0), &psi).unwrap(), 0.5);
    }

    #[test]
    fn formal_mode_single_weight() {
        let mut m = PredicateModel::empty(cfg(Mode::Formal, 4)).unwrap();
        let c = Predicate::category("c");
        let id = m.add_predicate(&c, &[feat(0), feat(1)]);
        m.params_mut(id).omega[0].1 = 1.0;
        let psi = m.restrict(&c, &[feat(0), feat(7)]);
        assert_eq!(psi.len(), 1);
        let p = m.score_category(&c, EntityId(0), &psi).unwrap();
        assert!((p - 0.731058578630).abs() < 1e-9, "{p}");
    }

    #[test]
    fn unseen_pairs_by_mode() {
        let r = Predicate::relation("r");
        let mut d = PredicateModel::empty(cfg(Mode::Distributional, 3)).unwrap();
        d.add_predicate(&r, &[]);
        assert_eq!(d.score_relation(&r, EntityId(0), EntityId(1), &FeatureVector::default()).unwrap(), 0.0);

        let mut c = PredicateModel::empty(cfg(Mode::Combined, 3)).unwrap();
        let id = c.add_predicate(&r, &[feat(0), feat(1)]);
        c.params_mut(id).omega[0].1 = 1.5;
        c.params_mut(id).omega[1].1 = 0.5;
        let psi = c.restrict(&r, &[feat(0), feat(1)]);
        let p = c.score_relation(&r, EntityId(0), EntityId(1), &psi).unwrap();
        assert!((p - 0.880797077978).abs() < 1e-9, "{p}");
    }

    #[test]
    fn unknown_predicate_handling() {
        let m = PredicateModel::empty(cfg(Mode::Combined, 2)).unwrap();
        let psi = FeatureVector::default();
        assert_eq!(m.score(&Predicate::unknown_relation(), &[EntityId(0), EntityId(1)], &psi).unwrap(), 0.5);
        assert!(matches!(
            m.score(&Predicate::relation("nope"), &[EntityId(0), EntityId(1)], &psi),
            Err(Error::UnknownPredicate { .. })
        ));
        assert!(m.score(&Predicate::category("x"), &[EntityId(0), EntityId(1)], &psi).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PredicateModel::empty(ModelConfig { dim: 0, ..ModelConfig::default() }).is_err());
        assert!(PredicateModel::empty(ModelConfig { learning_rate: -1.0, ..ModelConfig::default() }).is_err());
        assert_eq!("formal".parse::<Mode>().unwrap(), Mode::Formal);
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn empty_training_set_rejected() {
        let mut m = PredicateModel::empty(cfg(Mode::Combined, 2)).unwrap();
        let err = m.train(&[], |_| Ok(Vec::new()), &[]).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn missing_negatives_rejected() {
        let insts = vec![PredicateInstance::category("c", EntityId(0))];
        let mut m = PredicateModel::new(cfg(Mode::Combined, 2), &insts, &SelectedFeatures::default(), &FeatureTable::new()).unwrap();
        let err = m.train(&insts, |_| Ok(Vec::new()), &[vec![]]).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let insts = vec![PredicateInstance::category("c", EntityId(0))];
        let mut m = PredicateModel::new(cfg(Mode::Distributional, 2), &insts, &SelectedFeatures::default(), &FeatureTable::new()).unwrap();
        m.set_phi(EntityKey::Entity(EntityId(0)), vec![f64::NAN, 0.0]);
        let err = m.train(&insts, |_| Ok(Vec::new()), &[vec![vec![EntityId(1)]]]).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("non-finite")), "{err}");
    }

    #[test]
    fn load_rejects_bad_headers() {
        let g = KnowledgeGraph::new();
        assert!(matches!(PredicateModel::load("", &g), Err(Error::ModelFormat(_))));
        assert!(matches!(PredicateModel::load("garbage\n", &g), Err(Error::ModelFormat(_))));
        assert!(matches!(PredicateModel::load("ovsp-model\t99\n", &g), Err(Error::ModelFormat(m)) if m.contains("version")));
    }

    #[test]
    fn empty_model_round_trips() {
        let g = KnowledgeGraph::new();
        let m = PredicateModel::empty(cfg(Mode::Formal, 3)).unwrap();
        let mut buf = Vec::new();
        m.save(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = PredicateModel::load(&text, &g).unwrap();
        assert_eq!(back.predicate_count(), 0);
        assert_eq!(back.phi_count(), 0);
        assert_eq!(back.config(), m.config());
        let truncated = text.replace("end\n", "");
        assert!(matches!(PredicateModel::load(&truncated, &g), Err(Error::ModelFormat(m)) if m.contains("truncated")));
    }
}
