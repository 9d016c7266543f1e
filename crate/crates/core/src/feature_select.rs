//! Per-predicate feature counts and PMI-ranked top-k feature selection.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::logical_form::{Arity, Predicate, PredicateInstance};
use crate::sfe::{format_feature, parse_feature, FeatureId, FeatureTable, FeatureVector};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_MIN_FEAT_COUNT: u64 = 5;

/// Instance-multiset counts: an entity seen in two instances counts twice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureCounts {
    pred: BTreeMap<Predicate, u64>,
    feat: HashMap<FeatureId, u64>,
    joint: BTreeMap<Predicate, HashMap<FeatureId, u64>>,
}

impl FeatureCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one instance of `p` whose argument has feature vector `psi`.
    pub fn add(&mut self, p: &Predicate, psi: &FeatureVector) {
        *self.pred.entry(p.clone()).or_default() += 1;
        let joint = self.joint.entry(p.clone()).or_default();
        for f in psi.iter() {
            *self.feat.entry(f).or_default() += 1;
            *joint.entry(f).or_default() += 1;
        }
    }

    /// Sums another shard's counts into this one.
    pub fn merge(&mut self, other: &FeatureCounts) {
        for (p, c) in &other.pred {
            *self.pred.entry(p.clone()).or_default() += c;
        }
        for (f, c) in &other.feat {
            *self.feat.entry(*f).or_default() += c;
        }
        for (p, m) in &other.joint {
            let joint = self.joint.entry(p.clone()).or_default();
            for (f, c) in m {
                *joint.entry(*f).or_default() += c;
            }
        }
    }

    pub fn count_pred(&self, p: &Predicate) -> u64 {
        self.pred.get(p).copied().unwrap_or(0)
    }

    pub fn count_feat(&self, f: FeatureId) -> u64 {
        self.feat.get(&f).copied().unwrap_or(0)
    }

    pub fn count_joint(&self, p: &Predicate, f: FeatureId) -> u64 {
        self.joint.get(p).and_then(|m| m.get(&f)).copied().unwrap_or(0)
    }

    pub fn predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.pred.keys()
    }

    /// Features co-occurring with `p` at least once, in id order.
    pub fn joint_features(&self, p: &Predicate) -> Vec<FeatureId> {
        let mut v: Vec<FeatureId> = self.joint.get(p).map(|m| m.keys().copied().collect()).unwrap_or_default();
        v.sort_unstable();
        v
    }
}

/// Adds each instance's argument feature vector to its predicate's counts.
pub fn accumulate_counts<F>(instances: &[PredicateInstance], mut lookup: F) -> Result<FeatureCounts>
where
    F: FnMut(&[EntityId]) -> Result<FeatureVector>,
{
    let mut counts = FeatureCounts::new();
    for inst in instances {
        let psi = lookup(&inst.args)?;
        counts.add(&inst.predicate, &psi);
    }
    Ok(counts)
}

/// `count(π∧f) / (count(π) · count(f))`, with no corpus-size factor.
pub fn pmi_score(counts: &FeatureCounts, p: &Predicate, f: FeatureId) -> Result<f64> {
    let (num, den) = pmi_ratio(counts, p, f)?;
    Ok(num as f64 / den as f64)
}

fn pmi_ratio(counts: &FeatureCounts, p: &Predicate, f: FeatureId) -> Result<(u64, u64)> {
    let cp = counts.count_pred(p);
    let cf = counts.count_feat(f);
    if cp == 0 || cf == 0 {
        return Err(Error::Domain(format!(
            "pmi undefined for {p} and feature {}: count(pred) = {cp}, count(feat) = {cf}",
            f.0
        )));
    }
    Ok((counts.count_joint(p, f), cp * cf))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredFeature {
    pub feature: FeatureId,
    pub pmi: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectedFeatures {
    by_predicate: BTreeMap<Predicate, Vec<ScoredFeature>>,
}

impl SelectedFeatures {
    pub fn get(&self, p: &Predicate) -> &[ScoredFeature] {
        self.by_predicate.get(p).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, p: Predicate, list: Vec<ScoredFeature>) {
        self.by_predicate.insert(p, list);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Predicate, &[ScoredFeature])> {
        self.by_predicate.iter().map(|(p, v)| (p, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_predicate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_predicate.is_empty()
    }
}

/// Keeps features seen at least `min_feat_count` times overall and takes the
/// top `k` per predicate by PMI. Ties go to the higher joint count, then to
/// the lexicographically smaller feature name.
pub fn select_top_k<N>(counts: &FeatureCounts, k: usize, min_feat_count: u64, feature_name: N) -> SelectedFeatures
where
    N: Fn(FeatureId) -> String,
{
    let mut names: HashMap<FeatureId, String> = HashMap::new();
    let mut out = SelectedFeatures::default();
    for p in counts.predicates() {
        let mut scored: Vec<(FeatureId, u64, u64)> = counts
            .joint_features(p)
            .into_iter()
            .filter(|&f| counts.count_feat(f) >= min_feat_count)
            .map(|f| {
                let (num, den) = pmi_ratio(counts, p, f).expect("joint feature has positive counts");
                (f, num, den)
            })
            .collect();
        for (f, ..) in &scored {
            names.entry(*f).or_insert_with(|| feature_name(*f));
        }
        scored.sort_by(|a, b| {
            let by_pmi = (b.1 as u128 * a.2 as u128).cmp(&(a.1 as u128 * b.2 as u128));
            by_pmi
                .then_with(|| b.1.cmp(&a.1))
                .then_with(|| names[&a.0].cmp(&names[&b.0]))
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        let list = scored
            .into_iter()
            .map(|(f, num, den)| ScoredFeature {
                feature: f,
                pmi: num as f64 / den as f64,
            })
            .collect();
        out.insert(p.clone(), list);
    }
    out
}

/// Writes `predicate<TAB>arity<TAB>feature<TAB>pmi` lines in rank order.
pub fn write_selected<W: Write>(sel: &SelectedFeatures, table: &FeatureTable, g: &KnowledgeGraph, mut w: W) -> Result<()> {
    for (p, list) in sel.iter() {
        for s in list {
            let name = format_feature(table.feature(s.feature), g)?;
            writeln!(w, "{}\t{}\t{}\t{}", p.name, p.arity.as_usize(), name, s.pmi)
                .map_err(|e| Error::io("<selected features>", e))?;
        }
    }
    Ok(())
}

pub fn read_selected(text: &str, g: &KnowledgeGraph, table: &mut FeatureTable) -> Result<SelectedFeatures> {
    let mut out = SelectedFeatures::default();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fail = |m: String| Error::load("selected features", i + 1, m);
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, arity, feature, pmi] = fields.as_slice() else {
            return Err(fail(format!("expected 4 fields, found {}", fields.len())));
        };
        let arity = arity
            .parse::<usize>()
            .ok()
            .and_then(Arity::from_usize)
            .ok_or_else(|| fail(format!("bad arity {arity:?}")))?;
        let f = parse_feature(feature, g).map_err(|e| fail(e.to_string()))?;
        let pmi: f64 = pmi.parse().map_err(|_| fail(format!("bad pmi {pmi:?}")))?;
        let p = Predicate {
            name: name.to_string(),
            arity,
        };
        out.by_predicate.entry(p).or_default().push(ScoredFeature {
            feature: table.intern(&f),
            pmi,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(ids: &[u32]) -> FeatureVector {
        ids.iter().map(|&i| FeatureId(i)).collect()
    }

    #[test]
    fn single_instance_bookkeeping() {
        let arch = Predicate::category("architect");
        let insts = vec![PredicateInstance::category("architect", EntityId(0))];
        let c = accumulate_counts(&insts, |_| Ok(fv(&[1, 2]))).unwrap();
        assert_eq!(c.count_pred(&arch), 1);
        assert_eq!(c.count_joint(&arch, FeatureId(1)), 1);
        assert_eq!(c.count_joint(&arch, FeatureId(2)), 1);
        assert_eq!(c.count_feat(FeatureId(2)), 1);
    }

    #[test]
    fn shared_feature_counts_twice() {
        let p = Predicate::category("p");
        let insts = vec![
            PredicateInstance::category("p", EntityId(0)),
            PredicateInstance::category("p", EntityId(1)),
        ];
        let c = accumulate_counts(&insts, |a| Ok(if a[0] == EntityId(0) { fv(&[7, 8]) } else { fv(&[7]) })).unwrap();
        assert_eq!(c.count_joint(&p, FeatureId(7)), 2);
        assert_eq!(c.count_joint(&p, FeatureId(8)), 1);
    }

    #[test]
    fn pmi_values() {
        let p = Predicate::category("p");
        let mut c = FeatureCounts::new();
        // count(p) = 4, count(f) = 8, joint = 2
        for i in 0..4 {
            c.add(&p, &if i < 2 { fv(&[0]) } else { fv(&[]) });
        }
        let q = Predicate::category("q");
        for _ in 0..6 {
            c.add(&q, &fv(&[0, 1]));
        }
        assert_eq!(pmi_score(&c, &p, FeatureId(0)).unwrap(), 0.0625);
        assert_eq!(pmi_score(&c, &p, FeatureId(1)).unwrap(), 0.0);
        assert!(matches!(pmi_score(&c, &p, FeatureId(9)), Err(Error::Domain(_))));

        let mut one = FeatureCounts::new();
        one.add(&p, &fv(&[3]));
        assert_eq!(pmi_score(&one, &p, FeatureId(3)).unwrap(), 1.0);
    }

    #[test]
    fn top_k_tie_break_and_truncation() {
        let p = Predicate::category("p");
        let mut c = FeatureCounts::new();
        c.add(&p, &fv(&[0, 1, 2]));
        c.add(&p, &fv(&[0, 1]));
        // every feature has pmi 1/count(p) = 0.5; joint: f0=2, f1=2, f2=1
        let name = |f: FeatureId| ["<b>", "<a>", "<c>"][f.0 as usize].to_string();
        let sel = select_top_k(&c, 100, 1, name);
        let order: Vec<u32> = sel.get(&p).iter().map(|s| s.feature.0).collect();
        assert_eq!(order, [1, 0, 2]);
        let sel = select_top_k(&c, 1, 1, name);
        assert_eq!(sel.get(&p).len(), 1);
        let sel = select_top_k(&c, 100, 2, name);
        assert_eq!(sel.get(&p).len(), 2);
        let sel = select_top_k(&c, 100, 3, name);
        assert!(sel.get(&p).is_empty());
    }

    #[test]
    fn merge_equals_sequential() {
        let p = Predicate::category("p");
        let q = Predicate::relation("q");
        let mut a = FeatureCounts::new();
        a.add(&p, &fv(&[1, 2]));
        let mut b = FeatureCounts::new();
        b.add(&q, &fv(&[2]));
        b.add(&p, &fv(&[1]));
        let mut all = FeatureCounts::new();
        all.add(&p, &fv(&[1, 2]));
        all.add(&q, &fv(&[2]));
        all.add(&p, &fv(&[1]));
        a.merge(&b);
        assert_eq!(a, all);
    }
}
