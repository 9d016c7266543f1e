//! Pooled-judgment evaluation: AP, RR, MAP, W-MAP, MRR and a paired
//! sign-flip permutation test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest query count for which the permutation test enumerates exactly.
pub const EXACT_PERMUTATION_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Divide by the number of returned answers.
    #[default]
    Paper,
    /// Divide by the number of annotated correct answers.
    Standard,
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMode::Paper => "paper",
            ApMode::Standard => "standard",
        })
    }
}

impl FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ApMode::Paper),
            "standard" => Ok(ApMode::Standard),
            _ => Err(Error::Validation(format!("unknown ap mode {s:?} (expected paper or standard)"))),
        }
    }
}

/// `correct[k]` says whether the answer at rank k+1 is correct.
///
/// In standard mode the denominator is at least the number of correct answers
/// in the ranking, so inconsistent inputs cannot push AP above 1.
pub fn average_precision(correct: &[bool], annotated_correct: usize, mode: ApMode) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &c) in correct.iter().enumerate() {
        if c {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    let denom = match mode {
        ApMode::Paper => correct.len(),
        ApMode::Standard => annotated_correct.max(hits),
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

pub fn reciprocal_rank(correct: &[bool]) -> f64 {
    correct
        .iter()
        .position(|&c| c)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JudgmentPool {
    judgments: HashMap<String, HashMap<String, bool>>,
    queries: BTreeSet<String>,
}

impl JudgmentPool {
    /// Parses `queryId<TAB>entityName<TAB>{0|1}` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pool = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [q, e, label] = fields.as_slice() else {
                return Err(Error::load("pool", i + 1, format!("expected 3 fields, found {}", fields.len())));
            };
            let label = match *label {
                "0" => false,
                "1" => true,
                other => return Err(Error::load("pool", i + 1, format!("label must be 0 or 1, found {other:?}"))),
            };
            if q.is_empty() || e.is_empty() {
                return Err(Error::load("pool", i + 1, "empty query id or entity"));
            }
            let prev = pool.insert(q, e, label);
            if prev.is_some_and(|p| p != label) {
                return Err(Error::load("pool", i + 1, format!("conflicting judgments for ({q}, {e})")));
            }
        }
        Ok(pool)
    }

    pub fn insert(&mut self, query: &str, entity: &str, correct: bool) -> Option<bool> {
        self.queries.insert(query.to_string());
        self.judgments
            .entry(query.to_string())
            .or_default()
            .insert(entity.to_string(), correct)
    }

    /// Adds a query with no judgments yet.
    pub fn add_query(&mut self, query: &str) {
        self.queries.insert(query.to_string());
        self.judgments.entry(query.to_string()).or_default();
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.queries.iter().map(String::as_str)
    }

    pub fn contains_query(&self, q: &str) -> bool {
        self.queries.contains(q)
    }

    pub fn judgment(&self, q: &str, e: &str) -> Option<bool> {
        self.judgments.get(q).and_then(|m| m.get(e)).copied()
    }

    pub fn annotated_correct(&self, q: &str) -> usize {
        self.judgments.get(q).map_or(0, |m| m.values().filter(|&&c| c).count())
    }

    pub fn write<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for q in &self.queries {
            let mut items: Vec<(&String, &bool)> = self.judgments[q].iter().collect();
            items.sort();
            for (e, c) in items {
                writeln!(w, "{q}\t{e}\t{}", u8::from(*c)).map_err(|e| Error::io("<pool>", e))?;
            }
        }
        Ok(())
    }
}

/// Ranked entity names per query, read from a run file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub queries: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    /// Parses `queryId<TAB>rank<TAB>entity<TAB>probability` lines. Ranks
    /// must run 1, 2, ... within each query, at most 100 of them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut run = Run::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let fail = |m: String| Error::load("run", i + 1, m);
            let fields: Vec<&str> = line.split('\t').collect();
            let [q, rank, e, p] = fields.as_slice() else {
                return Err(fail(format!("expected 4 fields, found {}", fields.len())));
            };
            let rank: usize = rank.parse().map_err(|_| fail(format!("bad rank {rank:?}")))?;
            let p: f64 = p.parse().map_err(|_| fail(format!("bad probability {p:?}")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(fail(format!("probability {p} outside [0, 1]")));
            }
            let list = run.queries.entry(q.to_string()).or_default();
            if rank != list.len() + 1 {
                return Err(fail(format!("rank {rank} out of sequence for query {q}")));
            }
            if rank > crate::query::MAX_ANSWERS {
                return Err(fail(format!("more than {} answers for query {q}", crate::query::MAX_ANSWERS)));
            }
            list.push((e.to_string(), p));
        }
        Ok(run)
    }

    pub fn ranking(&self, q: &str) -> impl Iterator<Item = &str> {
        self.queries.get(q).into_iter().flatten().map(|(e, _)| e.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub query: String,
    pub ap: f64,
    pub rr: f64,
    pub returned: usize,
    pub annotated_correct: usize,
    pub unjudged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub mode: ApMode,
    pub per_query: Vec<QueryScore>,
    pub map: f64,
    pub wmap: f64,
    pub mrr: f64,
    /// Queries with no annotated correct answer, scored 0 in standard mode.
    pub zero_correct: Vec<String>,
}

impl EvaluationReport {
    pub fn unjudged(&self) -> usize {
        self.per_query.iter().map(|q| q.unjudged).sum()
    }

    pub fn ap_by_query(&self) -> BTreeMap<&str, f64> {
        self.per_query.iter().map(|q| (q.query.as_str(), q.ap)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# evaluation report");
        let _ = writeln!(s, "ap_mode\t{}", self.mode);
        let _ = writeln!(s, "query\tap\trr\treturned\tannotated_correct\tunjudged");
        for q in &self.per_query {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{}",
                q.query, q.ap, q.rr, q.returned, q.annotated_correct, q.unjudged
            );
        }
        let _ = writeln!(s, "aggregate\tqueries\t{}", self.per_query.len());
        let _ = writeln!(s, "aggregate\tMAP\t{:.6}", self.map);
        let _ = writeln!(s, "aggregate\tW-MAP\t{:.6}", self.wmap);
        let _ = writeln!(s, "aggregate\tMRR\t{:.6}", self.mrr);
        let _ = writeln!(s, "aggregate\tunjudged\t{}", self.unjudged());
        if self.mode == ApMode::Standard {
            let _ = writeln!(s, "aggregate\tzero_correct\t{}", self.zero_correct.join(","));
        }
        s
    }
}

/// Scores every query in the pool's universe; queries the run omits get an
/// empty ranking.
pub fn evaluate_run(run: &Run, pool: &JudgmentPool, mode: ApMode) -> Result<EvaluationReport> {
    let unknown: Vec<&str> = run
        .queries
        .keys()
        .map(String::as_str)
        .filter(|q| !pool.contains_query(q))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Evaluation(format!("run references queries missing from the pool: {}", unknown.join(", "))));
    }
    let mut per_query = Vec::new();
    let mut zero_correct = Vec::new();
    for q in pool.queries() {
        let mut unjudged = 0;
        let flags: Vec<bool> = run
            .ranking(q)
            .map(|e| {
                pool.judgment(q, e).unwrap_or_else(|| {
                    unjudged += 1;
                    false
                })
            })
            .collect();
        let n = pool.annotated_correct(q);
        if n == 0 {
            zero_correct.push(q.to_string());
        }
        per_query.push(QueryScore {
            query: q.to_string(),
            ap: average_precision(&flags, n, mode),
            rr: reciprocal_rank(&flags),
            returned: flags.len(),
            annotated_correct: n,
            unjudged,
        });
    }
    let count = per_query.len().max(1) as f64;
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / count;
    let mrr = per_query.iter().map(|q| q.rr).sum::<f64>() / count;
    let total_n: usize = per_query.iter().map(|q| q.annotated_correct).sum();
    let wmap = if total_n == 0 {
        0.0
    } else {
        per_query.iter().map(|q| q.annotated_correct as f64 * q.ap).sum::<f64>() / total_n as f64
    };
    Ok(EvaluationReport {
        mode,
        per_query,
        map,
        wmap,
        mrr,
        zero_correct,
    })
}

fn mean_abs(diffs: &[f64], signs: impl Fn(usize) -> bool) -> f64 {
    let s: f64 = diffs
        .iter()
        .enumerate()
        .map(|(i, d)| if signs(i) { -d } else { *d })
        .sum();
    (s / diffs.len() as f64).abs()
}

/// Two-sided paired sign-flip test on per-query differences. Exact for at
/// most [`EXACT_PERMUTATION_LIMIT`] queries, seeded Monte Carlo otherwise.
pub fn paired_permutation_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!("paired lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if iterations == 0 {
        return Err(Error::Evaluation("iterations must be positive".into()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean_abs(&diffs, |_| false);
    let tol = 1e-12 * (1.0 + observed);
    let at_least = |s: f64| s >= observed - tol;
    if diffs.len() <= EXACT_PERMUTATION_LIMIT {
        let total = 1u32 << diffs.len();
        let hits = (0..total)
            .filter(|mask| at_least(mean_abs(&diffs, |i| mask >> i & 1 == 1)))
            .count();
        Ok(hits as f64 / total as f64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        let mut flips = vec![false; diffs.len()];
        for _ in 0..iterations {
            for f in flips.iter_mut() {
                *f = rng.gen::<bool>();
            }
            if at_least(mean_abs(&diffs, |i| flips[i])) {
                hits += 1;
            }
        }
        Ok((hits + 1) as f64 / (iterations + 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: bool = true;
    const F: bool = false;

    #[test]
    fn ap_both_modes() {
        let r = [T, F, T, F];
        assert!((average_precision(&r, 2, ApMode::Paper) - 5.0 / 12.0).abs() < 1e-15);
        assert!((average_precision(&r, 2, ApMode::Standard) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[T, T, T], 3, ApMode::Standard), 1.0);
        assert_eq!(average_precision(&[F, F], 0, ApMode::Paper), 0.0);
        assert_eq!(average_precision(&[F, F], 3, ApMode::Standard), 0.0);
        assert_eq!(average_precision(&[], 3, ApMode::Paper), 0.0);
    }

    #[test]
    fn rr() {
        assert_eq!(reciprocal_rank(&[T, F]), 1.0);
        assert_eq!(reciprocal_rank(&[F, T]), 0.5);
        assert_eq!(reciprocal_rank(&[F, F]), 0.0);
    }

    fn pool(lines: &str) -> JudgmentPool {
        JudgmentPool::parse(lines).unwrap()
    }

    #[test]
    fn map_and_wmap() {
        // q1: [T,F,F,F,F] paper AP = 1/5 = 0.2, n = 1
        // q2: [F,T,T,T,F] with 3 correct: paper AP = (1/2+2/3+3/4)/5
        let p = pool("q1\ta\t1\nq2\tb\t1\nq2\tc\t1\nq2\td\t1\n");
        let run = Run::parse(
            "q1\t1\ta\t0.9\nq1\t2\tx\t0.8\nq1\t3\ty\t0.7\nq1\t4\tz\t0.6\nq1\t5\tw\t0.5\n\
             q2\t1\tx\t0.9\nq2\t2\tb\t0.8\nq2\t3\tc\t0.7\nq2\t4\td\t0.6\nq2\t5\ty\t0.5\n",
        )
        .unwrap();
        let rep = evaluate_run(&run, &p, ApMode::Paper).unwrap();
        let ap2 = (0.5 + 2.0 / 3.0 + 0.75) / 5.0;
        assert!((rep.map - (0.2 + ap2) / 2.0).abs() < 1e-15);
        assert!((rep.wmap - (0.2 + 3.0 * ap2) / 4.0).abs() < 1e-15);
        assert!((rep.mrr - 0.75).abs() < 1e-15);
        assert_eq!(rep.unjudged(), 6);
    }

    #[test]
    fn missing_query_scores_zero_and_unknown_fails() {
        let p = pool("q1\ta\t1\nq2\tb\t0\n");
        let run = Run::parse("q1\t1\ta\t0.5\n").unwrap();
        let rep = evaluate_run(&run, &p, ApMode::Standard).unwrap();
        assert_eq!(rep.map, 0.5);
        assert_eq!(rep.zero_correct, ["q2"]);
        let bad = Run::parse("q9\t1\ta\t0.5\n").unwrap();
        let err = evaluate_run(&bad, &p, ApMode::Paper).unwrap_err();
        assert!(err.to_string().contains("q9"));
    }

    #[test]
    fn run_parse_errors() {
        assert!(Run::parse("q\t2\ta\t0.5\n").is_err());
        assert!(Run::parse("q\t1\ta\n").is_err());
        assert!(Run::parse("q\t1\ta\t1.5\n").is_err());
        assert!(JudgmentPool::parse("q\ta\t2\n").is_err());
        assert!(JudgmentPool::parse("q\ta\t1\nq\ta\t0\n").is_err());
    }

    #[test]
    fn report_text() {
        let p = pool("q1\ta\t1\n");
        let run = Run::parse("q1\t1\tb\t0.5\nq1\t2\ta\t0.4\nq1\t3\tc\t0.1\n").unwrap();
        let text = evaluate_run(&run, &p, ApMode::Paper).unwrap().to_text();
        assert!(text.contains("q1\t0.166667\t0.500000\t3\t1\t2\n"), "{text}");
        assert!(text.contains("aggregate\tMAP\t0.166667\n"));
    }

    #[test]
    fn permutation_fixtures() {
        let a = [0.1, 0.5, 0.3];
        assert_eq!(paired_permutation_test(&a, &a, 1000, 0).unwrap(), 1.0);
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.05).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert_eq!(paired_permutation_test(&a, &b, 1000, 0).unwrap(), 2.0 / 1024.0);
        assert_eq!(paired_permutation_test(&[0.9], &[0.1], 1000, 0).unwrap(), 1.0);
        assert!(paired_permutation_test(&[0.9], &[], 10, 0).is_err());
    }

    #[test]
    fn monte_carlo_floor_and_seed() {
        let b = vec![0.0; 40];
        let a = vec![1.0; 40];
        let p = paired_permutation_test(&a, &b, 999, 7).unwrap();
        assert_eq!(p, 1.0 / 1000.0);
        let a: Vec<f64> = (0..40).map(|i| (i % 3) as f64 * 0.1).collect();
        let p1 = paired_permutation_test(&a, &b, 500, 3).unwrap();
        assert_eq!(p1, paired_permutation_test(&a, &b, 500, 3).unwrap());
        assert!(p1 > 0.0 && p1 <= 1.0);
    }
}
