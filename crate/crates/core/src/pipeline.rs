//! Stage driver: reads stage inputs, writes artifacts into a work directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_run, paired_permutation_test, ApMode, EvaluationReport, JudgmentPool, Run};
use crate::feature_select::{accumulate_counts, read_selected, select_top_k, write_selected, DEFAULT_K, DEFAULT_MIN_FEAT_COUNT};
use crate::kg::{EntityId, KnowledgeGraph, LoadSummary};
use crate::logical_form::{
    filter_rare_predicates, load_corpus, parse_query_file, write_instances, Predicate, PredicateInstance, DEFAULT_MIN_COUNT,
};
use crate::model::{Mode, ModelConfig, PredicateModel, TrainReport};
use crate::query::{append_kb_candidates, execute_query, generate_candidates, write_run, CooccurrenceIndex, RankedAnswers};
use crate::sfe::{format_feature, read_feature_matrix, write_feature_matrix, FeatureTable, Sfe, SfeConfig, SfeStats};
use crate::synth;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const KB_FILE: &str = "kb.tsv";
pub const MEDIATOR_FILE: &str = "mediators.tsv";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const DROPPED_FILE: &str = "dropped_predicates.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const FEATURES_META_FILE: &str = "features.meta.json";
pub const SELECTED_FILE: &str = "selected.tsv";
pub const SIGNIFICANCE_FILE: &str = "significance.tsv";
/// Distributional ranking with the KB-connected candidates appended.
pub const DISTRIBUTIONAL_KB_RUN: &str = "distributional+kb";

pub fn model_file(mode: Mode) -> String {
    format!("model.{mode}.txt")
}

pub fn train_log_file(mode: Mode) -> String {
    format!("train.{mode}.log")
}

pub fn run_file(name: &str) -> String {
    format!("run.{name}.tsv")
}

pub fn report_file(name: &str) -> String {
    format!("report.{name}.txt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub kb: PathBuf,
    pub mediators: Option<PathBuf>,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub pool: PathBuf,
    pub workdir: PathBuf,
    pub model: ModelConfig,
    pub sfe: SfeConfig,
    pub feature_k: usize,
    pub min_feat_count: u64,
    pub min_count: usize,
    pub ap_mode: ApMode,
    pub threads: usize,
    pub permutation_iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            kb: "kb.tsv".into(),
            mediators: None,
            corpus: "corpus.jsonl".into(),
            queries: "queries.jsonl".into(),
            pool: "pool.tsv".into(),
            workdir: "work".into(),
            model: ModelConfig::default(),
            sfe: SfeConfig::default(),
            feature_k: DEFAULT_K,
            min_feat_count: DEFAULT_MIN_FEAT_COUNT,
            min_count: DEFAULT_MIN_COUNT,
            ap_mode: ApMode::Paper,
            threads: 1,
            permutation_iterations: 10_000,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&read(path)?)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        for p in [&mut self.kb, &mut self.corpus, &mut self.queries, &mut self.pool, &mut self.workdir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(m) = self.mediators.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Validation(format!("config: {m}")));
        if self.sfe.max_len == 0 {
            return bad("sfe.max_len must be at least 1");
        }
        if self.sfe.fanout_cap == 0 {
            return bad("sfe.fanout_cap must be at least 1");
        }
        if self.feature_k == 0 {
            return bad("feature_k must be at least 1");
        }
        if self.min_count == 0 {
            return bad("min_count must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.permutation_iterations == 0 {
            return bad("permutation_iterations must be at least 1");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Stage runner bound to one resolved config.
pub struct Pipeline {
    config: PipelineConfig,
    quiet: bool,
}

impl Pipeline {
    /// Validates the config, creates the work directory and writes the
    /// resolved-config snapshot.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&config.workdir).map_err(|e| Error::io(&config.workdir, e))?;
        let p = Pipeline { config, quiet: false };
        write(&p.path(RESOLVED_CONFIG), p.config.to_json())?;
        Ok(p)
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.workdir.join(name)
    }

    fn log(&self, msg: impl Display) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    /// Normalizes the input KB into the work directory.
    pub fn build_kb(&self) -> Result<LoadSummary> {
        let (g, summary) = KnowledgeGraph::load(&self.config.kb, self.config.mediators.as_deref())?;
        let mut kb = Vec::new();
        g.write_tsv(&mut kb).map_err(|e| Error::io(KB_FILE, e))?;
        write(&self.path(KB_FILE), kb)?;
        let mut med = Vec::new();
        g.write_mediators(&mut med).map_err(|e| Error::io(MEDIATOR_FILE, e))?;
        write(&self.path(MEDIATOR_FILE), med)?;
        self.log(format_args!("build-kb: {summary}"));
        Ok(summary)
    }

    fn load_graph(&self) -> Result<KnowledgeGraph> {
        let (g, _) = KnowledgeGraph::load(&self.path(KB_FILE), Some(&self.path(MEDIATOR_FILE)))?;
        Ok(g)
    }

    /// Extracts and frequency-filters predicate instances from the corpus.
    pub fn extract_lf(&self) -> Result<usize> {
        let mut g = self.load_graph()?;
        let all = load_corpus(&read(&self.config.corpus)?, &mut g)?;
        let (kept, dropped) = filter_rare_predicates(&all, self.config.min_count);
        let mut out = Vec::new();
        write_instances(&kept, &g, &mut out)?;
        write(&self.path(INSTANCES_FILE), out)?;
        let dropped: String = dropped
            .iter()
            .map(|p| format!("{}\t{}\n", p.name, p.arity.as_usize()))
            .collect();
        write(&self.path(DROPPED_FILE), dropped)?;
        self.log(format_args!(
            "extract-lf: {} instances extracted, {} kept after min_count {}",
            all.len(),
            kept.len(),
            self.config.min_count
        ));
        Ok(kept.len())
    }

    /// The normalized graph with every training entity registered.
    fn load_training(&self) -> Result<(KnowledgeGraph, Vec<PredicateInstance>)> {
        let mut g = self.load_graph()?;
        let instances = load_corpus(&read(&self.path(INSTANCES_FILE))?, &mut g)?;
        Ok((g, instances))
    }

    /// Writes the path-feature matrix for every training argument tuple.
    pub fn sfe_extract(&self) -> Result<SfeStats> {
        let (g, instances) = self.load_training()?;
        let keys: Vec<Vec<EntityId>> = instances
            .iter()
            .map(|i| i.args.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let sfe = Sfe::new(&g, self.config.sfe)?;
        let paths = sfe.paths_for_keys(&keys, self.config.threads)?;
        let rows: Vec<_> = keys.into_iter().zip(paths).collect();
        let mut out = Vec::new();
        write_feature_matrix(&g, &rows, &mut out)?;
        write(&self.path(FEATURES_FILE), out)?;
        let stats = SfeStats {
            max_len: self.config.sfe.max_len,
            fanout_cap: self.config.sfe.fanout_cap,
            truncated_edges: sfe.truncated_edges(),
            rows: rows.len(),
        };
        let mut meta = serde_json::to_string_pretty(&stats).expect("stats serialize");
        meta.push('\n');
        write(&self.path(FEATURES_META_FILE), meta)?;
        self.log(format_args!(
            "sfe-extract: {} rows, {} fan-out truncations",
            stats.rows, stats.truncated_edges
        ));
        Ok(stats)
    }

    /// PMI top-k feature selection per predicate.
    pub fn select_features(&self) -> Result<usize> {
        let (g, instances) = self.load_training()?;
        let mut table = FeatureTable::new();
        let matrix = read_feature_matrix(&read(&self.path(FEATURES_FILE))?, &g, &mut table)?;
        let counts = accumulate_counts(&instances, |args| {
            matrix.get(args).cloned().ok_or_else(|| {
                let key = args.iter().map(|a| g.entity_name(*a).unwrap_or("?")).collect::<Vec<_>>().join("|");
                Error::Validation(format!("feature matrix has no row for {key}; rerun sfe-extract"))
            })
        })?;
        let sel = select_top_k(&counts, self.config.feature_k, self.config.min_feat_count, |f| {
            format_feature(table.feature(f), &g).expect("interned from this graph")
        });
        let mut out = Vec::new();
        write_selected(&sel, &table, &g, &mut out)?;
        write(&self.path(SELECTED_FILE), out)?;
        let total: usize = sel.iter().map(|(_, l)| l.len()).sum();
        self.log(format_args!("select-features: {total} features over {} predicates", sel.len()));
        Ok(total)
    }

    /// Trains and saves the model for `mode`.
    pub fn train(&self, mode: Mode) -> Result<TrainReport> {
        let (g, instances) = self.load_training()?;
        let mut table = FeatureTable::new();
        let selected = read_selected(&read(&self.path(SELECTED_FILE))?, &g, &mut table)?;
        let cfg = ModelConfig {
            mode,
            ..self.config.model.clone()
        };
        let mut model = PredicateModel::new(cfg, &instances, &selected, &table)?;
        let cooccurrence = CooccurrenceIndex::from_instances(&instances);
        let universes = negative_universes(&g, &instances, &cooccurrence)?;
        let sfe = Sfe::new(&g, self.config.sfe)?;
        let report = model.train(&instances, |args| sfe.paths(args), &universes)?;
        let mut out = Vec::new();
        model.save(&g, &mut out)?;
        write(&self.path(&model_file(mode)), out)?;
        let mut log = String::from("epoch\tmean_pair_loss\n");
        for (i, l) in report.epoch_loss.iter().enumerate() {
            let _ = writeln!(log, "{}\t{l}", i + 1);
        }
        write(&self.path(&train_log_file(mode)), log)?;
        self.log(format_args!(
            "train[{mode}]: {} predicates, {} pairs per epoch, final loss {:.6}",
            model.predicate_count(),
            report.pairs_per_epoch,
            report.epoch_loss.last().copied().unwrap_or(f64::NAN)
        ));
        Ok(report)
    }

    /// Answers every query with the `mode` model. Returns the run names
    /// written; distributional mode also writes the KB-appended run.
    pub fn answer(&self, mode: Mode) -> Result<Vec<String>> {
        let (g, instances) = self.load_training()?;
        let model = PredicateModel::load(&read(&self.path(&model_file(mode)))?, &g)?;
        if model.mode() != mode {
            return Err(Error::ModelFormat(format!(
                "{} holds a {} model",
                model_file(mode),
                model.mode()
            )));
        }
        let queries = parse_query_file(&read(&self.config.queries)?)?;
        let cooccurrence = CooccurrenceIndex::from_instances(&instances);
        let sfe = Sfe::new(&g, self.config.sfe)?;

        let answer_one = |q: &crate::logical_form::Query| -> Result<(RankedAnswers, Option<RankedAnswers>, Vec<String>)> {
            let cands = generate_candidates(&q.form, &g, &cooccurrence)?;
            let ranked = execute_query(&q.id, &q.form, &cands, &g, &model, |a| sfe.paths(a))?;
            let appended = (mode == Mode::Distributional).then(|| append_kb_candidates(&ranked, &cands, &g));
            Ok((ranked, appended, cands.unresolved))
        };
        let threads = self.config.threads.max(1);
        let results: Vec<Result<_>> = if threads == 1 || queries.len() < 2 {
            queries.iter().map(answer_one).collect()
        } else {
            let chunk = queries.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = queries
                    .chunks(chunk)
                    .map(|part| scope.spawn(|| part.iter().map(answer_one).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("answer worker panicked"))
                    .collect()
            })
        };

        let mut runs = Vec::new();
        let mut appended = Vec::new();
        for (q, r) in queries.iter().zip(results) {
            let (ranked, tail, unresolved) = r?;
            for name in unresolved {
                self.log(format_args!("answer[{mode}]: warning: query {} entity {name} is unknown", q.id));
            }
            runs.push(ranked);
            appended.extend(tail);
        }
        let mut names = vec![mode.to_string()];
        let mut out = Vec::new();
        write_run(&runs, &g, &mut out)?;
        write(&self.path(&run_file(&names[0])), out)?;
        if mode == Mode::Distributional {
            let mut out = Vec::new();
            write_run(&appended, &g, &mut out)?;
            write(&self.path(&run_file(DISTRIBUTIONAL_KB_RUN)), out)?;
            names.push(DISTRIBUTIONAL_KB_RUN.to_string());
        }
        self.log(format_args!("answer[{mode}]: {} queries", queries.len()));
        Ok(names)
    }

    fn pool(&self) -> Result<JudgmentPool> {
        JudgmentPool::parse(&read(&self.config.pool)?)
    }

    /// Evaluates `run` against the pool and writes the report to `out`.
    pub fn evaluate_file(&self, run: &Path, out: &Path) -> Result<EvaluationReport> {
        let run = Run::parse(&read(run)?)?;
        let report = evaluate_run(&run, &self.pool()?, self.config.ap_mode)?;
        write(out, report.to_text())?;
        Ok(report)
    }

    /// Evaluates the named run in the work directory.
    pub fn evaluate(&self, name: &str) -> Result<EvaluationReport> {
        let report = self.evaluate_file(&self.path(&run_file(name)), &self.path(&report_file(name)))?;
        self.log(format_args!(
            "evaluate[{name}]: MAP {:.6} W-MAP {:.6} MRR {:.6} ({} ap, {} unjudged)",
            report.map,
            report.wmap,
            report.mrr,
            report.mode,
            report.unjudged()
        ));
        Ok(report)
    }

    /// Paired permutation tests between run pairs whose run files exist.
    pub fn significance(&self) -> Result<String> {
        let pool = self.pool()?;
        let pairs = [
            ("combined", "distributional"),
            ("combined", "formal"),
            ("combined", DISTRIBUTIONAL_KB_RUN),
            (DISTRIBUTIONAL_KB_RUN, "distributional"),
        ];
        let mut reports: BTreeMap<&str, EvaluationReport> = BTreeMap::new();
        for name in pairs.iter().flat_map(|(a, b)| [*a, *b]) {
            let path = self.path(&run_file(name));
            if !reports.contains_key(name) && path.exists() {
                let run = Run::parse(&read(&path)?)?;
                reports.insert(name, evaluate_run(&run, &pool, self.config.ap_mode)?);
            }
        }
        let iterations = self.config.permutation_iterations;
        let seed = self.config.model.seed;
        let mut text = format!(
            "# paired permutation test, ap_mode {}, iterations {iterations}, seed {seed}\na\tb\tmap_a\tmap_b\tp_value\n",
            self.config.ap_mode
        );
        let mut tested = 0;
        for (a, b) in pairs {
            let (Some(ra), Some(rb)) = (reports.get(a), reports.get(b)) else {
                continue;
            };
            let aps = |r: &EvaluationReport| r.per_query.iter().map(|q| q.ap).collect::<Vec<_>>();
            let p = paired_permutation_test(&aps(ra), &aps(rb), iterations, seed)?;
            let _ = writeln!(text, "{a}\t{b}\t{:.6}\t{:.6}\t{p:.6}", ra.map, rb.map);
            tested += 1;
        }
        if tested == 0 {
            return Err(Error::io(
                self.path(&run_file("combined")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no pair of runs to compare"),
            ));
        }
        write(&self.path(SIGNIFICANCE_FILE), &text)?;
        self.log(format_args!("significance: {tested} comparisons"));
        Ok(text)
    }

    /// Every stage in order, all three modes. Returns the report per run.
    pub fn run_all(&self) -> Result<BTreeMap<String, EvaluationReport>> {
        self.build_kb()?;
        self.extract_lf()?;
        self.sfe_extract()?;
        self.select_features()?;
        let mut names = Vec::new();
        for mode in Mode::ALL {
            self.train(mode)?;
            names.extend(self.answer(mode)?);
        }
        let mut reports = BTreeMap::new();
        for name in names {
            let r = self.evaluate(&name)?;
            reports.insert(name, r);
        }
        self.significance()?;
        Ok(reports)
    }
}

fn candidate_entities(g: &KnowledgeGraph, e: EntityId, cooccurrence: &CooccurrenceIndex) -> Result<BTreeSet<EntityId>> {
    let mut out = g.neighbors(e)?;
    out.extend(g.mediator_neighbors(e)?);
    out.extend(cooccurrence.partners(e));
    out.remove(&e);
    Ok(out)
}

/// Negative argument tuples per training instance. A category instance
/// draws from every training entity the predicate was not seen with; a
/// relation instance corrupts one side with a graph or training neighbor of
/// the other, falling back to every training entity when that is empty.
pub fn negative_universes(
    g: &KnowledgeGraph,
    instances: &[PredicateInstance],
    cooccurrence: &CooccurrenceIndex,
) -> Result<Vec<Vec<Vec<EntityId>>>> {
    let entities: BTreeSet<EntityId> = instances.iter().flat_map(|i| i.args.iter().copied()).collect();
    let mut positives: HashMap<&Predicate, BTreeSet<&[EntityId]>> = HashMap::new();
    for inst in instances {
        positives.entry(&inst.predicate).or_default().insert(&inst.args);
    }
    let mut categories: HashMap<&Predicate, Vec<Vec<EntityId>>> = HashMap::new();
    let mut cands: HashMap<EntityId, BTreeSet<EntityId>> = HashMap::new();
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let pos = &positives[&inst.predicate];
        match *inst.args.as_slice() {
            [_] => {
                let u = categories.entry(&inst.predicate).or_insert_with(|| {
                    entities
                        .iter()
                        .map(|&e| vec![e])
                        .filter(|k| !pos.contains(k.as_slice()))
                        .collect()
                });
                out.push(u.clone());
            }
            [a, b] => {
                for e in [a, b] {
                    if let std::collections::hash_map::Entry::Vacant(slot) = cands.entry(e) {
                        slot.insert(candidate_entities(g, e, cooccurrence)?);
                    }
                }
                let mut u: BTreeSet<Vec<EntityId>> = BTreeSet::new();
                u.extend(cands[&a].iter().filter(|&&x| x != a).map(|&x| vec![a, x]));
                u.extend(cands[&b].iter().filter(|&&x| x != b).map(|&x| vec![x, b]));
                u.retain(|k| !pos.contains(k.as_slice()));
                if u.is_empty() {
                    u = entities
                        .iter()
                        .filter(|&&x| x != a)
                        .map(|&x| vec![a, x])
                        .filter(|k| !pos.contains(k.as_slice()))
                        .collect();
                }
                out.push(u.into_iter().collect());
            }
            _ => return Err(Error::Validation(format!("{} has {} arguments", inst.predicate, inst.args.len()))),
        }
    }
    Ok(out)
}

pub const FIXTURE_CONFIG: &str = "config.json";

/// Writes the synthetic world for `seed` plus a config that runs on it.
/// Returns the config path.
pub fn write_synthetic_fixture(dir: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fx = synth::generate(seed);
    for (name, text) in [
        ("kb.tsv", &fx.kb),
        ("mediators.tsv", &fx.mediators),
        ("corpus.jsonl", &fx.corpus),
        ("queries.jsonl", &fx.queries),
        ("pool.tsv", &fx.pool),
    ] {
        write(&dir.join(name), text)?;
    }
    let cfg = synthetic_config(seed);
    let path = dir.join(FIXTURE_CONFIG);
    write(&path, cfg.to_json())?;
    Ok(path)
}

/// Settings used for the synthetic world, with paths relative to its
/// directory.
pub fn synthetic_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        mediators: Some("mediators.tsv".into()),
        model: ModelConfig {
            seed,
            ..ModelConfig::default()
        },
        ..PipelineConfig::default()
    }
}
