use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovsp_core::eval::ApMode;
use ovsp_core::pipeline::{self, Pipeline, PipelineConfig};
use ovsp_core::{Error, Mode};

#[derive(Parser)]
#[command(name = "ovsp", version, about = "Open-vocabulary semantic parsing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and normalize the knowledge graph
    BuildKb(Common),
    /// Extract surface predicate instances from the corpus
    ExtractLf(Common),
    /// Extract path features for every training argument tuple
    SfeExtract(Common),
    /// PMI top-k feature selection per predicate
    SelectFeatures(Common),
    /// Train the model for the configured mode
    Train(Common),
    /// Answer the queries with a trained model
    Answer(Common),
    /// Score a run file against the judgment pool
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run file to score instead of the one for --mode
        #[arg(long)]
        run: Option<PathBuf>,
        /// Where to write the report (default: workdir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired permutation tests between the runs in the work directory
    Significance(Common),
    /// Run every stage for all three modes
    Pipeline(Common),
    /// Write the synthetic fixture and a config for it
    Generate {
        /// Output directory
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; relative paths inside it are relative to the file
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    mediators: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// distributional, formal or combined
    #[arg(long)]
    mode: Option<String>,
    /// paper or standard
    #[arg(long)]
    ap_mode: Option<String>,
    /// Suppress stage logs
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn config(&self) -> ovsp_core::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        set(&mut cfg.workdir, &self.workdir);
        set(&mut cfg.kb, &self.kb);
        set(&mut cfg.corpus, &self.corpus);
        set(&mut cfg.queries, &self.queries);
        set(&mut cfg.pool, &self.pool);
        if let Some(m) = &self.mediators {
            cfg.mediators = Some(m.clone());
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(m) = &self.mode {
            cfg.model.mode = m.parse()?;
        }
        if let Some(m) = &self.ap_mode {
            cfg.ap_mode = m.parse::<ApMode>()?;
        }
        Ok(cfg)
    }

    fn pipeline(&self) -> ovsp_core::Result<Pipeline> {
        Ok(Pipeline::new(self.config()?)?.quiet(self.quiet))
    }
}

fn run(cli: Cli) -> ovsp_core::Result<()> {
    match cli.command {
        Command::BuildKb(c) => c.pipeline()?.build_kb().map(drop),
        Command::ExtractLf(c) => c.pipeline()?.extract_lf().map(drop),
        Command::SfeExtract(c) => c.pipeline()?.sfe_extract().map(drop),
        Command::SelectFeatures(c) => c.pipeline()?.select_features().map(drop),
        Command::Train(c) => {
            let p = c.pipeline()?;
            p.train(p.config().model.mode).map(drop)
        }
        Command::Answer(c) => {
            let p = c.pipeline()?;
            p.answer(p.config().model.mode).map(drop)
        }
        Command::Evaluate { common, run, out } => {
            let p = common.pipeline()?;
            match run {
                Some(run) => {
                    let out = out.unwrap_or_else(|| p.path(&report_name(&run)));
                    let report = p.evaluate_file(&run, &out)?;
                    print!("{}", report.to_text());
                    Ok(())
                }
                None => {
                    let mode = p.config().model.mode;
                    let mut names = vec![mode.to_string()];
                    if mode == Mode::Distributional {
                        names.push(pipeline::DISTRIBUTIONAL_KB_RUN.to_string());
                    }
                    for name in names {
                        p.evaluate(&name)?;
                    }
                    Ok(())
                }
            }
        }
        Command::Significance(c) => {
            let text = c.pipeline()?.significance()?;
            print!("{text}");
            Ok(())
        }
        Command::Pipeline(c) => {
            let reports = c.pipeline()?.run_all()?;
            for (name, r) in reports {
                println!("{name}\tMAP {:.6}\tW-MAP {:.6}\tMRR {:.6}", r.map, r.wmap, r.mrr);
            }
            Ok(())
        }
        Command::Generate { dir, seed } => {
            let path = pipeline::write_synthetic_fixture(&dir, seed)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn report_name(run: &Path) -> String {
    let stem = run.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    format!("report.{}.txt", stem.strip_prefix("run.").unwrap_or(stem))
}

fn exit_code(e: &Error) -> u8 {
    if e.is_missing_input() {
        2
    } else if e.is_validation() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
