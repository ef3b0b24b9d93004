use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ttal_cli::config::BorderScope;
use ttal_cli::corpus::{write_corpus, Role};
use ttal_cli::report::render;
use ttal_cli::run::{
    cmd_evaluate, cmd_round, cmd_teacher, read_json, read_model, teacher_path, Annotation, Predictor,
    RoundArgs, Source,
};
use ttal_cli::study::{corpus_for, reaggregate, run_study_in, StudyId};
use ttal_cli::RunConfig;
use ttal_core::curate::PseudoLabelMode;
use ttal_core::Aggregator;

#[derive(Parser)]
#[command(name = "ttal", version, about = "TTA quality estimation, self-training and active learning on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus laid out like one study seed.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "st-only")]
        study: StudyId,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the teacher on the corpus base set.
    Teacher {
        #[command(flatten)]
        paths: RunPaths,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Self-training round: TTA inference, quality estimation, pseudo-labels, fine-tuning.
    StRound {
        #[command(flatten)]
        round: RoundOpts,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Combined active-learning and self-training round.
    AlStRound {
        #[command(flatten)]
        round: RoundOpts,
        /// Read annotations from worklist files instead of the simulated oracle.
        #[arg(long)]
        human: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a model or a directory of masks against the corpus labels.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, conflicts_with = "masks", required_unless_present = "masks")]
        model: Option<PathBuf>,
        /// Directory of mask svols named `<case_id>.json`.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        role: RoleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every arm of a study analog over all seeds.
    Study {
        study: StudyId,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Recompute and print the tables of a study directory.
    Report {
        dir: PathBuf,
        /// Print every metric and both aggregations.
        #[arg(long)]
        all: bool,
    },
}

#[derive(Args)]
struct RunPaths {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct RoundOpts {
    #[command(flatten)]
    paths: RunPaths,
    /// Teacher model; defaults to `<run>/teacher/model.json`.
    #[arg(long, conflicts_with = "external")]
    model: Option<PathBuf>,
    /// Job directory of an external segmenter.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Run subdirectory; defaults to the command name.
    #[arg(long)]
    stage: Option<String>,
    /// Only pool cases with this domain tag.
    #[arg(long)]
    pool_domain: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Base,
    Pool,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregatorArg {
    Mean,
    Median,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PlainSoft,
    TtaMedianSoft,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    AllCandidates,
    StCandidates,
}

/// Overrides on top of `--config` (or the defaults).
#[derive(Args)]
struct ConfigArgs {
    /// RunConfig JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop the pseudo-label threshold floor.
    #[arg(long)]
    paper_faithful: bool,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seed of a single-run command; defaults to the first seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long)]
    tta_seed: Option<u64>,
    #[arg(long, value_enum)]
    aggregator: Option<AggregatorArg>,
    #[arg(long)]
    exclude_identity: bool,
    /// Cases annotated in an AL round.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, conflicts_with = "paper_faithful")]
    floor: Option<f64>,
    /// Pure AL: no pseudo-labels.
    #[arg(long)]
    no_st: bool,
    #[arg(long)]
    borders: bool,
    #[arg(long, value_enum)]
    border_scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    pseudo_label_mode: Option<ModeArg>,
    /// Phantom shape as nz,ny,nx.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => read_json::<RunConfig>(p)?,
            None => RunConfig::default(),
        };
        if self.paper_faithful {
            c = c.paper_faithful();
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(n) = self.ensemble_size {
            c.ensemble_size = n;
        }
        if let Some(s) = self.tta_seed {
            c.tta_seed = s;
        }
        if let Some(a) = self.aggregator {
            c.aggregator = match a {
                AggregatorArg::Mean => Aggregator::Mean,
                AggregatorArg::Median => Aggregator::Median,
            };
        }
        if self.exclude_identity {
            c.include_identity = false;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(f) = self.floor {
            c.floor = Some(f);
        }
        if self.no_st {
            c.st = false;
        }
        if self.borders {
            c.borders = true;
        }
        if let Some(s) = self.border_scope {
            c.border_scope = match s {
                ScopeArg::AllCandidates => BorderScope::AllCandidates,
                ScopeArg::StCandidates => BorderScope::StCandidates,
            };
        }
        if let Some(m) = self.pseudo_label_mode {
            c.pseudo_label_mode = match m {
                ModeArg::PlainSoft => PseudoLabelMode::PlainSoft,
                ModeArg::TtaMedianSoft => PseudoLabelMode::TtaMedianSoft,
            };
        }
        if let Some(s) = &self.shape {
            c.shape = s[..]
                .try_into()
                .map_err(|_| ttal_core::Error::Validation(format!("--shape needs three sizes, got {}", s.len())))?;
        }
        c.validate()?;
        Ok(c)
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }
}

fn round(opts: RoundOpts, cfg: &RunConfig, seed: u64, stage: &str, annotation: Annotation, st_only: bool) -> Result<()> {
    let run = &opts.paths.run;
    let source = match opts.external {
        Some(dir) => Source::External(dir),
        None => {
            let path = opts.model.unwrap_or_else(|| teacher_path(run));
            Source::Model(read_model(&path).with_context(|| format!("loading model {}", path.display()))?)
        }
    };
    let stage = opts.stage.unwrap_or_else(|| stage.to_string());
    let args = RoundArgs {
        corpus: &opts.paths.corpus,
        run,
        stage: &stage,
        seed,
        source,
        annotation,
        pool_domain: opts.pool_domain,
        st_only,
    };
    let r = cmd_round(args, cfg)?;
    let rec = &r.record;
    println!(
        "{stage}: pool {} | al {} | st {} | excluded {} | threshold {:.4}{} | train set {}",
        rec.pool,
        rec.al,
        rec.st,
        rec.excluded,
        rec.threshold,
        if rec.count_guarantee_met { "" } else { " (floor)" },
        rec.trainset_size
    );
    println!("inference: {} computed, {} reused", r.inferred, r.reused);
    match &rec.student_digest {
        Some(d) => println!("student {d} -> {}", run.join(&stage).join("student.json").display()),
        None => println!("training set written to {}", run.join(&stage).join("trainset.json").display()),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { out, study, config } => {
            let cfg = config.resolve()?;
            let seed = config.seed(&cfg);
            let manifest = corpus_for(study, &cfg, seed);
            write_corpus(&out, &manifest)?;
            println!("{} cases written to {}", manifest.entries.len(), out.display());
        }
        Command::Teacher { paths, config } => {
            let cfg = config.resolve()?;
            let model = cmd_teacher(&paths.corpus, &paths.run, &cfg, config.seed(&cfg))?;
            println!("teacher {} -> {}", model.digest(), teacher_path(&paths.run).display());
        }
        Command::StRound { round: opts, config } => {
            let cfg = config.resolve()?;
            let seed = config.seed(&cfg);
            round(opts, &cfg, seed, "st-round", Annotation::Oracle, true)?;
        }
        Command::AlStRound { round: opts, human, config } => {
            let cfg = config.resolve()?;
            let seed = config.seed(&cfg);
            let annotation = if human { Annotation::Human } else { Annotation::Oracle };
            round(opts, &cfg, seed, "al-st-round", annotation, false)?;
        }
        Command::Evaluate { corpus, model, masks, role, out } => {
            let predictor = match (model, masks) {
                (Some(m), _) => Predictor::Model(read_model(&m)?),
                (None, Some(d)) => Predictor::Masks(d),
                (None, None) => unreachable!("clap requires one of them"),
            };
            let role = match role {
                RoleArg::Base => Role::Base,
                RoleArg::Pool => Role::Pool,
                RoleArg::Test => Role::Test,
            };
            let r = cmd_evaluate(&corpus, &predictor, role, &out)?;
            for s in r.summary.iter().filter(|s| s.metric == "dice") {
                println!("{:<10} n {:>3}  dice mean {:.4} std {:.4} min {:.4} max {:.4}", s.domain_tag, s.n, s.mean, s.std, s.min, s.max);
            }
            for (id, e) in &r.failed {
                eprintln!("{id}: {e}");
            }
        }
        Command::Study { study, out, config } => {
            let cfg = config.resolve()?;
            let result = run_study_in(&out, study, &cfg)?;
            let summary = fs::read_to_string(out.join("summary.txt"))?;
            println!("{study}: {} seeds, config {}", result.seeds.len(), cfg.digest());
            print!("{summary}");
        }
        Command::Report { dir, all } => {
            let summary = reaggregate(&dir)?;
            if all {
                print!("{}", fs::read_to_string(Path::new(&dir).join("summary.csv"))?);
            } else {
                print!("{}", render(&summary));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use ttal_core::Error;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Pending(_) => 3,
                Error::Validation(_)
                | Error::InvalidArgument(_)
                | Error::InvalidGeometry(_)
                | Error::InvalidValue(_)
                | Error::ShapeMismatch { .. }
                | Error::Conflict(_)
                | Error::UnknownCase(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if code == 3 {
                eprintln!("paused: {e:#}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}
