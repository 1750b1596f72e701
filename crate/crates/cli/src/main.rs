//! `multiatlas`: synthetic data, harmonization, graphs, training, fusion
//! and reporting for the multi-atlas graph attention ensemble.

mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multiatlas::dataset::{load_manifest, make_stratified_folds, AtlasSpec, Cohort, Label, SplitPlan};
use multiatlas::eval::experiment::{
    assemble_fold, harmonized_series, predict_test, prepare_atlas, train_member, MemberResult,
};
use multiatlas::eval::{run_experiment, summarize, summary_table, ExperimentReport};
use multiatlas::gat::{EpochRecord, GatModel};
use multiatlas::graphbuild::build_graph;
use multiatlas::harmonize::fit_combat;
use multiatlas::synth::{generate, write_cohort, SynthSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use config::{ExperimentConfig, Overrides};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "multiatlas", version, about)]
struct Cli {
    /// Worker threads for fold and atlas parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort (manifest, CSVs, ground truth).
    Synth(SynthArgs),
    /// Fit site harmonization per fold and atlas and save the models.
    Harmonize {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Build connectivity graphs and report their statistics.
    Graphs {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        fold: Option<usize>,
        /// Also write every real subject's graph as JSON.
        #[arg(long)]
        dump: bool,
    },
    /// Train per-atlas classifiers and save checkpoints.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        atlas: Option<String>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Fuse saved checkpoints on each fold's test set.
    Ensemble {
        #[command(flatten)]
        o: Overrides,
    },
    /// Run the whole pipeline over every fold.
    Evaluate {
        #[command(flatten)]
        o: Overrides,
    },
    /// Print the summary table and write per-fold prediction CSVs.
    Report {
        #[command(flatten)]
        o: Overrides,
    },
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base specification (JSON); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    site_shift: Option<f64>,
    #[arg(long)]
    age_effect: Option<f64>,
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    subjects_per_site: Option<usize>,
    #[arg(long)]
    time_points: Option<usize>,
    /// NAME:ROIS, repeatable; replaces the default atlas roster.
    #[arg(long = "atlas")]
    atlases: Vec<String>,
}

/// A trained member with what fusion and reporting need.
#[derive(Debug, Serialize, Deserialize)]
struct MemberCheckpoint {
    fold: usize,
    atlas: String,
    validation_accuracy: f64,
    best_epoch: usize,
    history: Vec<EpochRecord>,
    model: GatModel,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e} ({hint})", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut spec = match &args.spec {
        Some(p) => read_json::<SynthSpec>(p, "synthetic spec")?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.signal {
        spec.signal_strength = v;
    }
    if let Some(v) = args.site_shift {
        spec.site_shift = v;
    }
    if let Some(v) = args.age_effect {
        spec.age_effect = v;
    }
    if args.sites.is_some() || args.subjects_per_site.is_some() {
        let sites = args.sites.unwrap_or(spec.site_sizes.len());
        let per = args
            .subjects_per_site
            .unwrap_or_else(|| spec.site_sizes.first().copied().unwrap_or(80));
        spec.site_sizes = vec![per; sites];
    }
    if let Some(v) = args.time_points {
        spec.time_points = v;
    }
    if !args.atlases.is_empty() {
        spec.atlases = args
            .atlases
            .iter()
            .map(|a| {
                let (name, n) = a
                    .split_once(':')
                    .ok_or_else(|| CliError::Usage(format!("--atlas expects NAME:ROIS, got {a:?}")))?;
                let n_rois = n
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad ROI count in {a:?}")))?;
                Ok(AtlasSpec {
                    name: name.to_string(),
                    n_rois,
                })
            })
            .collect::<Result<_, CliError>>()?;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (cohort, truth) = generate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = write_cohort(&cohort, &truth, &args.out).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{}", manifest.display());
    Ok(())
}

struct Run {
    cfg: ExperimentConfig,
    cohort: Cohort,
    plan: SplitPlan,
    dir: PathBuf,
}

impl Run {
    fn open(o: &Overrides) -> Result<Self, CliError> {
        let cfg = ExperimentConfig::resolve(o)?;
        let cohort = load_manifest(&cfg.manifest).map_err(|e| CliError::Data(e.to_string()))?;
        cfg.pipeline.resolve_atlases(&cohort)?;
        let plan = make_stratified_folds(&cohort, cfg.pipeline.fold_count, cfg.pipeline.seed)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let dir = cfg.prepare_run_dir()?;
        write_json(&dir.join("splits.json"), &plan)?;
        log::info!("run directory {}", dir.display());
        Ok(Self { cfg, cohort, plan, dir })
    }

    fn folds(&self, only: Option<usize>) -> Result<Vec<&multiatlas::dataset::Fold>, CliError> {
        match only {
            Some(f) if f >= self.plan.folds.len() => Err(CliError::Usage(format!(
                "fold {f} out of range (0..{})",
                self.plan.folds.len()
            ))),
            Some(f) => Ok(vec![&self.plan.folds[f]]),
            None => Ok(self.plan.folds.iter().collect()),
        }
    }

    fn atlases(&self) -> Vec<String> {
        self.cfg
            .pipeline
            .resolve_atlases(&self.cohort)
            .expect("checked when opening")
    }

    fn checkpoint_path(&self, fold: usize, atlas: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("fold{fold}")).join(format!("{atlas}.json"))
    }

    fn records(&self, ids: &[String]) -> Vec<&multiatlas::dataset::SubjectRecord> {
        ids.iter()
            .map(|id| self.cohort.subject(id).expect("plan ids come from the cohort"))
            .collect()
    }

    fn write_report(&self, report: &ExperimentReport) -> Result<(), CliError> {
        write_json(&self.dir.join("report.json"), report)?;
        write_json(&self.dir.join("summary.json"), &report.summary)?;
        let table = summary_table(&report.summary);
        write_text(&self.dir.join("summary.txt"), &table)?;
        let csv = multiatlas::eval::experiment::subject_csv(&report.folds)?;
        write_text(&self.dir.join("predictions.csv"), &csv)?;
        print!("{table}");
        Ok(())
    }
}

fn harmonize(o: &Overrides, fold: Option<usize>) -> Result<(), CliError> {
    let run = Run::open(o)?;
    for f in run.folds(fold)? {
        for atlas in run.atlases() {
            let train = run.records(&f.train);
            let model = fit_combat(&train, &atlas, run.cfg.pipeline.empirical_bayes).map_err(|e| {
                CliError::Data(format!("harmonize failed (fold {}, atlas {atlas}): {e}", f.index))
            })?;
            let path = run.dir.join("harmonize").join(format!("fold{}", f.index)).join(format!("{atlas}.json"));
            let text = model.to_json().expect("model serializes");
            write_text(&path, &text)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GraphStats {
    fold: usize,
    atlas: String,
    graphs: usize,
    mean_degree: f64,
    min_degree: usize,
    max_degree: usize,
}

fn graphs(o: &Overrides, fold: Option<usize>, dump: bool) -> Result<(), CliError> {
    let run = Run::open(o)?;
    let p = &run.cfg.pipeline;
    for f in run.folds(fold)? {
        let ids: Vec<String> = f.train.iter().chain(&f.validation).chain(&f.test).cloned().collect();
        let subjects = run.records(&ids);
        for atlas in run.atlases() {
            let series = harmonized_series(&run.cohort, f, &atlas, &subjects, p)?;
            let built: Vec<_> = series
                .par_iter()
                .map(|s| build_graph(s, p.knn_k, p.neighbor_ranking))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Data(format!("graphs failed (fold {}, atlas {atlas}): {e}", f.index)))?;
            let degrees: Vec<usize> = built
                .iter()
                .flat_map(|g| (0..g.node_count).map(|i| g.degree(i)))
                .collect();
            let stats = GraphStats {
                fold: f.index,
                atlas: atlas.clone(),
                graphs: built.len(),
                mean_degree: degrees.iter().sum::<usize>() as f64 / degrees.len() as f64,
                min_degree: degrees.iter().copied().min().unwrap_or(0),
                max_degree: degrees.iter().copied().max().unwrap_or(0),
            };
            let dir = run.dir.join("graphs").join(format!("fold{}", f.index));
            write_json(&dir.join(format!("{atlas}.stats.json")), &stats)?;
            if dump {
                for (id, g) in ids.iter().zip(&built) {
                    write_json(&dir.join(&atlas).join(format!("{id}.json")), &g.to_dump())?;
                }
            }
            println!(
                "fold {} {atlas}: {} graphs, mean degree {:.2}",
                f.index, stats.graphs, stats.mean_degree
            );
        }
    }
    Ok(())
}

fn train(o: &Overrides, atlas: Option<&str>, fold: Option<usize>) -> Result<(), CliError> {
    let run = Run::open(o)?;
    let all = run.cohort.atlas_names();
    let atlases: Vec<String> = match atlas {
        Some(a) if !run.atlases().iter().any(|x| x == a) => {
            return Err(CliError::Usage(format!("atlas {a:?} is not part of this experiment")))
        }
        Some(a) => vec![a.to_string()],
        None => run.atlases(),
    };
    let jobs: Vec<(&multiatlas::dataset::Fold, &String)> = run
        .folds(fold)?
        .into_iter()
        .flat_map(|f| atlases.iter().map(move |a| (f, a)))
        .collect();
    let paths: Vec<PathBuf> = jobs
        .par_iter()
        .map(|(f, a)| {
            let index = all.iter().position(|x| x == *a).expect("resolved atlas");
            let data = prepare_atlas(&run.cohort, f, a, &run.cfg.pipeline, true)?;
            let outcome = train_member(&data, f.index, index, &run.cfg.pipeline)?;
            let ckpt = MemberCheckpoint {
                fold: f.index,
                atlas: a.to_string(),
                validation_accuracy: outcome.best_validation_accuracy,
                best_epoch: outcome.best_epoch,
                history: outcome.history,
                model: outcome.model,
            };
            let path = run.checkpoint_path(f.index, a);
            write_json(&path, &ckpt)?;
            Ok(path)
        })
        .collect::<Result<_, CliError>>()?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn ensemble(o: &Overrides) -> Result<(), CliError> {
    let run = Run::open(o)?;
    let p = &run.cfg.pipeline;
    let folds: Vec<_> = run
        .plan
        .folds
        .par_iter()
        .map(|f| {
            let mut members = Vec::new();
            let mut sizes = None;
            for atlas in run.atlases() {
                let path = run.checkpoint_path(f.index, &atlas);
                let ckpt: MemberCheckpoint = read_json(&path, "run `train` first")?;
                let data = prepare_atlas(&run.cohort, f, &atlas, p, false)?;
                let probs = predict_test(&ckpt.model, &data, f.index)?;
                sizes.get_or_insert(data.sizes);
                members.push(MemberResult {
                    atlas,
                    validation_accuracy: ckpt.validation_accuracy,
                    best_epoch: ckpt.best_epoch,
                    epochs_run: ckpt.history.len(),
                    test_probabilities: probs,
                });
            }
            let truth: Vec<Label> = run.records(&f.test).iter().map(|s| s.label).collect();
            let report = assemble_fold(f.index, sizes.unwrap_or_default(), &f.test, &truth, &members, &p.methods)?;
            write_json(&run.dir.join("ensemble").join(format!("fold{}.json", f.index)), &report)?;
            Ok(report)
        })
        .collect::<Result<_, CliError>>()?;
    let summary = summarize(&folds);
    run.write_report(&ExperimentReport { folds, summary })
}

fn evaluate(o: &Overrides) -> Result<(), CliError> {
    let run = Run::open(o)?;
    let report = run_experiment(&run.cohort, &run.plan, &run.cfg.pipeline)?;
    run.write_report(&report)
}

fn report(o: &Overrides) -> Result<(), CliError> {
    let cfg = ExperimentConfig::resolve(o)?;
    let dir = cfg.run_dir();
    let report: ExperimentReport = read_json(&dir.join("report.json"), "run `evaluate` or `ensemble` first")?;
    let table = summary_table(&report.summary);
    write_text(&dir.join("summary.txt"), &table)?;
    for f in &report.folds {
        let csv = multiatlas::eval::experiment::subject_csv(std::slice::from_ref(f)).map_err(CliError::from)?;
        write_text(&dir.join("predictions").join(format!("fold{}.csv", f.fold)), &csv)?;
    }
    print!("{table}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(args) => synth(args),
        Command::Harmonize { o, fold } => harmonize(o, *fold),
        Command::Graphs { o, fold, dump } => graphs(o, *fold, *dump),
        Command::Train { o, atlas, fold } => train(o, atlas.as_deref(), *fold),
        Command::Ensemble { o } => ensemble(o),
        Command::Evaluate { o } => evaluate(o),
        Command::Report { o } => report(o),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("usage error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

