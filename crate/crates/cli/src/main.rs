mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dtsg_core::checkpoint::Checkpoint;
use dtsg_core::config::{layered, RunConfig};
use dtsg_core::data::{generate_synthetic, load_dataset, write_dataset, DataConfig, Dataset, RuleTagger, SyntheticSpec, Vocab};
use dtsg_core::eval::{benchmark_inference, read_predictions, write_predictions, MetricReport};
use dtsg_core::experiment::{ablate, ablation_csv, default_toggle_sets, predict_dataset, split_report, Splits};
use dtsg_core::model::{prepare, DTsg, LossToggles};
use dtsg_core::sampler::{mine_negatives, NegativeTable};
use dtsg_core::train::{log_csv, train_with, EpochLog};

#[derive(Parser)]
#[command(name = "dtsg", version, about = "Debiased temporal sentence grounding at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Serialize)]
struct Common {
    /// TOML config file (synthetic spec for `generate`, run config otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for generation, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Load data on one thread regardless of DTSG_NUM_WORKERS.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic bias-planted corpus with a provenance manifest.
    Generate,
    /// Mine contrastive negatives for the training split.
    Mine {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on `<data>/train`, early-stopping on `<data>/val`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Precomputed negative table; mined on the fly when absent.
        #[arg(long)]
        negatives: Option<PathBuf>,
    },
    /// Score a checkpoint, or an existing prediction file, on one split.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON-lines predictions to score instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Strip everything but the backbone from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time inference and count the parameters it reads.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Train and evaluate every toggle set under several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated toggle sets such as `backbone,sample,all` or
        /// `bias1+debias+contras`. Defaults to the full protocol.
        #[arg(long, value_delimiter = ',')]
        toggles: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Generate => "generate",
            Cmd::Mine { .. } => "mine",
            Cmd::Train { .. } => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Export { .. } => "export",
            Cmd::Bench { .. } => "bench",
            Cmd::Ablate { .. } => "ablate",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    if cli.common.deterministic {
        std::env::set_var("DTSG_NUM_WORKERS", "1");
    }
    let name = cli.cmd.name();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (component, code) = classify(&e);
            eprintln!("dtsg {name}: {component}: {e:#}");
            ExitCode::from(code)
        }
    }
}

/// Module name and exit code for an error. Bad input specs exit with 2.
fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    use dtsg_core::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Infeasible(_)) => ("synthetic", 2),
        Some(E::Config(_)) => ("config", 2),
        Some(E::Io { .. } | E::MissingFeatures(_) | E::Format(_)) => ("data", 1),
        Some(E::NonFiniteLoss { .. }) => ("training", 1),
        Some(E::Checkpoint(_)) => ("checkpoint", 1),
        Some(E::IdMismatch(_)) => ("evaluation", 1),
        Some(E::Shape(_) | E::AllMasked) => ("model", 1),
        None => ("cli", 1),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    match &cli.cmd {
        Cmd::Generate => generate(c),
        Cmd::Mine { data } => mine(c, data),
        Cmd::Train { data, negatives } => train(c, data, negatives.as_deref()),
        Cmd::Eval { checkpoint, predictions, data, split } => eval(c, checkpoint.as_deref(), predictions.as_deref(), data, split),
        Cmd::Export { checkpoint } => export(c, checkpoint),
        Cmd::Bench { checkpoint, data, split, reps } => bench(c, checkpoint, data, split, *reps),
        Cmd::Ablate { data, toggles, seeds } => ablate_cmd(c, data, toggles, *seeds),
    }
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(RunConfig::default(), c.config.as_deref(), &c.set)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    fs::write(c.out.join("effective_config.toml"), cfg.to_toml_string())?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn split_dir(data: &Path, split: &str) -> PathBuf {
    data.join(split)
}

fn load_split(data: &Path, split: &str, num_clips: usize) -> Result<Dataset> {
    let dir = split_dir(data, split);
    let ds = load_dataset(&dir.join("features"), &dir.join("annotations.jsonl"), DataConfig { num_clips }, &RuleTagger)
        .with_context(|| format!("loading split {split:?} from {}", data.display()))?;
    if ds.rejected_count > 0 {
        log::warn!("{split}: skipped {} invalid annotations", ds.rejected_count);
    }
    Ok(ds)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Provenance {
    generator: &'static str,
    version: &'static str,
    seed: u64,
    spec: SyntheticSpec,
    rare_pairs: Vec<(String, String)>,
    /// SHA-256 of every written corpus file, keyed by relative path.
    files: BTreeMap<String, String>,
}

fn generate(c: &Common) -> Result<()> {
    let mut spec: SyntheticSpec = layered(&SyntheticSpec::default(), c.config.as_deref(), &c.set)?;
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let corpus = generate_synthetic(&spec)?;
    let mut files = BTreeMap::new();
    for (name, ds) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let dir = split_dir(&c.out, name);
        write_dataset(ds, &dir.join("features"), &dir.join("annotations.jsonl"))?;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir.join("features"))?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        paths.push(dir.join("annotations.jsonl"));
        for p in paths {
            let rel = p.strip_prefix(&c.out)?.to_string_lossy().replace('\\', "/");
            files.insert(rel, sha256_hex(&p)?);
        }
        log::info!("{name}: {} samples", ds.len());
    }
    fs::write(c.out.join("spec.toml"), spec.to_toml_string())?;
    let run = RunConfig {
        data: dtsg_core::config::DataSection { num_clips: spec.num_clips, ..RunConfig::desk().data },
        ..RunConfig::desk()
    };
    fs::write(c.out.join("run.toml"), run.to_toml_string())?;
    let provenance = Provenance {
        generator: "dtsg-synthetic",
        version: env!("CARGO_PKG_VERSION"),
        seed: spec.seed,
        spec,
        rare_pairs: corpus.rare_pairs.clone(),
        files,
    };
    write_json(&c.out.join("manifest.json"), &provenance)?;
    println!("wrote corpus to {} (regenerate with --config {})", c.out.display(), c.out.join("spec.toml").display());
    Ok(())
}

fn mine(c: &Common, data: &Path) -> Result<()> {
    let cfg = run_config(c)?;
    let train = load_split(data, "train", cfg.data.num_clips)?;
    let table = mine_negatives(&train);
    table.save(&c.out.join("negatives.json"))?;
    println!("mined negatives for {}/{} training samples", table.covered(), train.len());
    Ok(())
}

fn negatives_for(needed: bool, path: Option<&Path>, train: &Dataset) -> Result<Option<NegativeTable>> {
    Ok(match (needed, path) {
        (false, _) => None,
        (true, Some(p)) => Some(NegativeTable::load(p)?),
        (true, None) => {
            log::info!("mining negatives over {} samples", train.len());
            Some(mine_negatives(train))
        }
    })
}

fn loss_plot(log: &[EpochLog]) -> String {
    let xs: Vec<f64> = log.iter().map(|e| e.epoch as f64).collect();
    let mut series = vec![("total".to_string(), log.iter().map(|e| e.total).collect())];
    for term in dtsg_core::train::LOG_TERMS {
        if log.iter().any(|e| e.losses.contains_key(term)) {
            series.push((term.to_string(), log.iter().map(|e| e.losses.get(term).copied().unwrap_or(f64::NAN)).collect()));
        }
    }
    plot::line_chart("training loss", "loss", &xs, &series)
}

fn train(c: &Common, data: &Path, negatives: Option<&Path>) -> Result<()> {
    let cfg = run_config(c)?;
    let train_set = load_split(data, "train", cfg.data.num_clips)?;
    let val_set = load_split(data, "val", cfg.data.num_clips)?;
    let table = negatives_for(cfg.train.toggles.sample, negatives, &train_set)?;
    let vocab = Vocab::from_dataset(&train_set);
    let model = DTsg::new(cfg.model.clone(), vocab, train_set.feature_dim(), cfg.train.seed)?;
    log::info!("training {} ({} tensors) on {} samples", cfg.train.toggles.label(), model.store.len(), train_set.len());
    let log_path = c.out.join("train_log.csv");
    let state = train_with(model, &train_set, &val_set, table.as_ref(), &cfg.train, |s| {
        let e = s.log.last().expect("epoch logged");
        log::info!("epoch {} lr {:.2e} loss {:.4} val R@1 IoU0.5 {:.2}", e.epoch, e.lr, e.total, e.val_r1_iou05);
        fs::write(&log_path, log_csv(&s.log)).map_err(|err| dtsg_core::Error::io(&log_path, err))
    })?;
    fs::write(&log_path, log_csv(&state.log))?;
    fs::write(c.out.join("loss_curve.svg"), loss_plot(&state.log))?;
    let ckpt = Checkpoint::from_state(&state, &cfg.train);
    ckpt.save(&c.out.join("checkpoint.dtsg"))?;
    println!("best epoch {} val R@1 IoU0.5 {:.2}; checkpoint {}", state.best_epoch, state.best_val, c.out.join("checkpoint.dtsg").display());
    Ok(())
}

fn recall_plot(report: &MetricReport) -> (String, String) {
    let mut splits: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, f64)> = Vec::new();
    for cell in &report.cells {
        if !splits.contains(&cell.split) {
            splits.push(cell.split.clone());
        }
        if !cells.contains(&(cell.n, cell.m)) {
            cells.push((cell.n, cell.m));
        }
    }
    let labels: Vec<String> = cells.iter().map(|(n, m)| format!("R@{n} IoU={m}")).collect();
    let mut csv = format!("cell,{}\n", splits.join(","));
    for (label, &(n, m)) in labels.iter().zip(&cells) {
        let row: Vec<String> = splits.iter().map(|s| report.recall(s, n, m).map_or(String::new(), |r| format!("{r:.2}"))).collect();
        csv.push_str(&format!("{label},{}\n", row.join(",")));
    }
    let series: Vec<(String, Vec<f64>)> =
        splits.iter().map(|s| (s.clone(), cells.iter().map(|&(n, m)| report.recall(s, n, m).unwrap_or(0.0)).collect())).collect();
    (csv, plot::bar_chart("recall by split", "recall (%)", &labels, &series))
}

fn eval(c: &Common, checkpoint: Option<&Path>, predictions: Option<&Path>, data: &Path, split: &str) -> Result<()> {
    let cfg = run_config(c)?;
    let test = load_split(data, split, cfg.data.num_clips)?;
    let train = if split != "train" && split_dir(data, "train").join("annotations.jsonl").exists() {
        Some(load_split(data, "train", cfg.data.num_clips)?)
    } else {
        None
    };
    let preds = match (checkpoint, predictions) {
        (Some(path), _) => {
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.inference()?;
            let preds = predict_dataset(&model, &ckpt.vocab, &ckpt.model_config, &test, cfg.eval.top_n)?;
            write_predictions(&preds, &c.out.join("predictions.jsonl"))?;
            preds
        }
        (None, Some(path)) => read_predictions(path)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = split_report(&preds, train.as_ref(), &test, &cfg)?;
    report.write_csv(&c.out.join("metrics.csv"))?;
    let (csv, svg) = recall_plot(&report);
    fs::write(c.out.join("recall_plot.csv"), csv)?;
    fs::write(c.out.join("recall.svg"), svg)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn export(c: &Common, checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let exported = ckpt.export_backbone();
    let path = c.out.join("backbone.dtsg");
    exported.save(&path)?;
    println!("kept {} of {} tensors in {}", exported.store.len(), ckpt.store.len(), path.display());
    Ok(())
}

fn bench(c: &Common, checkpoint: &Path, data: &Path, split: &str, reps: usize) -> Result<()> {
    let cfg = run_config(c)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.inference()?;
    let test = load_split(data, split, cfg.data.num_clips)?;
    let samples = prepare(&test, &ckpt.vocab, ckpt.model_config.max_query_len);
    let report = benchmark_inference(&model, &samples, reps, 1)?;
    write_json(&c.out.join("bench.json"), &report)?;
    println!(
        "{:.3} ms/sample (sd {:.3}) over {} samples; inference reads {} parameters",
        report.mean_ms_per_sample, report.std_ms_per_sample, report.samples, report.touched_params
    );
    Ok(())
}

fn ablate_cmd(c: &Common, data: &Path, toggles: &[String], seeds: u64) -> Result<()> {
    let cfg = run_config(c)?;
    let sets: Vec<LossToggles> = if toggles.is_empty() {
        default_toggle_sets()
    } else {
        toggles.iter().map(|t| LossToggles::parse(t)).collect::<Result<_, _>>()?
    };
    let train = load_split(data, "train", cfg.data.num_clips)?;
    let val = load_split(data, "val", cfg.data.num_clips)?;
    let test = load_split(data, "test", cfg.data.num_clips)?;
    let table = negatives_for(sets.iter().any(|t| t.sample), None, &train)?;
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.train.seed + k).collect();
    let splits = Splits { train: &train, val: &val, test: &test };
    let rows = ablate(&cfg, splits, table.as_ref(), &sets, &seed_list, |r| {
        log::info!("{} seed {}: all {:.2} rare {:.2} common {:.2} ({:.0}s)", r.label, r.seed, r.all, r.rare, r.common, r.seconds);
    })?;
    fs::write(c.out.join("ablation.csv"), ablation_csv(&rows))?;
    write_json(&c.out.join("ablation_runs.json"), &rows)?;
    let labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    let series = vec![
        ("all".to_string(), rows.iter().map(|r| r.mean_all()).collect()),
        ("rare".to_string(), rows.iter().map(|r| r.mean_rare()).collect()),
        ("common".to_string(), rows.iter().map(|r| r.mean_common()).collect()),
    ];
    fs::write(c.out.join("ablation.svg"), plot::bar_chart("R@1 IoU=0.5 by toggle set", "recall (%)", &labels, &series))?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
