//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::decoders::{decode_all, discretize_prediction, DiscretePolicy, SynthesizedRecord};
use crate::encoder::KgFeatures;
use crate::error::{GeeaError, Result};
use crate::evalmetrics::{evaluate_model_alignment, evaluate_synthesis, sweep_training_ratio, write_ratio_csv};
use crate::kgdata::{
    build_synthesis_split, compute_statistics, generate_synthetic_pair, load_dataset, save_dataset, AlignmentDataset,
    LoadOptions, Side, SyntheticConfig,
};
use crate::mvae::{run_flows, sample_unconditional, FlowTag, NoiseMode};
use crate::theory::{format_table, verify_all};
use crate::training::{
    dataset_features, eval_rng, fit, load_checkpoint, save_checkpoint, write_loss_log, CheckpointMeta, TrainConfig,
    PRESETS,
};

/// Neighbors and attributes listed per synthesized entity.
const SYNTH_TOP_K: usize = 6;

#[derive(Debug, Parser)]
#[command(name = "geea", version, about = "Generative entity alignment and entity synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Conditional,
    Unconditional,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a dataset directory: a synthetic pair, or a copy of --data,
    /// optionally with a dangling split.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic generator settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dangling_fraction: Option<f64>,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        /// Config file (JSON) or the name of a shipped preset.
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dangling_fraction: Option<f64>,
    },
    /// Alignment metrics of a checkpoint on the test pairs.
    EvalAlign {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Synthesis metrics of a checkpoint on the dangling pairs.
    EvalSynth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dangling_fraction: Option<f64>,
    },
    /// Emit synthesized target entities as JSON lines.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "unconditional")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Source entity names or indices for conditional mode; defaults to the
        /// dangling sources.
        ids: Vec<String>,
    },
    /// Train and evaluate at several ratios of the seed alignments.
    SweepRatio {
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Numerical checks of the KL and ELBO identities.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dataset statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                GeeaError::Argument(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(spec: &str) -> Result<TrainConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return TrainConfig::from_json_file(path);
    }
    TrainConfig::preset(spec).ok_or_else(|| {
        GeeaError::Argument(format!(
            "{spec} is neither a config file nor a preset ({})",
            PRESETS.join(", ")
        ))
    })
}

fn load_data(dir: &Path, dangling_fraction: Option<f64>, seed: u64) -> Result<AlignmentDataset> {
    let ds = load_dataset(dir, &LoadOptions::default())?;
    match dangling_fraction {
        Some(f) if ds.dangling_pairs.is_empty() => build_synthesis_split(&ds, f, seed),
        Some(_) => Err(GeeaError::Argument(format!(
            "{} already has dangling pairs",
            dir.display()
        ))),
        None => Ok(ds),
    }
}

/// Dataset of a checkpoint: `--data` when given, else the training directory
/// recorded in the checkpoint, with the recorded dangling split.
fn checkpoint_data(meta: &CheckpointMeta, data: Option<PathBuf>) -> Result<AlignmentDataset> {
    let dir = data
        .or_else(|| meta.data_dir.clone())
        .ok_or_else(|| GeeaError::Argument("no --data given and the checkpoint records no dataset".into()))?;
    load_data(&dir, meta.dangling_fraction, meta.dangling_seed.unwrap_or(0))
}

fn dispatch(command: Command, out: &mut impl Write) -> Result<i32> {
    match command {
        Command::Prepare {
            out: dir,
            data,
            config,
            seed,
            dangling_fraction,
        } => {
            let ds = match data {
                Some(d) => load_dataset(&d, &LoadOptions::default())?,
                None => {
                    let cfg = match config {
                        Some(p) => serde_json::from_str::<SyntheticConfig>(&fs::read_to_string(&p)?)?,
                        None => SyntheticConfig::default(),
                    };
                    generate_synthetic_pair(&cfg, seed)?
                }
            };
            let ds = match dangling_fraction {
                Some(f) => build_synthesis_split(&ds, f, seed)?,
                None => ds,
            };
            save_dataset(&ds, &dir)?;
            write!(out, "{}", compute_statistics(&ds).to_table())?;
        }
        Command::Train {
            config,
            data,
            out: dir,
            seed,
            dangling_fraction,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = load_data(&data, dangling_fraction, cfg.seed)?;
            fs::create_dir_all(&dir)?;
            let meta = CheckpointMeta {
                data_dir: Some(fs::canonicalize(&data)?),
                dangling_fraction,
                dangling_seed: dangling_fraction.map(|_| cfg.seed),
                ..CheckpointMeta::default()
            };
            let mut metrics = fs::File::create(dir.join("metrics.jsonl"))?;
            let state = fit(&ds, &cfg, |_, m| {
                let line = serde_json::json!({
                    "epoch": m.epoch,
                    "mean_total": m.mean_total,
                    "valid_mrr": m.valid_mrr,
                });
                writeln!(metrics, "{line}")?;
                Ok(())
            })?;
            save_checkpoint(&dir, &state, &meta)?;
            write_loss_log(&dir.join("loss_log.jsonl"), &state.history)?;
            let summary = serde_json::json!({
                "epochs": state.epoch,
                "steps": state.step,
                "best_epoch": state.best_epoch,
                "best_valid_mrr": state.best_valid_mrr,
            });
            writeln!(out, "{summary}")?;
        }
        Command::EvalAlign { ckpt, data } => {
            let (state, meta) = load_checkpoint(&ckpt)?;
            let ds = checkpoint_data(&meta, data)?;
            let features = dataset_features(&ds);
            let report = evaluate_model_alignment(&state.model, &features, &ds.test_alignments)?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
            eprint!("{}", report.to_table());
        }
        Command::EvalSynth {
            ckpt,
            data,
            seed,
            dangling_fraction,
        } => {
            let (state, meta) = load_checkpoint(&ckpt)?;
            let ds = match (data, dangling_fraction) {
                (Some(d), Some(f)) => load_data(&d, Some(f), seed)?,
                (data, _) => checkpoint_data(&meta, data)?,
            };
            let report = evaluate_synthesis(&state.model, &ds, &mut eval_rng(seed))?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
            eprint!("{}", report.to_table());
        }
        Command::Synthesize {
            ckpt,
            data,
            mode,
            count,
            seed,
            out: file,
            ids,
        } => {
            if count == 0 {
                return Err(GeeaError::Argument("--count must be positive".into()));
            }
            let (state, meta) = load_checkpoint(&ckpt)?;
            let ds = checkpoint_data(&meta, data)?;
            let target = ds.full_target();
            let shape = state.model.target_shape;
            let policy = DiscretePolicy::TopK(SYNTH_TOP_K);
            let mut rng = eval_rng(seed);
            let (subs, names) = match mode {
                Mode::Unconditional => (
                    sample_unconditional(count, &state.model.mvae, &state.model.store, &mut rng)?,
                    vec![None; count],
                ),
                Mode::Conditional => {
                    let sources = conditional_sources(&ds, &ids, count)?;
                    let feats = KgFeatures::new(&ds.source);
                    let x = state.model.embed(&feats, Side::Source, &sources)?;
                    let input = [x.graph, x.attr, x.image];
                    let flows = run_flows(
                        &input,
                        Some(&input),
                        true,
                        &[FlowTag::SourceToTarget],
                        &state.model.mvae,
                        &state.model.store,
                        NoiseMode::Zero,
                        &mut rng,
                    )?;
                    let o = &flows[&FlowTag::SourceToTarget];
                    let names = sources.iter().map(|&e| Some(ds.source.entity_names[e].clone())).collect();
                    (
                        [
                            o[0].reconstruction.clone(),
                            o[1].reconstruction.clone(),
                            o[2].reconstruction.clone(),
                        ],
                        names,
                    )
                }
            };
            let pred = decode_all(&subs, Side::Target, &shape, &state.model.decoder, &state.model.store)?;
            let feats = discretize_prediction(&pred, policy, target);
            let mut text = String::new();
            for (f, name) in feats.iter().zip(names) {
                text.push_str(&serde_json::to_string(&SynthesizedRecord::from_features(f, target, name))?);
                text.push('\n');
            }
            match file {
                Some(p) => fs::write(p, text)?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::SweepRatio {
            config,
            data,
            ratios,
            out: file,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = load_data(&data, None, cfg.seed)?;
            let results = sweep_training_ratio(&ds, &ratios, &cfg)?;
            write_ratio_csv(&file, &results)?;
            for r in &results {
                writeln!(
                    out,
                    "ratio {:<6} seeds {:<6} hits@1 {:.4} hits@10 {:.4} mrr {:.4}",
                    r.ratio,
                    r.seed_pairs,
                    r.report.hits_at_1(),
                    r.report.hits_at_10(),
                    r.report.mrr
                )?;
            }
        }
        Command::VerifyTheory { trials, seed } => {
            if trials == 0 {
                return Err(GeeaError::Argument("--trials must be at least 1".into()));
            }
            let rows = verify_all(trials, &mut eval_rng(seed))?;
            write!(out, "{}", format_table(&rows))?;
            if rows.iter().any(|r| !r.passed) {
                return Ok(1);
            }
        }
        Command::Stats { data } => {
            let ds = load_dataset(&data, &LoadOptions::default())?;
            let stats = compute_statistics(&ds);
            write!(out, "{}", stats.to_table())?;
        }
    }
    Ok(0)
}

/// Source entities for conditional synthesis: the given names or indices, or
/// the first `count` dangling sources.
fn conditional_sources(ds: &AlignmentDataset, ids: &[String], count: usize) -> Result<Vec<usize>> {
    if ids.is_empty() {
        let v: Vec<usize> = ds.dangling_pairs.iter().take(count).map(|p| p.0).collect();
        if v.is_empty() {
            return Err(GeeaError::Argument("no source ids given and the dataset has no dangling pairs".into()));
        }
        return Ok(v);
    }
    ids.iter()
        .map(|raw| {
            ds.source
                .entity_names
                .iter()
                .position(|n| n == raw)
                .or_else(|| raw.parse::<usize>().ok().filter(|&i| i < ds.source.entity_count()))
                .ok_or_else(|| GeeaError::Argument(format!("unknown source entity {raw}")))
        })
        .collect()
}
