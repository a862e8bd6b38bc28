//! `qvit`: drive the quantization pipeline stage by stage.
//!
//! Every subcommand reads a run config (`--config`, overridden by flags),
//! consumes the artifacts of earlier stages from the run directory, and
//! writes its own. Failures print one `error kind=<kind> msg=<text>` line
//! to stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qvit_core::alloc::{allocate_bits, AllocMode, BitAllocation};
use qvit_core::error::{Error, Result};
use qvit_core::lrp::ImportanceTable;
use qvit_core::pipeline::ablation::run_ablation;
use qvit_core::pipeline::config::RunDir;
use qvit_core::pipeline::io::{
    load_dataset, load_params, read_text, save_dataset, save_params, write_file,
};
use qvit_core::pipeline::report::{render_ablation, to_json, EvalSummary};
use qvit_core::pipeline::stages::{
    calibration_images, generate_splits, score_importance, train_model, Splits, CHECKPOINT,
};
use qvit_core::pipeline::{calibrate_model, evaluate, params_digest, RunConfig, Split};
use qvit_core::quant::QuantModel;
use qvit_core::vit::ViTParams;

#[derive(Parser)]
#[command(
    name = "qvit",
    version,
    about = "Explainability-guided mixed-precision PTQ for toy vision transformers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; the splits use seed, seed+1 and seed+2.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base bit width.
    #[arg(long, global = true)]
    bits: Option<u32>,
    /// Allocation mode: uniform, per-block, greedy or boost-only.
    #[arg(long, global = true)]
    mode: Option<AllocMode>,
    /// LayerNorm clipping threshold in standard deviations.
    #[arg(long = "n-sigma", global = true)]
    n_sigma: Option<f64>,
    /// Activation calibration percentile, in (0, 100].
    #[arg(long, global = true)]
    percentile: Option<f64>,
    /// Calibration images drawn from the calib split.
    #[arg(long = "calib-size", global = true)]
    calib_size: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, calibration and evaluation splits.
    GenData,
    /// Train the toy ViT on the train split.
    TrainToy,
    /// Calibrate at the uniform base width.
    Calibrate,
    /// Score per-layer importance by relevance propagation.
    ScoreImportance,
    /// Turn the importance table into a bit allocation.
    AllocateBits,
    /// Calibrate under the stored bit allocation.
    Quantize,
    /// Evaluate a quantized stage against full precision.
    Evaluate {
        /// `quant` (from quantize) or `calib` (from calibrate).
        #[arg(long, default_value = "quant")]
        stage: String,
    },
    /// Render the stored evaluation as a table and JSON.
    Report,
    /// Run the LayerNorm-quantizer and bit-allocation ablations end to end.
    ReproduceAblation {
        /// Trained parameters; defaults to the run's model, then the shipped checkpoint.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!(
                "error kind=usage msg={}",
                first.trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.bits {
        cfg.base_bits = v;
    }
    if let Some(v) = c.mode {
        cfg.mode = v;
    }
    if let Some(v) = c.n_sigma {
        cfg.n_sigma = v;
    }
    if let Some(v) = c.percentile {
        cfg.percentile = v;
    }
    if let Some(v) = c.calib_size {
        cfg.calib_size = v;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{} not found; run `qvit {producer}` first",
            path.display()
        )))
    }
}

fn split(dir: &RunDir, s: Split) -> Result<qvit_core::pipeline::LabeledDataset> {
    let p = dir.dataset(s);
    require(&p, "gen-data")?;
    load_dataset(&p)
}

fn trained(dir: &RunDir) -> Result<ViTParams> {
    let p = dir.params();
    require(&p, "train-toy")?;
    load_params(&p)
}

fn save_stage(dir: &RunDir, stage: &str, params: &ViTParams, qmodel: &QuantModel) -> Result<()> {
    save_params(params, &dir.quant_params(stage))?;
    write_file(&dir.quant_model(stage), qmodel.to_json()?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let dir = cfg.run_dir();
    match cli.command {
        Command::GenData => {
            let s = generate_splits(&cfg)?;
            for (split, data) in [
                (Split::Train, &s.train),
                (Split::Calib, &s.calib),
                (Split::Eval, &s.eval),
            ] {
                save_dataset(data, &dir.dataset(split))?;
                println!("{}\t{} images", split.name(), data.len());
            }
        }
        Command::TrainToy => {
            let train = split(&dir, Split::Train)?;
            let (params, log) = train_model(&cfg, &train)?;
            save_params(&params, &dir.params())?;
            write_file(&dir.train_log(), to_json(&log)?)?;
            println!(
                "final loss {:.6}",
                log.epoch_loss.last().copied().unwrap_or(log.initial_loss)
            );
        }
        Command::Calibrate => {
            let params = trained(&dir)?;
            let calib = calibration_images(&cfg, &split(&dir, Split::Calib)?)?;
            let alloc = BitAllocation::uniform(&params.config, cfg.base_bits)?;
            let (qp, qm) = calibrate_model(&params, &calib, &alloc, &cfg.calib_options())?;
            save_stage(&dir, "calib", &qp, &qm)?;
            println!(
                "calibrated {} layers at {} bits",
                qm.layers.len(),
                cfg.base_bits
            );
        }
        Command::ScoreImportance => {
            let params = trained(&dir)?;
            let table = score_importance(&cfg, &params, &split(&dir, Split::Train)?)?;
            write_file(&dir.importance(), table.to_tsv())?;
            print!("{}", table.to_tsv());
        }
        Command::AllocateBits => {
            let params = trained(&dir)?;
            require(&dir.importance(), "score-importance")?;
            let table = ImportanceTable::from_tsv(&read_text(&dir.importance())?)?;
            let alloc = allocate_bits(&table, &params, &cfg.alloc_options())?;
            write_file(&dir.allocation(), alloc.to_tsv())?;
            print!("{}", alloc.to_tsv());
        }
        Command::Quantize => {
            let params = trained(&dir)?;
            require(&dir.allocation(), "allocate-bits")?;
            let alloc = BitAllocation::from_tsv(&read_text(&dir.allocation())?)?;
            alloc.validate(&params.config)?;
            let calib = calibration_images(&cfg, &split(&dir, Split::Calib)?)?;
            let (qp, qm) = calibrate_model(&params, &calib, &alloc, &cfg.calib_options())?;
            save_stage(&dir, "quant", &qp, &qm)?;
            println!(
                "quantized {} layers ({} allocation)",
                qm.layers.len(),
                alloc.mode.name()
            );
        }
        Command::Evaluate { stage } => {
            if stage != "quant" && stage != "calib" {
                return Err(Error::Usage(format!(
                    "unknown stage {stage:?}; expected quant or calib"
                )));
            }
            let params = trained(&dir)?;
            let producer = if stage == "quant" {
                "quantize"
            } else {
                "calibrate"
            };
            require(&dir.quant_model(&stage), producer)?;
            let qm = QuantModel::from_json(&read_text(&dir.quant_model(&stage))?)?;
            let qp = load_params(&dir.quant_params(&stage))?;
            let data = split(&dir, Split::Eval)?;
            let provenance = |mut r: qvit_core::pipeline::EvalReport| {
                r.provenance.config_hash = Some(cfg.hash());
                r.provenance.seed = Some(cfg.seed);
                r.provenance.params_digest = Some(params_digest(&params));
                r
            };
            let summary = EvalSummary {
                stage,
                fp: provenance(evaluate(&params, None, &data)?),
                quantized: provenance(evaluate(&params, Some((&qp, &qm)), &data)?),
            };
            write_file(&dir.eval(), to_json(&summary)?)?;
            print!("{}", summary.render());
        }
        Command::Report => {
            require(&dir.eval(), "evaluate")?;
            let text = read_text(&dir.eval())?;
            let summary: EvalSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: dir.eval(),
                msg: e.to_string(),
            })?;
            let table = summary.render();
            write_file(&dir.report("txt"), &table)?;
            write_file(&dir.report("json"), to_json(&summary)?)?;
            print!("{table}");
        }
        Command::ReproduceAblation { params } => {
            let path = match params {
                Some(p) => p,
                None if dir.params().exists() => dir.params(),
                None => PathBuf::from(CHECKPOINT),
            };
            let params = load_params(&path)?;
            if params.config != cfg.vit {
                return Err(Error::Config(format!(
                    "{} was trained for a different model config",
                    path.display()
                )));
            }
            let splits: Splits = generate_splits(&cfg)?;
            let report = run_ablation(&cfg, &params, &splits)?;
            let table = render_ablation(&report);
            write_file(&dir.ablation("txt"), &table)?;
            write_file(&dir.ablation("json"), to_json(&report)?)?;
            print!("{table}");
        }
    }
    Ok(())
}
