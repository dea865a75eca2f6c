//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{load_manifest, synth_generate, EvalSet, GroundTruth, SourceSet, SynthConfig, SynthData, TargetSet};
use crate::error::{Error, Result};
use crate::evaluator::{export_attention, run_protocol, EvalData, EvalProtocol, ProtocolKind};
use crate::kernel::{mmd2_biased, Domain, FeatureBatch, KernelSpec};
use crate::trainer::{load_model, resume, train, TrainConfig};
use crate::tensor::{read_tensor_file, Tensor};

#[derive(Debug, Parser)]
#[command(name = "mmfa", version, about = "Attribute-guided, MMD-aligned person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-domain benchmark.
    GenSynth {
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long = "per-id")]
        per_id: Option<usize>,
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file with further generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a labelled source and an unlabelled target manifest.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, required_unless_present = "source_only")]
        target: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Supervised loop only; the target manifest is never read.
        #[arg(long, conflicts_with = "target")]
        source_only: bool,
        /// Continue from the latest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ground-truth sidecar for manifests without identities.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        normalize: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Biased squared MMD between two `n×d` tensor files.
    Mmd {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_delimiter = ',')]
        bandwidths: Option<Vec<f64>>,
    },
    /// Write heatmaps of the most strongly pooled last-stage channels.
    ExportAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    SingleQuery,
    RandomSplits,
}

fn banner<S: Serialize>(what: &str, config: &S) -> Result<()> {
    eprintln!("mmfa {what} {}", serde_json::to_string(config)?);
    Ok(())
}

fn read_json<D: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Views a tensor as samples along its first axis.
fn as_rows(t: Tensor<f64>) -> Result<Tensor<f64>> {
    let shape = match t.shape() {
        [d] => vec![1, *d],
        [n, rest @ ..] => vec![*n, rest.iter().product()],
        [] => vec![1, 1],
    };
    t.reshape(shape)
}

fn eval_set(manifest: &Path, truth: Option<&GroundTruth>) -> Result<EvalSet<f32>> {
    EvalSet::from_manifest(&load_manifest(manifest)?, truth)
}

/// Executes one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            ids,
            per_id,
            shift,
            seed,
            config,
            out,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            cfg.num_ids = ids.unwrap_or(cfg.num_ids);
            cfg.per_id = per_id.unwrap_or(cfg.per_id);
            cfg.shift = shift.unwrap_or(cfg.shift);
            cfg.seed = seed.unwrap_or(cfg.seed);
            banner("gen-synth", &cfg)?;
            let data = synth_generate(&cfg)?;
            data.write(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "source": out.join(SynthData::SOURCE_MANIFEST),
                    "target": out.join(SynthData::TARGET_MANIFEST),
                    "truth": out.join(SynthData::TRUTH_FILE),
                    "source_samples": data.source.len(),
                    "target_samples": data.target.len(),
                })
            );
        }
        Command::Train {
            source,
            target,
            config,
            out,
            seed,
            epochs,
            source_only,
            resume: resuming,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_json_file(p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.validate()?;
            let src = SourceSet::<f32>::from_manifest(&load_manifest(&source)?)?;
            let tgt = match (&target, source_only) {
                (Some(t), false) => Some(TargetSet::<f32>::from_manifest(&load_manifest(t)?)?),
                _ => None,
            };
            let output = if resuming {
                eprintln!("mmfa train: resuming from {}", out.display());
                resume(&src, tgt.as_ref(), &out)?
            } else {
                banner("train", &cfg)?;
                train(&src, tgt.as_ref(), &cfg, Some(&out))?
            };
            if let Some(last) = output.epochs.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Eval {
            model,
            protocol,
            query,
            gallery,
            data,
            truth,
            splits,
            ratio,
            seed,
            normalize,
            out,
        } => {
            let proto = EvalProtocol {
                kind: match protocol {
                    ProtocolArg::SingleQuery => ProtocolKind::SingleQuery,
                    ProtocolArg::RandomSplits => ProtocolKind::RandomSplits,
                },
                splits: if protocol == ProtocolArg::SingleQuery { 1 } else { splits },
                ratio,
                seed,
                normalize,
            };
            banner("eval", &proto)?;
            let net = load_model::<f32>(&model)?;
            let truth = truth.map(GroundTruth::read).transpose()?;
            let report = match (query, gallery, data) {
                (Some(q), Some(g), None) => {
                    let (q, g) = (eval_set(&q, truth.as_ref())?, eval_set(&g, truth.as_ref())?);
                    run_protocol(&net, EvalData::QueryGallery { query: &q, gallery: &g }, &proto)?
                }
                (None, None, Some(d)) => {
                    let d = eval_set(&d, truth.as_ref())?;
                    run_protocol(&net, EvalData::Whole(&d), &proto)?
                }
                _ => {
                    return Err(Error::Protocol(
                        "pass either --query and --gallery, or --data alone".into(),
                    ))
                }
            };
            let text = serde_json::to_string(&report)?;
            if let Some(p) = out {
                fs::write(&p, format!("{text}\n")).map_err(|e| Error::io(&p, e))?;
            }
            println!("{text}");
        }
        Command::Mmd { a, b, bandwidths } => {
            let spec = match bandwidths {
                Some(bw) => KernelSpec::new(bw)?,
                None => KernelSpec::default(),
            };
            let x = as_rows(read_tensor_file(&a)?.into_real::<f64>())?;
            let y = as_rows(read_tensor_file(&b)?.into_real::<f64>())?;
            let v = mmd2_biased(
                &FeatureBatch::new(x, Domain::Source)?,
                &FeatureBatch::new(y, Domain::Target)?,
                &spec,
            )?;
            println!("{v}");
        }
        Command::ExportAttention { model, image, top, out } => {
            let net = load_model::<f32>(&model)?;
            let img = read_tensor_file(&image)?.into_real::<f32>();
            for p in export_attention(&net, &img, top, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs it. Returns 0 on success, 1 on a domain error,
/// and 2 on a usage error.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
