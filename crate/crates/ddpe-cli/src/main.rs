//! `ddpe` command line: dataset generation, training, evaluation,
//! experiments, probes, and embedding export.

use clap::{Parser, Subcommand, ValueEnum};
use ddpe::analysis::{domain_probe, extract_coefficients, extract_static_features, pca_embed, FeatureMatrix, ProbeConfig};
use ddpe::data::{export_dataset, make_split, DatasetSplit, DomainSample, Protocol};
use ddpe::dynconv::checkpoint;
use ddpe::error::Error;
use ddpe::harness::{evaluate, train, ExperimentConfig, ProtocolConfig, RunReport};
use ddpe::rng::{derive, STREAM_INIT};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ddpe",
    about = "Dynamic domain generalization with parameter exchange",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FeatureKind {
    /// pooled features of the last block run static-only
    Static,
    /// concatenated dynamic coefficients from every block
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitSide {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain dataset and export it as PGM/PPM
    GenerateData {
        /// experiment config (TOML); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// dataset seed override
        #[arg(long)]
        seed: Option<u64>,
        /// output directory (root/<domain>/<class>/<name>.ppm)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run (one seed, one protocol split) and write history + checkpoints
    Train {
        #[arg(long)]
        config: PathBuf,
        /// leave-one-out target override
        #[arg(long)]
        target: Option<usize>,
        /// seed override (default: first entry of train.seeds)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a protocol split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        /// which side of the split to evaluate (default: test)
        #[arg(long, value_enum, default_value_t = SplitSide::Test)]
        split: SplitSide,
    },
    /// Run the full seeds × targets experiment grid
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a domain probe on frozen features of a checkpoint
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, value_enum)]
        features: FeatureKind,
        #[arg(long, value_enum, default_value_t = SplitSide::Train)]
        split: SplitSide,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a 2-D PCA embedding of features as CSV
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, value_enum)]
        features: FeatureKind,
        #[arg(long, value_enum, default_value_t = SplitSide::Train)]
        split: SplitSide,
        /// output CSV file
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a persisted experiment report as a table
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text)
}

fn resolve_protocol(cfg: &ExperimentConfig, target: Option<usize>, samples: &[DomainSample]) -> Result<Protocol, Error> {
    match (&cfg.protocol, target) {
        (ProtocolConfig::SingleSource { .. }, Some(_)) => Err(Error::Config(
            "--target only applies to the leave_one_out protocol".into(),
        )),
        (ProtocolConfig::SingleSource { source }, None) => Ok(Protocol::SingleSource { source: *source }),
        (ProtocolConfig::LeaveOneOut { .. }, Some(t)) => Ok(Protocol::LeaveOneOut { target: t }),
        (ProtocolConfig::LeaveOneOut { target: Some(t) }, None) => Ok(Protocol::LeaveOneOut { target: *t }),
        (ProtocolConfig::LeaveOneOut { target: None }, None) => {
            // default to the highest domain id so quick runs need no flag
            let max = samples.iter().map(|s| s.domain_label).max().unwrap_or(0);
            Ok(Protocol::LeaveOneOut { target: max })
        }
    }
}

fn split_side(split: &DatasetSplit, side: SplitSide) -> &[DomainSample] {
    match side {
        SplitSide::Train => &split.train,
        SplitSide::Test => &split.test,
    }
}

fn extract(
    kind: FeatureKind,
    model: &ddpe::dynconv::Model<f32>,
    samples: &[DomainSample],
    tag: &str,
) -> Result<FeatureMatrix, Error> {
    match kind {
        FeatureKind::Static => extract_static_features(model, samples, tag),
        FeatureKind::Dynamic => extract_coefficients(model, samples, tag),
    }
}

fn image_dims(samples: &[DomainSample]) -> Result<(usize, usize, usize), Error> {
    match samples.first().map(|s| s.image.shape()) {
        Some([c, h, w]) => Ok((*c, *h, *w)),
        _ => Err(Error::Config("dataset is empty".into())),
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenerateData { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let samples = cfg.data.load()?;
            export_dataset(&out, &samples)?;
            eprintln!("wrote {} samples under {}", samples.len(), out.display());
        }
        Cmd::Train { config, target, seed, out } => {
            let cfg = load_config(&config)?;
            let samples = cfg.data.load()?;
            let protocol = resolve_protocol(&cfg, target, &samples)?;
            let split = make_split(&samples, protocol)?;
            let (c, h, w) = image_dims(&samples)?;
            let classes = samples.iter().map(|s| s.class_label).max().unwrap() + 1;
            let net = cfg.network.to_network_config(c, h, w, classes)?;
            let seed = seed.unwrap_or(cfg.train.seeds[0]);
            let model = ddpe::dynconv::build_network::<f32>(&net, derive(seed, STREAM_INIT))?;
            let tc = cfg.train.to_train_config(&cfg.perturb, seed);
            let (final_model, swa_model, history) = train(model, &split, &tc)?;

            std::fs::create_dir_all(&out)?;
            let tag = match protocol {
                Protocol::LeaveOneOut { target } => format!("target{target}_seed{seed}"),
                Protocol::SingleSource { source } => format!("source{source}_seed{seed}"),
            };
            std::fs::write(out.join(format!("history_{tag}.csv")), history.to_csv())?;
            checkpoint::save(&final_model, &out.join(format!("final_{tag}.ddpe")))?;
            if let Some(swa) = &swa_model {
                checkpoint::save(swa, &out.join(format!("swa_{tag}.ddpe")))?;
            }
            eprintln!("trained {tag}: artifacts under {}", out.display());
        }
        Cmd::Eval { checkpoint: ckpt, config, target, split } => {
            let cfg = load_config(&config)?;
            let samples = cfg.data.load()?;
            let protocol = resolve_protocol(&cfg, target, &samples)?;
            let ds = make_split(&samples, protocol)?;
            let model = checkpoint::load(&ckpt)?;
            let side = split_side(&ds, split);
            let accuracy = evaluate(&model, side)?;
            let per_domain: std::collections::BTreeMap<String, f64> =
                ddpe::harness::accuracy_per_domain(&model, side)?
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect();
            let payload = serde_json::json!({
                "accuracy": accuracy,
                "per_domain": per_domain,
            });
            println!("{}", serde_json::to_string_pretty(&payload).unwrap());
        }
        Cmd::Experiment { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let report = ddpe::harness::run_experiment_with_echo(&cfg, &text, Some(&out))?;
            print!("{}", report.render_table());
            eprintln!(
                "experiment finished in {:.1}s; report under {}",
                report.wall_clock_secs,
                out.display()
            );
        }
        Cmd::Probe { checkpoint: ckpt, config, target, features, split, probe_seed, out } => {
            let cfg = load_config(&config)?;
            let samples = cfg.data.load()?;
            let protocol = resolve_protocol(&cfg, target, &samples)?;
            let ds = make_split(&samples, protocol)?;
            let model = checkpoint::load(&ckpt)?;
            let side = split_side(&ds, split);
            let tag = format!("{split:?}").to_lowercase();
            let fm = extract(features, &model, side, &tag)?;
            let probe_cfg = ProbeConfig {
                seed: probe_seed,
                ..ProbeConfig::default()
            };
            let result = domain_probe(&fm, &probe_cfg)?;

            std::fs::create_dir_all(&out)?;
            let kind = format!("{features:?}").to_lowercase();
            std::fs::write(out.join(format!("probe_{kind}_curve.csv")), result.curve_csv())?;
            let summary = serde_json::json!({
                "features": kind,
                "split": tag,
                "final_accuracy": result.final_accuracy,
                "epochs": result.config.epochs,
                "hidden": result.config.hidden,
                "lr": result.config.lr,
                "seed": result.config.seed,
            });
            let mut text = serde_json::to_string_pretty(&summary).unwrap();
            text.push('\n');
            std::fs::write(out.join(format!("probe_{kind}_summary.json")), &text)?;
            println!("final_accuracy {}", result.final_accuracy);
        }
        Cmd::Embed { checkpoint: ckpt, config, target, features, split, out } => {
            let cfg = load_config(&config)?;
            let samples = cfg.data.load()?;
            let protocol = resolve_protocol(&cfg, target, &samples)?;
            let ds = make_split(&samples, protocol)?;
            let model = checkpoint::load(&ckpt)?;
            let side = split_side(&ds, split);
            let tag = format!("{split:?}").to_lowercase();
            let fm = extract(features, &model, side, &tag)?;
            let embedding = pca_embed(&fm, 2)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, embedding.to_csv(&fm))?;
            eprintln!("wrote embedding to {}", out.display());
        }
        Cmd::Report { report } => {
            let text = std::fs::read_to_string(&report)?;
            let parsed = RunReport::from_json(&text)?;
            print!("{}", parsed.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version exit cleanly; usage errors are config errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
