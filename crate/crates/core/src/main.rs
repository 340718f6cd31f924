use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odgcnn::config::{DistillMode, RunConfig, KEYS};
use odgcnn::harness::{ablate, ablation_csv, evaluate_checkpoint, fit, generate_data, resolve_out, RunOutput, Sweep};
use odgcnn::{oracle, Error, Result};

const REPORT_KEYS: &str = "\
REPORT KEYS (report.txt, 6 decimals; no-NMS metrics first):
  nds, map, mate, mase, maoe, mave, ap.<class>.<threshold>, detections
  nms.<same keys>            metrics after NMS
  delta_map                  nms.map - map
  loss.epoch<i>              mean training loss of epoch i
  params                     trainable parameter count
  checkpoint                 sha256 content hash of model.odgc1
report.csv columns: variant,class,threshold,ap (variant is no_nms or nms).
timing.txt holds the wall-clock line.";

#[derive(Parser)]
#[command(name = "odgcnn", version, about = "Set-prediction 3D detection on synthetic LiDAR scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file (`#` starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and eval scenes as SCENE v1 files
    GenData(Common),
    /// Supervised training, then evaluation with and without NMS
    Train(Common),
    /// Train a student against a frozen teacher (`distill.mode`, `distill.teacher`)
    Distill(Common),
    /// Evaluate a checkpoint on the eval split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: <out>/model.odgc1)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per value of a sweep and write ablation.csv
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `neighbors=1,4,16`, `layers=1,2` or `interaction=dgcnn,self-attention`
        #[arg(long)]
        sweep: String,
    },
    /// Run the oracle suites
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(run: &RunOutput, dir: &Path) {
    let e = &run.report.eval;
    println!(
        "nds={:.4} map={:.4} nms.nds={:.4} nms.map={:.4} delta_map={:+.4}",
        e.no_nms.nds,
        e.no_nms.map,
        e.nms.nds,
        e.nms.map,
        e.delta_map()
    );
    println!("wrote {} ({:.1}s)", dir.display(), run.report.wall_clock);
}

fn verify(seed: u64) -> Result<bool> {
    let mut ok = true;
    let mut line = |pass: bool, what: String| {
        ok &= pass;
        println!("{} {what}", if pass { "PASS" } else { "FAIL" });
    };
    for r in odgcnn_autodiff::gradcheck::primitive_report(seed, 3)? {
        line(r.rel_err < 1e-6, format!("gradient {:<22} rel_err={:.2e}", r.name, r.rel_err));
    }
    let c = oracle::composed_gradcheck(seed, 3)?;
    line(
        c.rel_err < 1e-4 && c.offset_grad > 0.0,
        format!("gradient composed set loss     rel_err={:.2e} coords={}", c.rel_err, c.coords),
    );
    for m in oracle::matching_oracle(seed, &[2, 3, 4, 5, 6, 7], 500)? {
        line(
            m.total_mismatches == 0,
            format!("hungarian n={} {} matrices, {} total mismatches", m.size, m.trials, m.total_mismatches),
        );
    }
    let worst = oracle::iou_oracle(seed, 100, 1_000_000)
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    line(worst < 0.01, format!("rotated IoU vs Monte Carlo, worst gap {worst:.4}"));
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let out = resolve_out(c.out.clone(), &cfg, "data");
            let n = generate_data(&cfg, &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train(c) => {
            let mut cfg = load_config(&c)?;
            cfg.distill.mode = DistillMode::None;
            let out = resolve_out(c.out.clone(), &cfg, "run");
            let r = fit(&cfg)?;
            r.write(&out)?;
            summarize(&r, &out);
        }
        Command::Distill(c) => {
            let cfg = load_config(&c)?;
            if cfg.distill.mode == DistillMode::None {
                return Err(Error::Config("distill needs distill.mode other than none".into()));
            }
            let out = resolve_out(c.out.clone(), &cfg, "run");
            let r = fit(&cfg)?;
            r.write(&out)?;
            summarize(&r, &out);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = resolve_out(common.out.clone(), &cfg, "run");
            let ckpt = checkpoint.unwrap_or_else(|| out.join("model.odgc1"));
            let r = evaluate_checkpoint(&cfg, &ckpt)?;
            r.write(&out)?;
            summarize(&r, &out);
        }
        Command::Ablate { common, sweep } => {
            let cfg = load_config(&common)?;
            let sweep = Sweep::parse(&sweep)?;
            let out = resolve_out(common.out.clone(), &cfg, "ablation");
            let rows = ablate(&cfg, &sweep, Some(&out))?;
            let csv = ablation_csv(&sweep, &rows);
            std::fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Verify { seed } => return verify(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let keys: String = KEYS.iter().map(|(k, d)| format!("  {k:<28} {d}\n")).collect();
    let help = format!("CONFIG KEYS:\n{keys}\n{REPORT_KEYS}");
    let cmd = <Cli as clap::CommandFactory>::command().after_long_help(help);
    let matches = cmd.get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[verify]: oracle check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
