use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dapc::align::Domain;
use dapc::datagen::{build_benchmark, load_split, DomainConfig, OcclusionMode, Split};
use dapc::eval::{complete_file, evaluate, parse_metrics, probe_alignment};
use dapc::head::HeadKind;
use dapc::trainer::{load_model, train, Component, TrainConfig, TrainData};

#[derive(Parser)]
#[command(
    name = "dapc",
    version,
    about = "Domain-adaptive point cloud completion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic source/target benchmark.
    GenData(GenData),
    /// Train a model on a generated benchmark.
    Train(Train),
    /// Complete every cloud of an eval split and tabulate metrics per category.
    Eval(Eval),
    /// Fit a linear domain probe on encoder features and export a 2D projection.
    Probe(Probe),
    /// Complete a single cloud.
    Complete(Complete),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "half-space")]
    source_occlusion: OcclusionMode,
    #[arg(long, default_value = "view-cone")]
    target_occlusion: OcclusionMode,
    #[arg(long, default_value_t = 256)]
    source_res: usize,
    #[arg(long, default_value_t = 128)]
    target_res: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma_src: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma_tgt: f64,
    #[arg(long, default_value_t = 0.3)]
    source_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    target_fraction: f64,
    #[arg(long, default_value_t = 50)]
    per_category: usize,
    /// Points per complete cloud.
    #[arg(long, default_value_t = 512)]
    n_complete: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Switch off a component (repeatable).
    #[arg(long)]
    ablate: Vec<Component>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split directory with `partial/` and `complete/`, or a benchmark root
    /// (its target eval split is used).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cd,ucd,uhd")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Complete {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn split_dir(dir: &Path, split: Split) -> PathBuf {
    let nested = dir.join(split.dir());
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let source = DomainConfig {
        occlusion: a.source_occlusion,
        fraction: a.source_fraction,
        resolution: a.source_res,
        noise_sigma: a.noise_sigma_src,
        domain: Domain::Source,
    };
    let target = DomainConfig {
        occlusion: a.target_occlusion,
        fraction: a.target_fraction,
        resolution: a.target_res,
        noise_sigma: a.noise_sigma_tgt,
        domain: Domain::Target,
    };
    let m = build_benchmark(&a.out, source, target, a.per_category, a.n_complete, a.seed)?;
    println!("wrote {} clouds to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn run_train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for c in &a.ablate {
        cfg.ablate(*c);
    }
    if let Some(h) = a.head {
        cfg.model.head = h;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = TrainData::load(&a.data, &cfg.model)
        .with_context(|| format!("loading {}", a.data.display()))?;
    let (_, outcome) = train(&cfg, &data, &a.out, a.resume)?;
    for e in &outcome.history {
        match e.target_cd {
            Some(cd) => println!(
                "epoch {:>3}  loss {:.6}  target CD x1e4 {:.4}",
                e.epoch, e.mean_total, cd
            ),
            None => println!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_total),
        }
    }
    if let Some(b) = outcome.best_cd {
        println!("best target CD x1e4 {b:.4}");
    }
    Ok(())
}

fn run_eval(a: Eval) -> Result<()> {
    let metrics = parse_metrics(&a.metrics)?;
    let net = load_model(&a.ckpt)?;
    let samples = load_split(&split_dir(&a.data, Split::TargetEval), true)?;
    let table = evaluate(&net, &samples, &metrics)?;
    table.write_csv(&a.out)?;
    print!("{}", table.render());
    Ok(())
}

fn run_probe(a: Probe) -> Result<()> {
    let net = load_model(&a.ckpt)?;
    let clouds = |dir: &Path, split: Split| -> Result<Vec<_>> {
        Ok(load_split(&split_dir(dir, split), false)?
            .into_iter()
            .map(|s| s.partial)
            .collect())
    };
    let source = clouds(&a.source, Split::SourceTrain)?;
    let target = clouds(&a.target, Split::TargetTrain)?;
    let report = probe_alignment(&net, &source, &target, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, report.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "probe accuracy {:.4} (train {}, test {})",
        report.accuracy, report.train_size, report.test_size
    );
    Ok(())
}

fn run_complete(a: Complete) -> Result<()> {
    let net = load_model(&a.ckpt)?;
    if a.input == a.out {
        bail!("refusing to overwrite the input cloud");
    }
    let done = complete_file(&net, &a.input, &a.out)?;
    println!("wrote {} points to {}", done.len(), a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Probe(a) => run_probe(a),
        Cmd::Complete(a) => run_complete(a),
    }
}
