use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use lrcnn_core::analyzer::{analyze, compare, report_csv, CostReport};
use lrcnn_core::composite::{effective_filters, effective_filters_csv};
use lrcnn_core::gradcheck::{gradient_suite, EPS};
use lrcnn_core::init::{probe_csv, variance_probe, InitScheme, InitSpec};
use lrcnn_core::model::LayerParams;
use lrcnn_core::train::{self, checkpoint, load_cifar10, TrainConfig};
use lrcnn_core::{zoo, ArchSpec, LayerSpec};

/// Low-rank composite CNN toolkit.
#[derive(Parser)]
#[command(name = "lrcnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model zoo queries.
    Models {
        #[command(subcommand)]
        action: ModelsAction,
    },
    /// Per-layer MAC and parameter counts as CSV.
    Analyze {
        /// Zoo name or path to an architecture TOML file.
        #[arg(long)]
        model: String,
        /// Input as CxHxW.
        #[arg(long, value_parser = parse_input, default_value = "3x224x224")]
        input: (usize, usize, usize),
        /// Second model to report and compare against.
        #[arg(long)]
        compare: Option<String>,
    },
    /// Finite-difference check of every backward pass.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random cases per op.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Backward gradient-variance ratio per parametric layer.
    InitProbe {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input as CxHxW; defaults to the model's own input.
        #[arg(long, value_parser = parse_input)]
        input: Option<(usize, usize, usize)>,
        #[arg(long, value_enum, default_value = "composite-he")]
        scheme: Scheme,
        /// Multiplier on every standard deviation.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Train on CIFAR-10 binary batches and write a checkpoint.
    Train {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Use only the first N training images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Evaluate a checkpoint on the CIFAR-10 test batch.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Effective cross-shaped kernels of a composite layer with a join.
    FiltersExport {
        #[arg(long)]
        ckpt: PathBuf,
        /// Layer index in the architecture.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelsAction {
    /// Print every model name, sorted.
    List,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Scheme {
    CompositeHe,
    HeFanin,
}

fn parse_input(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("expected CxHxW with positive integers, got `{s}`"))?;
    match dims[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(format!("expected CxHxW, got `{s}`")),
    }
}

fn load_model(name: &str) -> Result<ArchSpec> {
    let path = Path::new(name);
    if name.ends_with(".toml") && path.exists() {
        return Ok(ArchSpec::load(path)?);
    }
    Ok(zoo::build(name)?)
}

fn models_list(out: &mut impl Write) -> Result<()> {
    for name in zoo::model_names() {
        writeln!(out, "{name}")?;
    }
    Ok(())
}

fn report(out: &mut impl Write, arch: &ArchSpec, input: (usize, usize, usize)) -> Result<CostReport> {
    let r = analyze(arch, input).with_context(|| format!("analyzing {}", arch.name))?;
    writeln!(out, "# model={} input={}x{}x{}", arch.name, input.0, input.1, input.2)?;
    write!(out, "{}", report_csv(&r))?;
    writeln!(out)?;
    Ok(r)
}

fn run_analyze(out: &mut impl Write, model: &str, input: (usize, usize, usize), other: Option<&str>) -> Result<()> {
    let arch = load_model(model)?;
    let main = report(out, &arch, input)?;
    let mut savings = Vec::new();
    if let Some(other) = other {
        let b = load_model(other)?;
        let base = report(out, &b, input)?;
        savings.push((base.model.clone(), compare(&base, &main)));
    }
    if zoo::VGG_MODELS.contains(&arch.name.as_str()) {
        for baseline in ["vgg11", "vgg-gmp"] {
            if savings.iter().any(|(n, _)| n == baseline) {
                continue;
            }
            // vgg11 has fixed fc geometry and only fits some inputs.
            if let Ok(base) = analyze(&zoo::build(baseline)?, input) {
                savings.push((baseline.to_string(), compare(&base, &main)));
            }
        }
    }
    if !savings.is_empty() {
        writeln!(out, "baseline,model,mac_savings,param_savings")?;
        for (baseline, s) in savings {
            writeln!(out, "{baseline},{},{},{}", main.model, s.macs, s.params)?;
        }
    }
    Ok(())
}

fn run_grad_check(out: &mut impl Write, seed: u64, cases: usize) -> Result<()> {
    const LIMIT: f64 = 1e-6;
    let checks = gradient_suite(seed, cases)?;
    writeln!(out, "op,cases,eps,max_rel_error,pass")?;
    let mut failed = Vec::new();
    for c in &checks {
        let pass = c.max_rel_error < LIMIT;
        writeln!(out, "{},{},{EPS},{:e},{pass}", c.op, c.cases, c.max_rel_error)?;
        if !pass {
            failed.push(c.op);
        }
    }
    if !failed.is_empty() {
        out.flush()?;
        bail!("gradient check above {LIMIT:e} for: {}", failed.join(", "));
    }
    Ok(())
}

fn read_data(dir: &Path) -> Result<(train::Dataset, train::Dataset)> {
    load_cifar10(dir).with_context(|| format!("loading CIFAR-10 from {}", dir.display()))
}

fn run_train(
    out: &mut impl Write,
    model: &str,
    data: &Path,
    config: &Path,
    ckpt: &Path,
    history: Option<&Path>,
    limit: Option<usize>,
) -> Result<()> {
    let arch = load_model(model)?;
    let config = TrainConfig::load(config)?;
    let (mut train_set, test_set) = read_data(data)?;
    if let Some(n) = limit {
        train_set = train_set.take(n);
    }
    let trained = train::train(&arch, &train_set, Some(&test_set), &config)?;
    if let Some(path) = history {
        std::fs::write(path, trained.history.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    write!(out, "{}", trained.history.epochs_csv())?;
    checkpoint::save_checkpoint(&trained.checkpoint(&arch), ckpt)?;
    Ok(())
}

fn run_eval(out: &mut impl Write, ckpt: &Path, data: &Path, k: usize) -> Result<()> {
    let ck = checkpoint::load_checkpoint(ckpt)?;
    let (_, test_set) = read_data(data)?;
    let e = train::evaluate_checkpoint(&ck, &test_set, k)?;
    writeln!(out, "model,images,top1,top{k},loss")?;
    writeln!(out, "{},{},{},{},{}", ck.arch.name, test_set.len(), e.top1, e.topk, e.loss)?;
    Ok(())
}

fn run_filters_export(ckpt: &Path, layer: usize, path: &Path) -> Result<()> {
    let ck = checkpoint::load_checkpoint(ckpt)?;
    let spec = ck
        .arch
        .layers
        .get(layer)
        .ok_or_else(|| anyhow!("layer {layer} out of range ({} layers)", ck.arch.layers.len()))?;
    let (LayerSpec::Composite { composite, .. }, LayerParams::Composite(params)) = (spec, &ck.params.layers[layer]) else {
        bail!("layer {layer} is {spec}, not a composite layer");
    };
    let kernels = effective_filters(composite, params)?;
    std::fs::write(path, effective_filters_csv(&kernels)).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Models {
            action: ModelsAction::List,
        } => models_list(&mut out),
        Command::Analyze { model, input, compare } => run_analyze(&mut out, &model, input, compare.as_deref()),
        Command::GradCheck { seed, cases } => run_grad_check(&mut out, seed, cases),
        Command::InitProbe {
            model,
            trials,
            seed,
            input,
            scheme,
            scale,
        } => {
            let mut arch = load_model(&model)?;
            if let Some(i) = input {
                arch = arch.with_input(i);
            }
            let scheme = match scheme {
                Scheme::CompositeHe => InitScheme::CompositeHe,
                Scheme::HeFanin => InitScheme::HeFanin,
            };
            let rows = variance_probe(&arch, &InitSpec::new(scheme, seed).scaled(scale), trials, seed)?;
            write!(out, "{}", probe_csv(&rows))?;
            Ok(())
        }
        Command::Train {
            model,
            data,
            config,
            out: ckpt,
            history,
            limit,
        } => run_train(&mut out, &model, &data, &config, &ckpt, history.as_deref(), limit),
        Command::Eval { ckpt, data, top_k } => run_eval(&mut out, &ckpt, &data, top_k),
        Command::FiltersExport { ckpt, layer, out: path } => run_filters_export(&ckpt, layer, &path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
