//! Command-line front end: flops, bench, check, train-toy, viz.
//!
//! Exit codes: 0 on success, 1 on check-suite or runtime failure, 2 on usage
//! errors. Every stochastic command records its seed in its output header.
//! Flags can also come from a plain `key=value` config file via `--config`.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hydra_core::attention::Variant;
use hydra_core::bench::{self, BenchVariant};
use hydra_core::checks;
use hydra_core::flops::{attention_fraction, count_vit_flops, FlopVariant, VitConfig};
use hydra_core::kernels::{self, FeatureMapSpec, KernelPair};
use hydra_core::netpbm;
use hydra_core::toymodel::{self, dataset, weights, ModelConfig, ScheduleStrategy};
use hydra_core::viz;

#[derive(Parser)]
#[command(
    name = "hydra",
    about = "Attention-variant laboratory: FLOP model, scaling benchmarks, invariant checks, toy training, and token heatmaps",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic MAC counts for a ViT-B/16 configuration
    Flops(FlopsArgs),
    /// Wall-clock scaling sweeps over token counts
    Bench(BenchArgs),
    /// Run the invariant suite (all modules or one)
    Check(CheckArgs),
    /// Train the toy vision transformer on the synthetic stripe task
    TrainToy(TrainArgs),
    /// Render a token-contribution heatmap for a hydra layer
    Viz(VizArgs),
}

#[derive(Args)]
struct FlopsArgs {
    /// Image side in pixels (must be divisible by 16)
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// baseline, hydra, or local-window
    #[arg(long, default_value = "baseline")]
    variant: String,
    /// How many of the last layers use hydra attention
    #[arg(long, default_value_t = 0)]
    replaced: usize,
    /// Also append a machine-readable row to this CSV file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// msa, mla, or hydra
    #[arg(long, default_value = "hydra")]
    variant: String,
    /// Token sweep: "min:max" doubles from min to max; or a comma list
    #[arg(long, default_value = "256:4096")]
    t: String,
    /// Feature dimension
    #[arg(long, default_value_t = 256)]
    d: usize,
    /// Head count (msa/mla; hydra always uses one head per feature)
    #[arg(long)]
    h: Option<usize>,
    /// Measured repetitions per point (at least 10)
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// f64 or f32
    #[arg(long, default_value = "f64")]
    precision: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write samples to this CSV file (stdout otherwise)
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Restrict to one module (tensor, autodiff, kernels, attention, flops,
    /// toymodel, bench, viz)
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// front, back, or interleave
    #[arg(long, default_value = "back")]
    strategy: String,
    /// How many layers the schedule replaces with hydra
    #[arg(long, default_value_t = 4)]
    replace: usize,
    /// Kernel for replaced layers, Q side (e.g. cossim, cossim+ln, tanh)
    #[arg(long, default_value = "cossim")]
    kernel_q: String,
    /// Kernel for replaced layers, K side
    #[arg(long, default_value = "cossim")]
    kernel_k: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    train_per_class: usize,
    #[arg(long, default_value_t = 8)]
    val_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report CSV here (it always goes to stdout)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Serialize trained weights to this file
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write one validation image as a PPM (input for `hydra viz`)
    #[arg(long)]
    dump_sample: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    /// Weights file produced by train-toy
    #[arg(long)]
    weights: PathBuf,
    /// Input image (binary PPM, P6); converted to grayscale
    #[arg(long)]
    image: PathBuf,
    /// Zero-based index of the attention layer to visualize
    #[arg(long)]
    layer: usize,
    /// Output heatmap (binary PGM, P5)
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbor upscale factor for the patch grid
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

fn main() -> ExitCode {
    let args = match expand_config_args(std::env::args().collect()) {
        Ok(args) => args,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => err.exit(), // clap uses 0 for --help/--version, 2 otherwise
    };
    let result = match cli.command {
        Command::Flops(args) => cmd_flops(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Check(args) => cmd_check(args),
        Command::TrainToy(args) => cmd_train(args),
        Command::Viz(args) => cmd_viz(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

/// Replace `--config FILE` with the flags read from FILE (one `key=value`
/// or bare `key` per line; `#` starts a comment).
fn expand_config_args(mut args: Vec<String>) -> Result<Vec<String>, String> {
    while let Some(pos) = args.iter().position(|a| a == "--config") {
        if pos + 1 >= args.len() {
            return Err("--config needs a file path".into());
        }
        let path = args.remove(pos + 1);
        args.remove(pos);
        let text = fs::read_to_string(&path).map_err(|e| format!("cannot read {path}: {e}"))?;
        let mut extra = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((key, value)) => {
                    extra.push(format!("--{}", key.trim()));
                    extra.push(value.trim().to_string());
                }
                None => extra.push(format!("--{line}")),
            }
        }
        args.extend(extra);
    }
    Ok(args)
}

fn cmd_flops(args: FlopsArgs) -> hydra_core::Result<ExitCode> {
    let variant: FlopVariant = args.variant.parse()?;
    let cfg = VitConfig::vit_b16(args.size);
    let report = count_vit_flops(&cfg, variant, args.replaced)?;
    let fraction = attention_fraction(&report);

    println!(
        "ViT-B/16 @ {}px — variant {}, replaced {}, T = {}",
        args.size, variant, args.replaced, report.tokens
    );
    println!("{:<22}{:>12}", "component", "GMACs");
    for (name, macs) in &report.components {
        let note = if *macs == 0 && (*name == "patch_embed" || *name == "head") {
            "  (not counted)"
        } else {
            ""
        };
        println!("{:<22}{:>12.3}{}", name, *macs as f64 / 1e9, note);
    }
    println!("{:<22}{:>12.3}", "total", report.total_gmacs());
    println!("attention fraction  {fraction:>11.2}%");

    if let Some(path) = &args.csv {
        let line = format!(
            "{},{},{},{},{:.6},{:.6},{:.4}\n",
            args.size,
            variant,
            args.replaced,
            report.tokens,
            report.total_gmacs(),
            report.attention_gmacs(),
            fraction
        );
        let header = "size,variant,replaced,T,total_gmacs,attention_gmacs,attention_fraction_pct\n";
        let mut body = String::new();
        if !path.exists() {
            body.push_str(header);
        }
        body.push_str(&line);
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?
            .write_all(body.as_bytes())?;
        println!("csv row appended to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_sweep(spec: &str) -> hydra_core::Result<Vec<usize>> {
    let parse_one = |s: &str| -> hydra_core::Result<usize> {
        s.trim()
            .parse::<usize>()
            .map_err(|_| hydra_core::Error::Spec(format!("bad token count '{s}'")))
    };
    if let Some((lo, hi)) = spec.split_once(':') {
        let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
        if lo == 0 || hi < lo {
            return Err(hydra_core::Error::Spec(format!("bad sweep range '{spec}'")));
        }
        let mut points = Vec::new();
        let mut t = lo;
        while t <= hi {
            points.push(t);
            t *= 2;
        }
        Ok(points)
    } else {
        spec.split(',').map(parse_one).collect()
    }
}

fn cmd_bench(args: BenchArgs) -> hydra_core::Result<ExitCode> {
    let variant: BenchVariant = args.variant.parse()?;
    let t_values = parse_sweep(&args.t)?;
    let heads = args.h.unwrap_or(match variant {
        BenchVariant::Hydra => args.d,
        _ => 1,
    });

    let samples = match args.precision.as_str() {
        "f64" => bench::time_op::<f64>(variant, &t_values, args.d, heads, args.reps, args.seed)?,
        "f32" => bench::time_op::<f32>(variant, &t_values, args.d, heads, args.reps, args.seed)?,
        other => {
            return Err(hydra_core::Error::Spec(format!(
                "unknown precision '{other}' (expected f64 or f32)"
            )))
        }
    };

    match &args.csv {
        Some(path) => {
            let mut file = fs::File::create(path)?;
            bench::write_csv(&samples, args.seed, &mut file)?;
            println!("wrote {} samples to {}", samples.len(), path.display());
        }
        None => {
            bench::write_csv(&samples, args.seed, std::io::stdout().lock())?;
        }
    }
    let slope = bench::time_slope(&samples)?;
    println!("# log-log slope of median time vs T: {slope:.3}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: CheckArgs) -> hydra_core::Result<ExitCode> {
    let outcomes = match &args.module {
        Some(module) => checks::run_module(module, args.seed)?,
        None => checks::run_all(args.seed),
    };
    let mut failed = 0usize;
    for o in &outcomes {
        if o.passed {
            println!("[PASS] {}: {}", o.module, o.name);
        } else {
            failed += 1;
            println!("[FAIL] {}: {} — {}", o.module, o.name, o.detail);
        }
    }
    println!(
        "checked {} invariants, {} passed, {} failed (seed={})",
        outcomes.len(),
        outcomes.len() - failed,
        failed,
        args.seed
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_train(args: TrainArgs) -> hydra_core::Result<ExitCode> {
    let strategy: ScheduleStrategy = args.strategy.parse()?;
    let q: FeatureMapSpec = args.kernel_q.parse()?;
    let k: FeatureMapSpec = args.kernel_k.parse()?;
    let kernel = KernelPair { q, k };

    let mut cfg = ModelConfig::new(
        args.depth,
        args.dim,
        args.heads,
        args.patch,
        args.image_size,
        2,
    )?
    .with_schedule(strategy, args.replace, kernel)?;
    cfg.learning_rate = args.lr;
    cfg.steps = args.steps;
    cfg.batch_size = args.batch;
    cfg.seed = args.seed;

    let data = dataset::generate_stripes(
        args.train_per_class,
        args.val_per_class,
        args.image_size,
        args.seed,
    );
    let (params, report) = toymodel::train(&cfg, &data)?;

    report.write_csv(std::io::stdout().lock())?;
    if let Some(path) = &args.csv {
        report.write_csv(fs::File::create(path)?)?;
    }
    if let Some(path) = &args.weights {
        weights::save_model(path, &cfg, &params)?;
        println!("# weights written to {}", path.display());
    }
    if let Some(path) = &args.dump_sample {
        let sample = data
            .val
            .first()
            .or_else(|| data.train.first())
            .expect("dataset is non-empty");
        netpbm::write_ppm(path, &netpbm::grayscale_to_rgb(&sample.pixels))?;
        println!(
            "# sample image (label {}) written to {}",
            sample.label,
            path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_viz(args: VizArgs) -> hydra_core::Result<ExitCode> {
    let (cfg, params) = weights::load_model(&args.weights)?;
    let rgb = netpbm::read_ppm(&args.image)?;
    if rgb.width != cfg.image_size || rgb.height != cfg.image_size {
        return Err(hydra_core::Error::Dimension(format!(
            "image is {}x{}, model expects {}x{} pixels",
            rgb.width, rgb.height, cfg.image_size, cfg.image_size
        )));
    }
    let gray = netpbm::rgb_to_grayscale(&rgb);

    if args.layer >= cfg.depth {
        return Err(hydra_core::Error::Spec(format!(
            "layer {} out of range for depth {}",
            args.layer, cfg.depth
        )));
    }
    let spec = &cfg.layer_specs[args.layer];
    let pair = match spec.variant {
        Variant::Hydra => spec.kernel_pair,
        Variant::AftSimple => KernelPair::sigmoid_softmax(),
        Variant::PolyNl => KernelPair::mean(),
        other => {
            return Err(hydra_core::Error::Spec(format!(
                "layer {} uses {}, which has no token-gated decomposition; pick a hydra layer",
                args.layer,
                other.name()
            )))
        }
    };

    let mut trace = toymodel::forward_batch(&cfg, &params, &[&gray])?;
    let sample = trace.samples[0].clone();
    let logits = trace.tape.value(sample.logits).data().to_vec();
    let predicted = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    // loss = predicted-class logit; g = its gradient at the layer output
    let layer = sample.layers[args.layer];
    let logit = trace.tape.slice_cols(sample.logits, predicted, predicted + 1)?;
    let scalar = trace.tape.sum_all(logit)?;
    let grads = trace.tape.backward(scalar)?;
    let g_full = grads.get(layer.attn_out)?;
    let dim = cfg.dim;
    let g = g_full.slice_rows(0, 1)?.reshape(&[dim])?;

    let tokens = cfg.tokens();
    let phi_q = kernels::apply_feature_map(trace.tape.value(layer.q), &pair.q, tokens)?;
    let phi_k = kernels::apply_feature_map(trace.tape.value(layer.k), &pair.k, tokens)?;
    let v_val = trace.tape.value(layer.v).clone();
    let phi_q_class = phi_q.slice_rows(0, 1)?.reshape(&[dim])?;

    let scores = viz::token_contributions(&phi_q_class, &phi_k, &v_val, &g)?;
    let side = cfg.image_size / cfg.patch_size;
    let map = viz::ContributionMap::from_raw(&scores, 0, (side, side))?;
    let heat = viz::render_heatmap(&scores[1..], (side, side), args.scale)?;
    netpbm::write_pgm(&args.out, &heat)?;

    println!("predicted class: {predicted} (logits {logits:?})");
    println!("class-token self-contribution: {:.6}", map.class_self);
    println!(
        "max positive token contribution: {:.6} ({} negative scores clamped)",
        map.normalization.max_positive, map.normalization.clamped
    );
    println!("heatmap written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
