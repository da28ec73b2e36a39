use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tttlin::align::{key_shift_ratio, normalize_inputs, KeyNorm};
use tttlin::analysis::bench::{scaling_bench, BenchArch, BenchConfig};
use tttlin::analysis::fit::{fit_csv, teacher_fit_seeds, FitConfig, FitResult, Protocol, StudentArch};
use tttlin::analysis::flops::{cost_curve_csv, flops_model, Arch};
use tttlin::attention::AttentionInputs;
use tttlin::convert::{read_checkpoint, write_checkpoint, ConvertSpec, ModelConfig, VitModel};
use tttlin::locality::{implicit_attention, locality_index, LocalityConfig, LocalityMode, MixerLayer};
use tttlin::rng::{derived, Rng};
use tttlin::ttt::{InnerModel, InnerVariant, TttConfig};
use tttlin::verify::{run_suite, Suite};
use tttlin::{ActivationKind, DType, Error, Tensor};

const EXIT_PROPERTY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "tttlin", version, about = "Attention-to-TTT conversion toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Numeric precision for written tensors and timed kernels.
    #[arg(long, global = true, default_value = "f64")]
    precision: String,
    /// Directory for CSV/JSON outputs.
    #[arg(long, global = true, env = "TTT_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run property suites and write a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Convert a Softmax ViT checkpoint (or a random one) to a TTT model.
    Convert(ConvertArgs),
    /// FLOPs/params cost curves, optionally with measured mixer scaling.
    Bench(BenchArgs),
    /// Implicit attention maps and locality indices for token mixers.
    AttnMap(AttnMapArgs),
    /// Fit converted students to a random Softmax teacher.
    FitTeacher(FitArgs),
    /// Key-shift ratio of i.i.d. Gaussian keys.
    KeyRatio {
        #[arg(long, default_value_t = 196)]
        tokens: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        draws: usize,
    },
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Source checkpoint.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    input: Option<PathBuf>,
    /// Start from a random Softmax model of this config (deit-t, deit-s).
    #[arg(long)]
    random_init: Option<String>,
    /// two_layer, swiglu, linear, linear_projqk, t5, ...
    #[arg(long, default_value = "two_layer")]
    variant: String,
    /// none, dwc_qk, dwc_v, cpe_x
    #[arg(long)]
    locality: Option<String>,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    /// Blend with neighborhood attention of this window.
    #[arg(long)]
    nat: Option<usize>,
    #[arg(long)]
    key_norm: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "softmax,linear,ttt,t5")]
    archs: String,
    /// `a..b` doubles from a up to b; or a comma list.
    #[arg(long, default_value = "224..1792")]
    resolutions: String,
    #[arg(long, default_value = "deit-t")]
    config: String,
    /// Also time the mixers alone over a token sweep.
    #[arg(long)]
    measure: bool,
    #[arg(long, default_value = "softmax,ttt")]
    measure_archs: String,
    #[arg(long, default_value = "256,512,1024,2048,4096,8192,16384")]
    tokens: String,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct AttnMapArgs {
    /// Comma list: softmax, linear, nat<w>, ttt[_<variant>], ttt[_<variant>]+nat<w>
    #[arg(long, default_value = "softmax")]
    layer: String,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    /// Window used for the locality index.
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Std of inner weights for TTT layers.
    #[arg(long, default_value_t = 0.5)]
    inner_std: f64,
    #[arg(long, default_value = "none")]
    key_norm: String,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, default_value = "freeze")]
    protocol: String,
    /// Comma list of students: softmax, linear, linear_projqk, two_layer (ttt2), ...
    #[arg(long, default_value = "linear,ttt2")]
    arch: String,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 20.0)]
    lr_multiplier: f64,
    /// Key normalization for converted students.
    #[arg(long, default_value = "instance")]
    key_norm: String,
    /// Offset teacher keys by this many mean key norms.
    #[arg(long)]
    key_shift: Option<f64>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Divergence { .. } | Error::DegenerateNormalizer { .. } => EXIT_PROPERTY,
        Error::Dimension(_) | Error::Config(_) | Error::Unsupported(_) => EXIT_USAGE,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn list<T>(s: &str, parse: impl Fn(&str) -> Result<T, Error>) -> Result<Vec<T>, Error> {
    let items: Vec<T> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(parse).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(usage(format!("empty list {s:?}")));
    }
    Ok(items)
}

fn parse_usize(s: &str) -> Result<usize, Error> {
    s.parse().map_err(|_| usage(format!("not a positive integer: {s:?}")))
}

fn parse_resolutions(s: &str) -> Result<Vec<usize>, Error> {
    match s.split_once("..") {
        Some((a, b)) => {
            let (mut r, end) = (parse_usize(a)?, parse_usize(b)?);
            if r == 0 || end < r {
                return Err(usage(format!("bad resolution range {s:?}")));
            }
            let mut out = Vec::new();
            while r <= end {
                out.push(r);
                r *= 2;
            }
            Ok(out)
        }
        None => list(s, parse_usize),
    }
}

fn precision(common: &Common) -> Result<DType, Error> {
    common.precision.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify { suite } => verify(&cli.common, suite),
        Command::Convert(a) => convert(&cli.common, a),
        Command::Bench(a) => bench(&cli.common, a),
        Command::AttnMap(a) => attn_map(&cli.common, a),
        Command::FitTeacher(a) => fit_teacher(&cli.common, a),
        Command::KeyRatio { tokens, dim, draws } => key_ratio(&cli.common, *tokens, *dim, *draws),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn verify(common: &Common, suite: &str) -> Result<u8, Error> {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite, common.seed)?;
    print!("{}", report.lines());
    write_file(&common.output_dir.join(format!("verify_{}.json", suite.label())), &report.to_json())?;
    let failed = report.properties.iter().filter(|p| !p.passed).count();
    println!("{} properties, {failed} failed", report.properties.len());
    Ok(if report.passed { 0 } else { EXIT_PROPERTY })
}

fn convert(common: &Common, a: &ConvertArgs) -> Result<u8, Error> {
    let dtype = precision(common)?;
    let mut spec: ConvertSpec = a.variant.parse()?;
    if a.locality.is_some() || a.nat.is_some() {
        let mode: LocalityMode = match &a.locality {
            Some(m) => m.parse()?,
            None => spec.locality.mode,
        };
        let mut loc = LocalityConfig::new(mode);
        loc.kernel_size = a.kernel_size;
        if let Some(w) = a.nat {
            loc = loc.with_nat(w);
        }
        spec = spec.with_locality(loc);
    }
    if let Some(n) = &a.key_norm {
        spec = spec.with_key_norm(n.parse()?);
    }
    spec.validate()?;
    let source = match (&a.input, &a.random_init) {
        (Some(path), _) => read_checkpoint(path)?,
        (None, Some(name)) => VitModel::random(ModelConfig::by_name(name)?, true, common.seed)?,
        (None, None) => return Err(usage("need --input or --random-init")),
    };
    let model = source.convert(&spec, common.seed)?;
    let bytes = write_checkpoint(&a.out, &model, dtype)?;
    println!("converted to {} ({} bytes, {})", spec.label(), bytes, dtype.name());
    println!("{:>6} {:>12} {:>10}", "block", "inherited", "new");
    for (i, (inh, new)) in model.block_breakdown().iter().enumerate() {
        println!("{i:>6} {inh:>12} {new:>10}");
    }
    let p = model.param_count();
    println!("{:>6} {:>12} {:>10}", "model", p.inherited, p.new);
    println!(
        "total params {} ({:.2}M), new params {} ({:.2}M)",
        p.total,
        p.total as f64 / 1e6,
        p.new,
        p.new as f64 / 1e6
    );
    Ok(0)
}

fn bench(common: &Common, a: &BenchArgs) -> Result<u8, Error> {
    let archs = list(&a.archs, |s| s.parse::<Arch>())?;
    let base = ModelConfig::by_name(&a.config)?;
    let mut reports = Vec::new();
    for arch in &archs {
        for &res in &parse_resolutions(&a.resolutions)? {
            let cfg = base.clone().with_resolution(res);
            cfg.validate()?;
            reports.push(flops_model(&cfg, arch)?);
        }
    }
    println!("{:<28} {:>6} {:>7} {:>10} {:>10}", "arch", "res", "N", "GFLOPs", "params");
    for r in &reports {
        println!(
            "{:<28} {:>6} {:>7} {:>10.4} {:>10}",
            r.arch,
            r.resolution,
            r.tokens,
            r.flops as f64 / 1e9,
            r.params
        );
    }
    write_file(&common.output_dir.join("cost_curve.csv"), &cost_curve_csv(&reports))?;
    if a.measure {
        let cfg = BenchConfig {
            archs: list(&a.measure_archs, |s| s.parse::<BenchArch>())?,
            tokens: list(&a.tokens, parse_usize)?,
            head_dim: a.head_dim,
            repeats: a.repeats,
            dtype: precision(common)?,
            seed: common.seed,
            ..BenchConfig::default()
        };
        let report = scaling_bench(&cfg)?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        for s in &report.archs {
            println!("{}: fitted exponent {:.3}", s.arch, s.exponent);
        }
        match &report.crossover {
            Some(c) => println!(
                "crossover: fitted N ≈ {:.0}, measured {}",
                c.fitted_tokens,
                c.measured_tokens.map_or("none".into(), |n| format!("N = {n}"))
            ),
            None => println!("crossover: none"),
        }
        write_file(&common.output_dir.join("scaling.csv"), &report.to_csv())?;
    }
    Ok(0)
}

fn parse_layer(s: &str, d: usize, inner_std: f64, rng: &mut Rng) -> Result<MixerLayer, Error> {
    let (head, nat) = match s.split_once("+nat") {
        Some((h, w)) => (h, Some(parse_usize(w)?)),
        None => (s, None),
    };
    let ttt = |name: &str, rng: &mut Rng| -> Result<(InnerModel, TttConfig), Error> {
        let variant = match name.strip_prefix("ttt_") {
            Some(v) => v.parse()?,
            None if name == "ttt" => InnerVariant::TwoLayerMlp,
            None => return Err(usage(format!("unknown layer {s:?}"))),
        };
        let model = InnerModel::init(variant, ActivationKind::Silu, d, d, inner_std, rng)?;
        Ok((model, TttConfig::default()))
    };
    match (head, nat) {
        ("softmax", None) => Ok(MixerLayer::Softmax),
        ("linear", None) => Ok(MixerLayer::Linear {
            kernel: ActivationKind::EluPlusOne,
        }),
        (h, None) if h.starts_with("nat") => Ok(MixerLayer::Nat {
            window: parse_usize(&h[3..])?,
        }),
        (h, None) => ttt(h, rng).map(|(model, cfg)| MixerLayer::Ttt { model, cfg }),
        (h, Some(window)) => ttt(h, rng).map(|(model, cfg)| MixerLayer::Blend { model, cfg, window }),
    }
}

fn attn_map(common: &Common, a: &AttnMapArgs) -> Result<u8, Error> {
    let grid = (a.grid, a.grid);
    let norm: KeyNorm = a.key_norm.parse()?;
    let inputs = AttentionInputs::random(grid, a.head_dim, &mut derived(common.seed, 0));
    let inputs = normalize_inputs(&inputs, norm)?;
    let mut index_csv = String::from("layer,window,locality_index\n");
    for (i, name) in a.layer.split(',').map(str::trim).enumerate() {
        let layer = parse_layer(name, a.head_dim, a.inner_std, &mut derived(common.seed, 1 + i as u64))?;
        let map = implicit_attention(&layer, &inputs)?;
        let idx = locality_index(&map.scores, grid, a.window)?;
        println!("{name}: locality index (window {}) = {idx:.6}", a.window);
        index_csv.push_str(&format!("{name},{},{idx:e}\n", a.window));
        write_file(&common.output_dir.join(format!("attn_map_{name}.csv")), &map.to_csv())?;
    }
    write_file(&common.output_dir.join("locality_index.csv"), &index_csv)?;
    Ok(0)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn fit_teacher(common: &Common, a: &FitArgs) -> Result<u8, Error> {
    let norm: KeyNorm = a.key_norm.parse()?;
    let archs = list(&a.arch, |s| {
        s.parse::<StudentArch>().map(|arch| match arch {
            StudentArch::Converted(spec) => StudentArch::Converted(spec.with_key_norm(norm)),
            other => other,
        })
    })?;
    if a.seeds == 0 {
        return Err(usage("need at least one seed"));
    }
    let cfg = FitConfig {
        protocol: a.protocol.parse::<Protocol>()?,
        steps: a.steps,
        lr: a.lr,
        lr_multiplier: a.lr_multiplier,
        key_shift: a.key_shift,
        ..FitConfig::default()
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| common.seed + i).collect();
    let mut runs: Vec<Vec<FitResult>> = Vec::new();
    for arch in &archs {
        runs.push(teacher_fit_seeds(arch, &cfg, &seeds)?);
    }
    let all: Vec<FitResult> = runs.iter().flatten().cloned().collect();
    write_file(&common.output_dir.join("fit_results.csv"), &fit_csv(&all))?;
    println!("{:<24} {:>14} {:>9}", "arch", "median mse", "diverged");
    for r in &runs {
        let med = median(r.iter().map(|x| x.teacher_output_mse).collect());
        let div = r.iter().filter(|x| x.diverged).count();
        println!("{:<24} {:>14.6e} {:>6}/{}", r[0].arch, med, div, r.len());
    }
    for (i, a_runs) in runs.iter().enumerate() {
        for b_runs in runs.iter().skip(i + 1) {
            let wins = a_runs
                .iter()
                .zip(b_runs)
                .filter(|(x, y)| x.teacher_output_mse < y.teacher_output_mse)
                .count();
            println!(
                "{} lower than {} in {wins}/{} seeds",
                a_runs[0].arch,
                b_runs[0].arch,
                seeds.len()
            );
        }
    }
    Ok(0)
}

fn key_ratio(common: &Common, tokens: usize, dim: usize, draws: usize) -> Result<u8, Error> {
    if tokens == 0 || dim == 0 || draws == 0 {
        return Err(usage("tokens, dim and draws must be positive"));
    }
    let mut ratios = Vec::with_capacity(draws);
    for i in 0..draws {
        let k = Tensor::randn(&[tokens, dim], 1.0, &mut derived(common.seed, i as u64));
        ratios.push(key_shift_ratio(&k)?.shift_ratio);
    }
    let mean = ratios.iter().sum::<f64>() / draws as f64;
    println!("mean key-shift ratio over {draws} draws (N={tokens}, d={dim}): {mean:.6}");
    let json = serde_json::json!({
        "tokens": tokens,
        "dim": dim,
        "draws": draws,
        "seed": common.seed,
        "mean_ratio": mean,
        "ratios": ratios,
    });
    let text = serde_json::to_string_pretty(&json).expect("json value serializes") + "\n";
    write_file(&common.output_dir.join("key_ratio.json"), &text)?;
    Ok(0)
}
