use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cgmatch::attention::AttentionParams;
use cgmatch::eval::{self, CorpusPair, CorpusSpec, WarpKind};
use cgmatch::features::Image;
use cgmatch::selftest::{self, SelfTestOptions};
use cgmatch::{viz, Matcher, RunConfig};
use clap::{Args, Parser, Subcommand};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

/// Semi-dense image matching with confidence-guided attention.
#[derive(Parser)]
#[command(name = "cgmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic homography corpus.
    Gen(GenArgs),
    /// Match one image pair.
    Match(MatchArgs),
    /// Run the MMA benchmark over a corpus.
    Bench(BenchArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
    /// Score every loss term for one corpus pair.
    LossReport(LossArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    pairs: usize,
    /// Image side length in pixels; must be a multiple of 8.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Strength of the random warp in [0, 1]; 0 gives identity pairs.
    #[arg(long, default_value_t = 0.5)]
    warp_magnitude: f64,
    /// Use a fixed translation `DX,DY` instead of random warps.
    #[arg(long, value_parser = parse_translation, allow_hyphen_values = true)]
    translate: Option<(f64, f64)>,
    /// Half-width of the uniform noise added to the second image.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
}

/// Pipeline settings. Unset flags keep the value from `--config`, or the
/// built-in default.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file holding a full run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the fixed backbone, attention and fusion weights.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    coarse_channels: Option<usize>,
    #[arg(long)]
    fine_channels: Option<usize>,
    /// Correlation temperature for confidence estimation.
    #[arg(long)]
    gamma: Option<f64>,
    /// Coarse similarity temperature.
    #[arg(long)]
    lambda: Option<f64>,
    /// Coarse match threshold.
    #[arg(long)]
    theta_c: Option<f64>,
    /// Log bias strength; alpha = exp(eta).
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<f64>,
    /// Weight of the confidence loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Sub-pixel loss mask radius, fine-grid units.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    t_blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Confidence map variant.
    #[arg(long, value_parser = ["i", "ii", "iii", "iv", "v"])]
    conf_variant: Option<String>,
    /// Disable the confidence bias on attention scores.
    #[arg(long)]
    no_bias: bool,
    /// Disable confidence rescaling of attention values.
    #[arg(long)]
    no_rescale: bool,
    /// Drop the confidence term from the total loss.
    #[arg(long)]
    no_confidence_loss: bool,
    /// Attention weights as JSON; replaces the seeded random weights.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v; })*};
        }
        set!(seed, coarse_channels, fine_channels, gamma, lambda, theta_c, eta, beta, epsilon, pool, t_blocks, heads);
        if let Some(v) = &self.conf_variant {
            cfg.set_conf_variant(v)?;
        }
        cfg.ablation.bias &= !self.no_bias;
        cfg.ablation.rescale &= !self.no_rescale;
        cfg.ablation.supervise_confidence &= !self.no_confidence_loss;
        cfg.validate()?;
        Ok(cfg)
    }

    fn matcher(&self) -> Result<Matcher> {
        let matcher = Matcher::new(self.resolve()?)?;
        match &self.weights {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(matcher.with_attention(AttentionParams::from_json(&text)?)?)
            }
            None => Ok(matcher),
        }
    }
}

#[derive(Args)]
struct MatchArgs {
    img1: PathBuf,
    img2: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write both confidence maps as PGM images.
    #[arg(long)]
    dump_confidence: bool,
    /// Write a side-by-side PPM with one line per match.
    #[arg(long)]
    viz: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    corpus: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    eta: f64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct LossArgs {
    corpus: PathBuf,
    /// Pair id from the corpus metadata; defaults to the first pair.
    #[arg(long)]
    pair: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_translation(s: &str) -> Result<(f64, f64), String> {
    let (dx, dy) = s.split_once(',').ok_or("expected DX,DY")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((parse(dx)?, parse(dy)?))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn gen(args: &GenArgs) -> Result<u8> {
    let warp = match args.translate {
        Some((dx, dy)) => WarpKind::Translation { dx, dy },
        None => WarpKind::Random {
            magnitude: args.warp_magnitude,
        },
    };
    let spec = CorpusSpec {
        seed: args.seed,
        pairs: args.pairs,
        size: args.size,
        warp,
        noise: args.noise,
    };
    let entries = eval::generate_corpus(&spec, &args.out)?;
    println!("wrote {} pairs to {}", entries.len(), args.out.display());
    Ok(0)
}

fn run_match(args: &MatchArgs) -> Result<u8> {
    let matcher = args.config.matcher()?;
    let read = |p: &Path| Image::read_pgm(p).with_context(|| format!("reading {}", p.display()));
    let (img1, img2) = (read(&args.img1)?, read(&args.img2)?);
    let out = matcher.run(&img1, &img2)?;
    create_dir(&args.out)?;
    let matches = &out.matches;
    write(&args.out.join("matches.jsonl"), matches.to_json_lines())?;
    write(&args.out.join("coarse_matches.jsonl"), matches.coarse_json_lines())?;
    let config = matcher.config();
    let report = serde_json::json!({
        "mode": config.ablation.mode(),
        "tag": config.ablation.tag(),
        "config": config,
        "coarse_matches": matches.coarse.len(),
        "fine_matches": matches.fine.len(),
    });
    write(&args.out.join("match_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if args.dump_confidence {
        let (w, h) = out.coarse_dims;
        viz::write_confidence_pgm(&args.out.join("confidence1.pgm"), &out.conf1.values, w, h)?;
        viz::write_confidence_pgm(&args.out.join("confidence2.pgm"), &out.conf2.values, w, h)?;
    }
    if args.viz {
        viz::render_matches(&img1, &img2, &matches.fine)?.write_ppm(&args.out.join("matches.ppm"))?;
    }
    println!(
        "{} mode: {} coarse, {} fine matches -> {}",
        config.ablation.mode(),
        matches.coarse.len(),
        matches.fine.len(),
        args.out.display()
    );
    if matches.coarse.is_empty() {
        eprintln!("error: degenerate pair, no coarse matches");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(0)
}

fn load_corpus(dir: &Path) -> Result<Vec<CorpusPair>> {
    eval::load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn bench(args: &BenchArgs) -> Result<u8> {
    let matcher = args.config.matcher()?;
    let pairs = load_corpus(&args.corpus)?;
    let report = eval::run_benchmark(&pairs, &matcher)?;
    create_dir(&args.out)?;
    let path = args.out.join(report.file_name());
    write(&path, report.to_json()?)?;
    let curve: Vec<String> = report
        .thresholds
        .iter()
        .zip(&report.mean)
        .map(|(t, a)| format!("@{t}px {a:.4}"))
        .collect();
    println!("{} ({} pairs): MMA {}", report.mode, report.pairs.len(), curve.join("  "));
    println!("report: {}", path.display());
    Ok(0)
}

fn run_selftest(args: &SelftestArgs) -> Result<u8> {
    let report = selftest::run(&SelfTestOptions {
        seed: args.seed,
        eta: args.eta,
        inject_fault: args.inject_fault,
    });
    print!("{report}");
    if report.all_passed() {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{} checks failed", report.checks.iter().filter(|c| !c.passed).count());
        Ok(EXIT_FAILURE)
    }
}

fn select_pair(pairs: Vec<CorpusPair>, id: Option<&str>) -> Result<CorpusPair> {
    match id {
        None => Ok(pairs.into_iter().next().expect("load_corpus rejects empty corpora")),
        Some(id) => match pairs.into_iter().find(|p| p.id == id) {
            Some(p) => Ok(p),
            None => bail!(cgmatch::Error::Config(format!("no pair with id {id}"))),
        },
    }
}

fn loss_report(args: &LossArgs) -> Result<u8> {
    let matcher = args.config.matcher()?;
    let pair = select_pair(load_corpus(&args.corpus)?, args.pair.as_deref())?;
    let report = eval::loss_report(&pair, &matcher)?;
    create_dir(&args.out)?;
    let path = args.out.join(format!("loss_{}.json", report.id));
    write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let l = &report.losses;
    println!(
        "{}: total {:.6} (coarse {:.6}, fine {:.6}, subpixel {:.6}, confidence {:.6} x {})",
        report.id, l.total, l.l_c, l.l_f, l.l_s, l.l_m, l.beta
    );
    println!("report: {}", path.display());
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cgmatch::Error>() {
            if e.is_config() {
                return EXIT_CONFIG;
            }
            if e.is_io() {
                return EXIT_IO;
            }
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Match(a) => run_match(a),
        Command::Bench(a) => bench(a),
        Command::Selftest(a) => run_selftest(a),
        Command::LossReport(a) => loss_report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
