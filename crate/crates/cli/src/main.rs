use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use xrc::eval;
use xrc::features::{read_features, write_features, FeaturePyramid};
use xrc::gtpdf::keypoint_to_pdf;
use xrc::imgio::{load_image, ResizeSpec, Scale, MIN_LONG_SIDE};
use xrc::map::export_heatmap;
use xrc::matcher::{self, prepare, stage_map, PipelineConfig, Stage};
use xrc::mmfilter::MMConfig;

#[global_allocator]
static ALLOC: xrc::mem::PeakAlloc = xrc::mem::PeakAlloc;

/// Dense coarse-to-fine image matching with mutual-matching filtering.
#[derive(Parser, Debug)]
#[command(name = "xrc", version)]
struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, env = "XRC_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match two images (or .xfm feature files) and write a match TSV.
    Match(MatchArgs),
    /// Mean matching accuracy over an HPatches-layout dataset.
    Eval(EvalArgs),
    /// Evaluate a dataset at several resolutions.
    Sweep(SweepArgs),
    /// Export one query's correlation map at a pipeline stage as a PGM.
    Heatmap(HeatmapArgs),
    /// Two-method bias histogram over per-pair correct-match ratios.
    Bias(BiasArgs),
    /// Export or inspect XFM1 feature files.
    #[command(subcommand)]
    Features(FeaturesCommand),
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Long side, in pixels, that inputs are resized to before matching.
    #[arg(long, default_value_t = matcher::DEFAULT_RESOLUTION, value_parser = parse_resolution)]
    resolution: u32,
    /// Number of coarse cells refined into matches.
    #[arg(long, default_value_t = matcher::DEFAULT_TOPK)]
    topk: usize,
    /// Mutual-matching passes applied to the coarse tensor.
    #[arg(long, default_value_t = xrc::mmfilter::DEFAULT_PASSES)]
    mm_passes: usize,
    /// Stabilizer added to the row and column maxima.
    #[arg(long, default_value_t = xrc::mmfilter::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Memory budget for the coarse tensor, in MiB.
    #[arg(long, default_value_t = 1024)]
    memory_budget_mb: usize,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig, String> {
        let cfg = PipelineConfig {
            resolution: ResizeSpec::new(self.resolution).map_err(|e| e.to_string())?,
            mm: MMConfig::new(self.epsilon, self.mm_passes)?,
            topk: self.topk,
            memory_budget: self.memory_budget_mb.saturating_mul(1 << 20),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Source image (PPM/PGM/PNG) or .xfm feature file.
    #[arg(long)]
    src: PathBuf,
    /// Target image (PPM/PGM/PNG) or .xfm feature file.
    #[arg(long)]
    tgt: PathBuf,
    /// Output TSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset root with one directory per sequence.
    #[arg(long)]
    dataset: PathBuf,
    /// MMA CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Error thresholds in pixels: `A..B` (integers, inclusive) or a comma list.
    #[arg(long, default_value = "1..10", value_parser = parse_thresholds)]
    thresholds: Thresholds,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset root with one directory per sequence.
    #[arg(long)]
    dataset: PathBuf,
    /// Ascending comma-separated resolutions.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_resolution)]
    resolutions: Vec<u32>,
    /// Sweep CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Error thresholds in pixels: `A..B` (integers, inclusive) or a comma list.
    #[arg(long, default_value = "1..10", value_parser = parse_thresholds)]
    thresholds: Thresholds,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum HeatStage {
    /// Raw coarse correlation.
    Raw,
    /// Coarse map after one mutual-matching pass.
    Mm1,
    /// Coarse map after two mutual-matching passes.
    Mm2,
    /// Re-weighted fine map.
    Fine,
    /// Ground-truth keypoint PDF on the target fine grid (needs --homography).
    Gt,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Source image or .xfm feature file.
    #[arg(long)]
    src: PathBuf,
    /// Target image or .xfm feature file.
    #[arg(long)]
    tgt: PathBuf,
    /// Query pixel `X,Y` in the original source image.
    #[arg(long, value_parser = parse_point)]
    query: (f64, f64),
    /// Pipeline stage to export.
    #[arg(long, value_enum, default_value_t = HeatStage::Mm2)]
    stage: HeatStage,
    /// Source-to-target homography file, for `--stage gt`.
    #[arg(long)]
    homography: Option<PathBuf>,
    /// Output PGM.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct BiasArgs {
    /// Correct-match ratios of method A, one per pair.
    #[arg(long)]
    a: PathBuf,
    /// Correct-match ratios of method B, same pair order.
    #[arg(long)]
    b: PathBuf,
    /// Threshold a method must exceed to count as correct on a pair.
    #[arg(long, default_value_t = 0.75)]
    tau: f64,
    /// Histogram output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum FeaturesCommand {
    /// Compute an image's feature pyramid and write it as XFM1.
    Export {
        /// Input image (PPM/PGM/PNG).
        #[arg(long)]
        image: PathBuf,
        /// Output XFM1 file.
        #[arg(long)]
        out: PathBuf,
        /// Long side, in pixels, the image is resized to first.
        #[arg(long, default_value_t = matcher::DEFAULT_RESOLUTION, value_parser = parse_resolution)]
        resolution: u32,
    },
    /// Validate an XFM1 file and print its shape.
    Import {
        /// XFM1 file to read.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Debug)]
struct Thresholds(Vec<f64>);

fn parse_resolution(s: &str) -> Result<u32, String> {
    let v: u32 = s.parse().map_err(|e| format!("{e}"))?;
    if v < MIN_LONG_SIDE {
        return Err(format!("resolution below minimum ({v} < {MIN_LONG_SIDE})"));
    }
    Ok(v)
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    let values: Vec<f64> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u32 = b.trim().parse().map_err(|e| format!("{e}"))?;
        (a..=b).map(f64::from).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() || values.windows(2).any(|w| w[1] <= w[0]) || values[0] <= 0.0 {
        return Err("thresholds must be positive and ascending".into());
    }
    Ok(Thresholds(values))
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let x: f64 = x.trim().parse().map_err(|e| format!("{e}"))?;
    let y: f64 = y.trim().parse().map_err(|e| format!("{e}"))?;
    if !x.is_finite() || !y.is_finite() {
        return Err("coordinates must be finite".into());
    }
    Ok((x, y))
}

type Failure = Box<dyn std::error::Error>;

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn is_xfm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xfm"))
}

/// Pyramid, scale back to reported coordinates, and reported image size.
fn load_input(
    path: &Path,
    res: ResizeSpec,
) -> Result<(FeaturePyramid, Scale, (u32, u32)), Failure> {
    if is_xfm(path) {
        let pyr = read_features(path)?;
        let dims = (pyr.width, pyr.height);
        Ok((pyr, Scale::IDENTITY, dims))
    } else {
        let img = load_image(path)?;
        let (pyr, scale) = prepare(&img, res)?;
        Ok((pyr, scale, (img.width, img.height)))
    }
}

fn cmd_match(args: &MatchArgs, cfg: &PipelineConfig) -> Result<(), Failure> {
    let (src, src_scale, src_dims) = load_input(&args.src, cfg.resolution)?;
    let (tgt, tgt_scale, tgt_dims) = load_input(&args.tgt, cfg.resolution)?;
    let matches =
        matcher::match_pyramids(&src, &tgt, cfg, src_scale, tgt_scale, src_dims, tgt_dims)?;
    write_output(args.out.as_deref(), &matches.to_tsv())
}

fn cmd_eval(args: &EvalArgs, cfg: &PipelineConfig) -> Result<(), Failure> {
    let pairs = eval::load_dataset(&args.dataset)?;
    let report = eval::evaluate_pairs(&pairs, cfg, &args.thresholds.0)?;
    match &args.out {
        Some(p) => {
            write_output(Some(p), &report.mma_csv())?;
            print!("{}", report.summary());
        }
        None => print!("{}{}", report.mma_csv(), report.summary()),
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, cfg: &PipelineConfig) -> Result<(), Failure> {
    let pairs = eval::load_dataset(&args.dataset)?;
    let table = eval::resolution_sweep(&pairs, &args.resolutions, cfg, &args.thresholds.0)?;
    write_output(args.out.as_deref(), &table.to_csv())
}

fn cmd_heatmap(args: &HeatmapArgs, cfg: &PipelineConfig) -> Result<(), Failure> {
    let (src, src_scale, _) = load_input(&args.src, cfg.resolution)?;
    let query = src_scale.to_resized(args.query);
    let map = match args.stage {
        HeatStage::Gt => {
            let h_path = args
                .homography
                .as_ref()
                .ok_or("--stage gt requires --homography")?;
            let h = eval::Homography::load(h_path)?;
            let (tgt, tgt_scale, _) = load_input(&args.tgt, cfg.resolution)?;
            let kp = tgt_scale.to_resized(eval::apply_homography(&h, args.query)?);
            keypoint_to_pdf(kp, tgt.fine.geometry())?.to_map()
        }
        stage => {
            let (tgt, _, _) = load_input(&args.tgt, cfg.resolution)?;
            let stage = match stage {
                HeatStage::Raw => Stage::Raw,
                HeatStage::Mm1 => Stage::Mm1,
                HeatStage::Mm2 => Stage::Mm2,
                _ => Stage::Fine,
            };
            stage_map(&src, &tgt, query, stage, cfg)?
        }
    };
    export_heatmap(&map, &args.out)?;
    Ok(())
}

fn cmd_bias(args: &BiasArgs) -> Result<(), Failure> {
    let a = eval::read_ratios(&args.a)?;
    let b = eval::read_ratios(&args.b)?;
    let hist = eval::bias_histogram(&a, &b, args.tau)?;
    write_output(args.out.as_deref(), &hist.to_text())
}

fn cmd_features(cmd: &FeaturesCommand) -> Result<(), Failure> {
    match cmd {
        FeaturesCommand::Export {
            image,
            out,
            resolution,
        } => {
            let img = load_image(image)?;
            let (pyr, _) = prepare(&img, ResizeSpec::new(*resolution)?)?;
            write_features(&pyr, out)?;
        }
        FeaturesCommand::Import { input } => {
            let pyr = read_features(input)?;
            println!("image {}x{}", pyr.width, pyr.height);
            for (name, m) in [("fine", &pyr.fine), ("coarse", &pyr.coarse)] {
                println!(
                    "{name} {}x{} stride {} channels {}",
                    m.grid_w, m.grid_h, m.stride, m.channels
                );
            }
        }
    }
    Ok(())
}

/// Pipeline flags that parse individually but conflict are usage errors.
fn with_cfg(p: &PipelineArgs) -> PipelineConfig {
    p.config()
        .unwrap_or_else(|e| Cli::command().error(ErrorKind::ValueValidation, e).exit())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Match(a) => cmd_match(a, &with_cfg(&a.pipeline)),
        Command::Eval(a) => cmd_eval(a, &with_cfg(&a.pipeline)),
        Command::Sweep(a) => cmd_sweep(a, &with_cfg(&a.pipeline)),
        Command::Heatmap(a) => cmd_heatmap(a, &with_cfg(&a.pipeline)),
        Command::Bias(a) => cmd_bias(a),
        Command::Features(c) => cmd_features(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
