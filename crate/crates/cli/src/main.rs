use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use celltile::detector::filter_by_confidence;
use celltile::detector::protocol::AnnotationServer;
use celltile::metrics::{evaluate, format_table, per_tissue_report, sweep_threshold, MatchMethod};
use celltile::pipeline::{layout, read_detections, run_bench, run_slide, write_detections, BackendKind, BenchJob, OutputFormat, PipelineConfig};
use celltile::slide_io::{SyntheticSlide, SyntheticSlideSpec};
use celltile::{AnnotationSet, Error, SlideSource};

#[derive(Parser, Debug)]
#[command(name = "celltile", version, about = "Whole-slide nuclei detection pipeline")]
struct Cli {
    /// TOML configuration; command-line flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic slide and its annotations.
    Synth(SynthArgs),
    /// Tissue mask PNG and coverage statistics.
    Mask(MaskArgs),
    /// Tile grid as JSON.
    Tiles(TilesArgs),
    /// Run the full pipeline on one slide.
    Detect(DetectArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Pick the confidence threshold that balances detection and classification.
    SweepThreshold(SweepArgs),
    /// Time the pipeline over several slides and fit time against area.
    Bench(BenchArgs),
    /// Adapter that answers from annotations, for testing the protocol.
    #[command(hide = true)]
    AdapterStub(StubArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 4096)]
    width: u32,
    #[arg(long, default_value_t = 4096)]
    height: u32,
    #[arg(long, default_value_t = 5000)]
    nuclei: usize,
    #[arg(long, default_value_t = 0.25)]
    mpp: f64,
    #[arg(long, default_value_t = 8.0)]
    min_diameter: f64,
    #[arg(long, default_value_t = 20.0)]
    max_diameter: f64,
    /// Tissue tag stamped on every nucleus.
    #[arg(long)]
    tissue: Option<String>,
    /// Slide path, `.tif` for a pyramid or `.png`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SlideArgs {
    slide: PathBuf,
    /// Microns per pixel when the slide does not record it.
    #[arg(long)]
    mpp: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct GridFlags {
    #[arg(long)]
    tile_size: Option<u32>,
    /// Overlap of both tiles and windows.
    #[arg(long)]
    overlap: Option<u32>,
    #[arg(long)]
    mpp_target: Option<f64>,
    #[arg(long)]
    min_tissue_fraction: Option<f64>,
    #[arg(long)]
    thumbnail_max_dim: Option<u32>,
}

impl GridFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.tile_size, self.tile_size);
        if let Some(o) = self.overlap {
            cfg.tile_overlap = o;
            cfg.window_overlap = o;
        }
        if self.mpp_target.is_some() {
            cfg.mpp_target = self.mpp_target;
        }
        set(&mut cfg.min_tissue_fraction, self.min_tissue_fraction);
        set(&mut cfg.thumbnail_max_dim, self.thumbnail_max_dim);
    }
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[command(flatten)]
    slide: SlideArgs,
    #[command(flatten)]
    grid: GridFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TilesArgs {
    #[command(flatten)]
    slide: SlideArgs,
    #[command(flatten)]
    grid: GridFlags,
    /// Written to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Oracle,
    Jitter,
    External,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    #[command(flatten)]
    grid: GridFlags,
    #[arg(long)]
    window_size: Option<u32>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Ground truth for the oracle and jitter backends.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    /// Adapter program and arguments for the external backend.
    #[arg(last = true)]
    adapter: Vec<String>,
}

impl RunFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        self.grid.apply(cfg);
        set(&mut cfg.window_size, self.window_size);
        set(&mut cfg.worker_count, self.workers);
        set(&mut cfg.batch_size, self.batch_size);
        if let Some(b) = self.backend {
            cfg.detector.backend = match b {
                BackendArg::Oracle => BackendKind::Oracle,
                BackendArg::Jitter => BackendKind::Jitter,
                BackendArg::External => BackendKind::External,
            };
        }
        if self.annotations.is_some() {
            cfg.detector.annotations = self.annotations.clone();
        }
        set(&mut cfg.detector.confidence_threshold, self.confidence_threshold);
        if !self.adapter.is_empty() {
            cfg.detector.command = self.adapter.clone();
        }
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    slide: SlideArgs,
    #[command(flatten)]
    run: RunFlags,
    /// Detections; the format follows the extension unless `--format` is given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Window index sidecar; defaults to `<out>.windows.jsonl` for external adapters.
    #[arg(long)]
    window_index: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreInputs {
    /// Predicted detections (JSONL, CSV or GeoJSON).
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Microns per pixel; taken from the annotations when absent.
    #[arg(long)]
    mpp: Option<f64>,
    #[arg(long)]
    radius_um: Option<f64>,
    /// Greedy nearest-first matching instead of optimal.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: ScoreInputs,
    /// Drop predictions scoring below this first.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also report each tissue type.
    #[arg(long)]
    per_tissue: bool,
    /// Write the JSON report here and print the table to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    inputs: ScoreInputs,
    /// Threshold step; the grid runs from 0 to 1 inclusive.
    #[arg(long, default_value_t = 0.05, conflicts_with = "grid")]
    step: f64,
    /// Explicit comma-separated thresholds.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Slides to time; each needs an annotation file for the oracle and jitter backends.
    slides: Vec<PathBuf>,
    /// Annotation files in slide order; `<slide>.jsonl` next to each slide otherwise.
    #[arg(long = "slide-annotations", value_delimiter = ',')]
    slide_annotations: Vec<PathBuf>,
    /// Square synthetic slides of these side lengths, generated in memory.
    #[arg(long, value_delimiter = ',')]
    synthetic: Vec<u32>,
    /// Nuclei per megapixel on synthetic slides.
    #[arg(long, default_value_t = 300.0)]
    density: f64,
    #[arg(long)]
    mpp: Option<f64>,
    #[command(flatten)]
    run: RunFlags,
    /// Per-slide timings.
    #[arg(long)]
    out: PathBuf,
    /// Line fits as JSON; stdout when absent.
    #[arg(long)]
    fit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StubArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    #[arg(long, default_value_t = 16)]
    max_batch: usize,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(cli: &Cli) -> celltile::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_toml_file(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.rng_seed, cli.seed);
    Ok(cfg)
}

fn open_slide(args: &SlideArgs) -> celltile::Result<SlideSource> {
    SlideSource::open(&args.slide, args.mpp)
}

fn write_text(path: &Path, text: &str) -> celltile::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_stdout(text: &str) -> celltile::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(cli: &Cli, a: &SynthArgs) -> celltile::Result<()> {
    let cfg = load_config(cli)?;
    let mut spec = SyntheticSlideSpec::new(a.width, a.height, a.nuclei, cfg.rng_seed);
    spec.mpp = a.mpp;
    spec.nucleus_diameter_range = (a.min_diameter, a.max_diameter);
    spec.tissue = a.tissue.clone();
    spec.class_weights = vec![1.0 / cfg.detector.class_names.len() as f64; cfg.detector.class_names.len()];
    let slide = SyntheticSlide::generate(&spec)?;
    slide.write(&a.out, &a.annotations, a.mpp)?;
    print_stdout(&format!(
        "{}\n",
        json!({"slide": a.out, "annotations": a.annotations, "nuclei": slide.annotations.len(), "seed": cfg.rng_seed})
    ))
}

fn mask(cli: &Cli, a: &MaskArgs) -> celltile::Result<()> {
    let mut cfg = load_config(cli)?;
    a.grid.apply(&mut cfg);
    let slide = open_slide(&a.slide)?;
    let l = layout(&cfg, &slide)?;
    l.mask.to_image().write_png(&a.out)?;
    print_stdout(&format!(
        "{}\n",
        json!({
            "mask_width": l.mask.width,
            "mask_height": l.mask.height,
            "scale": l.mask.scale,
            "coverage": l.mask.coverage(),
            "tissue_area_mm2": l.tissue_area_mm2,
            "tiles": l.grid.len(),
        })
    ))
}

fn tiles(cli: &Cli, a: &TilesArgs) -> celltile::Result<()> {
    let mut cfg = load_config(cli)?;
    a.grid.apply(&mut cfg);
    let slide = open_slide(&a.slide)?;
    let text = layout(&cfg, &slide)?.grid.to_json()? + "\n";
    match &a.out {
        Some(p) => write_text(p, &text),
        None => print_stdout(&text),
    }
}

fn detect(cli: &Cli, a: &DetectArgs) -> celltile::Result<()> {
    let mut cfg = load_config(cli)?;
    a.run.apply(&mut cfg);
    if a.out.is_some() {
        cfg.output.detections = a.out.clone();
    }
    if a.format.is_some() {
        cfg.output.format = a.format;
    }
    if a.manifest.is_some() {
        cfg.output.manifest = a.manifest.clone();
    }
    if a.window_index.is_some() {
        cfg.output.window_index = a.window_index.clone();
    }
    let out = cfg
        .output
        .detections
        .clone()
        .ok_or_else(|| Error::Config("no output path: pass --out or set output.detections".into()))?;
    let format = match cfg.output.format {
        Some(f) => f,
        None => OutputFormat::from_path(&out)?,
    };
    if cfg.detector.backend == BackendKind::External && cfg.output.window_index.is_none() {
        cfg.output.window_index = Some(with_suffix(&out, ".windows.jsonl"));
    }
    let manifest = cfg.output.manifest.clone().unwrap_or_else(|| with_suffix(&out, ".manifest.json"));
    cfg.validate()?;

    let slide = open_slide(&a.slide)?;
    let factory = cfg.backend_factory(slide.dims(), slide.mpp())?;
    let names = cfg.detector.class_names.clone();
    match run_slide(&cfg, &slide, factory.as_ref()) {
        Ok(run) => {
            write_detections(&out, &run.detections, format, &names)?;
            run.manifest.write(&manifest)?;
            print_stdout(&format!(
                "{}\n",
                json!({"detections": run.detections.len(), "output": out, "manifest": manifest, "timing": run.timing})
            ))
        }
        Err(failed) => {
            let ext = out.extension().map_or("jsonl".into(), |e| e.to_string_lossy().into_owned());
            let partial = out.with_extension(format!("partial.{ext}"));
            log::error!(
                "run failed after {} tiles; writing {} partial detections to {}",
                failed.tiles_done,
                failed.partial.len(),
                partial.display()
            );
            write_detections(&partial, &failed.partial, format, &names)?;
            Err(failed.error)
        }
    }
}

fn score_setup(cli: &Cli, a: &ScoreInputs) -> celltile::Result<(PipelineConfig, AnnotationSet, Vec<celltile::Detection>, f64)> {
    let mut cfg = load_config(cli)?;
    set(&mut cfg.eval.radius_um, a.radius_um);
    if a.greedy {
        cfg.eval.method = MatchMethod::Greedy;
    }
    let gt = AnnotationSet::read_jsonl(&a.annotations)?;
    let preds = read_detections(&a.predictions)?;
    let mpp = a.mpp.or(gt.mpp).ok_or_else(|| {
        Error::Config(format!("{} does not record its resolution; pass --mpp", a.annotations.display()))
    })?;
    Ok((cfg, gt, preds, mpp))
}

fn eval(cli: &Cli, a: &EvalArgs) -> celltile::Result<()> {
    let (cfg, gt, mut preds, mpp) = score_setup(cli, &a.inputs)?;
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        preds = filter_by_confidence(&preds, t);
    }
    let mut report = evaluate(&gt, &preds, mpp, &cfg.eval)?;
    report.threshold = a.threshold;
    if a.per_tissue {
        report.per_tissue = per_tissue_report(&gt, &preds, mpp, &cfg.eval)?;
    }
    let mut table = format_table("All", &report);
    for (tissue, r) in &report.per_tissue {
        table.push('\n');
        table.push_str(&format_table(tissue, r));
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            print_stdout(&table)
        }
        None => {
            eprint!("{table}");
            print_stdout(&text)
        }
    }
}

fn sweep(cli: &Cli, a: &SweepArgs) -> celltile::Result<()> {
    let (cfg, gt, preds, mpp) = score_setup(cli, &a.inputs)?;
    let grid = match &a.grid {
        Some(g) => g.clone(),
        None => {
            if !(a.step > 0.0 && a.step <= 1.0) {
                return Err(Error::Config(format!("step {} outside (0, 1]", a.step)));
            }
            let n = (1.0 / a.step).round() as usize;
            (0..=n).map(|i| (i as f64 * a.step).min(1.0)).collect()
        }
    };
    let result = sweep_threshold(&preds, &gt, mpp, &cfg.eval, &grid)?;
    if result.all_zero {
        log::warn!("score is zero at every threshold");
    }
    let text = serde_json::to_string_pretty(&result)? + "\n";
    match &a.out {
        Some(p) => write_text(p, &text),
        None => print_stdout(&text),
    }
}

fn bench(cli: &Cli, a: &BenchArgs) -> celltile::Result<()> {
    let mut cfg = load_config(cli)?;
    a.run.apply(&mut cfg);
    cfg.validate()?;
    if !a.slide_annotations.is_empty() && a.slide_annotations.len() != a.slides.len() {
        return Err(Error::Config(format!(
            "{} annotation files for {} slides",
            a.slide_annotations.len(),
            a.slides.len()
        )));
    }
    let mut jobs = Vec::new();
    for (i, path) in a.slides.iter().enumerate() {
        let slide = SlideSource::open(path, a.mpp)?;
        let mut slide_cfg = cfg.clone();
        if slide_cfg.detector.backend != BackendKind::External {
            slide_cfg.detector.annotations = Some(a.slide_annotations.get(i).cloned().unwrap_or_else(|| path.with_extension("jsonl")));
        }
        jobs.push(BenchJob {
            name: path.display().to_string(),
            factory: slide_cfg.backend_factory(slide.dims(), slide.mpp())?,
            slide,
        });
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    for (i, &side) in a.synthetic.iter().enumerate() {
        let count = (a.density * side as f64 * side as f64 / 1e6).round() as usize;
        let mut spec = SyntheticSlideSpec::new(side, side, count, cfg.rng_seed.wrapping_add(i as u64));
        spec.mpp = a.mpp.unwrap_or(spec.mpp);
        let s = SyntheticSlide::generate(&spec)?;
        let ann = dir.path().join(format!("synthetic-{i}.jsonl"));
        s.annotations.write_jsonl(&ann)?;
        let slide = SlideSource::from_raster(s.image, spec.mpp)?;
        let mut slide_cfg = cfg.clone();
        if slide_cfg.detector.backend != BackendKind::External {
            slide_cfg.detector.annotations = Some(ann);
        }
        jobs.push(BenchJob {
            name: format!("synthetic-{side}"),
            factory: slide_cfg.backend_factory(slide.dims(), slide.mpp())?,
            slide,
        });
    }
    if jobs.is_empty() {
        return Err(Error::Config("bench needs slides or --synthetic sizes".into()));
    }
    let report = run_bench(&cfg, &jobs).map_err(|e| e.error)?;
    report.write_csv(&a.out)?;
    let fits = serde_json::to_string_pretty(&json!({
        "total": report.fit_total,
        "inference": report.fit_inference,
        "postprocess": report.fit_postprocess,
    }))? + "\n";
    match &a.fit {
        Some(p) => write_text(p, &fits),
        None => print_stdout(&fits),
    }
}

fn adapter_stub(a: &StubArgs) -> celltile::Result<()> {
    let ann = AnnotationSet::read_jsonl(&a.annotations)?;
    let server = AnnotationServer::new(&ann, a.max_batch).with_latency(Duration::from_millis(a.latency_ms));
    server.serve(std::io::stdin().lock(), std::io::stdout().lock())
}

fn run(cli: &Cli) -> celltile::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Mask(a) => mask(cli, a),
        Command::Tiles(a) => tiles(cli, a),
        Command::Detect(a) => detect(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::SweepThreshold(a) => sweep(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::AdapterStub(a) => adapter_stub(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
