use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lens_core::colorcorrect::{
    build_similarity_field, cache_path, correct_image, ColorCorrectError, SimilarityField, DEFAULT_BINS,
};
use lens_core::datasetgen::{export_instruction_records, generate_split, read_manifest, DatasetError, SplitConfig};
use lens_core::exams::{
    run_color_exam, run_numeric_probe, run_patch_map, run_readiness, run_shape_exam, ExamError, ExamSettings,
    NumericMode, PatchMapSpec, ShapeSweep,
};
use lens_core::field::{write_atomic, Domain, FieldError, ScoreMap, SensitivityField, WheelGrid};
use lens_core::metrics::half_score_points;
use lens_core::modelclient::{
    ClientError, Embedder, HttpClient, HttpClientConfig, MockOracle, MockOracleSpec, PixelMeanEmbedder, Scorer,
    ENDPOINT_ENV,
};
use lens_core::questionbank::{QuestionBank, QuestionError};
use lens_core::report::{emit_report, render_curve, render_scoremap, render_wheel, ReportError, WheelStyle};
use lens_core::runner::{RunError, RunOptions};
use lens_core::{ColorSpec, Parallelism};

const EXIT_CONFIG: u8 = 2;
const EXIT_ENDPOINT: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

/// Eye examinations for vision-language models.
#[derive(Parser, Debug)]
#[command(name = "lens", version)]
struct Cli {
    /// Master seed for stimulus generation and tie-breaking [default: 0,
    /// or the config's seed for `gen`].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model endpoint URL, or `mock:<spec>` (perfect, uniform, color_distance:<tau>,
    /// shape_distance:<tau>, background_bias:<beta>).
    #[arg(long, global = true, env = ENDPOINT_ENV)]
    endpoint: Option<String>,
    /// Output directory (for `correct`, a file path is also accepted).
    #[arg(long, global = true, default_value = "lens-out")]
    out: PathBuf,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Maximum concurrent requests to the endpoint.
    #[arg(long, global = true, default_value_t = 16)]
    max_in_flight: usize,
    /// Replacement question-template file.
    #[arg(long, global = true)]
    questions: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate dataset splits and their manifests.
    Gen(GenArgs),
    /// Score a manifest's questions and report per-cell accuracy.
    Readiness(ReadinessArgs),
    /// Run an examination.
    Exam {
        #[command(subcommand)]
        exam: Exam,
    },
    /// Build reference-color similarity fields from encoder embeddings.
    Fields(FieldsArgs),
    /// Re-render an image through the red, green and blue similarity fields.
    Correct(CorrectArgs),
    /// Summarize examination artifacts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// TOML split configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Splits to generate; every configured split when omitted.
    #[arg(long)]
    split: Vec<String>,
    /// Also write `instructions.json` conversation records per split.
    #[arg(long)]
    instructions: bool,
}

#[derive(Args, Debug)]
struct ReadinessArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Exam {
    /// Color sensitivity over the HSV wheel.
    Color {
        /// Reference colors as r,g,b, #rrggbb or a primary name.
        #[arg(long = "reference", default_values = ["red", "green", "blue"])]
        references: Vec<ColorSpec>,
        #[arg(long, default_value_t = 100)]
        radial: usize,
        #[arg(long, default_value_t = 500)]
        angular: usize,
        #[arg(long, default_value_t = 1.0)]
        value: f64,
        /// Also write wheel heatmaps.
        #[arg(long)]
        render: bool,
    },
    /// Shape sensitivity along eccentricity, polygon and size sweeps.
    Shape {
        #[arg(long = "sweep", value_enum, default_values = ["eccentricity", "polygon", "size"])]
        sweeps: Vec<SweepArg>,
        #[arg(long)]
        render: bool,
    },
    /// Sliding-window semantic score map.
    Semantic {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        patch: u32,
        #[arg(long)]
        stride: u32,
        /// Side both the reference and each window are resized to.
        #[arg(long = "box", default_value_t = 224)]
        box_size: u32,
        #[arg(long)]
        render: bool,
    },
    /// Text-only numeric comparison probe.
    Probe {
        #[arg(long = "mode", value_enum, default_values = ["real", "integer"])]
        modes: Vec<ModeArg>,
        #[arg(long)]
        render: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SweepArg {
    Eccentricity,
    Polygon,
    Size,
}

impl From<SweepArg> for ShapeSweep {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::Eccentricity => ShapeSweep::Eccentricity,
            SweepArg::Polygon => ShapeSweep::Polygon,
            SweepArg::Size => ShapeSweep::Size,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Real,
    Integer,
}

#[derive(Args, Debug)]
struct FieldsArgs {
    #[arg(long = "reference", default_values = ["red", "green", "blue"])]
    references: Vec<ColorSpec>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct CorrectArgs {
    #[arg(long)]
    image: PathBuf,
    /// Directory holding cached similarity fields.
    #[arg(long)]
    fields: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Artifact files or directories; the output directory when omitted.
    inputs: Vec<PathBuf>,
    /// Also render wheels, curves and score-map overlays.
    #[arg(long)]
    figures: bool,
}

enum Backend {
    Mock(MockOracleSpec),
    Http(HttpClient),
}

struct Ctx {
    cli: Cli,
    parallelism: Parallelism,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    fn bank(&self) -> Result<QuestionBank> {
        Ok(match &self.cli.questions {
            Some(p) => QuestionBank::load(p)?,
            None => QuestionBank::builtin().clone(),
        })
    }

    fn backend(&self) -> Result<Backend> {
        let endpoint = self.cli.endpoint.as_deref().ok_or_else(|| {
            anyhow!(Failure::Config(format!(
                "no endpoint: pass --endpoint or set {ENDPOINT_ENV}"
            )))
        })?;
        if endpoint.starts_with("mock:") {
            let spec = MockOracleSpec::parse(endpoint).map_err(|e| anyhow!(Failure::Config(e)))?;
            return Ok(Backend::Mock(spec));
        }
        let mut cfg = HttpClientConfig::new(endpoint);
        cfg.max_in_flight = self.cli.max_in_flight;
        Ok(Backend::Http(HttpClient::new(cfg)?))
    }

    fn scorer(&self) -> Result<Box<dyn Scorer>> {
        Ok(match self.backend()? {
            Backend::Mock(spec) => Box::new(MockOracle::new(spec, self.seed())),
            Backend::Http(c) => Box::new(c),
        })
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.backend()? {
            Backend::Mock(_) => Box::new(PixelMeanEmbedder::default()),
            Backend::Http(c) => Box::new(c),
        })
    }

    fn settings(&self, checkpoint: &str) -> ExamSettings {
        ExamSettings {
            run: RunOptions::default()
                .with_parallelism(self.parallelism)
                .with_checkpoint(self.cli.out.join(".checkpoints").join(format!("{checkpoint}.json"))),
            seed: self.seed(),
            ..Default::default()
        }
    }
}

/// Failures the CLI classifies itself; everything else is classified by type.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Endpoint(String),
    #[error("{0}")]
    Partial(String),
}

fn color_slug(c: ColorSpec) -> String {
    format!("{}-{}-{}", c.r, c.g, c.b)
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &lens_core::stimuli::encode_png(img)).with_context(|| format!("writing {}", path.display()))
}

fn save_field(field: &SensitivityField, path: &Path, render: bool) -> Result<()> {
    field.save(path)?;
    println!("{}", path.display());
    if render {
        let stem = path.with_extension("");
        match field.domain {
            Domain::Wheel { .. } => save_png(
                &render_wheel(field, &WheelStyle::default())?,
                &stem.with_extension("png"),
            )?,
            _ => {
                let plot = render_curve(field, &half_score_points(field)?)?;
                save_png(&plot.image, &stem.with_extension("png"))?;
                write_atomic(&stem.with_extension("csv"), plot.csv.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn cmd_gen(ctx: &Ctx, args: &GenArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => SplitConfig::load(p)?,
        None => SplitConfig::default(),
    };
    if let Some(seed) = ctx.cli.seed {
        cfg.seed = seed;
    }
    if cfg.questions.is_none() {
        cfg.questions = ctx.cli.questions.clone();
    }
    let splits: Vec<String> = if args.split.is_empty() {
        cfg.counts.keys().cloned().collect()
    } else {
        args.split.clone()
    };
    for split in &splits {
        let summary = generate_split(&cfg, split, &ctx.cli.out, ctx.parallelism)?;
        let dir = ctx.cli.out.join(split);
        write_atomic(
            &dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
        if args.instructions {
            let records = read_manifest(&summary.manifest)?;
            let text = serde_json::to_string(&export_instruction_records(&records))?;
            write_atomic(&dir.join("instructions.json"), text.as_bytes())?;
        }
        println!("{}\t{}\t{}", split, summary.total(), summary.manifest.display());
    }
    Ok(())
}

fn cmd_readiness(ctx: &Ctx, args: &ReadinessArgs) -> Result<()> {
    let records = read_manifest(&args.manifest)?;
    if records.is_empty() {
        bail!(Failure::Config(format!("{} holds no records", args.manifest.display())));
    }
    let root = args.manifest.parent().unwrap_or(Path::new("."));
    let settings = ctx.settings("readiness");
    let report = match ctx.backend()? {
        Backend::Mock(spec) => {
            let key: HashMap<String, String> = records.iter().map(|r| (r.id.clone(), r.answer.clone())).collect();
            let mock = MockOracle::new(spec, ctx.seed()).with_answer_key(key);
            run_readiness(&mock, &records, root, &settings)
        }
        Backend::Http(c) => run_readiness(&c, &records, root, &settings),
    };
    let path = ctx.cli.out.join("readiness.json");
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    for (cell, acc) in &report.cells {
        println!(
            "{cell}\t{:.1}\t{}/{}\tfailed {}",
            acc.accuracy, acc.correct, acc.scored, acc.failed
        );
    }
    println!("{}", path.display());
    let failed = report.total_failed();
    if failed == records.len() {
        return Err(anyhow!(Failure::Endpoint(format!(
            "every record failed; first error: {}",
            report.errors.first().map_or("", String::as_str)
        ))));
    }
    if failed > 0 {
        return Err(anyhow!(Failure::Partial(format!(
            "{failed} of {} records failed and were excluded",
            records.len()
        ))));
    }
    Ok(())
}

fn cmd_exam(ctx: &Ctx, exam: &Exam) -> Result<()> {
    let bank = ctx.bank()?;
    let scorer = ctx.scorer()?;
    let out = &ctx.cli.out;
    match exam {
        Exam::Color {
            references,
            radial,
            angular,
            value,
            render,
        } => {
            if *radial == 0 || *angular == 0 || !(0.0..=1.0).contains(value) {
                bail!(Failure::Config(format!(
                    "bad wheel grid {radial}x{angular} at value {value}"
                )));
            }
            let grid = WheelGrid {
                radial: *radial,
                angular: *angular,
                value: *value,
            };
            for &c in references {
                let name = format!("color-{}", color_slug(c));
                let field = run_color_exam(scorer.as_ref(), &bank, c, grid, &ctx.settings(&name))
                    .with_context(|| format!("color exam for {c}"))?;
                save_field(&field, &out.join(format!("{name}.json")), *render)?;
            }
        }
        Exam::Shape { sweeps, render } => {
            for &s in sweeps {
                let sweep = ShapeSweep::from(s);
                let name = format!("shape-{}", sweep.domain().name());
                let field = run_shape_exam(scorer.as_ref(), &bank, sweep, &ctx.settings(&name))
                    .with_context(|| format!("{} sweep", sweep.domain().name()))?;
                save_field(&field, &out.join(format!("{name}.json")), *render)?;
            }
        }
        Exam::Semantic {
            reference,
            target,
            patch,
            stride,
            box_size,
            render,
        } => {
            let open = |p: &PathBuf| -> Result<image::RgbImage> {
                Ok(image::open(p)
                    .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
                    .to_rgb8())
            };
            let (ref_img, target_img) = (open(reference)?, open(target)?);
            let spec = PatchMapSpec {
                patch: *patch,
                stride: *stride,
                box_size: *box_size,
                reference_name: reference.display().to_string(),
                target_name: target.display().to_string(),
            };
            let stem = target.file_stem().and_then(|s| s.to_str()).unwrap_or("target");
            let name = format!("scoremap-{stem}-p{patch}-s{stride}");
            let map = run_patch_map(
                scorer.as_ref(),
                &bank,
                &ref_img,
                &target_img,
                &spec,
                &ctx.settings(&name),
            )?;
            let path = out.join(format!("{name}.json"));
            map.save(&path)?;
            println!("{}", path.display());
            if *render {
                save_png(
                    &render_scoremap(&map, &target_img, 0.6)?.image,
                    &path.with_extension("png"),
                )?;
            }
        }
        Exam::Probe { modes, render } => {
            for &m in modes {
                let mode = match m {
                    ModeArg::Real => NumericMode::Real,
                    ModeArg::Integer => NumericMode::Integer,
                };
                let name = format!("probe-{}", mode.domain().name());
                let field = run_numeric_probe(scorer.as_ref(), mode, &ctx.settings(&name))?;
                save_field(&field, &out.join(format!("{name}.json")), *render)?;
            }
        }
    }
    Ok(())
}

fn cmd_fields(ctx: &Ctx, args: &FieldsArgs) -> Result<()> {
    let embedder = ctx.embedder()?;
    let model = embedder.model_id();
    for &c in &args.references {
        let path = cache_path(&ctx.cli.out, &model, args.bins, c);
        if path.exists() && SimilarityField::load(&path).is_ok() {
            log::info!("cached: {}", path.display());
        } else {
            let opts = ctx.settings(&format!("fields-{}", color_slug(c))).run;
            let field = build_similarity_field(embedder.as_ref(), c, args.bins, &opts)?;
            if field.degenerate {
                log::warn!("similarity field for {c} is constant");
            }
            field.save(&path)?;
        }
        println!("{}", path.display());
    }
    Ok(())
}

/// Finds `<r>-<g>-<b>.json` for a bin count anywhere under `dir`.
fn find_field(dir: &Path, bins: usize, c: ColorSpec) -> Result<Vec<PathBuf>> {
    let want = format!("{}.json", color_slug(c));
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == want.as_str())
                && p.parent()
                    .and_then(|q| q.file_name())
                    .is_some_and(|n| n == format!("bins{bins}").as_str())
            {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn cmd_correct(ctx: &Ctx, args: &CorrectArgs) -> Result<()> {
    let img = image::open(&args.image)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.image.display())))?
        .to_rgb8();
    let mut fields = Vec::new();
    for c in [ColorSpec::RED, ColorSpec::GREEN, ColorSpec::BLUE] {
        let field = if ctx.cli.endpoint.is_some() {
            let embedder = ctx.embedder()?;
            let path = cache_path(&args.fields, &embedder.model_id(), args.bins, c);
            match SimilarityField::load(&path) {
                Ok(f) => f,
                Err(_) => {
                    let opts = ctx.settings(&format!("fields-{}", color_slug(c))).run;
                    let f = build_similarity_field(embedder.as_ref(), c, args.bins, &opts)?;
                    f.save(&path)?;
                    f
                }
            }
        } else {
            match find_field(&args.fields, args.bins, c)?.as_slice() {
                [one] => SimilarityField::load(one)?,
                [] => bail!(Failure::Config(format!(
                    "no {}-bin field for {c} under {}; run `lens fields` or pass --endpoint",
                    args.bins,
                    args.fields.display()
                ))),
                many => bail!(Failure::Config(format!(
                    "{} candidate fields for {c}; pass --endpoint to select the model",
                    many.len()
                ))),
            }
        };
        fields.push(field);
    }
    let out = correct_image(&img, [&fields[0], &fields[1], &fields[2]], ctx.parallelism)?;
    let path = if ctx.cli.out.extension().is_some() {
        ctx.cli.out.clone()
    } else {
        let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        ctx.cli.out.join(format!("{stem}-corrected.png"))
    };
    save_png(&out, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_report(ctx: &Ctx, args: &ReportArgs) -> Result<()> {
    let inputs = if args.inputs.is_empty() {
        vec![ctx.cli.out.clone()]
    } else {
        args.inputs.clone()
    };
    let dir = ctx.cli.out.join("report");
    let report = emit_report(&inputs, &dir)?;
    for missing in &report.missing {
        log::warn!("missing or unreadable artifact: {missing}");
    }
    if args.figures {
        let figures = dir.join("figures");
        for model in report.models.values() {
            let fields = model
                .sac
                .values()
                .map(|e| &e.artifact)
                .chain(model.sas.values().map(|e| &e.artifact));
            for artifact in fields {
                let path = Path::new(artifact);
                let field = SensitivityField::load(path)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("field");
                save_field(&field, &figures.join(format!("{stem}.json")), true)?;
            }
            for artifact in &model.scoremaps {
                let map = ScoreMap::load(Path::new(artifact))?;
                match image::open(&map.target_image) {
                    Ok(t) => {
                        let stem = Path::new(artifact)
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .unwrap_or("scoremap");
                        save_png(
                            &render_scoremap(&map, &t.to_rgb8(), 0.6)?.image,
                            &figures.join(format!("{stem}.png")),
                        )?;
                    }
                    Err(e) => log::warn!("no overlay for {artifact}: {}: {e}", map.target_image),
                }
            }
        }
    }
    println!("{}", dir.join("summary.json").display());
    print!("{}", report.digest());
    Ok(())
}

// Nothing persisted means the endpoint never answered; there is nothing to resume.
fn cell_failure_code(e: &RunError) -> u8 {
    if e.completed() == 0 {
        EXIT_ENDPOINT
    } else {
        EXIT_PARTIAL
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::Endpoint(_) => EXIT_ENDPOINT,
                Failure::Partial(_) => EXIT_PARTIAL,
            };
        }
        if cause.is::<ClientError>() {
            return EXIT_ENDPOINT;
        }
        if cause.is::<DatasetError>()
            || cause.is::<QuestionError>()
            || cause.is::<FieldError>()
            || cause.is::<ReportError>()
        {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<ExamError>() {
            return match e {
                ExamError::Run(e @ RunError::Cell { .. }) => cell_failure_code(e),
                _ => EXIT_CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<RunError>() {
            return match e {
                RunError::Cell { .. } => cell_failure_code(e),
                RunError::Checkpoint { .. } => EXIT_CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<ColorCorrectError>() {
            return match e {
                ColorCorrectError::Reference(_) => EXIT_ENDPOINT,
                ColorCorrectError::Bin { .. } => EXIT_PARTIAL,
                ColorCorrectError::Run(e @ RunError::Cell { .. }) => cell_failure_code(e),
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

fn run(cli: Cli) -> Result<()> {
    let parallelism = Parallelism::from_workers(cli.workers);
    if cli.workers > 1 && !parallelism.is_parallel() {
        log::warn!("built without the parallel feature; running sequentially");
    }
    let ctx = Ctx { cli, parallelism };
    std::fs::create_dir_all(if ctx.cli.out.extension().is_some() {
        ctx.cli.out.parent().unwrap_or(Path::new("."))
    } else {
        &ctx.cli.out
    })
    .with_context(|| format!("creating {}", ctx.cli.out.display()))
    .map_err(|e| anyhow!(Failure::Config(format!("{e:#}"))))?;
    match &ctx.cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Readiness(a) => cmd_readiness(&ctx, a),
        Command::Exam { exam } => cmd_exam(&ctx, exam),
        Command::Fields(a) => cmd_fields(&ctx, a),
        Command::Correct(a) => cmd_correct(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if code == EXIT_PARTIAL {
                eprintln!("rerun the same command to resume from the checkpoint");
            }
            ExitCode::from(code)
        }
    }
}
