//! Subcommand bodies. Each returns a [`CliResult`]; `run_cli` maps errors to
//! exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stealthpatch_core::dataset::{self, Recipe};
use stealthpatch_core::evaluation::{checkerboard_patch, evaluate_image, AttackReport};
use stealthpatch_core::figures;
use stealthpatch_core::generator::{self, config_hash, GeneratorStack};
use stealthpatch_core::imaging::{self, apply_patch, ImageTensor, Sidecar};
use stealthpatch_core::saliency::saliency_map;
use stealthpatch_core::sensitivity::{compute_attention, select_location};
use stealthpatch_core::trainer::{self, ScaleLog, TrainObserver, TrainPlan};
use stealthpatch_core::victim::{Arch, Classifier, ConvNet};
use stealthpatch_core::{NoiseMode, PatchRegion};
use stealthpatch_tensor::nn::Module;

use crate::config::{open_registry, parse_dims, EvalFlags, RunConfig, TrainFlags};
use crate::error::{io_err, CliError, CliResult, EXIT_OK, EXIT_VALIDATION};
use crate::manifest::{run_id, sha256_hex, InputRecord, ModelRecord, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "stealthpatch", version, about = "Single-image multi-scale adversarial patches")]
pub struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Select a location and train the generator stack for one image.
    Train(TrainArgs),
    /// Sample patches and composites from a trained run.
    Generate(GenerateArgs),
    /// Success rates, transfer, conspicuousness and the PGD comparison.
    Evaluate(EvaluateArgs),
    /// Train, generate and evaluate in one go.
    Run(RunArgs),
    /// Attention map and selected region for an image, without training.
    Attention(AttentionArgs),
    /// Summarize a run directory.
    Report(ReportArgs),
    /// Train a desk-scale victim classifier and add it to a registry.
    TrainVictim(TrainVictimArgs),
    /// Export synthetic shape images as PNGs with labels.
    MakeData(MakeDataArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Print the resolved config and plan, then exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Seed of the first sample; sample j uses seed + j.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Patches written by the generate stage.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims, default_value = "8x8")]
    pub patch: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Print the full report JSON instead of the summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct TrainVictimArgs {
    /// `convnet-a` or `widenet-b`.
    #[arg(long)]
    pub arch: String,
    /// Registry id; defaults to the architecture name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Training images (directory from `make-data`); synthetic when absent.
    #[arg(long, requires = "test_data")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    /// Minimum test accuracy; lower fails the command.
    #[arg(long, default_value_t = 0.8)]
    pub floor: f64,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Index of the first image. Victims train on indices from 0, so the
    /// default stays clear of them.
    #[arg(long, default_value_t = 1_000_000)]
    pub start: u64,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
}

/// Parse `args` and run; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Validation("--jobs must be >= 1".into()));
        }
        stealthpatch_tensor::par::configure_threads(n).map_err(CliError::Runtime)?;
    }
    match cli.command {
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Generate(a) => generate(&a.run, a.count, a.seed),
        Command::Evaluate(a) => evaluate(&a.run, &a.eval),
        Command::Run(a) => {
            if train(&a.train)?.is_none() {
                return Ok(());
            }
            generate(&a.train.out, a.count, 0)?;
            evaluate(&a.train.out, &EvalFlags::default())
        }
        Command::Attention(a) => attention(&a),
        Command::Report(a) => report(&a.run, a.json),
        Command::TrainVictim(a) => train_victim(&a),
        Command::MakeData(a) => make_data(&a),
    }
}

/// Prints one line per finished scale to stderr.
struct Progress {
    scales: usize,
}

impl TrainObserver for Progress {
    fn scale_done(&mut self, _stack: &GeneratorStack, log: &ScaleLog) {
        let last = log.epoch_attack.last().copied().unwrap_or(f64::NAN);
        eprintln!(
            "scale {}/{}: {} critic and {} generator updates, final attack loss {last:.4}",
            log.scale + 1,
            self.scales,
            log.critic_updates,
            log.generator_updates
        );
    }
}

fn read_input(path: &Path) -> CliResult<(ImageTensor, InputRecord)> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Validation(format!("config key `image`: cannot read {}: {e}", path.display())))?;
    let x = imaging::load_image(path)?;
    let input = InputRecord {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
        dims: x.dims(),
    };
    Ok((x, input))
}

fn model_record(m: &dyn Classifier) -> ModelRecord {
    ModelRecord {
        id: m.id().to_string(),
        param_checksum: m.checksum(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_plan(run: &Path) -> CliResult<TrainPlan> {
    let path = run.join("plan.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_trained(run: &Path) -> CliResult<(RunManifest, ImageTensor, GeneratorStack)> {
    let m = RunManifest::load(run)?;
    let x = imaging::load_image(&run.join("input.png"))?;
    let stack = generator::load_stack(&run.join("checkpoint"))?;
    if !stack.is_complete() {
        return Err(CliError::Runtime(format!(
            "{}: training is incomplete; rerun `train` with the same --out to resume",
            run.display()
        )));
    }
    Ok((m, x, stack))
}

/// Returns `None` for a dry run.
pub fn train(a: &TrainArgs) -> CliResult<Option<RunManifest>> {
    let mut cfg = a.train.resolve()?;
    a.eval.apply(&mut cfg);
    cfg.validate()?;
    let given = cfg.require_image()?.to_path_buf();
    let image = fs::canonicalize(&given)
        .map_err(|e| CliError::Validation(format!("config key `image`: {}: {e}", given.display())))?;
    cfg.image = Some(image.clone());
    let model_id = cfg.require_model()?.to_string();
    let registry = open_registry(cfg.registry.as_deref())?;
    cfg.registry = Some(fs::canonicalize(registry.root()).map_err(|e| io_err(registry.root(), e))?);
    let model = registry.load(&model_id)?;
    let (x, input) = read_input(&image)?;
    let (plan, _) = trainer::plan(&x, &model, &cfg.train)?;
    let hash = config_hash(&cfg.train.snapshot());

    if a.dry_run {
        let out = json!({ "config": cfg, "config_hash": hash, "plan": plan });
        say!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Runtime(e.to_string()))?);
        return Ok(None);
    }

    let out = &a.out;
    if let Ok(prev) = RunManifest::load(out) {
        if prev.config_hash != hash || prev.input.sha256 != input.sha256 {
            return Err(CliError::Validation(format!(
                "{} already holds a run with a different config or input; choose another --out",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = RunManifest {
        run_id: run_id(&hash, &input.sha256),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config: serde_json::to_value(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
        input,
        surrogate: model_record(&model),
        transfer_models: Vec::new(),
        plan: plan.clone(),
        stages: Default::default(),
        artifacts: Vec::new(),
    };
    if let Ok(prev) = RunManifest::load(out) {
        manifest.stages = prev.stages;
        manifest.artifacts = prev.artifacts;
    }

    manifest.stage(out, "plan", |m| {
        fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| io_err(out, e))?;
        imaging::save_png_with_sidecar(&x, &out.join("input.png"), &Sidecar::for_image(&x))?;
        write_json(&out.join("plan.json"), &plan)?;
        let map = compute_attention(&model, &x)?;
        figures::save(&figures::heatmap_overlay(&x, &map.values, Some(&plan.region))?, &out.join("attention.png"))?;
        for f in ["config.toml", "input.png", "input.json", "plan.json", "attention.png"] {
            m.add_artifact(out, f);
        }
        Ok(())
    })?;

    let checkpoint = out.join("checkpoint");
    let outcome = manifest.stage(out, "train", |m| {
        let mut progress = Progress { scales: plan.patch_sides.len() };
        let outcome = trainer::train_all(&x, &model, &cfg.train, Some(&checkpoint), &mut progress)?;
        for f in ["checkpoint/stack.json", "checkpoint/train_log.csv"] {
            m.add_artifact(out, f);
        }
        Ok(outcome)
    })?;
    say!(
        "run {}: region {} ({}), {} scales ({} resumed), checkpoint in {}",
        manifest.run_id,
        fmt_region(&plan.region),
        plan.region_source,
        outcome.stack.num_scales(),
        outcome.resumed_scales,
        checkpoint.display()
    );
    Ok(Some(manifest))
}

pub fn generate(run: &Path, count: usize, seed: u64) -> CliResult<()> {
    let (mut manifest, x, stack) = load_trained(run)?;
    let plan = read_plan(run)?;
    manifest.stage(run, "generate", |m| {
        for dir in ["patches", "composites"] {
            fs::create_dir_all(run.join(dir)).map_err(|e| io_err(run, e))?;
        }
        for j in 0..count as u64 {
            let s = seed + j;
            let patch = stack.generate(s, NoiseMode::Random)?;
            let composite = apply_patch(&x, &patch, &plan.region)?;
            let sidecar = |img: &ImageTensor| Sidecar {
                region: Some(plan.region),
                pyramid_ratio: Some(plan.ratio),
                scale_index: Some(stack.num_scales() - 1),
                seed: Some(s),
                ..Sidecar::for_image(img)
            };
            for (dir, img) in [("patches", &patch), ("composites", &composite)] {
                let rel = PathBuf::from(dir).join(format!("seed_{s:06}.png"));
                imaging::save_png_with_sidecar(img, &run.join(&rel), &sidecar(img))?;
                m.add_artifact(run, rel.with_extension("json"));
                m.add_artifact(run, rel);
            }
        }
        Ok(())
    })?;
    say!("wrote {count} patches and composites to {}", run.display());
    Ok(())
}

pub fn evaluate(run: &Path, flags: &EvalFlags) -> CliResult<()> {
    let (mut manifest, x, stack) = load_trained(run)?;
    let plan = read_plan(run)?;
    let cfg_path = run.join("config.toml");
    let text = fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    let mut cfg = RunConfig::from_toml(&text, &cfg_path.display().to_string())?;
    flags.apply(&mut cfg);
    cfg.validate()?;
    let registry = open_registry(cfg.registry.as_deref())?;
    let surrogate = registry.load(&plan.victim_id)?;
    if Module::checksum(&surrogate) != plan.victim_checksum {
        return Err(CliError::Runtime(format!(
            "model `{}` in the registry changed since training (parameter checksum differs)",
            plan.victim_id
        )));
    }
    let transfer: Vec<ConvNet> = cfg.transfer_models.iter().map(|id| registry.load(id)).collect::<Result<_, _>>()?;

    let report = manifest.stage(run, "evaluate", |m| {
        let mut models: Vec<&dyn Classifier> = vec![&surrogate];
        models.extend(transfer.iter().map(|t| t as &dyn Classifier));
        let ev = evaluate_image("input", &stack, &models, &x, &plan.region, plan.goal, &cfg.eval)?;
        let report = AttackReport::new(&m.run_id, &stack.config_hash, &cfg.eval, vec![ev])?;
        let dir = run.join("report");
        report.write(&dir)?;
        m.add_artifact(run, "report/report.json");
        m.add_artifact(run, "report/report.csv");

        let r = &plan.region;
        let patched = apply_patch(&x, &stack.generate(cfg.eval.seed, NoiseMode::Random)?, r)?;
        let (c, _, _) = x.dims();
        let baseline = apply_patch(&x, &checkerboard_patch(c, r.h, r.w, cfg.eval.baseline_cell), r)?;
        for (name, img) in [("clean", &x), ("patched", &patched), ("baseline", &baseline)] {
            let rel = format!("report/figures/saliency_{name}.png");
            figures::save(&figures::heatmap_overlay(img, &saliency_map(img), Some(r))?, &run.join(&rel))?;
            m.add_artifact(run, rel);
        }
        let ev = &report.images[0];
        let mut hists = vec![("patch", &ev.patch_diff)];
        hists.extend(ev.pgd_diff.as_ref().map(|d| ("pgd", d)));
        for (name, d) in hists {
            let rel = format!("report/figures/diff_{name}.png");
            figures::save(&figures::histogram_chart(d, 400, 160), &run.join(&rel))?;
            m.add_artifact(run, rel);
        }
        m.transfer_models = transfer.iter().map(|t| model_record(t)).collect();
        Ok(report)
    })?;
    print_summary(&report);
    Ok(())
}

/// `top,left HxW`.
pub fn fmt_region(r: &PatchRegion) -> String {
    format!("{},{} {}x{}", r.top, r.left, r.h, r.w)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn print_summary(report: &AttackReport) {
    for p in &report.pooled {
        let role = if p.model == report.surrogate { "white-box" } else { "transfer" };
        say!("{:<16} {:<9} {}/{} success, rate {}", p.model, role, p.successes, p.samples, fmt_opt(p.rate));
    }
    say!(
        "conspicuousness (median): patch {}, checkerboard {}",
        fmt_opt(report.median_conspicuousness_patch),
        fmt_opt(report.median_conspicuousness_baseline)
    );
}

pub fn report(run: &Path, as_json: bool) -> CliResult<()> {
    let manifest = RunManifest::load(run)?;
    let report_path = run.join("report/report.json");
    let report: Option<AttackReport> = match fs::read_to_string(&report_path) {
        Ok(t) => Some(serde_json::from_str(&t).map_err(|e| CliError::Runtime(format!("{}: {e}", report_path.display())))?),
        Err(_) => None,
    };
    if as_json {
        let value = json!({ "manifest": manifest, "report": report });
        say!("{}", serde_json::to_string_pretty(&value).map_err(|e| CliError::Runtime(e.to_string()))?);
    } else {
        say!("run {} (config {})", manifest.run_id, &manifest.config_hash[..12]);
        say!("surrogate {}, region {} via {}", manifest.surrogate.id, fmt_region(&manifest.plan.region), manifest.plan.region_source);
        for (name, s) in &manifest.stages {
            let err = s.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default();
            say!("stage {name:<9} {:?} in {:.1}s{err}", s.status, s.seconds);
        }
        match &report {
            Some(r) => print_summary(r),
            None => say!("no evaluation yet"),
        }
    }
    let missing = manifest.missing_artifacts(run);
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!("artifacts listed in the manifest are missing: {missing:?}")));
    }
    Ok(())
}

pub fn attention(a: &AttentionArgs) -> CliResult<()> {
    let registry = open_registry(a.registry.as_deref())?;
    let model = registry.load(&a.model)?;
    let (x, input) = read_input(&a.image)?;
    let map = compute_attention(&model, &x)?;
    let region = select_location(&map, a.patch.0, a.patch.1)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    figures::save(&figures::heatmap_overlay(&x, &map.values, Some(&region))?, &a.out.join("attention.png"))?;
    write_json(&a.out.join("attention.json"), &json!({ "input": input, "model": model_record(&model), "region": region, "map": map }))?;
    say!("region {}", fmt_region(&region));
    Ok(())
}

pub fn train_victim(a: &TrainVictimArgs) -> CliResult<()> {
    let arch = Arch::parse(&a.arch)?;
    let id = a.id.clone().unwrap_or_else(|| arch.name().to_string());
    let mut registry = open_registry(a.registry.as_deref())?;
    let (train, test, tag) = match (&a.data, &a.test_data) {
        (Some(d), Some(t)) => (dataset::load_dir(d)?, dataset::load_dir(t)?, format!("dir:{}:{}", d.display(), t.display())),
        _ => (
            dataset::synthetic_shapes(a.data_seed, 0, a.train_size, 32),
            dataset::synthetic_shapes(a.data_seed, 1_000_000, a.test_size, 32),
            format!("synthetic-shapes:seed={}:train={}:test={}", a.data_seed, a.train_size, a.test_size),
        ),
    };
    let recipe = Recipe { arch, seed: a.seed, epochs: a.epochs, ..Recipe::default() };
    let trained = dataset::train_desk_classifier(&id, &train, &test, &recipe, a.floor)?;
    for e in &trained.log {
        eprintln!("epoch {}: loss {:.4}, train accuracy {:.3}", e.epoch, e.mean_loss, e.train_accuracy);
    }
    registry.register(&trained.model, train.class_labels.clone(), recipe.hash(&tag), trained.test_accuracy)?;
    say!("registered `{id}` ({}) with test accuracy {:.4} in {}", arch.name(), trained.test_accuracy, registry.root().display());
    Ok(())
}

pub fn make_data(a: &MakeDataArgs) -> CliResult<()> {
    let ds = dataset::synthetic_shapes(a.seed, a.start, a.count, a.side);
    dataset::save_dir(&ds, &a.out)?;
    say!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}
