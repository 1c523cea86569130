//! Argument definitions and the dispatch into each subcommand.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use moe_edit_core::dataset::{
    client_pipeline, score_and_filter, synth_routing_corpus, CaptionClient, EditSample, GeneratorClient, Manifest, ProceduralGenerator,
    TemplateCaptionClient,
};
use moe_edit_core::eval::{eval_report, MethodOutputs, ToyEmbedder};
use moe_edit_core::model::{EditModel, ModelConfig};
use moe_edit_core::moe::routing_report;
use moe_edit_core::text::Instruction;
use moe_edit_core::training::{ablate_w, compare_moe, edit_all, gradient_check, Trainer};

use crate::checkpoint;
use crate::config::{parse_pooling, RunConfig};
use crate::error::{CliError, CliResult};
use crate::images::{load_png, save_heatmap, save_loss_plot, save_png, save_row};
use crate::manifest;
use crate::records::{eval_records, eval_summary, heatmap_records, loss_line, read_ballots, routing_records, write_text, LOSS_HEADER};

#[derive(Debug, Parser)]
#[command(
    name = "moectl",
    version,
    about = "Train, run and evaluate a mixture-of-experts instruction editing model"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset construction.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Edit one image, or every sample of a manifest.
    Edit(EditArgs),
    /// CLIP-T / CLIP-D / prefer-score report over method output directories.
    Eval(EvalArgs),
    /// Which expert each instruction family is routed to.
    RoutingReport(RoutingArgs),
    /// Train one model per reconstruction weight and compare source fidelity.
    AblateW(AblateArgs),
    /// Train with and without the expert controller and evaluate both.
    CompareMoe(CompareArgs),
    /// Finite-difference check of every gradient of a tiny model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Generate, score and filter a paired dataset.
    Build(BuildArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per instruction family.
    #[arg(long)]
    pub per_family: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Produce targets through the caption and generator clients.
    #[arg(long)]
    pub clients: bool,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<u64>,
    /// Source reconstruction weight.
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bypass the expert controller.
    #[arg(long)]
    pub no_moe: bool,
    /// Gate pooling: none or mean.
    #[arg(long)]
    pub pooling: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, requires = "instruction")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub instruction: Option<String>,
    /// Edit every kept sample of this manifest instead of a single image.
    #[arg(long, conflicts_with_all = ["image", "instruction"])]
    pub manifest: Option<PathBuf>,
    /// Output PNG (single image) or directory (manifest mode).
    #[arg(long)]
    pub out: PathBuf,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write per-token cross-attention maps here (single image only).
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `name=directory` holding `<sample id>.png`; repeatable.
    #[arg(long = "method", required = true)]
    pub methods: Vec<String>,
    #[arg(long)]
    pub ballots: Option<PathBuf>,
    /// Directory for report.txt, records.tsv and summary.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoutingArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for routing.txt and routing.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1.0")]
    pub ws: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of kept samples edited by every model.
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of kept samples evaluated.
    #[arg(long, default_value_t = 24)]
    pub eval_samples: usize,
    #[arg(long)]
    pub ballots: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Edit(a) => edit(&cfg, a),
        Command::Eval(a) => eval(a),
        Command::RoutingReport(a) => routing(a),
        Command::AblateW(a) => ablate(&mut cfg, a),
        Command::CompareMoe(a) => compare(&mut cfg, a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) -> CliResult<()> {
    if let Some(s) = o.seed {
        cfg.set_seed(s);
    }
    if let Some(v) = o.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = o.w {
        cfg.train.w = v;
    }
    if let Some(v) = o.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if o.no_moe {
        cfg.train.moe_enabled = false;
    }
    if let Some(p) = &o.pooling {
        cfg.train.gate_pooling = parse_pooling(p)?;
    }
    cfg.validate()
}

fn embedder() -> ToyEmbedder {
    ToyEmbedder::default()
}

fn dataset_build(cfg: &mut RunConfig, a: BuildArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = a.per_family {
        cfg.corpus.per_family = n;
    }
    if let Some(s) = a.image_size {
        cfg.corpus.image_size = s;
    }
    if a.clients {
        cfg.clients.enabled = true;
    }
    cfg.validate()?;
    let captioner: Box<dyn CaptionClient> = match cfg.clients.captioner.as_str() {
        "template" => Box::new(TemplateCaptionClient),
        other => return Err(CliError::config(format!("unknown captioner {other:?} (available: template)"))),
    };
    let generator: Box<dyn GeneratorClient> = match cfg.clients.generator.as_str() {
        "procedural" => Box::new(ProceduralGenerator),
        other => return Err(CliError::config(format!("unknown generator {other:?} (available: procedural)"))),
    };
    let mut samples = synth_routing_corpus(cfg.corpus.per_family, cfg.corpus.image_size, cfg.seed, captioner.as_ref())?;
    if cfg.clients.enabled {
        samples = client_pipeline(
            &samples,
            captioner.as_ref(),
            generator.as_ref(),
            &[],
            &cfg.corpus.text_scales,
            cfg.seed,
        )?;
    }
    let judged = score_and_filter(samples, &embedder(), &cfg.filter)?;
    let path = manifest::write(&a.out, &judged)?;
    let s = judged.summary();
    println!(
        "total {}  kept {}  dropped {} (resolution {}, aesthetic {}, clip {})",
        s.total,
        s.kept,
        s.dropped(),
        s.resolution,
        s.aesthetic,
        s.clip
    );
    println!("manifest {}  sha256 {}", path.display(), manifest::checksum(&path)?);
    Ok(())
}

fn kept(m: &Manifest) -> CliResult<Vec<&EditSample>> {
    let k = m.kept();
    if k.is_empty() {
        return Err(CliError::pipeline("manifest has no kept samples"));
    }
    Ok(k)
}

fn check_side(model: &ModelConfig, samples: &[&EditSample]) -> CliResult<()> {
    let side = model.denoiser.image;
    if let Some(s) = samples.iter().find(|s| s.src_image.height() != side || s.src_image.width() != side) {
        return Err(CliError::config(format!(
            "model.image is {side} but sample {} is {}x{}",
            s.id,
            s.src_image.height(),
            s.src_image.width()
        )));
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> CliResult<()> {
    apply_overrides(cfg, &a.train)?;
    let m = manifest::read(&a.data)?;
    let data = kept(&m)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut ckpt = checkpoint::load(p)?;
            if let Some(steps) = a.train.steps {
                ckpt.train.steps = steps;
            }
            Trainer::resume(ckpt)?
        }
        None => Trainer::new(cfg.model, cfg.train)?,
    };
    check_side(trainer.model().config(), &data)?;

    let loss_path = sibling(&a.out, ".loss.tsv");
    let fresh = a.resume.is_none() || !loss_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&loss_path)
        .map_err(|e| CliError::io(&loss_path, e))?;
    if fresh {
        log.write_all(LOSS_HEADER.as_bytes()).map_err(|e| CliError::io(&loss_path, e))?;
    }
    let mut io_err = None;
    let result = trainer.run(&data, |r| {
        if io_err.is_none() {
            io_err = log.write_all(loss_line(r).as_bytes()).err();
        }
    });
    if let Some(e) = io_err {
        return Err(CliError::io(&loss_path, e));
    }
    let curve = result?;
    checkpoint::save(&a.out, &trainer.checkpoint())?;
    save_loss_plot(&sibling(&a.out, ".loss.png"), &curve)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!(
            "steps {}..{}  loss {:.6} -> {:.6}",
            first.step,
            last.step + 1,
            first.total,
            last.total
        );
    }
    println!("checkpoint {}", a.out.display());
    Ok(())
}

fn edit(cfg: &RunConfig, a: EditArgs) -> CliResult<()> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let model = &ckpt.model;
    let mut sampling = cfg.sampling;
    if let Some(s) = a.steps {
        sampling.steps = s;
    }
    if let Some(s) = a.seed {
        sampling.seed = s;
    }
    if let Some(mpath) = &a.manifest {
        let m = manifest::read(mpath)?;
        let data = kept(&m)?;
        check_side(model.config(), &data)?;
        let outputs = edit_all(model, &data, sampling)?;
        for (s, img) in data.iter().zip(&outputs) {
            save_png(&a.out.join(format!("{}.png", s.id)), img)?;
        }
        println!("edited {} samples into {}", outputs.len(), a.out.display());
        return Ok(());
    }
    let (Some(image), Some(text)) = (&a.image, &a.instruction) else {
        return Err(CliError::config("edit needs --image and --instruction, or --manifest"));
    };
    let y = Instruction::new(text.clone())?;
    let src = load_png(image, Some(model.image_side()))?;
    let out = model.sample(&y, &src, sampling.steps, sampling.seed)?;
    save_png(&a.out, &out)?;
    if let Some(h) = &a.heatmap {
        let schedule = model.config().schedule()?;
        let t = schedule.steps() / 2;
        let noise = moe_edit_core::rng::normal_tensor(&mut moe_edit_core::rng::seeded(sampling.seed), src.tensor().shape());
        let z_t = schedule.forward_noise(out.tensor(), t.max(1), &noise)?;
        let heatmap = model.extract_heatmap(&z_t, t.max(1), &y, &src)?;
        save_heatmap(h, &heatmap, 8)?;
        write_text(&sibling(h, ".tsv"), &heatmap_records(&heatmap))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let m = manifest::read(&a.manifest)?;
    let data = kept(&m)?;
    let mut outputs = Vec::new();
    let mut missing = Vec::new();
    for arg in &a.methods {
        let (name, dir) = arg
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--method expects name=directory, got {arg:?}")))?;
        let mut images = BTreeMap::new();
        for s in &data {
            let p = Path::new(dir).join(format!("{}.png", s.id));
            if p.exists() {
                images.insert(s.id.clone(), load_png(&p, Some(s.src_image.height()))?);
            } else {
                missing.push(format!("{name}:{}", s.id));
            }
        }
        outputs.push(MethodOutputs {
            name: name.to_string(),
            images,
        });
    }
    if !missing.is_empty() {
        return Err(CliError::pipeline(format!("missing outputs for {}", missing.join(", "))));
    }
    let ballots = a.ballots.as_deref().map(read_ballots).transpose()?;
    let report = eval_report(&outputs, &data, &embedder(), ballots.as_deref())?;
    let table = report.table();
    print!("{table}");
    if let Some(dir) = &a.out {
        write_text(&dir.join("report.txt"), &table)?;
        write_text(&dir.join("records.tsv"), &eval_records(&report))?;
        write_text(&dir.join("summary.tsv"), &eval_summary(&report))?;
    }
    Ok(())
}

fn routing(a: RoutingArgs) -> CliResult<()> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let model = &ckpt.model;
    let m = manifest::read(&a.manifest)?;
    let corpus: Vec<Instruction> = m.entries.iter().map(|e| e.sample.instruction.clone()).collect();
    let report = routing_report(model.controller(), model.store(), |y| model.encode(y), &corpus)?;
    let table = report.table();
    print!("{table}");
    println!("specialized {}", report.is_specialized());
    if let Some(dir) = &a.out {
        write_text(&dir.join("routing.txt"), &table)?;
        write_text(&dir.join("routing.tsv"), &routing_records(&report))?;
    }
    Ok(())
}

fn ablate(cfg: &mut RunConfig, a: AblateArgs) -> CliResult<()> {
    apply_overrides(cfg, &a.train)?;
    if a.ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(CliError::config("every w must be finite and nonnegative"));
    }
    let m = manifest::read(&a.data)?;
    let data = kept(&m)?;
    check_side(&cfg.model, &data)?;
    let probes: Vec<&EditSample> = data.iter().take(a.probes.max(1)).copied().collect();
    let entries = ablate_w(&a.ws, cfg.model, cfg.train, &data, &probes, cfg.sampling)?;
    let mut table = String::from("w\tmsd\tfidelity\tfinal_loss\n");
    for e in &entries {
        table.push_str(&format!("{:?}\t{:.6}\t{:.6}\t{:.6}\n", e.w, e.msd, e.fidelity, e.final_loss));
        checkpoint::save(&a.out.join(format!("w{}.ckpt", e.w)), &e.checkpoint)?;
        for (s, img) in probes.iter().zip(&e.outputs) {
            save_png(&a.out.join(format!("w{}", e.w)).join(format!("{}.png", s.id)), img)?;
        }
    }
    for (i, s) in probes.iter().enumerate() {
        let mut row = vec![s.src_image.clone()];
        row.extend(entries.iter().map(|e| e.outputs[i].clone()));
        save_row(&a.out.join(format!("sweep_{}.png", s.id)), &row, 8)?;
    }
    write_text(&a.out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn compare(cfg: &mut RunConfig, a: CompareArgs) -> CliResult<()> {
    apply_overrides(cfg, &a.train)?;
    let m = manifest::read(&a.data)?;
    let data = kept(&m)?;
    check_side(&cfg.model, &data)?;
    let eval_set: Vec<&EditSample> = data.iter().take(a.eval_samples.max(1)).copied().collect();
    let ballots = a.ballots.as_deref().map(read_ballots).transpose()?;
    let result = compare_moe(
        cfg.model,
        cfg.train,
        &data,
        &eval_set,
        cfg.sampling,
        &embedder(),
        ballots.as_deref(),
    )?;
    let table = result.report.table();
    print!("{table}");
    write_text(&a.out.join("report.txt"), &table)?;
    write_text(&a.out.join("records.tsv"), &eval_records(&result.report))?;
    write_text(&a.out.join("summary.tsv"), &eval_summary(&result.report))?;
    checkpoint::save(&a.out.join("with_moe.ckpt"), &result.with_moe)?;
    checkpoint::save(&a.out.join("without_moe.ckpt"), &result.without_moe)?;
    Ok(())
}

/// Named full-stack configurations covered by `grad-check`.
pub fn grad_check_suite() -> Vec<(&'static str, ModelConfig, f64)> {
    let tiny = ModelConfig::tiny();
    let mut mean = tiny;
    mean.moe.pooling = moe_edit_core::moe::GatePooling::Mean;
    let mut bypass = tiny;
    bypass.moe_enabled = false;
    vec![
        ("w=0.5", tiny, 0.5),
        ("w=0", tiny, 0.0),
        ("w=1 mean-pooled gate", mean, 1.0),
        ("w=0.5 controller bypassed", bypass, 0.5),
    ]
}

fn grad_check(a: GradCheckArgs) -> CliResult<()> {
    let corpus = synth_routing_corpus(2, ModelConfig::tiny().denoiser.image, a.seed, &TemplateCaptionClient)?;
    let refs: Vec<&EditSample> = corpus.iter().collect();
    let mut worst = 0.0f64;
    for (name, model, w) in grad_check_suite() {
        let params = EditModel::new(model, a.seed)?.store().scalar_count();
        let r = gradient_check(model, &refs, 4, w, a.seed, a.step)?;
        let (pname, idx) = r.worst.clone().unwrap_or_default();
        println!(
            "{name:<28} params {params:>6}  max relative error {:.3e}  (at {pname}[{idx}])",
            r.max_relative_error
        );
        worst = worst.max(r.max_relative_error);
    }
    println!("max relative error {worst:.3e}  tolerance {:.1e}", a.tolerance);
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: {worst:.3e} >= {:.1e}",
            a.tolerance
        )))
    }
}
