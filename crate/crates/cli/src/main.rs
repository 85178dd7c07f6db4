//! Command line front end: synthesize datasets, train and evaluate the toy
//! detector, and inspect matching and denoising on single scenes.
//!
//! All outputs land in the `--out` directory. Every command is a pure
//! function of its config and seed, so rerunning with the same inputs
//! reproduces every output byte for byte.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use odontic::eval::{classes_present, coco_ap};
use odontic::geometry::jitter_box;
use odontic::labelspace::{sample_denoising_queries, FlipRule, QueryRole};
use odontic::matching::{match_predictions, MatchOutcome};
use odontic::pipeline::{self, load_model, posterior_mask_mean_score, save_model};
use odontic::synthdata::{self, generate};
use odontic::{Assignment, GroundTruth, Prediction, Scene, ToothLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::AppConfig;

#[derive(Parser)]
#[command(
    name = "odontic",
    version,
    about = "Synthetic open-set dental detection: datasets, training, evaluation"
)]
struct Cli {
    /// Overrides both the dataset seed and the training seed.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    /// TOML config with optional [dataset] and [train] tables.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory output files are written into (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the configured synthetic dataset as COCO JSON.
    Synth,
    /// Trains the detector; writes model, loss trace, and test report.
    Train,
    /// Scores a model, or an explicit prediction file, against a dataset.
    Eval(EvalArgs),
    /// Matches one scene's predictions against its annotations.
    Match(MatchArgs),
    /// Samples denoising queries from one scene's ground truth.
    DnSample(DnSampleArgs),
    /// Trains the 2x2 matching/denoising grid and prints a comparison table.
    Ablate,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file, evaluated on the configured dataset.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["gt", "pred"])]
    model: Option<PathBuf>,
    /// COCO ground-truth file; requires --pred.
    #[arg(long, value_name = "PATH", requires = "pred")]
    gt: Option<PathBuf>,
    /// COCO detection-results file; requires --gt.
    #[arg(long, value_name = "PATH", requires = "gt")]
    pred: Option<PathBuf>,
    /// Also renders the precision/recall curves as an SVG plot.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct MatchArgs {
    /// Model producing the predictions; omitted, the command fabricates
    /// plausible predictions by jittering the ground truth.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Which scene of the configured dataset to match.
    #[arg(long, value_name = "N", default_value_t = 0)]
    image_index: usize,
}

#[derive(Args)]
struct DnSampleArgs {
    /// Which scene of the configured dataset to sample from.
    #[arg(long, value_name = "N", default_value_t = 0)]
    image_index: usize,
    /// Label-flip probability; defaults to the configured training value.
    #[arg(long, value_name = "P")]
    p: Option<f64>,
    /// Number of denoising groups; defaults to the configured value.
    #[arg(long, value_name = "N")]
    groups: Option<usize>,
    /// Flip labels uniformly instead of conditioning on attributes.
    #[arg(long)]
    uniform: bool,
}

/// Bad invocations (flag combinations, out-of-range indices) that exit
/// with the conventional usage status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Usage problems and missing input files exit 2; everything else 1.
fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create output directory {}", cli.out.display()))?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out),
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Eval(args) => cmd_eval(&cfg, &cli.out, &args),
        Command::Match(args) => cmd_match(&cfg, &cli.out, &args),
        Command::DnSample(args) => cmd_dn_sample(&cfg, &cli.out, &args),
        Command::Ablate => cmd_ablate(&cfg, &cli.out),
    }
}

fn cmd_synth(cfg: &AppConfig, out: &Path) -> anyhow::Result<()> {
    let scenes = generate::<f64>(&cfg.dataset)?;
    let path = out.join("dataset.json");
    synthdata::save_coco(&scenes, &path)?;
    let annotations: usize = scenes.iter().map(|s| s.annotations.len()).sum();
    println!("wrote {} scenes with {annotations} annotations to {}", scenes.len(), path.display());
    Ok(())
}

fn cmd_train(cfg: &AppConfig, out: &Path) -> anyhow::Result<()> {
    let scenes = generate::<f64>(&cfg.dataset)?;
    let outcome = pipeline::train(&scenes, &cfg.train)?;

    let model_path = out.join("model.json");
    save_model(&outcome.model, &model_path)?;
    artifacts::write_loss_trace_csv(&out.join("loss_trace.csv"), &outcome.trace)?;
    artifacts::write_json(&out.join("eval.json"), &outcome.report)?;

    let last = outcome.trace.last().expect("training runs at least one step");
    println!(
        "trained {} steps on {} scenes; final loss {:.6}",
        outcome.trace.len(),
        scenes.len(),
        last.total
    );
    print_report_line(&outcome.report);
    println!("model written to {}", model_path.display());
    Ok(())
}

fn cmd_eval(cfg: &AppConfig, out: &Path, args: &EvalArgs) -> anyhow::Result<()> {
    let (records, gts, report) = match (&args.model, &args.gt, &args.pred) {
        (Some(model_path), None, None) => {
            let scenes = generate::<f64>(&cfg.dataset)?;
            let model = load_model::<f64>(model_path)?;
            let (records, report) = pipeline::evaluate(&model, &scenes)?;
            let mut gts = Vec::new();
            for scene in &scenes {
                for (label, bbox) in &scene.annotations {
                    gts.push(GroundTruth { image_id: scene.image_id, label: *label, bbox: *bbox });
                }
            }
            (records, gts, report)
        }
        (None, Some(gt_path), Some(pred_path)) => {
            let coco = artifacts::load_coco_file(gt_path)?;
            let gts = artifacts::ground_truth_records(&coco)?;
            let records = artifacts::load_predictions(pred_path, &coco)?;
            let report = coco_ap(&records, &gts, &classes_present(&gts))?;
            (records, gts, report)
        }
        _ => return Err(usage("eval needs either --model or both --gt and --pred")),
    };

    artifacts::write_json(&out.join("eval.json"), &report)?;
    let curves = artifacts::pr_curves_at(&records, &gts, 0.5)?;
    artifacts::write_pr_csv(&out.join("pr_curve.csv"), &curves)?;
    if args.svg {
        let svg_path = out.join("pr_curve.svg");
        std::fs::write(&svg_path, artifacts::render_pr_svg(&curves))
            .with_context(|| format!("cannot write {}", svg_path.display()))?;
    }
    print_report_line(&report);
    Ok(())
}

/// Everything `match` learned about one scene, dumped as JSON.
#[derive(Serialize)]
struct MatchDump<'a> {
    image_id: usize,
    tma_enabled: bool,
    fully_annotated: bool,
    predictions: &'a [Prediction],
    ground_truth: &'a [(ToothLabel, odontic::BoxXYXY)],
    assignment: &'a Assignment,
}

fn cmd_match(cfg: &AppConfig, out: &Path, args: &MatchArgs) -> anyhow::Result<()> {
    let scenes = generate::<f64>(&cfg.dataset)?;
    let scene = select_scene(&scenes, args.image_index)?;
    let preds = match &args.model {
        Some(path) => load_model::<f64>(path)?.predict(scene)?,
        None => pseudo_predictions(scene, cfg.train.seed)?,
    };
    let assignment = match_predictions(
        &preds,
        &scene.annotations,
        &cfg.train.cost_weights,
        cfg.train.tma_enabled,
        scene.fully_annotated(),
    )?;

    let path = out.join("assignment.json");
    artifacts::write_json(
        &path,
        &MatchDump {
            image_id: scene.image_id,
            tma_enabled: cfg.train.tma_enabled,
            fully_annotated: scene.fully_annotated(),
            predictions: &preds,
            ground_truth: &scene.annotations,
            assignment: &assignment,
        },
    )?;

    let matched = assignment.matched_pairs().count();
    let no_care =
        assignment.outcomes.iter().filter(|o| matches!(o, MatchOutcome::NoCare)).count();
    println!(
        "scene {}: matched {matched} of {} predictions to {} annotations ({no_care} no-care); \
         total cost {:.4}",
        scene.image_id,
        preds.len(),
        scene.annotations.len(),
        assignment.total_cost
    );
    println!("assignment written to {}", path.display());
    Ok(())
}

/// Denoising-query dump written by `dn-sample`.
#[derive(Serialize)]
struct DnDump {
    image_id: usize,
    p: f64,
    num_groups: usize,
    rule: &'static str,
    queries: Vec<odontic::DenoisingQuery>,
}

fn cmd_dn_sample(cfg: &AppConfig, out: &Path, args: &DnSampleArgs) -> anyhow::Result<()> {
    let scenes = generate::<f64>(&cfg.dataset)?;
    let scene = select_scene(&scenes, args.image_index)?;
    let p = args.p.unwrap_or(cfg.train.p);
    let num_groups = args.groups.unwrap_or(cfg.train.num_denoising_groups);
    let rule = if args.uniform { FlipRule::Uniform } else { FlipRule::Conditional };

    // Same stream the trainer draws denoising queries from.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(u64::MAX);
    let queries = sample_denoising_queries(
        &scene.annotations,
        p,
        num_groups,
        cfg.train.lambda1,
        cfg.train.lambda2,
        rule,
        &mut rng,
    )?;

    let positives = queries.iter().filter(|q| q.role == QueryRole::Positive).count();
    let path = out.join("denoising_queries.json");
    artifacts::write_json(
        &path,
        &DnDump {
            image_id: scene.image_id,
            p,
            num_groups,
            rule: if args.uniform { "uniform" } else { "conditional" },
            queries: queries.clone(),
        },
    )?;
    println!(
        "scene {}: {} queries in {num_groups} groups ({positives} positive, {} negative) \
         written to {}",
        scene.image_id,
        queries.len(),
        queries.len() - positives,
        path.display()
    );
    Ok(())
}

/// One trained cell of the ablation grid.
#[derive(Serialize)]
struct AblationRow {
    name: &'static str,
    tma: bool,
    ccdn: bool,
    ap: f64,
    ap50: f64,
    fd_ap: Option<f64>,
    mask_score: Option<f64>,
}

fn cmd_ablate(cfg: &AppConfig, out: &Path) -> anyhow::Result<()> {
    let scenes = generate::<f64>(&cfg.dataset)?;
    let cells: [(&'static str, bool, bool); 4] = [
        ("baseline", false, false),
        ("+TMA", true, false),
        ("+CCDN", false, true),
        ("+both", true, true),
    ];

    let mut rows = Vec::with_capacity(cells.len());
    for (name, tma, ccdn) in cells {
        let mut train_cfg = cfg.train;
        train_cfg.tma_enabled = tma;
        train_cfg.ccdn_enabled = ccdn;
        let outcome = pipeline::train(&scenes, &train_cfg)?;
        let mask_score = posterior_mask_mean_score(&outcome.model, &scenes)?;
        rows.push(AblationRow {
            name,
            tma,
            ccdn,
            ap: outcome.report.ap,
            ap50: outcome.report.ap50,
            fd_ap: outcome.report.fd_ap,
            mask_score,
        });
    }
    artifacts::write_json(&out.join("ablation.json"), &rows)?;

    let opt = |v: Option<f64>| v.map_or_else(|| "      -".into(), |x| format!("{x:7.4}"));
    println!("{:<10} {:>5} {:>5} {:>7} {:>7} {:>7} {:>10}", "run", "tma", "ccdn", "ap", "ap50", "fd_ap", "mask_score");
    for r in &rows {
        println!(
            "{:<10} {:>5} {:>5} {:7.4} {:7.4} {} {}",
            r.name,
            r.tma,
            r.ccdn,
            r.ap,
            r.ap50,
            opt(r.fd_ap),
            format!("{:>10}", opt(r.mask_score).trim_start()),
        );
    }
    Ok(())
}

fn print_report_line(report: &odontic::EvalReport) {
    match (report.fd_ap, report.fd_ap50) {
        (Some(fd), Some(fd50)) => println!(
            "AP {:.4}  AP50 {:.4}  AP75 {:.4}  FD AP {fd:.4}  FD AP50 {fd50:.4}",
            report.ap, report.ap50, report.ap75
        ),
        _ => println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", report.ap, report.ap50, report.ap75),
    }
}

fn select_scene(scenes: &[Scene], index: usize) -> anyhow::Result<&Scene> {
    scenes
        .get(index)
        .ok_or_else(|| usage(format!("image index {index} out of range ({} scenes)", scenes.len())))
}

/// Stand-in predictions when no model is given: a jittered copy of each
/// annotation scored high on its own label, plus a few low-scored boxes
/// scattered over the canvas.
fn pseudo_predictions(scene: &Scene, seed: u64) -> anyhow::Result<Vec<Prediction>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep the demo draws off the generator's per-scene streams.
    rng.set_stream(u64::MAX - 1);

    let mut preds = Vec::with_capacity(scene.annotations.len() + 3);
    for (label, bbox) in &scene.annotations {
        let jittered = jitter_box(&bbox.to_cxcywh(), 0.2, 0.2, &mut rng)?;
        let mut scores = [0.0; 4];
        for s in &mut scores {
            *s = rng.gen_range(0.02..0.15);
        }
        scores[label.token_index()] = rng.gen_range(0.75..0.95);
        preds.push(Prediction { scores, bbox: jittered.to_xyxy()? });
    }
    for _ in 0..3 {
        let w = rng.gen_range(0.08..0.25);
        let h = rng.gen_range(0.08..0.25);
        let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
        let mut scores = [0.0; 4];
        for s in &mut scores {
            *s = rng.gen_range(0.02..0.2);
        }
        let bbox = odontic::BoxCXCYWH::new(cx, cy, w, h)?.to_xyxy()?;
        preds.push(Prediction { scores, bbox });
    }
    Ok(preds)
}
