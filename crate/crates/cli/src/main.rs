//! `geolang` command-line runner.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage error.

mod bench;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geolang::adci::AdciCheck;
use geolang::data::exchange::{load_eval_records, mask_ref, write_jsonl, ExchangeRecord};
use geolang::data::{generate_dataset, read_dataset, write_container, write_dataset, Difficulty, MaskRecord, SceneConfig, SceneSample, Vocab};
use geolang::dggm::GeoAttentionCheck;
use geolang::gradcheck::{finite_diff_check_with, GradCheckLayer, GradReport};
use geolang::metrics::{evaluate_with, EvalRecord, ScoredGrasp};
use geolang::model::{predict, save_checkpoint, train, ModelCheck};
use geolang::{Error, Exec};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "geolang", version, about = "Geometry-aware language-guided grasping on synthetic RGB-D scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes into a container file.
    Gen(GenArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train the mini model on a scene container.
    Train(TrainArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Time plain against geometry-prior attention.
    Bench(bench::BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "isolated", value_parser = parse_difficulty)]
    difficulty: Difficulty,
    /// Square image side in pixels; a multiple of 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum LayerChoice {
    All,
    Dggm,
    Adci,
    Model,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value = "all")]
    layer: LayerChoice,
    /// Print the reports as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene container; overrides the config's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 5)]
    topn: usize,
}

fn parse_difficulty(s: &str) -> Result<Difficulty, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ground_truth_exchange(samples: &[SceneSample], container: &str) -> Vec<ExchangeRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| ExchangeRecord {
            id: s.id.to_string(),
            mask_path: mask_ref(container, i),
            grasps: s.grasps.iter().map(|&rect| ScoredGrasp { rect, score: 1.0 }.into()).collect(),
        })
        .collect()
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let cfg = SceneConfig::sized(a.size, a.size);
    cfg.validate()?;
    let samples = generate_dataset(&Exec::from_env(), a.seed, a.count, a.difficulty, &cfg)?;
    write_dataset(&a.out, &samples)?;
    let gt = with_suffix(&a.out, ".gt.jsonl");
    write_jsonl(&gt, &ground_truth_exchange(&samples, &file_name(&a.out)))?;
    println!(
        "wrote {} {} scenes ({}x{}, seed {}) to {}; ground truth in {}",
        samples.len(),
        a.difficulty,
        a.size,
        a.size,
        a.seed,
        a.out.display(),
        gt.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.eps > 0.0 && a.eps.is_finite()) || !(a.tol >= 0.0) {
        return Err(Failure::Usage("--eps must be positive and --tol non-negative".into()));
    }
    let layers: Vec<Box<dyn GradCheckLayer>> = match a.layer {
        LayerChoice::All => vec![Box::new(GeoAttentionCheck::default()), Box::new(AdciCheck::default()), Box::new(ModelCheck::default())],
        LayerChoice::Dggm => vec![Box::new(GeoAttentionCheck::default())],
        LayerChoice::Adci => vec![Box::new(AdciCheck::default())],
        LayerChoice::Model => vec![Box::new(ModelCheck::default())],
    };
    let exec = Exec::from_env();
    let reports: Vec<GradReport> = layers
        .iter()
        .map(|l| finite_diff_check_with(&exec, l.as_ref(), a.eps, a.tol, a.seed))
        .collect::<geolang::Result<_>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports).map_err(|e| Failure::Runtime(e.to_string()))?);
    } else {
        println!("{:<6} {:<20} {:<6} {:>8} {:>12}  status", "layer", "tensor", "role", "entries", "max_rel_err");
        for r in &reports {
            for t in &r.tensors {
                let role = serde_json::to_value(t.role).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                println!(
                    "{:<6} {:<20} {:<6} {:>8} {:>12.3e}  {}",
                    t.layer,
                    t.tensor,
                    role,
                    t.entries,
                    t.max_rel_err,
                    if t.pass { "ok" } else { "FAIL" }
                );
            }
        }
        for r in &reports {
            println!("{}: max_rel_err {:.3e} (eps {:e}, tol {:e}) {}", r.layer, r.max_rel_err, r.eps, r.tol, if r.pass { "PASS" } else { "FAIL" });
        }
    }
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.data.is_some() {
        rc.data = a.data;
    }
    if a.out.is_some() {
        rc.out = a.out;
    }
    let data = rc.data.clone().ok_or_else(|| Failure::Usage("no data path: pass --data or set \"data\" in the config".into()))?;
    if !data.is_file() {
        return Err(Failure::Usage(format!("data path {} does not exist", data.display())));
    }
    let out = rc.out.clone().ok_or_else(|| Failure::Usage("no output directory: pass --out or set \"out\" in the config".into()))?;
    rc.model.validate()?;

    let (samples, _) = read_dataset(&data)?;
    if let Some(s) = samples.first() {
        if (s.height(), s.width()) != (rc.model.height, rc.model.width) {
            return Err(Failure::Usage(format!(
                "config image size {}x{} does not match data {}x{}",
                rc.model.height,
                rc.model.width,
                s.height(),
                s.width()
            )));
        }
    }
    std::fs::create_dir_all(&out)?;
    let exec = Exec::from_env();
    let metrics_path = out.join("metrics.jsonl");
    let mut log = String::new();
    let result = train(&exec, &samples, &rc.model, &rc.train, |m| {
        log.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        log.push('\n');
        eprintln!(
            "epoch {:>4} step {:>5} loss {:.4} seg_iou {:.4} j@1 {:.4}",
            m.epoch, m.steps, m.loss, m.seg_iou, m.j_at_1
        );
    });
    std::fs::write(&metrics_path, &log)?;
    let result = result?;

    save_checkpoint(&out.join("checkpoint.glg"), &result.params, &rc.model)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&rc).expect("config serialize") + "\n")?;

    let preds = predict(&exec, &result.params, &rc.model, &samples, rc.train.top_n)?;
    let masks: Vec<MaskRecord> = preds.iter().map(|p| MaskRecord { id: p.id.clone(), mask: p.mask.clone() }).collect();
    write_container(&out.join("predictions.glg"), &masks, Vocab::standard().map(), None)?;
    let pred_records: Vec<ExchangeRecord> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| ExchangeRecord {
            id: p.id.clone(),
            mask_path: mask_ref("predictions.glg", i),
            grasps: p.grasps.iter().map(|&g| g.into()).collect(),
        })
        .collect();
    write_jsonl(&out.join("predictions.jsonl"), &pred_records)?;
    let gt_masks: Vec<MaskRecord> = samples.iter().map(|s| MaskRecord { id: s.id.to_string(), mask: s.mask.clone() }).collect();
    write_container(&out.join("ground_truth.glg"), &gt_masks, Vocab::standard().map(), None)?;
    write_jsonl(&out.join("ground_truth.jsonl"), &ground_truth_exchange(&samples, "ground_truth.glg"))?;

    let r = &result.report;
    println!(
        "trained {} steps on {} samples; train IoU {:.4} J@1 {:.4} J@{} {:.4}",
        result.log.last().map_or(0, |m| m.steps),
        samples.len(),
        r.mean_iou,
        r.j_at_1,
        r.n,
        r.j_at_n
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.topn == 0 {
        return Err(Failure::Usage("--topn must be at least 1".into()));
    }
    for p in [&a.pred, &a.gt] {
        if !p.is_file() {
            return Err(Failure::Usage(format!("{} does not exist", p.display())));
        }
    }
    let preds: Vec<EvalRecord> = load_eval_records(&a.pred)?;
    let gts: Vec<EvalRecord> = load_eval_records(&a.gt)?;
    let report = evaluate_with(&Exec::from_env(), &preds, &gts, a.topn)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
    Ok(())
}
