use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use stackelgrad::checkpoint::{load_generator, save_generator};
use stackelgrad::config::{load_json, Scenario};
use stackelgrad::game::{train_generator, TrainFailure};
use stackelgrad::lab::{
    ablation_diagnostic, adversarial_experiment, evaluate_poison, poisoning_experiment, prepare, ratio_experiment,
};
use stackelgrad::losses::LossKind;
use stackelgrad::report::quartile_variances;
use stackelgrad::{make_synthetic, Error, ExperimentSpec, LabeledDataset, Result, RunReport, SyntheticSpec, VERSION};

use crate::Io;

pub struct Context {
    pool: rayon::ThreadPool,
    quiet: bool,
    start: Instant,
}

impl Context {
    pub fn new(jobs: Option<usize>, quiet: bool) -> Self {
        let jobs = jobs.filter(|&j| j > 0).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
        Self { pool, quiet, start: Instant::now() }
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{:>7.1}s] {msg}", self.start.elapsed().as_secs_f64());
        }
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        self.pool.install(f)
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Checkpoint(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

pub fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(format!("need lo < hi, got {lo},{hi}"))
    }
}

fn load_spec(io: &Io) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = load_json(&io.spec)?;
    if let Some(seed) = io.seed {
        spec.game.seed = seed;
        spec.seeds = vec![seed];
    }
    spec.validate()?;
    Ok(spec)
}

fn out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `config.json` holds the effective spec; feeding it back reproduces the run.
fn echo_config(out: &Path, spec: &impl Serialize) -> Result<()> {
    write_json(&out.join("config.json"), spec)
}

pub fn gen_data(ctx: &Context, io: &Io) -> Result<()> {
    let mut spec: SyntheticSpec = load_json(&io.spec)?;
    if let Some(seed) = io.seed {
        spec.seed = seed;
    }
    out_dir(&io.out)?;
    let data = make_synthetic(&spec).map_err(|e| Error::config("dataset", e.to_string()))?;
    data.write_csv(&io.out.join("features.csv"), &io.out.join("labels.csv"))?;
    echo_config(&io.out, &spec)?;
    ctx.progress(&format!("wrote {} rows of width {}", data.len(), data.dim()));
    Ok(())
}

fn dataset(spec: &ExperimentSpec) -> Result<LabeledDataset> {
    prepare(spec).map_err(|e| match e {
        Error::Contract(detail) => Error::config("dataset", detail),
        other => other,
    })
}

fn run_summary(report: &RunReport) -> serde_json::Value {
    let (q1, q4) = if report.is_empty() { (0.0, 0.0) } else { quartile_variances(&report.j_c_series()) };
    json!({
        "steps": report.len(),
        "max_grad_ja_norm": report.max_grad_ja_norm(),
        "max_grad_ja_norm_raw": report.max_grad_ja_norm_raw(),
        "degenerate_steps": report.degenerate_steps(),
        "j_c_first_quartile_variance": q1,
        "j_c_last_quartile_variance": q4,
        "epochs": report.epoch_summaries(),
    })
}

pub fn train_gen(ctx: &Context, io: &Io) -> Result<()> {
    let spec = load_spec(io)?;
    out_dir(&io.out)?;
    echo_config(&io.out, &spec)?;
    let data = dataset(&spec)?;
    ctx.progress(&format!("training generator on {} rows, {} epochs", data.indices(stackelgrad::Split::Train).len(), spec.game.epochs));
    let outcome = ctx.run(|| train_generator(&spec.game, &data));
    let (report, status, error) = match outcome {
        Ok(t) => {
            save_generator(&io.out.join("generator.ckpt"), &t.generator, Some(spec.game.seed))?;
            (t.report, "ok", None)
        }
        Err(TrainFailure { error, report }) => (report, "failed", Some(error)),
    };
    report.write_csv(&io.out.join("trace.csv"))?;
    let mut summary = run_summary(&report);
    summary["version"] = json!(VERSION);
    summary["status"] = json!(status);
    summary["error"] = json!(error.as_ref().map(|e| e.to_string()));
    write_json(&io.out.join("summary.json"), &summary)?;
    ctx.progress(&format!("{} steps, status {status}", report.len()));
    error.map_or(Ok(()), Err)
}

pub fn poison(
    ctx: &Context,
    checkpoint: &Path,
    features: &Path,
    labels: &Path,
    out: &Path,
    clip: Option<(f64, f64)>,
) -> Result<()> {
    let (gen, _) = load_generator(checkpoint)?;
    let data = LabeledDataset::read_csv(features, labels, None).map_err(|e| Error::config(features.display().to_string(), e.to_string()))?;
    if data.dim() != gen.input_dim() {
        return Err(Error::config(
            features.display().to_string(),
            format!("dataset width {} does not match generator width {}", data.dim(), gen.input_dim()),
        ));
    }
    out_dir(out)?;
    let unclamped = gen.poisoned_features(data.features(), None)?;
    let max_pert = data.features().zip_map(&unclamped, |a, b| (b - a).abs()).max_abs();
    let poisoned = gen.poison(&data, clip)?;
    poisoned.write_csv(&out.join("features.csv"), &out.join("labels.csv"))?;
    println!("rows={} max_perturbation={max_pert:e} budget={:e}", data.len(), gen.budget());
    ctx.progress("poisoned dataset written");
    Ok(())
}

#[derive(Serialize)]
struct SeedRow {
    seed: u64,
    clean: f64,
    poisoned: f64,
}

#[derive(Serialize)]
struct CurveRow {
    seed: u64,
    epoch: usize,
    accuracy: f64,
}

fn curve_rows(seeds: &[u64], curves: &[Vec<f64>]) -> Vec<CurveRow> {
    seeds
        .iter()
        .zip(curves)
        .flat_map(|(&seed, c)| c.iter().enumerate().map(move |(epoch, &accuracy)| CurveRow { seed, epoch, accuracy }))
        .collect()
}

pub fn eval(ctx: &Context, io: &Io, checkpoint: Option<&Path>) -> Result<()> {
    let spec = load_spec(io)?;
    let gen = checkpoint.map(load_generator).transpose()?.map(|(g, _)| g);
    let data = dataset(&spec)?;
    if let Some(g) = &gen {
        if g.input_dim() != data.dim() {
            return Err(Error::config("dataset.features", format!("generator expects width {}", g.input_dim())));
        }
    }
    out_dir(&io.out)?;
    echo_config(&io.out, &spec)?;
    ctx.progress(&format!("evaluating over {} seeds", spec.seeds.len()));
    let report = ctx.run(|| evaluate_poison(gen.as_ref(), &data, &spec.victim, &LossKind::Ce, &spec.seeds, spec.game.clip_range))?;
    let rows: Vec<SeedRow> = (0..report.seeds.len())
        .map(|i| SeedRow { seed: report.seeds[i], clean: report.clean[i], poisoned: report.poisoned[i] })
        .collect();
    write_rows(&io.out.join("eval.csv"), &rows)?;
    write_rows(&io.out.join("curves.csv"), &curve_rows(&report.seeds, &report.poisoned_curves))?;
    write_json(&io.out.join("summary.json"), &json!({ "version": VERSION, "eval": report }))?;
    ctx.progress(&format!("clean {:.4} poisoned {:.4}", report.clean_mean, report.poisoned_mean));
    Ok(())
}

pub fn experiment(ctx: &Context, io: &Io) -> Result<()> {
    let spec = load_spec(io)?;
    let data = dataset(&spec)?;
    out_dir(&io.out)?;
    echo_config(&io.out, &spec)?;
    let mut summary = json!({ "version": VERSION, "scenario": spec.scenario });
    match spec.scenario {
        Scenario::Standard => {
            ctx.progress("poisoning experiment");
            let outcome = ctx.run(|| poisoning_experiment(&spec, &data))?;
            let eval = &outcome.eval;
            let rows: Vec<SeedRow> = outcome
                .runs
                .iter()
                .map(|r| SeedRow { seed: r.seed, clean: r.clean.final_accuracy(), poisoned: r.poisoned.final_accuracy() })
                .collect();
            write_rows(&io.out.join("poisoning.csv"), &rows)?;
            write_rows(&io.out.join("curves.csv"), &curve_rows(&eval.seeds, &eval.poisoned_curves))?;
            ctx.progress(&format!("clean {:.4} poisoned {:.4}", eval.clean_mean, eval.poisoned_mean));
            summary["poisoning"] = serde_json::to_value(eval)?;
            if spec.fractions != [1.0] {
                ctx.progress("ratio experiment");
                let table = ctx.run(|| ratio_experiment(&spec, &data))?;
                write_rows(&io.out.join("ratio.csv"), &table)?;
                for row in &table {
                    ctx.progress(&format!("fraction {} poisoned {:.4}", row.fraction, row.poisoned_mean));
                }
                summary["ratio"] = serde_json::to_value(&table)?;
            }
        }
        Scenario::Adversarial => {
            ctx.progress("adversarial grid");
            let grid = ctx.run(|| adversarial_experiment(&spec, &data))?;
            write_rows(&io.out.join("adversarial.csv"), &grid)?;
            for c in &grid {
                ctx.progress(&format!(
                    "game {} victim {}: clean {:.4} poisoned {:.4}",
                    c.game_radius, c.victim_radius, c.clean_mean, c.poisoned_mean
                ));
            }
            summary["adversarial"] = serde_json::to_value(&grid)?;
        }
    }
    write_json(&io.out.join("summary.json"), &summary)
}

pub fn diag(ctx: &Context, io: &Io) -> Result<()> {
    let spec = load_spec(io)?;
    let data = dataset(&spec)?;
    out_dir(&io.out)?;
    echo_config(&io.out, &spec)?;
    ctx.progress("ablation traces");
    let traces = ctx.run(|| ablation_diagnostic(&data, &spec.game))?;
    let mut summary = json!({ "version": VERSION });
    for (name, report) in traces.named() {
        report.write_csv(&io.out.join(format!("trace_{name}.csv")))?;
        ctx.progress(&format!("{name}: max grad norm {:.4e}", report.max_grad_ja_norm_raw()));
        summary[name] = run_summary(report);
    }
    write_json(&io.out.join("summary.json"), &summary)
}
