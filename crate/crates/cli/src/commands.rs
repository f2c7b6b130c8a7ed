use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use distillkit::bench::{self, BenchOp, BenchOptions};
use distillkit::demo::{run_demo_full, write_outputs, DemoScenario, Method, Status, FIXTURE_SEED};
use distillkit::deteval::{evaluate, parse_class_names, parse_detections, parse_ground_truth, ClassId, EvalConfig};
use distillkit::gradcheck::{self, Target};
use distillkit::stats::{compare, group_by_label, pair_runs, parse_seed_csv, summarize, SeedRunSet};
use distillkit::sweep::{self, format_sig, SweepMethod, SweepOptions};

use crate::{Failure, MethodArg};

type CmdResult = Result<(), Failure>;

/// Unreadable inputs are the caller's mistake, so they count as invalid.
fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn with_path(path: &Path, e: distillkit::Error) -> Failure {
    match Failure::from(e) {
        Failure::Invalid(m) => Failure::Invalid(format!("{}: {m}", path.display())),
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn emit(text: &str, out: Option<&Path>) -> CmdResult {
    match out {
        Some(path) => fs::write(path, format!("{text}\n"))
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum IouSet {
    /// IoU 0.50 only.
    Ap50,
    /// IoU 0.50:0.05:0.95.
    Ap5095,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth JSON-lines file.
    #[arg(long)]
    gt: PathBuf,
    /// Detection JSON-lines file.
    #[arg(long)]
    det: PathBuf,
    /// Class ids to drop before matching, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    exclude_classes: Vec<ClassId>,
    #[arg(long, value_enum, default_value = "ap5095")]
    iou_set: IouSet,
    /// JSON object mapping class id to display name.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Confidence threshold for the reported precision and recall.
    #[arg(long, default_value_t = 0.0)]
    score_threshold: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let gts = parse_ground_truth(&read_input(&a.gt)?).map_err(|e| with_path(&a.gt, e))?;
    let dets = parse_detections(&read_input(&a.det)?).map_err(|e| with_path(&a.det, e))?;
    let base = match a.iou_set {
        IouSet::Ap50 => EvalConfig::ap50(),
        IouSet::Ap5095 => EvalConfig::default(),
    };
    let cfg = EvalConfig {
        report_score_threshold: a.score_threshold,
        ..base.excluding(a.exclude_classes)
    };
    let mut result = evaluate(&dets, &gts, &cfg)?;
    if let Some(path) = &a.names {
        let names = parse_class_names(&read_input(path)?).map_err(|e| with_path(path, e))?;
        result.attach_names(&names);
    }
    emit(&to_json(&result), a.out.as_deref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    Conv,
    Cwd,
    Mgd,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    module: ModuleArg,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: corrupt the analytic gradient.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let target = match a.module {
        ModuleArg::Conv => Target::Conv,
        ModuleArg::Cwd => Target::Cwd,
        ModuleArg::Mgd => Target::Mgd,
    };
    let opts = gradcheck::Options {
        trials: a.trials as usize,
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..Default::default()
    };
    let report = gradcheck::run(target, &opts)?;
    println!("{}", to_json(&report));
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn method_of(m: MethodArg) -> SweepMethod {
    match m {
        MethodArg::Cwd => SweepMethod::Cwd,
        MethodArg::Mgd => SweepMethod::Mgd,
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Temperatures (cwd) or loss weights (mgd), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    params: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Setting the others are compared with; defaults to the first.
    #[arg(long)]
    baseline: Option<f64>,
    /// Override the number of training steps per run.
    #[arg(long)]
    steps: Option<usize>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let baseline = match a.baseline {
        None => 0,
        Some(b) => a
            .params
            .iter()
            .position(|&p| p == b)
            .ok_or_else(|| Failure::Invalid(format!("baseline {b} is not one of the swept values")))?,
    };
    let report = sweep::sweep(&SweepOptions {
        method: method_of(a.method),
        params: a.params,
        seeds: a.seeds,
        steps: a.steps,
        baseline,
    })?;
    if a.json {
        println!("{}", to_json(&report));
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok([n, c, h, w]),
        _ => Err("expected four positive sizes as NxCxHxW".into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OpArg {
    Cwd,
    Mgd,
    Eval,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    op: OpArg,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    runs: u64,
    /// Feature shape for cwd and mgd.
    #[arg(long, default_value = "1x16x32x32", value_parser = parse_dims)]
    dims: [usize; 4],
    /// Ground-truth boxes in the synthetic eval scene.
    #[arg(long, default_value_t = 1000)]
    boxes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let op = match a.op {
        OpArg::Cwd => BenchOp::Cwd,
        OpArg::Mgd => BenchOp::Mgd,
        OpArg::Eval => BenchOp::Eval,
    };
    let opts = BenchOptions {
        warmup: a.warmup,
        runs: a.runs as usize,
        seed: a.seed,
        dims: a.dims,
        boxes: a.boxes,
    };
    let stats = bench::run(op, &opts)?;
    if a.json {
        let value = json!({
            "op": op,
            "dims": if op == BenchOp::Eval { None } else { Some(a.dims) },
            "boxes": if op == BenchOp::Eval { Some(a.boxes) } else { None },
            "stats": stats,
        });
        println!("{}", to_json(&value));
    } else {
        println!(
            "{op}: {} ± {} ms (p50 {}, p95 {}) over {} runs after {} warmup",
            format_sig(stats.mean_ms),
            format_sig(stats.std_ms),
            format_sig(stats.p50_ms),
            format_sig(stats.p95_ms),
            stats.runs,
            stats.warmup
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Output directory for trajectory.jsonl, summary.json and the maps.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = FIXTURE_SEED)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// CWD temperature.
    #[arg(long, default_value_t = 4.0)]
    temperature: f64,
    /// MGD mask ratio.
    #[arg(long, default_value_t = 0.5)]
    mask_ratio: f64,
    /// MGD loss weight.
    #[arg(long, default_value_t = 2e-5)]
    alpha: f64,
    /// Narrower student, exercising the alignment layer.
    #[arg(long)]
    student_channels: Option<usize>,
}

pub fn demo(a: DemoArgs) -> CmdResult {
    let mut scn = match a.method {
        MethodArg::Cwd => DemoScenario::cwd_fixture(a.seed, a.temperature),
        MethodArg::Mgd => DemoScenario {
            method: Method::Mgd {
                mask_ratio: a.mask_ratio,
                loss_weight: a.alpha,
            },
            ..DemoScenario::mgd_fixture(a.seed)
        },
    };
    if let Some(steps) = a.steps {
        scn.steps = steps;
    }
    if let Some(lr) = a.lr {
        scn.lr = lr;
    }
    if let Some(c) = a.student_channels {
        scn.student_channels = c;
    }
    let run = run_demo_full(&scn)?;
    write_outputs(&a.out, &run).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let r = &run.report;
    println!(
        "{}: {:?} after {} steps, loss {} -> {} (ratio {}), attention L1 {} -> {}; wrote {}",
        scn.method.name(),
        r.status,
        r.losses.len(),
        format_sig(r.initial_loss),
        format_sig(r.final_loss),
        format_sig(r.ratio),
        format_sig(r.attention_l1_before),
        format_sig(r.attention_l1_after),
        a.out.display()
    );
    if r.status == Status::Diverged {
        return Err(Failure::Runtime("training diverged".into()));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// CSV with columns label,seed,metric,value.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    metric: String,
    /// Label every other label is compared with.
    #[arg(long)]
    baseline: String,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct LabelSummary {
    label: String,
    n: usize,
    mean: f64,
    std: f64,
}

pub fn stats(a: StatsArgs) -> CmdResult {
    let records = parse_seed_csv(&read_input(&a.csv)?).map_err(|e| with_path(&a.csv, e))?;
    let grouped = group_by_label(&records, &a.metric);
    if grouped.is_empty() {
        return Err(Failure::Invalid(format!("no rows for metric `{}`", a.metric)));
    }
    if !grouped.contains_key(&a.baseline) {
        return Err(Failure::Invalid(format!("no rows for baseline label `{}`", a.baseline)));
    }
    let mut summaries = Vec::new();
    for (label, runs) in &grouped {
        let values: Vec<f64> = runs.values().copied().collect();
        let s = summarize(&values).map_err(|e| with_path(&a.csv, e))?;
        summaries.push(LabelSummary {
            label: label.clone(),
            n: s.n,
            mean: s.mean,
            std: s.std,
        });
    }
    let mut comparisons = Vec::new();
    for label in grouped.keys().filter(|l| **l != a.baseline) {
        let (runs, base): (SeedRunSet, SeedRunSet) = pair_runs(&grouped, label, &a.baseline)?;
        comparisons.push(compare(&runs, &base)?);
    }
    if a.json {
        let value = json!({
            "metric": a.metric,
            "baseline": a.baseline,
            "summaries": summaries,
            "comparisons": comparisons,
        });
        println!("{}", to_json(&value));
        return Ok(());
    }
    println!("{} (mean ± std)", a.metric);
    for s in &summaries {
        println!("{:<16} {:.3} ± {:.3}  (n={})", s.label, s.mean, s.std, s.n);
    }
    println!();
    println!("vs {}:", a.baseline);
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "label", "t", "p(t)", "W", "p(W)");
    for c in &comparisons {
        let t = c.t_test.map_or(("-".into(), "-".into()), |t| (format!("{:.2}", t.t), format!("{:.3}", t.p_two_sided)));
        let w = c.wilcoxon.map_or(("-".into(), "-".into()), |w| (format!("{}", w.w), format!("{:.3}", w.p_two_sided)));
        println!("{:<16} {:>8} {:>8} {:>8} {:>8}", c.label, t.0, t.1, w.0, w.1);
    }
    Ok(())
}
