//! Hyperparameter sweeps over the demo scenarios, summarised per setting and
//! compared against a baseline setting with the paired tests.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::demo::{run_demo, DemoScenario, Method, Status};
use crate::error::{invalid, Error, Result};
use crate::stats::{compare, summarize, Comparison, SeedRunSet, Summary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMethod {
    /// Sweeps the temperature.
    Cwd,
    /// Sweeps the loss weight α.
    Mgd,
}

impl FromStr for SweepMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cwd" => Ok(Self::Cwd),
            "mgd" => Ok(Self::Mgd),
            other => Err(invalid(format!("unknown sweep method `{other}`; expected cwd or mgd"))),
        }
    }
}

impl SweepMethod {
    pub fn parameter(self) -> &'static str {
        match self {
            Self::Cwd => "temperature",
            Self::Mgd => "loss_weight",
        }
    }

    /// What each run contributes to its row. Projector training follows the
    /// raw reconstruction loss, so for MGD only the weighted term depends on α.
    pub fn metric(self) -> &'static str {
        match self {
            Self::Cwd => "final_loss",
            Self::Mgd => "weighted_final_loss",
        }
    }

    fn scenario(self, param: f64, seed: u64) -> DemoScenario {
        match self {
            Self::Cwd => DemoScenario::cwd_fixture(seed, param),
            Self::Mgd => {
                let mut s = DemoScenario::mgd_fixture(seed);
                if let Method::Mgd { loss_weight, .. } = &mut s.method {
                    *loss_weight = param;
                }
                s
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub method: SweepMethod,
    pub params: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Overrides the fixture step count.
    pub steps: Option<usize>,
    /// Index into `params` of the setting everything is compared against.
    pub baseline: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub param: f64,
    /// One value per seed, in seed order.
    pub values: Vec<f64>,
    pub summary: Summary,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub method: SweepMethod,
    pub parameter: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub baseline: f64,
    pub rows: Vec<SweepRow>,
    pub comparisons: Vec<Comparison>,
}

fn label(param: f64) -> String {
    format!("{param}")
}

/// Four significant digits, switching to exponent form for small or large
/// magnitudes.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 || (1e-3..1e4).contains(&x.abs()) {
        format!("{x:.4}")
    } else {
        format!("{x:.3e}")
    }
}

pub fn sweep(opts: &SweepOptions) -> Result<SweepReport> {
    if opts.params.is_empty() {
        return Err(invalid("no parameter values to sweep"));
    }
    if opts.seeds.len() < 2 {
        return Err(invalid("a sweep needs at least two seeds"));
    }
    if opts.baseline >= opts.params.len() {
        return Err(invalid(format!(
            "baseline index {} out of range for {} settings",
            opts.baseline,
            opts.params.len()
        )));
    }
    let jobs: Vec<(f64, u64)> = opts
        .params
        .iter()
        .flat_map(|&p| opts.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(param, seed)| {
            let mut scn = opts.method.scenario(param, seed);
            if let Some(steps) = opts.steps {
                scn.steps = steps;
            }
            let r = run_demo(&scn)?;
            if r.status == Status::Diverged {
                return Err(Error::NonFinite(format!("run with {param} and seed {seed} diverged")));
            }
            Ok(match opts.method {
                SweepMethod::Cwd => r.final_loss,
                SweepMethod::Mgd => param * r.final_loss,
            })
        })
        .collect::<Result<Vec<f64>>>()?;

    let rows = opts
        .params
        .iter()
        .zip(values.chunks(opts.seeds.len()))
        .map(|(&param, v)| {
            Ok(SweepRow {
                param,
                values: v.to_vec(),
                summary: summarize(v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let base = &rows[opts.baseline];
    let base_runs = SeedRunSet::new(label(base.param), base.values.clone());
    let comparisons = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != opts.baseline)
        .map(|(_, r)| compare(&SeedRunSet::new(label(r.param), r.values.clone()), &base_runs))
        .collect::<Result<Vec<_>>>()?;

    Ok(SweepReport {
        method: opts.method,
        parameter: opts.method.parameter().into(),
        metric: opts.method.metric().into(),
        seeds: opts.seeds.clone(),
        baseline: base.param,
        rows,
        comparisons,
    })
}

impl SweepReport {
    /// Plain-text table: one `mean ± std` row per setting, then the tests.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {} (mean ± std over {} seeds)", self.parameter, self.metric, self.seeds.len());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {} ± {}",
                label(r.param),
                format_sig(r.summary.mean),
                format_sig(r.summary.std)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "vs baseline {}:", label(self.baseline));
        let _ = writeln!(out, "{:<12} {:>10} {:>8} {:>8} {:>8}", self.parameter, "t", "p(t)", "W", "p(W)");
        for c in &self.comparisons {
            let t = c.t_test.map_or(("-".into(), "-".into()), |t| (format!("{:.2}", t.t), format!("{:.3}", t.p_two_sided)));
            let w = c.wilcoxon.map_or(("-".into(), "-".into()), |w| (format!("{}", w.w), format!("{:.3}", w.p_two_sided)));
            let _ = writeln!(out, "{:<12} {:>10} {:>8} {:>8} {:>8}", c.label, t.0, t.1, w.0, w.1);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.0), "0.0000");
        assert_eq!(format_sig(1.23456), "1.2346");
        assert_eq!(format_sig(3.2e-5), "3.200e-5");
    }

    #[test]
    fn rejects_degenerate_requests() {
        let opts = SweepOptions {
            method: SweepMethod::Cwd,
            params: vec![1.0],
            seeds: vec![0],
            steps: Some(2),
            baseline: 0,
        };
        assert!(sweep(&opts).is_err());
        let opts = SweepOptions { seeds: vec![0, 1], baseline: 1, ..opts };
        assert!(sweep(&opts).is_err());
    }
}
