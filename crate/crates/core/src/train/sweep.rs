use std::fmt::{self, Write as _};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::fmt_float;
use super::trainer::{train, MetricsReport, TrainOutcome, TrainSetup};
use crate::cost::dense_flops_estimate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::RankMixerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Tokens,
    Dim,
    Layers,
    /// Configs scaled along different axes to a matched parameter count.
    ParamsMatched,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Tokens => "T",
            SweepAxis::Dim => "D",
            SweepAxis::Layers => "L",
            SweepAxis::ParamsMatched => "params-matched",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "tokens" => Ok(SweepAxis::Tokens),
            "D" | "d" | "dim" => Ok(SweepAxis::Dim),
            "L" | "l" | "layers" => Ok(SweepAxis::Layers),
            "params-matched" => Ok(SweepAxis::ParamsMatched),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepPoint {
    pub tokens: usize,
    pub dim: usize,
    pub layers: usize,
}

impl SweepPoint {
    pub fn of(c: &RankMixerConfig) -> Self {
        SweepPoint { tokens: c.tokens, dim: c.dim, layers: c.layers }
    }

    pub fn apply(&self, base: &RankMixerConfig) -> RankMixerConfig {
        let mut c = base.clone();
        c.tokens = self.tokens;
        c.dim = self.dim;
        c.layers = self.layers;
        if c.heads.is_some() {
            c.heads = Some(self.tokens);
        }
        c
    }
}

impl SweepAxis {
    /// Points varying this axis of `base` over `values`.
    pub fn grid(&self, base: &RankMixerConfig, values: &[usize]) -> Result<Vec<SweepPoint>> {
        let p = SweepPoint::of(base);
        match self {
            SweepAxis::Tokens => Ok(values.iter().map(|&v| SweepPoint { tokens: v, ..p }).collect()),
            SweepAxis::Dim => Ok(values.iter().map(|&v| SweepPoint { dim: v, ..p }).collect()),
            SweepAxis::Layers => Ok(values.iter().map(|&v| SweepPoint { layers: v, ..p }).collect()),
            SweepAxis::ParamsMatched => {
                let factor = values.first().copied().unwrap_or(2);
                params_matched_set(base, factor)
            }
        }
    }
}

fn ffn_params(c: &RankMixerConfig) -> usize {
    crate::cost::ffn_param_closed_form(c.ffn_ratio, c.layers, c.tokens, c.dim)
}

/// Three configs with `factor` times the FFN parameters of `base`, scaled
/// via `T`, `D` and `L` respectively. `D` is rounded to a multiple of `T`;
/// every member must land within 10% of the target.
pub fn params_matched_set(base: &RankMixerConfig, factor: usize) -> Result<Vec<SweepPoint>> {
    if factor == 0 {
        return Err(Error::Config("params-matched factor must be >= 1".into()));
    }
    let p = SweepPoint::of(base);
    let ideal = p.dim as f64 * (factor as f64).sqrt();
    let step = p.tokens.max(1) as f64;
    let dim = ((ideal / step).round().max(1.0) * step) as usize;
    let set = vec![
        SweepPoint { tokens: p.tokens * factor, ..p },
        SweepPoint { dim, ..p },
        SweepPoint { layers: p.layers * factor, ..p },
    ];
    let target = (ffn_params(base) * factor) as f64;
    for q in &set {
        let n = ffn_params(&q.apply(base)) as f64;
        if (n / target - 1.0).abs() > 0.10 {
            return Err(Error::Config(format!(
                "cannot match {target} FFN params within 10% at T={} D={} L={} ({n})",
                q.tokens, q.dim, q.layers
            )));
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub seed: u64,
    pub params: usize,
    pub flops_per_sample: f64,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Set when a member run failed; `rows` then holds the runs that finished
    /// before the failure in grid order.
    pub aborted: Option<String>,
}

impl SweepReport {
    /// `axis,tokens,dim,layers,seed,params,flops_per_sample,auc,uauc,status`;
    /// an aborted sweep ends with a row whose status is `aborted`.
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
        let mut s = String::from("axis,tokens,dim,layers,seed,params,flops_per_sample,auc,uauc,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},ok",
                self.axis,
                r.point.tokens,
                r.point.dim,
                r.point.layers,
                r.seed,
                r.params,
                fmt_float(r.flops_per_sample),
                opt(r.auc),
                opt(r.uauc)
            );
        }
        if let Some(msg) = &self.aborted {
            let _ = writeln!(s, "{},,,,,,,,,aborted: {}", self.axis, msg.replace([',', '\n'], ";"));
        }
        s
    }

    /// Median final AUC of each grid point across seeds, in grid order.
    pub fn median_auc(&self) -> Vec<(SweepPoint, f64)> {
        let mut out: Vec<(SweepPoint, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let Some(a) = r.auc else { continue };
            match out.iter_mut().find(|(p, _)| *p == r.point) {
                Some((_, v)) => v.push(a),
                None => out.push((r.point, vec![a])),
            }
        }
        out.into_iter().map(|(p, v)| (p, median(v))).collect()
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs `jobs` independent closures concurrently, returning results in input order.
fn run_parallel<T: Send, F: Fn(usize) -> T + Sync>(n: usize, jobs: usize, f: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("unpoisoned").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Trains every (point, seed) on the same data and reports the first task's
/// final held-out AUC.
pub fn scaling_sweep(
    setup: &TrainSetup,
    dataset: &Dataset,
    axis: SweepAxis,
    points: &[SweepPoint],
    seeds: &[u64],
    jobs: usize,
) -> SweepReport {
    let runs: Vec<(SweepPoint, u64)> = points.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    let results = run_parallel(runs.len(), jobs, |i| {
        let (point, seed) = runs[i];
        let cfg = point.apply(setup.model);
        let s = TrainSetup { model: &cfg, ..*setup };
        let out = train(&s, dataset, setup.train.steps, seed)?;
        let params = out.model.total_param_count();
        let flops = dense_flops_estimate(cfg.ffn_ratio as f64, cfg.layers, cfg.tokens, cfg.dim)?;
        let task = &cfg.tasks[0];
        let m = out.final_metrics(task).cloned();
        Ok::<_, Error>(SweepRow {
            point,
            seed,
            params,
            flops_per_sample: flops,
            auc: m.as_ref().and_then(|m| m.auc),
            uauc: m.and_then(|m| m.uauc),
        })
    });
    let mut rows = Vec::new();
    let mut aborted = None;
    for (r, (p, seed)) in results.into_iter().zip(&runs) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                aborted = Some(format!("T={} D={} L={} seed={seed}: {e}", p.tokens, p.dim, p.layers));
                break;
            }
        }
    }
    SweepReport { axis, rows, aborted }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub task: String,
    /// Mean over seeds.
    pub auc: f64,
    pub uauc: f64,
    pub delta_auc: f64,
    pub delta_uauc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `per_seed[variant][seed] = final AUC per task`.
    pub per_seed: Vec<(String, Vec<Vec<f64>>)>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,task,auc,uauc,delta_auc,delta_uauc\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant,
                r.task,
                fmt_float(r.auc),
                fmt_float(r.uauc),
                fmt_float(r.delta_auc),
                fmt_float(r.delta_uauc)
            );
        }
        s
    }
}

fn mean_over<F: Fn(&MetricsReport) -> Option<f64>>(outs: &[TrainOutcome], task: &str, f: F) -> Result<f64> {
    let mut sum = 0.0;
    for o in outs {
        let m = o.final_metrics(task).ok_or_else(|| Error::Evaluation(format!("no metrics for task {task}")))?;
        sum += f(m).ok_or_else(|| Error::UndefinedMetric(format!("held-out split of task {task} has one class")))?;
    }
    Ok(sum / outs.len() as f64)
}

/// Baseline versus each single toggle, all seeds, mean final metrics with
/// deltas against the baseline.
pub fn ablate(setup: &TrainSetup, dataset: &Dataset, toggles: &[String], seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    let mut variants = vec![("baseline".to_string(), setup.model.clone())];
    for t in toggles {
        let mut c = setup.model.clone();
        c.toggles = c.toggles.with(t)?;
        variants.push((t.clone(), c));
    }
    let runs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = run_parallel(runs.len(), jobs, |i| {
        let (v, seed) = runs[i];
        let s = TrainSetup { model: &variants[v].1, ..*setup };
        train(&s, dataset, setup.train.steps, seed)
    });
    let mut grouped: Vec<Vec<TrainOutcome>> = (0..variants.len()).map(|_| Vec::new()).collect();
    for (r, &(v, _)) in results.into_iter().zip(&runs) {
        grouped[v].push(r?);
    }
    let tasks = &setup.model.tasks;
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    let mut base = Vec::new();
    for (vi, ((name, _), outs)) in variants.iter().zip(&grouped).enumerate() {
        per_seed.push((
            name.clone(),
            outs.iter().map(|o| tasks.iter().map(|t| o.final_auc(t).unwrap_or(f64::NAN)).collect()).collect(),
        ));
        for (ti, task) in tasks.iter().enumerate() {
            let a = mean_over(outs, task, |m| m.auc)?;
            let u = mean_over(outs, task, |m| m.uauc)?;
            if vi == 0 {
                base.push((a, u));
            }
            let (ba, bu) = base[ti];
            rows.push(AblationRow {
                variant: name.clone(),
                task: task.clone(),
                auc: a,
                uauc: u,
                delta_auc: a - ba,
                delta_uauc: u - bu,
            });
        }
    }
    Ok(AblationReport { rows, per_seed })
}

/// Parses a metrics CSV produced by `metrics_csv`.
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Evaluation("empty metrics CSV".into()))?;
    if header != "step,task,auc,uauc,logloss,active_ratio" {
        return Err(Error::Evaluation(format!("unexpected metrics header '{header}'")));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Evaluation(format!("line {line}: bad number '{s}'")))
        }
    };
    lines
        .enumerate()
        .map(|(i, l)| {
            let line = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Evaluation(format!("line {line}: expected 6 fields, got {}", f.len())));
            }
            Ok(MetricsReport {
                step: f[0].parse().map_err(|_| Error::Evaluation(format!("line {line}: bad step '{}'", f[0])))?,
                task: f[1].to_string(),
                auc: num(f[2], line)?,
                uauc: num(f[3], line)?,
                eligible_users: 0,
                logloss: num(f[4], line)?.ok_or_else(|| Error::Evaluation(format!("line {line}: missing logloss")))?,
                active_ratio: num(f[5], line)?,
                wall_seconds: 0.0,
            })
        })
        .collect()
}
