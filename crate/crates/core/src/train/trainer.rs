use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, logloss, uauc};
use super::optim::{adagrad_step, rmsprop_step, OptimizerState};
use super::fmt_float;
use crate::autodiff::Graph;
use crate::data::{lookup_and_concat, Dataset, EmbeddingSet, GroundTruth, Sample, Schema};
use crate::error::{Error, Result};
use crate::model::{Mode, RankMixer, RankMixerConfig};
use crate::moe::{AdaptiveLambda, ExpertUtilization, MoEConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// RMSProp learning rate for dense parameters.
    pub lr_dense: f64,
    /// Adagrad learning rate for embedding rows.
    pub lr_sparse: f64,
    /// Global L2 gradient-norm clip; `None` disables clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Steps between held-out evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Trailing fraction of the sample stream held out for evaluation.
    pub eval_fraction: f64,
    /// Samples per evaluation forward pass.
    pub eval_batch: usize,
    /// Training seeds; sweeps and ablations run every seed.
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 128,
            lr_dense: 0.01,
            lr_sparse: 0.15,
            clip_norm: Some(10.0),
            eval_interval: 0,
            eval_fraction: 0.1,
            eval_batch: 2048,
            seeds: vec![1],
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if self.eval_batch == 0 {
            errs.push("train.eval_batch must be >= 1".into());
        }
        for (k, v) in [("lr_dense", self.lr_dense), ("lr_sparse", self.lr_sparse)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("train.{k} must be positive"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                errs.push("train.clip_norm must be positive".into());
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            errs.push("train.eval_fraction must lie in (0, 1)".into());
        }
        if self.seeds.is_empty() {
            errs.push("train.seeds must list at least one seed".into());
        }
        errs
    }
}

/// Everything a run needs besides data, steps and seed.
#[derive(Clone, Copy, Debug)]
pub struct TrainSetup<'a> {
    pub schema: &'a Schema,
    pub model: &'a RankMixerConfig,
    pub moe: Option<&'a MoEConfig>,
    pub train: &'a TrainConfig,
}

/// Held-out metrics of one task at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub step: usize,
    pub task: String,
    /// `None` when the held-out split has a single class.
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub eligible_users: usize,
    pub logloss: f64,
    /// Fraction of positive inference gates; `None` without MoE.
    pub active_ratio: Option<f64>,
    pub wall_seconds: f64,
}

pub struct EvalResult {
    /// `logits[task][sample]`
    pub logits: Vec<Vec<f64>>,
    pub utilization: Option<ExpertUtilization>,
}

impl EvalResult {
    pub fn active_ratio(&self) -> Option<f64> {
        self.utilization.as_ref().map(ExpertUtilization::mean_active_ratio)
    }
}

pub struct TrainOutcome {
    pub model: RankMixer,
    pub embeddings: EmbeddingSet,
    pub metrics: Vec<MetricsReport>,
    /// Task loss of every training step.
    pub losses: Vec<f64>,
    /// Held-out expert utilization at the final step.
    pub utilization: Option<ExpertUtilization>,
    /// Sparsity coefficient after the last step.
    pub lambda: Option<f64>,
}

impl TrainOutcome {
    /// Final held-out metrics of `task`.
    pub fn final_metrics(&self, task: &str) -> Option<&MetricsReport> {
        self.metrics.iter().rev().find(|m| m.task == task)
    }

    pub fn final_auc(&self, task: &str) -> Option<f64> {
        self.final_metrics(task).and_then(|m| m.auc)
    }
}

pub(crate) fn task_labels(samples: &[Sample], task: &str) -> Result<Vec<u8>> {
    match task {
        "finish" => Ok(samples.iter().map(|s| s.finish).collect()),
        "skip" => Ok(samples.iter().map(|s| s.skip).collect()),
        other => Err(Error::Config(format!("unknown task '{other}' (expected finish or skip)"))),
    }
}

/// Per-tensor RMSProp rates: `lr / sqrt(fan_in)` for weight matrices, `lr`
/// for biases and norm parameters. Equivalent to plain RMSProp at `lr` on
/// unit-scale weights whose forward pass multiplies by `1 / sqrt(fan_in)`,
/// so the relative update size does not grow with width.
pub fn dense_learning_rates(model: &RankMixer, lr: f64) -> Vec<f64> {
    model.params().iter().map(|(_, p)| lr / (p.fan_in as f64).sqrt()).collect()
}

/// Seed of the embedding tables a run with `seed` starts from.
pub fn embedding_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0e3b_ed00_0001
}

/// Forward passes over `samples` in inference mode.
pub fn evaluate(model: &RankMixer, emb: &EmbeddingSet, schema: &Schema, samples: &[Sample], chunk: usize) -> Result<EvalResult> {
    let n_tasks = model.config().tasks.len();
    let mut logits = vec![Vec::with_capacity(samples.len()); n_tasks];
    let mut utilization = model
        .moe_config()
        .map(|m| ExpertUtilization::new(model.config().layers, model.config().tokens, m.experts));
    for batch in samples.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let lk = lookup_and_concat(&mut g, batch, emb, schema)?;
        let fwd = model.forward(&mut g, &p, lk.var, Mode::Infer)?;
        for row in g.value(fwd.logits).data().chunks_exact(n_tasks) {
            for (t, &z) in row.iter().enumerate() {
                logits[t].push(z);
            }
        }
        if let Some(u) = utilization.as_mut() {
            for (l, &gv) in fwd.gates.iter().enumerate() {
                u.record(l, g.value(gv).data());
            }
        }
    }
    Ok(EvalResult { logits, utilization })
}

fn metric_or_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn reports(
    model: &RankMixer,
    eval: &EvalResult,
    samples: &[Sample],
    step: usize,
    wall_seconds: f64,
) -> Result<Vec<MetricsReport>> {
    let users: Vec<u64> = samples.iter().map(|s| s.user_id).collect();
    let active_ratio = eval.active_ratio();
    model
        .config()
        .tasks
        .iter()
        .zip(&eval.logits)
        .map(|(task, z)| {
            let y = task_labels(samples, task)?;
            let (u, eligible_users) = match uauc(z, &y, &users) {
                Ok(u) => (Some(u.value), u.eligible_users),
                Err(Error::UndefinedMetric(_)) => (None, 0),
                Err(e) => return Err(e),
            };
            Ok(MetricsReport {
                step,
                task: task.clone(),
                auc: metric_or_none(auc(z, &y))?,
                uauc: u,
                eligible_users,
                logloss: logloss(z, &y)?,
                active_ratio,
                wall_seconds,
            })
        })
        .collect()
}

/// AUC of the generator's own logit on `samples`.
pub fn bayes_auc(truth: &GroundTruth, samples: &[Sample], task: &str) -> Result<f64> {
    let scores: Vec<f64> = match task {
        "finish" => samples.iter().map(|s| truth.finish_logit(s)).collect(),
        "skip" => samples.iter().map(|s| truth.skip_logit(s)).collect(),
        other => return Err(Error::Config(format!("unknown task '{other}'"))),
    };
    auc(&scores, &task_labels(samples, task)?)
}

/// Trains on the leading split of `dataset` and evaluates on the held-out
/// tail. A pure function of its arguments.
pub fn train(setup: &TrainSetup, dataset: &Dataset, steps: usize, seed: u64) -> Result<TrainOutcome> {
    let tc = setup.train;
    let v = tc.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    let schema = setup.schema;
    let tasks = &setup.model.tasks;
    for t in tasks {
        task_labels(&[], t)?;
    }
    let (train_set, eval_set) = dataset.split(tc.eval_fraction);
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Config(format!(
            "{} samples leave an empty train or held-out split",
            dataset.samples.len()
        )));
    }
    let mut model = RankMixer::new(setup.model.clone(), setup.moe.cloned(), schema.total_width(), seed)?;
    let mut emb = EmbeddingSet::new(schema, embedding_seed(seed));
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.value.len()).collect();
    let mut opt = OptimizerState::new(sizes, tc.lr_dense, tc.lr_sparse);
    let ids: Vec<_> = model.params().ids().collect();
    let dense_lrs = dense_learning_rates(&model, tc.lr_dense);
    let mut lambda = setup
        .moe
        .and_then(|m| m.target_active_ratio.map(|r| AdaptiveLambda::new(m.lambda, r, m.lambda_window)));
    let fixed_lambda = setup.moe.map(|m| m.lambda);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let bs = tc.batch_size.min(train_set.len());
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    let mut batch: Vec<Sample> = Vec::with_capacity(bs);

    for step in 0..steps {
        if tc.eval_interval > 0 && step > 0 && step % tc.eval_interval == 0 {
            let ev = evaluate(&model, &emb, schema, eval_set, tc.eval_batch)?;
            metrics.extend(reports(&model, &ev, eval_set, step, start.elapsed().as_secs_f64())?);
        }
        batch.clear();
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }
        let labels: Vec<Vec<f64>> = tasks
            .iter()
            .map(|t| task_labels(&batch, t).map(|y| y.into_iter().map(f64::from).collect()))
            .collect::<Result<_>>()?;

        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let lk = lookup_and_concat(&mut g, &batch, &emb, schema)?;
        let fwd = model.forward(&mut g, &p, lk.var, Mode::Train)?;
        let task_loss = model.task_loss(&mut g, fwd.logits, &labels)?;
        let loss = match fwd.reg {
            Some(r) => {
                let coeff = lambda.as_ref().map(AdaptiveLambda::lambda).or(fixed_lambda).unwrap_or(0.0);
                let pen = g.scale(r, coeff);
                g.add(task_loss, pen)?
            }
            None => task_loss,
        };
        let loss_value = g.value(task_loss).data()[0];
        if !g.value(loss).data()[0].is_finite() {
            return Err(divergence(&g, step, "loss"));
        }
        g.backward(loss)?;
        losses.push(loss_value);

        let mut dense: Vec<Vec<f64>> = p
            .vars()
            .iter()
            .zip(model.params().iter())
            .map(|(&v, (_, prm))| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; prm.value.len()]))
            .collect();
        let mut sparse = lk.sparse_grads(&g);
        let sq: f64 = dense.iter().flatten().map(|x| x * x).sum::<f64>() + sparse.sum_squares();
        if !sq.is_finite() {
            let detail = match g.first_non_finite() {
                Some((node, op)) => format!("non-finite gradient first produced at node {node} ({op})"),
                None => "non-finite gradient".into(),
            };
            return Err(Error::Divergence { step, detail });
        }
        if let Some(max_norm) = tc.clip_norm {
            let norm = sq.sqrt();
            if norm > max_norm {
                let c = max_norm / norm;
                dense.iter_mut().flatten().for_each(|x| *x *= c);
                sparse.scale(c);
            }
        }
        for ((id, grad), (v, &lr)) in ids.iter().zip(&dense).zip(opt.second_moments.iter_mut().zip(&dense_lrs)) {
            rmsprop_step(model.params_mut().get_mut(*id).data_mut(), grad, v, lr, opt.rho, opt.eps)?;
        }
        for (table, rows) in &sparse.tables {
            let t = &mut emb.tables_mut()[*table];
            for (&row, grad) in rows {
                let (w, acc) = t.row_and_accum_mut(row);
                adagrad_step(w, grad, acc, opt.lr_sparse, opt.eps)?;
            }
        }
        if let Some(al) = lambda.as_mut() {
            let (mut active, mut total) = (0, 0);
            for &gv in &fwd.gates {
                let d = g.value(gv).data();
                active += d.iter().filter(|&&x| x > 0.0).count();
                total += d.len();
            }
            al.observe(active, total);
        }
    }

    let ev = evaluate(&model, &emb, schema, eval_set, tc.eval_batch)?;
    metrics.extend(reports(&model, &ev, eval_set, steps, start.elapsed().as_secs_f64())?);
    Ok(TrainOutcome {
        model,
        embeddings: emb,
        metrics,
        losses,
        utilization: ev.utilization,
        lambda: lambda.map(|l| l.lambda()).or(fixed_lambda),
    })
}

fn divergence(g: &Graph, step: usize, what: &str) -> Error {
    let detail = match g.first_non_finite() {
        Some((node, op)) => format!("non-finite {what}; first offending op is {op} at node {node}"),
        None => format!("non-finite {what}"),
    };
    Error::Divergence { step, detail }
}

/// Metrics CSV body with header `step,task,auc,uauc,logloss,active_ratio`.
/// Undefined metrics are empty fields. Wall time is deliberately excluded.
pub fn metrics_csv(metrics: &[MetricsReport]) -> String {
    let opt = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
    let mut s = String::from("step,task,auc,uauc,logloss,active_ratio\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.step,
            m.task,
            opt(m.auc),
            opt(m.uauc),
            fmt_float(m.logloss),
            opt(m.active_ratio)
        );
    }
    s
}
