//! Episodic SGD with auxiliary co-training, schedules, early stopping and
//! the evaluation protocol.

mod schedule;

pub use schedule::{aux_probability, learning_rate, LrSchedule, DEFAULT_LR_INTERVAL};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::episodes::{episode_graph, run_episode, sample_episode, Episode, GraphOptions, QuerySpec};
use crate::model::{FewShotModel, ModelConfig};
use crate::numerics::{collect_gradient, BoundParams, ChannelStats, GradientVector, ParameterVector, Tape, Var};
use crate::{Error, Result};

/// Momentum applied to running normalization statistics after each pass.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub enabled: bool,
    /// Selection probability at the start of training.
    pub p0: f64,
    /// Number of decay steps over the run; 0 keeps the probability at `p0`.
    pub decay_steps: usize,
    pub batch_size: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { enabled: false, p0: 0.9, decay_steps: 20, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ways: usize,
    pub shots: usize,
    pub tasks_per_batch: usize,
    /// Queries per task, spread evenly over the classes.
    pub queries_per_task: usize,
    /// Total number of training steps `T`.
    pub episodes: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub lr_interval: usize,
    pub aux: AuxConfig,
    /// Steps between validation points.
    pub val_interval: usize,
    pub val_tasks: usize,
    pub val_queries: usize,
    /// Stop after this many validation points without improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults by shot count: 1-shot uses 5 tasks of 12 queries, 5-shot 2
    /// tasks of 32, 10-shot 1 task of 64.
    pub fn for_shots(ways: usize, shots: usize) -> Self {
        let (tasks_per_batch, queries_per_task) = match shots {
            1 => (5, 12),
            5 => (2, 32),
            10 => (1, 64),
            _ => (1, ways * shots),
        };
        Self {
            ways,
            shots,
            tasks_per_batch,
            queries_per_task,
            episodes: 10_000,
            momentum: 0.9,
            lr0: 0.1,
            lr_interval: DEFAULT_LR_INTERVAL,
            aux: AuxConfig::default(),
            val_interval: 200,
            val_tasks: 100,
            val_queries: 100,
            patience: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.ways < 2 || self.shots == 0 {
            return bad("ways must be at least 2 and shots at least 1");
        }
        if self.episodes == 0 {
            return bad("episodes must be positive");
        }
        if self.tasks_per_batch == 0 {
            return bad("tasks_per_batch must be at least 1");
        }
        if self.queries_per_task < self.ways {
            return bad("queries_per_task must give every class at least one query");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.lr_interval == 0 || self.val_interval == 0 {
            return bad("lr_interval and val_interval must be positive");
        }
        if self.val_tasks == 0 || self.val_queries < self.ways {
            return bad("validation needs at least one task and one query per class");
        }
        if self.aux.enabled && (!(self.aux.p0 > 0.0 && self.aux.p0 <= 1.0) || self.aux.batch_size == 0) {
            return bad("aux.p0 must lie in (0, 1] and aux.batch_size must be positive");
        }
        Ok(())
    }

    /// Seed of the validation tasks; every validation point reuses it.
    pub fn val_seed(&self) -> u64 {
        self.seed ^ 0x5eed_0f_7a11
    }

    /// Seed of the evaluation tasks shared by every row of an α sweep.
    pub fn sweep_seed(&self) -> u64 {
        self.seed ^ 0xa1fa
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { lr0: self.lr0, interval: self.lr_interval }
    }

    pub fn val_eval(&self) -> EvalConfig {
        EvalConfig {
            ways: self.ways,
            shots: self.shots,
            queries: QuerySpec::Total(self.val_queries),
            tasks: self.val_tasks,
            restarts: 1,
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self { momentum, velocity: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut ParameterVector, grad: &GradientVector, lr: f64) {
        assert_eq!(params.layout(), grad.layout(), "gradient layout must match parameters");
        for ((p, v), g) in params.values_mut().iter_mut().zip(&mut self.velocity).zip(grad.values()) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Training steps completed.
    pub t: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_ci: f64,
    pub lr: f64,
    pub aux_p: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "t,train_loss,val_acc,val_ci,lr,aux_p";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.t, r.train_loss, r.val_acc, r.val_ci, r.lr, r.aux_p));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: MetricsLog,
    pub best_val_acc: f64,
    /// Step count at which the retained parameters were recorded.
    pub best_t: usize,
    pub episodic_steps: usize,
    pub aux_steps: usize,
    pub stopped_early: bool,
}

/// Mean per-query loss averaged over `episodes`, recorded on `tape`
/// (penalties not included).
pub fn batch_objective(
    model: &FewShotModel,
    tape: &mut Tape,
    bound: &BoundParams,
    episodes: &[Episode],
) -> Result<(Var, Vec<Vec<ChannelStats>>)> {
    let mut total: Option<Var> = None;
    let mut stats = Vec::with_capacity(episodes.len());
    for e in episodes {
        let g = episode_graph(model, tape, bound, e, GraphOptions { training: true, ..GraphOptions::default() })?;
        let scaled = tape.scale(g.loss, 1.0 / (e.query_count() as f64 * episodes.len() as f64));
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
        stats.push(g.norm_stats);
    }
    let total = total.ok_or_else(|| Error::InvalidConfig("empty task batch".into()))?;
    Ok((total, stats))
}

/// Value and gradient of the batch objective plus penalties.
pub fn episodic_value_and_grad(
    model: &FewShotModel,
    episodes: &[Episode],
) -> Result<(f64, GradientVector, Vec<Vec<ChannelStats>>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let (obj, stats) = batch_objective(model, &mut tape, &bound, episodes)?;
    let total = match model.penalty_var(&mut tape, &bound) {
        Some(p) => tape.add(obj, p),
        None => obj,
    };
    finish_grad(model, &tape, &bound, total).map(|(v, g)| (v, g, stats))
}

fn finish_grad(model: &FewShotModel, tape: &Tape, bound: &BoundParams, out: Var) -> Result<(f64, GradientVector)> {
    if let Some(op) = tape.first_non_finite() {
        return Err(crate::numerics::NumericsError::NonFinite { context: format!("forward pass ({op})") }.into());
    }
    let value = tape.scalar_value(out);
    let g = collect_gradient(&tape.backward(out), bound, model.params());
    if let Some(seg) = g.non_finite_segment() {
        return Err(crate::numerics::NumericsError::NonFinite { context: format!("gradient of {seg}") }.into());
    }
    Ok((value, g))
}

/// Mean cross-entropy of the auxiliary head over one batch, plus penalties.
pub fn aux_value_and_grad(
    model: &FewShotModel,
    split: &DatasetSplit,
    ids: &[usize],
) -> Result<(f64, GradientVector, Vec<ChannelStats>)> {
    let classes = split.classes();
    let labels = ids
        .iter()
        .map(|&id| {
            let fine = split.store().fine_label(id);
            classes.binary_search(&fine).map_err(|_| Error::LabelOutOfRange { label: fine, classes: classes.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let x = tape.leaf(split.gather(ids));
    let mut norm = model.training_norm_context();
    let z = model.embed_var(&mut tape, &bound, x, None, &mut norm)?;
    let stats = norm.into_recorded();
    let logits = model.aux_logits(&mut tape, &bound, z)?;
    let ce = tape.cross_entropy_rows(logits, &labels, &vec![1.0 / ids.len() as f64; ids.len()]);
    let total = match model.penalty_var(&mut tape, &bound) {
        Some(p) => tape.add(ce, p),
        None => ce,
    };
    finish_grad(model, &tape, &bound, total).map(|(v, g)| (v, g, stats))
}

fn divergence(t: usize, e: Error) -> Error {
    match e {
        Error::Numerics(n) => Error::Divergence { step: t, reason: n.to_string() },
        other => other,
    }
}

/// Trains `model` in place and leaves it at the best validation snapshot.
pub fn train(
    model: &mut FewShotModel,
    config: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
) -> Result<TrainReport> {
    config.validate()?;
    if config.aux.enabled {
        match model.aux_classes() {
            Some(n) if n == train_split.classes().len() => {}
            Some(n) => {
                return Err(Error::InvalidConfig(format!(
                    "auxiliary head has {n} classes, training split has {}",
                    train_split.classes().len()
                )))
            }
            None => return Err(Error::InvalidConfig("auxiliary co-training needs a model with an auxiliary head".into())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let val_seed = config.val_seed();
    let schedule = config.schedule();
    let all_ids = train_split.example_ids();
    let mut sgd = Sgd::new(model.params().len(), config.momentum);
    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, ParameterVector, Vec<ChannelStats>)> = None;
    let mut since_best = 0usize;
    let (mut episodic_steps, mut aux_steps) = (0, 0);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut stopped_early = false;
    let total = config.episodes;
    for t in 0..total {
        let lr = schedule.at(t, total);
        let p_aux = aux_probability(t, total, config.aux.p0, config.aux.decay_steps);
        let u: f64 = rng.random();
        let (value, grad, stats) = if config.aux.enabled && u < p_aux {
            if all_ids.len() < config.aux.batch_size {
                return Err(Error::InsufficientData(format!(
                    "auxiliary batch of {} needs more than {} training examples",
                    config.aux.batch_size,
                    all_ids.len()
                )));
            }
            let ids: Vec<usize> =
                index::sample(&mut rng, all_ids.len(), config.aux.batch_size).into_iter().map(|i| all_ids[i]).collect();
            aux_steps += 1;
            let (v, g, s) = aux_value_and_grad(model, train_split, &ids).map_err(|e| divergence(t, e))?;
            (v, g, vec![s])
        } else {
            let episodes = (0..config.tasks_per_batch)
                .map(|_| sample_episode(train_split, config.ways, config.shots, QuerySpec::Total(config.queries_per_task), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            episodic_steps += 1;
            episodic_value_and_grad(model, &episodes).map_err(|e| divergence(t, e))?
        };
        sgd.step(model.params_mut(), &grad, lr);
        if let Some(i) = model.params().values().iter().position(|v| !v.is_finite()) {
            let seg = model.params().layout().owner_of(i).map(|s| s.name.clone()).unwrap_or_default();
            return Err(Error::Divergence { step: t, reason: format!("parameter in {seg} became non-finite") });
        }
        for s in &stats {
            model.update_norm_state(s, NORM_MOMENTUM);
        }
        loss_sum += value;
        loss_n += 1;

        let done = t + 1;
        if done % config.val_interval == 0 || done == total {
            let mut vrng = ChaCha8Rng::seed_from_u64(val_seed);
            let v = evaluate(model, val_split, &config.val_eval(), &mut vrng)?;
            log.rows.push(MetricsRow {
                t: done,
                train_loss: loss_sum / loss_n as f64,
                val_acc: v.mean,
                val_ci: v.ci95,
                lr,
                aux_p: if config.aux.enabled { p_aux } else { 0.0 },
            });
            loss_sum = 0.0;
            loss_n = 0;
            if best.as_ref().is_none_or(|b| v.mean > b.0) {
                best = Some((v.mean, done, model.params().clone(), model.norm_state().to_vec()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_val_acc, best_t, params, norm) = best.expect("at least one validation point");
    model.set_params(params)?;
    model.set_norm_state(norm)?;
    Ok(TrainReport { log, best_val_acc, best_t, episodic_steps, aux_steps, stopped_early })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: QuerySpec,
    pub tasks: usize,
    /// Independent evaluation rounds of `tasks` tasks each, pooled.
    pub restarts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Half-width `1.96 · stderr` over per-task accuracies.
    pub ci95: f64,
    pub per_task: Vec<f64>,
}

pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Accuracy over `tasks · restarts` random episodes of `split`.
pub fn evaluate<R: Rng + ?Sized>(
    model: &FewShotModel,
    split: &DatasetSplit,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<EvalResult> {
    if config.tasks == 0 || config.restarts == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one task and one round".into()));
    }
    let mut per_task = Vec::with_capacity(config.tasks * config.restarts);
    for _ in 0..config.tasks * config.restarts {
        let e = sample_episode(split, config.ways, config.shots, config.queries, rng)?;
        per_task.push(run_episode(model, &e)?.accuracy);
    }
    let (mean, ci95) = mean_ci95(&per_task);
    Ok(EvalResult { mean, ci95, per_task })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub acc: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row with the highest accuracy (earliest on ties).
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().fold(None, |b: Option<&SweepRow>, r| match b {
            Some(b) if b.acc >= r.acc => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,val_acc,val_ci\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.alpha, r.acc, r.ci95));
        }
        out
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("alpha grid is empty".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::InvalidConfig(format!("alpha grid value {a} is not positive")));
    }
    Ok(())
}

/// Trains one model per grid value (each with that fixed temperature) and
/// evaluates it on `val`. Every row uses the same evaluation tasks.
pub fn sweep_alpha(
    base: &ModelConfig,
    config: &TrainConfig,
    train_split: &DatasetSplit,
    val: &DatasetSplit,
    eval: &EvalConfig,
    grid: &[f64],
) -> Result<SweepTable> {
    check_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let mut cfg = base.clone();
        cfg.metric.alpha = crate::metric::AlphaSpec::Fixed(alpha);
        let mut model = FewShotModel::new(cfg)?;
        train(&mut model, config, train_split, val)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.sweep_seed());
        let r = evaluate(&model, val, eval, &mut rng)?;
        rows.push(SweepRow { alpha, acc: r.mean, ci95: r.ci95 });
    }
    Ok(SweepTable { rows })
}

/// Evaluates one trained model at each grid temperature.
pub fn sweep_alpha_fixed(model: &FewShotModel, val: &DatasetSplit, eval: &EvalConfig, grid: &[f64], seed: u64) -> Result<SweepTable> {
    check_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let mut m = model.clone();
        m.set_fixed_alpha(alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = evaluate(&m, val, eval, &mut rng)?;
        rows.push(SweepRow { alpha, acc: r.mean, ci95: r.ci95 });
    }
    Ok(SweepTable { rows })
}
