//! Episode sampling, prototypes, and the two-pass conditioned inference
//! pipeline.
//!
//! Labels inside an [`Episode`] are 0-based class slots `0..K`; the original
//! dataset classes are kept in `class_ids`. Sample-set rows are stored
//! class-major (all shots of slot 0, then slot 1, ...).

use rand::seq::index;
use rand::Rng;

use crate::data::DatasetSplit;
use crate::embedding::FilmVars;
use crate::metric::{argmin, distance_matrix, scaled_class_probabilities, scaled_logits, AlphaVar, ScaledMetricHead};
use crate::model::FewShotModel;
use crate::numerics::{BoundParams, ChannelStats, NumericsError, ScalarProgram, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    /// `[M·K, ...input_shape]`.
    pub sample_x: Tensor,
    pub sample_labels: Vec<usize>,
    /// `[q, ...input_shape]`.
    pub query_x: Tensor,
    pub query_labels: Vec<usize>,
    /// Dataset-level class of each slot.
    pub class_ids: Vec<usize>,
}

impl Episode {
    pub fn query_count(&self) -> usize {
        self.query_labels.len()
    }

    /// Query indices whose label is `k`.
    pub fn queries_of(&self, k: usize) -> Vec<usize> {
        self.query_labels.iter().enumerate().filter(|(_, &y)| y == k).map(|(i, _)| i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::InvalidConfig(format!("an episode needs at least 2 classes, got {}", self.ways)));
        }
        if self.sample_x.rows() != self.sample_labels.len() {
            return Err(Error::DimensionMismatch { expected: self.sample_labels.len(), got: self.sample_x.rows() });
        }
        if self.query_x.rows() != self.query_labels.len() {
            return Err(Error::DimensionMismatch { expected: self.query_labels.len(), got: self.query_x.rows() });
        }
        if self.sample_x.shape()[1..] != self.query_x.shape()[1..] {
            return Err(Error::InvalidConfig("sample and query inputs have different shapes".into()));
        }
        for &y in self.sample_labels.iter().chain(&self.query_labels) {
            if y >= self.ways {
                return Err(Error::LabelOutOfRange { label: y, classes: self.ways });
            }
        }
        Ok(())
    }
}

/// How many queries an episode draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySpec {
    PerClass(usize),
    /// Spread as evenly as possible over the classes; the remainder goes to
    /// randomly chosen classes.
    Total(usize),
}

impl QuerySpec {
    fn counts<R: Rng + ?Sized>(self, ways: usize, rng: &mut R) -> Vec<usize> {
        match self {
            QuerySpec::PerClass(n) => vec![n; ways],
            QuerySpec::Total(q) => {
                let mut counts = vec![q / ways; ways];
                for k in index::sample(rng, ways, q % ways) {
                    counts[k] += 1;
                }
                counts
            }
        }
    }
}

/// Draws `ways` distinct classes uniformly, then `shots` sample and the
/// requested number of query examples per class, all distinct.
pub fn sample_episode<R: Rng + ?Sized>(
    split: &DatasetSplit,
    ways: usize,
    shots: usize,
    queries: QuerySpec,
    rng: &mut R,
) -> Result<Episode> {
    if ways < 2 || shots == 0 {
        return Err(Error::InvalidConfig(format!("need ways >= 2 and shots >= 1, got {ways}-way {shots}-shot")));
    }
    let classes = split.classes();
    if classes.len() < ways {
        return Err(Error::InsufficientData(format!(
            "split '{}' has {} classes, episode needs {ways}",
            split.name(),
            classes.len()
        )));
    }
    let picked: Vec<usize> = index::sample(rng, classes.len(), ways).into_iter().map(|i| classes[i]).collect();
    let q_counts = queries.counts(ways, rng);
    let mut sample_ids = Vec::with_capacity(ways * shots);
    let mut query_ids = Vec::new();
    let mut query_labels = Vec::new();
    for (slot, (&class, &nq)) in picked.iter().zip(&q_counts).enumerate() {
        let pool = split.examples_of(class);
        let need = shots + nq;
        if pool.len() < need {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} examples, episode needs {need}",
                pool.len()
            )));
        }
        let chosen: Vec<usize> = index::sample(rng, pool.len(), need).into_iter().map(|i| pool[i]).collect();
        sample_ids.extend_from_slice(&chosen[..shots]);
        query_ids.extend_from_slice(&chosen[shots..]);
        query_labels.extend(std::iter::repeat_n(slot, nq));
    }
    Ok(Episode {
        ways,
        shots,
        sample_x: split.gather(&sample_ids),
        sample_labels: (0..ways).flat_map(|k| std::iter::repeat_n(k, shots)).collect(),
        query_x: split.gather(&query_ids),
        query_labels,
        class_ids: picked,
    })
}

/// Class prototypes `c_k` and the task representation `c̄ = mean_k c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub task_repr: Vec<f64>,
}

impl PrototypeSet {
    pub fn from_prototypes(prototypes: Vec<Vec<f64>>) -> Result<Self> {
        let first = prototypes.first().ok_or(Error::EmptyClass(0))?;
        let d = first.len();
        if let Some(p) = prototypes.iter().find(|p| p.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: p.len() });
        }
        let k = prototypes.len() as f64;
        let mut task_repr = vec![0.0; d];
        for p in &prototypes {
            for (t, v) in task_repr.iter_mut().zip(p) {
                *t += v;
            }
        }
        task_repr.iter_mut().for_each(|t| *t /= k);
        Ok(Self { prototypes, task_repr })
    }

    pub fn ways(&self) -> usize {
        self.prototypes.len()
    }
}

/// Per-class means of `embeddings` grouped by `labels ∈ 0..ways`, each
/// divided by that class's own sample count.
pub fn compute_prototypes(embeddings: &[Vec<f64>], labels: &[usize], ways: usize) -> Result<PrototypeSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: embeddings.len() });
    }
    let d = embeddings.first().map(Vec::len).ok_or(Error::EmptyClass(0))?;
    let mut sums = vec![vec![0.0; d]; ways];
    let mut counts = vec![0usize; ways];
    for (z, &y) in embeddings.iter().zip(labels) {
        if y >= ways {
            return Err(Error::LabelOutOfRange { label: y, classes: ways });
        }
        if z.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: z.len() });
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(z) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    PrototypeSet::from_prototypes(sums)
}

/// Nearest prototype and the scaled class probabilities. Ties go to the
/// lowest class index.
pub fn classify_query(prototypes: &PrototypeSet, z: &[f64], head: &ScaledMetricHead) -> Result<(usize, Vec<f64>)> {
    let row = head.distance_row(z, prototypes)?;
    let p = scaled_class_probabilities(&row, head.alpha)?;
    Ok((argmin(&row), p))
}

/// Knobs for [`episode_graph`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphOptions<'a> {
    /// Use this fixed temperature instead of the model's.
    pub alpha: Option<f64>,
    /// Per-query weights of the loss sum (all ones when absent).
    pub query_weights: Option<&'a [f64]>,
    /// Normalize with batch statistics regardless of the configured mode.
    pub training: bool,
}

/// Nodes of one recorded episode.
pub struct EpisodeGraph {
    /// `[q, K]` query-to-prototype distances.
    pub distances: Var,
    /// `[q, K]` logits `−α·D`.
    pub logits: Var,
    /// Weighted per-class cross-entropy summed over queries.
    pub loss: Var,
    /// `[K, D_z]` prototypes from the conditioned pass.
    pub prototypes: Var,
    /// `[1, D_z]` task representation from the first pass (TEN models only).
    pub task_repr: Option<Var>,
    pub film: Option<Vec<FilmVars>>,
    /// Normalization statistics of the final pass.
    pub norm_stats: Vec<ChannelStats>,
}

fn averaging_matrix(labels: &[usize], ways: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; ways];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    let n = labels.len();
    let mut a = vec![0.0; ways * n];
    for (i, &y) in labels.iter().enumerate() {
        a[y * n + i] = 1.0 / counts[y] as f64;
    }
    Ok(Tensor::matrix(ways, n, a))
}

/// Records the episode pipeline on `tape`.
///
/// Without a task embedding network this is a single unconditioned pass over
/// the sample and query sets. With one, the sample set is first embedded
/// unconditioned to obtain `c̄`, the network predicts the FILM parameters, and
/// both sets are embedded again under them in a single batch.
pub fn episode_graph(
    model: &FewShotModel,
    tape: &mut Tape,
    bound: &BoundParams,
    episode: &Episode,
    options: GraphOptions<'_>,
) -> Result<EpisodeGraph> {
    episode.validate()?;
    let ms = episode.sample_labels.len();
    let q = episode.query_count();
    let avg = tape.leaf(averaging_matrix(&episode.sample_labels, episode.ways)?);

    let (film, task_repr) = match model.ten() {
        Some(ten) => {
            let xs = tape.leaf(episode.sample_x.clone());
            let mut norm = if options.training { model.training_norm_context() } else { model.norm_context() };
            let zs = model.embed_var(tape, bound, xs, None, &mut norm)?;
            let protos = tape.matmul(avg, zs);
            let mean = tape.leaf(Tensor::matrix(1, episode.ways, vec![1.0 / episode.ways as f64; episode.ways]));
            let c_bar = tape.matmul(mean, protos);
            (Some(ten.predict(tape, bound, c_bar)?), Some(c_bar))
        }
        None => (None, None),
    };

    let both = tape.leaf(Tensor::stack_rows(&[&episode.sample_x, &episode.query_x]));
    let mut norm = if options.training { model.training_norm_context() } else { model.norm_context() };
    let z = model.embed_var(tape, bound, both, film.as_deref(), &mut norm)?;
    let norm_stats = norm.into_recorded();
    let zs = tape.slice_rows(z, 0, ms);
    let zq = tape.slice_rows(z, ms, ms + q);
    let prototypes = tape.matmul(avg, zs);
    let distances = distance_matrix(tape, model.head().kind, zq, prototypes);
    let alpha = match options.alpha {
        Some(a) => AlphaVar::Const(a),
        None => model.alpha_var(tape, bound),
    };
    let logits = scaled_logits(tape, distances, alpha);
    let ones;
    let weights = match options.query_weights {
        Some(w) => {
            if w.len() != q {
                return Err(Error::DimensionMismatch { expected: q, got: w.len() });
            }
            w
        }
        None => {
            ones = vec![1.0; q];
            &ones
        }
    };
    let loss = tape.cross_entropy_rows(logits, &episode.query_labels, weights);
    Ok(EpisodeGraph { distances, logits, loss, prototypes, task_repr, film, norm_stats })
}

/// Summed per-class cross-entropy of one episode plus the model's penalty
/// terms, as a function of the model parameters.
pub struct EpisodeProgram<'a> {
    pub model: &'a FewShotModel,
    pub episode: &'a Episode,
}

impl ScalarProgram for EpisodeProgram<'_> {
    fn evaluate(&self, tape: &mut Tape, params: &BoundParams) -> Result<Var, NumericsError> {
        let g = episode_graph(self.model, tape, params, self.episode, GraphOptions::default()).map_err(|e| match e {
            Error::Numerics(n) => n,
            other => NumericsError::Invalid(other.to_string()),
        })?;
        Ok(match self.model.penalty_var(tape, params) {
            Some(p) => tape.add(g.loss, p),
            None => g.loss,
        })
    }
}

/// Everything [`run_episode`] reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutput {
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Per-class cross-entropy summed over all queries.
    pub episode_loss: f64,
    pub penalty: f64,
    /// `episode_loss + penalty`.
    pub loss: f64,
    pub accuracy: f64,
    pub prototypes: PrototypeSet,
}

/// Two-pass conditioned inference on one episode.
pub fn run_episode(model: &FewShotModel, episode: &Episode) -> Result<EpisodeOutput> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let g = episode_graph(model, &mut tape, &bound, episode, GraphOptions::default())?;
    let penalty = model.penalty_var(&mut tape, &bound);
    let total = match penalty {
        Some(p) => tape.add(g.loss, p),
        None => g.loss,
    };
    if let Some(op) = tape.first_non_finite() {
        return Err(crate::numerics::NumericsError::NonFinite { context: format!("episode forward pass ({op})") }.into());
    }
    let alpha = model.alpha();
    let dist = tape.value(g.distances);
    let mut probabilities = Vec::with_capacity(dist.rows());
    let mut predictions = Vec::with_capacity(dist.rows());
    for i in 0..dist.rows() {
        probabilities.push(scaled_class_probabilities(dist.row(i), alpha)?);
        predictions.push(argmin(dist.row(i)));
    }
    let correct = predictions.iter().zip(&episode.query_labels).filter(|(p, y)| p == y).count();
    let protos = tape.value(g.prototypes);
    let prototypes = PrototypeSet::from_prototypes((0..protos.rows()).map(|k| protos.row(k).to_vec()).collect())?;
    let episode_loss = tape.scalar_value(g.loss);
    let loss = tape.scalar_value(total);
    Ok(EpisodeOutput {
        probabilities,
        predictions,
        episode_loss,
        penalty: penalty.map(|p| tape.scalar_value(p)).unwrap_or(0.0),
        loss,
        accuracy: correct as f64 / episode.query_count().max(1) as f64,
        prototypes,
    })
}
