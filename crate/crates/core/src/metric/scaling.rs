//! Gradient regimes of the scaled class-wise loss.
//!
//! For class `k` the gradient of `J_k` divided by `α` tends to
//!
//! * `Σ_i [ (K−1)/K · ∂d(z_i, c_k) − 1/K · Σ_{j≠k} ∂d(z_i, c_j) ]` as `α → 0`,
//! * `Σ_i [ ∂d(z_i, c_k) − ∂d(z_i, c_{j*_i}) ]` as `α → ∞`, where `j*_i` is the
//!   nearest prototype of query `i`.
//!
//! The limits here are assembled from per-prototype distance gradients and
//! never go through the softmax, so they can be compared against the exact
//! gradient as an independent route.

use rand::Rng;

use crate::episodes::{episode_graph, Episode, GraphOptions};
use crate::metric::{argmin, scaled_class_probabilities, AlphaSpec, SimilarityKind};
use crate::model::{FewShotModel, MetricConfig, ModelConfig};
use crate::embedding::ExtractorConfig;
use crate::numerics::{collect_gradient, relative_error, BoundParams, GradientVector, NumericsError, Tape, Tensor};
use crate::{Error, Result};

/// Distances closer than this to the minimum make the nearest prototype
/// ambiguous.
pub const TIE_TOLERANCE: f64 = 1e-9;

fn check_class(episode: &Episode, k: usize) -> Result<Vec<usize>> {
    if k >= episode.ways {
        return Err(Error::LabelOutOfRange { label: k, classes: episode.ways });
    }
    let qs = episode.queries_of(k);
    if qs.is_empty() {
        return Err(Error::EmptyClass(k));
    }
    Ok(qs)
}

fn finite(g: GradientVector) -> Result<GradientVector> {
    match g.non_finite_segment() {
        Some(seg) => Err(NumericsError::NonFinite { context: seg.to_string() }.into()),
        None => Ok(g),
    }
}

/// Exact gradient of `J_k` at temperature `alpha`.
pub fn classwise_grad(model: &FewShotModel, episode: &Episode, k: usize, alpha: f64) -> Result<GradientVector> {
    AlphaSpec::Fixed(alpha).validate()?;
    check_class(episode, k)?;
    let weights: Vec<f64> = episode.query_labels.iter().map(|&y| if y == k { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let g = episode_graph(
        model,
        &mut tape,
        &bound,
        episode,
        GraphOptions { alpha: Some(alpha), query_weights: Some(&weights), training: false },
    )?;
    let grads = tape.backward(g.loss);
    finite(collect_gradient(&grads, &bound, model.params()))
}

/// Per-prototype distance gradients `∂d(z_i, c_j)/∂φ` on demand.
struct DistanceGrads {
    tape: Tape,
    bound: BoundParams,
    distances: Tensor,
    dist_var: crate::numerics::Var,
}

impl DistanceGrads {
    fn new(model: &FewShotModel, episode: &Episode) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, model.params());
        let g = episode_graph(model, &mut tape, &bound, episode, GraphOptions { alpha: Some(1.0), ..GraphOptions::default() })?;
        let distances = tape.value(g.distances).clone();
        Ok(Self { tape, bound, distances, dist_var: g.distances })
    }

    /// Gradient of `Σ_{(i,j)} w_ij · d(z_i, c_j)`.
    fn combination(&mut self, model: &FewShotModel, terms: &[(usize, usize, f64)]) -> Result<GradientVector> {
        let k = self.distances.row_len();
        let mut w = vec![0.0; self.distances.len()];
        for &(i, j, c) in terms {
            w[i * k + j] += c;
        }
        let out = self.tape.weighted_sum(self.dist_var, w);
        let grads = self.tape.backward(out);
        finite(collect_gradient(&grads, &self.bound, model.params()))
    }
}

/// Small-temperature limit of `(1/α)·∂J_k/∂φ`.
pub fn limit_grad_small_alpha(model: &FewShotModel, episode: &Episode, k: usize) -> Result<GradientVector> {
    let qs = check_class(episode, k)?;
    let mut dg = DistanceGrads::new(model, episode)?;
    let ways = episode.ways as f64;
    let mut terms = Vec::new();
    for &i in &qs {
        for j in 0..episode.ways {
            terms.push((i, j, if j == k { (ways - 1.0) / ways } else { -1.0 / ways }));
        }
    }
    dg.combination(model, &terms)
}

/// Contribution of one query to the large-temperature limit.
#[derive(Clone, Debug)]
pub struct QueryContribution {
    pub query: usize,
    pub nearest: usize,
    pub gradient: GradientVector,
}

impl QueryContribution {
    pub fn is_misclassified(&self, k: usize) -> bool {
        self.nearest != k
    }
}

#[derive(Clone, Debug)]
pub struct LargeAlphaLimit {
    pub total: GradientVector,
    pub contributions: Vec<QueryContribution>,
}

/// Large-temperature limit of `(1/α)·∂J_k/∂φ`, with per-query terms.
///
/// Fails with [`Error::TiedArgmin`] when a query's two nearest prototypes are
/// within [`TIE_TOLERANCE`].
pub fn limit_grad_large_alpha(model: &FewShotModel, episode: &Episode, k: usize) -> Result<LargeAlphaLimit> {
    let qs = check_class(episode, k)?;
    let mut dg = DistanceGrads::new(model, episode)?;
    let mut total = model.params().zeros_like();
    let mut contributions = Vec::with_capacity(qs.len());
    for &i in &qs {
        let row = dg.distances.row(i).to_vec();
        let nearest = argmin(&row);
        if row.iter().enumerate().any(|(j, &d)| j != nearest && d - row[nearest] <= TIE_TOLERANCE) {
            return Err(Error::TiedArgmin { query: i, tolerance: TIE_TOLERANCE });
        }
        let gradient = if nearest == k {
            model.params().zeros_like()
        } else {
            dg.combination(model, &[(i, k, 1.0), (i, nearest, -1.0)])?
        };
        total.add_scaled(&gradient, 1.0);
        contributions.push(QueryContribution { query: i, nearest, gradient });
    }
    Ok(LargeAlphaLimit { total, contributions })
}

/// `Σ_i [∂d(z_i, c_k) − Σ_j p_ij ∂d(z_i, c_j)]`: the gradient of `J_k`
/// divided by `α`, rebuilt from the softmax weights at `alpha` and the
/// per-prototype distance gradients.
pub fn softmax_weighted_grad(model: &FewShotModel, episode: &Episode, k: usize, alpha: f64) -> Result<GradientVector> {
    let qs = check_class(episode, k)?;
    let mut dg = DistanceGrads::new(model, episode)?;
    let mut terms = Vec::new();
    for &i in &qs {
        let p = scaled_class_probabilities(dg.distances.row(i), alpha)?;
        terms.push((i, k, 1.0));
        for (j, pj) in p.into_iter().enumerate() {
            terms.push((i, j, -pj));
        }
    }
    dg.combination(model, &terms)
}

/// Which limit to compare against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitSide {
    Small,
    Large,
}

impl LimitSide {
    pub fn name(self) -> &'static str {
        match self {
            LimitSide::Small => "small",
            LimitSide::Large => "large",
        }
    }
}

fn concat(parts: &[GradientVector]) -> Vec<f64> {
    parts.iter().flat_map(|g| g.values().iter().copied()).collect()
}

/// Limit gradients for every class, concatenated over `k`.
pub fn limit_all_classes(model: &FewShotModel, episode: &Episode, side: LimitSide) -> Result<Vec<f64>> {
    let parts = (0..episode.ways)
        .map(|k| match side {
            LimitSide::Small => limit_grad_small_alpha(model, episode, k),
            LimitSide::Large => limit_grad_large_alpha(model, episode, k).map(|l| l.total),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(concat(&parts))
}

/// `(1/α)·∂J_k/∂φ` for every class, concatenated over `k`.
pub fn normalized_grad_all_classes(model: &FewShotModel, episode: &Episode, alpha: f64) -> Result<Vec<f64>> {
    let parts = (0..episode.ways)
        .map(|k| classwise_grad(model, episode, k, alpha).map(|g| g.scaled(1.0 / alpha)))
        .collect::<Result<Vec<_>>>()?;
    Ok(concat(&parts))
}

/// `‖(1/α)·∇J − limit‖ / ‖limit‖` over all classes.
pub fn limit_relative_error(model: &FewShotModel, episode: &Episode, alpha: f64, side: LimitSide) -> Result<f64> {
    let limit = limit_all_classes(model, episode, side)?;
    let exact = normalized_grad_all_classes(model, episode, alpha)?;
    Ok(relative_error(&exact, &limit))
}

/// Shape of a random limit-verification instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaInstanceConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
}

impl Default for LemmaInstanceConfig {
    fn default() -> Self {
        Self { ways: 3, shots: 2, queries_per_class: 3, input_dim: 4, embed_dim: 4 }
    }
}

/// A linear embedder with random weights and an episode of uniform
/// `[−1, 1]` inputs.
pub fn random_lemma_instance<R: Rng + ?Sized>(config: &LemmaInstanceConfig, rng: &mut R) -> Result<(FewShotModel, Episode)> {
    let model = FewShotModel::new(ModelConfig {
        extractor: ExtractorConfig::linear(config.input_dim, config.embed_dim, false),
        ten: None,
        metric: MetricConfig { kind: SimilarityKind::SquaredEuclidean, alpha: AlphaSpec::Fixed(1.0) },
        aux_classes: None,
        seed: rng.random(),
    })?;
    let mut draw = |n: usize| -> Tensor {
        Tensor::matrix(n, config.input_dim, (0..n * config.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let ms = config.ways * config.shots;
    let q = config.ways * config.queries_per_class;
    let sample_x = draw(ms);
    let query_x = draw(q);
    let episode = Episode {
        ways: config.ways,
        shots: config.shots,
        sample_x,
        sample_labels: (0..config.ways).flat_map(|k| std::iter::repeat_n(k, config.shots)).collect(),
        query_x,
        query_labels: (0..config.ways).flat_map(|k| std::iter::repeat_n(k, config.queries_per_class)).collect(),
        class_ids: (0..config.ways).collect(),
    };
    Ok((model, episode))
}

/// Smallest gap between each query's nearest and second-nearest prototype,
/// and the number of misclassified queries.
pub fn nearest_gap(model: &FewShotModel, episode: &Episode) -> Result<(f64, usize)> {
    let dg = DistanceGrads::new(model, episode)?;
    let mut gap = f64::INFINITY;
    let mut wrong = 0;
    for i in 0..dg.distances.rows() {
        let row = dg.distances.row(i);
        let j = argmin(row);
        if j != episode.query_labels[i] {
            wrong += 1;
        }
        for (l, &d) in row.iter().enumerate() {
            if l != j {
                gap = gap.min(d - row[j]);
            }
        }
    }
    Ok((gap, wrong))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model(dim: usize) -> FewShotModel {
        let mut m = FewShotModel::new(ModelConfig {
            extractor: ExtractorConfig::linear(dim, dim, false),
            ten: None,
            metric: MetricConfig { kind: SimilarityKind::SquaredEuclidean, alpha: AlphaSpec::Fixed(1.0) },
            aux_classes: None,
            seed: 0,
        })
        .unwrap();
        let v = m.params_mut().values_mut();
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..dim {
            v[i * dim + i] = 1.0;
        }
        m
    }

    fn episode(sample: Vec<f64>, query: Vec<f64>, query_labels: Vec<usize>, dim: usize) -> Episode {
        let ms = sample.len() / dim;
        Episode {
            ways: 2,
            shots: ms / 2,
            sample_x: Tensor::matrix(ms, dim, sample),
            sample_labels: (0..2).flat_map(|k| std::iter::repeat_n(k, ms / 2)).collect(),
            query_x: Tensor::matrix(query_labels.len(), dim, query),
            query_labels,
            class_ids: vec![0, 1],
        }
    }

    #[test]
    fn per_class_gradients_add_up_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, e) = random_lemma_instance(&LemmaInstanceConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, m.params());
        let g = episode_graph(&m, &mut tape, &bound, &e, GraphOptions { alpha: Some(2.0), ..GraphOptions::default() }).unwrap();
        let total = collect_gradient(&tape.backward(g.loss), &bound, m.params());
        let mut sum = m.params().zeros_like();
        for k in 0..3 {
            sum.add_scaled(&classwise_grad(&m, &e, k, 2.0).unwrap(), 1.0);
        }
        assert!(relative_error(sum.values(), total.values()) < 1e-12);
    }

    #[test]
    fn two_way_small_limit_is_half_difference() {
        let m = identity_model(2);
        let e = episode(vec![0.0, 0.0, 2.0, 1.0], vec![0.5, -0.3], vec![0], 2);
        let limit = limit_grad_small_alpha(&m, &e, 0).unwrap();
        let mut dg = DistanceGrads::new(&m, &e).unwrap();
        let a = dg.combination(&m, &[(0, 0, 1.0)]).unwrap();
        let b = dg.combination(&m, &[(0, 1, 1.0)]).unwrap();
        let expect: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| 0.5 * (x - y)).collect();
        assert!(relative_error(limit.values(), &expect) < 1e-14);
    }

    #[test]
    fn symmetric_query_has_zero_small_limit() {
        // identity embedder, query on the bisector; the two distance
        // gradients are mirror images and their sum over both coordinates
        // of a symmetric weight pattern cancels.
        let m = identity_model(1);
        let e = episode(vec![-1.0, 1.0], vec![0.0], vec![0], 1);
        let limit = limit_grad_small_alpha(&m, &e, 0).unwrap();
        assert!(limit.values().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn correctly_classified_queries_give_zero_large_limit() {
        let m = identity_model(2);
        let e = episode(vec![0.0, 0.0, 3.0, 3.0], vec![0.1, 0.2, -0.2, 0.1], vec![0, 0], 2);
        let l = limit_grad_large_alpha(&m, &e, 0).unwrap();
        assert!(l.total.values().iter().all(|&v| v == 0.0));
        assert!(l.contributions.iter().all(|c| !c.is_misclassified(0)));
    }

    #[test]
    fn ties_are_rejected() {
        let m = identity_model(2);
        let e = episode(vec![-1.0, 0.0, 1.0, 0.0], vec![0.0, 0.7], vec![0], 2);
        assert!(matches!(limit_grad_large_alpha(&m, &e, 0), Err(Error::TiedArgmin { query: 0, .. })));
    }

    #[test]
    fn normalized_gradient_matches_softmax_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, e) = random_lemma_instance(&LemmaInstanceConfig::default(), &mut rng).unwrap();
        for alpha in [0.7, 1.4] {
            let exact = classwise_grad(&m, &e, 1, alpha).unwrap().scaled(1.0 / alpha);
            let rebuilt = softmax_weighted_grad(&m, &e, 1, alpha).unwrap();
            assert!(relative_error(exact.values(), rebuilt.values()) < 1e-12);
        }
    }
}
