//! Similarity measures, the temperature-scaled softmax over prototypes, and
//! the per-class episodic cross-entropy.
//!
//! Distances follow the "smaller is closer" convention: squared Euclidean
//! distance, and `−cos(z, c)` for the cosine metric. Class probabilities are
//! `softmax(−α·d)`.

pub mod scaling;

use serde::{Deserialize, Serialize};

use crate::episodes::PrototypeSet;
use crate::numerics::{dot, norm, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarityKind {
    SquaredEuclidean,
    Cosine,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::SquaredEuclidean => "euclidean",
            SimilarityKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" | "squared-euclidean" => Some(SimilarityKind::SquaredEuclidean),
            "cosine" | "cosine-distance" => Some(SimilarityKind::Cosine),
            _ => None,
        }
    }
}

/// How the temperature α is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaSpec {
    Fixed(f64),
    /// Learned through a `log α` parameter, starting at `init`.
    Trainable { init: f64 },
}

impl AlphaSpec {
    pub fn initial(self) -> f64 {
        match self {
            AlphaSpec::Fixed(a) | AlphaSpec::Trainable { init: a } => a,
        }
    }

    pub fn validate(self) -> Result<()> {
        let a = self.initial();
        if a.is_finite() && a > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("alpha must be positive and finite, got {a}")))
        }
    }
}

/// Similarity kind plus a concrete temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledMetricHead {
    pub kind: SimilarityKind,
    pub alpha: f64,
}

impl ScaledMetricHead {
    pub fn new(kind: SimilarityKind, alpha: f64) -> Result<Self> {
        AlphaSpec::Fixed(alpha).validate()?;
        Ok(Self { kind, alpha })
    }

    pub fn distance_row(&self, z: &[f64], prototypes: &PrototypeSet) -> Result<Vec<f64>> {
        prototypes.prototypes.iter().map(|c| distance(self.kind, z, c)).collect()
    }

    pub fn probabilities(&self, z: &[f64], prototypes: &PrototypeSet) -> Result<Vec<f64>> {
        scaled_class_probabilities(&self.distance_row(z, prototypes)?, self.alpha)
    }
}

pub fn distance(kind: SimilarityKind, z: &[f64], c: &[f64]) -> Result<f64> {
    if z.len() != c.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), got: c.len() });
    }
    match kind {
        SimilarityKind::SquaredEuclidean => Ok(z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()),
        SimilarityKind::Cosine => {
            let (nz, nc) = (norm(z), norm(c));
            if nz == 0.0 || nc == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(-dot(z, c) / (nz * nc))
        }
    }
}

/// `p_j ∝ exp(−α d_j)`, evaluated with max subtraction.
pub fn scaled_class_probabilities(row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    if row.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", row.len())));
    }
    if let Some(i) = row.iter().position(|d| !d.is_finite()) {
        return Err(crate::numerics::NumericsError::NonFinite { context: format!("distance row entry {i}") }.into());
    }
    let logits: Vec<f64> = row.iter().map(|d| -alpha * d).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Index of the smallest entry, ties resolved towards the lower index.
pub fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &d) in row.iter().enumerate().skip(1) {
        if d < row[best] {
            best = j;
        }
    }
    best
}

/// Episodic loss `Σ_i [α d(z_i, c_{y_i}) + log Σ_j exp(−α d(z_i, c_j))]`
/// computed directly from embeddings.
pub fn episode_loss(
    query: &[Vec<f64>],
    labels: &[usize],
    prototypes: &PrototypeSet,
    head: &ScaledMetricHead,
) -> Result<f64> {
    if query.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: query.len(), got: labels.len() });
    }
    let k = prototypes.prototypes.len();
    let mut total = 0.0;
    for (z, &y) in query.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let row = head.distance_row(z, prototypes)?;
        let logits: Vec<f64> = row.iter().map(|d| -head.alpha * d).collect();
        total += head.alpha * row[y] + crate::numerics::log_sum_exp(&logits);
    }
    Ok(total)
}

/// Distance matrix `[q, K]` between query rows and prototype rows on the tape.
pub fn distance_matrix(tape: &mut Tape, kind: SimilarityKind, queries: Var, prototypes: Var) -> Var {
    match kind {
        SimilarityKind::SquaredEuclidean => tape.pairwise_sq_dist(queries, prototypes),
        SimilarityKind::Cosine => tape.pairwise_neg_cos(queries, prototypes),
    }
}

/// Temperature applied on the tape: a constant, or `exp(log α)` of a parameter.
#[derive(Clone, Copy, Debug)]
pub enum AlphaVar {
    Const(f64),
    Var(Var),
}

/// Logits `−α · D`.
pub fn scaled_logits(tape: &mut Tape, distances: Var, alpha: AlphaVar) -> Var {
    match alpha {
        AlphaVar::Const(a) => tape.scale(distances, -a),
        AlphaVar::Var(a) => {
            let neg = tape.scale(distances, -1.0);
            tape.scale_by(neg, a)
        }
    }
}
