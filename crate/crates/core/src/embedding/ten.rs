//! Task embedding network: maps the task representation `c̄` to per-layer
//! FILM parameters `γ = γ₀·h(c̄) + 1`, `β = β₀·g(c̄)`.
//!
//! Each conditioned layer owns two unshared predictors (one for γ, one for
//! β). A predictor is a projection of `c̄` to the layer width, one residual
//! layer at that width, and a linear read-out.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FilmVars;
use crate::numerics::{BoundParams, ParamBuilder, ParameterVector, SegmentId, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenConfig {
    /// L2 coefficient on each layer's γ₀ and β₀.
    pub penalty: f64,
    pub gamma0_init: f64,
    pub beta0_init: f64,
    /// Zero the predictors' read-out layers at initialization.
    pub zero_last_layer: bool,
}

impl Default for TenConfig {
    fn default() -> Self {
        Self { penalty: 0.01, gamma0_init: 0.0, beta0_init: 0.0, zero_last_layer: false }
    }
}

#[derive(Clone, Debug)]
struct Predictor {
    proj_w: SegmentId,
    proj_b: SegmentId,
    res_w: SegmentId,
    res_b: SegmentId,
    out_w: SegmentId,
    out_b: SegmentId,
}

#[derive(Clone, Debug)]
struct TenLayer {
    width: usize,
    gamma: Predictor,
    beta: Predictor,
    gamma0: SegmentId,
    beta0: SegmentId,
}

#[derive(Clone, Debug)]
pub struct TenBlock {
    config: TenConfig,
    input_dim: usize,
    layers: Vec<TenLayer>,
}

fn push_predictor<R: Rng + ?Sized>(
    builder: &mut ParamBuilder,
    rng: &mut R,
    prefix: &str,
    input_dim: usize,
    width: usize,
    zero_last: bool,
) -> Predictor {
    let mut normal = |n: usize, std: f64| -> Vec<f64> {
        let d = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    let proj = normal(input_dim * width, (2.0 / input_dim as f64).sqrt());
    let res = normal(width * width, (1.0 / width as f64).sqrt());
    let out = if zero_last { vec![0.0; width * width] } else { normal(width * width, 0.1 / (width as f64).sqrt()) };
    Predictor {
        proj_w: builder.push(&format!("{prefix}.proj.w"), vec![input_dim, width], proj),
        proj_b: builder.push(&format!("{prefix}.proj.b"), vec![width], vec![0.0; width]),
        res_w: builder.push(&format!("{prefix}.res.w"), vec![width, width], res),
        res_b: builder.push(&format!("{prefix}.res.b"), vec![width], vec![0.0; width]),
        out_w: builder.push(&format!("{prefix}.out.w"), vec![width, width], out),
        out_b: builder.push(&format!("{prefix}.out.b"), vec![width], vec![0.0; width]),
    }
}

impl Predictor {
    /// `c̄[1, D] → [width]`.
    fn forward(&self, tape: &mut Tape, p: &BoundParams, c_bar: Var, width: usize) -> Var {
        let h = tape.matmul(c_bar, p.var(self.proj_w));
        let h = tape.add_channel(h, p.var(self.proj_b));
        let h1 = tape.swish(h);
        let r = tape.matmul(h1, p.var(self.res_w));
        let r = tape.add_channel(r, p.var(self.res_b));
        let r = tape.swish(r);
        let h2 = tape.add(h1, r);
        let o = tape.matmul(h2, p.var(self.out_w));
        let o = tape.add_channel(o, p.var(self.out_b));
        tape.reshape(o, vec![width])
    }
}

impl TenBlock {
    pub fn build<R: Rng + ?Sized>(
        config: &TenConfig,
        input_dim: usize,
        widths: &[usize],
        builder: &mut ParamBuilder,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidConfig("task embedding network needs at least one FILM layer".into()));
        }
        if config.penalty < 0.0 {
            return Err(Error::InvalidConfig("TEN penalty must be non-negative".into()));
        }
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| {
                let gamma = push_predictor(builder, rng, &format!("ten.l{i}.gamma"), input_dim, width, config.zero_last_layer);
                let beta = push_predictor(builder, rng, &format!("ten.l{i}.beta"), input_dim, width, config.zero_last_layer);
                let gamma0 = builder.push(&format!("ten.l{i}.gamma0"), vec![1], vec![config.gamma0_init]);
                let beta0 = builder.push(&format!("ten.l{i}.beta0"), vec![1], vec![config.beta0_init]);
                TenLayer { width, gamma, beta, gamma0, beta0 }
            })
            .collect();
        Ok(Self { config: config.clone(), input_dim, layers })
    }

    pub fn config(&self) -> &TenConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// FILM parameters for every conditioned layer from `c̄[1, D]`.
    pub fn predict(&self, tape: &mut Tape, p: &BoundParams, c_bar: Var) -> Result<Vec<FilmVars>> {
        let shape = tape.shape(c_bar);
        if shape.len() != 2 || shape[0] != 1 || shape[1] != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: shape.iter().product() });
        }
        Ok(self
            .layers
            .iter()
            .map(|l| {
                let h = l.gamma.forward(tape, p, c_bar, l.width);
                let scaled = tape.scale_by(h, p.var(l.gamma0));
                let gamma = tape.add_const(scaled, 1.0);
                let g = l.beta.forward(tape, p, c_bar, l.width);
                let beta = tape.scale_by(g, p.var(l.beta0));
                FilmVars { gamma, beta }
            })
            .collect())
    }

    /// `penalty · Σ (γ₀² + β₀²)`.
    pub fn penalty(&self, tape: &mut Tape, p: &BoundParams) -> Option<Var> {
        if self.config.penalty == 0.0 {
            return None;
        }
        let mut total: Option<Var> = None;
        for l in &self.layers {
            for id in [l.gamma0, l.beta0] {
                let sq = tape.sum_squares(p.var(id));
                total = Some(match total {
                    Some(t) => tape.add(t, sq),
                    None => sq,
                });
            }
        }
        total.map(|t| tape.scale(t, self.config.penalty))
    }

    pub fn penalty_value(&self, params: &ParameterVector) -> f64 {
        self.config.penalty
            * self
                .layers
                .iter()
                .map(|l| params.get(l.gamma0)[0].powi(2) + params.get(l.beta0)[0].powi(2))
                .sum::<f64>()
    }

    /// `(γ₀, β₀)` per conditioned layer, shallowest first.
    pub fn post_multipliers(&self, params: &ParameterVector) -> Vec<(f64, f64)> {
        self.layers.iter().map(|l| (params.get(l.gamma0)[0], params.get(l.beta0)[0])).collect()
    }

    pub fn set_post_multipliers(&self, params: &mut ParameterVector, layer: usize, gamma0: f64, beta0: f64) {
        let l = &self.layers[layer];
        params.get_mut(l.gamma0)[0] = gamma0;
        params.get_mut(l.beta0)[0] = beta0;
    }

    /// Segments holding predictor weights (everything except γ₀/β₀).
    pub fn predictor_segments(&self) -> Vec<SegmentId> {
        self.layers
            .iter()
            .flat_map(|l| {
                [&l.gamma, &l.beta]
                    .into_iter()
                    .flat_map(|p| [p.proj_w, p.proj_b, p.res_w, p.res_b, p.out_w, p.out_b])
            })
            .collect()
    }

    pub fn post_multiplier_segments(&self) -> Vec<SegmentId> {
        self.layers.iter().flat_map(|l| [l.gamma0, l.beta0]).collect()
    }
}
