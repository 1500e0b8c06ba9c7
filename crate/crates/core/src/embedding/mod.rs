//! Feature extractors `f_φ(x, Γ)` and FILM conditioning.
//!
//! Three extractor shapes are available: a single dense layer, a small MLP,
//! and a residual convolutional stack (blocks of 3×3 conv → batch norm →
//! FILM → swish units with a 1×1 projected shortcut, each block followed by
//! 2×2 max pooling, filters doubling per block, global average pooling at
//! the end). Conditionable layers are numbered shallowest first.

mod ten;

pub use ten::{TenBlock, TenConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{BoundParams, ChannelStats, ParamBuilder, SegmentId, Tape, Tensor, Var};
use crate::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExtractorKind {
    Linear { out_dim: usize, bias: bool },
    Mlp { hidden: Vec<usize>, out_dim: usize },
    MiniResnet { blocks: usize, depth: usize, base_filters: usize },
}

/// Which conditionable layers receive FILM parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilmLayers {
    None,
    All,
    /// Only the last layer of each block (the layer preceding max pooling).
    PrePool,
    /// Only the deepest layer.
    Last,
}

impl FilmLayers {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(FilmLayers::None),
            "all" => Some(FilmLayers::All),
            "pre-pool" | "prepool" => Some(FilmLayers::PrePool),
            "last" => Some(FilmLayers::Last),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilmLayers::None => "none",
            FilmLayers::All => "all",
            FilmLayers::PrePool => "pre-pool",
            FilmLayers::Last => "last",
        }
    }
}

/// Normalization statistics used by the residual stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Statistics of the current forward batch.
    Batch,
    /// Running statistics accumulated during training. Training passes
    /// still normalize with batch statistics so the running values can be
    /// estimated.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Shape of one input example: `[D_x]` for dense extractors, `[C, H, W]`
    /// for the residual stack.
    pub input_shape: Vec<usize>,
    pub film_layers: FilmLayers,
    /// L2 coefficient on extractor weights (biases and norm affines excluded).
    pub weight_decay: f64,
    /// Fixed multiplier on the output embedding.
    pub output_scale: f64,
    pub norm: NormMode,
}

impl ExtractorConfig {
    pub fn linear(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            kind: ExtractorKind::Linear { out_dim, bias },
            input_shape: vec![in_dim],
            film_layers: FilmLayers::None,
            weight_decay: 0.0,
            output_scale: 1.0,
            norm: NormMode::Batch,
        }
    }

    pub fn mlp(in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> Self {
        Self {
            kind: ExtractorKind::Mlp { hidden, out_dim },
            input_shape: vec![in_dim],
            film_layers: FilmLayers::All,
            weight_decay: 0.0005,
            output_scale: 1.0,
            norm: NormMode::Batch,
        }
    }

    /// Desk-scale residual stack: 2 blocks of depth 3, 8 base filters.
    pub fn mini_resnet(channels: usize, height: usize, width: usize) -> Self {
        Self {
            kind: ExtractorKind::MiniResnet { blocks: 2, depth: 3, base_filters: 8 },
            input_shape: vec![channels, height, width],
            film_layers: FilmLayers::All,
            weight_decay: 0.0005,
            output_scale: 1.0,
            norm: NormMode::Batch,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Per-layer FILM parameters `(γ, β)`, shallowest layer first.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FilmParams {
    pub fn identity(widths: &[usize]) -> Self {
        Self { layers: widths.iter().map(|&w| (vec![1.0; w], vec![0.0; w])).collect() }
    }
}

/// FILM parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FilmVars {
    pub gamma: Var,
    pub beta: Var,
}

/// `γ ⊙ h + β`, channel-wise over `[N, C, ...]` activations.
pub fn film_apply(activations: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let shape = activations.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidConfig(format!("FILM needs [N, C, ...] activations, got {shape:?}")));
    }
    let c = shape[1];
    for v in [gamma, beta] {
        if v.len() != c {
            return Err(Error::DimensionMismatch { expected: c, got: v.len() });
        }
    }
    let mut tape = Tape::new();
    let h = tape.leaf(activations.clone());
    let g = tape.leaf(Tensor::vector(gamma.to_vec()));
    let b = tape.leaf(Tensor::vector(beta.to_vec()));
    let out = film_apply_var(&mut tape, h, FilmVars { gamma: g, beta: b });
    Ok(tape.value(out).clone())
}

pub fn film_apply_var(tape: &mut Tape, h: Var, film: FilmVars) -> Var {
    let scaled = tape.mul_channel(h, film.gamma);
    tape.add_channel(scaled, film.beta)
}

/// Normalization state for one forward pass.
pub struct NormContext<'a> {
    mode: NormMode,
    running: &'a [ChannelStats],
    recorded: Vec<ChannelStats>,
}

impl<'a> NormContext<'a> {
    pub fn new(mode: NormMode, running: &'a [ChannelStats]) -> Self {
        Self { mode, running, recorded: Vec::new() }
    }

    /// Batch statistics observed during the pass, in layer order.
    pub fn into_recorded(self) -> Vec<ChannelStats> {
        self.recorded
    }

    fn normalize(&mut self, tape: &mut Tape, x: Var, index: usize) -> Var {
        match self.mode {
            NormMode::Batch => {
                let (y, stats) = tape.batch_norm(x, BN_EPS);
                self.recorded.push(stats);
                y
            }
            NormMode::Frozen => tape.fixed_norm(x, &self.running[index], BN_EPS),
        }
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    w: SegmentId,
    b: Option<SegmentId>,
    film: Option<usize>,
    activation: bool,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    w: SegmentId,
    scale: SegmentId,
    shift: SegmentId,
    norm_index: usize,
    film: Option<usize>,
}

#[derive(Clone, Debug)]
struct ResBlock {
    convs: Vec<ConvUnit>,
    shortcut: ConvUnit,
}

#[derive(Clone, Debug)]
enum Layers {
    Dense(Vec<DenseLayer>),
    Resnet(Vec<ResBlock>),
}

/// A built feature extractor: layer descriptors pointing into a parameter
/// vector it does not own.
#[derive(Clone, Debug)]
pub struct Extractor {
    config: ExtractorConfig,
    layers: Layers,
    film_widths: Vec<usize>,
    norm_widths: Vec<usize>,
    weights: Vec<SegmentId>,
    embedding_dim: usize,
}

fn select_film(mode: FilmLayers, block_sizes: &[usize]) -> Vec<bool> {
    let total: usize = block_sizes.iter().sum();
    let mut out = Vec::with_capacity(total);
    for (bi, &n) in block_sizes.iter().enumerate() {
        for li in 0..n {
            out.push(match mode {
                FilmLayers::None => false,
                FilmLayers::All => true,
                FilmLayers::PrePool => li + 1 == n,
                FilmLayers::Last => bi + 1 == block_sizes.len() && li + 1 == n,
            });
        }
    }
    out
}

fn normal_init<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl Extractor {
    /// Registers the extractor's parameters on `builder`, shallowest first.
    pub fn build<R: Rng + ?Sized>(config: &ExtractorConfig, builder: &mut ParamBuilder, rng: &mut R) -> Result<Self> {
        if config.input_shape.is_empty() || config.input_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!("input shape {:?} must be non-empty", config.input_shape)));
        }
        if !(config.output_scale.is_finite() && config.output_scale > 0.0) {
            return Err(Error::InvalidConfig("output_scale must be positive".into()));
        }
        if config.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        match &config.kind {
            ExtractorKind::Linear { out_dim, bias } => {
                Self::build_dense(config, &[], *out_dim, *bias, builder, rng)
            }
            ExtractorKind::Mlp { hidden, out_dim } => Self::build_dense(config, hidden, *out_dim, true, builder, rng),
            ExtractorKind::MiniResnet { blocks, depth, base_filters } => {
                Self::build_resnet(config, *blocks, *depth, *base_filters, builder, rng)
            }
        }
    }

    fn build_dense<R: Rng + ?Sized>(
        config: &ExtractorConfig,
        hidden: &[usize],
        out_dim: usize,
        bias: bool,
        builder: &mut ParamBuilder,
        rng: &mut R,
    ) -> Result<Self> {
        if out_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig("dense layer widths must be positive".into()));
        }
        let linear = hidden.is_empty();
        // Conditionable layers: the hidden layers, or the single layer of a linear map.
        let cond_sizes: Vec<usize> = if linear { vec![out_dim] } else { hidden.to_vec() };
        let flags = select_film(config.film_layers, &[cond_sizes.len()]);
        let mut widths: Vec<usize> = hidden.to_vec();
        widths.push(out_dim);
        let mut fan_in = config.input_len();
        let mut layers = Vec::new();
        let mut weights = Vec::new();
        let mut film_widths = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let is_out = i + 1 == widths.len();
            let std = if is_out { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let ws = builder.push(&format!("ext.dense{i}.w"), vec![fan_in, w], normal_init(rng, fan_in * w, std));
            weights.push(ws);
            let b = (bias || !is_out).then(|| builder.push(&format!("ext.dense{i}.b"), vec![w], vec![0.0; w]));
            let cond_index = if linear { Some(0) } else if is_out { None } else { Some(i) };
            let film = match cond_index {
                Some(ci) if flags[ci] => {
                    film_widths.push(w);
                    Some(film_widths.len() - 1)
                }
                _ => None,
            };
            layers.push(DenseLayer { w: ws, b, film, activation: !is_out });
            fan_in = w;
        }
        Ok(Self {
            config: config.clone(),
            layers: Layers::Dense(layers),
            film_widths,
            norm_widths: Vec::new(),
            weights,
            embedding_dim: out_dim,
        })
    }

    fn build_resnet<R: Rng + ?Sized>(
        config: &ExtractorConfig,
        blocks: usize,
        depth: usize,
        base_filters: usize,
        builder: &mut ParamBuilder,
        rng: &mut R,
    ) -> Result<Self> {
        let &[channels, height, width] = config.input_shape.as_slice() else {
            return Err(Error::InvalidConfig(format!(
                "residual stack needs a [C, H, W] input shape, got {:?}",
                config.input_shape
            )));
        };
        if blocks == 0 || depth == 0 || base_filters == 0 {
            return Err(Error::InvalidConfig("blocks, depth and base_filters must be positive".into()));
        }
        if height >> blocks == 0 || width >> blocks == 0 {
            return Err(Error::InvalidConfig(format!(
                "input {height}x{width} is too small for {blocks} pooling stages"
            )));
        }
        let flags = select_film(config.film_layers, &vec![depth; blocks]);
        let mut film_widths = Vec::new();
        let mut norm_widths = Vec::new();
        let mut weights = Vec::new();
        let mut res_blocks = Vec::new();
        let mut cin = channels;
        let mut add_unit = |builder: &mut ParamBuilder,
                            rng: &mut R,
                            name: String,
                            cin: usize,
                            cout: usize,
                            k: usize,
                            film_flag: bool,
                            film_widths: &mut Vec<usize>| {
            let fan_in = cin * k * k;
            let w = builder.push(
                &format!("{name}.w"),
                vec![cout, cin, k, k],
                normal_init(rng, cout * fan_in, (2.0 / fan_in as f64).sqrt()),
            );
            weights.push(w);
            let scale = builder.push(&format!("{name}.bn_scale"), vec![cout], vec![1.0; cout]);
            let shift = builder.push(&format!("{name}.bn_shift"), vec![cout], vec![0.0; cout]);
            norm_widths.push(cout);
            let film = film_flag.then(|| {
                film_widths.push(cout);
                film_widths.len() - 1
            });
            ConvUnit { w, scale, shift, norm_index: norm_widths.len() - 1, film }
        };
        for b in 0..blocks {
            let cout = base_filters << b;
            let mut convs = Vec::new();
            for l in 0..depth {
                let unit_in = if l == 0 { cin } else { cout };
                convs.push(add_unit(
                    builder,
                    rng,
                    format!("ext.b{b}.c{l}"),
                    unit_in,
                    cout,
                    3,
                    flags[b * depth + l],
                    &mut film_widths,
                ));
            }
            let shortcut = add_unit(builder, rng, format!("ext.b{b}.shortcut"), cin, cout, 1, false, &mut film_widths);
            res_blocks.push(ResBlock { convs, shortcut });
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            layers: Layers::Resnet(res_blocks),
            film_widths,
            norm_widths,
            weights,
            embedding_dim: cin,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Channel counts of the conditioned layers, shallowest first.
    pub fn film_widths(&self) -> &[usize] {
        &self.film_widths
    }

    /// Channel counts of the normalization layers, in forward order.
    pub fn norm_widths(&self) -> &[usize] {
        &self.norm_widths
    }

    /// Weight segments subject to weight decay.
    pub fn weight_segments(&self) -> &[SegmentId] {
        &self.weights
    }

    /// Forward pass over a batch `x[N, ...input_shape]`. `film = None` skips
    /// the FILM layers entirely.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        film: Option<&[FilmVars]>,
        norm: &mut NormContext<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1..] != self.config.input_shape[..] {
            return Err(Error::InvalidConfig(format!(
                "input batch shape {shape:?} does not match extractor input {:?}",
                self.config.input_shape
            )));
        }
        if let Some(f) = film {
            if f.len() != self.film_widths.len() {
                return Err(Error::DimensionMismatch { expected: self.film_widths.len(), got: f.len() });
            }
        }
        let n = shape[0];
        let out = match &self.layers {
            Layers::Dense(layers) => {
                let mut h = tape.reshape(x, vec![n, self.config.input_len()]);
                for layer in layers {
                    h = tape.matmul(h, params.var(layer.w));
                    if let Some(b) = layer.b {
                        h = tape.add_channel(h, params.var(b));
                    }
                    if let (Some(slot), Some(f)) = (layer.film, film) {
                        h = film_apply_var(tape, h, f[slot]);
                    }
                    if layer.activation {
                        h = tape.swish(h);
                    }
                }
                h
            }
            Layers::Resnet(blocks) => {
                let mut h = x;
                for block in blocks {
                    let input = h;
                    let depth = block.convs.len();
                    for (i, unit) in block.convs.iter().enumerate() {
                        h = conv_unit(tape, params, h, unit, film, norm);
                        if i + 1 < depth {
                            h = tape.swish(h);
                        }
                    }
                    let s = conv_unit(tape, params, input, &block.shortcut, None, norm);
                    let sum = tape.add(h, s);
                    let act = tape.swish(sum);
                    h = tape.max_pool2(act);
                }
                tape.global_avg_pool(h)
            }
        };
        Ok(if self.config.output_scale == 1.0 { out } else { tape.scale(out, self.config.output_scale) })
    }

    /// Initial running statistics (zero mean, unit variance).
    pub fn initial_norm_state(&self) -> Vec<ChannelStats> {
        self.norm_widths
            .iter()
            .map(|&c| ChannelStats { mean: vec![0.0; c], var: vec![1.0; c] })
            .collect()
    }
}

fn conv_unit(
    tape: &mut Tape,
    params: &BoundParams,
    x: Var,
    unit: &ConvUnit,
    film: Option<&[FilmVars]>,
    norm: &mut NormContext<'_>,
) -> Var {
    let c = tape.conv2d(x, params.var(unit.w));
    let n = norm.normalize(tape, c, unit.norm_index);
    let s = tape.mul_channel(n, params.var(unit.scale));
    let mut h = tape.add_channel(s, params.var(unit.shift));
    if let (Some(slot), Some(f)) = (unit.film, film) {
        h = film_apply_var(tape, h, f[slot]);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParameterVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: &ExtractorConfig, seed: u64) -> (Extractor, ParameterVector) {
        let mut b = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Extractor::build(config, &mut b, &mut rng).unwrap();
        (e, b.finish())
    }

    #[test]
    fn linear_parameter_counts() {
        let (_, p) = build(&ExtractorConfig::linear(4, 4, false), 0);
        assert_eq!(p.len(), 16);
        let (_, p) = build(&ExtractorConfig::linear(4, 4, true), 0);
        assert_eq!(p.len(), 20);
    }

    #[test]
    fn mini_resnet_conditions_every_conv_layer() {
        let cfg = ExtractorConfig::mini_resnet(3, 8, 8);
        let (e, _) = build(&cfg, 1);
        assert_eq!(e.film_widths(), &[8, 8, 8, 16, 16, 16]);
        assert_eq!(e.embedding_dim(), 16);
        let mut pre = cfg.clone();
        pre.film_layers = FilmLayers::PrePool;
        assert_eq!(build(&pre, 1).0.film_widths(), &[8, 16]);
        pre.film_layers = FilmLayers::Last;
        assert_eq!(build(&pre, 1).0.film_widths(), &[16]);
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = ExtractorConfig::mini_resnet(3, 8, 8);
        assert_eq!(build(&cfg, 9).1, build(&cfg, 9).1);
        assert_ne!(build(&cfg, 9).1, build(&cfg, 10).1);
    }

    #[test]
    fn too_small_inputs_are_rejected() {
        let cfg = ExtractorConfig::mini_resnet(3, 2, 2);
        let mut b = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Extractor::build(&cfg, &mut b, &mut rng).is_err());
        let mut flat = ExtractorConfig::mini_resnet(3, 8, 8);
        flat.input_shape = vec![192];
        assert!(Extractor::build(&flat, &mut ParamBuilder::new(), &mut rng).is_err());
    }

    #[test]
    fn film_examples() {
        let h = Tensor::matrix(1, 2, vec![1.0, -3.0]);
        assert_eq!(film_apply(&h, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), h);
        assert_eq!(film_apply(&h, &[2.0, 2.0], &[0.0, 0.0]).unwrap().data(), &[2.0, -6.0]);
        assert!(film_apply(&h, &[1.0], &[0.0, 0.0]).is_err());
        // broadcast over spatial positions
        let conv = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = film_apply(&conv, &[2.0, -1.0], &[0.5, 0.0]).unwrap();
        assert_eq!(out.data(), &[2.5, 4.5, -3.0, -4.0]);
    }
}
