//! A complete few-shot model: extractor, optional task embedding network,
//! metric head, and optional auxiliary classification head, all sharing one
//! [`ParameterVector`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{Extractor, ExtractorConfig, FilmParams, FilmVars, NormContext, NormMode, TenBlock, TenConfig};
use crate::metric::{AlphaSpec, AlphaVar, ScaledMetricHead, SimilarityKind};
use crate::numerics::{BoundParams, ChannelStats, ParamBuilder, ParameterVector, SegmentId, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub kind: SimilarityKind,
    pub alpha: AlphaSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub ten: Option<TenConfig>,
    pub metric: MetricConfig,
    /// Number of classes of the auxiliary classification head, if any.
    pub aux_classes: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct AuxHead {
    w: SegmentId,
    b: SegmentId,
    classes: usize,
}

#[derive(Clone, Debug)]
pub struct FewShotModel {
    config: ModelConfig,
    extractor: Extractor,
    ten: Option<TenBlock>,
    log_alpha: Option<SegmentId>,
    aux: Option<AuxHead>,
    params: ParameterVector,
    norm_state: Vec<ChannelStats>,
}

impl FewShotModel {
    /// Builds the model with a deterministic initialization derived from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.metric.alpha.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut builder = ParamBuilder::new();
        let extractor = Extractor::build(&config.extractor, &mut builder, &mut rng)?;
        let ten = match &config.ten {
            Some(tc) => Some(TenBlock::build(tc, extractor.embedding_dim(), extractor.film_widths(), &mut builder, &mut rng)?),
            None => None,
        };
        let log_alpha = match config.metric.alpha {
            AlphaSpec::Trainable { init } => Some(builder.push("metric.log_alpha", vec![1], vec![init.ln()])),
            AlphaSpec::Fixed(_) => None,
        };
        let aux = match config.aux_classes {
            Some(0) => return Err(Error::InvalidConfig("auxiliary head needs at least one class".into())),
            Some(classes) => {
                let d = extractor.embedding_dim();
                let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
                let w = builder.push("aux.w", vec![d, classes], (0..d * classes).map(|_| normal.sample(&mut rng)).collect());
                let b = builder.push("aux.b", vec![classes], vec![0.0; classes]);
                Some(AuxHead { w, b, classes })
            }
            None => None,
        };
        let norm_state = extractor.initial_norm_state();
        Ok(Self { config, extractor, ten, log_alpha, aux, params: builder.finish(), norm_state })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn ten(&self) -> Option<&TenBlock> {
        self.ten.as_ref()
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    /// Replaces the parameters, which must share this model's layout.
    pub fn set_params(&mut self, params: ParameterVector) -> Result<()> {
        if params.layout() != self.params.layout() {
            return Err(Error::ConfigMismatch("parameter layout differs from the model layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn norm_state(&self) -> &[ChannelStats] {
        &self.norm_state
    }

    pub fn set_norm_state(&mut self, state: Vec<ChannelStats>) -> Result<()> {
        let widths: Vec<usize> = state.iter().map(|s| s.mean.len()).collect();
        if widths != self.extractor.norm_widths() {
            return Err(Error::ConfigMismatch("normalization state does not match the extractor".into()));
        }
        self.norm_state = state;
        Ok(())
    }

    /// Exponential moving average of running statistics.
    pub fn update_norm_state(&mut self, observed: &[ChannelStats], momentum: f64) {
        if observed.len() != self.norm_state.len() {
            return;
        }
        for (run, obs) in self.norm_state.iter_mut().zip(observed) {
            for (r, o) in run.mean.iter_mut().zip(&obs.mean) {
                *r = (1.0 - momentum) * *r + momentum * o;
            }
            for (r, o) in run.var.iter_mut().zip(&obs.var) {
                *r = (1.0 - momentum) * *r + momentum * o;
            }
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.extractor.embedding_dim()
    }

    pub fn aux_classes(&self) -> Option<usize> {
        self.aux.as_ref().map(|a| a.classes)
    }

    pub fn alpha(&self) -> f64 {
        match self.log_alpha {
            Some(id) => self.params.get(id)[0].exp(),
            None => self.config.metric.alpha.initial(),
        }
    }

    /// Overrides a fixed temperature.
    pub fn set_fixed_alpha(&mut self, alpha: f64) -> Result<()> {
        AlphaSpec::Fixed(alpha).validate()?;
        match self.log_alpha {
            Some(id) => self.params.get_mut(id)[0] = alpha.ln(),
            None => self.config.metric.alpha = AlphaSpec::Fixed(alpha),
        }
        Ok(())
    }

    pub fn head(&self) -> ScaledMetricHead {
        ScaledMetricHead { kind: self.config.metric.kind, alpha: self.alpha() }
    }

    pub fn alpha_var(&self, tape: &mut Tape, bound: &BoundParams) -> AlphaVar {
        match self.log_alpha {
            Some(id) => AlphaVar::Var(tape.exp(bound.var(id))),
            None => AlphaVar::Const(self.config.metric.alpha.initial()),
        }
    }

    pub fn norm_context(&self) -> NormContext<'_> {
        NormContext::new(self.config.extractor.norm, &self.norm_state)
    }

    /// Context for a training pass: always batch statistics.
    pub fn training_norm_context(&self) -> NormContext<'_> {
        NormContext::new(NormMode::Batch, &self.norm_state)
    }

    pub fn embed_var(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        film: Option<&[FilmVars]>,
        norm: &mut NormContext<'_>,
    ) -> Result<Var> {
        self.extractor.forward(tape, bound, x, film, norm)
    }

    /// Embeds a batch `x[N, ...input_shape]` outside of any gradient
    /// computation. `film = None` is the unconditioned extractor.
    pub fn embed(&self, x: &Tensor, film: Option<&FilmParams>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let xv = tape.leaf(x.clone());
        let film_vars = match film {
            Some(f) => {
                if f.layers.len() != self.extractor.film_widths().len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.extractor.film_widths().len(),
                        got: f.layers.len(),
                    });
                }
                let mut vars = Vec::with_capacity(f.layers.len());
                for ((g, b), &w) in f.layers.iter().zip(self.extractor.film_widths()) {
                    if g.len() != w || b.len() != w {
                        return Err(Error::DimensionMismatch { expected: w, got: g.len().max(b.len()) });
                    }
                    vars.push(FilmVars {
                        gamma: tape.leaf(Tensor::vector(g.clone())),
                        beta: tape.leaf(Tensor::vector(b.clone())),
                    });
                }
                Some(vars)
            }
            None => None,
        };
        let mut norm = self.norm_context();
        let out = self.embed_var(&mut tape, &bound, xv, film_vars.as_deref(), &mut norm)?;
        Ok(tape.value(out).clone())
    }

    /// FILM parameters predicted by the task embedding network from `c̄`.
    pub fn ten_predict(&self, c_bar: &[f64]) -> Result<FilmParams> {
        let ten = self.ten.as_ref().ok_or_else(|| Error::InvalidConfig("model has no task embedding network".into()))?;
        if c_bar.len() != ten.input_dim() {
            return Err(Error::DimensionMismatch { expected: ten.input_dim(), got: c_bar.len() });
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let c = tape.leaf(Tensor::matrix(1, c_bar.len(), c_bar.to_vec()));
        let film = ten.predict(&mut tape, &bound, c)?;
        Ok(FilmParams {
            layers: film
                .iter()
                .map(|f| (tape.value(f.gamma).data().to_vec(), tape.value(f.beta).data().to_vec()))
                .collect(),
        })
    }

    /// Weight decay on extractor weights plus the TEN post-multiplier penalty.
    pub fn penalty_var(&self, tape: &mut Tape, bound: &BoundParams) -> Option<Var> {
        let mut terms = Vec::new();
        let wd = self.config.extractor.weight_decay;
        if wd > 0.0 {
            let mut acc: Option<Var> = None;
            for &id in self.extractor.weight_segments() {
                let sq = tape.sum_squares(bound.var(id));
                acc = Some(match acc {
                    Some(a) => tape.add(a, sq),
                    None => sq,
                });
            }
            if let Some(a) = acc {
                terms.push(tape.scale(a, wd));
            }
        }
        if let Some(p) = self.ten.as_ref().and_then(|t| t.penalty(tape, bound)) {
            terms.push(p);
        }
        terms.into_iter().reduce(|a, b| tape.add(a, b))
    }

    pub fn weight_decay_value(&self) -> f64 {
        let wd = self.config.extractor.weight_decay;
        wd * self
            .extractor
            .weight_segments()
            .iter()
            .map(|&id| self.params.get(id).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    }

    pub fn ten_penalty_value(&self) -> f64 {
        self.ten.as_ref().map(|t| t.penalty_value(&self.params)).unwrap_or(0.0)
    }

    pub fn penalty_value(&self) -> f64 {
        self.weight_decay_value() + self.ten_penalty_value()
    }

    /// Logits `[N, classes]` of the auxiliary head.
    pub fn aux_logits(&self, tape: &mut Tape, bound: &BoundParams, embeddings: Var) -> Result<Var> {
        let aux = self.aux.as_ref().ok_or_else(|| Error::InvalidConfig("model has no auxiliary head".into()))?;
        let l = tape.matmul(embeddings, bound.var(aux.w));
        Ok(tape.add_channel(l, bound.var(aux.b)))
    }

    /// `(layer, |γ₀|, |β₀|)` per conditioned layer, shallowest first.
    pub fn ten_magnitude_report(&self) -> Result<Vec<TenMagnitude>> {
        let ten = self.ten.as_ref().ok_or_else(|| Error::InvalidConfig("model has no task embedding network".into()))?;
        Ok(ten
            .post_multipliers(&self.params)
            .into_iter()
            .enumerate()
            .map(|(i, (g, b))| TenMagnitude { layer: i + 1, gamma0_abs: g.abs(), beta0_abs: b.abs() })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TenMagnitude {
    /// 1-based layer number, shallowest first.
    pub layer: usize,
    pub gamma0_abs: f64,
    pub beta0_abs: f64,
}

/// CSV with header `layer,gamma0_abs,beta0_abs`, one row per layer.
pub fn ten_report_csv(report: &[TenMagnitude]) -> String {
    let mut out = String::from("layer,gamma0_abs,beta0_abs\n");
    for r in report {
        out.push_str(&format!("{},{},{}\n", r.layer, r.gamma0_abs, r.beta0_abs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FilmLayers;

    pub(crate) fn resnet_config(ten: bool) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig::mini_resnet(3, 8, 8),
            ten: ten.then(TenConfig::default),
            metric: MetricConfig { kind: SimilarityKind::SquaredEuclidean, alpha: AlphaSpec::Fixed(1.0) },
            aux_classes: None,
            seed: 3,
        }
    }

    fn random_batch(n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn unconditioned_equals_identity_film_bitwise() {
        let m = FewShotModel::new(resnet_config(true)).unwrap();
        let x = random_batch(4, 1);
        let plain = m.embed(&x, None).unwrap();
        let ident = m.embed(&x, Some(&FilmParams::identity(m.extractor().film_widths()))).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain), bits(&ident));
    }

    #[test]
    fn linear_identity_weights_embed_inputs() {
        let cfg = ModelConfig {
            extractor: ExtractorConfig::linear(2, 2, false),
            ten: None,
            metric: MetricConfig { kind: SimilarityKind::SquaredEuclidean, alpha: AlphaSpec::Fixed(1.0) },
            aux_classes: None,
            seed: 0,
        };
        let mut m = FewShotModel::new(cfg).unwrap();
        m.params_mut().values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let z = m.embed(&Tensor::matrix(1, 2, vec![1.0, 2.0]), None).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0]);
        assert!(m.embed(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]), None).is_err());
    }

    #[test]
    fn ten_with_zero_post_multipliers_predicts_identity() {
        let m = FewShotModel::new(resnet_config(true)).unwrap();
        let film = m.ten_predict(&[0.3; 16]).unwrap();
        assert_eq!(film, FilmParams::identity(m.extractor().film_widths()));
        assert!(m.ten_predict(&[0.3; 15]).is_err());
    }

    #[test]
    fn zero_readout_keeps_gamma_at_one() {
        let mut cfg = resnet_config(true);
        cfg.ten = Some(TenConfig { zero_last_layer: true, ..TenConfig::default() });
        let mut m = FewShotModel::new(cfg).unwrap();
        let ten = m.ten().unwrap().clone();
        for l in 0..ten.layer_count() {
            ten.set_post_multipliers(m.params_mut(), l, 1.0, 1.0);
        }
        let film = m.ten_predict(&[0.7; 16]).unwrap();
        for (g, b) in &film.layers {
            assert!(g.iter().all(|&v| v == 1.0));
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn random_ten_is_deterministic_and_input_sensitive() {
        let mut m = FewShotModel::new(resnet_config(true)).unwrap();
        let ten = m.ten().unwrap().clone();
        for l in 0..ten.layer_count() {
            ten.set_post_multipliers(m.params_mut(), l, 0.5, 0.5);
        }
        let a = m.ten_predict(&[0.1; 16]).unwrap();
        let b = m.ten_predict(&[-0.4; 16]).unwrap();
        assert_eq!(a, m.ten_predict(&[0.1; 16]).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn magnitude_report_lists_layers_in_order() {
        let mut cfg = resnet_config(true);
        cfg.extractor.film_layers = FilmLayers::PrePool;
        let mut m = FewShotModel::new(cfg).unwrap();
        assert!(m.ten_magnitude_report().unwrap().iter().all(|r| r.gamma0_abs == 0.0 && r.beta0_abs == 0.0));
        let ten = m.ten().unwrap().clone();
        ten.set_post_multipliers(m.params_mut(), 0, 0.1, -0.2);
        ten.set_post_multipliers(m.params_mut(), 1, -0.5, 0.0);
        let r = m.ten_magnitude_report().unwrap();
        assert_eq!(r.iter().map(|x| x.gamma0_abs).collect::<Vec<_>>(), vec![0.1, 0.5]);
        assert_eq!(r[0].beta0_abs, 0.2);
        assert!(FewShotModel::new(resnet_config(false)).unwrap().ten_magnitude_report().is_err());
    }

    #[test]
    fn trainable_alpha_is_stored_as_log() {
        let mut cfg = resnet_config(false);
        cfg.metric.alpha = AlphaSpec::Trainable { init: 4.0 };
        let m = FewShotModel::new(cfg).unwrap();
        assert!((m.params().by_name("metric.log_alpha").unwrap()[0] - 4f64.ln()).abs() < 1e-15);
        assert!((m.alpha() - 4.0).abs() < 1e-12);
        let mut bad = resnet_config(false);
        bad.metric.alpha = AlphaSpec::Fixed(-2.0);
        assert!(FewShotModel::new(bad).is_err());
    }
}
