//! Dense arithmetic, the reverse-mode gradient engine, and the
//! central-difference oracle used to check it.

mod params;
mod tape;
mod tensor;

pub use params::{relative_error, GradientVector, Layout, ParamBuilder, ParameterVector, Segment, SegmentId};
pub use tape::{ChannelStats, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

pub(crate) use tape::{dot, log_sum_exp, norm};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this floor, times `max(1, ‖g‖∞)`, are compared
/// absolutely by [`check_grad`]. Central differences cannot resolve finer
/// detail than the round-off of the whole program value.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Parameter leaves registered on a tape, one per segment.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParameterVector) -> Self {
        let vars = (0..params.layout().segments().len())
            .map(|i| tape.leaf(params.tensor(SegmentId(i))))
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: SegmentId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// A scalar function of a parameter vector, evaluated by recording its
/// operations on a fresh tape. Fixed inputs live inside the implementor.
pub trait ScalarProgram {
    fn evaluate(&self, tape: &mut Tape, params: &BoundParams) -> Result<Var, NumericsError>;
}

impl<F> ScalarProgram for F
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, NumericsError>,
{
    fn evaluate(&self, tape: &mut Tape, params: &BoundParams) -> Result<Var, NumericsError> {
        self(tape, params)
    }
}

/// Collects the adjoints of bound parameter leaves into a gradient vector.
pub fn collect_gradient(grads: &Gradients, bound: &BoundParams, params: &ParameterVector) -> GradientVector {
    let mut g = params.zeros_like();
    for (i, seg) in params.layout().segments().iter().enumerate() {
        if let Some(t) = grads.wrt(bound.vars[i]) {
            g.values_mut()[seg.range()].copy_from_slice(t.data());
        }
    }
    g
}

fn checked_value(tape: &Tape, out: Var) -> Result<f64, NumericsError> {
    if let Some(op) = tape.first_non_finite() {
        return Err(NumericsError::NonFinite { context: format!("forward pass ({op})") });
    }
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { context: "program output".into() });
    }
    Ok(v)
}

/// Evaluates `program` at `params`, returning its value only.
pub fn evaluate(program: &dyn ScalarProgram, params: &ParameterVector) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let out = program.evaluate(&mut tape, &bound)?;
    checked_value(&tape, out)
}

/// Value and reverse-mode gradient of `program` at `params`.
pub fn value_and_grad(
    program: &dyn ScalarProgram,
    params: &ParameterVector,
) -> Result<(f64, GradientVector), NumericsError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let out = program.evaluate(&mut tape, &bound)?;
    let value = checked_value(&tape, out)?;
    let grads = tape.backward(out);
    let g = collect_gradient(&grads, &bound, params);
    if let Some(seg) = g.non_finite_segment() {
        return Err(NumericsError::NonFinite { context: seg.to_string() });
    }
    Ok((value, g))
}

/// Central-difference gradient `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h`.
pub fn finite_diff_grad(
    program: &dyn ScalarProgram,
    params: &ParameterVector,
    step: f64,
) -> Result<GradientVector, NumericsError> {
    if !(step > 0.0) {
        return Err(NumericsError::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut g = params.zeros_like();
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = evaluate(program, &probe).map_err(|e| at_coordinate(e, params, i))?;
        probe.values_mut()[i] = orig - step;
        let minus = evaluate(program, &probe).map_err(|e| at_coordinate(e, params, i))?;
        probe.values_mut()[i] = orig;
        g.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(g)
}

fn at_coordinate(e: NumericsError, params: &ParameterVector, i: usize) -> NumericsError {
    match e {
        NumericsError::NonFinite { context } => {
            let seg = params.layout().owner_of(i).map(|s| s.name.as_str()).unwrap_or("?");
            NumericsError::NonFinite { context: format!("{context} at perturbed {seg}[{}]", i) }
        }
        other => other,
    }
}

/// Per-segment agreement between the two gradient paths.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Index within the segment of the worst coordinate.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub segments: Vec<SegmentCheck>,
    pub max_rel_error: f64,
    /// Segment name and in-segment index of the worst coordinate overall.
    pub worst: Option<(String, usize)>,
    pub rtol: f64,
    /// Set when either gradient could not be evaluated.
    pub failure: Option<NumericsError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.rtol
    }

    pub fn failed_segments(&self) -> Vec<&str> {
        self.segments.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect()
    }
}

/// Relative error of one coordinate: `|a − b| / max(|a|, |b|, floor)`.
pub fn coordinate_rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares [`value_and_grad`] against [`finite_diff_grad`] at the default step.
pub fn check_grad(program: &dyn ScalarProgram, params: &ParameterVector, rtol: f64) -> GradCheckReport {
    let analytic = value_and_grad(program, params).map(|(_, g)| g);
    let numeric = finite_diff_grad(program, params, DEFAULT_FD_STEP);
    let (analytic, numeric) = match (analytic, numeric) {
        (Ok(a), Ok(n)) => (a, n),
        (Err(e), _) | (_, Err(e)) => {
            return GradCheckReport {
                segments: Vec::new(),
                max_rel_error: f64::INFINITY,
                worst: None,
                rtol,
                failure: Some(e),
            }
        }
    };
    let scale = numeric.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = GRAD_CHECK_FLOOR * scale;
    let mut segments = Vec::new();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for seg in params.layout().segments() {
        let mut seg_max = 0.0;
        let mut seg_worst = 0;
        for (j, i) in seg.range().enumerate() {
            let e = coordinate_rel_error(analytic.values()[i], numeric.values()[i], floor);
            if e > seg_max || e.is_nan() {
                seg_max = e;
                seg_worst = j;
            }
        }
        if seg_max > max_rel_error {
            max_rel_error = seg_max;
            worst = Some((seg.name.clone(), seg_worst));
        }
        segments.push(SegmentCheck {
            name: seg.name.clone(),
            max_rel_error: seg_max,
            worst_index: seg_worst,
            passed: seg_max <= rtol,
        });
    }
    GradCheckReport { segments, max_rel_error, worst, rtol, failure: None }
}
