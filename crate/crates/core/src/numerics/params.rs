use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NumericsError;

/// A named, shaped slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous segment table. Segments never overlap and cover
/// `0..total_len()`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

/// Index of a segment within a [`Layout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub usize);

impl Layout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len()).unwrap_or(0)
    }

    pub fn find(&self, name: &str) -> Option<SegmentId> {
        self.segments.iter().position(|s| s.name == name).map(SegmentId)
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    /// Name of the segment that owns flat index `index`.
    pub fn owner_of(&self, index: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&index))
    }

    fn validate(&self) -> Result<(), NumericsError> {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return Err(NumericsError::Layout(format!(
                    "segment {} starts at {} but previous segment ends at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len();
        }
        Ok(())
    }
}

/// Flat vector of trainable parameters with a named segment layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParameterVector {
    pub fn from_parts(values: Vec<f64>, layout: Layout) -> Result<Self, NumericsError> {
        layout.validate()?;
        if layout.total_len() != values.len() {
            return Err(NumericsError::Layout(format!(
                "layout covers {} values but {} were given",
                layout.total_len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let name = layout.owner_of(i).map(|s| s.name.clone()).unwrap_or_default();
            return Err(NumericsError::NonFinite { context: name });
        }
        Ok(Self { values, layout })
    }

    /// Single-segment vector, handy for closures over plain slices.
    pub fn flat(name: &str, values: Vec<f64>) -> Self {
        let mut b = ParamBuilder::new();
        b.push(name, vec![values.len()], values);
        b.finish()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: SegmentId) -> &[f64] {
        &self.values[self.layout.segment(id).range()]
    }

    pub fn get_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let r = self.layout.segment(id).range();
        &mut self.values[r]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|id| self.get(id))
    }

    pub fn tensor(&self, id: SegmentId) -> Tensor {
        let s = self.layout.segment(id);
        Tensor::new(s.shape.clone(), self.values[s.range()].to_vec())
    }

    pub fn zeros_like(&self) -> GradientVector {
        GradientVector { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }
}

/// Incrementally assembles a [`ParameterVector`].
#[derive(Default)]
pub struct ParamBuilder {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> SegmentId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "segment {name}");
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate parameter segment {name}"
        );
        let id = SegmentId(self.segments.len());
        self.segments.push(Segment { name: name.to_string(), offset: self.values.len(), shape });
        self.values.extend(values);
        id
    }

    pub fn finish(self) -> ParameterVector {
        ParameterVector { values: self.values, layout: Layout { segments: self.segments } }
    }
}

/// Gradient with the same layout as the parameters it differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Layout,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Self {
        assert_eq!(values.len(), layout.total_len());
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn get(&self, id: SegmentId) -> &[f64] {
        &self.values[self.layout.segment(id).range()]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|id| self.get(id))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for v in &mut self.values {
            *v *= s;
        }
        self
    }

    pub fn add_scaled(&mut self, other: &GradientVector, s: f64) {
        assert_eq!(self.layout, other.layout);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// First segment holding a non-finite entry.
    pub fn non_finite_segment(&self) -> Option<&str> {
        self.layout
            .segments()
            .iter()
            .find(|s| self.values[s.range()].iter().any(|v| !v.is_finite()))
            .map(|s| s.name.as_str())
    }
}

/// Euclidean relative error `‖a − b‖ / ‖b‖` over flat slices.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}
