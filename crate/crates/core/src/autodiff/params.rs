use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// One named slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, contiguous layout of named tensors inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor slot at the end of the layout; returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.dim();
        self.entries.push(LayoutEntry {
            name: name.into(),
            offset,
            shape,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Checks that entries are contiguous, disjoint and cover `[0, dim)`.
    pub fn validate(&self) -> Result<(), AutodiffError> {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next || e.shape.is_empty() || e.shape.contains(&0) {
                return Err(AutodiffError::BadLayout(e.name.clone()));
            }
            next += e.len();
        }
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(AutodiffError::BadLayout(w[0].to_string()));
        }
        Ok(())
    }
}

/// Flat D-dimensional parameter vector with a named-slice layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self, AutodiffError> {
        layout.validate()?;
        if layout.dim() != values.len() {
            return Err(AutodiffError::LengthMismatch {
                shape: vec![layout.dim()],
                len: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let d = layout.dim();
        Self {
            layout,
            values: vec![0.0; d],
        }
    }

    /// Assemble from one tensor per layout entry, in layout order.
    pub fn from_tensors(layout: Layout, tensors: &[Tensor]) -> Result<Self, AutodiffError> {
        if tensors.len() != layout.len() {
            return Err(AutodiffError::LengthMismatch {
                shape: vec![layout.len()],
                len: tensors.len(),
            });
        }
        let mut values = Vec::with_capacity(layout.dim());
        for (e, t) in layout.entries().iter().zip(tensors) {
            if t.shape() != e.shape.as_slice() {
                return Err(AutodiffError::BadLayout(e.name.clone()));
            }
            values.extend_from_slice(t.data());
        }
        Self::new(layout, values)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, index: usize) -> &[f64] {
        let e = &self.layout.entries()[index];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.index_of(name).map(|i| self.slice(i))
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        let e = &self.layout.entries()[index];
        Tensor::from_parts(e.shape.clone(), self.slice(index).to_vec())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        (0..self.layout.len()).map(|i| self.tensor(i)).collect()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        assert_eq!(self.dim(), other.dim());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.dim());
        Self {
            layout: self.layout.clone(),
            values,
        }
    }
}
