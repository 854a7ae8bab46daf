use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Data(format!(
                "tensor extents must be strictly positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Data(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let requires_grad = self.requires_grad;
        Ok(Self::new(shape, self.data)?.with_grad(requires_grad))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Every trainable weight of a model as one flat vector, plus the table that
/// maps named tensors onto it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl ParameterVector {
    /// Flattens named tensors in the given order.
    pub fn flatten(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut values = Vec::with_capacity(named.iter().map(|(_, t)| t.len()).sum());
        let mut layout = Vec::with_capacity(named.len());
        for (name, tensor) in named {
            if layout.iter().any(|e: &LayoutEntry| e.name == name) {
                return Err(Error::Config(format!("duplicate parameter name `{name}`")));
            }
            layout.push(LayoutEntry {
                name,
                offset: values.len(),
                shape: tensor.shape().to_vec(),
            });
            values.extend_from_slice(tensor.data());
        }
        Ok(Self { values, layout })
    }

    /// Rebuilds a parameter vector from a stored layout and value blob.
    pub fn from_parts(layout: Vec<LayoutEntry>, values: Vec<f64>) -> Result<Self> {
        let mut expected_offset = 0;
        for entry in &layout {
            if entry.offset != expected_offset {
                return Err(Error::Data(format!(
                    "parameter `{}` starts at {} but the previous entry ends at {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            expected_offset += entry.len();
        }
        if expected_offset != values.len() {
            return Err(Error::Data(format!(
                "layout covers {expected_offset} values, blob holds {}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .iter()
            .map(|e| {
                let t = Tensor::new(e.shape.clone(), self.values[e.range()].to_vec())
                    .expect("layout entries are validated on construction");
                (e.name.clone(), t)
            })
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.entry(name)?.range();
        Some(&mut self.values[range])
    }

    /// A copy sharing this layout but holding `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Usage(format!(
                "expected {} parameter values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        self.layout == other.layout
    }
}

/// dLoss/dθ aligned to a [`ParameterVector`] layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        dot(&self.values, &other.values)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &[f64]) {
        for (a, b) in self.values.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn check_aligned(&self, params: &ParameterVector) -> Result<()> {
        if self.values.len() != params.len() {
            return Err(Error::Usage(format!(
                "gradient has {} entries but parameters have {}",
                self.values.len(),
                params.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
