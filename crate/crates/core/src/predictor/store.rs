use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name, shape and position of one tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat `f32` parameter vector partitioned into named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    data: Vec<f32>,
}

impl ParamStore {
    /// Zero-filled store with the tensors laid out in the given order.
    pub fn zeros(shapes: &[(String, Vec<usize>)]) -> Self {
        let mut offset = 0;
        let specs: Vec<TensorSpec> = shapes
            .iter()
            .map(|(name, shape)| {
                let spec = TensorSpec {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += spec.len();
                spec
            })
            .collect();
        ParamStore {
            specs,
            data: vec![0.0; offset],
        }
    }

    pub fn from_parts(specs: Vec<TensorSpec>, data: Vec<f32>) -> Result<Self> {
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset {
                return Err(Error::Model(format!("tensor {} is not contiguous", s.name)));
            }
            offset += s.len();
        }
        if offset != data.len() {
            return Err(Error::CountMismatch {
                expected: offset,
                got: data.len(),
            });
        }
        Ok(ParamStore { specs, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.specs.iter().find(|s| s.name == name).map(TensorSpec::range)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.range(name).map(|r| &self.data[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.range(name).map(move |r| &mut self.data[r])
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}
