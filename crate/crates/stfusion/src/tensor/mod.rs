//! Minimal dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! Everything is row-major and 64-bit. The op set is exactly what the
//! fusion/supervision/detection pipeline needs; gradients of every op are
//! validated against central finite differences (see [`gradcheck`]).

mod gradcheck;
mod store;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckEntry, GradCheckReport};
pub use store::ParameterStore;
pub use tape::{Gradients, NodeId, Tape};

use std::io::{BufRead, Write};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major f64 tensor value. Plain data, no grad state; gradients
/// live on the [`Tape`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index into a rank-3 tensor (c, h, w).
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    /// Index into a rank-2 tensor (i, j).
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Debug dump: one shape line, then row-major values at 17 significant digits.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        let shape_str: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        writeln!(out, "{}", shape_str.join(" "))?;
        for v in &self.data {
            writeln!(out, "{v:.16e}")?;
        }
        Ok(())
    }

    pub fn dump_to_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.dump(std::io::BufWriter::new(f))
    }

    /// Inverse of [`Tensor::dump`].
    pub fn load<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let shape: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for line in input.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            data.push(t.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
        }
        Tensor::new(shape, data)
    }
}

pub(crate) type RcTensor = Rc<Tensor>;
