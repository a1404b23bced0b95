//! Shared BEV encoder: per-point linear map + ReLU, per-cell max pooling
//! over a BEV grid, then two 3×3 conv/ReLU layers. The teacher is the same
//! architecture with the extra semantic input channel and frozen weights.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::inject::InjectedPointCloud;
use crate::tensor::{NodeId, ParameterStore, Tape, Tensor};

/// BEV grid geometry shared by student, teacher, and detection head.
/// Row index i follows y, column index j follows x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, h: usize, w: usize) -> Result<Self> {
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("grid must be at least 8x8, got {h}x{w}")));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::Config("grid ranges must be nonempty".into()));
        }
        Ok(GridSpec { x_min, x_max, y_min, y_max, h, w })
    }

    /// Square grid centered on the origin: `extent` meters half-width.
    pub fn centered(extent: f64, h: usize, w: usize) -> Result<Self> {
        Self::new(-extent, extent, -extent, extent, h, w)
    }

    pub fn cell_w(&self) -> f64 {
        (self.x_max - self.x_min) / self.w as f64
    }

    pub fn cell_h(&self) -> f64 {
        (self.y_max - self.y_min) / self.h as f64
    }

    /// Cell indices (row, col) containing a point, or None when outside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_min || y < self.y_min {
            return None;
        }
        let j = ((x - self.x_min) / self.cell_w()).floor() as usize;
        let i = ((y - self.y_min) / self.cell_h()).floor() as usize;
        if i < self.h && j < self.w {
            Some((i, j))
        } else {
            None
        }
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (j as f64 + 0.5) * self.cell_w(),
            self.y_min + (i as f64 + 0.5) * self.cell_h(),
        )
    }

    /// Continuous cell coordinates (row, col) of a world position; a point
    /// at the center of cell (i, j) maps to exactly (i, j).
    pub fn cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.y_min) / self.cell_h() - 0.5,
            (x - self.x_min) / self.cell_w() - 0.5,
        )
    }
}

pub type Bound = BTreeMap<String, NodeId>;

/// Names and dimensions of one encoder instance inside a parameter store.
/// The student uses `in_dim = 5`; the teacher consumes the semantic channel.
#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub prefix: String,
    pub in_dim: usize,
    pub c_p: usize,
    pub c: usize,
}

impl EncoderSpec {
    pub fn new(prefix: &str, in_dim: usize, c_p: usize, c: usize) -> Self {
        EncoderSpec { prefix: prefix.to_string(), in_dim, c_p, c }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        let d = self.in_dim as f64;
        store.init_uniform(&self.name("point.w"), &[self.c_p, self.in_dim], 1.0 / d.sqrt())?;
        store.init_zeros(&self.name("point.b"), &[self.c_p])?;
        let s1 = 1.0 / ((self.c_p * 9) as f64).sqrt();
        store.init_uniform(&self.name("conv1.k"), &[self.c, self.c_p, 3, 3], s1)?;
        store.init_zeros(&self.name("conv1.b"), &[self.c])?;
        let s2 = 1.0 / ((self.c * 9) as f64).sqrt();
        store.init_uniform(&self.name("conv2.k"), &[self.c, self.c, 3, 3], s2)?;
        store.init_zeros(&self.name("conv2.b"), &[self.c])?;
        Ok(())
    }

    /// Per-point linear + ReLU, then elementwise max per grid cell. Points
    /// outside the grid are dropped; empty cells (and a fully clipped cloud)
    /// yield zeros.
    pub fn pillarize(
        &self,
        tape: &Tape,
        bound: &Bound,
        points: &Tensor,
        grid: &GridSpec,
    ) -> Result<NodeId> {
        if points.rank() != 2 || points.shape()[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "pillarize: points {:?} vs in_dim {}",
                points.shape(),
                self.in_dim
            )));
        }
        let n = points.shape()[0];
        let mut cells = Vec::with_capacity(n);
        let mut any = false;
        for row in 0..n {
            let x = points.data()[row * self.in_dim];
            let y = points.data()[row * self.in_dim + 1];
            let cell = grid.cell_of(x, y).map(|(i, j)| i * grid.w + j);
            any |= cell.is_some();
            cells.push(cell);
        }
        if n == 0 || !any {
            return Ok(tape.constant(Tensor::zeros(&[self.c_p, grid.h, grid.w])));
        }
        let pts = std::rc::Rc::new(points.clone());
        let feats = tape.linear_points(&pts, bound[&self.name("point.w")], bound[&self.name("point.b")])?;
        let feats = tape.relu(feats);
        tape.scatter_max(feats, &cells, grid.h, grid.w)
    }

    /// pillarize → conv3×3 → ReLU → conv3×3 → ReLU.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &Bound,
        points: &Tensor,
        grid: &GridSpec,
    ) -> Result<NodeId> {
        let pillars = self.pillarize(tape, bound, points, grid)?;
        let h1 = tape.conv2d_same(
            pillars,
            bound[&self.name("conv1.k")],
            bound[&self.name("conv1.b")],
            3,
        )?;
        let h1 = tape.relu(h1);
        let h2 = tape.conv2d_same(
            h1,
            bound[&self.name("conv2.k")],
            bound[&self.name("conv2.b")],
            3,
        )?;
        Ok(tape.relu(h2))
    }
}

/// Frozen teacher: encoder (and detection head) trained on semantically
/// injected single-frame clouds. Construction requires the frozen flag, so
/// features cannot be requested from a half-trained teacher.
pub struct Teacher {
    store: ParameterStore,
    spec: EncoderSpec,
    one_hot_classes: Option<usize>,
}

impl Teacher {
    pub fn new(
        store: ParameterStore,
        frozen: bool,
        spec: EncoderSpec,
        one_hot_classes: Option<usize>,
    ) -> Result<Self> {
        if !frozen {
            return Err(Error::Lifecycle(
                "teacher checkpoint is not frozen; finish teacher training first".into(),
            ));
        }
        for suffix in ["point.w", "point.b", "conv1.k", "conv1.b", "conv2.k", "conv2.b"] {
            let name = format!("{}.{suffix}", spec.prefix);
            if !store.contains(&name) {
                return Err(Error::Lifecycle(format!("teacher store is missing {name}")));
            }
        }
        Ok(Teacher { store, spec, one_hot_classes })
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn one_hot_classes(&self) -> Option<usize> {
        self.one_hot_classes
    }

    /// Teacher features f* on an injected cloud. Bound non-trainable: no
    /// gradients are ever recorded through teacher weights.
    pub fn features(
        &self,
        tape: &Tape,
        injected: &InjectedPointCloud,
        grid: &GridSpec,
    ) -> Result<NodeId> {
        let matrix = injected.to_matrix(self.one_hot_classes)?;
        let bound = self.store.bind(tape, false);
        self.spec.encode(tape, &bound, &matrix, grid)
    }
}
