//! Spatial-temporal fusion: per-frame residual convolutions whose kernel
//! grows with frame age (spatial aggregation), per-pixel softmax attention
//! over preceding frames (temporal merging), and the data/feature fusion
//! baselines used by the ablation tables.

use crate::encoder::Bound;
use crate::error::{Error, Result};
use crate::scene::PointCloud;
use crate::tensor::{NodeId, ParameterStore, Tape, Tensor};

/// Kernel size for a frame of the given age: 1, 3, 5, 7, ...
pub fn kernel_size_for_age(age: usize) -> usize {
    2 * age + 1
}

/// The instantiated kernel schedule for `k_total` frames (ages 0..k_total-1).
pub fn kernel_schedule(k_total: usize) -> Vec<usize> {
    (0..k_total).map(kernel_size_for_age).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct FuseFlags {
    pub use_sa: bool,
    pub use_tm: bool,
}

impl FuseFlags {
    pub fn full() -> Self {
        FuseFlags { use_sa: true, use_tm: true }
    }
}

/// Per-pixel attention coefficients over preceding frames.
/// `per_age[i]` is the H×W map for frame age i+1; `stacked` is k'×H×W.
pub struct TemporalCoefficients {
    pub stacked: NodeId,
    pub per_age: Vec<NodeId>,
}

/// Parameter names and dimensions for one fusion block: SA kernels per frame
/// age, the per-pixel TM projection, and the 1×1 feature-fusion baseline.
#[derive(Debug, Clone)]
pub struct FusionSpec {
    pub c: usize,
    pub k_total: usize,
    pub h: usize,
    pub w: usize,
}

impl FusionSpec {
    pub fn new(c: usize, k_total: usize, h: usize, w: usize) -> Self {
        FusionSpec { c, k_total, h, w }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        for age in 0..self.k_total {
            let m = kernel_size_for_age(age);
            let scale = 1.0 / ((self.c * m * m) as f64).sqrt();
            store.init_uniform(&format!("sa.age{age}.k"), &[self.c, self.c, m, m], scale)?;
            store.init_zeros(&format!("sa.age{age}.b"), &[self.c])?;
        }
        if self.k_total >= 2 {
            // zero init: uniform initial attention over preceding frames
            store.init_zeros("tm.wa", &[self.h, self.w, 2 * self.c])?;
        }
        // feature-fusion baseline: identity on the newest frame's block
        let kc = self.k_total * self.c;
        let mut ff = Tensor::zeros(&[self.c, kc, 1, 1]);
        for ch in 0..self.c {
            ff.data_mut()[ch * kc + (self.k_total - 1) * self.c + ch] = 1.0;
        }
        store.insert("ff.k", ff)?;
        store.init_zeros("ff.b", &[self.c])?;
        Ok(())
    }

    /// f + ReLU(conv(f, kernel_age, m = 2·age+1)).
    pub fn spatial_aggregate(
        &self,
        tape: &Tape,
        bound: &Bound,
        f: NodeId,
        age: usize,
    ) -> Result<NodeId> {
        if age >= self.k_total {
            return Err(Error::Contract(format!(
                "frame age {age} out of range for {} frames",
                self.k_total
            )));
        }
        let m = kernel_size_for_age(age);
        let conv = tape.conv2d_same(
            f,
            bound[&format!("sa.age{age}.k")],
            bound[&format!("sa.age{age}.b")],
            m,
        )?;
        let act = tape.relu(conv);
        tape.add(f, act)
    }

    /// Per-pixel attention over preceding frames: the logit for age i is the
    /// projection of (f_current ∥ f_age_i) through W_a at that pixel, then a
    /// softmax across ages.
    pub fn temporal_coefficients(
        &self,
        tape: &Tape,
        bound: &Bound,
        f_current: NodeId,
        f_prev: &[NodeId],
    ) -> Result<TemporalCoefficients> {
        if f_prev.is_empty() {
            return Err(Error::Contract(
                "temporal_coefficients needs at least one preceding frame".into(),
            ));
        }
        let wa = bound["tm.wa"];
        let mut logits = Vec::with_capacity(f_prev.len());
        for &fp in f_prev {
            let cat = tape.concat_channels(f_current, fp)?;
            logits.push(tape.perpixel_dot(cat, wa)?);
        }
        let stacked_logits = tape.stack_maps(&logits)?;
        let stacked = tape.softmax_over_axis(stacked_logits, 0)?;
        let per_age = (0..f_prev.len())
            .map(|i| tape.index_axis0(stacked, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalCoefficients { stacked, per_age })
    }

    /// f̂ = f_current + Σ_i A_i ⊙ f_prev_i.
    pub fn temporal_merge(
        &self,
        tape: &Tape,
        f_current: NodeId,
        f_prev: &[NodeId],
        coeffs: &[NodeId],
    ) -> Result<NodeId> {
        if f_prev.len() != coeffs.len() {
            return Err(Error::Shape(format!(
                "temporal_merge: {} frames vs {} coefficient maps",
                f_prev.len(),
                coeffs.len()
            )));
        }
        let mut out = f_current;
        for (&fp, &a) in f_prev.iter().zip(coeffs) {
            let weighted = tape.hadamard_broadcast(a, fp)?;
            out = tape.add(out, weighted)?;
        }
        Ok(out)
    }

    /// Full fusion over `k_total` feature maps ordered oldest→newest.
    /// Returns the fused map and, when temporal merging ran, the stacked
    /// attention coefficients for export. With `use_tm` off but multiple
    /// frames present, preceding frames are merged with fixed uniform
    /// coefficients.
    pub fn fuse(
        &self,
        tape: &Tape,
        bound: &Bound,
        features: &[NodeId],
        flags: FuseFlags,
    ) -> Result<(NodeId, Option<NodeId>)> {
        if features.len() != self.k_total {
            return Err(Error::Contract(format!(
                "fuse expects {} frames, got {}",
                self.k_total,
                features.len()
            )));
        }
        let n = features.len();
        // aggregated[age] for age = 0..n-1 (newest first)
        let mut aggregated = Vec::with_capacity(n);
        for age in 0..n {
            let f = features[n - 1 - age];
            aggregated.push(if flags.use_sa {
                self.spatial_aggregate(tape, bound, f, age)?
            } else {
                f
            });
        }
        let f_current = aggregated[0];
        if n == 1 {
            return Ok((f_current, None));
        }
        let f_prev = &aggregated[1..];
        if flags.use_tm {
            let coeffs = self.temporal_coefficients(tape, bound, f_current, f_prev)?;
            let fused = self.temporal_merge(tape, f_current, f_prev, &coeffs.per_age)?;
            Ok((fused, Some(coeffs.stacked)))
        } else {
            let uniform = Tensor::filled(&[self.h, self.w], 1.0 / f_prev.len() as f64);
            let coeffs: Vec<NodeId> = f_prev.iter().map(|_| tape.constant(uniform.clone())).collect();
            let fused = self.temporal_merge(tape, f_current, f_prev, &coeffs)?;
            Ok((fused, None))
        }
    }

    /// Spatial aggregation, then attention-based temporal merging (Fig. 1(c)
    /// style fusion with both modules on).
    pub fn st_fuse(
        &self,
        tape: &Tape,
        bound: &Bound,
        features: &[NodeId],
    ) -> Result<(NodeId, Option<NodeId>)> {
        self.fuse(tape, bound, features, FuseFlags::full())
    }

    /// Channel-concatenate all frames (oldest→newest) and project back to C
    /// channels with a 1×1 convolution.
    pub fn feature_fusion_baseline(
        &self,
        tape: &Tape,
        bound: &Bound,
        features: &[NodeId],
    ) -> Result<NodeId> {
        if features.len() != self.k_total {
            return Err(Error::Contract(format!(
                "feature fusion expects {} frames, got {}",
                self.k_total,
                features.len()
            )));
        }
        let mut cat = features[0];
        for &f in &features[1..] {
            cat = tape.concat_channels(cat, f)?;
        }
        tape.conv2d_same(cat, bound["ff.k"], bound["ff.b"], 1)
    }
}

/// Stack the raw points of all frames into one cloud; Δt is preserved per
/// point and order follows the frame order.
pub fn data_fusion_baseline(frames: &[PointCloud]) -> PointCloud {
    let mut merged = PointCloud::default();
    for f in frames {
        merged.points.extend_from_slice(&f.points);
    }
    merged
}
