//! Per-point semantic labels from ground-truth boxes: each point gets the
//! class id of its containing oriented box, or 0 for background. The labeled
//! cloud trains the teacher.

use crate::error::{Error, Result};
use crate::scene::{ObjectTrack, Point, PointCloud, Pose};
use crate::tensor::Tensor;

/// A point cloud plus one class label per point. Base fields stay
/// bit-identical to the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedPointCloud {
    pub base: PointCloud,
    pub labels: Vec<u32>,
}

/// What to do when a point falls inside more than one box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Contested points are an error (boxes are non-overlapping by scene
    /// construction, so a contested point indicates a bad caller).
    Error,
    FirstByIndex,
}

/// Oriented 3D box membership, boundary inclusive: the point is translated
/// to the box center, rotated by −yaw, and compared against half-extents.
pub fn point_in_box(p: &Point, pose: &Pose, size: &[f64; 3]) -> bool {
    let (s, c) = pose.yaw.sin_cos();
    let dx = p.x - pose.x;
    let dy = p.y - pose.y;
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    let lz = p.z - pose.z;
    lx.abs() <= size[0] / 2.0 && ly.abs() <= size[1] / 2.0 && lz.abs() <= size[2] / 2.0
}

/// Label every point with the class of its containing box (0 otherwise),
/// preserving point order. `gt` must hold poses valid for this cloud's
/// timestamp (use [`ObjectTrack::pose_at`] for earlier frames).
pub fn inject(
    cloud: &PointCloud,
    gt: &[ObjectTrack],
    tie_break: TieBreak,
) -> Result<InjectedPointCloud> {
    let mut labels = Vec::with_capacity(cloud.len());
    for (pi, p) in cloud.points.iter().enumerate() {
        let mut label = 0u32;
        let mut hits = 0usize;
        for track in gt {
            if point_in_box(p, &track.pose, &track.size) {
                hits += 1;
                if hits == 1 {
                    label = track.class_id;
                } else if tie_break == TieBreak::Error {
                    return Err(Error::Contract(format!(
                        "point {pi} is contained in multiple boxes and tie_break is Error"
                    )));
                }
            }
        }
        labels.push(label);
    }
    Ok(InjectedPointCloud {
        base: cloud.clone(),
        labels,
    })
}

/// Same as [`inject`] but with the boxes moved back `dt` seconds.
pub fn inject_at(
    cloud: &PointCloud,
    gt: &[ObjectTrack],
    dt: f64,
    tie_break: TieBreak,
) -> Result<InjectedPointCloud> {
    let moved: Vec<ObjectTrack> = gt
        .iter()
        .map(|t| ObjectTrack {
            pose: t.pose_at(dt),
            ..t.clone()
        })
        .collect();
    inject(cloud, &moved, tie_break)
}

impl InjectedPointCloud {
    /// N×6 matrix (x, y, z, r, Δt, c) with the label fed as a raw numeric
    /// channel, or N×(5+num_classes) with a one-hot class block when
    /// `one_hot_classes` is set (background is all zeros).
    pub fn to_matrix(&self, one_hot_classes: Option<usize>) -> Result<Tensor> {
        let n = self.base.len();
        match one_hot_classes {
            None => {
                let mut data = Vec::with_capacity(n * 6);
                for (p, &c) in self.base.points.iter().zip(&self.labels) {
                    data.extend_from_slice(&[p.x, p.y, p.z, p.r, p.dt, c as f64]);
                }
                Tensor::new(vec![n, 6], data)
            }
            Some(k) => {
                let d = 5 + k;
                let mut data = vec![0.0; n * d];
                for (i, (p, &c)) in self.base.points.iter().zip(&self.labels).enumerate() {
                    data[i * d..i * d + 5].copy_from_slice(&[p.x, p.y, p.z, p.r, p.dt]);
                    if c >= 1 && (c as usize) <= k {
                        data[i * d + 5 + (c as usize - 1)] = 1.0;
                    }
                }
                Tensor::new(vec![n, d], data)
            }
        }
    }

    /// Drop the semantic channel, recovering the base cloud bit-exactly.
    pub fn strip(&self) -> PointCloud {
        self.base.clone()
    }
}
