//! Feature-level distillation losses: whole-scene L2 against the teacher
//! through a shared 1×1 projection, and an object-aware reconstruction term
//! weighted by a Gaussian map peaked at box centers.
//!
//! Note on the weight map's sign: the source formula for the center weight is
//! sometimes written with a positive exponent, which diverges with distance;
//! this implementation uses the standard heatmap form exp(−d²/(2σ²)), which
//! is 1 at a center cell and decays away from it.

use crate::encoder::{Bound, GridSpec};
use crate::error::{Error, Result};
use crate::scene::ObjectTrack;
use crate::tensor::{NodeId, ParameterStore, Tape, Tensor};

/// Parameter names for φ1 (1×1 projection, shared by both losses) and φ2
/// (two 3×3 decoder layers with a ReLU between, no final activation).
#[derive(Debug, Clone)]
pub struct SupervisionSpec {
    pub c: usize,
}

impl SupervisionSpec {
    pub fn new(c: usize) -> Self {
        SupervisionSpec { c }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        // identity init: the projected student feature starts as itself
        let mut phi1 = Tensor::zeros(&[self.c, self.c, 1, 1]);
        for ch in 0..self.c {
            phi1.data_mut()[ch * self.c + ch] = 1.0;
        }
        store.insert("sup.phi1.k", phi1)?;
        store.init_zeros("sup.phi1.b", &[self.c])?;
        let scale = 1.0 / ((9 * self.c) as f64).sqrt();
        store.init_uniform("sup.phi2.l1.k", &[self.c, self.c, 3, 3], scale)?;
        store.init_zeros("sup.phi2.l1.b", &[self.c])?;
        store.init_uniform("sup.phi2.l2.k", &[self.c, self.c, 3, 3], scale)?;
        store.init_zeros("sup.phi2.l2.b", &[self.c])?;
        Ok(())
    }

    pub fn phi1(&self, tape: &Tape, bound: &Bound, f: NodeId) -> Result<NodeId> {
        tape.conv2d_same(f, bound["sup.phi1.k"], bound["sup.phi1.b"], 1)
    }

    pub fn phi2(&self, tape: &Tape, bound: &Bound, f: NodeId) -> Result<NodeId> {
        let h = tape.conv2d_same(f, bound["sup.phi2.l1.k"], bound["sup.phi2.l1.b"], 3)?;
        let h = tape.relu(h);
        tape.conv2d_same(h, bound["sup.phi2.l2.k"], bound["sup.phi2.l2.b"], 3)
    }
}

fn check_same_shape(tape: &Tape, a: NodeId, b: NodeId) -> Result<()> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::Shape(format!(
            "feature shape mismatch: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        )));
    }
    Ok(())
}

/// Gaussian center-weight map over box centers: W(i,j) = max over boxes of
/// exp(−((bi−i)² + (bj−j)²)/(2σ²)) with (bi, bj) the center's grid cell, and
/// `floor` as the lower bound everywhere (keeps an empty scene's map
/// positive). Boxes whose centers fall outside the grid are skipped.
pub fn gaussian_weight_map(
    gt: &[ObjectTrack],
    grid: &GridSpec,
    sigma: f64,
    floor: f64,
) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let cells: Vec<(usize, usize)> = gt
        .iter()
        .filter_map(|t| grid.cell_of(t.pose.x, t.pose.y))
        .collect();
    Ok(gaussian_map_from_cells(&cells, grid.h, grid.w, sigma, floor))
}

/// Same map built from explicit center cells (used for detection targets).
pub fn gaussian_map_from_cells(
    cells: &[(usize, usize)],
    h: usize,
    w: usize,
    sigma: f64,
    floor: f64,
) -> Tensor {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = Tensor::filled(&[h, w], floor);
    for i in 0..h {
        for j in 0..w {
            let mut best = floor;
            for &(bi, bj) in cells {
                let d2 = (bi as f64 - i as f64).powi(2) + (bj as f64 - j as f64).powi(2);
                best = best.max((-d2 * inv).exp());
            }
            out.data_mut()[i * w + j] = best;
        }
    }
    out
}

/// Default lower bound for the weight map.
pub const WEIGHT_FLOOR: f64 = 1e-4;

/// Scene distillation: mean over cells of ‖φ1(f̂) − f*‖². The teacher map
/// must be a constant node (no gradient flows into it).
pub fn scene_distill_loss(
    tape: &Tape,
    bound: &Bound,
    spec: &SupervisionSpec,
    f_hat: NodeId,
    f_star: NodeId,
) -> Result<NodeId> {
    check_same_shape(tape, f_hat, f_star)?;
    let shape = tape.value(f_hat).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let proj = spec.phi1(tape, bound, f_hat)?;
    let d = tape.sub(proj, f_star)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (h * w) as f64))
}

/// Object-aware reconstruction: mean over cells of W(i,j)·‖φ2(φ1(f̂)) − f*‖²,
/// with φ1 the same parameters as in [`scene_distill_loss`].
pub fn object_recon_loss(
    tape: &Tape,
    bound: &Bound,
    spec: &SupervisionSpec,
    f_hat: NodeId,
    f_star: NodeId,
    gt: &[ObjectTrack],
    grid: &GridSpec,
    sigma: f64,
) -> Result<NodeId> {
    check_same_shape(tape, f_hat, f_star)?;
    let shape = tape.value(f_hat).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    if h != grid.h || w != grid.w {
        return Err(Error::Shape(format!(
            "feature map {h}×{w} does not match grid {}×{}",
            grid.h, grid.w
        )));
    }
    let wmap = tape.constant(gaussian_weight_map(gt, grid, sigma, WEIGHT_FLOOR)?);
    let proj = spec.phi1(tape, bound, f_hat)?;
    let dec = spec.phi2(tape, bound, proj)?;
    let d = tape.sub(dec, f_star)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.hadamard_broadcast(wmap, sq)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / (h * w) as f64))
}

pub struct SupervisionLoss {
    pub distill: NodeId,
    pub recon: NodeId,
    pub total: NodeId,
}

/// α·L_distill + β·L_recon.
#[allow(clippy::too_many_arguments)]
pub fn semantic_supervision_loss(
    tape: &Tape,
    bound: &Bound,
    spec: &SupervisionSpec,
    f_hat: NodeId,
    f_star: NodeId,
    gt: &[ObjectTrack],
    grid: &GridSpec,
    sigma: f64,
    alpha: f64,
    beta: f64,
) -> Result<SupervisionLoss> {
    let distill = scene_distill_loss(tape, bound, spec, f_hat, f_star)?;
    let recon = object_recon_loss(tape, bound, spec, f_hat, f_star, gt, grid, sigma)?;
    let a = tape.scale(distill, alpha);
    let b = tape.scale(recon, beta);
    let total = tape.add(a, b)?;
    Ok(SupervisionLoss { distill, recon, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ObjectTrack, Pose};
    use crate::tensor::finite_diff_check;

    fn track_at(x: f64, y: f64) -> ObjectTrack {
        ObjectTrack {
            class_id: 1,
            size: [4.0, 2.0, 1.5],
            pose: Pose { x, y, z: 0.75, yaw: 0.0 },
            velocity: [0.0, 0.0],
            points_per_frame: 0,
        }
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let data = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn weight_map_is_one_at_center_cell() {
        let grid = GridSpec::centered(16.0, 64, 64).unwrap();
        let t = track_at(0.0, 0.0);
        let (bi, bj) = grid.cell_of(0.0, 0.0).unwrap();
        let w = gaussian_weight_map(&[t], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        assert_eq!(w.at2(bi, bj), 1.0);
    }

    #[test]
    fn weight_at_distance_sigma_is_exp_minus_half() {
        let grid = GridSpec::centered(16.0, 64, 64).unwrap();
        let t = track_at(0.0, 0.0);
        let (bi, bj) = grid.cell_of(0.0, 0.0).unwrap();
        let w = gaussian_weight_map(&[t], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        assert!((w.at2(bi + 7, bj) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((w.at2(bi, bj - 7) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn multi_box_map_is_pointwise_max_of_singles() {
        let grid = GridSpec::centered(16.0, 64, 64).unwrap();
        let a = track_at(-5.0, 3.0);
        let b = track_at(6.0, -2.0);
        let wa = gaussian_weight_map(&[a.clone()], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        let wb = gaussian_weight_map(&[b.clone()], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        let wab = gaussian_weight_map(&[a, b], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(wab.at2(i, j), wa.at2(i, j).max(wb.at2(i, j)));
            }
        }
    }

    #[test]
    fn empty_gt_gives_floor_everywhere_and_bad_sigma_errors() {
        let grid = GridSpec::centered(16.0, 16, 16).unwrap();
        let w = gaussian_weight_map(&[], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        assert!(w.data().iter().all(|&v| v == WEIGHT_FLOOR));
        assert!(gaussian_weight_map(&[], &grid, 0.0, WEIGHT_FLOOR).is_err());
    }

    #[test]
    fn weight_map_permutation_and_duplication_invariant() {
        let grid = GridSpec::centered(16.0, 32, 32).unwrap();
        let a = track_at(-4.0, 1.0);
        let b = track_at(2.0, 5.0);
        let ab = gaussian_weight_map(&[a.clone(), b.clone()], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        let ba = gaussian_weight_map(&[b.clone(), a.clone()], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        let dup = gaussian_weight_map(&[a.clone(), b.clone(), a], &grid, 7.0, WEIGHT_FLOOR).unwrap();
        assert_eq!(ab.data(), ba.data());
        assert_eq!(ab.data(), dup.data());
    }

    #[test]
    fn matching_features_give_zero_distill_loss() {
        let spec = SupervisionSpec::new(3);
        let mut store = ParameterStore::new(1);
        spec.register(&mut store).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let f = rand_map(&[3, 8, 8], 5);
        let (fh, fs) = (tape.constant(f.clone()), tape.constant(f));
        let loss = scene_distill_loss(&tape, &bound, &spec, fh, fs).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_distill_loss_equals_channel_count() {
        let c = 4;
        let spec = SupervisionSpec::new(c);
        let mut store = ParameterStore::new(2);
        spec.register(&mut store).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let f = rand_map(&[c, 8, 8], 6);
        let fh = tape.constant(f.clone());
        let mut shifted = f;
        for v in shifted.data_mut() {
            *v -= 1.0;
        }
        let fs = tape.constant(shifted);
        let loss = scene_distill_loss(&tape, &bound, &spec, fh, fs).unwrap();
        assert!((tape.value(loss).item().unwrap() - c as f64).abs() < 1e-12);
    }

    #[test]
    fn distill_loss_shape_mismatch_errors() {
        let spec = SupervisionSpec::new(2);
        let mut store = ParameterStore::new(3);
        spec.register(&mut store).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let fh = tape.constant(rand_map(&[2, 8, 8], 7));
        let fs = tape.constant(rand_map(&[2, 8, 9], 8));
        assert!(matches!(
            scene_distill_loss(&tape, &bound, &spec, fh, fs),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn recon_loss_zero_when_decoder_output_matches_teacher() {
        // zero out phi2 so f-dagger == 0, and use a zero teacher map
        let spec = SupervisionSpec::new(2);
        let mut store = ParameterStore::new(4);
        spec.register(&mut store).unwrap();
        store.get_mut("sup.phi2.l1.k").unwrap().data_mut().fill(0.0);
        store.get_mut("sup.phi2.l2.k").unwrap().data_mut().fill(0.0);
        let grid = GridSpec::centered(16.0, 8, 8).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let fh = tape.constant(rand_map(&[2, 8, 8], 9));
        let fs = tape.constant(Tensor::zeros(&[2, 8, 8]));
        let loss =
            object_recon_loss(&tape, &bound, &spec, fh, fs, &[track_at(0.0, 0.0)], &grid, 7.0)
                .unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn recon_loss_matches_scalar_reference() {
        let (c, h, w) = (2usize, 8usize, 8usize);
        let spec = SupervisionSpec::new(c);
        let mut store = ParameterStore::new(5);
        spec.register(&mut store).unwrap();
        *store.get_mut("sup.phi1.k").unwrap() = rand_map(&[c, c, 1, 1], 20);
        *store.get_mut("sup.phi1.b").unwrap() = rand_map(&[c], 21);
        *store.get_mut("sup.phi2.l1.k").unwrap() = rand_map(&[c, c, 3, 3], 22);
        *store.get_mut("sup.phi2.l1.b").unwrap() = rand_map(&[c], 23);
        *store.get_mut("sup.phi2.l2.k").unwrap() = rand_map(&[c, c, 3, 3], 24);
        *store.get_mut("sup.phi2.l2.b").unwrap() = rand_map(&[c], 25);
        let grid = GridSpec::centered(16.0, h, w).unwrap();
        let gt = vec![track_at(1.0, -2.0)];
        let f_hat = rand_map(&[c, h, w], 26);
        let f_star = rand_map(&[c, h, w], 27);

        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let fh = tape.constant(f_hat.clone());
        let fs = tape.constant(f_star.clone());
        let loss = object_recon_loss(&tape, &bound, &spec, fh, fs, &gt, &grid, 7.0).unwrap();
        let got = tape.value(loss).item().unwrap();

        // scalar reference: conv1x1 -> conv3x3 -> relu -> conv3x3, zero pad
        let phi1k = store.get("sup.phi1.k").unwrap();
        let phi1b = store.get("sup.phi1.b").unwrap();
        let conv = |input: &Tensor, k: &Tensor, b: &Tensor, m: usize| -> Tensor {
            let pad = (m / 2) as isize;
            let mut out = Tensor::zeros(&[c, h, w]);
            for co in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = b.data()[co];
                        for ci in 0..c {
                            for ki in 0..m {
                                for kj in 0..m {
                                    let ii = i as isize + ki as isize - pad;
                                    let jj = j as isize + kj as isize - pad;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w
                                    {
                                        acc += input.at3(ci, ii as usize, jj as usize)
                                            * k.data()[((co * c + ci) * m + ki) * m + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[(co * h + i) * w + j] = acc;
                    }
                }
            }
            out
        };
        let proj = conv(&f_hat, phi1k, phi1b, 1);
        let mut mid = conv(
            &proj,
            store.get("sup.phi2.l1.k").unwrap(),
            store.get("sup.phi2.l1.b").unwrap(),
            3,
        );
        for v in mid.data_mut() {
            *v = v.max(0.0);
        }
        let dec = conv(
            &mid,
            store.get("sup.phi2.l2.k").unwrap(),
            store.get("sup.phi2.l2.b").unwrap(),
            3,
        );
        let wmap = gaussian_weight_map(&gt, &grid, 7.0, WEIGHT_FLOOR).unwrap();
        let mut expect = 0.0;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let d = dec.at3(ch, i, j) - f_star.at3(ch, i, j);
                    expect += wmap.at2(i, j) * d * d;
                }
            }
        }
        expect /= (h * w) as f64;
        assert!((got - expect).abs() < 1e-10, "got {got}, expect {expect}");
    }

    #[test]
    fn combined_loss_is_weighted_sum_and_projections() {
        let spec = SupervisionSpec::new(2);
        let mut store = ParameterStore::new(6);
        spec.register(&mut store).unwrap();
        let grid = GridSpec::centered(16.0, 8, 8).unwrap();
        let gt = vec![track_at(0.0, 0.0)];
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let fh = tape.constant(rand_map(&[2, 8, 8], 30));
        let fs = tape.constant(rand_map(&[2, 8, 8], 31));
        let out = semantic_supervision_loss(
            &tape, &bound, &spec, fh, fs, &gt, &grid, 7.0, 1.0, 0.1,
        )
        .unwrap();
        let (d, r, t) = (
            tape.value(out.distill).item().unwrap(),
            tape.value(out.recon).item().unwrap(),
            tape.value(out.total).item().unwrap(),
        );
        assert!((t - (d + 0.1 * r)).abs() < 1e-12);
        // alpha=0, beta=1 projects onto the recon term
        let out2 = semantic_supervision_loss(
            &tape, &bound, &spec, fh, fs, &gt, &grid, 7.0, 0.0, 1.0,
        )
        .unwrap();
        assert!((tape.value(out2.total).item().unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn gradients_pass_finite_diff_and_phi1_feeds_both_terms() {
        let (c, h, w) = (2usize, 8usize, 8usize);
        let spec = SupervisionSpec::new(c);
        let mut store = ParameterStore::new(7);
        spec.register(&mut store).unwrap();
        // move phi1 off the exact identity
        *store.get_mut("sup.phi1.k").unwrap() = rand_map(&[c, c, 1, 1], 40);
        let grid = GridSpec::centered(16.0, h, w).unwrap();
        let gt = vec![track_at(2.0, 2.0)];
        let f_hat = rand_map(&[c, h, w], 41);
        let f_star = rand_map(&[c, h, w], 42);
        let spec2 = spec.clone();
        let (g2, gt2, fh2, fs2) = (grid, gt.clone(), f_hat.clone(), f_star.clone());
        let report = finite_diff_check(&mut store, 1e-5, 24, 43, move |tape, bound| {
            let fh = tape.constant(fh2.clone());
            let fs = tape.constant(fs2.clone());
            let out = semantic_supervision_loss(
                tape, bound, &spec2, fh, fs, &gt2, &g2, 7.0, 1.0, 0.1,
            )?;
            Ok(out.total)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err());

        // phi1 perturbation must reach both components
        let grid = GridSpec::centered(16.0, h, w).unwrap();
        for root in ["distill", "recon"] {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let fh = tape.constant(f_hat.clone());
            let fs = tape.constant(f_star.clone());
            let out = semantic_supervision_loss(
                &tape, &bound, &spec, fh, fs, &gt, &grid, 7.0, 1.0, 0.1,
            )
            .unwrap();
            let node = if root == "distill" { out.distill } else { out.recon };
            let grads = tape.backward(node).unwrap();
            let g = grads.get(bound["sup.phi1.k"]).unwrap();
            assert!(
                g.iter().any(|&v| v.abs() > 1e-12),
                "phi1 gradient missing in {root} term"
            );
        }
    }
}
