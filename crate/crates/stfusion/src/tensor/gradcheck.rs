use std::collections::BTreeMap;

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParameterStore, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_err.is_finite()) && self.max_rel_err() <= tol
    }
}

/// Compare the analytic gradient of a recorded scalar computation against
/// central finite differences, sampling `coords_per_tensor` coordinates of
/// each parameter (all coordinates when the tensor is smaller).
///
/// Relative error per coordinate is |analytic − numeric| / max(1, |analytic|).
pub fn finite_diff_check<F>(
    params: &mut ParameterStore,
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    // analytic pass
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let root = f(&tape, &bound)?;
    if tape.value(root).len() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check wants a scalar computation, got shape {:?}",
            tape.value(root).shape()
        )));
    }
    let grads = tape.backward(root)?;
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, id) in &bound {
        let g = grads
            .get(*id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params.get(name).map(|t| t.len()).unwrap_or(0)]);
        analytic.insert(name.clone(), g);
    }
    drop(tape);

    let eval = |params: &ParameterStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let root = f(&tape, &bound)?;
        tape.value(root).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = eval(params)?;
    let mut entries = Vec::new();
    for name in params.names() {
        let n = params.get(&name)?.len();
        // a non-finite parameter can be masked downstream (e.g. by a max);
        // flag it here so poisoned tensors always fail by name
        if params.get(&name)?.data().iter().any(|v| !v.is_finite()) {
            entries.push(GradCheckEntry {
                name,
                max_rel_err: f64::INFINITY,
                coords_checked: 0,
            });
            continue;
        }
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_rel = 0.0f64;
        for &i in &coords {
            let orig = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(params)?;
            params.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(params)?;
            params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[&name][i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if !rel.is_finite() {
                max_rel = f64::INFINITY;
                break;
            }
            // a coordinate whose ±eps window straddles a kink (e.g. a ReLU
            // crossing zero) makes the central difference average two
            // different slopes. Excuse the mismatch only when the one-sided
            // slopes disagree by at least as much as the discrepancy itself;
            // a wrong backward pass at a smooth point is never excused.
            let fwd = (plus - f0) / eps;
            let bwd = (f0 - minus) / eps;
            if (a - numeric).abs() <= 0.75 * (fwd - bwd).abs() {
                continue;
            }
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err: max_rel,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_scalar_gradient_is_ones() {
        // f(w) = sum(w): analytic grad is identically 1
        let mut params = ParameterStore::new(3);
        params.init_uniform("w", &[4, 4], 1.0).unwrap();
        let report = finite_diff_check(&mut params, 1e-5, 32, 0, |tape, bound| {
            Ok(tape.sum(bound["w"]))
        })
        .unwrap();
        assert!(report.passes(1e-10), "max err {}", report.max_rel_err());
    }

    #[test]
    fn quadratic_gradient_matches() {
        let mut params = ParameterStore::new(5);
        params.init_uniform("w", &[6], 2.0).unwrap();
        let report = finite_diff_check(&mut params, 1e-5, 32, 0, |tape, bound| {
            let sq = tape.mul(bound["w"], bound["w"])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passes(1e-8), "max err {}", report.max_rel_err());
    }

    #[test]
    fn non_scalar_computation_rejected() {
        let mut params = ParameterStore::new(5);
        params.init_uniform("w", &[6], 2.0).unwrap();
        let res = finite_diff_check(&mut params, 1e-5, 8, 0, |_tape, bound| Ok(bound["w"]));
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn conv_and_softmax_composite_gradient() {
        let mut params = ParameterStore::new(11);
        params.init_uniform("k", &[2, 2, 3, 3], 0.4).unwrap();
        params.init_uniform("b", &[2], 0.1).unwrap();
        let input = Tensor::new(
            vec![2, 4, 4],
            (0..32).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.21).collect(),
        )
        .unwrap();
        let report = finite_diff_check(&mut params, 1e-5, 32, 1, move |tape, bound| {
            let x = tape.constant(input.clone());
            let y = tape.conv2d_same(x, bound["k"], bound["b"], 3)?;
            let r = tape.relu(y);
            let s = tape.softmax_over_axis(r, 0)?;
            let m = tape.mul(s, r)?;
            Ok(tape.sum(m))
        })
        .unwrap();
        assert!(report.passes(1e-6), "max err {}", report.max_rel_err());
    }
}
