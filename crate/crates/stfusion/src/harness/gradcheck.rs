//! Whole-model gradient audit: finite differences over every parameter
//! tensor of the student pipeline (encoder, SA, TM, φ1, φ2, head) on 16×16
//! maps, against an init-state frozen teacher.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Teacher;
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::train::{scene_seed, student_objective, teacher_encoder_spec, StudentModel};
use crate::scene::generate_scene;
use crate::tensor::{finite_diff_check, GradCheckReport, ParameterStore};

/// Small-shape configuration used by the audit.
pub fn gradcheck_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        grid_h: 16,
        grid_w: 16,
        c_p: 3,
        c: 4,
        k: 4,
        num_objects: 2,
        clutter_density: 0.05,
        ..Default::default()
    }
}

/// Check the full objective's gradient for every parameter in `store`
/// (sampling a few coordinates per tensor). The report carries one entry per
/// parameter tensor with its max relative error.
pub fn run_gradcheck(cfg: &ExperimentConfig, store: &mut ParameterStore) -> Result<GradCheckReport> {
    let model = StudentModel::new(cfg)?;
    // audit at a generic point: fresh zero biases place many activations
    // exactly on ReLU kinks, where central differences disagree with any
    // one-sided subgradient. A non-finite value stays non-finite.
    let mut jitter = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a697474);
    for name in store.names() {
        for v in store.get_mut(&name)?.data_mut() {
            *v += jitter.gen_range(-0.05..0.05);
        }
    }
    // init-state teacher: the audit needs a frozen teacher, not a good one
    let mut t_store = ParameterStore::new(cfg.seed ^ 0x7465616368u64);
    let t_spec = teacher_encoder_spec(cfg);
    t_spec.register(&mut t_store)?;
    let teacher = Teacher::new(
        t_store,
        true,
        t_spec,
        cfg.teacher_one_hot.then_some(cfg.num_classes),
    )?;
    let seq = generate_scene(&cfg.scene_config(scene_seed(cfg.seed, 1, 0)))?;
    let scene = model.prepare_scene(&seq, Some(&teacher))?;
    // eps 1e-6 keeps the central-difference window well away from the
    // remaining ReLU kinks while staying far above cancellation noise
    finite_diff_check(store, 1e-6, 8, cfg.seed, move |tape, bound| {
        Ok(student_objective(&model, tape, bound, &scene)?.total)
    })
}

/// Build a fresh student at `seed` and audit it.
pub fn gradcheck_all(seed: u64) -> Result<GradCheckReport> {
    let cfg = gradcheck_config(seed);
    let model = StudentModel::new(&cfg)?;
    let mut store = ParameterStore::new(cfg.seed);
    model.register(&mut store)?;
    run_gradcheck(&cfg, &mut store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradcheck_passes_and_names_every_tensor() {
        let report = gradcheck_all(3).unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err());
        let names: Vec<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
        for expected in [
            "enc.point.w",
            "enc.conv1.k",
            "enc.conv2.k",
            "sa.age0.k",
            "sa.age3.k",
            "tm.wa",
            "sup.phi1.k",
            "sup.phi2.l1.k",
            "sup.phi2.l2.k",
            "head.hm.k",
            "head.reg.k",
        ] {
            assert!(names.contains(&expected), "missing {expected} in report");
        }
    }

    #[test]
    fn injected_nan_fails_with_the_tensor_named() {
        let cfg = gradcheck_config(4);
        let model = StudentModel::new(&cfg).unwrap();
        let mut store = ParameterStore::new(cfg.seed);
        model.register(&mut store).unwrap();
        store.get_mut("sa.age1.k").unwrap().data_mut()[0] = f64::NAN;
        let report = run_gradcheck(&cfg, &mut store).unwrap();
        assert!(!report.passes(1e-4));
        // the poisoned tensor is named in the report with a non-finite error
        let bad = report
            .entries
            .iter()
            .find(|e| e.name == "sa.age1.k")
            .expect("poisoned tensor must appear in the report");
        assert!(!bad.max_rel_err.is_finite());
    }
}
