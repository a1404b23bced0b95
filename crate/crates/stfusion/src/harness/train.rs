//! Teacher and student training loops. Determinism contract: scene seeds
//! derive from the config seed, parameter init is keyed by name, batches are
//! accumulated in scene order, so a rerun with the same config reproduces
//! checkpoints and metric logs byte-for-byte.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::detect::{decode, detection_loss, pooled_average_precision, Detection, HeadSpec};
use crate::encoder::{Bound, EncoderSpec, GridSpec, Teacher};
use crate::error::{Error, Result};
use crate::fusion::{data_fusion_baseline, FuseFlags, FusionSpec};
use crate::harness::config::{ExperimentConfig, FusionMode};
use crate::harness::metrics::MetricsRecord;
use crate::inject::{inject, TieBreak};
use crate::scene::{generate_scene, ObjectTrack, SceneConfig, SceneSequence};
use crate::supervision::{semantic_supervision_loss, SupervisionSpec};
use crate::tensor::{NodeId, ParameterStore, Tape, Tensor};

// scene-seed streams, so train/eval/teacher sets never collide
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TEACHER_TRAIN: u64 = 3;
const STREAM_TEACHER_EVAL: u64 = 4;

pub fn scene_seed(base: u64, stream: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add(stream.wrapping_mul(1_000_000))
        .wrapping_add(index as u64)
}

/// Plain SGD with momentum; velocity buffers keyed by parameter name.
pub struct Sgd {
    momentum: f64,
    vel: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, vel: BTreeMap::new() }
    }

    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let v = self
                .vel
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(name)?;
            for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

fn lr_for_epoch(cfg_lr: f64, epoch: usize, epochs: usize) -> f64 {
    let decay_at = (epochs as f64 * 0.8).floor() as usize;
    if epochs > 1 && epoch == 0 {
        // warmup: full-size first steps from a fresh init can knock the
        // encoder into an all-dead-ReLU basin the focal loss never escapes
        cfg_lr * 0.1
    } else if epochs > 1 && epoch >= decay_at {
        cfg_lr * 0.1
    } else {
        cfg_lr
    }
}

fn ensure_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{name} diverged to {v}")))
    }
}

/// Mean over batch members of per-parameter gradients, accumulated in scene
/// order (index order of `parts`).
fn accumulate(parts: &[BTreeMap<String, Vec<f64>>]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let scale = 1.0 / parts.len() as f64;
    for part in parts {
        for (name, g) in part {
            let acc = out.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi * scale;
            }
        }
    }
    out
}

fn grads_to_map(
    tape: &Tape,
    bound: &Bound,
    root: NodeId,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let grads = tape.backward(root)?;
    let mut out = BTreeMap::new();
    for (name, id) in bound {
        if let Some(g) = grads.get(*id) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    Ok(out)
}

// ── teacher ─────────────────────────────────────────────────────────

pub struct TeacherScene {
    pub matrix: Tensor,
    pub gt: Vec<ObjectTrack>,
}

fn teacher_scene_config(cfg: &ExperimentConfig, seed: u64) -> SceneConfig {
    // single-frame scenes: the teacher is independent of k, so one teacher
    // checkpoint serves every row of an ablation suite
    SceneConfig { preceding: 0, ..cfg.scene_config(seed) }
}

fn teacher_in_dim(cfg: &ExperimentConfig) -> usize {
    if cfg.teacher_one_hot {
        5 + cfg.num_classes
    } else {
        6
    }
}

pub fn teacher_encoder_spec(cfg: &ExperimentConfig) -> EncoderSpec {
    EncoderSpec::new("enc", teacher_in_dim(cfg), cfg.c_p, cfg.c)
}

fn build_teacher_scenes(
    cfg: &ExperimentConfig,
    stream: u64,
    count: usize,
) -> Result<Vec<TeacherScene>> {
    let one_hot = cfg.teacher_one_hot.then_some(cfg.num_classes);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let sc = teacher_scene_config(cfg, scene_seed(cfg.seed, stream, i));
            let seq = generate_scene(&sc)?;
            let injected = inject(seq.newest(), &seq.gt, TieBreak::FirstByIndex)?;
            Ok(TeacherScene { matrix: injected.to_matrix(one_hot)?, gt: seq.gt })
        })
        .collect()
}

fn eval_injected(
    cfg: &ExperimentConfig,
    store: &ParameterStore,
    enc: &EncoderSpec,
    head: &HeadSpec,
    grid: &GridSpec,
    scenes: &[TeacherScene],
) -> Result<f64> {
    let per_scene: Vec<(Vec<Detection>, Vec<ObjectTrack>)> = scenes
        .par_iter()
        .map(|s| -> Result<_> {
            let tape = Tape::new();
            let bound = store.bind(&tape, false);
            let f = enc.encode(&tape, &bound, &s.matrix, grid)?;
            let (hm, reg) = head.forward(&tape, &bound, f)?;
            let dets = decode(
                &tape.value(hm),
                &tape.value(reg),
                grid,
                cfg.score_thresh,
                cfg.max_dets,
            );
            Ok((dets, s.gt.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(pooled_average_precision(&per_scene, cfg.iou_thresh))
}

/// Train the teacher (encoder + head) on semantically injected single-frame
/// clouds. The returned store is ready to be checkpointed with the frozen
/// flag set.
pub fn train_teacher(cfg: &ExperimentConfig) -> Result<(ParameterStore, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let enc = teacher_encoder_spec(cfg);
    let head = HeadSpec::new(cfg.c, cfg.num_classes);
    // distinct init stream from the student, same for every k
    let mut store = ParameterStore::new(cfg.seed ^ 0x7465616368u64);
    enc.register(&mut store)?;
    head.register(&mut store)?;

    let train = build_teacher_scenes(cfg, STREAM_TEACHER_TRAIN, cfg.train_scenes)?;
    let eval = build_teacher_scenes(cfg, STREAM_TEACHER_EVAL, cfg.eval_scenes)?;

    let mut sgd = Sgd::new(cfg.momentum);
    let mut records = Vec::with_capacity(cfg.teacher_epochs);
    for epoch in 0..cfg.teacher_epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(cfg.teacher_lr, epoch, cfg.teacher_epochs);
        let mut loss_sum = 0.0;
        for chunk in (0..train.len()).collect::<Vec<_>>().chunks(cfg.batch) {
            let parts: Vec<(f64, BTreeMap<String, Vec<f64>>)> = chunk
                .par_iter()
                .map(|&i| -> Result<_> {
                    let s = &train[i];
                    let tape = Tape::new();
                    let bound = store.bind(&tape, true);
                    let f = enc.encode(&tape, &bound, &s.matrix, &grid)?;
                    let (hm, reg) = head.forward(&tape, &bound, f)?;
                    let loss = detection_loss(&tape, hm, reg, &s.gt, &grid, cfg.num_classes)?;
                    let val = ensure_finite("teacher loss", tape.value(loss).item()?)?;
                    Ok((val, grads_to_map(&tape, &bound, loss)?))
                })
                .collect::<Result<_>>()?;
            loss_sum += parts.iter().map(|(l, _)| l).sum::<f64>();
            let grads = accumulate(&parts.iter().map(|(_, g)| g.clone()).collect::<Vec<_>>());
            sgd.step(&mut store, &grads, lr)?;
        }
        let l_det = loss_sum / train.len() as f64;
        let ap = eval_injected(cfg, &store, &enc, &head, &grid, &eval)?;
        records.push(MetricsRecord {
            epoch,
            l_det,
            l_total: l_det,
            ap,
            wall_secs: started.elapsed().as_secs_f64(),
            ..Default::default()
        });
    }
    Ok((store, records))
}

// ── student ─────────────────────────────────────────────────────────

pub struct SceneData {
    pub gt: Vec<ObjectTrack>,
    /// Per-frame N×5 matrices, oldest→newest (unused in data-fusion mode).
    pub frames: Vec<Tensor>,
    /// All frames' points in one matrix (data-fusion mode).
    pub merged: Option<Tensor>,
    /// Frozen teacher features f* at the newest frame.
    pub teacher_f: Option<Tensor>,
}

/// Student model wiring: all parameter groups are registered regardless of
/// the pruning flags, so flag changes never shift another module's init.
pub struct StudentModel {
    pub cfg: ExperimentConfig,
    pub grid: GridSpec,
    pub enc: EncoderSpec,
    pub fusion: FusionSpec,
    pub sup: SupervisionSpec,
    pub head: HeadSpec,
}

impl StudentModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        Ok(StudentModel {
            cfg: cfg.clone(),
            grid,
            enc: EncoderSpec::new("enc", 5, cfg.c_p, cfg.c),
            fusion: FusionSpec::new(cfg.c, cfg.effective_k(), grid.h, grid.w),
            sup: SupervisionSpec::new(cfg.c),
            head: HeadSpec::new(cfg.c, cfg.num_classes),
        })
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        self.enc.register(store)?;
        self.fusion.register(store)?;
        self.sup.register(store)?;
        self.head.register(store)?;
        Ok(())
    }

    pub fn prepare_scene(&self, seq: &SceneSequence, teacher: Option<&Teacher>) -> Result<SceneData> {
        let merged = if self.cfg.fusion_mode == FusionMode::Data {
            Some(data_fusion_baseline(&seq.frames).to_matrix()?)
        } else {
            None
        };
        let frames = if self.cfg.fusion_mode == FusionMode::Data {
            Vec::new()
        } else {
            seq.frames
                .iter()
                .map(|f| f.to_matrix())
                .collect::<Result<Vec<_>>>()?
        };
        let teacher_f = match teacher {
            Some(t) => {
                let injected = inject(seq.newest(), &seq.gt, TieBreak::FirstByIndex)?;
                let tape = Tape::new();
                let f = t.features(&tape, &injected, &self.grid)?;
                Some((*tape.value(f)).clone())
            }
            None => None,
        };
        Ok(SceneData { gt: seq.gt.clone(), frames, merged, teacher_f })
    }

    pub fn build_scenes(
        &self,
        stream: u64,
        count: usize,
        teacher: Option<&Teacher>,
    ) -> Result<Vec<SceneData>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let sc = self.cfg.scene_config(scene_seed(self.cfg.seed, stream, i));
                let seq = generate_scene(&sc)?;
                self.prepare_scene(&seq, teacher)
            })
            .collect()
    }

    /// Fused BEV features for one scene, plus stacked attention when TM ran.
    pub fn features(
        &self,
        tape: &Tape,
        bound: &Bound,
        scene: &SceneData,
    ) -> Result<(NodeId, Option<NodeId>)> {
        match self.cfg.fusion_mode {
            FusionMode::Data => {
                let m = scene.merged.as_ref().ok_or_else(|| {
                    Error::Contract("data-fusion scene is missing the merged cloud".into())
                })?;
                Ok((self.enc.encode(tape, bound, m, &self.grid)?, None))
            }
            FusionMode::Feature => {
                let feats = self.encode_frames(tape, bound, scene)?;
                Ok((self.fusion.feature_fusion_baseline(tape, bound, &feats)?, None))
            }
            FusionMode::Single | FusionMode::St => {
                let feats = self.encode_frames(tape, bound, scene)?;
                let flags = FuseFlags { use_sa: self.cfg.use_sa, use_tm: self.cfg.use_tm };
                self.fusion.fuse(tape, bound, &feats, flags)
            }
        }
    }

    fn encode_frames(&self, tape: &Tape, bound: &Bound, scene: &SceneData) -> Result<Vec<NodeId>> {
        scene
            .frames
            .iter()
            .map(|m| self.enc.encode(tape, bound, m, &self.grid))
            .collect()
    }

    /// Mean per-pixel entropy −Σ_i A_i ln A_i of a stacked attention map.
    pub fn attention_entropy(&self, tape: &Tape, att: Option<NodeId>) -> f64 {
        let Some(att) = att else { return 0.0 };
        let v = tape.value(att);
        let shape = v.shape();
        let (k, hw) = (shape[0], shape[1] * shape[2]);
        let mut total = 0.0;
        for pix in 0..hw {
            for f in 0..k {
                let a = v.data()[f * hw + pix];
                if a > 0.0 {
                    total -= a * a.ln();
                }
            }
        }
        total / hw as f64
    }
}

pub struct StepOutcome {
    pub l_det: f64,
    pub l_distill: f64,
    pub l_recon: f64,
    pub l_total: f64,
    pub entropy: f64,
}

pub struct ObjectiveNodes {
    pub total: NodeId,
    pub l_det: NodeId,
    pub distill: Option<NodeId>,
    pub recon: Option<NodeId>,
    pub attention: Option<NodeId>,
}

/// Record the full training objective for one scene on the given tape:
/// L_det + λ·(α·L_distill + β·L_recon), with the supervision term dropped
/// when use_sup is off.
pub fn student_objective(
    model: &StudentModel,
    tape: &Tape,
    bound: &Bound,
    scene: &SceneData,
) -> Result<ObjectiveNodes> {
    let cfg = &model.cfg;
    let (fused, att) = model.features(tape, bound, scene)?;
    let (hm, reg) = model.head.forward(tape, bound, fused)?;
    let l_det = detection_loss(tape, hm, reg, &scene.gt, &model.grid, cfg.num_classes)?;
    if !cfg.use_sup {
        return Ok(ObjectiveNodes {
            total: l_det,
            l_det,
            distill: None,
            recon: None,
            attention: att,
        });
    }
    let f_star = scene.teacher_f.as_ref().ok_or_else(|| {
        Error::Config("use_sup is set but the scene has no teacher features".into())
    })?;
    let fs = tape.constant(f_star.clone());
    let sup = semantic_supervision_loss(
        tape,
        bound,
        &model.sup,
        fused,
        fs,
        &scene.gt,
        &model.grid,
        cfg.sigma_gauss,
        cfg.alpha,
        cfg.beta,
    )?;
    let weighted = tape.scale(sup.total, cfg.lambda);
    Ok(ObjectiveNodes {
        total: tape.add(l_det, weighted)?,
        l_det,
        distill: Some(sup.distill),
        recon: Some(sup.recon),
        attention: att,
    })
}

fn student_forward(
    model: &StudentModel,
    store: &ParameterStore,
    scene: &SceneData,
    trainable: bool,
) -> Result<(StepOutcome, Option<BTreeMap<String, Vec<f64>>>)> {
    let tape = Tape::new();
    let bound = store.bind(&tape, trainable);
    let nodes = student_objective(model, &tape, &bound, scene)?;
    let total = nodes.total;
    let item = |n: Option<NodeId>| -> Result<f64> {
        n.map_or(Ok(0.0), |n| tape.value(n).item())
    };
    let outcome = StepOutcome {
        l_det: ensure_finite("detection loss", tape.value(nodes.l_det).item()?)?,
        l_distill: item(nodes.distill)?,
        l_recon: item(nodes.recon)?,
        l_total: ensure_finite("total loss", tape.value(total).item()?)?,
        entropy: model.attention_entropy(&tape, nodes.attention),
    };
    let grads = if trainable {
        Some(grads_to_map(&tape, &bound, total)?)
    } else {
        None
    };
    Ok((outcome, grads))
}

/// Decode detections on every evaluation scene and pool into one AP.
pub fn evaluate(
    model: &StudentModel,
    store: &ParameterStore,
    scenes: &[SceneData],
) -> Result<f64> {
    let cfg = &model.cfg;
    let per_scene: Vec<(Vec<Detection>, Vec<ObjectTrack>)> = scenes
        .par_iter()
        .map(|s| -> Result<_> {
            let tape = Tape::new();
            let bound = store.bind(&tape, false);
            let (fused, _) = model.features(&tape, &bound, s)?;
            let (hm, reg) = model.head.forward(&tape, &bound, fused)?;
            let dets = decode(
                &tape.value(hm),
                &tape.value(reg),
                &model.grid,
                cfg.score_thresh,
                cfg.max_dets,
            );
            Ok((dets, s.gt.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(pooled_average_precision(&per_scene, cfg.iou_thresh))
}

pub struct TrainedStudent {
    pub store: ParameterStore,
    pub metrics: Vec<MetricsRecord>,
}

/// Optimize detection + λ·supervision over encoder, fusion, φ1/φ2, and head.
pub fn train_student(
    cfg: &ExperimentConfig,
    teacher: Option<&Teacher>,
) -> Result<TrainedStudent> {
    cfg.validate()?;
    if cfg.use_sup && teacher.is_none() {
        return Err(Error::Config(
            "use_sup requires a frozen teacher checkpoint".into(),
        ));
    }
    if let Some(t) = teacher {
        if t.spec().c != cfg.c {
            return Err(Error::Config(format!(
                "teacher feature width {} does not match student c = {}",
                t.spec().c,
                cfg.c
            )));
        }
    }
    let model = StudentModel::new(cfg)?;
    let mut store = ParameterStore::new(cfg.seed);
    model.register(&mut store)?;

    let sup_teacher = if cfg.use_sup { teacher } else { None };
    let train = model.build_scenes(STREAM_TRAIN, cfg.train_scenes, sup_teacher)?;
    let eval = model.build_scenes(STREAM_EVAL, cfg.eval_scenes, None)?;

    let mut sgd = Sgd::new(cfg.momentum);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(cfg.lr, epoch, cfg.epochs);
        let (mut s_det, mut s_d, mut s_r, mut s_tot, mut s_ent) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for chunk in (0..train.len()).collect::<Vec<_>>().chunks(cfg.batch) {
            let parts: Vec<(StepOutcome, BTreeMap<String, Vec<f64>>)> = chunk
                .par_iter()
                .map(|&i| -> Result<_> {
                    let (o, g) = student_forward(&model, &store, &train[i], true)?;
                    Ok((o, g.expect("trainable forward returns gradients")))
                })
                .collect::<Result<_>>()?;
            for (o, _) in &parts {
                s_det += o.l_det;
                s_d += o.l_distill;
                s_r += o.l_recon;
                s_tot += o.l_total;
                s_ent += o.entropy;
            }
            let grads = accumulate(&parts.into_iter().map(|(_, g)| g).collect::<Vec<_>>());
            sgd.step(&mut store, &grads, lr)?;
        }
        let n = train.len() as f64;
        let ap = evaluate(&model, &store, &eval)?;
        records.push(MetricsRecord {
            epoch,
            l_det: s_det / n,
            l_sup_distill: s_d / n,
            l_sup_recon: s_r / n,
            l_total: s_tot / n,
            ap,
            attention_entropy: s_ent / n,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainedStudent { store, metrics: records })
}

impl StudentModel {
    /// The evaluation split for this config (stream 2 of the seed).
    pub fn eval_scenes(&self) -> Result<Vec<SceneData>> {
        self.build_scenes(STREAM_EVAL, self.cfg.eval_scenes, None)
    }

    /// Verify a loaded checkpoint carries every parameter this model needs.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let mut fresh = ParameterStore::new(0);
        self.register(&mut fresh)?;
        for name in fresh.names() {
            if !store.contains(&name) {
                return Err(Error::Config(format!("checkpoint is missing parameter {name}")));
            }
        }
        Ok(())
    }

    /// Decode one scene's detections with the given weights.
    pub fn decode_scene(&self, store: &ParameterStore, scene: &SceneData) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let (fused, _) = self.features(&tape, &bound, scene)?;
        let (hm, reg) = self.head.forward(&tape, &bound, fused)?;
        Ok(decode(
            &tape.value(hm),
            &tape.value(reg),
            &self.grid,
            self.cfg.score_thresh,
            self.cfg.max_dets,
        ))
    }
}

/// Stacked temporal-attention maps for one scene, for figure export.
pub fn export_attention(
    cfg: &ExperimentConfig,
    store: &ParameterStore,
    scene_seed_value: u64,
) -> Result<Tensor> {
    let model = StudentModel::new(cfg)?;
    if cfg.fusion_mode != FusionMode::St || !cfg.use_tm || cfg.effective_k() < 2 {
        return Err(Error::Config(
            "attention export needs fusion_mode = st with use_tm and k >= 2".into(),
        ));
    }
    let sc = cfg.scene_config(scene_seed_value);
    let seq = generate_scene(&sc)?;
    let scene = model.prepare_scene(&seq, None)?;
    let tape = Tape::new();
    let bound = store.bind(&tape, false);
    let (_, att) = model.features(&tape, &bound, &scene)?;
    let att = att.ok_or_else(|| Error::Contract("fusion produced no attention maps".into()))?;
    Ok((*tape.value(att)).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            train_scenes: 6,
            eval_scenes: 3,
            num_objects: 3,
            clutter_density: 0.05,
            grid_h: 16,
            grid_w: 16,
            c_p: 3,
            c: 4,
            k: 2,
            epochs: 2,
            teacher_epochs: 2,
            batch: 3,
            ..Default::default()
        }
    }

    fn tiny_teacher(cfg: &ExperimentConfig) -> Teacher {
        let (store, _) = train_teacher(cfg).unwrap();
        Teacher::new(store, true, teacher_encoder_spec(cfg), None).unwrap()
    }

    #[test]
    fn teacher_training_is_deterministic_and_loss_drops() {
        let cfg = ExperimentConfig { teacher_epochs: 5, ..tiny_cfg() };
        let (a, ma) = train_teacher(&cfg).unwrap();
        let (b, _) = train_teacher(&cfg).unwrap();
        for name in a.names() {
            assert_eq!(a.get(&name).unwrap().data(), b.get(&name).unwrap().data());
        }
        assert!(ma.last().unwrap().l_det < ma[0].l_det);
    }

    #[test]
    fn student_requires_teacher_when_supervised() {
        let cfg = tiny_cfg();
        assert!(matches!(train_student(&cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_decomposition_identity_every_epoch() {
        let cfg = tiny_cfg();
        let teacher = tiny_teacher(&cfg);
        let out = train_student(&cfg, Some(&teacher)).unwrap();
        assert_eq!(out.metrics.len(), cfg.epochs);
        for r in &out.metrics {
            assert!(
                r.decomposition_residual(cfg.lambda, cfg.alpha, cfg.beta) < 1e-9,
                "epoch {}: residual too large",
                r.epoch
            );
        }
    }

    #[test]
    fn unsupervised_total_equals_detection_loss() {
        let cfg = ExperimentConfig { use_sup: false, ..tiny_cfg() };
        let out = train_student(&cfg, None).unwrap();
        for r in &out.metrics {
            assert_eq!(r.l_total, r.l_det);
            assert_eq!(r.l_sup_distill, 0.0);
        }
    }

    #[test]
    fn zero_lambda_matches_unsupervised_trajectory_bitwise() {
        let base = tiny_cfg();
        let teacher = tiny_teacher(&base);
        let with_sup = ExperimentConfig { lambda: 0.0, use_sup: true, ..base.clone() };
        let without = ExperimentConfig { use_sup: false, ..base };
        let a = train_student(&with_sup, Some(&teacher)).unwrap();
        let b = train_student(&without, None).unwrap();
        for name in a.store.names() {
            assert_eq!(
                a.store.get(&name).unwrap().data(),
                b.store.get(&name).unwrap().data(),
                "parameter {name} diverged"
            );
        }
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.l_det, rb.l_det);
            assert_eq!(ra.ap, rb.ap);
        }
    }

    #[test]
    fn student_training_is_deterministic() {
        let cfg = ExperimentConfig { use_sup: false, ..tiny_cfg() };
        let a = train_student(&cfg, None).unwrap();
        let b = train_student(&cfg, None).unwrap();
        // wall-clock time is the one legitimately non-reproducible field
        let strip = |ms: &[MetricsRecord]| -> Vec<MetricsRecord> {
            ms.iter().cloned().map(|mut m| {
                m.wall_secs = 0.0;
                m
            }).collect()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        for name in a.store.names() {
            assert_eq!(a.store.get(&name).unwrap().data(), b.store.get(&name).unwrap().data());
        }
    }

    #[test]
    fn all_fusion_modes_run() {
        for mode in [FusionMode::Single, FusionMode::Data, FusionMode::Feature, FusionMode::St] {
            let cfg = ExperimentConfig {
                fusion_mode: mode,
                use_sup: false,
                use_sa: mode == FusionMode::St,
                use_tm: mode == FusionMode::St,
                epochs: 1,
                ..tiny_cfg()
            };
            let out = train_student(&cfg, None).unwrap();
            assert_eq!(out.metrics.len(), 1);
            assert!(out.metrics[0].l_total.is_finite());
        }
    }

    #[test]
    fn attention_export_has_simplex_rows() {
        let cfg = ExperimentConfig { epochs: 1, ..tiny_cfg() };
        let teacher = tiny_teacher(&cfg);
        let out = train_student(&cfg, Some(&teacher)).unwrap();
        let att = export_attention(&cfg, &out.store, 12345).unwrap();
        assert_eq!(att.shape(), &[cfg.k - 1, 16, 16]);
        for pix in 0..(16 * 16) {
            let s: f64 = (0..cfg.k - 1).map(|f| att.data()[f * 256 + pix]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // single-frame config refuses
        let single = ExperimentConfig { fusion_mode: FusionMode::Single, ..cfg };
        assert!(export_attention(&single, &out.store, 1).is_err());
    }
}
