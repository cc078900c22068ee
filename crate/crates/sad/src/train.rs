//! SGD training loop for every loss mode: supervised focal baseline,
//! adaptive distillation, the FDL and logit-mimic baselines, and
//! self-distillation. Per-image routing follows a transfer manifest, so a
//! supervised run and a distillation run with soft flags off take exactly
//! the same path.

use crate::anchors::{assign_anchors, encode_box, AnchorConfig, AnchorSet, AnchorStatus, BoxDelta};
use crate::error::{Error, Result};
use crate::loss::{
    fdl, image_loss_eval, l2_mimic, sigmoid, smooth_l1, HardLabel, LossHyperparams, SampleTerm,
};
use crate::model::DenseModel;
use crate::scene::{GroundTruthBox, Scene};
use crate::semisup::{
    assemble_manifest, ImageFlags, Provenance, TransferMode, TransferSetManifest,
};
use crate::teacher::TargetRecord;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Stream separator so data sampling and weight init draw from unrelated
/// sequences of the same named seed.
const DATA_STREAM: u64 = 0x5eed_0001;
const INIT_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Baseline,
    AdlDistill,
    FdlBaseline,
    MimicBaseline,
    SelfDistill,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fractions of the run after which the learning rate is divided by 10.
    pub lr_drop_points: Vec<f64>,
    pub loss_mode: LossMode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            batch_size: 8,
            seed: 7,
            lr_drop_points: vec![0.7, 0.9],
            loss_mode: LossMode::Baseline,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be positive"));
        }
        if self.lr_drop_points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("lr_drop_points must lie in (0, 1]"));
        }
        Ok(())
    }

    fn lr_at(&self, iteration: usize, total: usize) -> f64 {
        let progress = iteration as f64 / total as f64;
        let drops = self
            .lr_drop_points
            .iter()
            .filter(|p| progress >= **p)
            .count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed ^ INIT_STREAM
    }
}

/// Per-iteration batch-mean loss components; `distill` holds the ADL, FDL
/// or mimic term depending on the mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub focal: f64,
    pub distill: f64,
    pub loc: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossLogRow], config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# sad-loss-log v1 config_hash={config_hash}")?;
    writeln!(out, "iteration,lr,total,focal,distill,loc")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.lr, r.total, r.focal, r.distill, r.loc
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Additional per-image loss term for the baseline comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtraTerm {
    None,
    /// Focal-modulated KL against teacher probabilities.
    Fdl,
    /// L2 between student and teacher logits.
    Mimic,
}

/// Everything the loop needs besides the student itself.
pub struct TrainInputs<'a> {
    pub scenes: &'a [Scene],
    pub manifest: &'a TransferSetManifest,
    pub teacher: Option<&'a DenseModel>,
    pub records: Option<&'a BTreeMap<String, TargetRecord>>,
    pub extra: ExtraTerm,
}

struct PreparedImage {
    scene_idx: usize,
    flags: ImageFlags,
    assignment_positives: usize,
    /// one entry per anchor: label per class via status
    statuses: Vec<AnchorStatus>,
    loc_targets: Vec<(usize, BoxDelta)>,
    /// dense teacher probabilities, anchor-major, when any distillation
    /// term needs them
    soft_q: Option<Vec<f64>>,
    teacher_logits: Option<Vec<f64>>,
}

struct ImageStats {
    total: f64,
    focal: f64,
    distill: f64,
    loc: f64,
}

fn hard_targets_as_boxes(rec: &TargetRecord) -> Vec<GroundTruthBox> {
    rec.hard_targets
        .iter()
        .map(|d| GroundTruthBox {
            class_id: d.class_id,
            x1: d.x1,
            y1: d.y1,
            x2: d.x2,
            y2: d.y2,
        })
        .collect()
}

fn prepare_images(
    student: &DenseModel,
    inputs: &TrainInputs,
    anchor_cfg: &AnchorConfig,
    anchors: &AnchorSet,
    pool: &[String],
    scene_index: &BTreeMap<&str, usize>,
) -> Result<Vec<PreparedImage>> {
    let needs_soft = |flags: &ImageFlags| flags.use_soft_adl || inputs.extra == ExtraTerm::Fdl;
    let mut prepared = Vec::with_capacity(pool.len());
    for id in pool {
        let scene_idx = *scene_index
            .get(id.as_str())
            .ok_or_else(|| Error::config(format!("manifest references unknown scene {id}")))?;
        let scene = &inputs.scenes[scene_idx];
        let flags = *inputs
            .manifest
            .flags
            .get(id)
            .ok_or_else(|| Error::config(format!("scene {id} has no routing flags")))?;

        let record = inputs.records.and_then(|r| r.get(id));
        let boxes: Vec<GroundTruthBox> = if flags.use_gt_focal || flags.use_gt_loc {
            scene.boxes.clone()
        } else if flags.use_hard_focal || flags.use_hard_loc {
            let rec = record.ok_or_else(|| {
                Error::config(format!("scene {id} needs teacher hard targets but has no record"))
            })?;
            hard_targets_as_boxes(rec)
        } else {
            Vec::new()
        };

        let assignment = assign_anchors(anchors, &boxes, anchor_cfg.pos_iou, anchor_cfg.neg_iou)?;
        let mut loc_targets = Vec::new();
        if flags.use_gt_loc || flags.use_hard_loc {
            for (ai, status) in assignment.statuses().iter().enumerate() {
                if let AnchorStatus::Positive { gt_index, .. } = status {
                    let delta = encode_box(anchors.get(ai), &boxes[*gt_index].rect())?;
                    loc_targets.push((ai, delta));
                }
            }
        }

        let mut soft_q = None;
        if needs_soft(&flags) {
            if let Some(rec) = record {
                if rec.soft.anchors != anchors.len()
                    || rec.soft.classes != student.dims.classes
                {
                    return Err(Error::config(format!(
                        "soft-target map for {id} has shape {}x{}, expected {}x{}",
                        rec.soft.anchors,
                        rec.soft.classes,
                        anchors.len(),
                        student.dims.classes
                    )));
                }
                soft_q = Some(rec.soft.q.iter().map(|&v| v as f64).collect());
            } else {
                let teacher = inputs.teacher.ok_or_else(|| {
                    Error::usage(format!(
                        "scene {id} needs soft targets but no teacher or record is available"
                    ))
                })?;
                let out = teacher.forward(scene)?;
                soft_q = Some(out.logits.iter().map(|&z| sigmoid(z)).collect());
            }
        }

        let teacher_logits = if inputs.extra == ExtraTerm::Mimic {
            let teacher = inputs
                .teacher
                .ok_or_else(|| Error::usage("mimic baseline needs a teacher"))?;
            if teacher.dims.classes != student.dims.classes
                || teacher.dims.anchor_slots != student.dims.anchor_slots
            {
                return Err(Error::usage(
                    "mimic baseline needs teacher and student with matching output shape",
                ));
            }
            Some(teacher.forward(scene)?.logits)
        } else {
            None
        };

        prepared.push(PreparedImage {
            scene_idx,
            flags,
            assignment_positives: assignment.positive_count(),
            statuses: assignment.statuses().to_vec(),
            loc_targets,
            soft_q,
            teacher_logits,
        });
    }
    Ok(prepared)
}

fn compute_image(
    student: &DenseModel,
    scene: &Scene,
    prep: &PreparedImage,
    hp: &LossHyperparams,
    extra: ExtraTerm,
    grad: &mut [f64],
) -> Result<ImageStats> {
    let out = student.forward(scene)?;
    let classes = student.dims.classes;
    let n = out.anchors;
    let flags = &prep.flags;
    let use_focal = flags.use_gt_focal || flags.use_hard_focal;
    let use_loc = flags.use_gt_loc || flags.use_hard_loc;
    let use_adl = flags.use_soft_adl;

    let mut terms = Vec::with_capacity(n * classes);
    for a in 0..n {
        let status = prep.statuses[a];
        for c in 0..classes {
            let label = if use_focal || extra == ExtraTerm::Fdl {
                match status {
                    AnchorStatus::Positive { class_id, .. } => Some(if class_id == c {
                        HardLabel::Positive
                    } else {
                        HardLabel::Negative
                    }),
                    AnchorStatus::Negative => Some(HardLabel::Negative),
                    AnchorStatus::Ignore => None,
                }
            } else {
                None
            };
            let q = prep
                .soft_q
                .as_ref()
                .map(|qs| qs[a * classes + c])
                .unwrap_or(0.5);
            terms.push(SampleTerm::new(out.logits[a * classes + c], q, label)?);
        }
    }

    // localization on positive anchors, normalized like the focal term
    let norm_pos = prep.assignment_positives.max(1) as f64;
    let mut loc_sum = 0.0;
    let mut ddeltas = vec![0.0; n * 4];
    if use_loc {
        for (ai, target) in &prep.loc_targets {
            let pred = BoxDelta {
                dx: out.deltas[ai * 4],
                dy: out.deltas[ai * 4 + 1],
                dw: out.deltas[ai * 4 + 2],
                dh: out.deltas[ai * 4 + 3],
            };
            for (j, (p, t)) in [
                (pred.dx, target.dx),
                (pred.dy, target.dy),
                (pred.dw, target.dw),
                (pred.dh, target.dh),
            ]
            .iter()
            .enumerate()
            {
                let r = smooth_l1(*p, *t);
                loc_sum += r.value;
                ddeltas[ai * 4 + j] = r.grad_logit / norm_pos;
            }
        }
    }

    let eval = image_loss_eval(&terms, classes, loc_sum, hp, use_focal, use_adl)?;
    let mut dlogits = eval.dlogit;
    let b = eval.breakdown;
    let nf = b.normalizer_focal.max(1) as f64;
    let mut total = b.total;
    let mut distill = b.adl_sum / b.normalizer_adl;

    match extra {
        ExtraTerm::None => {}
        ExtraTerm::Fdl => {
            let mut fdl_sum = 0.0;
            for (i, term) in terms.iter().enumerate() {
                if term.hard_label().is_none() {
                    continue;
                }
                let r = fdl(term, hp)?;
                fdl_sum += r.value;
                dlogits[i] += r.grad_logit / nf;
            }
            total += fdl_sum / nf;
            distill += fdl_sum / nf;
        }
        ExtraTerm::Mimic => {
            let teacher_logits = prep
                .teacher_logits
                .as_ref()
                .expect("mimic images carry teacher logits");
            let m = l2_mimic(&out.logits, teacher_logits)?;
            let norm = n as f64;
            for (i, g) in m.grads.iter().enumerate() {
                dlogits[i] += g / norm;
            }
            total += m.value / norm;
            distill += m.value / norm;
        }
    }

    if !total.is_finite() {
        let bad_term = dlogits
            .iter()
            .position(|g| !g.is_finite())
            .map(|i| format!("anchor {} class {}", i / classes, i % classes))
            .unwrap_or_else(|| "aggregate".into());
        return Err(Error::NumericAbort {
            scene_id: scene.scene_id.clone(),
            detail: format!(
                "non-finite loss (focal={} adl={} loc={}) at {bad_term}",
                b.focal_sum, b.adl_sum, b.loc_sum
            ),
        });
    }

    student.backward_into(scene, &dlogits, &ddeltas, grad)?;
    Ok(ImageStats {
        total,
        focal: b.focal_sum / nf,
        distill,
        loc: b.loc_sum / nf,
    })
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: DenseModel,
    pub log: Vec<LossLogRow>,
}

/// Run SGD with momentum and weight decay over the manifest's image pool.
/// Deterministic given (config, seed, data): batches are drawn without
/// replacement from the id-sorted pool, per-image gradients always reduce
/// in ascending scene-id order, and `workers > 1` yields bit-identical
/// results to the sequential path.
pub fn train(
    mut student: DenseModel,
    inputs: &TrainInputs,
    trainer: &TrainerConfig,
    hp: &LossHyperparams,
    anchor_cfg: &AnchorConfig,
    workers: usize,
) -> Result<TrainOutput> {
    trainer.validate()?;
    hp.validate()?;
    anchor_cfg.validate()?;
    inputs.manifest.validate()?;
    if workers == 0 {
        return Err(Error::config("workers must be at least 1"));
    }
    if trainer.loss_mode == LossMode::SelfDistill {
        if let Some(t) = inputs.teacher {
            if t.dims != student.dims {
                return Err(Error::usage(
                    "self-distillation requires identically parameterized teacher and student",
                ));
            }
        }
    }

    let mut pool: Vec<String> = inputs
        .manifest
        .labeled_ids
        .iter()
        .chain(inputs.manifest.unlabeled_ids.iter())
        .cloned()
        .collect();
    pool.sort();
    if pool.is_empty() {
        return Err(Error::config("training pool is empty"));
    }
    if trainer.batch_size > pool.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds pool of {} scenes",
            trainer.batch_size,
            pool.len()
        )));
    }

    let scene_index: BTreeMap<&str, usize> = inputs
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scene_id.as_str(), i))
        .collect();
    let first = *scene_index
        .get(pool[0].as_str())
        .ok_or_else(|| Error::config(format!("manifest references unknown scene {}", pool[0])))?;
    let (h, w) = (inputs.scenes[first].h, inputs.scenes[first].w);
    let anchors = AnchorSet::generate(h, w, anchor_cfg)?;
    if anchors.per_cell() != student.dims.anchor_slots {
        return Err(Error::config(format!(
            "model has {} anchor slots but the anchor config defines {}",
            student.dims.anchor_slots,
            anchors.per_cell()
        )));
    }

    let prepared = prepare_images(&student, inputs, anchor_cfg, &anchors, &pool, &scene_index)?;

    let mut velocity = vec![0.0; student.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.seed ^ DATA_STREAM);
    let mut log = Vec::with_capacity(trainer.iterations);

    for iteration in 0..trainer.iterations {
        let lr = trainer.lr_at(iteration, trainer.iterations);
        let mut batch: Vec<usize> =
            rand::seq::index::sample(&mut rng, pool.len(), trainer.batch_size).into_vec();
        batch.sort_unstable();

        let results = run_batch(&student, inputs, &prepared, &batch, hp, workers)?;

        let scale = 1.0 / trainer.batch_size as f64;
        let mut grad = vec![0.0; student.params.len()];
        let mut stats = LossLogRow {
            iteration,
            lr,
            total: 0.0,
            focal: 0.0,
            distill: 0.0,
            loc: 0.0,
        };
        for (img_grad, s) in &results {
            for (g, ig) in grad.iter_mut().zip(img_grad) {
                *g += ig * scale;
            }
            stats.total += s.total * scale;
            stats.focal += s.focal * scale;
            stats.distill += s.distill * scale;
            stats.loc += s.loc * scale;
        }

        for ((p, v), g) in student.params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = trainer.momentum * *v + (g + trainer.weight_decay * *p);
            *p -= lr * *v;
        }
        log.push(stats);
    }

    Ok(TrainOutput {
        model: student,
        log,
    })
}

type ImageResult = (Vec<f64>, ImageStats);

fn run_batch(
    student: &DenseModel,
    inputs: &TrainInputs,
    prepared: &[PreparedImage],
    batch: &[usize],
    hp: &LossHyperparams,
    workers: usize,
) -> Result<Vec<ImageResult>> {
    let one = |pool_idx: usize| -> Result<ImageResult> {
        let prep = &prepared[pool_idx];
        let scene = &inputs.scenes[prep.scene_idx];
        let mut grad = vec![0.0; student.params.len()];
        let stats = compute_image(student, scene, prep, hp, inputs.extra, &mut grad)?;
        Ok((grad, stats))
    };

    if workers <= 1 || batch.len() <= 1 {
        return batch.iter().map(|&i| one(i)).collect();
    }

    let mut slots: Vec<Option<Result<ImageResult>>> = Vec::new();
    slots.resize_with(batch.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..workers.min(batch.len()) {
            let one = &one;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut slot = worker;
                while slot < batch.len() {
                    out.push((slot, one(batch[slot])));
                    slot += workers;
                }
                out
            }));
        }
        for handle in handles {
            for (slot, result) in handle.join().expect("worker panicked") {
                slots[slot] = Some(result);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect()
}

/// Build the implicit manifest for a plain `train` run and dispatch. The
/// supervised baseline forbids a teacher; every distillation mode needs one.
pub fn train_with_mode(
    student: DenseModel,
    scenes: &[Scene],
    teacher: Option<&DenseModel>,
    trainer: &TrainerConfig,
    hp: &LossHyperparams,
    anchor_cfg: &AnchorConfig,
    config_hash: &str,
    workers: usize,
) -> Result<TrainOutput> {
    let ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    let (mode, extra) = match trainer.loss_mode {
        LossMode::Baseline => {
            if teacher.is_some() {
                return Err(Error::usage("baseline training does not accept a teacher"));
            }
            (TransferMode::Supervised, ExtraTerm::None)
        }
        LossMode::AdlDistill | LossMode::SelfDistill => {
            if teacher.is_none() {
                return Err(Error::usage("distillation requires a teacher model"));
            }
            (TransferMode::Distill, ExtraTerm::None)
        }
        LossMode::FdlBaseline => {
            if teacher.is_none() {
                return Err(Error::usage("the FDL baseline requires a teacher model"));
            }
            (TransferMode::Supervised, ExtraTerm::Fdl)
        }
        LossMode::MimicBaseline => {
            if teacher.is_none() {
                return Err(Error::usage("the mimic baseline requires a teacher model"));
            }
            (TransferMode::Supervised, ExtraTerm::Mimic)
        }
    };
    let manifest = assemble_manifest(
        &ids,
        &[],
        mode,
        Provenance::default(),
        &Default::default(),
        true,
        config_hash,
    )?;
    let inputs = TrainInputs {
        scenes,
        manifest: &manifest,
        teacher,
        records: None,
        extra,
    };
    train(student, &inputs, trainer, hp, anchor_cfg, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::scene::{generate_dataset, GeneratorConfig, SplitTag};

    fn small_world(count: usize, seed: u64) -> Vec<Scene> {
        let cfg = GeneratorConfig {
            split: SplitTag::Labeled,
            ..GeneratorConfig::default()
        };
        generate_dataset(&cfg, count, seed).unwrap()
    }

    fn dims() -> ModelDims {
        ModelDims {
            classes: 3,
            anchor_slots: 3,
            window: 3,
            features: 6,
        }
    }

    fn quick_trainer(mode: LossMode) -> TrainerConfig {
        TrainerConfig {
            iterations: 5,
            batch_size: 4,
            loss_mode: mode,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn same_seed_identical_logs_and_params() {
        let scenes = small_world(16, 42);
        let trainer = quick_trainer(LossMode::Baseline);
        let hp = LossHyperparams::default();
        let ac = AnchorConfig::default();
        let run = |workers| {
            let student = DenseModel::init_seeded(dims(), trainer.init_seed()).unwrap();
            train_with_mode(student, &scenes, None, &trainer, &hp, &ac, "h", workers).unwrap()
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
        // worker count must not change a single bit
        let c = run(3);
        assert_eq!(a.log, c.log);
        assert_eq!(a.model.params, c.model.params);
    }

    #[test]
    fn baseline_rejects_teacher_and_distill_requires_one() {
        let scenes = small_world(8, 1);
        let hp = LossHyperparams::default();
        let ac = AnchorConfig::default();
        let teacher = DenseModel::init_seeded(dims(), 3).unwrap();
        let student = DenseModel::init_seeded(dims(), 4).unwrap();
        let err = train_with_mode(
            student.clone(),
            &scenes,
            Some(&teacher),
            &quick_trainer(LossMode::Baseline),
            &hp,
            &ac,
            "h",
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        let err = train_with_mode(
            student,
            &scenes,
            None,
            &quick_trainer(LossMode::AdlDistill),
            &hp,
            &ac,
            "h",
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn self_distill_from_identical_teacher_starts_at_zero_adl() {
        let scenes = small_world(8, 5);
        let hp = LossHyperparams::default();
        let ac = AnchorConfig::default();
        let teacher = DenseModel::init_seeded(dims(), 9).unwrap();
        let student = teacher.clone();
        let trainer = TrainerConfig {
            iterations: 1,
            batch_size: 4,
            loss_mode: LossMode::SelfDistill,
            ..TrainerConfig::default()
        };
        let out = train_with_mode(
            student,
            &scenes,
            Some(&teacher),
            &trainer,
            &hp,
            &ac,
            "h",
            1,
        )
        .unwrap();
        assert_eq!(out.log[0].distill, 0.0);
    }

    #[test]
    fn fdl_and_mimic_modes_run() {
        let scenes = small_world(8, 6);
        let hp = LossHyperparams::default();
        let ac = AnchorConfig::default();
        let teacher = DenseModel::init_seeded(dims(), 30).unwrap();
        for mode in [LossMode::FdlBaseline, LossMode::MimicBaseline] {
            let student = DenseModel::init_seeded(dims(), 31).unwrap();
            let out = train_with_mode(
                student,
                &scenes,
                Some(&teacher),
                &quick_trainer(mode),
                &hp,
                &ac,
                "h",
                1,
            )
            .unwrap();
            assert!(out.log.iter().all(|r| r.total.is_finite()));
            assert!(out.log[0].distill > 0.0);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences_across_modes() {
        use crate::gradcheck::fd_gradient;
        use rand::Rng;

        let scenes = small_world(2, 77);
        let hp = LossHyperparams::default();
        let ac = AnchorConfig::default();
        let anchors = AnchorSet::generate(scenes[0].h, scenes[0].w, &ac).unwrap();
        let teacher = DenseModel::init_seeded(dims(), 50).unwrap();
        let student = DenseModel::init_seeded(dims(), 51).unwrap();
        let scene_index: BTreeMap<&str, usize> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scene_id.as_str(), i))
            .collect();
        let ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();

        let cases: Vec<(TransferMode, ExtraTerm)> = vec![
            (TransferMode::Supervised, ExtraTerm::None),
            (TransferMode::Distill, ExtraTerm::None),
            (TransferMode::Supervised, ExtraTerm::Fdl),
            (TransferMode::Supervised, ExtraTerm::Mimic),
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for (mode, extra) in cases {
            let manifest = assemble_manifest(
                &ids,
                &[],
                mode,
                Provenance::default(),
                &Default::default(),
                true,
                "h",
            )
            .unwrap();
            let inputs = TrainInputs {
                scenes: &scenes,
                manifest: &manifest,
                teacher: Some(&teacher),
                records: None,
                extra,
            };
            let prepared =
                prepare_images(&student, &inputs, &ac, &anchors, &ids, &scene_index).unwrap();
            let prep = &prepared[0];
            let scene = &scenes[prep.scene_idx];
            let mut grad = vec![0.0; student.params.len()];
            compute_image(&student, scene, prep, &hp, extra, &mut grad).unwrap();
            for _ in 0..6 {
                let pi = rng.gen_range(0..student.params.len());
                let orig = student.params[pi];
                let fd = fd_gradient(
                    |x| {
                        let mut m = student.clone();
                        m.params[pi] = x;
                        let mut g = vec![0.0; m.params.len()];
                        compute_image(&m, scene, prep, &hp, extra, &mut g)
                            .unwrap()
                            .total
                    },
                    orig,
                    1e-5,
                )
                .unwrap();
                // the image loss is an O(1) sum over ~1300 terms, so the
                // probe's own roundoff dominates below ~1e-4 gradients
                let rel = (grad[pi] - fd).abs() / fd.abs().max(grad[pi].abs()).max(1e-4);
                assert!(
                    rel < 1e-5,
                    "{mode:?}/{extra:?} param {pi}: analytic {} vs fd {fd}",
                    grad[pi]
                );
            }
        }
    }

    #[test]
    fn nan_parameters_abort_with_scene_id() {
        let scenes = small_world(4, 8);
        let hp = LossHyperparams::default();
        let ac = AnchorConfig::default();
        let mut student = DenseModel::init_seeded(dims(), 60).unwrap();
        student.params[0] = f64::NAN;
        let err = train_with_mode(
            student,
            &scenes,
            None,
            &quick_trainer(LossMode::Baseline),
            &hp,
            &ac,
            "h",
            1,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("l00000002") || msg.contains("non-finite"), "{msg}");
    }
}
