// scratch harness for benchmark tuning; removed before release
use sad::anchors::{AnchorConfig, AnchorSet};
use sad::eval::evaluate_detections;
use sad::loss::LossHyperparams;
use sad::model::{DenseModel, ModelDims};
use sad::scene::{generate_dataset, GeneratorConfig};
use sad::teacher::{detect, InferenceConfig};
use sad::train::{train_with_mode, LossMode, TrainerConfig};

fn ap_of(
    model: &DenseModel,
    scenes: &[sad::scene::Scene],
    anchors: &AnchorSet,
    infer: &InferenceConfig,
) -> f64 {
    let per_image: Vec<_> = scenes
        .iter()
        .map(|s| {
            (
                detect(model, s, anchors, infer, None).unwrap(),
                s.boxes.clone(),
            )
        })
        .collect();
    evaluate_detections(&per_image, model.dims.classes).unwrap().ap
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let window: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let count: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let contrast: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.55);

    let gen = GeneratorConfig {
        noise_sigma: noise,
        class_contrast: contrast,
        ..GeneratorConfig::default()
    };
    let train_scenes = generate_dataset(&gen, count, 101).unwrap();
    let val_scenes = generate_dataset(&gen, 400, 901).unwrap();
    let dims = ModelDims {
        classes: gen.classes,
        anchor_slots: 3,
        window,
        features: gen.features,
    };
    let trainer = TrainerConfig {
        learning_rate: lr,
        iterations: iters,
        loss_mode: LossMode::Baseline,
        seed: 1,
        ..TrainerConfig::default()
    };
    let hp = LossHyperparams::default();
    let ac = AnchorConfig::default();
    let student = DenseModel::init_seeded(dims, trainer.init_seed()).unwrap();
    let t0 = std::time::Instant::now();
    let out = train_with_mode(student, &train_scenes, None, &trainer, &hp, &ac, "h", 1).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let anchors = AnchorSet::generate(gen.height, gen.width, &ac).unwrap();
    let infer = InferenceConfig::default();
    let per_image: Vec<_> = val_scenes
        .iter()
        .map(|s| {
            (
                detect(&out.model, s, &anchors, &infer, None).unwrap(),
                s.boxes.clone(),
            )
        })
        .collect();
    let summary = evaluate_detections(&per_image, dims.classes).unwrap();
    println!(
        "lr={lr} noise={noise} iters={iters} k={window} n={count} contrast={contrast}: ap={:.4} ap50={:.4} ap75={:.4} (train {dt:.1}s, final focal {:.3} loc {:.3})",
        summary.ap,
        summary.ap50,
        summary.ap75,
        out.log.last().unwrap().focal,
        out.log.last().unwrap().loc
    );
    let _ = ap_of(&out.model, &val_scenes, &anchors, &infer);
}
