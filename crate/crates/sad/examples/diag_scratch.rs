// scratch diagnostic; removed before release
use sad::anchors::{AnchorConfig, AnchorSet};
use sad::loss::LossHyperparams;
use sad::model::{DenseModel, ModelDims};
use sad::scene::{generate_dataset, GeneratorConfig};
use sad::teacher::{detect, predict, InferenceConfig};
use sad::train::{train_with_mode, LossMode, TrainerConfig};

fn main() {
    let gen = GeneratorConfig { noise_sigma: 0.5, ..GeneratorConfig::default() };
    let train_scenes = generate_dataset(&gen, 1000, 101).unwrap();
    let val = generate_dataset(&gen, 200, 901).unwrap();
    let dims = ModelDims { classes: 3, anchor_slots: 3, window: 3, features: 6 };
    let trainer = TrainerConfig { iterations: 2000, seed: 1, loss_mode: LossMode::Baseline, ..TrainerConfig::default() };
    let out = train_with_mode(DenseModel::init_seeded(dims, trainer.init_seed()).unwrap(), &train_scenes, None, &trainer, &LossHyperparams::default(), &AnchorConfig::default(), "h", 1).unwrap();
    let anchors = AnchorSet::generate(12, 12, &AnchorConfig::default()).unwrap();
    let infer = InferenceConfig::default();

    let mut pre_count = 0usize; let mut post_count = 0usize; let mut gt_count = 0usize;
    for s in &val {
        let (cands, _) = predict(&out.model, s, &anchors, &infer).unwrap();
        pre_count += cands.len();
        post_count += detect(&out.model, s, &anchors, &infer, None).unwrap().len();
        gt_count += s.boxes.len();
    }
    println!("avg pre-NMS {:.1}, post-NMS {:.1}, gt {:.2} per image", pre_count as f64 / val.len() as f64, post_count as f64 / val.len() as f64, gt_count as f64 / val.len() as f64);

    for s in val.iter().take(3) {
        println!("scene {}: gt:", s.scene_id);
        for b in &s.boxes { println!("  class {} [{:.1},{:.1},{:.1},{:.1}] size {:.1}x{:.1}", b.class_id, b.x1, b.y1, b.x2, b.y2, b.x2-b.x1, b.y2-b.y1); }
        let dets = detect(&out.model, s, &anchors, &infer, None).unwrap();
        println!("  top dets:");
        for d in dets.iter().take(6) { println!("  class {} [{:.1},{:.1},{:.1},{:.1}] score {:.3}", d.class_id, d.x1, d.y1, d.x2, d.y2, d.score); }
    }
}
