//! Composite a class model's output onto an upscaled base canvas, so the
//! object is rendered at the class model's resolution.
//! `mixed_resolution [out_dir] [factor]`

use semsynth::composition::{infer_base, mixed_resolution_composite, save_plan_outputs, BlendConfig, LatentMode};
use semsynth::datamodel::extract_instances;
use semsynth::synthetic::SceneGrammar;
use semsynth::training::TrainRole;

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("mixed_resolution");
    let factor: usize = common::arg_or(2, 2);
    // The base model runs at 64px; objects are large enough for a 64px class
    // model only after upscaling.
    let small = SceneGrammar { min_shape_size: 16, max_shape_size: 24, ..SceneGrammar::with_canvas(64) };
    let corpus = common::corpus(&dir.join("corpus"), &small, 8, 5);
    let base = common::quick_model(&corpus, TrainRole::Base, 20, &dir.join("base"));
    let large = common::corpus(&dir.join("corpus_large"), &common::large_object_grammar(), 8, 5);
    let model = common::quick_model(&large, common::class_role(1), 20, &dir.join("class_1"));

    let scene = &corpus.scenes.iter().find(|s| extract_instances(&s.instances, &s.semantic).unwrap().iter().any(|r| r.class_id == 1)).expect("a rectangle");
    let rec = extract_instances(&scene.instances, &scene.semantic).unwrap().into_iter().find(|r| r.class_id == 1).unwrap();
    let ib = infer_base(&base, &scene.semantic, &scene.edges, LatentMode::Posterior, 0).expect("base");
    let out = mixed_resolution_composite(&ib, factor, &scene.semantic, &scene.instances, &rec, &model, &BlendConfig::default(), LatentMode::Posterior, 1)
        .expect("composite");
    save_plan_outputs(&out, &dir.join("output")).expect("write");
    println!("{:?} base -> {:?} composite in {}", ib.dims(), out.composite.dims(), dir.join("output").display());
}
