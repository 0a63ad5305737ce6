//! Full inference: base image, then every instance of the chosen classes
//! regenerated by its class model and composited largest first.
//! `compose_scene [out_dir] [iterations]`

use semsynth::composition::{save_plan_outputs, BlendConfig, LatentMode, Pipeline};
use semsynth::training::TrainRole;

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("compose_scene");
    let iterations: u64 = common::arg_or(2, 20);
    let corpus = common::corpus(&dir.join("corpus"), &common::large_object_grammar(), 8, 3);
    let base = common::quick_model(&corpus, TrainRole::Base, iterations, &dir.join("base"));
    let classes: Vec<_> = [1u16, 2]
        .iter()
        .map(|&c| common::quick_model(&corpus, common::class_role(c), iterations, &dir.join(format!("class_{c}"))))
        .collect();
    let pipeline = Pipeline::new(base, classes, BlendConfig::default(), LatentMode::Posterior).expect("pipeline");
    let scene = &corpus.scenes[0];
    let out = pipeline.run_scene(&scene.semantic, &scene.instances, &scene.edges, &[1, 2], 42).expect("inference");
    save_plan_outputs(&out, &dir.join("output")).expect("write");
    for step in &out.plan.steps {
        println!("instance {} (class {}, area {})", step.record.instance_id, step.record.class_id, step.record.area);
    }
    println!("outputs in {}", dir.join("output").display());
}
