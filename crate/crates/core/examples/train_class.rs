//! Train a class-specific generator on context crops:
//! `train_class [out_dir] [class_id] [iterations]`.

use semsynth::training::{make_dataset, train, TrainConfig};

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("train_class");
    let class_id: u16 = common::arg_or(2, 1);
    let iterations: u64 = common::arg_or(3, 200);
    let corpus = common::corpus(&dir.join("corpus"), &common::large_object_grammar(), 32, 11);
    let cfg = TrainConfig { role: common::class_role(class_id), batch_size: 4, total_iterations: iterations, ..TrainConfig::default() };
    let data = make_dataset(&cfg, &corpus).expect("class crops");
    println!("{} training instances of class {class_id}", data.len());
    let out = train(&cfg, &corpus, &dir.join("run"), None, |_| {}).expect("training");
    if let Some(e) = out.evals.last() {
        println!("final perceptual {:.4}, colour agreement {:.4}", e.perceptual, e.color_agreement);
    }
}
