//! Train the base generator on a small corpus: `train_base [out_dir] [iterations] [batch]`.

use semsynth::synthetic::SceneGrammar;
use semsynth::training::{train, TrainConfig};

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("train_base");
    let iterations: u64 = common::arg_or(2, 300);
    let batch: usize = common::arg_or(3, 4);
    let corpus = common::corpus(&dir.join("corpus"), &SceneGrammar::with_canvas(64), 8, 7);
    let cfg = TrainConfig { batch_size: batch, total_iterations: iterations, ..TrainConfig::default() };
    let out = train(&cfg, &corpus, &dir.join("run"), None, |_| {}).expect("training");
    for e in &out.evals {
        println!("iter {:>5}  perceptual {:.4}  colour agreement {:.4}", e.iteration, e.perceptual, e.color_agreement);
    }
    println!("checkpoints: {:?}", out.checkpoints);
}
