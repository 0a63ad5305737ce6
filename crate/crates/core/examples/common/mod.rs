#![allow(dead_code)]

use semsynth::io::Corpus;
use semsynth::synthetic::{generate_corpus, SceneGrammar};
use semsynth::training::{train, GeneratorModel, TrainConfig, TrainRole};
use semsynth::datamodel::RemovalMode;
use std::path::{Path, PathBuf};

/// Output directory from the first argument, else a temp dir.
pub fn out_dir(name: &str) -> PathBuf {
    std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("semsynth-examples").join(name))
}

pub fn arg_or<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

pub fn init() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    tch::set_num_threads(1);
}

/// 128x128 scenes whose objects are large enough for a 64px class model.
pub fn large_object_grammar() -> SceneGrammar {
    SceneGrammar { min_shape_size: 32, max_shape_size: 48, max_shapes: 3, ..SceneGrammar::with_canvas(128) }
}

pub fn corpus(dir: &Path, grammar: &SceneGrammar, n: usize, seed: u64) -> Corpus {
    generate_corpus(seed, grammar, n, dir).expect("corpus");
    Corpus::load(dir).expect("load corpus")
}

pub fn class_role(class_id: u16) -> TrainRole {
    TrainRole::Class { class_id, model_res: 64, removal_mode: RemovalMode::ZeroMask, blur_sigma: None, ablate_context_image: false }
}

/// Train briefly and return the averaged generator.
pub fn quick_model(corpus: &Corpus, role: TrainRole, iterations: u64, run: &Path) -> GeneratorModel {
    let cfg = TrainConfig { role, batch_size: 2, total_iterations: iterations, eval_every: 0, sample_every: 0, ..TrainConfig::default() };
    let out = train(&cfg, corpus, run, None, |_| {}).expect("training");
    GeneratorModel::from_trainer(&out.trainer, true).expect("model")
}
