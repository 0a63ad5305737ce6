//! Render a synthetic corpus: `make_dataset [out_dir] [count] [seed]`.

use semsynth::datamodel::extract_instances;
use semsynth::io::Corpus;
use semsynth::synthetic::{generate_corpus, SceneGrammar};

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("dataset");
    let count: usize = common::arg_or(2, 16);
    let seed: u64 = common::arg_or(3, 0);
    let manifest = generate_corpus(seed, &SceneGrammar::with_canvas(64), count, &dir).expect("generate");
    let corpus = Corpus::load(&dir).expect("reload");
    let mut per_class = vec![0usize; corpus.num_classes() as usize];
    for s in &corpus.scenes {
        for r in extract_instances(&s.instances, &s.semantic).unwrap() {
            per_class[r.class_id as usize] += 1;
        }
    }
    println!("{} scenes in {}", manifest.scenes.len(), dir.display());
    for (name, n) in manifest.class_names.iter().zip(&per_class).skip(1) {
        println!("  {name:<10} {n} instances");
    }
}
