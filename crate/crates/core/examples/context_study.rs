//! Does a class model use its context? Trains a model with and without the
//! context image on colour-coupled scenes and correlates generated colours
//! with the coupling function on held-out backgrounds.
//! `context_study [out_dir] [iterations]`

use semsynth::context_study::{run_context_study, ContextStudyConfig};

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("context_study");
    let mut cfg = ContextStudyConfig::default();
    cfg.train.total_iterations = common::arg_or(2, cfg.train.total_iterations);
    let r = run_context_study(&cfg, &dir).expect("study");
    println!("with context: r = {:.3} {:?}", r.with_context.mean_r, r.with_context.per_channel);
    println!("ablated:      r = {:.3} {:?}", r.ablated.mean_r, r.ablated.per_channel);
}
