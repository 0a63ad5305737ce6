//! Finite-difference gradient checks: `gradcheck [module]`.

use semsynth::gradcheck::{run_all, run_suite, Suite};

fn main() {
    tch::set_num_threads(1);
    let results = match std::env::args().nth(1) {
        Some(m) => run_suite(m.parse::<Suite>().expect("module name")).unwrap(),
        None => run_all().unwrap(),
    };
    for r in &results {
        println!("{:<14} {:<24} {:.3e} {}", r.suite, r.op, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
    }
}
