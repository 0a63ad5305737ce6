use semsynth::gradcheck::{run_suite, Suite, TOLERANCE};

fn assert_suite(s: Suite) {
    let results = run_suite(s).unwrap();
    assert!(!results.is_empty());
    for r in &results {
        eprintln!("{} {} {:.3e} ({} probes)", r.suite, r.op, r.max_rel_error, r.probes);
    }
    for r in results {
        assert!(r.max_rel_error <= TOLERANCE, "{}::{} relative error {:.3e}", r.suite, r.op, r.max_rel_error);
    }
}

#[test]
fn encoder_gradients() {
    assert_suite(Suite::Encoder);
}

#[test]
fn decoder_gradients() {
    assert_suite(Suite::Decoder);
}

#[test]
fn discriminator_gradients() {
    assert_suite(Suite::Discriminator);
}

#[test]
fn loss_gradients() {
    assert_suite(Suite::Losses);
}

#[test]
fn cropper_gradients() {
    assert_suite(Suite::Cropper);
}
