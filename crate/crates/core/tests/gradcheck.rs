//! Finite-difference gradient checks, five seeds per case.

use usegan_testkit::gradcheck::{self, CaseResult, SEEDS, TOLERANCE};

fn run(case: gradcheck::Case) {
    for seed in SEEDS {
        let r: CaseResult = case(seed).unwrap();
        assert!(
            r.passed(),
            "{} seed {seed}: max relative error {:.3e} (tolerance {TOLERANCE:e}, {} probes)",
            r.name,
            r.max_rel,
            r.checked
        );
    }
}

#[test]
fn conv2d() {
    run(gradcheck::conv2d_case);
}

#[test]
fn deconv2d() {
    run(gradcheck::deconv2d_case);
}

#[test]
fn batchnorm() {
    run(gradcheck::batchnorm_case);
}

#[test]
fn activations() {
    run(gradcheck::activations_case);
}

#[test]
fn use_block() {
    run(gradcheck::use_case);
}

#[test]
fn cmhsa_eval_mode() {
    run(gradcheck::cmhsa_case);
}

#[test]
fn tiny_generator_through_loss() {
    run(gradcheck::generator_case);
}

#[test]
fn discriminator_through_both_losses() {
    run(gradcheck::discriminator_case);
}
