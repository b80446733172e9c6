use hsi_detect_core::gradsuite::{check_hsr, check_primitive, check_sst, primitives, MODEL_TOLERANCE, PRIMITIVE_TOLERANCE};

#[test]
fn every_primitive_on_twenty_random_inputs() {
    for p in primitives() {
        for seed in 0..20 {
            let r = check_primitive(&p, seed).unwrap();
            assert!(r.max_rel_err <= PRIMITIVE_TOLERANCE, "{} seed {seed}: {r:?}", p.name);
        }
    }
}

#[test]
fn reconstruction_stage_and_network() {
    let r = check_sst(1).unwrap();
    assert!(r.max_rel_err <= MODEL_TOLERANCE, "{r:?}");
    let r = check_hsr(2).unwrap();
    assert!(r.max_rel_err <= MODEL_TOLERANCE, "{r:?}");
}
