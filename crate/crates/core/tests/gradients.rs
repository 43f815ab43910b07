mod common;

use common::*;

#[test]
fn every_op_matches_finite_differences() {
    for (name, check) in op_gradient_suite() {
        assert!(check.passes(), "{name}: {check:?}");
        assert!(check.checked >= SHAPES_PER_OP as usize, "{name} checked too few entries");
    }
}

#[test]
fn two_layer_encoder_input_gradient() {
    for seed in 0..3 {
        let check = encoder_input_check(seed);
        assert!(check.passes(), "seed {seed}: {check:?}");
    }
}

#[test]
fn expert_stack_and_gate_input_gradient() {
    for seed in 0..3 {
        let check = stack_input_check(seed);
        assert!(check.passes(), "seed {seed}: {check:?}");
    }
}

#[test]
fn full_model_parameter_gradients() {
    for (point, check) in full_model_suite() {
        assert!(check.passes(), "{point}: {check:?}");
    }
}
