mod common;

#[test]
fn halting_properties() {
    common::checks::halting_properties().unwrap();
}

#[test]
fn kernel_gradients_match_finite_differences() {
    common::checks::op_gradients().unwrap();
}

#[test]
fn full_model_gradients_match_finite_differences() {
    common::checks::model_gradients().unwrap();
}
