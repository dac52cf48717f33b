use sgta::gradcheck::{check_attention_inputs, check_loss_gradients, check_weight_group};

#[test]
fn attention_gradients_match_finite_differences() {
    assert!(check_weight_group("attention", true, 50, 1) < 1e-4);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    assert!(check_weight_group("mlp", true, 50, 2) < 1e-4);
    assert!(check_weight_group("mlp", false, 50, 3) < 1e-4);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    assert!(check_weight_group("encoder", true, 50, 4) < 1e-4);
}

#[test]
fn decoder_gradients_match_finite_differences() {
    assert!(check_weight_group("decoder", true, 50, 5) < 1e-4);
}

#[test]
fn attention_block_input_gradients() {
    assert!(check_attention_inputs(50, 6) < 1e-4);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (belief, offset) = check_loss_gradients(50, 7);
    assert!(belief < 1e-6, "{belief}");
    assert!(offset < 1e-6, "{offset}");
}
