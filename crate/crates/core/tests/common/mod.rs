//! Shared test utilities: the central finite-difference oracle used to audit
//! analytic gradients, kept independent of the tape's backward pass.

#![allow(dead_code)]

use strep::tensor::Tensor;

/// Relative-error bound all gradient checks run at (64-bit mode).
pub const GRAD_TOL: f64 = 1e-4;

/// Check analytic gradients against central finite differences.
///
/// `eval_loss` must be a pure function of the tensors it is given. `analytic`
/// holds one gradient vector per input tensor, aligned with `xs`.
pub fn assert_grads_match(
    xs: &[Tensor<f64>],
    eval_loss: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
    analytic: &[Vec<f64>],
    label: &str,
) -> f64 {
    assert_eq!(xs.len(), analytic.len(), "{label}: grad count");
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for i in 0..xs.len() {
        assert_eq!(xs[i].numel(), analytic[i].len(), "{label}: grad {i} length");
        for j in 0..xs[i].numel() {
            let x0 = xs[i].data()[j];
            let h = 1e-5 * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let plus = eval_loss(&work);
            work[i].data_mut()[j] = x0 - h;
            let minus = eval_loss(&work);
            work[i].data_mut()[j] = x0;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[i][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel < GRAD_TOL,
                "{label}: tensor {i} element {j}: finite diff {fd:e} vs analytic {an:e} (rel {rel:e})"
            );
        }
    }
    worst
}

/// Deterministic micro-model configuration for whole-model gradient checks.
pub fn micro_model_config() -> strep::model::ModelConfig {
    strep::model::ModelConfig {
        node_count: 4,
        channels: 1,
        steps_per_day: 12,
        input_len: 8,
        target_len: 4,
        dim: 8,
        compressed_len: 2,
        proxy_tokens: 2,
        layers: 2,
        heads: 2,
        ffn_factor: 2,
        conv_kernel: 3,
        dropout: 0.1,
        pre_norm: false,
        bypass_encoder: false,
        use_recon: true,
        use_pred: true,
    }
}
