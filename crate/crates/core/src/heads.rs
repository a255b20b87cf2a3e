//! Reconstruction and prediction decoders plus the combined training
//! objective with multi-scale temporal comparison.

use crate::error::{config_err, shape_err, Result};
use crate::param::{PId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Handles for the reconstruction decoder: h = GELU(Lin1(Z) + Z), out = Lin2(h).
#[derive(Debug, Clone, Copy)]
pub struct ReconIds {
    pub w1: PId, // [d, d]
    pub b1: PId,
    pub w2: PId, // [d, C]
    pub b2: PId,
}

/// Handles for the prediction decoder: dropout, time map T -> F, feature map
/// d -> C.
#[derive(Debug, Clone, Copy)]
pub struct PredIds {
    pub wt: PId, // [T, F]
    pub bt: PId,
    pub wf: PId, // [d, C]
    pub bf: PId,
}

pub struct HeadDims {
    pub dim: usize,
    pub channels: usize,
    pub input_len: usize,
    pub target_len: usize,
}

pub fn register_recon<E: Real>(
    store: &mut ParamStore<E>,
    dims: &HeadDims,
    rng: &mut Rng,
) -> ReconIds {
    let (d, c) = (dims.dim, dims.channels);
    let std = (1.0 / d as f64).sqrt();
    ReconIds {
        w1: store.register("recon.w1", Tensor::randn(&[d, d], std, rng)),
        b1: store.register("recon.b1", Tensor::zeros(&[d])),
        w2: store.register("recon.w2", Tensor::randn(&[d, c], std, rng)),
        b2: store.register("recon.b2", Tensor::zeros(&[c])),
    }
}

pub fn register_pred<E: Real>(
    store: &mut ParamStore<E>,
    dims: &HeadDims,
    rng: &mut Rng,
) -> PredIds {
    let (t, f, d, c) = (dims.input_len, dims.target_len, dims.dim, dims.channels);
    PredIds {
        wt: store.register("pred.wt", Tensor::randn(&[t, f], (1.0 / t as f64).sqrt(), rng)),
        bt: store.register("pred.bt", Tensor::zeros(&[f])),
        wf: store.register("pred.wf", Tensor::randn(&[d, c], (1.0 / d as f64).sqrt(), rng)),
        bf: store.register("pred.bf", Tensor::zeros(&[c])),
    }
}

/// Reconstruct the input window: [N, T, d] -> [N, T, C].
pub fn decode_recon<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &ReconIds,
    z: Var,
) -> Result<Var> {
    let lin1 = tape.linear(z, vars[ids.w1.0], vars[ids.b1.0])?;
    let resid = tape.add(lin1, z);
    let h = tape.gelu(resid);
    tape.linear(h, vars[ids.w2.0], vars[ids.b2.0])
}

/// Predict the future window: [N, T, d] -> [N, F, C]. Dropout applies only
/// in training; inference is deterministic.
pub fn decode_pred<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &PredIds,
    z: Var,
    dropout_rate: f64,
    training: bool,
    dropout_seed: u64,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("decode_pred expects rank 3, got {shape:?}"));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let f = tape.shape(vars[ids.wt.0])[1];
    let z = tape.dropout(z, dropout_rate, training, dropout_seed)?;
    // Time map per (node, channel) ...
    let x = tape.permute3(z, [0, 2, 1]); // [N, d, T]
    let x = tape.reshape(x, &[n * d, t]);
    let x = tape.linear(x, vars[ids.wt.0], vars[ids.bt.0])?;
    let x = tape.reshape(x, &[n, d, f]);
    let x = tape.permute3(x, [0, 2, 1]); // [N, F, d]
    // ... then feature map.
    tape.linear(x, vars[ids.wf.0], vars[ids.bf.0])
}

/// Loss mixing weights; the third weight is defined by the first two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || alpha + beta > 1.0 + 1e-12 {
            return Err(config_err!(
                "loss weights need alpha >= 0, beta >= 0, alpha + beta <= 1; got ({alpha}, {beta})"
            ));
        }
        Ok(LossWeights { alpha, beta })
    }

    pub fn gamma(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    /// Weights with disabled components dropped and the survivors rescaled to
    /// sum to one. Returns (alpha, beta, gamma).
    pub fn effective(
        &self,
        use_recon: bool,
        use_pred: bool,
        use_multiscale: bool,
    ) -> Result<(f64, f64, f64)> {
        let a = if use_recon { self.alpha } else { 0.0 };
        let b = if use_pred { self.beta } else { 0.0 };
        let g = if use_multiscale { self.gamma() } else { 0.0 };
        let sum = a + b + g;
        if sum <= 0.0 {
            return Err(config_err!("all loss components disabled or zero-weighted"));
        }
        Ok((a / sum, b / sum, g / sum))
    }
}

/// Pooling kernel sizes for the multi-scale comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSet {
    pub kernels: Vec<usize>,
}

impl KernelSet {
    pub fn new(kernels: Vec<usize>, max_len: usize) -> Result<Self> {
        for &k in &kernels {
            if k < 1 || k > max_len {
                return Err(config_err!(
                    "pooling kernel {k} outside [1, {max_len}]"
                ));
            }
        }
        Ok(KernelSet { kernels })
    }

    /// Kernels that fit a shorter sequence (used when only one decoder runs).
    pub fn clipped(&self, max_len: usize) -> Vec<usize> {
        self.kernels.iter().copied().filter(|&k| k <= max_len).collect()
    }
}

/// Sum over kernels of the Huber distance between average-pooled sequences.
/// Plain sum, no averaging over kernels.
pub fn multiscale_loss<E: Real>(
    tape: &mut Tape<E>,
    pred_full: Var,
    true_full: Var,
    kernels: &[usize],
    delta: E,
) -> Result<Var> {
    let shape = tape.shape(pred_full).to_vec();
    if shape != tape.shape(true_full) {
        return Err(shape_err!(
            "multiscale shapes {:?} vs {:?}",
            shape,
            tape.shape(true_full)
        ));
    }
    let seq_len = shape[1];
    let mut total: Option<Var> = None;
    for &k in kernels {
        if k > seq_len {
            return Err(config_err!("pooling kernel {k} exceeds sequence length {seq_len}"));
        }
        let a = tape.avg_pool_time(pred_full, k)?;
        let b = tape.avg_pool_time(true_full, k)?;
        let term = tape.huber_loss(a, b, delta)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.leaf(Tensor::scalar(E::ZERO))))
}

/// The three loss components and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub pred: Var,
    pub multiscale: Var,
}

/// total = alpha * L_recon + beta * L_pred + gamma * L_MS over the
/// concatenated [current; future] sequences.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<E: Real>(
    tape: &mut Tape<E>,
    recon_out: Var,
    x_curr: Var,
    pred_out: Var,
    x_tgt: Var,
    weights: LossWeights,
    kernels: &KernelSet,
    delta: E,
) -> Result<LossVars> {
    let l_recon = tape.huber_loss(recon_out, x_curr, delta)?;
    let l_pred = tape.huber_loss(pred_out, x_tgt, delta)?;
    let pred_full = tape.concat1(&[recon_out, pred_out]);
    let true_full = tape.concat1(&[x_curr, x_tgt]);
    let l_ms = multiscale_loss(tape, pred_full, true_full, &kernels.kernels, delta)?;
    let total = combine(tape, l_recon, l_pred, l_ms, weights.alpha, weights.beta, weights.gamma());
    Ok(LossVars {
        total,
        recon: l_recon,
        pred: l_pred,
        multiscale: l_ms,
    })
}

/// Weighted sum of already-computed scalar components.
pub fn combine<E: Real>(
    tape: &mut Tape<E>,
    l_recon: Var,
    l_pred: Var,
    l_ms: Var,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Var {
    let a = tape.scale(l_recon, E::from_f64(alpha));
    let b = tape.scale(l_pred, E::from_f64(beta));
    let g = tape.scale(l_ms, E::from_f64(gamma));
    let ab = tape.add(a, b);
    tape.add(ab, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_validate_and_derive_gamma() {
        let w = LossWeights::new(0.3, 0.3).unwrap();
        assert!((w.gamma() - 0.4).abs() < 1e-12);
        assert!(LossWeights::new(0.6, 0.6).is_err());
        assert!(LossWeights::new(-0.1, 0.2).is_err());
        let w = LossWeights::new(0.5, 0.5).unwrap();
        assert_eq!(w.gamma(), 0.0);
    }

    #[test]
    fn effective_weights_renormalize() {
        let w = LossWeights::new(0.3, 0.3).unwrap();
        let (a, b, g) = w.effective(true, true, false).unwrap();
        assert!((a - 0.5).abs() < 1e-12 && (b - 0.5).abs() < 1e-12 && g == 0.0);
        let (a, b, g) = w.effective(true, false, true).unwrap();
        assert!((a - 0.3 / 0.7).abs() < 1e-12);
        assert_eq!(b, 0.0);
        assert!((g - 0.4 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn multiscale_hand_example() {
        // pred [1,1,3,3] vs true [1,1,1,1], kernel 2, delta 1:
        // pooled pred [1, 3], pooled true [1, 1], huber = mean(0, 1.5) = 0.75.
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 4, 1], vec![1.0, 1.0, 3.0, 3.0]).unwrap());
        let truth = tape.leaf(Tensor::new(vec![1, 4, 1], vec![1.0; 4]).unwrap());
        let l = multiscale_loss(&mut tape, pred, truth, &[2], 1.0).unwrap();
        assert!((tape.scalar(l) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn multiscale_kernel_one_equals_plain_huber() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(5);
        let a = tape.leaf(Tensor::randn(&[2, 6, 1], 1.0, &mut rng));
        let b = tape.leaf(Tensor::randn(&[2, 6, 1], 1.0, &mut rng));
        let ms = multiscale_loss(&mut tape, a, b, &[1], 1.0).unwrap();
        let plain = tape.huber_loss(a, b, 1.0).unwrap();
        assert_eq!(tape.scalar(ms), tape.scalar(plain));
        // Equal sequences pool to zero loss at any scale.
        let zero = multiscale_loss(&mut tape, a, a, &[1, 2, 3], 1.0).unwrap();
        assert_eq!(tape.scalar(zero), 0.0);
        // Oversized kernel is rejected.
        assert!(multiscale_loss(&mut tape, a, b, &[7], 1.0).is_err());
    }

    #[test]
    fn decode_recon_reduces_to_gelu_when_lin1_zero() {
        // d = 1, C = 1, Lin1 = 0, Lin2 = identity: out = GELU(z).
        let mut store = ParamStore::<f64>::new();
        let dims = HeadDims {
            dim: 1,
            channels: 1,
            input_len: 4,
            target_len: 4,
        };
        let ids = register_recon(&mut store, &dims, &mut Rng::new(1));
        store.get_mut(ids.w1).value = Tensor::zeros(&[1, 1]);
        store.get_mut(ids.b1).value = Tensor::zeros(&[1]);
        store.get_mut(ids.w2).value = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        store.get_mut(ids.b2).value = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = store.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let z = tape.leaf(Tensor::new(vec![1, 4, 1], vec![-1.0, 0.0, 0.5, 2.0]).unwrap());
        let out = decode_recon(&mut tape, &vars, &ids, z).unwrap();
        let expect = tape.gelu(z);
        assert_eq!(tape.data(out), tape.data(expect));
    }

    #[test]
    fn decode_pred_shapes_and_inference_determinism() {
        let mut store = ParamStore::<f64>::new();
        let dims = HeadDims {
            dim: 8,
            channels: 1,
            input_len: 12,
            target_len: 12,
        };
        let ids = register_pred(&mut store, &dims, &mut Rng::new(2));
        let mut tape = Tape::new();
        let vars: Vec<Var> = store.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let z = tape.leaf(Tensor::randn(&[3, 12, 8], 1.0, &mut Rng::new(3)));
        let a = decode_pred(&mut tape, &vars, &ids, z, 0.5, false, 1).unwrap();
        let b = decode_pred(&mut tape, &vars, &ids, z, 0.5, false, 2).unwrap();
        assert_eq!(tape.shape(a), &[3, 12, 1]);
        assert_eq!(tape.data(a), tape.data(b));

        // Zero representation with zero biases stays zero.
        let z0 = tape.leaf(Tensor::zeros(&[3, 12, 8]));
        let out = decode_pred(&mut tape, &vars, &ids, z0, 0.0, true, 1).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multiscale_invariant_to_joint_node_permutation() {
        let mut rng = Rng::new(31);
        let n = 4;
        let row = 8;
        let a = Tensor::<f64>::randn(&[n, 8, 1], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[n, 8, 1], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            let mut out = vec![0.0; n * row];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * row..(dst + 1) * row].copy_from_slice(&t.data()[src * row..(src + 1) * row]);
            }
            Tensor::new(vec![n, 8, 1], out).unwrap()
        };
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let base = multiscale_loss(&mut tape, va, vb, &[2, 4], 1.0).unwrap();
        let pa = tape.leaf(permute(&a));
        let pb = tape.leaf(permute(&b));
        let shuffled = multiscale_loss(&mut tape, pa, pb, &[2, 4], 1.0).unwrap();
        assert!((tape.scalar(base) - tape.scalar(shuffled)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_recombines_and_degenerates() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(8);
        let recon = tape.leaf(Tensor::randn(&[2, 4, 1], 1.0, &mut rng));
        let x_curr = tape.leaf(Tensor::randn(&[2, 4, 1], 1.0, &mut rng));
        let pred = tape.leaf(Tensor::randn(&[2, 4, 1], 1.0, &mut rng));
        let x_tgt = tape.leaf(Tensor::randn(&[2, 4, 1], 1.0, &mut rng));
        let kernels = KernelSet::new(vec![2, 4], 8).unwrap();
        let w = LossWeights::new(0.3, 0.3).unwrap();
        let out = total_loss(&mut tape, recon, x_curr, pred, x_tgt, w, &kernels, 1.0).unwrap();
        let lhs = tape.scalar(out.total);
        let rhs = 0.3 * tape.scalar(out.recon) + 0.3 * tape.scalar(out.pred)
            + 0.4 * tape.scalar(out.multiscale);
        assert!((lhs - rhs).abs() < 1e-12);

        // alpha = beta = 0.5 silences the multi-scale term.
        let w2 = LossWeights::new(0.5, 0.5).unwrap();
        let out2 = total_loss(&mut tape, recon, x_curr, pred, x_tgt, w2, &kernels, 1.0).unwrap();
        let expect = 0.5 * tape.scalar(out2.recon) + 0.5 * tape.scalar(out2.pred);
        assert!((tape.scalar(out2.total) - expect).abs() < 1e-12);

        // Perfect outputs: everything is zero.
        let out3 = total_loss(&mut tape, x_curr, x_curr, x_tgt, x_tgt, w, &kernels, 1.0).unwrap();
        assert_eq!(tape.scalar(out3.total), 0.0);
    }
}
