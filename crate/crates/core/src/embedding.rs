//! Input embedding: temporal masking, cross-time feature concatenation, a
//! two-layer projector, mask-token substitution, calendar/spatial embedding
//! addition, and a length-preserving temporal convolution.

use crate::error::{shape_err, Result};
use crate::param::{PId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which (node, step) positions are hidden from the encoder.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    /// Row-major [node_count, input_len]; true = masked.
    pub grid: Vec<bool>,
    pub node_count: usize,
    pub input_len: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn empty(node_count: usize, input_len: usize) -> Self {
        MaskSpec {
            grid: vec![false; node_count * input_len],
            node_count,
            input_len,
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn is_masked(&self, node: usize, t: usize) -> bool {
        self.grid[node * self.input_len + t]
    }

    pub fn masked_count(&self, node: usize) -> usize {
        self.grid[node * self.input_len..(node + 1) * self.input_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// Sample floor(ratio * input_len) masked steps per node, independently per
/// node and without replacement. Outside training the mask is empty.
pub fn apply_mask(
    node_count: usize,
    input_len: usize,
    ratio: f64,
    training: bool,
    seed: u64,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(shape_err!("mask ratio {ratio} outside [0, 1)"));
    }
    if !training || ratio == 0.0 {
        return Ok(MaskSpec::empty(node_count, input_len));
    }
    let per_node = (ratio * input_len as f64).floor() as usize;
    let mut grid = vec![false; node_count * input_len];
    let mut rng = Rng::new(seed);
    for node in 0..node_count {
        for t in rng.choose(input_len, per_node) {
            grid[node * input_len + t] = true;
        }
    }
    Ok(MaskSpec {
        grid,
        node_count,
        input_len,
        ratio,
        seed,
    })
}

/// Concatenate each step's features with the features at the node's most
/// recent *unmasked* step: [N, T, C] -> [N, T, 2C]. Masked anchors would leak
/// hidden values, so the anchor skips masked steps; a fully-masked node is an
/// error.
pub fn cross_time_concat<E: Real>(
    x: &Tensor<E>,
    mask: &MaskSpec,
) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(shape_err!("cross_time_concat expects rank 3, got {shape:?}"));
    }
    let (n, t, c) = (shape[0], shape[1], shape[2]);
    if mask.node_count != n || mask.input_len != t {
        return Err(shape_err!(
            "mask grid {}x{} does not match input {n}x{t}",
            mask.node_count,
            mask.input_len
        ));
    }
    let src = x.data();
    let mut out = vec![E::ZERO; n * t * 2 * c];
    for node in 0..n {
        let anchor = (0..t)
            .rev()
            .find(|&step| !mask.is_masked(node, step))
            .ok_or_else(|| shape_err!("node {node} is fully masked; no visible anchor step"))?;
        let anchor_off = (node * t + anchor) * c;
        for step in 0..t {
            let src_off = (node * t + step) * c;
            let dst_off = (node * t + step) * 2 * c;
            out[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
            out[dst_off + c..dst_off + 2 * c].copy_from_slice(&src[anchor_off..anchor_off + c]);
        }
    }
    Tensor::new(vec![n, t, 2 * c], out)
}

/// Parameter handles for the embedding stage.
#[derive(Debug, Clone)]
pub struct EmbeddingIds {
    pub proj1_w1: PId, // [2C, d]
    pub proj1_b1: PId,
    pub proj1_w2: PId, // [d, d]
    pub proj1_b2: PId,
    pub mask_token: PId, // [d]
    pub e_tod: PId,      // [steps_per_day, d]
    pub e_dow: PId,      // [7, d]
    pub e_spt: PId,      // [N, d]
    pub conv_kernel: PId, // [k, d, d]
    pub conv_bias: PId,   // [d]
}

pub struct EmbeddingDims {
    pub node_count: usize,
    pub channels: usize,
    pub dim: usize,
    pub steps_per_day: usize,
    pub conv_kernel: usize,
}

pub fn register_embedding<E: Real>(
    store: &mut ParamStore<E>,
    dims: &EmbeddingDims,
    rng: &mut Rng,
) -> EmbeddingIds {
    let d = dims.dim;
    let c2 = 2 * dims.channels;
    let w_std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    EmbeddingIds {
        proj1_w1: store.register("embed.proj1_w1", Tensor::randn(&[c2, d], w_std(c2), rng)),
        proj1_b1: store.register("embed.proj1_b1", Tensor::zeros(&[d])),
        proj1_w2: store.register("embed.proj1_w2", Tensor::randn(&[d, d], w_std(d), rng)),
        proj1_b2: store.register("embed.proj1_b2", Tensor::zeros(&[d])),
        mask_token: store.register("embed.mask_token", Tensor::randn(&[d], 0.02, rng)),
        e_tod: store.register(
            "embed.e_tod",
            Tensor::randn(&[dims.steps_per_day, d], 0.02, rng),
        ),
        e_dow: store.register("embed.e_dow", Tensor::randn(&[7, d], 0.02, rng)),
        e_spt: store.register(
            "embed.e_spt",
            Tensor::randn(&[dims.node_count, d], 0.02, rng),
        ),
        conv_kernel: store.register(
            "embed.conv_kernel",
            Tensor::randn(
                &[dims.conv_kernel, d, d],
                w_std(dims.conv_kernel * d),
                rng,
            ),
        ),
        conv_bias: store.register("embed.conv_bias", Tensor::zeros(&[d])),
    }
}

/// Both stages of the embedding: the pre-convolution sum (token substitution
/// plus calendar/spatial context) and the convolved output. The first stage
/// is exposed so the masked-position independence can be checked before the
/// convolution mixes neighboring steps.
pub fn embed_stages<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EmbeddingIds,
    x: &Tensor<E>,
    mask: &MaskSpec,
    tod_idx: &[usize],
    dow_idx: &[usize],
) -> Result<(Var, Var)> {
    let v = |id: PId| vars[id.0];
    let shape = x.shape();
    let (n, t) = (shape[0], shape[1]);
    let steps_per_day = tape.shape(v(ids.e_tod))[0];
    if tod_idx.len() != t || dow_idx.len() != t {
        return Err(shape_err!("calendar index length must equal input length {t}"));
    }
    if let Some(&bad) = tod_idx.iter().find(|&&i| i >= steps_per_day) {
        return Err(shape_err!("time-of-day index {bad} out of range {steps_per_day}"));
    }
    if let Some(&bad) = dow_idx.iter().find(|&&i| i >= 7) {
        return Err(shape_err!("day-of-week index {bad} out of range 7"));
    }

    let concat = cross_time_concat(x, mask)?;
    let input = tape.leaf(concat);
    let h = tape.linear(input, v(ids.proj1_w1), v(ids.proj1_b1))?;
    let h = tape.relu(h);
    let h = tape.linear(h, v(ids.proj1_w2), v(ids.proj1_b2))?;
    // Masked steps carry the token, not projections of hidden data; the
    // calendar and spatial embeddings are added afterwards so they survive
    // at masked positions.
    let h = tape.where_time_token(h, v(ids.mask_token), &mask.grid);

    let tod = tape.gather_rows(v(ids.e_tod), tod_idx);
    let h = tape.add(h, tod);
    let dow = tape.gather_rows(v(ids.e_dow), dow_idx);
    let h = tape.add(h, dow);
    let d = tape.shape(v(ids.e_spt))[1];
    let spt = tape.reshape(v(ids.e_spt), &[n, 1, d]);
    let pre_conv = tape.add(h, spt);

    let out = tape.conv1d_same(pre_conv, v(ids.conv_kernel), v(ids.conv_bias))?;
    Ok((pre_conv, out))
}

/// Full embedding: [N, T, C] plus mask and calendar indices to [N, T, d].
pub fn embed<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EmbeddingIds,
    x: &Tensor<E>,
    mask: &MaskSpec,
    tod_idx: &[usize],
    dow_idx: &[usize],
) -> Result<Var> {
    embed_stages(tape, vars, ids, x, mask, tod_idx, dow_idx).map(|(_, out)| out)
}
