//! Stacked encoder layers. Each layer compresses the time axis to a few
//! virtual steps, extracts spatial relations among nodes there through a
//! small proxy token set (cost linear in node count), and restores the
//! original temporal length. A global residual wraps the whole stack.

use crate::error::{shape_err, Result};
use crate::param::{PId, ParamStore};
use crate::rng::Rng;
use crate::tape::{MhaVars, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Parameter handles for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaIds {
    pub wq: PId,
    pub bq: PId,
    pub wk: PId,
    pub bk: PId,
    pub wv: PId,
    pub bv: PId,
    pub wo: PId,
    pub bo: PId,
}

pub fn register_mha<E: Real>(
    store: &mut ParamStore<E>,
    prefix: &str,
    dim: usize,
    rng: &mut Rng,
) -> MhaIds {
    let std = (1.0 / dim as f64).sqrt();
    let mut lin = |name: &str| {
        (
            store.register(format!("{prefix}.{name}_w"), Tensor::randn(&[dim, dim], std, rng)),
            store.register(format!("{prefix}.{name}_b"), Tensor::zeros(&[dim])),
        )
    };
    let (wq, bq) = lin("q");
    let (wk, bk) = lin("k");
    let (wv, bv) = lin("v");
    let (wo, bo) = lin("out");
    MhaIds {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

impl MhaIds {
    pub fn bind(&self, vars: &[Var]) -> MhaVars {
        MhaVars {
            wq: vars[self.wq.0],
            bq: vars[self.bq.0],
            wk: vars[self.wk.0],
            bk: vars[self.bk.0],
            wv: vars[self.wv.0],
            bv: vars[self.bv.0],
            wo: vars[self.wo.0],
            bo: vars[self.bo.0],
        }
    }
}

/// Parameter handles for one encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayerIds {
    pub comp_w1: PId, // [T, T]
    pub comp_b1: PId,
    pub comp_w2: PId, // [T, p]
    pub comp_b2: PId,
    pub proxy: PId, // [m, d]
    pub mha1: MhaIds,
    pub mha2: MhaIds,
    pub ffn_w1: PId, // [d, f*d]
    pub ffn_b1: PId,
    pub ffn_w2: PId, // [f*d, d]
    pub ffn_b2: PId,
    pub dec_w1: PId, // [p, T]
    pub dec_b1: PId,
    pub dec_w2: PId, // [T, T]
    pub dec_b2: PId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderDims {
    pub input_len: usize,     // T
    pub compressed_len: usize, // p
    pub proxy_tokens: usize,   // m
    pub dim: usize,            // d
    pub heads: usize,
    pub ffn_factor: usize,
}

pub fn register_layer<E: Real>(
    store: &mut ParamStore<E>,
    prefix: &str,
    dims: &EncoderDims,
    rng: &mut Rng,
) -> EncoderLayerIds {
    let (t, p, m, d, f) = (
        dims.input_len,
        dims.compressed_len,
        dims.proxy_tokens,
        dims.dim,
        dims.ffn_factor,
    );
    let w_std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    EncoderLayerIds {
        comp_w1: store.register(format!("{prefix}.comp_w1"), Tensor::randn(&[t, t], w_std(t), rng)),
        comp_b1: store.register(format!("{prefix}.comp_b1"), Tensor::zeros(&[t])),
        comp_w2: store.register(format!("{prefix}.comp_w2"), Tensor::randn(&[t, p], w_std(t), rng)),
        comp_b2: store.register(format!("{prefix}.comp_b2"), Tensor::zeros(&[p])),
        proxy: store.register(format!("{prefix}.proxy"), Tensor::randn(&[m, d], 0.02, rng)),
        mha1: register_mha(store, &format!("{prefix}.mha1"), d, rng),
        mha2: register_mha(store, &format!("{prefix}.mha2"), d, rng),
        ffn_w1: store.register(
            format!("{prefix}.ffn_w1"),
            Tensor::randn(&[d, f * d], w_std(d), rng),
        ),
        ffn_b1: store.register(format!("{prefix}.ffn_b1"), Tensor::zeros(&[f * d])),
        ffn_w2: store.register(
            format!("{prefix}.ffn_w2"),
            Tensor::randn(&[f * d, d], w_std(f * d), rng),
        ),
        ffn_b2: store.register(format!("{prefix}.ffn_b2"), Tensor::zeros(&[d])),
        dec_w1: store.register(format!("{prefix}.dec_w1"), Tensor::randn(&[p, t], w_std(p), rng)),
        dec_b1: store.register(format!("{prefix}.dec_b1"), Tensor::zeros(&[t])),
        dec_w2: store.register(format!("{prefix}.dec_w2"), Tensor::randn(&[t, t], w_std(t), rng)),
        dec_b2: store.register(format!("{prefix}.dec_b2"), Tensor::zeros(&[t])),
    }
}

/// Map each (node, channel) length-T vector through a two-layer MLP with GELU
/// to length p: [N, T, d] -> [N, p, d].
pub fn compress_time<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EncoderLayerIds,
    e: Var,
) -> Result<Var> {
    let shape = tape.shape(e).to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("compress_time expects rank 3, got {shape:?}"));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    if tape.shape(vars[ids.comp_w1.0])[0] != t {
        return Err(shape_err!(
            "compress_time built for T={}, got {t}",
            tape.shape(vars[ids.comp_w1.0])[0]
        ));
    }
    let p = tape.shape(vars[ids.comp_w2.0])[1];
    let x = tape.permute3(e, [0, 2, 1]); // [N, d, T]
    let x = tape.reshape(x, &[n * d, t]);
    let x = tape.linear(x, vars[ids.comp_w1.0], vars[ids.comp_b1.0])?;
    let x = tape.gelu(x);
    let x = tape.linear(x, vars[ids.comp_w2.0], vars[ids.comp_b2.0])?;
    let x = tape.reshape(x, &[n, d, p]);
    Ok(tape.permute3(x, [0, 2, 1]))
}

/// Restore [N, p, d] to [N, T, d] through the mirrored MLP.
pub fn decompress_time<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EncoderLayerIds,
    h: Var,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("decompress_time expects rank 3, got {shape:?}"));
    }
    let (n, p, d) = (shape[0], shape[1], shape[2]);
    if tape.shape(vars[ids.dec_w1.0])[0] != p {
        return Err(shape_err!(
            "decompress_time built for p={}, got {p}",
            tape.shape(vars[ids.dec_w1.0])[0]
        ));
    }
    let t = tape.shape(vars[ids.dec_w2.0])[1];
    let x = tape.permute3(h, [0, 2, 1]); // [N, d, p]
    let x = tape.reshape(x, &[n * d, p]);
    let x = tape.linear(x, vars[ids.dec_w1.0], vars[ids.dec_b1.0])?;
    let x = tape.gelu(x);
    let x = tape.linear(x, vars[ids.dec_w2.0], vars[ids.dec_b2.0])?;
    let x = tape.reshape(x, &[n, d, t]);
    Ok(tape.permute3(x, [0, 2, 1]))
}

fn ffn<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EncoderLayerIds,
    x: Var,
) -> Result<Var> {
    let h = tape.linear(x, vars[ids.ffn_w1.0], vars[ids.ffn_b1.0])?;
    let h = tape.gelu(h);
    tape.linear(h, vars[ids.ffn_w2.0], vars[ids.ffn_b2.0])
}

/// Proxy-token spatial mixing, shared across the p virtual steps.
///
/// Per virtual step j: the proxy tokens query all nodes, then the nodes query
/// the proxy summary back, with residuals and a feed-forward block:
/// cost O(N * m * d) instead of O(N^2 * d). Residual additions only by
/// default; `pre_norm` normalizes the residual-stream inputs of the second
/// attention and the feed-forward block (experimental).
pub fn spatial_extract<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EncoderLayerIds,
    e_comp: Var,
    heads: usize,
) -> Result<Var> {
    spatial_extract_opts(tape, vars, ids, e_comp, heads, false)
}

pub fn spatial_extract_opts<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EncoderLayerIds,
    e_comp: Var,
    heads: usize,
    pre_norm: bool,
) -> Result<Var> {
    let shape = tape.shape(e_comp).to_vec();
    let (n, p, d) = (shape[0], shape[1], shape[2]);
    let mha1 = ids.mha1.bind(vars);
    let mha2 = ids.mha2.bind(vars);
    let proxy = vars[ids.proxy.0];
    let mut steps = Vec::with_capacity(p);
    for j in 0..p {
        let slot = tape.slice1(e_comp, j, 1);
        let tokens = tape.reshape(slot, &[n, d]);
        let summary = tape.multi_head_attention(proxy, tokens, tokens, &mha1, heads)?;
        let queries = if pre_norm { tape.norm_last(tokens) } else { tokens };
        let mixed = tape.multi_head_attention(queries, summary, summary, &mha2, heads)?;
        let resid = tape.add(mixed, tokens);
        let ff_in = if pre_norm { tape.norm_last(resid) } else { resid };
        let ff = ffn(tape, vars, ids, ff_in)?;
        let out = tape.add(ff, resid);
        steps.push(tape.reshape(out, &[n, 1, d]));
    }
    Ok(tape.concat1(&steps))
}

/// One full layer: compress, extract, decompress.
pub fn layer_forward<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &EncoderLayerIds,
    e: Var,
    heads: usize,
    pre_norm: bool,
) -> Result<Var> {
    let compressed = compress_time(tape, vars, ids, e)?;
    let extracted = spatial_extract_opts(tape, vars, ids, compressed, heads, pre_norm)?;
    decompress_time(tape, vars, ids, extracted)
}

/// L stacked layers plus the global residual: Z = layers(E) + E.
pub fn encode<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    layers: &[EncoderLayerIds],
    e: Var,
    heads: usize,
) -> Result<Var> {
    encode_opts(tape, vars, layers, e, heads, false)
}

pub fn encode_opts<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    layers: &[EncoderLayerIds],
    e: Var,
    heads: usize,
    pre_norm: bool,
) -> Result<Var> {
    let mut h = e;
    for ids in layers {
        h = layer_forward(tape, vars, ids, h, heads, pre_norm)?;
    }
    Ok(tape.add(h, e))
}

// ---- all-pairs reference ---------------------------------------------------
//
// Identical layer layout but the spatial step runs full self-attention over
// all N nodes (O(N^2 * d)). Kept as the scaling baseline for benchmarks.

#[derive(Debug, Clone)]
pub struct NaiveLayerIds {
    pub inner: EncoderLayerIds,
}

pub fn register_naive_layer<E: Real>(
    store: &mut ParamStore<E>,
    prefix: &str,
    dims: &EncoderDims,
    rng: &mut Rng,
) -> NaiveLayerIds {
    NaiveLayerIds {
        inner: register_layer(store, prefix, dims, rng),
    }
}

pub fn naive_encode<E: Real>(
    tape: &mut Tape<E>,
    vars: &[Var],
    layers: &[NaiveLayerIds],
    e: Var,
    heads: usize,
) -> Result<Var> {
    let mut h = e;
    for layer in layers {
        let ids = &layer.inner;
        let compressed = compress_time(tape, vars, ids, h)?;
        let shape = tape.shape(compressed).to_vec();
        let (n, p, d) = (shape[0], shape[1], shape[2]);
        let mha = ids.mha2.bind(vars);
        let mut steps = Vec::with_capacity(p);
        for j in 0..p {
            let slot = tape.slice1(compressed, j, 1);
            let tokens = tape.reshape(slot, &[n, d]);
            let mixed = tape.multi_head_attention(tokens, tokens, tokens, &mha, heads)?;
            let resid = tape.add(mixed, tokens);
            let ff = ffn(tape, vars, ids, resid)?;
            let out = tape.add(ff, resid);
            steps.push(tape.reshape(out, &[n, 1, d]));
        }
        let extracted = tape.concat1(&steps);
        h = decompress_time(tape, vars, ids, extracted)?;
    }
    Ok(tape.add(h, e))
}

// ---- inference forward ------------------------------------------------------
//
// A tape-free forward for timing and serving: the tape retains every
// intermediate for backward, which balloons the working set far past any
// cache; this path runs the identical arithmetic in a small set of reusable
// scratch buffers, so its footprint stays flat in everything but N.

/// Reusable buffers for [`encode_infer`] / [`naive_encode_infer`].
#[derive(Default)]
pub struct InferScratch<E: Real> {
    cur: Vec<E>,
    perm: Vec<E>,
    hidden: Vec<E>,
    comp: Vec<E>,
    comp_perm: Vec<E>,
    extracted: Vec<E>,
    tokens: Vec<E>,
    q: Vec<E>,
    k: Vec<E>,
    v: Vec<E>,
    scores: Vec<E>,
    summary: Vec<E>,
    mixed: Vec<E>,
    ffn_hidden: Vec<E>,
    step_out: Vec<E>,
}

fn resize<E: Real>(buf: &mut Vec<E>, len: usize) {
    if buf.len() < len {
        buf.resize(len, E::ZERO);
    }
}

struct LinearRef<'a, E: Real> {
    w: &'a [E],
    b: &'a [E],
    out_dim: usize,
}

fn linear_ref<'a, E: Real>(store: &'a ParamStore<E>, w: PId, b: PId) -> LinearRef<'a, E> {
    LinearRef {
        w: store.get(w).value.data(),
        b: store.get(b).value.data(),
        out_dim: store.get(w).value.shape()[1],
    }
}

/// out[rows, out_dim] = x[rows, in_dim] . W + b
fn apply_linear<E: Real>(x: &[E], rows: usize, in_dim: usize, lin: &LinearRef<'_, E>, out: &mut [E]) {
    E::gemm(rows, in_dim, lin.out_dim, x, in_dim as isize, 1, lin.w, lin.out_dim as isize, 1, E::ZERO, out);
    for row in out[..rows * lin.out_dim].chunks_mut(lin.out_dim) {
        for (o, &bias) in row.iter_mut().zip(lin.b) {
            *o += bias;
        }
    }
}

fn gelu_inplace<E: Real>(xs: &mut [E]) {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    for x in xs.iter_mut() {
        let cdf = half * (E::ONE + (*x * inv_sqrt2).erf());
        *x = *x * cdf;
    }
}

fn softmax_rows<E: Real>(xs: &mut [E], width: usize) {
    for row in xs.chunks_mut(width) {
        let mut max = row[0];
        for &x in row.iter() {
            max = max.maximum(x);
        }
        let mut sum = E::ZERO;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// [rows, cols] -> [cols, rows] into `out`.
fn transpose_into<E: Real>(x: &[E], rows: usize, cols: usize, out: &mut [E]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// Multi-head attention over plain buffers; q is [lq, d] (rows already
/// projected inputs), kv is [lk, d]. Writes [lq, d] into `out`.
#[allow(clippy::too_many_arguments)]
fn mha_infer<E: Real>(
    store: &ParamStore<E>,
    ids: &MhaIds,
    q_in: &[E],
    lq: usize,
    kv_in: &[E],
    lk: usize,
    d: usize,
    heads: usize,
    scratch_q: &mut Vec<E>,
    scratch_k: &mut Vec<E>,
    scratch_v: &mut Vec<E>,
    scores: &mut Vec<E>,
    merged: &mut Vec<E>,
    out: &mut [E],
) {
    let dh = d / heads;
    resize(scratch_q, lq * d);
    resize(scratch_k, lk * d);
    resize(scratch_v, lk * d);
    resize(scores, heads * lq * lk);
    resize(merged, lq * d);
    apply_linear(q_in, lq, d, &linear_ref(store, ids.wq, ids.bq), scratch_q);
    apply_linear(kv_in, lk, d, &linear_ref(store, ids.wk, ids.bk), scratch_k);
    apply_linear(kv_in, lk, d, &linear_ref(store, ids.wv, ids.bv), scratch_v);

    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    for h in 0..heads {
        // scores_h = Q_h . K_h^T, both sliced by column block h.
        let s = &mut scores[h * lq * lk..(h + 1) * lq * lk];
        E::gemm(
            lq,
            dh,
            lk,
            &scratch_q[h * dh..],
            d as isize,
            1,
            &scratch_k[h * dh..],
            1,
            d as isize,
            E::ZERO,
            s,
        );
        for x in s.iter_mut() {
            *x = *x * scale;
        }
    }
    softmax_rows(&mut scores[..heads * lq * lk], lk);
    for h in 0..heads {
        // merged_h = probs_h . V_h, written into the head's column block.
        E::gemm_strided_out(
            lq,
            lk,
            dh,
            &scores[h * lq * lk..(h + 1) * lq * lk],
            lk as isize,
            1,
            &scratch_v[h * dh..],
            d as isize,
            1,
            E::ZERO,
            &mut merged[h * dh..],
            d as isize,
            1,
        );
    }
    apply_linear(merged, lq, d, &linear_ref(store, ids.wo, ids.bo), out);
}

/// Temporal MLP along the time axis: [N, t_in, d] -> [N, t_out, d] through
/// hidden width `t_hidden` with GELU between, using w1 [t_in, t_hidden] and
/// w2 [t_hidden, t_out].
#[allow(clippy::too_many_arguments)]
fn temporal_mlp<E: Real>(
    store: &ParamStore<E>,
    w1: PId,
    b1: PId,
    w2: PId,
    b2: PId,
    x: &[E],
    n: usize,
    t_in: usize,
    d: usize,
    perm: &mut Vec<E>,
    hidden: &mut Vec<E>,
    out_perm: &mut Vec<E>,
    out: &mut Vec<E>,
) -> usize {
    let lin1 = linear_ref(store, w1, b1);
    let lin2 = linear_ref(store, w2, b2);
    let (t_hidden, t_out) = (lin1.out_dim, lin2.out_dim);
    resize(perm, n * d * t_in);
    resize(hidden, n * d * t_hidden);
    resize(out_perm, n * d * t_out);
    resize(out, n * t_out * d);
    // [N, t, d] -> [N*d, t]
    for node in 0..n {
        transpose_into(
            &x[node * t_in * d..(node + 1) * t_in * d],
            t_in,
            d,
            &mut perm[node * d * t_in..(node + 1) * d * t_in],
        );
    }
    apply_linear(&perm[..n * d * t_in], n * d, t_in, &lin1, hidden);
    gelu_inplace(&mut hidden[..n * d * t_hidden]);
    apply_linear(&hidden[..n * d * t_hidden], n * d, t_hidden, &lin2, out_perm);
    // [N*d, t_out] -> [N, t_out, d]
    for node in 0..n {
        transpose_into(
            &out_perm[node * d * t_out..(node + 1) * d * t_out],
            d,
            t_out,
            &mut out[node * t_out * d..(node + 1) * t_out * d],
        );
    }
    t_out
}

enum SpatialKind {
    Proxy,
    AllPairs,
}

#[allow(clippy::too_many_arguments)]
fn encode_infer_impl<E: Real>(
    store: &ParamStore<E>,
    layers: &[EncoderLayerIds],
    input: &Tensor<E>,
    heads: usize,
    scratch: &mut InferScratch<E>,
    kind: SpatialKind,
) -> Vec<E> {
    let shape = input.shape();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    resize(&mut scratch.cur, n * t * d);
    scratch.cur[..n * t * d].copy_from_slice(input.data());

    for ids in layers {
        // Compression to p virtual steps.
        let snapshot = scratch.cur[..n * t * d].to_vec();
        let p = temporal_mlp(
            store,
            ids.comp_w1,
            ids.comp_b1,
            ids.comp_w2,
            ids.comp_b2,
            &snapshot,
            n,
            t,
            d,
            &mut scratch.perm,
            &mut scratch.hidden,
            &mut scratch.comp_perm,
            &mut scratch.comp,
        );

        resize(&mut scratch.extracted, n * p * d);
        resize(&mut scratch.tokens, n * d);
        resize(&mut scratch.step_out, n * d);
        resize(&mut scratch.mixed, n * d);
        resize(&mut scratch.ffn_hidden, n * store.get(ids.ffn_w1).value.shape()[1]);
        let m = match kind {
            SpatialKind::Proxy => store.get(ids.proxy).value.shape()[0],
            SpatialKind::AllPairs => n,
        };
        resize(&mut scratch.summary, m * d);

        for j in 0..p {
            for node in 0..n {
                scratch.tokens[node * d..(node + 1) * d]
                    .copy_from_slice(&scratch.comp[(node * p + j) * d..(node * p + j) * d + d]);
            }
            match kind {
                SpatialKind::Proxy => {
                    let proxy = store.get(ids.proxy).value.data().to_vec();
                    let m = proxy.len() / d;
                    let mut summary = std::mem::take(&mut scratch.summary);
                    mha_infer(
                        store,
                        &ids.mha1,
                        &proxy,
                        m,
                        &scratch.tokens[..n * d],
                        n,
                        d,
                        heads,
                        &mut scratch.q,
                        &mut scratch.k,
                        &mut scratch.v,
                        &mut scratch.scores,
                        &mut scratch.perm,
                        &mut summary[..m * d],
                    );
                    let mut mixed = std::mem::take(&mut scratch.mixed);
                    mha_infer(
                        store,
                        &ids.mha2,
                        &scratch.tokens[..n * d],
                        n,
                        &summary[..m * d],
                        m,
                        d,
                        heads,
                        &mut scratch.q,
                        &mut scratch.k,
                        &mut scratch.v,
                        &mut scratch.scores,
                        &mut scratch.perm,
                        &mut mixed[..n * d],
                    );
                    scratch.summary = summary;
                    scratch.mixed = mixed;
                }
                SpatialKind::AllPairs => {
                    let tokens = scratch.tokens[..n * d].to_vec();
                    let mut mixed = std::mem::take(&mut scratch.mixed);
                    mha_infer(
                        store,
                        &ids.mha2,
                        &tokens,
                        n,
                        &tokens,
                        n,
                        d,
                        heads,
                        &mut scratch.q,
                        &mut scratch.k,
                        &mut scratch.v,
                        &mut scratch.scores,
                        &mut scratch.perm,
                        &mut mixed[..n * d],
                    );
                    scratch.mixed = mixed;
                }
            }
            // Residual, feed-forward, residual.
            for i in 0..n * d {
                scratch.mixed[i] += scratch.tokens[i];
            }
            let f_dim = store.get(ids.ffn_w1).value.shape()[1];
            apply_linear(
                &scratch.mixed[..n * d],
                n,
                d,
                &linear_ref(store, ids.ffn_w1, ids.ffn_b1),
                &mut scratch.ffn_hidden,
            );
            gelu_inplace(&mut scratch.ffn_hidden[..n * f_dim]);
            apply_linear(
                &scratch.ffn_hidden[..n * f_dim],
                n,
                f_dim,
                &linear_ref(store, ids.ffn_w2, ids.ffn_b2),
                &mut scratch.step_out,
            );
            for node in 0..n {
                for c in 0..d {
                    scratch.extracted[(node * p + j) * d + c] =
                        scratch.step_out[node * d + c] + scratch.mixed[node * d + c];
                }
            }
        }

        // Decompression back to T steps becomes the next layer's input.
        temporal_mlp(
            store,
            ids.dec_w1,
            ids.dec_b1,
            ids.dec_w2,
            ids.dec_b2,
            &scratch.extracted[..n * p * d].to_vec(),
            n,
            p,
            d,
            &mut scratch.perm,
            &mut scratch.hidden,
            &mut scratch.comp_perm,
            &mut scratch.cur,
        );
    }

    let mut out = scratch.cur[..n * t * d].to_vec();
    for (o, &e) in out.iter_mut().zip(input.data()) {
        *o += e;
    }
    out
}

/// Tape-free forward of the proxy encoder (inference path).
pub fn encode_infer<E: Real>(
    store: &ParamStore<E>,
    layers: &[EncoderLayerIds],
    input: &Tensor<E>,
    heads: usize,
    scratch: &mut InferScratch<E>,
) -> Vec<E> {
    encode_infer_impl(store, layers, input, heads, scratch, SpatialKind::Proxy)
}

/// Tape-free forward of the all-pairs reference.
pub fn naive_encode_infer<E: Real>(
    store: &ParamStore<E>,
    layers: &[NaiveLayerIds],
    input: &Tensor<E>,
    heads: usize,
    scratch: &mut InferScratch<E>,
) -> Vec<E> {
    let inner: Vec<EncoderLayerIds> = layers.iter().map(|l| l.inner.clone()).collect();
    encode_infer_impl(store, &inner, input, heads, scratch, SpatialKind::AllPairs)
}
