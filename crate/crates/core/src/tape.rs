//! Reverse-mode automatic differentiation over a fixed operator set.
//!
//! A [`Tape`] records every forward operation into an append-only list of
//! nodes; [`Tape::backward`] replays it in reverse and accumulates gradients
//! via the chain rule. The tape is rebuilt for every training step — there is
//! no persistent graph.

use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_into_new, Real, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Learned projection weights for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

enum Op<E: Real> {
    Leaf,
    /// Elementwise add with right-aligned broadcasting (extent equal or 1).
    Add(Var, Var),
    Scale(Var, E),
    /// a[..., m, k] x b[k, n].
    Matmul(Var, Var),
    /// a[B, m, k] x b[B, k, n].
    BatchMatmul(Var, Var),
    /// Axis permutation of a rank-3 tensor.
    Permute3(Var, [usize; 3]),
    Reshape(Var),
    /// Concatenate rank-3 tensors along axis 1.
    Concat1(Vec<Var>),
    /// Slice [start, start+len) along axis 1 of a rank-3 tensor.
    Slice1(Var, usize),
    /// Row lookup: table[R, D] indexed by a fixed index list.
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    /// The normal CDF of the input is cached at forward time for backward.
    Gelu(Var, Vec<E>),
    /// Zero-mean unit-variance normalization over the last axis (no affine).
    NormLast(Var),
    /// Softmax over the last axis.
    SoftmaxLast(Var),
    /// Length-preserving 1-D convolution along axis 1 with zero padding.
    Conv1dSame(Var, Var, Var),
    /// Non-overlapping mean pooling along axis 1, remainder dropped.
    AvgPoolTime(Var, usize),
    /// Mean Huber distance; scalar output.
    HuberMean(Var, Var, E),
    /// Elementwise multiply by a fixed keep/scale mask.
    Dropout(Var, Vec<E>),
    /// out[n,t,:] = mask[n,t] ? token : a[n,t,:].
    WhereTimeToken(Var, Var, Vec<bool>),
}

struct Node<E: Real> {
    op: Op<E>,
    shape: Vec<usize>,
    // Shared so views (reshape) alias their parent without copying.
    data: Rc<Vec<E>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<E: Real> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Real> Grads<E> {
    /// Gradient of the loss w.r.t. `var`; `None` if `var` is off the path.
    pub fn get(&self, var: Var) -> Option<&[E]> {
        self.grads[var.0].as_deref()
    }
}

/// Append-only operation recorder.
pub struct Tape<E: Real> {
    nodes: Vec<Node<E>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>) -> Var {
        self.push_shared(op, shape, Rc::new(data))
    }

    fn push_shared(&mut self, op: Op<E>, shape: Vec<usize>, data: Rc<Vec<E>>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        let (shape, data) = value.into_parts();
        self.push(Op::Leaf, shape, data)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn data(&self, var: Var) -> &[E] {
        &self.nodes[var.0].data
    }

    pub fn tensor(&self, var: Var) -> Tensor<E> {
        Tensor::new(self.nodes[var.0].shape.clone(), (*self.nodes[var.0].data).clone())
            .expect("node shape consistent")
    }

    pub fn scalar(&self, var: Var) -> E {
        debug_assert_eq!(self.nodes[var.0].data.len(), 1);
        self.nodes[var.0].data[0]
    }

    // ---- primitives ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .unwrap_or_else(|| panic!("add: incompatible {:?} vs {:?}", self.shape(a), self.shape(b)));
        let da: &[E] = &self.nodes[a.0].data;
        let db: &[E] = &self.nodes[b.0].data;
        let out = if self.nodes[a.0].shape == shape && self.nodes[b.0].shape == shape {
            da.iter().zip(db).map(|(&x, &y)| x + y).collect()
        } else if self.nodes[a.0].shape == shape
            && self.nodes[b.0].shape == [*shape.last().expect("rank >= 1")]
        {
            // Trailing-vector broadcast (bias add).
            let mut out = da.to_vec();
            for row in out.chunks_mut(db.len()) {
                for (o, &y) in row.iter_mut().zip(db) {
                    *o += y;
                }
            }
            out
        } else if self.nodes[a.0].shape == shape
            && shape.len() == 3
            && self.nodes[b.0].shape == shape[1..]
        {
            // Leading-axis broadcast: [N, T, d] + [T, d].
            let mut out = da.to_vec();
            for block in out.chunks_mut(db.len()) {
                for (o, &y) in block.iter_mut().zip(db) {
                    *o += y;
                }
            }
            out
        } else if self.nodes[a.0].shape == shape
            && shape.len() == 3
            && self.nodes[b.0].shape == [shape[0], 1, shape[2]]
        {
            // Middle-axis broadcast: [N, T, d] + [N, 1, d].
            let (t, d) = (shape[1], shape[2]);
            let mut out = da.to_vec();
            for (n, block) in out.chunks_mut(t * d).enumerate() {
                let row = &db[n * d..(n + 1) * d];
                for step in block.chunks_mut(d) {
                    for (o, &y) in step.iter_mut().zip(row) {
                        *o += y;
                    }
                }
            }
            out
        } else {
            let sa = broadcast_strides(self.shape(a), &shape);
            let sb = broadcast_strides(self.shape(b), &shape);
            let mut out = vec![E::ZERO; shape.iter().product()];
            for_each_bcast(&shape, &sa, &sb, |flat, oa, ob| {
                out[flat] = da[oa] + db[ob];
            });
            out
        };
        self.push(Op::Add(a, b), shape, out)
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale(a, c), shape, data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        assert!(ash.len() >= 2 && bsh.len() == 2, "matmul ranks {ash:?} x {bsh:?}");
        let k = ash[ash.len() - 1];
        assert_eq!(k, bsh[0], "matmul inner extents {ash:?} x {bsh:?}");
        let n = bsh[1];
        let rows: usize = ash[..ash.len() - 1].iter().product();
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        let out = gemm_into_new(
            rows,
            k,
            n,
            &self.nodes[a.0].data,
            k as isize,
            1,
            &self.nodes[b.0].data,
            n as isize,
            1,
        );
        self.push(Op::Matmul(a, b), out_shape, out)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0] && ash[2] == bsh[1]);
        let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out: Vec<E> = Vec::with_capacity(bt * m * n);
        for i in 0..bt {
            // Each beta = 0 block fully writes its m x n slice before set_len.
            unsafe {
                E::gemm_ptr(
                    m,
                    k,
                    n,
                    &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    E::ZERO,
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        unsafe { out.set_len(bt * m * n) };
        self.push(Op::BatchMatmul(a, b), vec![bt, m, n], out)
    }

    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Var {
        let ash = self.shape(a).to_vec();
        assert_eq!(ash.len(), 3, "permute3 needs rank 3, got {ash:?}");
        let out_shape = vec![ash[perm[0]], ash[perm[1]], ash[perm[2]]];
        let in_strides = [ash[1] * ash[2], ash[2], 1];
        let mapped = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
        let mut out = vec![E::ZERO; ash.iter().product()];
        {
            let src = &self.nodes[a.0].data;
            let mut flat = 0;
            for i0 in 0..out_shape[0] {
                for i1 in 0..out_shape[1] {
                    let base = i0 * mapped[0] + i1 * mapped[1];
                    for i2 in 0..out_shape[2] {
                        out[flat] = src[base + i2 * mapped[2]];
                        flat += 1;
                    }
                }
            }
        }
        self.push(Op::Permute3(a, perm), out_shape, out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].data.len(),
            "reshape to {shape:?}"
        );
        let data = Rc::clone(&self.nodes[a.0].data);
        self.push_shared(Op::Reshape(a), shape.to_vec(), data)
    }

    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 3);
        let (n, d) = (first[0], first[2]);
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 3 && s[0] == n && s[2] == d, "concat1 mismatch {s:?}");
        }
        let mut out = vec![E::ZERO; n * total * d];
        for row in 0..n {
            let mut t_off = 0;
            for &p in parts {
                let tp = self.shape(p)[1];
                let src = &self.nodes[p.0].data[row * tp * d..(row + 1) * tp * d];
                let dst = (row * total + t_off) * d;
                out[dst..dst + tp * d].copy_from_slice(src);
                t_off += tp;
            }
        }
        self.push(Op::Concat1(parts.to_vec()), vec![n, total, d], out)
    }

    pub fn slice1(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(ash.len() == 3 && start + len <= ash[1], "slice1 {start}+{len} of {ash:?}");
        let (n, t, d) = (ash[0], ash[1], ash[2]);
        let mut out = vec![E::ZERO; n * len * d];
        for row in 0..n {
            let src = (row * t + start) * d;
            out[row * len * d..(row + 1) * len * d]
                .copy_from_slice(&self.nodes[a.0].data[src..src + len * d]);
        }
        self.push(Op::Slice1(a, start), vec![n, len, d], out)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tsh = self.shape(table).to_vec();
        assert_eq!(tsh.len(), 2);
        let d = tsh[1];
        for &i in idx {
            assert!(i < tsh[0], "gather_rows index {i} out of {}", tsh[0]);
        }
        let mut out = vec![E::ZERO; idx.len() * d];
        for (row, &i) in idx.iter().enumerate() {
            out[row * d..(row + 1) * d]
                .copy_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        self.push(Op::GatherRows(table, idx.to_vec()), vec![idx.len(), d], out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x.maximum(E::ZERO))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Relu(a), shape, data)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let cdf: Vec<E> = self.nodes[a.0].data.iter().map(|&x| norm_cdf(x)).collect();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&cdf)
            .map(|(&x, &c)| x * c)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Gelu(a, cdf), shape, data)
    }

    /// Normalize each last-axis row to zero mean and unit variance.
    pub fn norm_last(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let width = *shape.last().expect("rank >= 1");
        let mut out = (*self.nodes[a.0].data).clone();
        for row in out.chunks_mut(width) {
            let inv_w = E::from_f64(1.0 / width as f64);
            let mut mean = E::ZERO;
            for &x in row.iter() {
                mean += x;
            }
            mean = mean * inv_w;
            let mut var = E::ZERO;
            for &x in row.iter() {
                var += (x - mean) * (x - mean);
            }
            let inv_std = E::ONE / (var * inv_w + E::from_f64(NORM_EPS)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        }
        self.push(Op::NormLast(a), shape, out)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let width = *shape.last().expect("softmax needs rank >= 1");
        let mut out = (*self.nodes[a.0].data).clone();
        for row in out.chunks_mut(width) {
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
        self.push(Op::SoftmaxLast(a), shape, out)
    }

    pub fn avg_pool_time_raw(&mut self, a: Var, k: usize) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(ash.len() == 3 && k >= 1);
        let (n, t, c) = (ash[0], ash[1], ash[2]);
        let t_out = t / k;
        let inv = E::from_f64(1.0 / k as f64);
        let mut out = vec![E::ZERO; n * t_out * c];
        {
            let src = &self.nodes[a.0].data;
            for row in 0..n {
                for to in 0..t_out {
                    for ti in 0..k {
                        let s = (row * t + to * k + ti) * c;
                        let d = (row * t_out + to) * c;
                        for ch in 0..c {
                            out[d + ch] += src[s + ch];
                        }
                    }
                }
            }
            for x in out.iter_mut() {
                *x = *x * inv;
            }
        }
        self.push(Op::AvgPoolTime(a, k), vec![n, t_out, c], out)
    }

    fn huber_mean(&mut self, a: Var, b: Var, delta: E) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "huber shapes");
        let half = E::from_f64(0.5);
        let mut acc = 0.0f64;
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..da.len() {
                let e = da[i] - db[i];
                let ae = e.abs();
                let v = if ae <= delta {
                    half * e * e
                } else {
                    delta * (ae - half * delta)
                };
                acc += v.to_f64();
            }
            acc /= da.len() as f64;
        }
        self.push(Op::HuberMean(a, b, delta), vec![1], vec![E::from_f64(acc)])
    }

    fn dropout_mask(&mut self, a: Var, rate: f64, seed: u64) -> Var {
        let mut rng = Rng::new(seed);
        let keep_scale = E::from_f64(1.0 / (1.0 - rate));
        let mult: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .map(|_| {
                if rng.next_f64() < rate {
                    E::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&mult)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Dropout(a, mult), shape, data)
    }

    /// Replace whole time rows by a learned token where `mask` is true.
    pub fn where_time_token(&mut self, a: Var, token: Var, mask: &[bool]) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(ash.len() == 3 && self.shape(token) == [ash[2]]);
        assert_eq!(mask.len(), ash[0] * ash[1]);
        let d = ash[2];
        let mut out = (*self.nodes[a.0].data).clone();
        {
            let tok = &self.nodes[token.0].data;
            for (pos, &masked) in mask.iter().enumerate() {
                if masked {
                    out[pos * d..(pos + 1) * d].copy_from_slice(tok);
                }
            }
        }
        self.push(Op::WhereTimeToken(a, token, mask.to_vec()), ash, out)
    }

    // ---- operator surface ------------------------------------------------

    /// y[..., j] = sum_i x[..., i] W[i, j] + b[j].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err!("linear: x {xs:?} vs W {ws:?}"));
        }
        if bs != [ws[1]] {
            return Err(shape_err!("linear: bias {bs:?} vs W {ws:?}"));
        }
        let prod = self.matmul(x, w);
        Ok(self.add(prod, b))
    }

    /// Scaled dot-product attention with per-block q/k/v/output projections.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        weights: &MhaVars,
        heads: usize,
    ) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
            return Err(shape_err!("attention: q {qs:?} k {ks:?} v {vs:?}"));
        }
        let d = qs[1];
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("attention: dim {d} not divisible by {heads} heads"));
        }
        let (lq, lk, dh) = (qs[0], ks[0], d / heads);

        let qp = self.linear(q, weights.wq, weights.bq)?;
        let kp = self.linear(k, weights.wk, weights.bk)?;
        let vp = self.linear(v, weights.wv, weights.bv)?;

        let qh = self.reshape(qp, &[lq, heads, dh]);
        let qh = self.permute3(qh, [1, 0, 2]); // [h, Lq, dh]
        let kh = self.reshape(kp, &[lk, heads, dh]);
        let kt = self.permute3(kh, [1, 2, 0]); // [h, dh, Lk]
        let vh = self.reshape(vp, &[lk, heads, dh]);
        let vh = self.permute3(vh, [1, 0, 2]); // [h, Lk, dh]

        let scores = self.batch_matmul(qh, kt);
        let scores = self.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
        let probs = self.softmax_last(scores);
        let mixed = self.batch_matmul(probs, vh); // [h, Lq, dh]
        let mixed = self.permute3(mixed, [1, 0, 2]);
        let mixed = self.reshape(mixed, &[lq, d]);
        self.linear(mixed, weights.wo, weights.bo)
    }

    /// Length-preserving convolution along the time axis; odd kernel only.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if xs.len() != 3 || ks.len() != 3 {
            return Err(shape_err!("conv1d: x {xs:?} kernel {ks:?}"));
        }
        if ks[0] % 2 == 0 {
            return Err(shape_err!("conv1d: kernel width {} must be odd", ks[0]));
        }
        if ks[1] != xs[2] || bs != [ks[2]] {
            return Err(shape_err!("conv1d: x {xs:?} kernel {ks:?} bias {bs:?}"));
        }
        let (n, t, din, width, dout) = (xs[0], xs[1], xs[2], ks[0], ks[2]);
        let pad = (width - 1) / 2;
        let mut out = vec![E::ZERO; n * t * dout];
        {
            let bias_data = &self.nodes[bias.0].data;
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias_data);
            }
        }
        let mut shifted = vec![E::ZERO; n * t * din];
        for tap in 0..width {
            shift_rows(
                &self.nodes[x.0].data,
                &mut shifted,
                n,
                t,
                din,
                tap as isize - pad as isize,
            );
            E::gemm(
                n * t,
                din,
                dout,
                &shifted,
                din as isize,
                1,
                &self.nodes[kernel.0].data[tap * din * dout..(tap + 1) * din * dout],
                dout as isize,
                1,
                E::ONE,
                &mut out,
            );
        }
        Ok(self.push(Op::Conv1dSame(x, kernel, bias), vec![n, t, dout], out))
    }

    /// Mean over non-overlapping windows of `k` steps; remainder dropped.
    pub fn avg_pool_time(&mut self, a: Var, k: usize) -> Result<Var> {
        if k < 1 {
            return Err(shape_err!("avg_pool_time: k must be >= 1"));
        }
        if self.shape(a).len() != 3 {
            return Err(shape_err!("avg_pool_time: rank 3 expected, got {:?}", self.shape(a)));
        }
        Ok(self.avg_pool_time_raw(a, k))
    }

    /// Mean elementwise Huber distance between equal-shape tensors.
    pub fn huber_loss(&mut self, a: Var, b: Var, delta: E) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "huber: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self.huber_mean(a, b, delta))
    }

    /// Inverted-scale dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err!("dropout: rate {rate} outside [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        Ok(self.dropout_mask(a, rate, seed))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<E>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(shape_err!(
                "backward on non-scalar of shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Inputs always precede outputs, so grads[i] is final here; it is
            // moved out, leaving only leaf gradients in the result.
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!("skipped above"),
                Op::Add(a, b) => {
                    for input in [a, b] {
                        let in_shape = &self.nodes[input.0].shape;
                        if *in_shape == node.shape {
                            let gi = ensure(&mut grads, self, *input);
                            for (dst, &src) in gi.iter_mut().zip(&g) {
                                *dst += src;
                            }
                        } else if *self.nodes[input.0].shape
                            == [*node.shape.last().expect("rank >= 1")]
                        {
                            // Trailing-vector broadcast.
                            let width = self.nodes[input.0].data.len();
                            let gi = ensure(&mut grads, self, *input);
                            for row in g.chunks(width) {
                                for (dst, &src) in gi.iter_mut().zip(row) {
                                    *dst += src;
                                }
                            }
                        } else if node.shape.len() == 3
                            && self.nodes[input.0].shape == node.shape[1..]
                        {
                            // Leading-axis broadcast.
                            let width = self.nodes[input.0].data.len();
                            let gi = ensure(&mut grads, self, *input);
                            for block in g.chunks(width) {
                                for (dst, &src) in gi.iter_mut().zip(block) {
                                    *dst += src;
                                }
                            }
                        } else if node.shape.len() == 3
                            && *self.nodes[input.0].shape
                                == [node.shape[0], 1, node.shape[2]]
                        {
                            // Middle-axis broadcast.
                            let (t, d) = (node.shape[1], node.shape[2]);
                            let gi = ensure(&mut grads, self, *input);
                            for (n, block) in g.chunks(t * d).enumerate() {
                                let row = &mut gi[n * d..(n + 1) * d];
                                for step in block.chunks(d) {
                                    for (dst, &src) in row.iter_mut().zip(step) {
                                        *dst += src;
                                    }
                                }
                            }
                        } else {
                            let s = broadcast_strides(in_shape, &node.shape);
                            let gi = ensure(&mut grads, self, *input);
                            for_each_bcast(&node.shape, &s, &s, |flat, off, _| {
                                gi[off] += g[flat];
                            });
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let ga = ensure(&mut grads, self, *a);
                    for (gi, &go) in ga.iter_mut().zip(&g) {
                        *gi += go * c;
                    }
                }
                Op::Matmul(a, b) => {
                    let ash = self.shape(*a);
                    let k = ash[ash.len() - 1];
                    let rows: usize = ash[..ash.len() - 1].iter().product();
                    let n = self.shape(*b)[1];
                    {
                        let bd = &self.nodes[b.0].data;
                        let ga = ensure(&mut grads, self, *a);
                        // dA = dC . B^T
                        E::gemm(rows, n, k, &g, n as isize, 1, bd, 1, n as isize, E::ONE, ga);
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let gb = ensure(&mut grads, self, *b);
                        // dB = A^T . dC
                        E::gemm(k, rows, n, ad, 1, k as isize, &g, n as isize, 1, E::ONE, gb);
                    }
                }
                Op::BatchMatmul(a, b) => {
                    let ash = self.shape(*a).to_vec();
                    let (bt, m, k) = (ash[0], ash[1], ash[2]);
                    let n = self.shape(*b)[2];
                    {
                        let bd = &self.nodes[b.0].data;
                        let ga = ensure(&mut grads, self, *a);
                        for t in 0..bt {
                            E::gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                n as isize,
                                1,
                                &bd[t * k * n..(t + 1) * k * n],
                                1,
                                n as isize,
                                E::ONE,
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let gb = ensure(&mut grads, self, *b);
                        for t in 0..bt {
                            E::gemm(
                                k,
                                m,
                                n,
                                &ad[t * m * k..(t + 1) * m * k],
                                1,
                                k as isize,
                                &g[t * m * n..(t + 1) * m * n],
                                n as isize,
                                1,
                                E::ONE,
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                    }
                }
                Op::Permute3(a, perm) => {
                    let ash = self.shape(*a).to_vec();
                    let in_strides = [ash[1] * ash[2], ash[2], 1];
                    let mapped = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
                    let ga = ensure(&mut grads, self, *a);
                    let mut flat = 0;
                    for i0 in 0..node.shape[0] {
                        for i1 in 0..node.shape[1] {
                            let base = i0 * mapped[0] + i1 * mapped[1];
                            for i2 in 0..node.shape[2] {
                                ga[base + i2 * mapped[2]] += g[flat];
                                flat += 1;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let ga = ensure(&mut grads, self, *a);
                    for (gi, &go) in ga.iter_mut().zip(&g) {
                        *gi += go;
                    }
                }
                Op::Concat1(parts) => {
                    let (n, total, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let mut t_off = 0;
                    for &p in parts {
                        let tp = self.shape(p)[1];
                        let gp = ensure(&mut grads, self, p);
                        for row in 0..n {
                            let src = (row * total + t_off) * d;
                            let dst = row * tp * d;
                            for j in 0..tp * d {
                                gp[dst + j] += g[src + j];
                            }
                        }
                        t_off += tp;
                    }
                }
                Op::Slice1(a, start) => {
                    let ash = self.shape(*a).to_vec();
                    let (t, d) = (ash[1], ash[2]);
                    let len = node.shape[1];
                    let ga = ensure(&mut grads, self, *a);
                    for row in 0..node.shape[0] {
                        let dst = (row * t + start) * d;
                        let src = row * len * d;
                        for j in 0..len * d {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
                Op::GatherRows(table, idx) => {
                    let d = node.shape[1];
                    let gt = ensure(&mut grads, self, *table);
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[row * d + j];
                        }
                    }
                }
                Op::Relu(a) => {
                    let src = &self.nodes[a.0].data;
                    let ga = ensure(&mut grads, self, *a);
                    for ((gi, &go), &x) in ga.iter_mut().zip(&g).zip(src.iter()) {
                        if x > E::ZERO {
                            *gi += go;
                        }
                    }
                }
                Op::Gelu(a, cdf) => {
                    let src = &self.nodes[a.0].data;
                    let ga = ensure(&mut grads, self, *a);
                    for (((gi, &go), &x), &c) in ga.iter_mut().zip(&g).zip(src.iter()).zip(cdf) {
                        *gi += go * (c + x * norm_pdf(x));
                    }
                }
                Op::NormLast(a) => {
                    let width = *node.shape.last().expect("rank >= 1");
                    let y = &node.data;
                    let src = &self.nodes[a.0].data;
                    let ga = ensure(&mut grads, self, *a);
                    let inv_w = E::from_f64(1.0 / width as f64);
                    for row in 0..y.len() / width {
                        let off = row * width;
                        let mut mean = E::ZERO;
                        for j in 0..width {
                            mean += src[off + j];
                        }
                        mean = mean * inv_w;
                        let mut var = E::ZERO;
                        for j in 0..width {
                            var += (src[off + j] - mean) * (src[off + j] - mean);
                        }
                        let inv_std = E::ONE / (var * inv_w + E::from_f64(NORM_EPS)).sqrt();
                        let mut g_mean = E::ZERO;
                        let mut gy_mean = E::ZERO;
                        for j in 0..width {
                            g_mean += g[off + j];
                            gy_mean += g[off + j] * y[off + j];
                        }
                        g_mean = g_mean * inv_w;
                        gy_mean = gy_mean * inv_w;
                        for j in 0..width {
                            ga[off + j] +=
                                (g[off + j] - g_mean - y[off + j] * gy_mean) * inv_std;
                        }
                    }
                }
                Op::SoftmaxLast(a) => {
                    let width = *node.shape.last().expect("rank >= 1");
                    let y = &node.data;
                    let ga = ensure(&mut grads, self, *a);
                    for row in 0..y.len() / width {
                        let off = row * width;
                        let mut dot = E::ZERO;
                        for j in 0..width {
                            dot += g[off + j] * y[off + j];
                        }
                        for j in 0..width {
                            ga[off + j] += y[off + j] * (g[off + j] - dot);
                        }
                    }
                }
                Op::Conv1dSame(x, kernel, bias) => {
                    let xs = self.shape(*x).to_vec();
                    let ks = self.shape(*kernel).to_vec();
                    let (n, t, din, width, dout) = (xs[0], xs[1], xs[2], ks[0], ks[2]);
                    let pad = (width - 1) / 2;
                    {
                        let gb = ensure(&mut grads, self, *bias);
                        for row in g.chunks(dout) {
                            for (gi, &go) in gb.iter_mut().zip(row) {
                                *gi += go;
                            }
                        }
                    }
                    let mut shifted = vec![E::ZERO; n * t * din];
                    for tap in 0..width {
                        let off = tap as isize - pad as isize;
                        shift_rows(&self.nodes[x.0].data, &mut shifted, n, t, din, off);
                        {
                            let gk = ensure(&mut grads, self, *kernel);
                            // dK_tap = shifted^T . dOut
                            E::gemm(
                                din,
                                n * t,
                                dout,
                                &shifted,
                                1,
                                din as isize,
                                &g,
                                dout as isize,
                                1,
                                E::ONE,
                                &mut gk[tap * din * dout..(tap + 1) * din * dout],
                            );
                        }
                        // out[t] reads x[t+off], so dX[t+off] += dOut[t] . K_tap^T.
                        let prod = gemm_into_new(
                            n * t,
                            dout,
                            din,
                            &g,
                            dout as isize,
                            1,
                            &self.nodes[kernel.0].data[tap * din * dout..(tap + 1) * din * dout],
                            1,
                            dout as isize,
                        );
                        let gx = ensure(&mut grads, self, *x);
                        add_shifted_rows(&prod, gx, n, t, din, off);
                    }
                }
                Op::AvgPoolTime(a, k) => {
                    let ash = self.shape(*a).to_vec();
                    let (t, c) = (ash[1], ash[2]);
                    let (n, t_out) = (node.shape[0], node.shape[1]);
                    let inv = E::from_f64(1.0 / *k as f64);
                    let ga = ensure(&mut grads, self, *a);
                    for row in 0..n {
                        for to in 0..t_out {
                            for ti in 0..*k {
                                let d = (row * t_out + to) * c;
                                let s = (row * t + to * k + ti) * c;
                                for ch in 0..c {
                                    ga[s + ch] += g[d + ch] * inv;
                                }
                            }
                        }
                    }
                }
                Op::HuberMean(a, b, delta) => {
                    let delta = *delta;
                    let inv_n = E::from_f64(1.0 / self.nodes[a.0].data.len() as f64);
                    let g0 = g[0];
                    {
                        let da = &self.nodes[a.0].data;
                        let db = &self.nodes[b.0].data;
                        let ga = ensure(&mut grads, self, *a);
                        for i in 0..da.len() {
                            let e = clamp_sym(da[i] - db[i], delta);
                            ga[i] += g0 * e * inv_n;
                        }
                    }
                    {
                        let da = &self.nodes[a.0].data;
                        let db = &self.nodes[b.0].data;
                        let gb = ensure(&mut grads, self, *b);
                        for i in 0..da.len() {
                            let e = clamp_sym(da[i] - db[i], delta);
                            gb[i] += -(g0 * e * inv_n);
                        }
                    }
                }
                Op::Dropout(a, mult) => {
                    let ga = ensure(&mut grads, self, *a);
                    for ((gi, &go), &m) in ga.iter_mut().zip(&g).zip(mult) {
                        *gi += go * m;
                    }
                }
                Op::WhereTimeToken(a, token, mask) => {
                    let d = node.shape[2];
                    {
                        let ga = ensure(&mut grads, self, *a);
                        for (pos, &masked) in mask.iter().enumerate() {
                            if !masked {
                                for j in 0..d {
                                    ga[pos * d + j] += g[pos * d + j];
                                }
                            }
                        }
                    }
                    {
                        let gt = ensure(&mut grads, self, *token);
                        for (pos, &masked) in mask.iter().enumerate() {
                            if masked {
                                for j in 0..d {
                                    gt[j] += g[pos * d + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn ensure<'g, E: Real>(
    grads: &'g mut [Option<Vec<E>>],
    tape: &Tape<E>,
    var: Var,
) -> &'g mut Vec<E> {
    let slot = &mut grads[var.0];
    if slot.is_none() {
        *slot = Some(vec![E::ZERO; tape.nodes[var.0].data.len()]);
    }
    slot.as_mut().expect("just filled")
}

fn clamp_sym<E: Real>(x: E, bound: E) -> E {
    if x > bound {
        bound
    } else if x < -bound {
        -bound
    } else {
        x
    }
}

fn norm_cdf<E: Real>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (E::ONE + (x * inv_sqrt2).erf())
}

fn norm_pdf<E: Real>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (-(half * x * x)).exp() * inv_sqrt_2pi
}

/// dst[n, t, :] = src[n, t + off, :], zero where out of range.
fn shift_rows<E: Real>(src: &[E], dst: &mut [E], n: usize, t: usize, d: usize, off: isize) {
    dst.fill(E::ZERO);
    for row in 0..n {
        for ti in 0..t {
            let s = ti as isize + off;
            if s < 0 || s >= t as isize {
                continue;
            }
            let sp = (row * t + s as usize) * d;
            let dp = (row * t + ti) * d;
            dst[dp..dp + d].copy_from_slice(&src[sp..sp + d]);
        }
    }
}

/// dst[n, t + off, :] += src[n, t, :] for in-range targets.
fn add_shifted_rows<E: Real>(src: &[E], dst: &mut [E], n: usize, t: usize, d: usize, off: isize) {
    for row in 0..n {
        for ti in 0..t {
            let s = ti as isize + off;
            if s < 0 || s >= t as isize {
                continue;
            }
            let dp = (row * t + s as usize) * d;
            let sp = (row * t + ti) * d;
            for j in 0..d {
                dst[dp + j] += src[sp + j];
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ea != eb && ea != 1 && eb != 1 {
            return None;
        }
        out[i] = ea.max(eb);
    }
    Some(out)
}

/// Per-axis step sizes of `shape` aligned into `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_bcast(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            oa -= sa[axis] * shape[axis];
            ob -= sb[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<E: Real>(shape: &[usize], vals: &[f64]) -> Tensor<E> {
        Tensor::new(shape.to_vec(), vals.iter().map(|&x| E::from_f64(x)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w_id = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b0 = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w_id, b0).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0]);

        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
        let b = tape.leaf(t(&[2], &[1.0, 1.0]));
        let y2 = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data(y2), &[4.0, 3.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3, 2], &[0.0; 6]));
        let w = tape.leaf(t(&[2, 2], &[3.0, -1.0, 2.0, 5.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.0, 1.0, -10.0]));
        let y = tape.gelu(x);
        let out = tape.data(y);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.841345).abs() < 1e-5);
        assert!(out[2].abs() < 1e-8);
    }

    #[test]
    fn relu_elementwise() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 4.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn avg_pool_hand_case_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let pooled = tape.avg_pool_time(x, 2).unwrap();
        assert_eq!(tape.shape(pooled), &[1, 2, 1]);
        assert_eq!(tape.data(pooled), &[1.5, 3.5]);
        let same = tape.avg_pool_time(x, 1).unwrap();
        assert_eq!(tape.data(same), tape.data(x));
        // T=24 pooled by 16 leaves a single window.
        let long = tape.leaf(Tensor::zeros(&[2, 24, 1]));
        let one = tape.avg_pool_time(long, 16).unwrap();
        assert_eq!(tape.shape(one), &[2, 1, 1]);
        assert!(tape.avg_pool_time(x, 0).is_err());
    }

    #[test]
    fn huber_branches() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1], &[0.5]));
        let z = tape.leaf(t(&[1], &[0.0]));
        let l = tape.huber_loss(a, z, 1.0).unwrap();
        assert!((tape.scalar(l) - 0.125).abs() < 1e-12);

        let b = tape.leaf(t(&[1], &[2.0]));
        let l2 = tape.huber_loss(b, z, 1.0).unwrap();
        assert!((tape.scalar(l2) - 1.5).abs() < 1e-12);

        let l3 = tape.huber_loss(a, a, 1.0).unwrap();
        assert_eq!(tape.scalar(l3), 0.0);

        let bad = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(tape.huber_loss(a, bad, 1.0).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_unbiasedness() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[100_000], 1.0));
        assert_eq!(tape.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, 1).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, 1).is_err());
        let y = tape.dropout(x, 0.5, true, 42).unwrap();
        let mean = tape.data(y).iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "dropout mean {mean}");
    }

    #[test]
    fn attention_single_key_matches_projected_value() {
        let mut tape = Tape::<f64>::new();
        let d = 4;
        let eye = {
            let mut v = vec![0.0; d * d];
            for i in 0..d {
                v[i * d + i] = 1.0;
            }
            v
        };
        let zeros = vec![0.0; d];
        let wq = tape.leaf(t(&[d, d], &eye));
        let b = tape.leaf(t(&[d], &zeros));
        let weights = MhaVars {
            wq,
            bq: b,
            wk: wq,
            bk: b,
            wv: wq,
            bv: b,
            wo: wq,
            bo: b,
        };
        let q = tape.leaf(t(&[2, 4], &[0.3, -1.0, 2.0, 0.1, 5.0, 0.0, -0.2, 1.0]));
        let kv = tape.leaf(t(&[1, 4], &[0.5, 1.5, -2.0, 0.7]));
        let out = tape.multi_head_attention(q, kv, kv, &weights, 2).unwrap();
        // One key: softmax weight is 1, both queries return the value row.
        for row in 0..2 {
            for j in 0..4 {
                assert!((tape.data(out)[row * 4 + j] - tape.data(kv)[j]).abs() < 1e-12);
            }
        }
        assert!(tape.multi_head_attention(q, kv, kv, &weights, 3).is_err());
    }

    #[test]
    fn attention_with_identical_keys_collapses_queries() {
        let d = 4;
        let mut rng = crate::rng::Rng::new(12);
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, rng: &mut crate::rng::Rng, shape: &[usize]| {
            tape.leaf(Tensor::randn(shape, 1.0, rng))
        };
        let weights = MhaVars {
            wq: mk(&mut tape, &mut rng, &[d, d]),
            bq: mk(&mut tape, &mut rng, &[d]),
            wk: mk(&mut tape, &mut rng, &[d, d]),
            bk: mk(&mut tape, &mut rng, &[d]),
            wv: mk(&mut tape, &mut rng, &[d, d]),
            bv: mk(&mut tape, &mut rng, &[d]),
            wo: mk(&mut tape, &mut rng, &[d, d]),
            bo: mk(&mut tape, &mut rng, &[d]),
        };
        let q = mk(&mut tape, &mut rng, &[3, d]);
        // Three identical key/value rows.
        let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let tiled: Vec<f64> = row.iter().cycle().take(3 * d).copied().collect();
        let kv = tape.leaf(Tensor::new(vec![3, d], tiled).unwrap());
        let out = tape.multi_head_attention(q, kv, kv, &weights, 2).unwrap();
        let data = tape.data(out);
        for query in 1..3 {
            for j in 0..d {
                assert!(
                    (data[query * d + j] - data[j]).abs() < 1e-12,
                    "query {query} differs at {j}"
                );
            }
        }
    }

    #[test]
    fn attention_matches_naive_softmax_oracle() {
        // heads=1, identity projections: out = softmax(q k^T / sqrt(d)) v.
        let d = 3;
        let qv = [0.2, -0.4, 1.0, 0.9, 0.1, -0.3];
        let kv = [0.5, 0.3, -0.2, -0.7, 1.2, 0.4, 0.0, -1.0, 0.8];
        let vv = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 0.3, 0.3, 0.3];
        let mut oracle = [[0.0f64; 3]; 2];
        for i in 0..2 {
            let mut logits = [0.0f64; 3];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += qv[i * d + c] * kv[j * d + c];
                }
                *logit = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, &e) in exps.iter().enumerate() {
                for c in 0..d {
                    oracle[i][c] += e / z * vv[j * d + c];
                }
            }
        }

        let mut tape = Tape::<f64>::new();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let w = tape.leaf(t(&[3, 3], &eye));
        let b = tape.leaf(t(&[3], &[0.0; 3]));
        let weights = MhaVars {
            wq: w,
            bq: b,
            wk: w,
            bk: b,
            wv: w,
            bv: b,
            wo: w,
            bo: b,
        };
        let q = tape.leaf(t(&[2, 3], &qv));
        let k = tape.leaf(t(&[3, 3], &kv));
        let v = tape.leaf(t(&[3, 3], &vv));
        let out = tape.multi_head_attention(q, k, v, &weights, 1).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                assert!((tape.data(out)[i * 3 + c] - oracle[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv1d_rejects_even_kernel_and_keeps_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 12, 3], 1.0));
        let k = tape.leaf(Tensor::full(&[2, 3, 3], 0.1));
        let bias = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.conv1d_same(x, k, bias).is_err());
        let k3 = tape.leaf(Tensor::full(&[3, 3, 3], 0.1));
        let y = tape.conv1d_same(x, k3, bias).unwrap();
        assert_eq!(tape.shape(y), &[2, 12, 3]);
        // Constant input: all interior steps equal.
        let data = tape.data(y);
        for ti in 1..10 {
            for c in 0..3 {
                assert!((data[ti * 3 + c] - data[3 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_pointwise_equals_linear_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -1.0]));
        let kern = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let bias = tape.leaf(t(&[2], &[0.5, -0.5]));
        let y = tape.conv1d_same(x, kern, bias).unwrap();
        let w = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2], &[0.5, -0.5]));
        let y2 = tape.linear(x, w, b).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_unreached() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2], &[5.0, 5.0]));
        let y = tape.scale(x, 3.0);
        assert!(tape.backward(y).is_err());
        let z = tape.leaf(t(&[2], &[0.0, 0.0]));
        let l = tape.huber_loss(y, z, 10.0).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(unused).is_none());
        // d/dx of mean(0.5 (3x)^2) = 9x / n
        let gx = grads.get(x).unwrap();
        assert!((gx[0] - 9.0 * 1.0 / 2.0).abs() < 1e-12);
        assert!((gx[1] - 9.0 * 2.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_matches_broadcast_of_x() {
        // loss = sum(W . x) via huber against zero with huge delta is awkward;
        // use mean-square through huber quadratic branch instead: check
        // d sum(x W)/dW = outer structure by finite reasoning on a 1x2 case.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[2.0, -1.5]));
        let w = tape.leaf(t(&[2, 1], &[0.0, 0.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.linear(x, w, b).unwrap();
        let target = tape.leaf(t(&[1, 1], &[-1.0]));
        let l = tape.huber_loss(y, target, 100.0).unwrap();
        let grads = tape.backward(l).unwrap();
        // loss = 0.5 (xW - t)^2, dW = (xW - t) x^T = (0 + 1) * [2, -1.5]
        let gw = grads.get(w).unwrap();
        assert!((gw[0] - 2.0).abs() < 1e-12);
        assert!((gw[1] + 1.5).abs() < 1e-12);
    }
}
