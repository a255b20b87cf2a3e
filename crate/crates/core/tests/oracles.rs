//! Independent direct-formula oracles for the attention-based spatial mixer.
//! The oracle below recomputes the two-attention composition with plain
//! nested loops, sharing nothing with the tape implementation.

mod common;

use strep::encoder::{self, EncoderDims};
use strep::param::{ParamStore, Parameter};
use strep::rng::Rng;
use strep::tape::Tape;
use strep::tensor::Tensor;

struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn from_param(p: &Parameter<f64>) -> Mat {
        let s = p.value.shape();
        let (rows, cols) = if s.len() == 2 { (s[0], s[1]) } else { (1, s[0]) };
        Mat {
            rows,
            cols,
            data: p.value.data().to_vec(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(k, j);
            }
            out[i * b.cols + j] = acc;
        }
    }
    Mat {
        rows: a.rows,
        cols: b.cols,
        data: out,
    }
}

fn add_bias(m: &mut Mat, bias: &Mat) {
    for r in 0..m.rows {
        for c in 0..m.cols {
            m.data[r * m.cols + c] += bias.at(0, c);
        }
    }
}

/// Plain multi-head attention: per head, softmax(Q K^T / sqrt(dh)) V, heads
/// concatenated, then the output projection.
#[allow(clippy::too_many_arguments)]
fn naive_mha(
    q_in: &Mat,
    kv_in: &Mat,
    heads: usize,
    wq: &Mat,
    bq: &Mat,
    wk: &Mat,
    bk: &Mat,
    wv: &Mat,
    bv: &Mat,
    wo: &Mat,
    bo: &Mat,
) -> Mat {
    let d = wq.cols;
    let dh = d / heads;
    let mut q = matmul(q_in, wq);
    add_bias(&mut q, bq);
    let mut k = matmul(kv_in, wk);
    add_bias(&mut k, bk);
    let mut v = matmul(kv_in, wv);
    add_bias(&mut v, bv);

    let mut merged = Mat {
        rows: q.rows,
        cols: d,
        data: vec![0.0; q.rows * d],
    };
    for h in 0..heads {
        for i in 0..q.rows {
            // logits over all keys for this query, one head slice
            let mut logits = vec![0.0; k.rows];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                }
                *logit = acc / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, &e) in exps.iter().enumerate() {
                    acc += e / z * v.at(j, h * dh + c);
                }
                merged.data[i * d + h * dh + c] = acc;
            }
        }
    }
    let mut out = matmul(&merged, wo);
    add_bias(&mut out, bo);
    out
}

fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn spatial_extraction_matches_direct_formula() {
    let n = 16;
    let dims = EncoderDims {
        input_len: 12,
        compressed_len: 3,
        proxy_tokens: 4,
        dim: 16,
        heads: 4,
        ffn_factor: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(23);
    let ids = encoder::register_layer(&mut store, "layer0", &dims, &mut rng);

    let e_comp = Tensor::<f64>::randn(&[n, dims.compressed_len, dims.dim], 1.0, &mut Rng::new(5));

    // Tape implementation.
    let mut tape = Tape::new();
    let vars: Vec<_> = store.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let input = tape.leaf(e_comp.clone());
    let got = encoder::spatial_extract(&mut tape, &vars, &ids, input, dims.heads).unwrap();
    let got = tape.data(got);

    // Direct formula, one virtual step at a time.
    let by_name = |name: &str| Mat::from_param(store.by_name(name).unwrap());
    let proxy = by_name("layer0.proxy");
    let m1 = [
        by_name("layer0.mha1.q_w"),
        by_name("layer0.mha1.q_b"),
        by_name("layer0.mha1.k_w"),
        by_name("layer0.mha1.k_b"),
        by_name("layer0.mha1.v_w"),
        by_name("layer0.mha1.v_b"),
        by_name("layer0.mha1.out_w"),
        by_name("layer0.mha1.out_b"),
    ];
    let m2 = [
        by_name("layer0.mha2.q_w"),
        by_name("layer0.mha2.q_b"),
        by_name("layer0.mha2.k_w"),
        by_name("layer0.mha2.k_b"),
        by_name("layer0.mha2.v_w"),
        by_name("layer0.mha2.v_b"),
        by_name("layer0.mha2.out_w"),
        by_name("layer0.mha2.out_b"),
    ];
    let ffn_w1 = by_name("layer0.ffn_w1");
    let ffn_b1 = by_name("layer0.ffn_b1");
    let ffn_w2 = by_name("layer0.ffn_w2");
    let ffn_b2 = by_name("layer0.ffn_b2");

    let d = dims.dim;
    let p = dims.compressed_len;
    let mut worst = 0.0f64;
    for step in 0..p {
        let mut tokens = Mat {
            rows: n,
            cols: d,
            data: vec![0.0; n * d],
        };
        for node in 0..n {
            for c in 0..d {
                tokens.data[node * d + c] = e_comp.data()[(node * p + step) * d + c];
            }
        }
        let summary = naive_mha(
            &proxy, &tokens, dims.heads, &m1[0], &m1[1], &m1[2], &m1[3], &m1[4], &m1[5], &m1[6],
            &m1[7],
        );
        let mut mixed = naive_mha(
            &tokens, &summary, dims.heads, &m2[0], &m2[1], &m2[2], &m2[3], &m2[4], &m2[5], &m2[6],
            &m2[7],
        );
        // Residual, feed-forward, residual.
        for i in 0..n * d {
            mixed.data[i] += tokens.data[i];
        }
        let mut hidden = matmul(&mixed, &ffn_w1);
        add_bias(&mut hidden, &ffn_b1);
        for v in hidden.data.iter_mut() {
            *v = gelu(*v);
        }
        let mut ff = matmul(&hidden, &ffn_w2);
        add_bias(&mut ff, &ffn_b2);
        for i in 0..n * d {
            ff.data[i] += mixed.data[i];
        }
        for node in 0..n {
            for c in 0..d {
                let diff = (ff.data[node * d + c] - got[(node * p + step) * d + c]).abs();
                worst = worst.max(diff);
            }
        }
    }
    assert!(worst < 1e-5, "direct-formula mismatch {worst}");
}

#[test]
fn decompression_mixes_every_time_step() {
    // Finite-difference probe: each compressed input influences all T output
    // steps through the p -> T MLP.
    let dims = EncoderDims {
        input_len: 6,
        compressed_len: 2,
        proxy_tokens: 2,
        dim: 4,
        heads: 2,
        ffn_factor: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let ids = encoder::register_layer(&mut store, "layer0", &dims, &mut Rng::new(3));

    let base = Tensor::<f64>::randn(&[1, 2, 4], 1.0, &mut Rng::new(6));
    let run = |x: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars: Vec<_> = store.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let input = tape.leaf(x.clone());
        let out = encoder::decompress_time(&mut tape, &vars, &ids, input).unwrap();
        tape.data(out).to_vec()
    };
    let y0 = run(&base);
    let mut bumped = base.clone();
    bumped.data_mut()[3] += 1e-3;
    let y1 = run(&bumped);
    // Channel 3 of virtual step 0 must move every one of the 6 output steps
    // in its channel column.
    for t in 0..6 {
        let idx = t * 4 + 3;
        assert!(
            (y1[idx] - y0[idx]).abs() > 1e-12,
            "output step {t} unaffected by compressed input"
        );
    }
}
