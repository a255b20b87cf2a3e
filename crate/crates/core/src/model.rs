//! Full model: parameter registry, training forward pass, and the inference
//! path that produces representations.

use crate::embedding::{self, EmbeddingDims, EmbeddingIds, MaskSpec};
use crate::encoder::{self, EncoderDims, EncoderLayerIds};
use crate::error::{config_err, shape_err, Result};
use crate::heads::{self, HeadDims, LossWeights, PredIds, ReconIds};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters plus the dataset extents the tables depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub node_count: usize,
    pub channels: usize,
    pub steps_per_day: usize,
    pub input_len: usize,   // T
    pub target_len: usize,  // F
    pub dim: usize,         // d
    pub compressed_len: usize, // p
    pub proxy_tokens: usize,   // m
    pub layers: usize,      // L
    pub heads: usize,
    pub ffn_factor: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    /// Normalize residual-stream inputs inside the spatial blocks
    /// (experimental; off by default — the blocks are purely residual).
    pub pre_norm: bool,
    /// Representation falls back to the embedding output (encoder skipped).
    pub bypass_encoder: bool,
    pub use_recon: bool,
    pub use_pred: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.compressed_len >= self.input_len {
            return Err(config_err!(
                "compressed length {} must be below input length {}",
                self.compressed_len,
                self.input_len
            ));
        }
        if self.proxy_tokens == 0 || self.layers == 0 {
            return Err(config_err!("proxy_tokens and layers must be at least 1"));
        }
        if self.dim % self.heads != 0 {
            return Err(config_err!(
                "dim {} not divisible by {} heads",
                self.dim,
                self.heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(config_err!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !self.use_recon && !self.use_pred {
            return Err(config_err!("at least one decoder must be enabled"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// One training window in tape precision.
#[derive(Debug, Clone)]
pub struct WindowTensors<E: Real> {
    pub x_curr: Tensor<E>, // [N, T, C]
    pub x_tgt: Tensor<E>,  // [N, F, C]
    pub tod_idx: Vec<usize>,
    pub dow_idx: Vec<usize>,
}

/// Per-pass loss settings.
#[derive(Debug, Clone)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub kernels: Vec<usize>,
    pub huber_delta: f64,
    pub use_multiscale: bool,
    /// Restrict the reconstruction term to masked positions (default keeps
    /// all T positions; this is the optional narrow mode).
    pub recon_masked_only: bool,
}

pub struct Model<E: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub embed: EmbeddingIds,
    pub layers: Vec<EncoderLayerIds>,
    pub recon: Option<ReconIds>,
    pub pred: Option<PredIds>,
}

/// Scalar loss values extracted from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub pred: f64,
    pub multiscale: f64,
}

/// Tape handles from one training forward pass.
pub struct ForwardOut {
    pub total: Var,
    pub recon: Var,
    pub pred: Var,
    pub multiscale: Var,
}

impl<E: Real> Model<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let embed = embedding::register_embedding(
            &mut store,
            &EmbeddingDims {
                node_count: cfg.node_count,
                channels: cfg.channels,
                dim: cfg.dim,
                steps_per_day: cfg.steps_per_day,
                conv_kernel: cfg.conv_kernel,
            },
            &mut rng,
        );
        let enc_dims = EncoderDims {
            input_len: cfg.input_len,
            compressed_len: cfg.compressed_len,
            proxy_tokens: cfg.proxy_tokens,
            dim: cfg.dim,
            heads: cfg.heads,
            ffn_factor: cfg.ffn_factor,
        };
        let layers = (0..cfg.layers)
            .map(|i| encoder::register_layer(&mut store, &format!("layer{i}"), &enc_dims, &mut rng))
            .collect();
        let head_dims = HeadDims {
            dim: cfg.dim,
            channels: cfg.channels,
            input_len: cfg.input_len,
            target_len: cfg.target_len,
        };
        let recon = cfg
            .use_recon
            .then(|| heads::register_recon(&mut store, &head_dims, &mut rng));
        let pred = cfg
            .use_pred
            .then(|| heads::register_pred(&mut store, &head_dims, &mut rng));
        Ok(Model {
            cfg,
            store,
            embed,
            layers,
            recon,
            pred,
        })
    }

    /// Put every parameter on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.store.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_window_shape(&self, x: &Tensor<E>, len: usize, what: &str) -> Result<()> {
        let want = [self.cfg.node_count, len, self.cfg.channels];
        if x.shape() != want {
            return Err(shape_err!("{what} shape {:?}, model wants {:?}", x.shape(), want));
        }
        Ok(())
    }

    /// Representation pass: embed then encode (or just embed when the encoder
    /// is bypassed). Masking never applies here.
    pub fn forward_repr(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        x_curr: &Tensor<E>,
        tod_idx: &[usize],
        dow_idx: &[usize],
    ) -> Result<Var> {
        self.check_window_shape(x_curr, self.cfg.input_len, "input window")?;
        let mask = MaskSpec::empty(self.cfg.node_count, self.cfg.input_len);
        let e = embedding::embed(tape, vars, &self.embed, x_curr, &mask, tod_idx, dow_idx)?;
        if self.cfg.bypass_encoder {
            return Ok(e);
        }
        encoder::encode_opts(tape, vars, &self.layers, e, self.cfg.heads, self.cfg.pre_norm)
    }

    /// Training pass: mask, embed, encode, decode all enabled heads, and
    /// assemble the weighted loss.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_loss(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        window: &WindowTensors<E>,
        mask: &MaskSpec,
        loss: &LossSettings,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardOut> {
        self.check_window_shape(&window.x_curr, self.cfg.input_len, "input window")?;
        self.check_window_shape(&window.x_tgt, self.cfg.target_len, "target window")?;
        let delta = E::from_f64(loss.huber_delta);

        let e = embedding::embed(
            tape,
            vars,
            &self.embed,
            &window.x_curr,
            mask,
            &window.tod_idx,
            &window.dow_idx,
        )?;
        let z = if self.cfg.bypass_encoder {
            e
        } else {
            encoder::encode_opts(tape, vars, &self.layers, e, self.cfg.heads, self.cfg.pre_norm)?
        };

        let x_curr = tape.leaf(window.x_curr.clone());
        let x_tgt = tape.leaf(window.x_tgt.clone());
        let recon_out = match &self.recon {
            Some(ids) => Some(heads::decode_recon(tape, vars, ids, z)?),
            None => None,
        };
        let pred_out = match &self.pred {
            Some(ids) => Some(heads::decode_pred(
                tape,
                vars,
                ids,
                z,
                self.cfg.dropout,
                training,
                dropout_seed,
            )?),
            None => None,
        };

        let (a, b, g) =
            loss.weights
                .effective(recon_out.is_some(), pred_out.is_some(), loss.use_multiscale)?;

        let zero = tape.leaf(Tensor::scalar(E::ZERO));
        let l_recon = match recon_out {
            Some(out) => {
                let masked: Vec<usize> =
                    (0..mask.grid.len()).filter(|&i| mask.grid[i]).collect();
                if loss.recon_masked_only && !masked.is_empty() {
                    // Score only the hidden positions: gather their rows out
                    // of the flattened [N*T, C] views.
                    let (n, t, c) = (
                        self.cfg.node_count,
                        self.cfg.input_len,
                        self.cfg.channels,
                    );
                    let flat_out = tape.reshape(out, &[n * t, c]);
                    let flat_true = tape.reshape(x_curr, &[n * t, c]);
                    let picked_out = tape.gather_rows(flat_out, &masked);
                    let picked_true = tape.gather_rows(flat_true, &masked);
                    tape.huber_loss(picked_out, picked_true, delta)?
                } else {
                    tape.huber_loss(out, x_curr, delta)?
                }
            }
            None => zero,
        };
        let l_pred = match pred_out {
            Some(out) => tape.huber_loss(out, x_tgt, delta)?,
            None => zero,
        };
        let l_ms = if loss.use_multiscale {
            // Compare whatever decoder outputs exist against their targets,
            // concatenated [current; future]; kernels that do not fit the
            // available span are skipped.
            let (pred_full, true_full) = match (recon_out, pred_out) {
                (Some(r), Some(p)) => (tape.concat1(&[r, p]), tape.concat1(&[x_curr, x_tgt])),
                (Some(r), None) => (r, x_curr),
                (None, Some(p)) => (p, x_tgt),
                (None, None) => unreachable!("validated: at least one decoder"),
            };
            let span = tape.shape(pred_full)[1];
            let usable: Vec<usize> = loss.kernels.iter().copied().filter(|&k| k <= span).collect();
            heads::multiscale_loss(tape, pred_full, true_full, &usable, delta)?
        } else {
            zero
        };
        let total = heads::combine(tape, l_recon, l_pred, l_ms, a, b, g);
        Ok(ForwardOut {
            total,
            recon: l_recon,
            pred: l_pred,
            multiscale: l_ms,
        })
    }

    /// Overwrite parameter values by name, checking shapes.
    pub fn load_values(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(shape_err!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                self.store.len()
            ));
        }
        for (name, shape, data) in tensors {
            let param = self
                .store
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| shape_err!("checkpoint tensor '{name}' not in model"))?;
            if param.value.shape() != shape.as_slice() {
                return Err(shape_err!(
                    "tensor '{name}' shape {:?} does not match model {:?}",
                    shape,
                    param.value.shape()
                ));
            }
            param.value =
                Tensor::new(shape.clone(), data.iter().map(|&x| E::from_f64(x as f64)).collect())?;
        }
        Ok(())
    }
}

impl Model<f32> {
    /// Named parameter snapshot in store order.
    pub fn export_values(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.store
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
            .collect()
    }
}

/// Extract scalar loss values from a forward pass.
pub fn loss_values<E: Real>(tape: &Tape<E>, out: &ForwardOut) -> LossValues {
    LossValues {
        total: tape.scalar(out.total).to_f64(),
        recon: tape.scalar(out.recon).to_f64(),
        pred: tape.scalar(out.pred).to_f64(),
        multiscale: tape.scalar(out.multiscale).to_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::apply_mask;

    pub fn micro_config(n: usize) -> ModelConfig {
        ModelConfig {
            node_count: n,
            channels: 1,
            steps_per_day: 24,
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

    fn micro_window(n: usize, seed: u64) -> WindowTensors<f64> {
        let mut rng = Rng::new(seed);
        WindowTensors {
            x_curr: Tensor::randn(&[n, 8, 1], 1.0, &mut rng),
            x_tgt: Tensor::randn(&[n, 4, 1], 1.0, &mut rng),
            tod_idx: (0..8).map(|t| (t + 5) % 24).collect(),
            dow_idx: vec![3; 8],
        }
    }

    fn settings() -> LossSettings {
        LossSettings {
            weights: LossWeights::new(0.3, 0.3).unwrap(),
            kernels: vec![2, 4],
            huber_delta: 1.0,
            use_multiscale: true,
            recon_masked_only: false,
        }
    }

    #[test]
    fn forward_loss_runs_and_is_deterministic() {
        let model = Model::<f64>::new(micro_config(4), 11).unwrap();
        let window = micro_window(4, 1);
        let mask = apply_mask(4, 8, 0.25, true, 7).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let out = model
                .forward_loss(&mut tape, &vars, &window, &mask, &settings(), true, 99)
                .unwrap();
            loss_values(&tape, &out)
        };
        let a = run();
        let b = run();
        assert_eq!(a.total, b.total);
        assert!(a.total.is_finite() && a.total > 0.0);
        let expect = 0.3 * a.recon + 0.3 * a.pred + 0.4 * a.multiscale;
        assert!((a.total - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let model = Model::<f64>::new(micro_config(4), 3).unwrap();
        let window = micro_window(4, 2);
        let mask = apply_mask(4, 8, 0.25, true, 5).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = model
            .forward_loss(&mut tape, &vars, &window, &mask, &settings(), true, 42)
            .unwrap();
        let grads = tape.backward(out.total).unwrap();
        for (i, p) in model.store.iter().enumerate() {
            let g = grads.get(vars[i]).unwrap_or_else(|| panic!("no grad for {}", p.name));
            let norm: f64 = g.iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "zero gradient for {}", p.name);
        }
    }

    #[test]
    fn repr_ignores_masking_settings() {
        let model = Model::<f64>::new(micro_config(4), 3).unwrap();
        let window = micro_window(4, 2);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let z = model
            .forward_repr(&mut tape, &vars, &window.x_curr, &window.tod_idx, &window.dow_idx)
            .unwrap();
        assert_eq!(tape.shape(z), &[4, 8, 8]);
    }

    #[test]
    fn bypass_encoder_returns_embedding() {
        let mut cfg = micro_config(4);
        cfg.bypass_encoder = true;
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let window = micro_window(4, 2);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let z = model
            .forward_repr(&mut tape, &vars, &window.x_curr, &window.tod_idx, &window.dow_idx)
            .unwrap();
        // Same as calling the embedding alone.
        let mask = MaskSpec::empty(4, 8);
        let e = embedding::embed(
            &mut tape,
            &vars,
            &model.embed,
            &window.x_curr,
            &mask,
            &window.tod_idx,
            &window.dow_idx,
        )
        .unwrap();
        assert_eq!(tape.data(z), tape.data(e));
    }

    #[test]
    fn masked_only_recon_scores_hidden_positions() {
        let model = Model::<f64>::new(micro_config(4), 11).unwrap();
        let window = micro_window(4, 1);
        let mask = apply_mask(4, 8, 0.25, true, 7).unwrap();
        let run = |masked_only: bool, mask: &MaskSpec| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let mut s = settings();
            s.recon_masked_only = masked_only;
            let out = model
                .forward_loss(&mut tape, &vars, &window, mask, &s, true, 99)
                .unwrap();
            loss_values(&tape, &out)
        };
        let full = run(false, &mask);
        let narrow = run(true, &mask);
        assert_ne!(full.recon, narrow.recon, "narrow mode must change the support");
        // Prediction and multi-scale terms are untouched by the mode.
        assert_eq!(full.pred, narrow.pred);
        assert_eq!(full.multiscale, narrow.multiscale);
        // With no masked positions the narrow mode falls back to full support.
        let empty = MaskSpec::empty(4, 8);
        assert_eq!(run(true, &empty).recon, run(false, &empty).recon);
    }

    #[test]
    fn pre_norm_variant_trains_and_differs() {
        let mut cfg = micro_config(4);
        cfg.pre_norm = true;
        let normed = Model::<f64>::new(cfg, 11).unwrap();
        let plain = Model::<f64>::new(micro_config(4), 11).unwrap();
        let window = micro_window(4, 1);
        let mask = apply_mask(4, 8, 0.25, true, 7).unwrap();
        let run = |model: &Model<f64>| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let out = model
                .forward_loss(&mut tape, &vars, &window, &mask, &settings(), true, 99)
                .unwrap();
            let grads = tape.backward(out.total).unwrap();
            let grad_norm: f64 = vars
                .iter()
                .filter_map(|&v| grads.get(v))
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum();
            (tape.scalar(out.total), grad_norm)
        };
        let (loss_plain, _) = run(&plain);
        let (loss_normed, grad_norm) = run(&normed);
        assert!(loss_normed.is_finite() && grad_norm > 0.0);
        assert_ne!(loss_plain, loss_normed);
    }

    #[test]
    fn variant_without_pred_still_trains() {
        let mut cfg = micro_config(4);
        cfg.use_pred = false;
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let window = micro_window(4, 2);
        let mask = apply_mask(4, 8, 0.25, true, 5).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut s = settings();
        s.kernels = vec![2, 4, 8, 16]; // 16 > T: skipped for the recon-only span
        let out = model
            .forward_loss(&mut tape, &vars, &window, &mask, &s, true, 1)
            .unwrap();
        assert_eq!(tape.scalar(out.pred), 0.0);
        assert!(tape.scalar(out.total) > 0.0);
        let grads = tape.backward(out.total).unwrap();
        assert!(grads.get(vars[0]).is_some());
    }
}
