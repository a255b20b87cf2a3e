//! Pretraining loop, checkpoint persistence, and batch encoding of datasets
//! into representation stores.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    block_of, input_window_starts, make_window, split_622, window_starts, zscore_apply,
    zscore_fit, NormStats, SeriesTensor, Split, SplitSpec,
};
use crate::embedding::apply_mask;
use crate::error::{config_err, data_err, Error, Result};
use crate::heads::LossWeights;
use crate::model::{loss_values, LossSettings, LossValues, Model, ModelConfig, WindowTensors};
use crate::optim::{clip_grad_norm, AdamW};
use crate::rng::{derive, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tensorio::{self, fnv1a};

const CHECKPOINT_MAGIC: &[u8; 4] = b"STRC";
const STORE_MAGIC: &[u8; 4] = b"STRS";

// Seed stream tags.
const TAG_SHUFFLE: u64 = 0x01;
const TAG_MASK: u64 = 0x02;
const TAG_VAL_MASK: u64 = 0x03;
const TAG_DROPOUT: u64 = 0x04;

/// Everything that shapes a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kernels: Vec<usize>,
    pub huber_delta: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub input_len: usize,
    pub target_len: usize,
    pub compressed_len: usize,
    pub proxy_tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_factor: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub bypass_encoder: bool,
    pub use_recon: bool,
    pub use_pred: bool,
    pub use_multiscale: bool,
    /// Score reconstruction on masked positions only (narrow mode).
    pub recon_masked_only: bool,
    /// Normalize residual-stream inputs inside spatial blocks (experimental).
    pub pre_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            max_epochs: 100,
            batch_size: 32,
            patience: 10,
            mask_ratio: 0.25,
            alpha: 0.3,
            beta: 0.3,
            kernels: vec![2, 4, 8, 16],
            huber_delta: 1.0,
            weight_decay: 0.01,
            grad_clip: 5.0,
            seed: 1,
            input_len: 12,
            target_len: 12,
            compressed_len: 3,
            proxy_tokens: 8,
            dim: 64,
            layers: 3,
            heads: 4,
            ffn_factor: 2,
            conv_kernel: 3,
            dropout: 0.1,
            bypass_encoder: false,
            use_recon: true,
            use_pred: true,
            use_multiscale: true,
            recon_masked_only: false,
            pre_norm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(config_err!("lr, max_epochs, batch_size, patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(config_err!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.grad_clip <= 0.0 || self.huber_delta <= 0.0 {
            return Err(config_err!("grad_clip and huber_delta must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err!("weight_decay must be non-negative"));
        }
        LossWeights::new(self.alpha, self.beta)?;
        let max_kernel = self.input_len + self.target_len;
        for &k in &self.kernels {
            if k < 1 || k > max_kernel {
                return Err(config_err!("pooling kernel {k} outside [1, {max_kernel}]"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, data: &SeriesTensor) -> ModelConfig {
        self.model_config_for(data.node_count, data.feature_count, data.steps_per_day)
    }

    pub fn model_config_for(
        &self,
        node_count: usize,
        channels: usize,
        steps_per_day: usize,
    ) -> ModelConfig {
        ModelConfig {
            node_count,
            channels,
            steps_per_day,
            input_len: self.input_len,
            target_len: self.target_len,
            dim: self.dim,
            compressed_len: self.compressed_len,
            proxy_tokens: self.proxy_tokens,
            layers: self.layers,
            heads: self.heads,
            ffn_factor: self.ffn_factor,
            conv_kernel: self.conv_kernel,
            dropout: self.dropout,
            pre_norm: self.pre_norm,
            bypass_encoder: self.bypass_encoder,
            use_recon: self.use_recon,
            use_pred: self.use_pred,
        }
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: LossWeights::new(self.alpha, self.beta).expect("validated"),
            kernels: self.kernels.clone(),
            huber_delta: self.huber_delta,
            use_multiscale: self.use_multiscale,
            recon_masked_only: self.recon_masked_only,
        }
    }

    pub fn hash(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub pred: f64,
    pub multiscale: f64,
    pub total: f64,
    pub val_total: f64,
    pub wall_seconds: f64,
}

/// Trained parameters plus everything needed to reuse them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub node_count: usize,
    pub channels: usize,
    pub steps_per_day: usize,
    pub norm: NormStats,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: u64,
    config: TrainConfig,
    node_count: usize,
    channels: usize,
    steps_per_day: usize,
    norm: NormStats,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            node_count: self.node_count,
            channels: self.channels,
            steps_per_day: self.steps_per_day,
            norm: self.norm,
        };
        let meta_json = serde_json::to_string(&meta).expect("meta serializes");
        tensorio::write_named(path, CHECKPOINT_MAGIC, &meta_json, &self.tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = tensorio::read_named(path, CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_str(&raw.meta_json)
            .map_err(|e| data_err!("checkpoint metadata: {e}"))?;
        if meta.config.hash() != meta.config_hash {
            return Err(data_err!("checkpoint config hash mismatch; file corrupt"));
        }
        Ok(Checkpoint {
            config: meta.config,
            node_count: meta.node_count,
            channels: meta.channels,
            steps_per_day: meta.steps_per_day,
            norm: meta.norm,
            tensors: raw.entries,
        })
    }

    /// Error when this checkpoint was trained under a different configuration.
    pub fn verify_matches(&self, expected: &TrainConfig) -> Result<()> {
        if expected.hash() != self.config.hash() {
            return Err(config_err!(
                "checkpoint was trained with a different configuration (hash {:#x} vs {:#x})",
                self.config.hash(),
                expected.hash()
            ));
        }
        Ok(())
    }

    /// Rebuild the model that produced this checkpoint.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let cfg = self
            .config
            .model_config_for(self.node_count, self.channels, self.steps_per_day);
        let mut model = Model::new(cfg, self.config.seed)?;
        model.load_values(&self.tensors)?;
        Ok(model)
    }
}

/// Dataset views shared by training and evaluation: normalized values plus
/// the split layout.
pub struct Prepared<'d> {
    pub data: &'d SeriesTensor,
    pub splits: SplitSpec,
    pub norm: NormStats,
    pub values_norm: Vec<f32>,
}

pub fn prepare<'d>(data: &'d SeriesTensor, cfg: &TrainConfig) -> Result<Prepared<'d>> {
    let splits = split_622(data, cfg.input_len + cfg.target_len)?;
    let norm = zscore_fit(data, splits.train)?;
    Ok(prepare_normed(data, splits, norm))
}

/// Like [`prepare`] but with externally supplied statistics (e.g. the ones a
/// checkpoint was trained with).
pub fn prepare_normed(data: &SeriesTensor, splits: SplitSpec, norm: NormStats) -> Prepared<'_> {
    let mut values_norm = data.values.clone();
    zscore_apply(&mut values_norm, norm);
    Prepared {
        data,
        splits,
        norm,
        values_norm,
    }
}

fn window_tensors(prep: &Prepared<'_>, start: usize, cfg: &TrainConfig) -> WindowTensors<f32> {
    let w = make_window(prep.data, &prep.values_norm, start, cfg.input_len, cfg.target_len);
    WindowTensors {
        x_curr: Tensor::new(
            vec![prep.data.node_count, cfg.input_len, prep.data.feature_count],
            w.x_curr,
        )
        .expect("window shape"),
        x_tgt: Tensor::new(
            vec![prep.data.node_count, cfg.target_len, prep.data.feature_count],
            w.x_tgt,
        )
        .expect("window shape"),
        tod_idx: w.tod_idx,
        dow_idx: w.dow_idx,
    }
}

struct WindowPass {
    values: LossValues,
    grads: Option<Vec<Vec<f32>>>,
}

/// Forward (and optionally backward) one window; gradients come back in
/// store order.
fn run_window(
    model: &Model<f32>,
    prep: &Prepared<'_>,
    cfg: &TrainConfig,
    settings: &LossSettings,
    start: usize,
    mask_seed: u64,
    dropout_seed: u64,
    training: bool,
    want_grads: bool,
) -> Result<WindowPass> {
    let window = window_tensors(prep, start, cfg);
    let mask = apply_mask(
        prep.data.node_count,
        cfg.input_len,
        cfg.mask_ratio,
        true, // masks apply to both training and validation objectives
        mask_seed,
    )?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = model.forward_loss(&mut tape, &vars, &window, &mask, settings, training, dropout_seed)?;
    let values = loss_values(&tape, &out);
    let grads = if want_grads {
        let g = tape.backward(out.total)?;
        Some(
            vars.iter()
                .enumerate()
                .map(|(i, &v)| {
                    g.get(v)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; model.store.get(crate::param::PId(i)).value.numel()])
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(WindowPass { values, grads })
}

/// Run the pretraining loop. Returns the best-validation checkpoint and the
/// full per-epoch history.
pub fn pretrain(data: &SeriesTensor, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochStats>)> {
    cfg.validate()?;
    let prep = prepare(data, cfg)?;
    let train_starts = window_starts(prep.splits.train, cfg.input_len, cfg.target_len);
    if train_starts.len() < cfg.batch_size {
        return Err(data_err!(
            "training split yields {} windows, fewer than one batch of {}",
            train_starts.len(),
            cfg.batch_size
        ));
    }
    let val_starts = window_starts(prep.splits.val, cfg.input_len, cfg.target_len);
    if val_starts.is_empty() {
        return Err(data_err!("validation split yields no windows"));
    }

    let mut model = Model::<f32>::new(cfg.model_config(data), cfg.seed)?;
    let settings = cfg.loss_settings();
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_tensors: Option<Vec<(String, Vec<usize>, Vec<f32>)>> = None;
    let mut stale_epochs = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let mut order = train_starts.clone();
        Rng::new(derive(derive(cfg.seed, TAG_SHUFFLE), epoch as u64)).shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks_exact(cfg.batch_size).collect();

        let mut sums = LossValues {
            total: 0.0,
            recon: 0.0,
            pred: 0.0,
            multiscale: 0.0,
        };
        for (step, batch) in batches.iter().enumerate() {
            let passes: Vec<Result<WindowPass>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &start)| {
                    let tag = derive(
                        derive(derive(derive(cfg.seed, TAG_MASK), epoch as u64), step as u64),
                        slot as u64,
                    );
                    let drop_tag = derive(tag, TAG_DROPOUT);
                    run_window(&model, &prep, cfg, &settings, start, tag, drop_tag, true, true)
                })
                .collect();

            let scale = 1.0 / batch.len() as f32;
            let mut batch_vals = LossValues {
                total: 0.0,
                recon: 0.0,
                pred: 0.0,
                multiscale: 0.0,
            };
            // Fixed-order reduction keeps runs bit-identical regardless of
            // worker count.
            for pass in passes {
                let pass = pass?;
                batch_vals.total += pass.values.total;
                batch_vals.recon += pass.values.recon;
                batch_vals.pred += pass.values.pred;
                batch_vals.multiscale += pass.values.multiscale;
                let grads = pass.grads.expect("requested");
                for (i, g) in grads.iter().enumerate() {
                    let dst = model.store.get_mut(crate::param::PId(i)).grad.data_mut();
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s * scale;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            batch_vals.total *= inv;
            batch_vals.recon *= inv;
            batch_vals.pred *= inv;
            batch_vals.multiscale *= inv;
            if !batch_vals.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {} at epoch {epoch} step {step}",
                    batch_vals.total
                )));
            }
            sums.total += batch_vals.total;
            sums.recon += batch_vals.recon;
            sums.pred += batch_vals.pred;
            sums.multiscale += batch_vals.multiscale;

            clip_grad_norm(&mut model.store, cfg.grad_clip)?;
            opt.step(&mut model.store)?;
        }
        let nb = batches.len() as f64;

        // Validation masks are fixed per window (not per epoch) so that the
        // early-stopping comparison is apples to apples; dropout stays off.
        let val_passes: Vec<Result<WindowPass>> = val_starts
            .par_iter()
            .enumerate()
            .map(|(i, &start)| {
                let tag = derive(derive(cfg.seed, TAG_VAL_MASK), i as u64);
                run_window(&model, &prep, cfg, &settings, start, tag, 0, false, false)
            })
            .collect();
        let mut val_total = 0.0;
        for pass in val_passes {
            val_total += pass?.values.total;
        }
        val_total /= val_starts.len() as f64;
        if !val_total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }

        history.push(EpochStats {
            epoch,
            recon: sums.recon / nb,
            pred: sums.pred / nb,
            multiscale: sums.multiscale / nb,
            total: sums.total / nb,
            val_total,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        });

        if val_total < best_val {
            best_val = val_total;
            best_tensors = Some(model.export_values());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    let tensors = best_tensors.expect("at least one epoch ran");
    model.load_values(&tensors)?;
    Ok((
        Checkpoint {
            config: cfg.clone(),
            node_count: data.node_count,
            channels: data.feature_count,
            steps_per_day: data.steps_per_day,
            norm: prep.norm,
            tensors,
        },
        history,
    ))
}

/// Validation outcome of one (alpha, beta) pair during weight search.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WeightSearchRow {
    pub alpha: f64,
    pub beta: f64,
    pub best_val: f64,
    pub epochs: usize,
}

/// The loss-weight grid the search sweeps by default.
pub fn default_weight_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

/// Train one model per (alpha, beta) pair with alpha + beta <= 1 and keep the
/// checkpoint with the lowest validation loss. Ties go to the first (lowest)
/// pair in grid order.
pub fn search_loss_weights(
    data: &SeriesTensor,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<(Checkpoint, Vec<EpochStats>, Vec<WeightSearchRow>)> {
    if grid.is_empty() {
        return Err(config_err!("empty loss-weight grid"));
    }
    let mut rows = Vec::new();
    let mut best: Option<(f64, Checkpoint, Vec<EpochStats>)> = None;
    for &alpha in grid {
        for &beta in grid {
            if alpha + beta > 1.0 + 1e-12 {
                continue;
            }
            let mut cfg = base.clone();
            cfg.alpha = alpha;
            cfg.beta = beta;
            let (ckpt, history) = pretrain(data, &cfg)?;
            let best_val = history
                .iter()
                .map(|h| h.val_total)
                .fold(f64::INFINITY, f64::min);
            rows.push(WeightSearchRow {
                alpha,
                beta,
                best_val,
                epochs: history.len(),
            });
            let better = best.as_ref().map_or(true, |(v, _, _)| best_val < *v);
            if better {
                best = Some((best_val, ckpt, history));
            }
        }
    }
    let (_, ckpt, history) = best.ok_or_else(|| config_err!("no (alpha, beta) pair satisfies alpha + beta <= 1"))?;
    Ok((ckpt, history, rows))
}

pub fn weight_search_csv(rows: &[WeightSearchRow]) -> String {
    let mut out = String::from("alpha,beta,best_val,epochs\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.alpha, r.beta, r.best_val, r.epochs));
    }
    out
}

/// Last-step representations for every input window of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationStore {
    pub node_count: usize,
    pub dim: usize,
    /// Absolute time index of each window's last input step.
    pub window_ends: Vec<usize>,
    /// [windows, node_count, dim] row-major.
    pub rows: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    node_count: usize,
    dim: usize,
    window_ends: Vec<usize>,
}

impl RepresentationStore {
    pub fn row(&self, window: usize, node: usize) -> &[f32] {
        let off = (window * self.node_count + node) * self.dim;
        &self.rows[off..off + self.dim]
    }

    pub fn window_count(&self) -> usize {
        self.window_ends.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&StoreMeta {
            node_count: self.node_count,
            dim: self.dim,
            window_ends: self.window_ends.clone(),
        })
        .expect("meta serializes");
        let entries = vec![(
            "representations".to_string(),
            vec![self.window_ends.len(), self.node_count, self.dim],
            self.rows.clone(),
        )];
        tensorio::write_named(path, STORE_MAGIC, &meta, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = tensorio::read_named(path, STORE_MAGIC)?;
        let meta: StoreMeta = serde_json::from_str(&raw.meta_json)
            .map_err(|e| data_err!("representation store metadata: {e}"))?;
        let (_, shape, rows) = raw
            .entries
            .into_iter()
            .find(|(name, _, _)| name == "representations")
            .ok_or_else(|| data_err!("representation store missing payload"))?;
        if shape != [meta.window_ends.len(), meta.node_count, meta.dim] {
            return Err(data_err!("representation store shape mismatch"));
        }
        Ok(RepresentationStore {
            node_count: meta.node_count,
            dim: meta.dim,
            window_ends: meta.window_ends,
            rows,
        })
    }
}

/// Encode every input window of `split`, keeping the last-step slice of the
/// representation. Masking and dropout are inference-disabled.
pub fn encode_dataset(
    model: &Model<f32>,
    prep: &Prepared<'_>,
    split: Split,
) -> Result<RepresentationStore> {
    let cfg = &model.cfg;
    if prep.data.node_count != cfg.node_count || prep.data.feature_count != cfg.channels {
        return Err(config_err!(
            "model built for {}x{} data, got {}x{}",
            cfg.node_count,
            cfg.channels,
            prep.data.node_count,
            prep.data.feature_count
        ));
    }
    let starts = input_window_starts(prep.splits.range(split), cfg.input_len);
    if starts.is_empty() {
        return Err(data_err!("split too short for one input window"));
    }
    let (n, t, d) = (cfg.node_count, cfg.input_len, cfg.dim);
    let per_window: Vec<Result<Vec<f32>>> = starts
        .par_iter()
        .map(|&start| {
            let x = Tensor::new(
                vec![n, t, prep.data.feature_count],
                block_of(&prep.values_norm, prep.data, start, t),
            )?;
            let tod: Vec<usize> = (0..t).map(|i| prep.data.tod_of(start + i)).collect();
            let dow: Vec<usize> = (0..t).map(|i| prep.data.dow_of(start + i)).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let z = model.forward_repr(&mut tape, &vars, &x, &tod, &dow)?;
            let z_data = tape.data(z);
            // Keep the slice at the final input step.
            let mut out = Vec::with_capacity(n * d);
            for node in 0..n {
                let off = (node * t + (t - 1)) * d;
                out.extend_from_slice(&z_data[off..off + d]);
            }
            Ok(out)
        })
        .collect();

    let mut rows = Vec::with_capacity(starts.len() * n * d);
    for w in per_window {
        rows.extend_from_slice(&w?);
    }
    Ok(RepresentationStore {
        node_count: n,
        dim: d,
        window_ends: starts.iter().map(|s| s + cfg.input_len - 1).collect(),
        rows,
    })
}

/// Append-only CSV view of the training history.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,l_recon,l_pred,l_ms,total,val_total,wall_seconds\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            row.epoch, row.recon, row.pred, row.multiscale, row.total, row.val_total, row.wall_seconds
        ));
    }
    out
}
