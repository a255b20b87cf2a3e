//! Run configuration files and the command implementations behind the binary.
//!
//! Config files are flat `key = value` lines grouped under `[section]`
//! headers (no comments, one nesting level). Unknown sections or keys are
//! rejected up front; the full schema is in [`schema_text`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::{
    ablation_csv, ablation_run, complexity_bench, model_param_count, scaling_csv, AblationVariant,
    BenchConfig,
};
use crate::data::{
    compute_cv, import_csv, load_container, save_adjacency, save_container, split_622,
    synth_generate, trend_seasonality_strength, Split, SynthConfig,
};
use crate::downstream::{evaluate_checkpoint, EvalOptions};
use crate::error::{config_err, Result};
use crate::trainer::{
    default_weight_grid, encode_dataset, history_csv, prepare_normed, pretrain,
    search_loss_weights, weight_search_csv, Checkpoint, TrainConfig,
};

/// Parsed and validated run configuration.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub bench: BenchConfig,
}

/// Command-line overrides layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub horizons: Option<Vec<usize>>,
    pub fraction: Option<f64>,
    pub n_list: Option<Vec<usize>>,
}

const SCHEMA: &[(&str, &str, &str)] = &[
    ("data", "nodes", "sensor count for the synthetic generator"),
    ("data", "days", "days of synthetic data"),
    ("data", "steps_per_day", "samples per day (must divide 86400)"),
    ("data", "graph_degree", "neighbors per node in the diffusion graph"),
    ("data", "diffusion_weight", "neighbor mixing weight in [0, 1]"),
    ("data", "noise_sigma", "innovation std of the AR(1) noise"),
    ("model", "input_len", "input window length T"),
    ("model", "target_len", "future window length F"),
    ("model", "dim", "representation width d"),
    ("model", "compressed_len", "virtual steps p after temporal compression"),
    ("model", "proxy_tokens", "proxy token count m in spatial attention"),
    ("model", "layers", "encoder layer count L"),
    ("model", "heads", "attention heads"),
    ("model", "ffn_factor", "feed-forward expansion factor"),
    ("model", "conv_kernel", "temporal convolution width (odd)"),
    ("model", "dropout", "dropout rate in the prediction decoder"),
    ("model", "pre_norm", "normalize residual-stream inputs in spatial blocks (experimental)"),
    ("train", "lr", "learning rate"),
    ("train", "max_epochs", "epoch cap"),
    ("train", "batch_size", "windows per optimizer step"),
    ("train", "patience", "early-stop patience in epochs"),
    ("train", "mask_ratio", "fraction of input steps masked per node"),
    ("train", "alpha", "reconstruction loss weight"),
    ("train", "beta", "prediction loss weight"),
    ("train", "kernels", "pooling kernel list, e.g. 2,4,8,16"),
    ("train", "huber_delta", "Huber transition point"),
    ("train", "weight_decay", "decoupled weight decay"),
    ("train", "grad_clip", "global gradient-norm clip"),
    ("train", "seed", "master seed for the whole run"),
    ("train", "recon_masked_only", "score reconstruction on masked positions only"),
    ("eval", "horizons", "forecast horizons, e.g. 12,24,48,96"),
    ("eval", "fraction", "training-row sample fraction in (0, 1]"),
    ("eval", "repeats", "sampling repetitions averaged into the report"),
    ("eval", "ridge_grid", "ridge penalty grid"),
    ("bench", "n_list", "node counts for the scaling sweep"),
    ("bench", "repeats", "timed repetitions per point"),
    ("bench", "warmup", "discarded warmup iterations"),
];

/// Human-readable schema listing (the reference for valid config files).
pub fn schema_text() -> String {
    let mut out = String::new();
    let mut last = "";
    for (section, key, help) in SCHEMA {
        if *section != last {
            out.push_str(&format!("[{section}]\n"));
            last = section;
        }
        out.push_str(&format!("  {key:<18} {help}\n"));
    }
    out
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !SCHEMA.iter().any(|(s, _, _)| *s == name) {
                return Err(config_err!("line {}: unknown section [{name}]", lineno + 1));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key = value, got '{line}'", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if section.is_empty() {
            return Err(config_err!("line {}: key '{key}' before any [section]", lineno + 1));
        }
        if !SCHEMA
            .iter()
            .any(|(s, k, _)| *s == section && *k == key)
        {
            return Err(config_err!(
                "line {}: unknown key '{key}' in section [{section}]",
                lineno + 1
            ));
        }
        apply_key(&mut cfg, &section, key, value)
            .map_err(|e| config_err!("line {}: {e}", lineno + 1))?;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| config_err!("value '{value}' for '{key}' is not valid"))
    }
    fn list(value: &str, key: &str) -> Result<Vec<usize>> {
        value.split(',').map(|v| num::<usize>(v.trim(), key)).collect()
    }
    fn flist(value: &str, key: &str) -> Result<Vec<f64>> {
        value.split(',').map(|v| num::<f64>(v.trim(), key)).collect()
    }
    match (section, key) {
        ("data", "nodes") => cfg.synth.node_count = num(value, key)?,
        ("data", "days") => cfg.synth.days = num(value, key)?,
        ("data", "steps_per_day") => cfg.synth.steps_per_day = num(value, key)?,
        ("data", "graph_degree") => cfg.synth.graph_degree = num(value, key)?,
        ("data", "diffusion_weight") => cfg.synth.diffusion_weight = num(value, key)?,
        ("data", "noise_sigma") => cfg.synth.noise_sigma = num(value, key)?,
        ("model", "input_len") => cfg.train.input_len = num(value, key)?,
        ("model", "target_len") => cfg.train.target_len = num(value, key)?,
        ("model", "dim") => cfg.train.dim = num(value, key)?,
        ("model", "compressed_len") => cfg.train.compressed_len = num(value, key)?,
        ("model", "proxy_tokens") => cfg.train.proxy_tokens = num(value, key)?,
        ("model", "layers") => cfg.train.layers = num(value, key)?,
        ("model", "heads") => cfg.train.heads = num(value, key)?,
        ("model", "ffn_factor") => cfg.train.ffn_factor = num(value, key)?,
        ("model", "conv_kernel") => cfg.train.conv_kernel = num(value, key)?,
        ("model", "dropout") => cfg.train.dropout = num(value, key)?,
        ("model", "pre_norm") => cfg.train.pre_norm = num(value, key)?,
        ("train", "lr") => cfg.train.lr = num(value, key)?,
        ("train", "max_epochs") => cfg.train.max_epochs = num(value, key)?,
        ("train", "batch_size") => cfg.train.batch_size = num(value, key)?,
        ("train", "patience") => cfg.train.patience = num(value, key)?,
        ("train", "mask_ratio") => cfg.train.mask_ratio = num(value, key)?,
        ("train", "alpha") => cfg.train.alpha = num(value, key)?,
        ("train", "beta") => cfg.train.beta = num(value, key)?,
        ("train", "kernels") => cfg.train.kernels = list(value, key)?,
        ("train", "huber_delta") => cfg.train.huber_delta = num(value, key)?,
        ("train", "weight_decay") => cfg.train.weight_decay = num(value, key)?,
        ("train", "grad_clip") => cfg.train.grad_clip = num(value, key)?,
        ("train", "seed") => cfg.train.seed = num(value, key)?,
        ("train", "recon_masked_only") => cfg.train.recon_masked_only = num(value, key)?,
        ("eval", "horizons") => cfg.eval.horizons = list(value, key)?,
        ("eval", "fraction") => cfg.eval.fraction = num(value, key)?,
        ("eval", "repeats") => cfg.eval.repeats = num(value, key)?,
        ("eval", "ridge_grid") => cfg.eval.grid = flist(value, key)?,
        ("bench", "n_list") => cfg.bench.n_list = list(value, key)?,
        ("bench", "repeats") => cfg.bench.repeats = num(value, key)?,
        ("bench", "warmup") => cfg.bench.warmup = num(value, key)?,
        _ => unreachable!("schema-checked key"),
    }
    Ok(())
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.train.validate()?;
    if cfg.eval.horizons.is_empty() {
        return Err(config_err!("eval.horizons must not be empty"));
    }
    if !(cfg.eval.fraction > 0.0 && cfg.eval.fraction <= 1.0) {
        return Err(config_err!("eval.fraction {} outside (0, 1]", cfg.eval.fraction));
    }
    if cfg.eval.grid.is_empty() {
        return Err(config_err!("eval.ridge_grid must not be empty"));
    }
    Ok(())
}

/// Load a config file (or defaults when absent) and layer overrides on top.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_err!("cannot read config {}: {e}", p.display()))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.train.seed = seed;
    }
    if let Some(horizons) = &overrides.horizons {
        cfg.eval.horizons = horizons.clone();
    }
    if let Some(fraction) = overrides.fraction {
        cfg.eval.fraction = fraction;
    }
    if let Some(n_list) = &overrides.n_list {
        cfg.bench.n_list = n_list.clone();
    }
    // Single master seed: derived streams live in their modules.
    cfg.synth.seed = cfg.train.seed;
    cfg.eval.seed = cfg.train.seed;
    cfg.bench.seed = cfg.train.seed;
    // Bench sweeps reuse the encoder geometry.
    cfg.bench.input_len = cfg.train.input_len;
    cfg.bench.dim = cfg.train.dim;
    cfg.bench.compressed_len = cfg.train.compressed_len;
    cfg.bench.proxy_tokens = cfg.train.proxy_tokens;
    cfg.bench.layers = cfg.train.layers;
    cfg.bench.heads = cfg.train.heads;
    cfg.bench.ffn_factor = cfg.train.ffn_factor;
    validate(&cfg)?;
    Ok(cfg)
}

/// Serialize the effective configuration (the echo written next to outputs).
pub fn config_text(cfg: &RunConfig) -> String {
    let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let fjoin = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "[data]\nnodes = {}\ndays = {}\nsteps_per_day = {}\ngraph_degree = {}\n\
         diffusion_weight = {}\nnoise_sigma = {}\n\n\
         [model]\ninput_len = {}\ntarget_len = {}\ndim = {}\ncompressed_len = {}\n\
         proxy_tokens = {}\nlayers = {}\nheads = {}\nffn_factor = {}\nconv_kernel = {}\ndropout = {}\npre_norm = {}\n\n\
         [train]\nlr = {}\nmax_epochs = {}\nbatch_size = {}\npatience = {}\nmask_ratio = {}\n\
         alpha = {}\nbeta = {}\nkernels = {}\nhuber_delta = {}\nweight_decay = {}\ngrad_clip = {}\nseed = {}\nrecon_masked_only = {}\n\n\
         [eval]\nhorizons = {}\nfraction = {}\nrepeats = {}\nridge_grid = {}\n\n\
         [bench]\nn_list = {}\nrepeats = {}\nwarmup = {}\n",
        cfg.synth.node_count,
        cfg.synth.days,
        cfg.synth.steps_per_day,
        cfg.synth.graph_degree,
        cfg.synth.diffusion_weight,
        cfg.synth.noise_sigma,
        cfg.train.input_len,
        cfg.train.target_len,
        cfg.train.dim,
        cfg.train.compressed_len,
        cfg.train.proxy_tokens,
        cfg.train.layers,
        cfg.train.heads,
        cfg.train.ffn_factor,
        cfg.train.conv_kernel,
        cfg.train.dropout,
        cfg.train.pre_norm,
        cfg.train.lr,
        cfg.train.max_epochs,
        cfg.train.batch_size,
        cfg.train.patience,
        cfg.train.mask_ratio,
        cfg.train.alpha,
        cfg.train.beta,
        join(&cfg.train.kernels),
        cfg.train.huber_delta,
        cfg.train.weight_decay,
        cfg.train.grad_clip,
        cfg.train.seed,
        cfg.train.recon_masked_only,
        join(&cfg.eval.horizons),
        cfg.eval.fraction,
        cfg.eval.repeats,
        fjoin(&cfg.eval.grid),
        join(&cfg.bench.n_list),
        cfg.bench.repeats,
        cfg.bench.warmup,
    )
}

/// Exclusive per-run lock on an output directory; released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(config_err!(
                "output directory {} is locked by another run (remove {} if stale)",
                out_dir.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(config_err!(
                "refusing to overwrite {} (pass --force)",
                p.display()
            ));
        }
    }
    Ok(())
}

fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::write(out_dir.join("run_config.cfg"), config_text(cfg))?;
    Ok(())
}

/// Generate a synthetic dataset container (or convert a CSV into one) and
/// print its statistics.
pub fn cmd_generate(
    cfg: &RunConfig,
    from_csv: Option<&Path>,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let _lock = DirLock::acquire(out_dir)?;
    let data_path = out_dir.join("data.strp");
    refuse_overwrite(
        &[data_path.clone(), out_dir.join("run_config.cfg")],
        force,
    )?;
    let series = match from_csv {
        Some(csv) => {
            let series = import_csv(csv, cfg.synth.steps_per_day, 0, 0)?;
            save_container(&series, &data_path)?;
            series
        }
        None => {
            let out = synth_generate(&cfg.synth)?;
            save_container(&out.series, &data_path)?;
            save_adjacency(&out.adjacency, &data_path)?;
            out.series
        }
    };
    echo_config(cfg, out_dir)?;

    let cv = compute_cv(&series)?;
    let strength = trend_seasonality_strength(&series, series.steps_per_day)?;
    println!(
        "wrote {} ({} nodes x {} steps, {} steps/day)",
        data_path.display(),
        series.node_count,
        series.t_total,
        series.steps_per_day
    );
    println!(
        "cv = {:.2}% ({} zero-mean variables excluded)",
        cv.cv_percent, cv.excluded_variables
    );
    println!(
        "   reference CV of public sensor datasets: PEMS04 58.82, PEMS08 46.75, CA 60.10, \
         SDWPF 121.97, Humidity 17.19, Temperature 2.19"
    );
    println!(
        "trend strength = {:.4}, seasonality strength = {:.4}",
        strength.trend, strength.seasonality
    );
    Ok(())
}

/// Pretrain on a container and write the checkpoint and training log. With
/// `search_weights`, every admissible loss-weight pair is swept and the best
/// pair's checkpoint kept.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    force: bool,
    search_weights: bool,
) -> Result<()> {
    let _lock = DirLock::acquire(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("train_log.csv");
    refuse_overwrite(&[ckpt_path.clone(), log_path.clone()], force)?;
    let data = load_container(data_path)?;
    let (ckpt, history) = if search_weights {
        let (ckpt, history, rows) =
            search_loss_weights(&data, &cfg.train, &default_weight_grid())?;
        fs::write(out_dir.join("weight_search.csv"), weight_search_csv(&rows))?;
        println!(
            "searched {} weight pairs; kept alpha = {}, beta = {}",
            rows.len(),
            ckpt.config.alpha,
            ckpt.config.beta
        );
        (ckpt, history)
    } else {
        pretrain(&data, &cfg.train)?
    };
    ckpt.save(&ckpt_path)?;
    fs::write(&log_path, history_csv(&history))?;
    echo_config(cfg, out_dir)?;
    let best = history
        .iter()
        .map(|h| h.val_total)
        .fold(f64::INFINITY, f64::min);
    println!(
        "trained {} epochs ({} parameters), best validation loss {best:.6}",
        history.len(),
        model_param_count(data.node_count, data.feature_count, data.steps_per_day, &ckpt.config),
    );
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

/// Encode one split into a representation store.
pub fn cmd_encode(
    ckpt_path: &Path,
    data_path: &Path,
    split: Split,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let _lock = DirLock::acquire(out_dir)?;
    let store_path = out_dir.join(format!("representations_{}.bin", split.name()));
    refuse_overwrite(std::slice::from_ref(&store_path), force)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = load_container(data_path)?;
    let splits = split_622(&data, ckpt.config.input_len + ckpt.config.target_len)?;
    let prep = prepare_normed(&data, splits, ckpt.norm);
    let model = ckpt.build_model()?;
    let store = encode_dataset(&model, &prep, split)?;
    store.save(&store_path)?;
    println!(
        "wrote {} ({} windows x {} nodes x {} dims)",
        store_path.display(),
        store.window_count(),
        store.node_count,
        store.dim
    );
    Ok(())
}

/// Run the downstream protocol and write the report files.
pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let _lock = DirLock::acquire(out_dir)?;
    let csv_path = out_dir.join("eval_report.csv");
    let json_path = out_dir.join("eval_report.json");
    let timings_path = out_dir.join("timings.csv");
    refuse_overwrite(&[csv_path.clone(), json_path.clone()], force)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data = load_container(data_path)?;
    let splits = split_622(&data, ckpt.config.input_len + ckpt.config.target_len)?;
    let prep = prepare_normed(&data, splits, ckpt.norm);
    let report = evaluate_checkpoint(&ckpt, &prep, &cfg.eval)?;
    fs::write(&csv_path, report.to_csv())?;
    fs::write(&json_path, report.to_json())?;
    fs::write(&timings_path, report.timings_csv())?;
    echo_config(cfg, out_dir)?;
    for e in &report.entries {
        println!(
            "{:<10} horizon {:<4} mse {:.6} mae {:.6}",
            e.method, e.horizon, e.mse, e.mae
        );
    }
    Ok(())
}

/// Scaling sweep over node counts.
pub fn cmd_bench(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<()> {
    let _lock = DirLock::acquire(out_dir)?;
    let csv_path = out_dir.join("scaling.csv");
    let json_path = out_dir.join("scaling_summary.json");
    refuse_overwrite(&[csv_path.clone(), json_path.clone()], force)?;
    let report = complexity_bench(&cfg.bench)?;
    fs::write(&csv_path, scaling_csv(&report))?;
    fs::write(&json_path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    echo_config(cfg, out_dir)?;
    for row in &report.rows {
        println!(
            "n = {:<6} fwd {:.4}s  fwd+bwd {:.4}s  all-pairs fwd {:.4}s",
            row.n, row.t_fwd, row.t_fwd_bwd, row.t_naive_fwd
        );
    }
    println!(
        "encoder slope {:.3}, all-pairs slope {:.3}, {} encoder parameters, ~{} activation bytes",
        report.encoder_slope,
        report.naive_slope,
        report.param_count,
        report.activation_bytes_estimate
    );
    Ok(())
}

/// Train and evaluate the requested ablation variants.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    force: bool,
    variants: &[AblationVariant],
) -> Result<()> {
    let _lock = DirLock::acquire(out_dir)?;
    let csv_path = out_dir.join("ablation.csv");
    refuse_overwrite(std::slice::from_ref(&csv_path), force)?;
    let data = load_container(data_path)?;
    let entries = ablation_run(&data, &cfg.train, &cfg.eval, variants)?;
    fs::write(&csv_path, ablation_csv(&entries))?;
    echo_config(cfg, out_dir)?;
    for e in &entries {
        println!(
            "{:<12} horizon {:<4} mse {:.6} mae {:.6}",
            e.method, e.horizon, e.mse, e.mae
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        let text = config_text(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.synth.node_count, cfg.synth.node_count);
        assert_eq!(back.eval.horizons, cfg.eval.horizons);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(parse_config("[data]\nnodez = 3\n").is_err());
        assert!(parse_config("[nope]\nnodes = 3\n").is_err());
        assert!(parse_config("nodes = 3\n").is_err());
        assert!(parse_config("[train]\nalpha = banana\n").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let over = Overrides {
            seed: Some(99),
            horizons: Some(vec![4, 8]),
            fraction: Some(0.5),
            n_list: Some(vec![8, 16, 32]),
        };
        let cfg = load_config(None, &over).unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.synth.seed, 99);
        assert_eq!(cfg.eval.horizons, vec![4, 8]);
        assert_eq!(cfg.eval.fraction, 0.5);
        assert_eq!(cfg.bench.n_list, vec![8, 16, 32]);
    }

    #[test]
    fn schema_lists_every_section() {
        let text = schema_text();
        for section in ["[data]", "[model]", "[train]", "[eval]", "[bench]"] {
            assert!(text.contains(section), "missing {section}");
        }
    }

    #[test]
    fn dir_lock_excludes_second_runner() {
        let dir = std::env::temp_dir().join("strep-cli-lock-test");
        let _ = fs::remove_dir_all(&dir);
        let lock = DirLock::acquire(&dir).unwrap();
        assert!(DirLock::acquire(&dir).is_err());
        drop(lock);
        assert!(DirLock::acquire(&dir).is_ok());
    }
}
