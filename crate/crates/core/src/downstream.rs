//! Downstream evaluation: ridge probes from last-step representations to
//! future targets, with grid-searched regularization and naive baselines.

use serde::Serialize;

use crate::error::{data_err, Error, Result};
use crate::rng::{derive, Rng};
use crate::tensor::Real;
use crate::trainer::{encode_dataset, Checkpoint, Prepared, RepresentationStore};
use crate::data::Split;

/// Closed-form ridge model with an unregularized bias row.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    /// (features + 1) x targets, bias in the last row.
    pub weights: Vec<f64>,
    pub features: usize,
    pub targets: usize,
    pub lambda: f64,
    pub horizon: usize,
}

impl RidgeModel {
    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.features);
        debug_assert_eq!(out.len(), self.targets);
        let q = self.targets;
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.weights[self.features * q + j]; // bias row
        }
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..q {
                out[j] += xi * self.weights[i * q + j];
            }
        }
    }
}

/// Solve (X'X + lambda I) W = X'Y with a bias column appended to X and left
/// out of the penalty. Uses a Cholesky factorization of the normal equations.
pub fn ridge_fit(
    x: &[f64],
    rows: usize,
    features: usize,
    y: &[f64],
    targets: usize,
    lambda: f64,
    horizon: usize,
) -> Result<RidgeModel> {
    if rows == 0 {
        return Err(data_err!("ridge_fit on an empty row set"));
    }
    if lambda < 0.0 {
        return Err(data_err!("negative ridge penalty {lambda}"));
    }
    debug_assert_eq!(x.len(), rows * features);
    debug_assert_eq!(y.len(), rows * targets);
    let d = features + 1;

    // Augmented design matrix [X | 1].
    let mut xa = vec![0.0f64; rows * d];
    for r in 0..rows {
        xa[r * d..r * d + features].copy_from_slice(&x[r * features..(r + 1) * features]);
        xa[r * d + features] = 1.0;
    }

    // A = Xa' Xa (+ lambda on the feature diagonal), B = Xa' Y.
    let mut a = vec![0.0f64; d * d];
    f64::gemm(d, rows, d, &xa, 1, d as isize, &xa, d as isize, 1, 0.0, &mut a);
    for i in 0..features {
        a[i * d + i] += lambda;
    }
    let mut b = vec![0.0f64; d * targets];
    f64::gemm(
        d,
        rows,
        targets,
        &xa,
        1,
        d as isize,
        y,
        targets as isize,
        1,
        0.0,
        &mut b,
    );

    let chol = cholesky(&mut a, d).map_err(|_| {
        Error::Diverged(
            "ridge normal equations are not positive definite (rank-deficient features at lambda = 0)"
                .to_string(),
        )
    })?;
    cholesky_solve(chol, d, &mut b, targets);

    Ok(RidgeModel {
        weights: b,
        features,
        targets,
        lambda,
        horizon,
    })
}

/// In-place lower-triangular Cholesky; fails on a non-positive pivot.
fn cholesky(a: &mut [f64], n: usize) -> std::result::Result<&[f64], ()> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(());
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / diag;
        }
    }
    Ok(a)
}

/// Solve L L' W = B for W (B overwritten), B is n x q.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], q: usize) {
    // Forward: L Z = B.
    for i in 0..n {
        for col in 0..q {
            let mut v = b[i * q + col];
            for k in 0..i {
                v -= l[i * n + k] * b[k * q + col];
            }
            b[i * q + col] = v / l[i * n + i];
        }
    }
    // Backward: L' W = Z.
    for i in (0..n).rev() {
        for col in 0..q {
            let mut v = b[i * q + col];
            for k in i + 1..n {
                v -= l[k * n + i] * b[k * q + col];
            }
            b[i * q + col] = v / l[i * n + i];
        }
    }
}

/// Feature/target matrices for one split.
#[derive(Debug, Clone, Default)]
pub struct RowSet {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub rows: usize,
}

/// Row sets for train/val/test at one horizon.
pub struct RowSets {
    pub train: RowSet,
    pub val: RowSet,
    pub test: RowSet,
    pub features: usize,
    pub targets: usize,
}

/// Pool (node, window-end) pairs across a split into flat rows. Window ends
/// whose `horizon` future steps leave the split are dropped; training rows
/// are uniformly subsampled to `fraction`.
#[allow(clippy::too_many_arguments)]
pub fn build_rows(
    stores: (&RepresentationStore, &RepresentationStore, &RepresentationStore),
    prep: &Prepared<'_>,
    horizon: usize,
    fraction: f64,
    seed: u64,
) -> Result<RowSets> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(data_err!("sample fraction {fraction} outside (0, 1]"));
    }
    let (train_store, val_store, test_store) = stores;
    let features = train_store.dim;
    let targets = horizon * prep.data.feature_count;

    let full = |store: &RepresentationStore, split: Split| -> RowSet {
        collect_rows(store, prep, split, horizon, None)
    };
    let train = collect_rows(
        train_store,
        prep,
        Split::Train,
        horizon,
        Some((fraction, seed)),
    );
    let val = full(val_store, Split::Val);
    let test = full(test_store, Split::Test);
    if train.rows == 0 || val.rows == 0 || test.rows == 0 {
        return Err(data_err!(
            "empty row set at horizon {horizon} (train {}, val {}, test {})",
            train.rows,
            val.rows,
            test.rows
        ));
    }
    Ok(RowSets {
        train,
        val,
        test,
        features,
        targets,
    })
}

fn collect_rows(
    store: &RepresentationStore,
    prep: &Prepared<'_>,
    split: Split,
    horizon: usize,
    subsample: Option<(f64, u64)>,
) -> RowSet {
    let (_, split_end) = prep.splits.range(split);
    let d = store.dim;
    let c = prep.data.feature_count;
    let eligible: Vec<usize> = (0..store.window_count())
        .filter(|&w| store.window_ends[w] + horizon < split_end)
        .collect();
    let n = store.node_count;

    // Pairs are ordered (window, node); subsampling picks from this pool.
    let total = eligible.len() * n;
    let picked: Vec<usize> = match subsample {
        Some((fraction, seed)) => {
            let count = ((fraction * total as f64).floor() as usize).max(1);
            let mut rng = Rng::new(seed);
            rng.choose(total, count.min(total))
        }
        None => (0..total).collect(),
    };

    let mut x = Vec::with_capacity(picked.len() * d);
    let mut y = Vec::with_capacity(picked.len() * horizon * c);
    for &pair in &picked {
        let (wi, node) = (pair / n, pair % n);
        let w = eligible[wi];
        x.extend(store.row(w, node).iter().map(|&v| v as f64));
        let end = store.window_ends[w];
        for step in 1..=horizon {
            let t = end + step;
            for ch in 0..c {
                y.push(prep.values_norm[(node * prep.data.t_total + t) * c + ch] as f64);
            }
        }
    }
    RowSet {
        x,
        y,
        rows: picked.len(),
    }
}

/// Mean squared and absolute error over all (row, step, feature) entries.
pub fn evaluate(model: &RidgeModel, test: &RowSet) -> Result<(f64, f64)> {
    if test.rows == 0 {
        return Err(data_err!("evaluate on an empty test set"));
    }
    let q = model.targets;
    let mut pred = vec![0.0f64; q];
    let mut se = 0.0;
    let mut ae = 0.0;
    for r in 0..test.rows {
        model.predict_into(&test.x[r * model.features..(r + 1) * model.features], &mut pred);
        for j in 0..q {
            let e = pred[j] - test.y[r * q + j];
            se += e * e;
            ae += e.abs();
        }
    }
    let count = (test.rows * q) as f64;
    Ok((se / count, ae / count))
}

/// Fit each penalty on the training rows and keep the best validation MSE;
/// ties go to the larger penalty.
pub fn ridge_grid_search(rows: &RowSets, grid: &[f64], horizon: usize) -> Result<RidgeModel> {
    if grid.is_empty() {
        return Err(data_err!("empty ridge penalty grid"));
    }
    // Ascending order plus replace-on-tie sends ties to the larger penalty.
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite penalties"));
    let mut best: Option<(f64, RidgeModel)> = None;
    for &lambda in &grid {
        let model = ridge_fit(
            &rows.train.x,
            rows.train.rows,
            rows.features,
            &rows.train.y,
            rows.targets,
            lambda,
            horizon,
        )?;
        let (mse, _) = evaluate(&model, &rows.val)?;
        let better = match &best {
            Some((best_mse, _)) => mse <= *best_mse,
            None => true,
        };
        if better {
            best = Some((mse, model));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// The default regularization grid (13 penalties).
pub fn default_grid() -> Vec<f64> {
    vec![
        0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0,
    ]
}

/// One line of the evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub method: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub lambda: Option<f64>,
    pub fraction: Option<f64>,
    pub repeats: usize,
}

/// Full downstream report plus wall-clock timings (timings are reported in a
/// separate artifact so the metric files stay byte-reproducible).
#[derive(Debug, Clone, Serialize, Default)]
pub struct EvalReport {
    pub entries: Vec<ReportEntry>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,horizon,mse,mae,lambda,fraction,repeats\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.method,
                e.horizon,
                e.mse,
                e.mae,
                e.lambda.map_or(String::new(), |l| l.to_string()),
                e.fraction.map_or(String::new(), |f| f.to_string()),
                e.repeats
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("report serializes")
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("stage,seconds\n");
        for (stage, secs) in &self.timings {
            out.push_str(&format!("{stage},{secs:.3}\n"));
        }
        out
    }

    pub fn entry(&self, method: &str, horizon: usize) -> Option<&ReportEntry> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.horizon == horizon)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
    pub fraction: f64,
    pub repeats: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            horizons: vec![12, 24, 48, 96],
            fraction: 0.05,
            repeats: 10,
            seed: 1,
            grid: default_grid(),
        }
    }
}

/// Last-value baseline: every future step repeats the final input value.
pub fn hl_baseline(prep: &Prepared<'_>, input_len: usize, horizon: usize) -> Result<ReportEntry> {
    let (split_start, split_end) = prep.splits.range(Split::Test);
    let c = prep.data.feature_count;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    let last_end = split_end.checked_sub(horizon + 1);
    let first_end = split_start + input_len - 1;
    let Some(last_end) = last_end else {
        return Err(data_err!("test split shorter than horizon {horizon}"));
    };
    for end in first_end..=last_end {
        for node in 0..prep.data.node_count {
            for ch in 0..c {
                let base = prep.values_norm[(node * prep.data.t_total + end) * c + ch] as f64;
                for step in 1..=horizon {
                    let truth =
                        prep.values_norm[(node * prep.data.t_total + end + step) * c + ch] as f64;
                    let e = base - truth;
                    se += e * e;
                    ae += e.abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(data_err!("no test windows for the HL baseline"));
    }
    Ok(ReportEntry {
        method: "HL".to_string(),
        horizon,
        mse: se / count as f64,
        mae: ae / count as f64,
        lambda: None,
        fraction: None,
        repeats: 1,
    })
}

/// Ridge on raw per-node input windows (the representation is bypassed);
/// uses the full training rows.
pub fn raw_ridge_baseline(
    prep: &Prepared<'_>,
    input_len: usize,
    horizon: usize,
    grid: &[f64],
) -> Result<ReportEntry> {
    let mut sets = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        sets.push(raw_rows(prep, split, input_len, horizon));
    }
    let test = sets.pop().expect("three sets");
    let val = sets.pop().expect("three sets");
    let train = sets.pop().expect("three sets");
    if train.rows == 0 || val.rows == 0 || test.rows == 0 {
        return Err(data_err!("raw ridge baseline: empty split at horizon {horizon}"));
    }
    let rows = RowSets {
        features: input_len * prep.data.feature_count,
        targets: horizon * prep.data.feature_count,
        train,
        val,
        test,
    };
    let model = ridge_grid_search(&rows, grid, horizon)?;
    let (mse, mae) = evaluate(&model, &rows.test)?;
    Ok(ReportEntry {
        method: "RidgeRaw".to_string(),
        horizon,
        mse,
        mae,
        lambda: Some(model.lambda),
        fraction: None,
        repeats: 1,
    })
}

fn raw_rows(prep: &Prepared<'_>, split: Split, input_len: usize, horizon: usize) -> RowSet {
    let (split_start, split_end) = prep.splits.range(split);
    let c = prep.data.feature_count;
    let t_total = prep.data.t_total;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0usize;
    if split_end - split_start < input_len + horizon {
        return RowSet::default();
    }
    for start in split_start..=split_end - input_len - horizon {
        for node in 0..prep.data.node_count {
            let base = (node * t_total + start) * c;
            x.extend(
                prep.values_norm[base..base + input_len * c]
                    .iter()
                    .map(|&v| v as f64),
            );
            let tgt = (node * t_total + start + input_len) * c;
            y.extend(
                prep.values_norm[tgt..tgt + horizon * c]
                    .iter()
                    .map(|&v| v as f64),
            );
            rows += 1;
        }
    }
    RowSet { x, y, rows }
}

/// The full protocol: encode all splits, then per horizon fit the
/// representation probe (averaged over sampling repetitions) and both
/// baselines.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    prep: &Prepared<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let model = ckpt.build_model()?;
    let mut report = EvalReport::default();

    let t0 = std::time::Instant::now();
    let train_store = encode_dataset(&model, prep, Split::Train)?;
    let val_store = encode_dataset(&model, prep, Split::Val)?;
    let test_store = encode_dataset(&model, prep, Split::Test)?;
    report.timings.push(("encode".to_string(), t0.elapsed().as_secs_f64()));

    for &horizon in &opts.horizons {
        let t1 = std::time::Instant::now();
        let mut mse_acc = 0.0;
        let mut mae_acc = 0.0;
        let mut first_lambda = None;
        for rep in 0..opts.repeats.max(1) {
            let rep_seed = derive(derive(opts.seed, horizon as u64), rep as u64);
            let rows = build_rows(
                (&train_store, &val_store, &test_store),
                prep,
                horizon,
                opts.fraction,
                rep_seed,
            )?;
            let probe = ridge_grid_search(&rows, &opts.grid, horizon)?;
            let (mse, mae) = evaluate(&probe, &rows.test)?;
            if first_lambda.is_none() {
                first_lambda = Some(probe.lambda);
            }
            mse_acc += mse;
            mae_acc += mae;
        }
        let reps = opts.repeats.max(1) as f64;
        report.entries.push(ReportEntry {
            method: "RepRidge".to_string(),
            horizon,
            mse: mse_acc / reps,
            mae: mae_acc / reps,
            lambda: first_lambda,
            fraction: Some(opts.fraction),
            repeats: opts.repeats.max(1),
        });
        report.entries.push(hl_baseline(prep, ckpt.config.input_len, horizon)?);
        report
            .entries
            .push(raw_ridge_baseline(prep, ckpt.config.input_len, horizon, &opts.grid)?);
        report
            .timings
            .push((format!("horizon_{horizon}"), t1.elapsed().as_secs_f64()));
    }
    Ok(report)
}
