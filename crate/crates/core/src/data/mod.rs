//! Dataset container, normalization, chronological splitting, and windowing.

mod container;
mod stats;
mod synth;

pub use container::{import_csv, load_container, save_container};
pub use stats::{compute_cv, trend_seasonality_strength, CvReport, StrengthReport};
pub use synth::{save_adjacency, synth_generate, SynthConfig, SynthOutput};

use crate::error::{data_err, Result};

/// Raw spatiotemporal data: `node_count` sensors over `t_total` steps of
/// `feature_count` channels, plus the calendar information needed to derive
/// time-of-day and day-of-week indices for any step.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTensor {
    pub values: Vec<f32>, // [node_count, t_total, feature_count] row-major
    pub node_count: usize,
    pub t_total: usize,
    pub feature_count: usize,
    pub steps_per_day: usize,
    pub start_tod: usize,
    pub start_dow: usize,
    pub interval_seconds: usize,
}

impl SeriesTensor {
    pub fn new(
        values: Vec<f32>,
        node_count: usize,
        t_total: usize,
        feature_count: usize,
        steps_per_day: usize,
        start_tod: usize,
        start_dow: usize,
    ) -> Result<Self> {
        if node_count * t_total * feature_count != values.len() {
            return Err(data_err!(
                "series of {}x{}x{} wants {} values, got {}",
                node_count,
                t_total,
                feature_count,
                node_count * t_total * feature_count,
                values.len()
            ));
        }
        if steps_per_day == 0 || 86_400 % steps_per_day != 0 {
            return Err(data_err!("steps_per_day {steps_per_day} must divide 86400 seconds"));
        }
        if start_tod >= steps_per_day || start_dow >= 7 {
            return Err(data_err!("calendar origin ({start_tod}, {start_dow}) out of range"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(data_err!("series contains non-finite values"));
        }
        Ok(SeriesTensor {
            values,
            node_count,
            t_total,
            feature_count,
            steps_per_day,
            start_tod,
            start_dow,
            interval_seconds: 86_400 / steps_per_day,
        })
    }

    #[inline]
    pub fn at(&self, node: usize, t: usize, c: usize) -> f32 {
        self.values[(node * self.t_total + t) * self.feature_count + c]
    }

    /// Time-of-day slot of absolute step `t`.
    pub fn tod_of(&self, t: usize) -> usize {
        (self.start_tod + t) % self.steps_per_day
    }

    /// Day-of-week of absolute step `t`.
    pub fn dow_of(&self, t: usize) -> usize {
        (self.start_dow + (self.start_tod + t) / self.steps_per_day) % 7
    }

    /// Copy of one node-major block [nodes, len, features] starting at `t0`.
    pub fn block(&self, t0: usize, len: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.node_count * len * self.feature_count);
        for n in 0..self.node_count {
            let base = (n * self.t_total + t0) * self.feature_count;
            out.extend_from_slice(&self.values[base..base + len * self.feature_count]);
        }
        out
    }
}

/// Pooled z-score statistics, fitted on the training split only and shared by
/// all variables collectively.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Chronological 6:2:2 index ranges over the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

/// Which of the three ranges to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(data_err!("unknown split '{other}'")),
        }
    }
}

impl SplitSpec {
    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        let (a, b) = self.range(split);
        b - a
    }
}

/// Split the time axis 6:2:2, preserving chronology. Train and validation get
/// the floors; test takes the remainder.
pub fn split_622(s: &SeriesTensor, min_window: usize) -> Result<SplitSpec> {
    let t = s.t_total;
    let train = (0.6 * t as f64).floor() as usize;
    let val = (0.2 * t as f64).floor() as usize;
    let test = t - train - val;
    if train < min_window || val < min_window || test < min_window {
        return Err(data_err!(
            "series of {t} steps is too short to split 6:2:2 with windows of {min_window}"
        ));
    }
    Ok(SplitSpec {
        train: (0, train),
        val: (train, train + val),
        test: (train + val, t),
    })
}

/// Fit pooled z-score statistics over a split of the series.
pub fn zscore_fit(s: &SeriesTensor, range: (usize, usize)) -> Result<NormStats> {
    let (t0, t1) = range;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for n in 0..s.node_count {
        for t in t0..t1 {
            for c in 0..s.feature_count {
                sum += s.at(n, t, c) as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(data_err!("empty range for normalization"));
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for n in 0..s.node_count {
        for t in t0..t1 {
            for c in 0..s.feature_count {
                let d = s.at(n, t, c) as f64 - mean;
                sq += d * d;
            }
        }
    }
    let std = (sq / count as f64).sqrt();
    if std <= 0.0 {
        return Err(data_err!("zero variance in training split; cannot z-score"));
    }
    Ok(NormStats { mean, std })
}

/// Apply z-scoring in place over a full value buffer.
pub fn zscore_apply(values: &mut [f32], stats: NormStats) {
    let (m, s) = (stats.mean as f32, stats.std as f32);
    for v in values.iter_mut() {
        *v = (*v - m) / s;
    }
}

/// Invert z-scoring in place.
pub fn zscore_invert(values: &mut [f32], stats: NormStats) {
    let (m, s) = (stats.mean as f32, stats.std as f32);
    for v in values.iter_mut() {
        *v = *v * s + m;
    }
}

/// One training instance: all nodes over `input_len` steps plus the
/// `target_len` future steps, with calendar indices for the input span.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub x_curr: Vec<f32>, // [node_count, input_len, feature_count]
    pub x_tgt: Vec<f32>,  // [node_count, target_len, feature_count]
    pub tod_idx: Vec<usize>,
    pub dow_idx: Vec<usize>,
    /// Absolute index of the last input step.
    pub window_end: usize,
}

/// Absolute start indices of every training window that fits inside the split
/// (input and target both inside), at stride 1.
pub fn window_starts(split_range: (usize, usize), input_len: usize, target_len: usize) -> Vec<usize> {
    window_starts_strided(split_range, input_len, target_len, 1)
}

/// Window starts at an arbitrary stride.
pub fn window_starts_strided(
    split_range: (usize, usize),
    input_len: usize,
    target_len: usize,
    stride: usize,
) -> Vec<usize> {
    let (a, b) = split_range;
    let need = input_len + target_len;
    if b - a < need || stride == 0 {
        return Vec::new();
    }
    (a..=b - need).step_by(stride).collect()
}

/// Absolute start indices of every input-only window inside the split.
pub fn input_window_starts(split_range: (usize, usize), input_len: usize) -> Vec<usize> {
    let (a, b) = split_range;
    if b - a < input_len {
        return Vec::new();
    }
    (a..=b - input_len).collect()
}

/// Materialize the window starting at absolute step `start`.
pub fn make_window(
    s: &SeriesTensor,
    values: &[f32],
    start: usize,
    input_len: usize,
    target_len: usize,
) -> WindowSample {
    let x_curr = block_of(values, s, start, input_len);
    let x_tgt = block_of(values, s, start + input_len, target_len);
    let tod_idx = (0..input_len).map(|i| s.tod_of(start + i)).collect();
    let dow_idx = (0..input_len).map(|i| s.dow_of(start + i)).collect();
    WindowSample {
        x_curr,
        x_tgt,
        tod_idx,
        dow_idx,
        window_end: start + input_len - 1,
    }
}

/// Like [`SeriesTensor::block`] but reading from an alternative (e.g.
/// normalized) value buffer with the same layout.
pub fn block_of(values: &[f32], s: &SeriesTensor, t0: usize, len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(s.node_count * len * s.feature_count);
    for n in 0..s.node_count {
        let base = (n * s.t_total + t0) * s.feature_count;
        out.extend_from_slice(&values[base..base + len * s.feature_count]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t_total: usize) -> SeriesTensor {
        let values: Vec<f32> = (0..3 * t_total).map(|i| i as f32).collect();
        SeriesTensor::new(values, 3, t_total, 1, 24, 0, 0).unwrap()
    }

    #[test]
    fn split_exact_ratio() {
        let spec = split_622(&toy(100), 1).unwrap();
        assert_eq!(spec.train, (0, 60));
        assert_eq!(spec.val, (60, 80));
        assert_eq!(spec.test, (80, 100));
    }

    #[test]
    fn split_floor_arithmetic_large() {
        let s = SeriesTensor::new(vec![0.0; 16992], 1, 16992, 1, 288, 0, 0).unwrap();
        let spec = split_622(&s, 24).unwrap();
        assert_eq!(spec.len(Split::Train), 10195);
        assert_eq!(spec.len(Split::Val), 3398);
        assert_eq!(spec.len(Split::Test), 3399);
        // Chronological, disjoint, covering.
        assert!(spec.train.1 == spec.val.0 && spec.val.1 == spec.test.0);
        assert_eq!(spec.test.1, 16992);
    }

    #[test]
    fn split_rejects_short_series() {
        assert!(split_622(&toy(10), 12).is_err());
    }

    #[test]
    fn zscore_hand_stats_and_roundtrip() {
        let s = SeriesTensor::new(vec![0.0, 2.0], 1, 2, 1, 24, 0, 0).unwrap();
        let stats = zscore_fit(&s, (0, 2)).unwrap();
        assert_eq!(stats.mean, 1.0);
        assert_eq!(stats.std, 1.0);
        let mut vals = s.values.clone();
        zscore_apply(&mut vals, stats);
        assert_eq!(vals, vec![-1.0, 1.0]);
        zscore_invert(&mut vals, stats);
        for (a, b) in vals.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zscore_rejects_constant_data() {
        let s = SeriesTensor::new(vec![3.0; 10], 1, 10, 1, 24, 0, 0).unwrap();
        assert!(zscore_fit(&s, (0, 10)).is_err());
    }

    #[test]
    fn norm_stats_blind_to_data_outside_train_range() {
        let mut s = toy(100);
        let spec = split_622(&s, 1).unwrap();
        let stats = zscore_fit(&s, spec.train).unwrap();
        // Rewriting the test range leaves the statistics untouched.
        for n in 0..3 {
            for t in spec.test.0..spec.test.1 {
                s.values[n * 100 + t] = -1e6;
            }
        }
        assert_eq!(zscore_fit(&s, spec.train).unwrap(), stats);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts((0, 100), 12, 12).len(), 77);
        assert_eq!(window_starts((0, 24), 12, 12).len(), 1);
        assert_eq!(window_starts((0, 23), 12, 12).len(), 0);
        assert_eq!(input_window_starts((0, 100), 12).len(), 89);
        assert_eq!(window_starts_strided((0, 100), 12, 12, 2).len(), 39);
    }

    #[test]
    fn window_calendar_indices() {
        let s = toy(100);
        let w = make_window(&s, &s.values, 0, 12, 12);
        assert_eq!(w.tod_idx[0], 0);
        for t in 0..11 {
            assert_eq!(w.tod_idx[t + 1], (w.tod_idx[t] + 1) % 24);
        }
        assert_eq!(w.window_end, 11);
        // A window crossing midnight bumps the day-of-week.
        let w2 = make_window(&s, &s.values, 20, 12, 12);
        assert_eq!(w2.tod_idx[4], 0);
        assert_eq!(w2.dow_idx[3], 0);
        assert_eq!(w2.dow_idx[4], 1);
    }

    #[test]
    fn series_rejects_nan_and_bad_calendar() {
        assert!(SeriesTensor::new(vec![f32::NAN; 4], 2, 2, 1, 24, 0, 0).is_err());
        assert!(SeriesTensor::new(vec![0.0; 4], 2, 2, 1, 7, 0, 0).is_err());
        assert!(SeriesTensor::new(vec![0.0; 4], 2, 2, 1, 24, 30, 0).is_err());
    }
}
