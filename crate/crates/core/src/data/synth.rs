//! Seeded synthetic spatiotemporal data.
//!
//! Each node carries a daily sinusoid with a weekly amplitude modulation plus
//! AR(1) noise diffused over a random geometric graph, so the output has the
//! planted periodicity and spatial correlation structure that the model is
//! meant to pick up. The generator also emits its ground-truth adjacency.

use std::path::Path;

use super::SeriesTensor;
use crate::error::{data_err, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub node_count: usize,
    pub days: usize,
    pub steps_per_day: usize,
    /// Outgoing neighbors per node in the geometric graph.
    pub graph_degree: usize,
    /// Mixing weight of neighbor noise, 0 = independent nodes.
    pub diffusion_weight: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            node_count: 64,
            days: 14,
            steps_per_day: 288,
            graph_degree: 4,
            diffusion_weight: 0.3,
            noise_sigma: 0.3,
            seed: 1,
        }
    }
}

/// Generated dataset plus the graph that produced it.
pub struct SynthOutput {
    pub series: SeriesTensor,
    /// (from, to, weight) rows of the row-normalized diffusion graph.
    pub adjacency: Vec<(usize, usize, f64)>,
    /// Signal-only and noise-only components, same layout as the series.
    pub signal: Vec<f32>,
    pub noise: Vec<f32>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.node_count < 2 || cfg.days < 2 {
        return Err(data_err!(
            "generator needs at least 2 nodes and 2 days, got {} and {}",
            cfg.node_count,
            cfg.days
        ));
    }
    if cfg.steps_per_day == 0 || 86_400 % cfg.steps_per_day != 0 {
        return Err(data_err!("steps_per_day {} must divide 86400", cfg.steps_per_day));
    }
    if !(0.0..=1.0).contains(&cfg.diffusion_weight) {
        return Err(data_err!("diffusion_weight must lie in [0, 1]"));
    }
    let n = cfg.node_count;
    let spd = cfg.steps_per_day;
    let t_total = cfg.days * spd;
    let mut rng = Rng::new(cfg.seed);

    // Node positions in the unit square; k-nearest neighbors by distance.
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.next_f64(), rng.next_f64())).collect();
    let degree = cfg.graph_degree.min(n - 1);
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            dist2(pos[i], pos[a])
                .partial_cmp(&dist2(pos[i], pos[b]))
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        others.truncate(degree);
        others.sort_unstable();
        neighbors.push(others);
    }

    // Per-node signal parameters; phase follows position so that nearby nodes
    // look alike.
    let amplitude: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.next_f64()).collect();
    let base: Vec<f64> = (0..n).map(|_| 2.0 + rng.next_f64()).collect();
    let phase: Vec<f64> = pos
        .iter()
        .map(|&(x, y)| 0.25 * std::f64::consts::TAU * (x + y) / 2.0)
        .collect();

    let mut signal = vec![0.0f32; n * t_total];
    for node in 0..n {
        for t in 0..t_total {
            let daily = (std::f64::consts::TAU * t as f64 / spd as f64 + phase[node]).sin();
            let weekly = 1.0 + 0.3 * (std::f64::consts::TAU * t as f64 / (7.0 * spd as f64)).sin();
            signal[node * t_total + t] = (base[node] + amplitude[node] * daily * weekly) as f32;
        }
    }

    // AR(1) noise per node, then one-hop diffusion over the graph.
    let rho = 0.8;
    let mut ar = vec![0.0f64; n];
    let mut noise = vec![0.0f32; n * t_total];
    let w = cfg.diffusion_weight;
    for t in 0..t_total {
        for node_ar in ar.iter_mut() {
            *node_ar = rho * *node_ar + rng.normal() * cfg.noise_sigma;
        }
        for node in 0..n {
            let mixed = if w > 0.0 && !neighbors[node].is_empty() {
                let avg: f64 =
                    neighbors[node].iter().map(|&j| ar[j]).sum::<f64>() / neighbors[node].len() as f64;
                (1.0 - w) * ar[node] + w * avg
            } else {
                ar[node]
            };
            noise[node * t_total + t] = mixed as f32;
        }
    }

    let values: Vec<f32> = signal.iter().zip(&noise).map(|(s, e)| s + e).collect();
    let series = SeriesTensor::new(values, n, t_total, 1, spd, 0, 0)?;

    let mut adjacency = Vec::new();
    for (i, ns) in neighbors.iter().enumerate() {
        let weight = w / ns.len().max(1) as f64;
        for &j in ns {
            adjacency.push((i, j, weight));
        }
    }
    Ok(SynthOutput {
        series,
        adjacency,
        signal,
        noise,
    })
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Write the generator's ground-truth adjacency next to the container.
pub fn save_adjacency(rows: &[(usize, usize, f64)], container_path: &Path) -> Result<()> {
    let mut text = String::from("from,to,weight\n");
    for (i, j, w) in rows {
        text.push_str(&format!("{i},{j},{w}\n"));
    }
    let mut os = container_path.as_os_str().to_owned();
    os.push(".adj.csv");
    std::fs::write(std::path::PathBuf::from(os), text)?;
    Ok(())
}
