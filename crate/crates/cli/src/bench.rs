//! Table-style comparison of the reconstruction algorithms on simulated
//! single-source samples.

use rayon::prelude::*;
use serde::Serialize;

use ccir_core::events::filter_with_windows;
use ccir_core::imaging::{mlem, sbp, soe, ReconConfig, ReconReport};
use ccir_core::labels::make_label;
use ccir_core::metrics::{psnr, ssim};
use ccir_core::rng::derive_seed;
use ccir_core::simulator::simulate;
use ccir_core::{AngularImage, EventList, Grid, SimOptions, SourceSpec};
use ccir_net::infer::infer_patched;
use ccir_net::model::Network;

use crate::config::RunConfig;
use crate::CliError;

pub const ALGORITHMS: [&str; 3] = ["sbp", "soe", "mlem"];

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub algorithm: String,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub samples: usize,
}

/// Simulated sample `index` of a benchmark keyed by `seed`.
pub fn bench_sample(cfg: &RunConfig, events: usize, seed: u64, index: usize) -> Result<(EventList, Vec<SourceSpec>), CliError> {
    let (sources, _) = cfg.dataset.draw(seed, index);
    let opts = SimOptions {
        seed: derive_seed(seed, index as u64),
        ..cfg.sim.clone()
    };
    let list = simulate(&cfg.camera, &sources, events, &opts).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((list, sources))
}

/// Classical reconstruction after the configured event filter.
pub fn reconstruct(
    cfg: &RunConfig,
    algo: &str,
    list: &EventList,
    grid: Grid,
    seed: u64,
) -> Result<(AngularImage, ReconReport), CliError> {
    let list = if cfg.filter.enabled {
        filter_with_windows(list, &cfg.filter.windows(&cfg.camera)).map_err(|e| CliError::Data(e.to_string()))?
    } else {
        list.clone()
    };
    let rc = ReconConfig {
        seed,
        ..cfg.recon.clone()
    };
    let out = match algo {
        "sbp" => sbp(&list, grid, &cfg.camera, &rc),
        "soe" => soe(&list, grid, &cfg.camera, &rc),
        "mlem" => mlem(&list, grid, &cfg.camera, &rc),
        other => return Err(CliError::Usage(format!("unknown algorithm {other}"))),
    };
    out.map_err(|e| CliError::Data(e.to_string()))
}

/// Peak-normalized classical image, as scored against labels.
pub fn classical(cfg: &RunConfig, algo: &str, list: &EventList, grid: Grid, seed: u64) -> Result<AngularImage, CliError> {
    Ok(reconstruct(cfg, algo, list, grid, seed)?.0.normalized_to_peak())
}

fn score(label: &AngularImage, img: &AngularImage) -> (f64, f64) {
    (
        psnr(label, img).expect("same grid").as_f64(),
        ssim(label, img).expect("same grid"),
    )
}

/// Mean PSNR and SSIM per algorithm, in the order sbp, soe, mlem, network.
pub fn run_bench(
    cfg: &RunConfig,
    samples: usize,
    events: usize,
    net: Option<&Network<f32>>,
) -> Result<Vec<BenchRow>, CliError> {
    let grid = cfg.grid;
    let per_sample: Vec<Vec<(f64, f64)>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let (list, sources) = bench_sample(cfg, events, cfg.seed, i)?;
            let label = make_label(&sources, cfg.label_sigma_deg, grid);
            let mut scores = Vec::new();
            for algo in ALGORITHMS {
                let img = classical(cfg, algo, &list, grid, derive_seed(cfg.seed, i as u64))?;
                scores.push(score(&label, &img));
            }
            if let Some(net) = net {
                let (img, _) = infer_patched(net, &list).map_err(|e| CliError::Data(e.to_string()))?;
                let label = make_label(&sources, cfg.label_sigma_deg, img.grid());
                scores.push(score(&label, &img));
            }
            Ok(scores)
        })
        .collect::<Result<_, CliError>>()?;
    let names: Vec<&str> = ALGORITHMS.iter().copied().chain(net.map(|_| "network")).collect();
    Ok(names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let n = per_sample.len().max(1) as f64;
            BenchRow {
                algorithm: name.to_string(),
                mean_psnr_db: per_sample.iter().map(|s| s[k].0).sum::<f64>() / n,
                mean_ssim: per_sample.iter().map(|s| s[k].1).sum::<f64>() / n,
                samples: per_sample.len(),
            }
        })
        .collect())
}
