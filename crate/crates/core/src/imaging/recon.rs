//! Simple back-projection, list-mode MLEM and the stochastic origin
//! ensemble, all driven by Gaussian cone kernels on the angular grid.
//!
//! Work is split into fixed-size event chunks whose partial images are summed
//! in chunk order, so results do not depend on the worker count.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventList;
use crate::geom::Vec3;
use crate::kinematics::{cone_from_event, ConeParams};
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::simulator::CameraModel;

use super::kernel::{dense_row, sparse_row, SparseSystem, DEFAULT_SPARSE_THRESHOLD};
use super::{AngularImage, Grid, GridError};

const CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("no reconstructable events ({invalid} of {total} rejected)")]
    EmptyInput { total: usize, invalid: usize },
    #[error("invalid reconstruction config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Cone broadening, radians. `None` uses the median per-event angular
    /// uncertainty, floored at one pixel.
    pub kernel_sigma: Option<f64>,
    /// Use each event's own angular uncertainty (floored at one pixel)
    /// instead of a shared width.
    pub per_event_sigma: bool,
    pub mlem_iters: usize,
    /// Number of SOE moves; `None` means ten per event.
    pub soe_iters: Option<usize>,
    pub sparse_threshold: f64,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            kernel_sigma: None,
            per_event_sigma: false,
            mlem_iters: 30,
            soe_iters: None,
            sparse_threshold: DEFAULT_SPARSE_THRESHOLD,
            seed: 0,
        }
    }
}

impl ReconConfig {
    /// Returns `(field, message)` for every violated constraint.
    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if let Some(s) = self.kernel_sigma {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(("kernel_sigma", format!("must be positive, got {s}")));
            }
        }
        if self.mlem_iters == 0 {
            errs.push(("mlem_iters", "must be at least 1".to_string()));
        }
        if self.soe_iters == Some(0) {
            errs.push(("soe_iters", "must be at least 1".to_string()));
        }
        if !(self.sparse_threshold > 0.0 && self.sparse_threshold < 1.0) {
            errs.push(("sparse_threshold", format!("must lie in (0, 1), got {}", self.sparse_threshold)));
        }
        errs
    }

    fn check(&self) -> Result<(), ReconError> {
        match self.validate().into_iter().next() {
            Some((field, message)) => Err(ReconError::InvalidConfig { field, message }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub n_events: usize,
    pub n_invalid: usize,
    pub n_empty_rows: usize,
    /// Shared kernel width in radians, or the median when widths are per event.
    pub kernel_sigma: f64,
    pub nnz: usize,
}

struct Cones {
    cones: Vec<ConeParams>,
    sigmas: Vec<f64>,
    report: ReconReport,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn prepare_cones(list: &EventList, grid: Grid, camera: &CameraModel, cfg: &ReconConfig) -> Result<Cones, ReconError> {
    cfg.check()?;
    Grid::new(grid.width, grid.height)?;
    let cones: Vec<ConeParams> = list
        .events
        .iter()
        .filter_map(|ev| cone_from_event(ev, list.gap_mm, camera).ok().flatten())
        .collect();
    let total = list.len();
    let invalid = total - cones.len();
    if cones.is_empty() {
        return Err(ReconError::EmptyInput { total, invalid });
    }
    let floor = grid.pixel_angle();
    let own: Vec<f64> = cones.iter().map(|c| c.sigma_theta.max(floor)).collect();
    let shared = cfg.kernel_sigma.unwrap_or_else(|| median(&own));
    let sigmas = if cfg.per_event_sigma {
        own
    } else {
        vec![shared; cones.len()]
    };
    let kernel_sigma = if cfg.per_event_sigma { median(&sigmas) } else { shared };
    Ok(Cones {
        cones,
        sigmas,
        report: ReconReport {
            n_events: total,
            n_invalid: invalid,
            kernel_sigma,
            ..ReconReport::default()
        },
    })
}

fn sum_partials(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Simple back-projection: the sum of every valid event's cone kernel.
pub fn sbp(
    list: &EventList,
    grid: Grid,
    camera: &CameraModel,
    cfg: &ReconConfig,
) -> Result<(AngularImage, ReconReport), ReconError> {
    let prep = prepare_cones(list, grid, camera, cfg)?;
    let dirs = grid.directions();
    let j = grid.len();
    let partials: Vec<Vec<f64>> = prep
        .cones
        .par_chunks(CHUNK)
        .zip(prep.sigmas.par_chunks(CHUNK))
        .map(|(cones, sigmas)| {
            let mut acc = vec![0.0; j];
            let mut row = vec![0.0; j];
            for (c, &s) in cones.iter().zip(sigmas) {
                dense_row(c, &dirs, s, &mut row);
                for (a, r) in acc.iter_mut().zip(&row) {
                    *a += r;
                }
            }
            acc
        })
        .collect();
    let values = sum_partials(partials, j);
    Ok((AngularImage::from_values(grid, values)?, prep.report))
}

/// Sparse system rows for the valid events; events whose row is empty are
/// dropped and counted.
pub fn build_system(
    list: &EventList,
    grid: Grid,
    camera: &CameraModel,
    cfg: &ReconConfig,
) -> Result<(SparseSystem, ReconReport), ReconError> {
    let prep = prepare_cones(list, grid, camera, cfg)?;
    let dirs: Vec<Vec3> = grid.directions();
    let rows: Vec<Vec<(u32, f64)>> = prep
        .cones
        .par_iter()
        .zip(prep.sigmas.par_iter())
        .map(|(c, &s)| sparse_row(c, &dirs, s, cfg.sparse_threshold))
        .collect();
    let mut report = prep.report;
    let kept: Vec<Vec<(u32, f64)>> = rows.into_iter().filter(|r| !r.is_empty()).collect();
    report.n_empty_rows = prep.cones.len() - kept.len();
    if kept.is_empty() {
        return Err(ReconError::EmptyInput {
            total: report.n_events,
            invalid: report.n_events,
        });
    }
    let sys = SparseSystem::from_rows(grid.len(), &kept);
    report.nnz = sys.nnz();
    Ok((sys, report))
}

/// Log-likelihood after each iterate, starting with the initial image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlemTrace {
    pub log_likelihood: Vec<f64>,
}

fn forward_back(sys: &SparseSystem, lambda: &[f64]) -> (Vec<f64>, f64) {
    let n = sys.n_rows();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|a| (a, (a + CHUNK).min(n))).collect();
    let parts: Vec<(Vec<f64>, f64)> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut back = vec![0.0; sys.n_pixels];
            let mut ll = 0.0;
            for i in a..b {
                let (idx, w) = sys.row(i);
                let p: f64 = idx.iter().zip(w).map(|(&j, &t)| t * lambda[j as usize]).sum();
                if p > 0.0 {
                    ll += p.ln();
                    let inv = 1.0 / p;
                    for (&j, &t) in idx.iter().zip(w) {
                        back[j as usize] += t * inv;
                    }
                }
            }
            (back, ll)
        })
        .collect();
    let ll = parts.iter().map(|p| p.1).sum();
    (sum_partials(parts.into_iter().map(|p| p.0).collect(), sys.n_pixels), ll)
}

/// MLEM with unit sensitivity from a uniform start:
/// `lambda_j <- lambda_j * sum_i t_ij / sum_k t_ik lambda_k`.
pub fn mlem_system(sys: &SparseSystem, iters: usize) -> (Vec<f64>, MlemTrace) {
    let mut lambda = vec![1.0; sys.n_pixels];
    let mut trace = MlemTrace::default();
    for _ in 0..iters {
        let (back, ll) = forward_back(sys, &lambda);
        trace.log_likelihood.push(ll - lambda.iter().sum::<f64>());
        for (l, b) in lambda.iter_mut().zip(&back) {
            *l *= b;
        }
    }
    let (_, ll) = forward_back(sys, &lambda);
    trace.log_likelihood.push(ll - lambda.iter().sum::<f64>());
    (lambda, trace)
}

pub fn mlem(
    list: &EventList,
    grid: Grid,
    camera: &CameraModel,
    cfg: &ReconConfig,
) -> Result<(AngularImage, ReconReport), ReconError> {
    let (sys, report) = build_system(list, grid, camera, cfg)?;
    let (lambda, _) = mlem_system(&sys, cfg.mlem_iters);
    Ok((AngularImage::from_values(grid, lambda)?, report))
}

/// Markov chain over per-event origin pixels.
#[derive(Debug, Clone)]
pub struct SoeState<'a> {
    sys: &'a SparseSystem,
    cumulative: Vec<f64>,
    origins: Vec<u32>,
    counts: Vec<u32>,
    rng: Rng,
    accepted: u64,
}

impl<'a> SoeState<'a> {
    pub fn new(sys: &'a SparseSystem, seed: u64) -> Self {
        let mut cumulative = Vec::with_capacity(sys.nnz());
        for i in 0..sys.n_rows() {
            let mut acc = 0.0;
            for &w in sys.row(i).1 {
                acc += w;
                cumulative.push(acc);
            }
        }
        let mut state = Self {
            sys,
            cumulative,
            origins: Vec::with_capacity(sys.n_rows()),
            counts: vec![0; sys.n_pixels],
            rng: stream_rng(derive_seed(seed, 0x736f_6521), 0),
            accepted: 0,
        };
        let init_seed = derive_seed(seed, 0x696e_6974);
        for i in 0..sys.n_rows() {
            let mut rng = stream_rng(init_seed, i as u64);
            let j = state.propose(i, &mut rng);
            state.origins.push(j);
            state.counts[j as usize] += 1;
        }
        state
    }

    fn propose(&self, event: usize, rng: &mut Rng) -> u32 {
        let (a, b) = (self.sys.offsets[event], self.sys.offsets[event + 1]);
        let cum = &self.cumulative[a..b];
        let target = rng.random::<f64>() * cum[cum.len() - 1];
        let k = cum.partition_point(|&c| c <= target).min(cum.len() - 1);
        self.sys.indices[a + k]
    }

    /// One relocation attempt: a random event proposes a new origin from its
    /// own row and moves with probability `min(1, (n_dest + 1) / n_src)`,
    /// where `n_src` still counts the moving origin.
    pub fn step(&mut self) {
        let n = self.origins.len();
        let e = self.rng.random_range(0..n);
        let mut rng = std::mem::replace(&mut self.rng, stream_rng(0, 0));
        let dest = self.propose(e, &mut rng);
        let src = self.origins[e];
        if dest != src {
            let n_dest = self.counts[dest as usize] as f64;
            let n_src = self.counts[src as usize] as f64;
            let ratio = (n_dest + 1.0) / n_src;
            if ratio >= 1.0 || rng.random::<f64>() < ratio {
                self.counts[src as usize] -= 1;
                self.counts[dest as usize] += 1;
                self.origins[e] = dest;
                self.accepted += 1;
            }
        }
        self.rng = rng;
    }

    pub fn origins(&self) -> &[u32] {
        &self.origins
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }
}

pub fn soe_system(sys: &SparseSystem, moves: usize, seed: u64) -> Vec<u32> {
    let mut state = SoeState::new(sys, seed);
    for _ in 0..moves {
        state.step();
    }
    state.counts
}

pub fn soe(
    list: &EventList,
    grid: Grid,
    camera: &CameraModel,
    cfg: &ReconConfig,
) -> Result<(AngularImage, ReconReport), ReconError> {
    let (sys, report) = build_system(list, grid, camera, cfg)?;
    let moves = cfg.soe_iters.unwrap_or(10 * sys.n_rows());
    let counts = soe_system(&sys, moves, cfg.seed);
    let values = counts.into_iter().map(f64::from).collect();
    Ok((AngularImage::from_values(grid, values)?, report))
}
