//! List-mode data model and the list-domain operators used before
//! reconstruction and during training augmentation.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::kinematics::compton_cos_theta;
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::simulator::SourceSpec;

/// Default layer separation of the prototype camera, millimeters.
pub const DEFAULT_GAP_MM: f64 = 50.0;

/// FWHM to standard deviation for a Gaussian.
pub const FWHM_TO_SIGMA: f64 = 2.355;

const ENERGY_REDRAWS: usize = 16;
const ENERGY_FLOOR_KEV: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("requested {requested} events but the list holds {available}")]
    OutOfBounds { requested: usize, available: usize },
    #[error("incompatible lists: {0}")]
    Incompatible(String),
}

/// One interaction recorded by a detector layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerHit {
    /// Camera frame, mm.
    pub position: Vec3,
    /// Deposited energy, keV.
    pub energy: f64,
}

/// Scatterer hit followed by absorber hit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidencePair {
    pub scatter_hit: LayerHit,
    pub absorb_hit: LayerHit,
}

/// A coincidence reduced to the lateral lever components and the two
/// deposited energies. The lever's z component is the list's `gap_mm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarFieldEvent {
    pub dx: f64,
    pub dy: f64,
    pub e1: f64,
    pub e2: f64,
}

impl FarFieldEvent {
    pub fn new(dx: f64, dy: f64, e1: f64, e2: f64) -> Self {
        Self { dx, dy, e1, e2 }
    }

    pub fn total_energy(&self) -> f64 {
        self.e1 + self.e2
    }

    pub fn mirrored(&self, axis: Axis) -> Self {
        match axis {
            Axis::X => Self { dx: -self.dx, ..*self },
            Axis::Y => Self { dy: -self.dy, ..*self },
        }
    }

    fn swapped(&self) -> Self {
        Self {
            e1: self.e2,
            e2: self.e1,
            ..*self
        }
    }
}

/// Free-form run metadata attached to a list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    pub events: Vec<FarFieldEvent>,
    pub gap_mm: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

impl EventList {
    pub fn new(events: Vec<FarFieldEvent>, gap_mm: f64) -> Self {
        Self {
            events,
            gap_mm,
            provenance: Provenance::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn with_events(&self, events: Vec<FarFieldEvent>) -> Self {
        Self {
            events,
            gap_mm: self.gap_mm,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Energy acceptance window around an emission line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineWindow {
    pub energy_kev: f64,
    pub tol_kev: f64,
}

impl LineWindow {
    /// Photopeak window of three standard deviations at the line.
    pub fn three_sigma(energy_kev: f64, res_511: f64) -> Self {
        Self {
            energy_kev,
            tol_kev: 3.0 * energy_sigma(energy_kev, res_511),
        }
    }

    fn contains(&self, total: f64) -> bool {
        (total - self.energy_kev).abs() <= self.tol_kev
    }
}

/// Relative FWHM resolution at `energy_kev`, scaled from its 511 keV value
/// by `sqrt(511 / E)`.
pub fn resolution_at(energy_kev: f64, res_511: f64) -> f64 {
    res_511 * (511.0 / energy_kev).sqrt()
}

/// Gaussian energy standard deviation, keV.
pub fn energy_sigma(energy_kev: f64, res_511: f64) -> f64 {
    if energy_kev <= 0.0 {
        return 0.0;
    }
    resolution_at(energy_kev, res_511) * energy_kev / FWHM_TO_SIGMA
}

/// Smears a deposited energy with the resolution model. Non-positive draws
/// are redrawn a bounded number of times, then floored.
pub fn smear_energy(energy_kev: f64, res_511: f64, rng: &mut Rng) -> f64 {
    let sigma = energy_sigma(energy_kev, res_511);
    if sigma == 0.0 {
        return energy_kev;
    }
    for _ in 0..ENERGY_REDRAWS {
        let z: f64 = StandardNormal.sample(rng);
        let e = energy_kev + sigma * z;
        if e > 0.0 {
            return e;
        }
    }
    ENERGY_FLOOR_KEV
}

pub fn simplify_to_farfield(pair: &CoincidencePair, _gap_mm: f64) -> Result<FarFieldEvent, EventError> {
    let (p1, p2) = (pair.scatter_hit, pair.absorb_hit);
    if !(p1.energy > 0.0 && p2.energy > 0.0) {
        return Err(EventError::InvalidEvent(format!(
            "non-positive deposited energy (e1={}, e2={})",
            p1.energy, p2.energy
        )));
    }
    Ok(FarFieldEvent {
        dx: p1.position[0] - p2.position[0],
        dy: p1.position[1] - p2.position[1],
        e1: p1.energy,
        e2: p2.energy,
    })
}

fn is_physical(ev: &FarFieldEvent) -> bool {
    compton_cos_theta(ev.e1, ev.e2)
        .map(|c| c.is_physical())
        .unwrap_or(false)
}

/// Keeps events whose summed energy lies within `tol_kev` of one of `lines`
/// and that admit a physical scatter angle. Events that are only physical
/// with the energies exchanged are kept swapped.
pub fn filter_and_order(list: &EventList, lines: &[f64], tol_kev: f64) -> Result<EventList, EventError> {
    if !(tol_kev > 0.0) {
        return Err(EventError::InvalidArgument(format!("tolerance must be positive, got {tol_kev}")));
    }
    let windows: Vec<LineWindow> = lines
        .iter()
        .map(|&energy_kev| LineWindow { energy_kev, tol_kev })
        .collect();
    filter_with_windows(list, &windows)
}

pub fn filter_with_windows(list: &EventList, windows: &[LineWindow]) -> Result<EventList, EventError> {
    if windows.is_empty() {
        return Err(EventError::InvalidArgument("no energy lines given".into()));
    }
    if let Some(w) = windows.iter().find(|w| !(w.tol_kev > 0.0)) {
        return Err(EventError::InvalidArgument(format!(
            "tolerance must be positive, got {} at {} keV",
            w.tol_kev, w.energy_kev
        )));
    }
    let kept = list
        .events
        .iter()
        .filter(|ev| windows.iter().any(|w| w.contains(ev.total_energy())))
        .filter_map(|ev| {
            if is_physical(ev) {
                Some(*ev)
            } else {
                let sw = ev.swapped();
                is_physical(&sw).then_some(sw)
            }
        })
        .collect();
    Ok(list.with_events(kept))
}

/// Sorted indices of a uniform draw of `n` events without replacement.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, EventError> {
    if n > len {
        return Err(EventError::OutOfBounds {
            requested: n,
            available: len,
        });
    }
    let mut rng = stream_rng(seed, 0);
    let mut idx = index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `n` events drawn uniformly without replacement, in their original order.
pub fn subsample(list: &EventList, n: usize, seed: u64) -> Result<EventList, EventError> {
    if n == 0 {
        return Err(EventError::InvalidArgument("subsample size must be positive".into()));
    }
    let idx = subsample_indices(list.len(), n, seed)?;
    Ok(list.with_events(idx.into_iter().map(|i| list.events[i]).collect()))
}

/// Concatenates the lists and shuffles the result.
pub fn merge(lists: &[EventList], seed: u64) -> Result<EventList, EventError> {
    if lists.len() < 2 {
        return Err(EventError::Incompatible(format!(
            "merge needs at least two lists, got {}",
            lists.len()
        )));
    }
    let gap = lists[0].gap_mm;
    if let Some(other) = lists.iter().find(|l| l.gap_mm != gap) {
        return Err(EventError::Incompatible(format!(
            "layer gaps differ ({} mm vs {} mm)",
            gap, other.gap_mm
        )));
    }
    let mut events: Vec<FarFieldEvent> = lists.iter().flat_map(|l| l.events.iter().copied()).collect();
    let mut rng = stream_rng(seed, 0);
    events.shuffle(&mut rng);
    let mut provenance = Provenance {
        seed: Some(seed),
        ..Provenance::default()
    };
    for l in lists {
        provenance.sources.extend(l.provenance.sources.iter().cloned());
    }
    Ok(EventList {
        events,
        gap_mm: gap,
        provenance,
    })
}

/// Uniform lateral jitter of half-width `pos_halfwidth_mm` and Gaussian energy
/// noise following the resolution model.
pub fn perturb(list: &EventList, pos_halfwidth_mm: f64, e_res_511: f64, seed: u64) -> Result<EventList, EventError> {
    if !(pos_halfwidth_mm >= 0.0) || !(e_res_511 >= 0.0) {
        return Err(EventError::InvalidArgument(format!(
            "perturbation widths must be non-negative (h={pos_halfwidth_mm}, res={e_res_511})"
        )));
    }
    let base = derive_seed(seed, 0x7065_7274);
    let events = list
        .events
        .iter()
        .enumerate()
        .map(|(i, ev)| {
            let mut rng = stream_rng(base, i as u64);
            let mut out = *ev;
            if pos_halfwidth_mm > 0.0 {
                out.dx += rng.random_range(-pos_halfwidth_mm..=pos_halfwidth_mm);
                out.dy += rng.random_range(-pos_halfwidth_mm..=pos_halfwidth_mm);
            }
            if e_res_511 > 0.0 {
                out.e1 = smear_energy(out.e1, e_res_511, &mut rng);
                out.e2 = smear_energy(out.e2, e_res_511, &mut rng);
            }
            out
        })
        .collect();
    Ok(list.with_events(events))
}

pub fn mirror(list: &EventList, axis: Axis) -> EventList {
    let mut out = list.with_events(list.events.iter().map(|e| e.mirrored(axis)).collect());
    for s in &mut out.provenance.sources {
        *s = s.mirrored(axis);
    }
    out
}
