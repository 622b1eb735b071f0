//! Analytic far-field simulator for a two-layer Compton camera.
//!
//! Each recorded event is a single Compton scatter in the scatterer followed
//! by full absorption in the absorber. The scattered direction follows the
//! Klein-Nishina distribution; rays that miss the absorber are resampled.

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{smear_energy, Axis, EventList, FarFieldEvent, Provenance};
use crate::geom::{add, direction_from_angles, orthonormal_basis, scale, Vec3};
use crate::kinematics::{scattered_energies, KinematicsError, KleinNishinaSampler};
use crate::rng::{derive_seed, stream_rng, Rng};

const CHUNK: usize = 1024;
const ACCEPTANCE_WINDOW: u64 = 10_000_000;
const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error("geometric acceptance {accepted}/{attempts} below 1e-4; source outside the field of view?")]
    Acceptance { accepted: u64, attempts: u64 },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Two pixelated detector planes: the scatterer at z = 0 and the absorber at
/// z = -gap, both centered on the z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub scatterer_pixels: usize,
    pub scatterer_pitch_mm: f64,
    pub absorber_pixels: usize,
    pub absorber_pitch_mm: f64,
    pub gap_mm: f64,
    pub e_res_scatterer_511: f64,
    pub e_res_absorber_511: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            scatterer_pixels: 10,
            scatterer_pitch_mm: 5.0,
            absorber_pixels: 25,
            absorber_pitch_mm: 2.0,
            gap_mm: 50.0,
            e_res_scatterer_511: 0.0764,
            e_res_absorber_511: 0.0780,
        }
    }
}

impl CameraModel {
    pub fn scatterer_half_extent(&self) -> f64 {
        0.5 * self.scatterer_pixels as f64 * self.scatterer_pitch_mm
    }

    pub fn absorber_half_extent(&self) -> f64 {
        0.5 * self.absorber_pixels as f64 * self.absorber_pitch_mm
    }

    /// Largest possible |dx| or |dy|.
    pub fn max_lever_mm(&self) -> f64 {
        self.scatterer_half_extent() + self.absorber_half_extent()
    }

    /// Returns a list of `(field, message)` violations.
    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.scatterer_pixels == 0 {
            errs.push(("scatterer_pixels", "must be positive".to_string()));
        }
        if self.absorber_pixels == 0 {
            errs.push(("absorber_pixels", "must be positive".to_string()));
        }
        for (name, v) in [
            ("scatterer_pitch_mm", self.scatterer_pitch_mm),
            ("absorber_pitch_mm", self.absorber_pitch_mm),
            ("gap_mm", self.gap_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push((name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("e_res_scatterer_511", self.e_res_scatterer_511),
            ("e_res_absorber_511", self.e_res_absorber_511),
        ] {
            if !(0.0..1.0).contains(&v) {
                errs.push((name, format!("must lie in [0, 1), got {v}")));
            }
        }
        errs
    }

    fn snap(coord: f64, pixels: usize, pitch: f64) -> f64 {
        let half = 0.5 * pixels as f64 * pitch;
        let k = ((coord + half) / pitch).floor().clamp(0.0, (pixels - 1) as f64);
        -half + (k + 0.5) * pitch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionLine {
    pub energy_kev: f64,
    pub weight: f64,
}

/// Sodium-22: two annihilation photons per ~90% positron branch against one
/// 1275 keV photon per decay.
pub fn sodium22_lines() -> Vec<EmissionLine> {
    vec![
        EmissionLine {
            energy_kev: 511.0,
            weight: 1.8,
        },
        EmissionLine {
            energy_kev: 1275.0,
            weight: 1.0,
        },
    ]
}

/// A far-field point source on the image sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Azimuth, radians, in (0, pi).
    pub phi: f64,
    /// Cosine of the polar angle measured from +x, in (-1, 1).
    pub cospolar: f64,
    #[serde(default = "unit")]
    pub intensity: f64,
    #[serde(default = "sodium22_lines")]
    pub lines: Vec<EmissionLine>,
}

fn unit() -> f64 {
    1.0
}

impl SourceSpec {
    pub fn new(phi: f64, cospolar: f64) -> Self {
        Self {
            phi,
            cospolar,
            intensity: 1.0,
            lines: sodium22_lines(),
        }
    }

    pub fn with_lines(mut self, lines: Vec<EmissionLine>) -> Self {
        self.lines = lines;
        self
    }

    pub fn direction(&self) -> Vec3 {
        direction_from_angles(self.phi, self.cospolar)
    }

    /// The source seen through a mirrored camera: x flips the polar cosine,
    /// y maps azimuth `phi` to `pi - phi`.
    pub fn mirrored(&self, axis: Axis) -> Self {
        let mut s = self.clone();
        match axis {
            Axis::X => s.cospolar = -s.cospolar,
            Axis::Y => s.phi = std::f64::consts::PI - s.phi,
        }
        s
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidInput(m));
        if !(self.phi > 0.0 && self.phi < std::f64::consts::PI) {
            return bad(format!("source azimuth {} outside (0, pi)", self.phi));
        }
        if !(self.cospolar > -1.0 && self.cospolar < 1.0) {
            return bad(format!("source polar cosine {} outside (-1, 1)", self.cospolar));
        }
        if !(self.intensity > 0.0) {
            return bad(format!("source intensity {} must be positive", self.intensity));
        }
        if self.lines.is_empty() {
            return bad("source has no emission lines".into());
        }
        if let Some(l) = self.lines.iter().find(|l| !(l.weight > 0.0 && l.energy_kev > 0.0)) {
            return bad(format!("emission line {:?} needs positive energy and weight", l));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub false_coincidence_fraction: f64,
    pub apply_pixelation: bool,
    pub apply_energy_noise: bool,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            false_coincidence_fraction: 0.0,
            apply_pixelation: true,
            apply_energy_noise: true,
            seed: 0,
        }
    }
}

impl SimOptions {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            false_coincidence_fraction: 0.0,
            apply_pixelation: false,
            apply_energy_noise: false,
            seed,
        }
    }
}

/// Ground truth of one simulated event, kept for verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventTruth {
    pub source: usize,
    pub line_kev: f64,
    pub cos_theta: f64,
}

struct Setup<'a> {
    camera: &'a CameraModel,
    sources: &'a [SourceSpec],
    source_cdf: Vec<f64>,
    line_cdfs: Vec<Vec<f64>>,
    samplers: Vec<Vec<KleinNishinaSampler>>,
    opts: &'a SimOptions,
}

fn cdf(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    let total = acc;
    for v in &mut out {
        *v /= total;
    }
    out
}

fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

impl Setup<'_> {
    fn event(&self, index: u64) -> Result<(FarFieldEvent, EventTruth, u64), SimError> {
        let cam = self.camera;
        let mut rng = stream_rng(self.opts.seed, index);
        let si = pick(&self.source_cdf, rng.random());
        let li = pick(&self.line_cdfs[si], rng.random());
        let sampler = &self.samplers[si][li];
        let e0 = sampler.energy();
        let incident = scale(self.sources[si].direction(), -1.0);
        let (bu, bv) = orthonormal_basis(incident);

        let sh = cam.scatterer_half_extent();
        let p1 = [rng.random_range(-sh..sh), rng.random_range(-sh..sh), 0.0];
        let ah = cam.absorber_half_extent();
        let mut attempts = 0u64;
        loop {
            attempts += 1;
            if attempts > ACCEPTANCE_WINDOW {
                return Err(SimError::Acceptance {
                    accepted: 0,
                    attempts,
                });
            }
            let cos_theta = sampler.sample(&mut rng)?;
            let psi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
            let out = add(
                scale(incident, cos_theta),
                add(scale(bu, sin_theta * psi.cos()), scale(bv, sin_theta * psi.sin())),
            );
            if out[2] >= 0.0 {
                continue;
            }
            let t = -cam.gap_mm / out[2];
            let p2 = [p1[0] + t * out[0], p1[1] + t * out[1], -cam.gap_mm];
            if p2[0].abs() > ah || p2[1].abs() > ah {
                continue;
            }
            let (mut e1, mut e2) = scattered_energies(e0, cos_theta)?;
            let (mut x1, mut y1, mut x2, mut y2) = (p1[0], p1[1], p2[0], p2[1]);
            if self.opts.apply_pixelation {
                x1 = CameraModel::snap(x1, cam.scatterer_pixels, cam.scatterer_pitch_mm);
                y1 = CameraModel::snap(y1, cam.scatterer_pixels, cam.scatterer_pitch_mm);
                x2 = CameraModel::snap(x2, cam.absorber_pixels, cam.absorber_pitch_mm);
                y2 = CameraModel::snap(y2, cam.absorber_pixels, cam.absorber_pitch_mm);
            }
            if self.opts.apply_energy_noise {
                e1 = smear_energy(e1, cam.e_res_scatterer_511, &mut rng);
                e2 = smear_energy(e2, cam.e_res_absorber_511, &mut rng);
            }
            let ev = FarFieldEvent::new(x1 - x2, y1 - y2, e1, e2);
            let truth = EventTruth {
                source: si,
                line_kev: e0,
                cos_theta,
            };
            return Ok((ev, truth, attempts));
        }
    }
}

/// Simulates exactly `n_events` coincidences, also returning per-event truth.
pub fn simulate_with_truth(
    camera: &CameraModel,
    sources: &[SourceSpec],
    n_events: usize,
    opts: &SimOptions,
) -> Result<(EventList, Vec<EventTruth>), SimError> {
    if sources.is_empty() {
        return Err(SimError::InvalidInput("at least one source is required".into()));
    }
    if n_events == 0 {
        return Err(SimError::InvalidInput("event count must be positive".into()));
    }
    if let Some((field, msg)) = camera.validate().into_iter().next() {
        return Err(SimError::InvalidInput(format!("camera.{field}: {msg}")));
    }
    if !(0.0..1.0).contains(&opts.false_coincidence_fraction) {
        return Err(SimError::InvalidInput(format!(
            "false coincidence fraction {} outside [0, 1)",
            opts.false_coincidence_fraction
        )));
    }
    for s in sources {
        s.validate()?;
    }
    let samplers = sources
        .iter()
        .map(|s| s.lines.iter().map(|l| KleinNishinaSampler::new(l.energy_kev)).collect())
        .collect::<Result<Vec<Vec<_>>, _>>()?;
    let setup = Setup {
        camera,
        sources,
        source_cdf: cdf(sources.iter().map(|s| s.intensity)),
        line_cdfs: sources.iter().map(|s| cdf(s.lines.iter().map(|l| l.weight))).collect(),
        samplers,
        opts,
    };

    let mut events = Vec::with_capacity(n_events);
    let mut truths = Vec::with_capacity(n_events);
    let (mut attempts, mut accepted) = (0u64, 0u64);
    for start in (0..n_events).step_by(CHUNK) {
        let end = (start + CHUNK).min(n_events);
        let chunk: Vec<_> = (start..end)
            .into_par_iter()
            .map(|i| setup.event(i as u64))
            .collect::<Result<_, _>>()
            .map_err(|e| match e {
                SimError::Acceptance { attempts: a, .. } => SimError::Acceptance {
                    accepted,
                    attempts: attempts + a,
                },
                other => other,
            })?;
        for (ev, truth, a) in chunk {
            attempts += a;
            accepted += 1;
            events.push(ev);
            truths.push(truth);
        }
        if attempts >= ACCEPTANCE_WINDOW && (accepted as f64) < MIN_ACCEPTANCE * attempts as f64 {
            return Err(SimError::Acceptance { accepted, attempts });
        }
    }

    let mut list = EventList {
        events,
        gap_mm: camera.gap_mm,
        provenance: Provenance {
            seed: Some(opts.seed),
            sources: sources.to_vec(),
            notes: vec![format!("attempts={attempts}")],
        },
    };
    if opts.false_coincidence_fraction > 0.0 {
        list = inject_false_coincidences(
            &list,
            opts.false_coincidence_fraction,
            derive_seed(opts.seed, 0x6661_6c73),
        )?;
    }
    Ok((list, truths))
}

pub fn simulate(
    camera: &CameraModel,
    sources: &[SourceSpec],
    n_events: usize,
    opts: &SimOptions,
) -> Result<EventList, SimError> {
    simulate_with_truth(camera, sources, n_events, opts).map(|(l, _)| l)
}

/// Replaces the lever of `floor(fraction * N)` randomly chosen events with
/// the lever of another randomly chosen event, keeping the energies.
pub fn inject_false_coincidences(list: &EventList, fraction: f64, seed: u64) -> Result<EventList, SimError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SimError::InvalidInput(format!("fraction {fraction} outside [0, 1)")));
    }
    let n = list.len();
    let k = (fraction * n as f64).floor() as usize;
    let mut out = list.clone();
    if k == 0 || n < 2 {
        return Ok(out);
    }
    let mut rng: Rng = stream_rng(seed, 0);
    for i in index::sample(&mut rng, n, k).into_iter() {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        out.events[i].dx = list.events[j].dx;
        out.events[i].dy = list.events[j].dy;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{filter_with_windows, LineWindow};
    use crate::geom::{dot, normalize};
    use crate::kinematics::compton_cos_theta;

    fn single_line(e: f64) -> Vec<EmissionLine> {
        vec![EmissionLine {
            energy_kev: e,
            weight: 1.0,
        }]
    }

    #[test]
    fn count_and_lever_bound() {
        let cam = CameraModel::default();
        let src = [SourceSpec::new(1.2, 0.3)];
        let l = simulate(&cam, &src, 1000, &SimOptions::default()).unwrap();
        assert_eq!(l.len(), 1000);
        // half extents 25 + 25 mm; the looser 72.5 mm bound follows
        assert_eq!(cam.max_lever_mm(), 50.0);
        assert!(l.events.iter().all(|e| e.dx.abs() <= 50.0 && e.dy.abs() <= 50.0));
        assert_eq!(l.provenance.sources.len(), 1);
        assert_eq!(l.provenance.seed, Some(0));
    }

    #[test]
    fn noiseless_events_are_consistent() {
        let cam = CameraModel::default();
        let src = [SourceSpec::new(1.0, -0.2).with_lines(single_line(511.0))];
        let (l, truth) = simulate_with_truth(&cam, &src, 2000, &SimOptions::noiseless(4)).unwrap();
        let w = src[0].direction();
        for (ev, t) in l.events.iter().zip(&truth) {
            assert_eq!(ev.e1 + ev.e2, 511.0);
            if ev.e1 > 0.0 {
                let c = compton_cos_theta(ev.e1, ev.e2).unwrap();
                assert!(c.is_physical());
                assert!((c.value() - t.cos_theta).abs() < 1e-9);
            }
            // the source direction lies on the event's cone
            let axis = normalize([ev.dx, ev.dy, l.gap_mm]).unwrap();
            assert!((dot(axis, w) - t.cos_theta).abs() < 1e-9);
        }
    }

    #[test]
    fn pixelated_events_sit_on_pixel_grid() {
        let cam = CameraModel::default();
        let opts = SimOptions {
            apply_energy_noise: false,
            ..SimOptions::default()
        };
        let l = simulate(&cam, &[SourceSpec::new(1.5, 0.0).with_lines(single_line(511.0))], 500, &opts).unwrap();
        for ev in &l.events {
            assert_eq!(ev.e1 + ev.e2, 511.0);
            // scatterer centers sit at 2.5 + 5k, absorber centers at even integers
            let r = (ev.dx - 2.5).rem_euclid(1.0);
            assert!(!(1e-9..=1.0 - 1e-9).contains(&r), "dx {}", ev.dx);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cam = CameraModel::default();
        let src = [SourceSpec::new(2.0, 0.5)];
        let a = simulate(&cam, &src, 300, &SimOptions::default()).unwrap();
        let b = simulate(&cam, &src, 300, &SimOptions::default()).unwrap();
        assert_eq!(a, b);
        let c = simulate(
            &cam,
            &src,
            300,
            &SimOptions {
                seed: 1,
                ..SimOptions::default()
            },
        )
        .unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cam = CameraModel::default();
        let opts = SimOptions::default();
        assert!(simulate(&cam, &[], 10, &opts).is_err());
        assert!(simulate(&cam, &[SourceSpec::new(1.0, 0.0)], 0, &opts).is_err());
        assert!(simulate(&cam, &[SourceSpec::new(4.0, 0.0)], 10, &opts).is_err());
        let bad = CameraModel {
            gap_mm: 0.0,
            ..CameraModel::default()
        };
        assert!(simulate(&bad, &[SourceSpec::new(1.0, 0.0)], 10, &opts).is_err());
    }

    #[test]
    fn photopeaks_survive_the_default_windows() {
        let cam = CameraModel::default();
        let l = simulate(&cam, &[SourceSpec::new(1.3, 0.1)], 5000, &SimOptions::default()).unwrap();
        let windows = [
            LineWindow::three_sigma(511.0, cam.e_res_absorber_511),
            LineWindow::three_sigma(1275.0, cam.e_res_absorber_511),
        ];
        let kept = filter_with_windows(&l, &windows).unwrap();
        assert!(kept.len() > 4000, "kept {}", kept.len());
    }

    #[test]
    fn false_coincidences_floor_rule() {
        let cam = CameraModel::default();
        let l = simulate(&cam, &[SourceSpec::new(1.3, 0.1)], 1000, &SimOptions::noiseless(2)).unwrap();
        assert_eq!(inject_false_coincidences(&l, 0.0, 1).unwrap(), l);
        let f = inject_false_coincidences(&l, 0.1, 1).unwrap();
        let changed = f.events.iter().zip(&l.events).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 100);
        let energies = |l: &EventList| {
            let mut v: Vec<_> = l.events.iter().map(|e| (e.e1.to_bits(), e.e2.to_bits())).collect();
            v.sort();
            v
        };
        assert_eq!(energies(&f), energies(&l));
        assert!(l.events.iter().zip(&f.events).all(|(a, b)| a.e1 == b.e1 && a.e2 == b.e2));
        assert!(inject_false_coincidences(&l, 1.0, 1).is_err());
    }

    #[test]
    fn mirrored_source_produces_mirrored_events_in_distribution() {
        let cam = CameraModel::default();
        let src = SourceSpec::new(1.0, 0.4).with_lines(single_line(511.0));
        let opts = SimOptions::noiseless(9);
        let a = simulate(&cam, std::slice::from_ref(&src), 20_000, &opts).unwrap();
        let b = simulate(&cam, &[src.mirrored(Axis::X)], 20_000, &opts).unwrap();
        let mean = |l: &EventList| l.events.iter().map(|e| e.dx).sum::<f64>() / l.len() as f64;
        let sd = (a.events.iter().map(|e| e.dx * e.dx).sum::<f64>() / a.len() as f64).sqrt();
        let tol = 5.0 * sd * (2.0 / a.len() as f64).sqrt();
        assert!((mean(&a) + mean(&b)).abs() < tol, "{} vs {}", mean(&a), mean(&b));
    }
}
