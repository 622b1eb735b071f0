//! Compton scatter kinematics, cone construction, first-order angular
//! uncertainty and Klein-Nishina sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{energy_sigma, FarFieldEvent};
use crate::geom::{normalize, Vec3};
use crate::rng::Rng;
use crate::simulator::CameraModel;

/// Electron rest energy, keV.
pub const ELECTRON_REST_ENERGY_KEV: f64 = 511.0;

/// Lower bound on `sin(theta)` inside the uncertainty propagation.
pub const SIN_THETA_FLOOR: f64 = 0.05;

const ENVELOPE_GRID: usize = 1024;
const ENVELOPE_MARGIN: f64 = 1.001;
const MAX_PROPOSALS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("energies must be positive (e1={e1}, e2={e2})")]
    NonPositiveEnergy { e1: f64, e2: f64 },
    #[error("cosine {0} outside [-1, 1]")]
    CosineOutOfRange(f64),
    #[error("rejection sampler exhausted {0} proposals; the envelope is wrong")]
    SamplerExhausted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    pub m0c2: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        Self {
            m0c2: ELECTRON_REST_ENERGY_KEV,
        }
    }
}

/// Cosine of the scatter angle as computed from the deposited energies.
/// Values outside `[-1, 1]` are kept and flagged rather than rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterCosine(f64);

impl ScatterCosine {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_physical(self) -> bool {
        (-1.0..=1.0).contains(&self.0)
    }
}

pub fn compton_cos_theta(e1: f64, e2: f64) -> Result<ScatterCosine, KinematicsError> {
    if !(e1 > 0.0 && e2 > 0.0) {
        return Err(KinematicsError::NonPositiveEnergy { e1, e2 });
    }
    Ok(ScatterCosine(1.0 - ELECTRON_REST_ENERGY_KEV * e1 / (e2 * (e1 + e2))))
}

/// Splits an incident energy into (deposited, scattered) for a scatter
/// angle. The deposited part is adjusted by at most a few ulps so that the
/// two always sum to `e0` exactly.
pub fn scattered_energies(e0: f64, cos_theta: f64) -> Result<(f64, f64), KinematicsError> {
    if !(e0 > 0.0) {
        return Err(KinematicsError::NonPositiveEnergy { e1: e0, e2: e0 });
    }
    if !(-1.0..=1.0).contains(&cos_theta) {
        return Err(KinematicsError::CosineOutOfRange(cos_theta));
    }
    let e2 = e0 / (1.0 + (e0 / ELECTRON_REST_ENERGY_KEV) * (1.0 - cos_theta));
    let mut e1 = e0 - e2;
    for _ in 0..4 {
        let s = e1 + e2;
        if s == e0 {
            break;
        }
        e1 = if s > e0 { e1.next_down() } else { e1.next_up() };
    }
    Ok((e1.max(0.0), e2))
}

/// A Compton cone in the far-field approximation: the apex is shared by all
/// events, so only the axis and opening matter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    /// Unit vector along the lever, from the absorber hit to the scatter hit.
    pub axis: Vec3,
    pub cos_half_angle: f64,
    /// Angular standard deviation of the half-angle, radians.
    pub sigma_theta: f64,
}

impl ConeParams {
    pub fn half_angle(&self) -> f64 {
        self.cos_half_angle.clamp(-1.0, 1.0).acos()
    }
}

pub fn lever_axis(ev: &FarFieldEvent, gap_mm: f64) -> Option<Vec3> {
    normalize([ev.dx, ev.dy, gap_mm])
}

/// Builds the cone of an event. `Ok(None)` marks a physically impossible
/// energy split; an error marks non-positive energies.
pub fn cone_from_event(
    ev: &FarFieldEvent,
    gap_mm: f64,
    camera: &CameraModel,
) -> Result<Option<ConeParams>, KinematicsError> {
    let c = compton_cos_theta(ev.e1, ev.e2)?;
    if !c.is_physical() {
        return Ok(None);
    }
    let Some(axis) = lever_axis(ev, gap_mm) else {
        return Ok(None);
    };
    Ok(Some(ConeParams {
        axis,
        cos_half_angle: c.value(),
        sigma_theta: angular_sigma(ev, gap_mm, camera),
    }))
}

/// Partial derivatives of the scatter cosine with respect to (e1, e2).
pub fn cos_theta_gradient(e1: f64, e2: f64) -> (f64, f64) {
    let m = ELECTRON_REST_ENERGY_KEV;
    let s = e1 + e2;
    (-m / (s * s), m * e1 * (e1 + 2.0 * e2) / (e2 * e2 * s * s))
}

/// First-order angular uncertainty of an event, radians: energy terms
/// propagated through the scatter relation plus the pixel quantization of
/// the lever.
pub fn angular_sigma(ev: &FarFieldEvent, gap_mm: f64, camera: &CameraModel) -> f64 {
    let (g1, g2) = cos_theta_gradient(ev.e1, ev.e2);
    let s1 = energy_sigma(ev.e1, camera.e_res_scatterer_511);
    let s2 = energy_sigma(ev.e2, camera.e_res_absorber_511);
    let var_cos = (g1 * s1).powi(2) + (g2 * s2).powi(2);
    let cos = compton_cos_theta(ev.e1, ev.e2)
        .map(|c| c.value().clamp(-1.0, 1.0))
        .unwrap_or(1.0);
    let sin = (1.0 - cos * cos).sqrt().max(SIN_THETA_FLOOR);
    let pitch_sq = camera.scatterer_pitch_mm.powi(2) + camera.absorber_pitch_mm.powi(2);
    let var_geom = pitch_sq / (12.0 * gap_mm * gap_mm);
    (var_cos / (sin * sin) + var_geom).sqrt()
}

/// Unnormalized Klein-Nishina density in the scatter cosine.
pub fn klein_nishina_pdf(e0: f64, cos_theta: f64) -> Result<f64, KinematicsError> {
    let (_, e2) = scattered_energies(e0, cos_theta)?;
    let r = e2 / e0;
    let sin2 = 1.0 - cos_theta * cos_theta;
    Ok(0.5 * r * r * (r + 1.0 / r - sin2))
}

/// Rejection sampler for the Klein-Nishina scatter cosine at a fixed
/// incident energy, with a uniform envelope.
#[derive(Debug, Clone)]
pub struct KleinNishinaSampler {
    e0: f64,
    envelope: f64,
}

impl KleinNishinaSampler {
    pub fn new(e0: f64) -> Result<Self, KinematicsError> {
        let mut peak = 0.0f64;
        for k in 0..ENVELOPE_GRID {
            let c = -1.0 + 2.0 * k as f64 / (ENVELOPE_GRID - 1) as f64;
            peak = peak.max(klein_nishina_pdf(e0, c)?);
        }
        Ok(Self {
            e0,
            envelope: peak * ENVELOPE_MARGIN,
        })
    }

    pub fn energy(&self) -> f64 {
        self.e0
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<f64, KinematicsError> {
        for _ in 0..MAX_PROPOSALS {
            let c: f64 = rng.random_range(-1.0..=1.0);
            let u: f64 = rng.random();
            if u * self.envelope < klein_nishina_pdf(self.e0, c)? {
                return Ok(c);
            }
        }
        Err(KinematicsError::SamplerExhausted(MAX_PROPOSALS))
    }
}

pub fn sample_scatter_cos(e0: f64, rng: &mut Rng) -> Result<f64, KinematicsError> {
    KleinNishinaSampler::new(e0)?.sample(rng)
}
