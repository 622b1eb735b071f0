use ccir_core::{EventList, FarFieldEvent};

use crate::config::NetworkConfig;
use crate::scalar::Scalar;

/// Network input: four channels (dx, dy, e1, e2) over `len` positions,
/// channel-major. Positions at and beyond `valid` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub len: usize,
    pub valid: usize,
    pub data: Vec<f64>,
}

impl PreparedInput {
    pub fn column(&self, p: usize) -> [f64; 4] {
        std::array::from_fn(|ch| self.data[ch * self.len + p])
    }

    /// Token-major `[len, 4]` copy.
    pub fn token_major<T: Scalar>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(4 * self.len);
        for p in 0..self.len {
            out.extend(self.column(p).iter().map(|&v| T::of(v)));
        }
        out
    }
}

pub fn prepare_input(list: &EventList, cfg: &NetworkConfig) -> PreparedInput {
    prepare_events(&list.events, cfg)
}

/// Normalizes, crops at `seq_len` and zero-pads.
pub fn prepare_events(events: &[FarFieldEvent], cfg: &NetworkConfig) -> PreparedInput {
    let len = cfg.seq_len;
    let valid = events.len().min(len);
    let mut data = vec![0.0; 4 * len];
    for (p, ev) in events.iter().take(valid).enumerate() {
        data[p] = ev.dx / cfg.span_xy_mm;
        data[len + p] = ev.dy / cfg.span_xy_mm;
        data[2 * len + p] = ev.e1 / cfg.span_energy_kev;
        data[3 * len + p] = ev.e2 / cfg.span_energy_kev;
    }
    PreparedInput { len, valid, data }
}
