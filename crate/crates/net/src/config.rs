use serde::{Deserialize, Serialize};

/// Network dimensions. Defaults are the desk-scale model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Events per input; longer lists are cropped, shorter ones zero-padded.
    pub seq_len: usize,
    pub embed_dim: usize,
    pub n_rstb: usize,
    pub st_per_rstb: usize,
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub feature_dim: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub leaky_slope: f64,
    /// Lever components are divided by this, mm.
    pub span_xy_mm: f64,
    /// Energies are divided by this, keV.
    pub span_energy_kev: f64,
    /// Smallest channel count of the upsampling stack.
    pub ig_channel_floor: usize,
    /// Keep `feature_dim` channels at every upsampling step instead of halving.
    pub ig_literal_channels: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            embed_dim: 32,
            n_rstb: 4,
            st_per_rstb: 4,
            window: 8,
            shift: 4,
            heads: 4,
            mlp_ratio: 2,
            feature_dim: 64,
            out_w: 64,
            out_h: 64,
            leaky_slope: 0.01,
            span_xy_mm: 72.5,
            span_energy_kev: 1500.0,
            ig_channel_floor: 16,
            ig_literal_channels: false,
        }
    }
}

impl NetworkConfig {
    /// The full-size model.
    pub fn full_scale() -> Self {
        Self {
            seq_len: 4096,
            embed_dim: 180,
            heads: 6,
            feature_dim: 256,
            out_w: 256,
            out_h: 256,
            ..Self::default()
        }
    }

    /// Smallest configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            seq_len: 16,
            embed_dim: 8,
            n_rstb: 1,
            st_per_rstb: 2,
            window: 4,
            shift: 2,
            heads: 2,
            mlp_ratio: 2,
            feature_dim: 8,
            out_w: 8,
            out_h: 8,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Number of transposed-convolution steps: one 4x step, then doublings.
    pub fn ig_steps(&self) -> usize {
        let mut size = 4;
        let mut steps = 1;
        while size < self.out_w {
            size *= 2;
            steps += 1;
        }
        steps
    }

    /// Output channels of each upsampling step.
    pub fn ig_channels(&self) -> Vec<usize> {
        (1..=self.ig_steps())
            .map(|k| {
                if self.ig_literal_channels {
                    self.feature_dim
                } else {
                    (self.feature_dim >> k.min(63)).max(self.ig_channel_floor)
                }
            })
            .collect()
    }

    /// Spatial size after each upsampling step.
    pub fn ig_sizes(&self) -> Vec<usize> {
        (0..self.ig_steps()).map(|k| 4 << k).collect()
    }

    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, field: &'static str, msg: String| {
            if !ok {
                errs.push((field, msg));
            }
        };
        need(self.window >= 1, "window", "must be at least 1".into());
        need(
            self.seq_len >= 1 && self.window >= 1 && self.seq_len.is_multiple_of(self.window),
            "seq_len",
            format!("{} must be a positive multiple of window {}", self.seq_len, self.window),
        );
        need(
            self.heads >= 1 && self.embed_dim >= 1 && self.embed_dim.is_multiple_of(self.heads),
            "embed_dim",
            format!("{} must be a positive multiple of heads {}", self.embed_dim, self.heads),
        );
        need(self.shift < self.window, "shift", format!("{} must be below window {}", self.shift, self.window));
        need(self.n_rstb >= 1, "n_rstb", "must be at least 1".into());
        need(self.st_per_rstb >= 1, "st_per_rstb", "must be at least 1".into());
        need(self.mlp_ratio >= 1, "mlp_ratio", "must be at least 1".into());
        need(self.feature_dim >= 1, "feature_dim", "must be at least 1".into());
        need(self.ig_channel_floor >= 1, "ig_channel_floor", "must be at least 1".into());
        let reachable = self.out_w >= 4 && self.out_w.is_power_of_two();
        need(
            reachable,
            "out_w",
            format!("{} must be a power of two of at least 4", self.out_w),
        );
        need(
            self.out_h == self.out_w,
            "out_h",
            format!("{} must equal out_w {}", self.out_h, self.out_w),
        );
        need(
            self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0,
            "leaky_slope",
            format!("{} must lie in [0, 1)", self.leaky_slope),
        );
        need(self.span_xy_mm > 0.0, "span_xy_mm", "must be positive".into());
        need(self.span_energy_kev > 0.0, "span_energy_kev", "must be positive".into());
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_schedules() {
        let full = NetworkConfig::full_scale();
        assert_eq!(full.ig_steps(), 7);
        assert_eq!(full.ig_sizes(), vec![4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(full.ig_channels(), vec![128, 64, 32, 16, 16, 16, 16]);
        let desk = NetworkConfig::default();
        assert_eq!(desk.ig_sizes(), vec![4, 8, 16, 32, 64]);
        assert_eq!(desk.ig_channels(), vec![32, 16, 16, 16, 16]);
        let literal = NetworkConfig {
            ig_literal_channels: true,
            ..NetworkConfig::full_scale()
        };
        assert_eq!(literal.ig_channels(), vec![256; 7]);
        assert_eq!(NetworkConfig::tiny().ig_sizes(), vec![4, 8]);
    }

    #[test]
    fn validation() {
        assert!(NetworkConfig::default().validate().is_empty());
        assert!(NetworkConfig::tiny().validate().is_empty());
        assert!(NetworkConfig::full_scale().validate().is_empty());
        let bad = NetworkConfig {
            seq_len: 250,
            shift: 8,
            out_w: 48,
            ..NetworkConfig::default()
        };
        let fields: Vec<_> = bad.validate().into_iter().map(|e| e.0).collect();
        assert_eq!(fields, vec!["seq_len", "shift", "out_w", "out_h"]);
    }
}
