//! Training labels: spherical Gaussians centred on the true source directions.

use crate::events::Axis;
use crate::geom::angle_between;
use crate::imaging::{AngularImage, Grid};
use crate::simulator::SourceSpec;

/// Label width used when a dataset does not specify one.
pub const DEFAULT_LABEL_SIGMA_DEG: f64 = 5.0;

/// `L_j = clamp(sum_k (I_k / I_max) exp(-psi_kj^2 / (2 sigma^2)), 0, 1)`
/// where `psi_kj` is the great-circle angle from pixel `j` to source `k`.
///
/// An empty source list gives an all-zero image.
pub fn make_label(sources: &[SourceSpec], sigma_deg: f64, grid: Grid) -> AngularImage {
    assert!(sigma_deg > 0.0, "label sigma must be positive");
    let sigma = sigma_deg.to_radians();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let peak = sources.iter().map(|s| s.intensity).fold(0.0, f64::max);
    let centres: Vec<_> = sources
        .iter()
        .map(|s| (s.direction(), s.intensity / peak))
        .collect();
    let values = grid
        .directions()
        .into_iter()
        .map(|w| {
            let v: f64 = centres
                .iter()
                .map(|&(d, rel)| {
                    let psi = angle_between(w, d);
                    rel * (-psi * psi * inv).exp()
                })
                .sum();
            v.clamp(0.0, 1.0)
        })
        .collect();
    AngularImage {
        width: grid.width,
        height: grid.height,
        values,
    }
}

pub fn mirror_label(label: &AngularImage, axis: Axis) -> AngularImage {
    label.mirrored(axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angles_from_direction;
    use std::f64::consts::PI;

    fn source_at_pixel(grid: Grid, u: usize, v: usize) -> SourceSpec {
        let (phi, c) = angles_from_direction(grid.pixel_direction(u, v).unwrap());
        SourceSpec::new(phi, c)
    }

    #[test]
    fn pixel_centre_source_is_unit_peak() {
        let g = Grid::square(32);
        let img = make_label(&[source_at_pixel(g, 11, 20)], 5.0, g);
        assert!((img.get(11, 20) - 1.0).abs() < 1e-12);
        assert_eq!(img.argmax(), (11, 20));
        assert!(img.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn one_sigma_away() {
        // source displaced from a pixel centre by exactly sigma along its meridian
        let g = Grid::square(64);
        let (phi, c) = angles_from_direction(g.pixel_direction(32, 40).unwrap());
        let sigma = 5.0f64;
        let src = SourceSpec::new(phi, (c.acos() + sigma.to_radians()).cos());
        let img = make_label(&[src], sigma, g);
        assert!((img.get(32, 40) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn two_far_sources_two_unit_peaks() {
        let g = Grid::square(32);
        let img = make_label(&[source_at_pixel(g, 4, 4), source_at_pixel(g, 27, 27)], 5.0, g);
        assert!((img.get(4, 4) - 1.0).abs() < 1e-9);
        assert!((img.get(27, 27) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weaker_source_scaled_by_intensity() {
        let g = Grid::square(32);
        let mut weak = source_at_pixel(g, 27, 27);
        weak.intensity = 0.25;
        let img = make_label(&[source_at_pixel(g, 4, 4), weak], 5.0, g);
        assert!((img.get(27, 27) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn mirror_matches_mirrored_sources() {
        let g = Grid::new(24, 16).unwrap();
        let src = source_at_pixel(g, 5, 3);
        let img = make_label(std::slice::from_ref(&src), 6.0, g);
        for axis in [Axis::X, Axis::Y] {
            let a = make_label(&[src.mirrored(axis)], 6.0, g);
            let b = mirror_label(&img, axis);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(mirror_label(&b, axis), img);
        }
    }

    #[test]
    fn mirror_y_convention() {
        // odd width keeps pi/4 off a column boundary
        let g = Grid::square(63);
        let img = make_label(&[SourceSpec::new(PI / 4.0, 0.5)], 5.0, g);
        let (u, v) = mirror_label(&img, Axis::Y).argmax();
        assert_eq!((u, v), g.direction_to_pixel(SourceSpec::new(3.0 * PI / 4.0, 0.5).direction()));
        let mut h0: Vec<f64> = img.values.clone();
        let mut h1: Vec<f64> = mirror_label(&img, Axis::Y).values;
        h0.sort_by(f64::total_cmp);
        h1.sort_by(f64::total_cmp);
        assert_eq!(h0, h1);
    }
}
