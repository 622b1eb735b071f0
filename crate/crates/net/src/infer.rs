use rayon::prelude::*;
use serde::Serialize;

use ccir_core::{AngularImage, EventList, Grid};

use crate::input::prepare_events;
use crate::model::{NetError, Network};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchReport {
    /// Valid events of each patch, in order.
    pub counts: Vec<usize>,
}

/// Images lists of any length: the events are cut into `seq_len` patches,
/// the last one zero-padded, and the patch images are averaged with weights
/// proportional to their event counts.
pub fn infer_patched<T: Scalar>(net: &Network<T>, list: &EventList) -> Result<(AngularImage, PatchReport), NetError> {
    if list.is_empty() {
        return Err(NetError::EmptyInput);
    }
    let cfg = &net.cfg;
    let patches: Vec<_> = list.events.chunks(cfg.seq_len).collect();
    let images: Vec<Vec<T>> = patches
        .par_iter()
        .map(|p| net.forward_input(&prepare_events(p, cfg)))
        .collect();
    let counts: Vec<usize> = patches.iter().map(|p| p.len()).collect();
    let total = list.len() as f64;
    let mut acc = vec![0.0; cfg.out_w * cfg.out_h];
    for (img, &n) in images.iter().zip(&counts) {
        let w = n as f64 / total;
        for (a, v) in acc.iter_mut().zip(img) {
            *a += w * v.f64();
        }
    }
    let grid = Grid::new(cfg.out_w, cfg.out_h).expect("validated output size");
    let image = AngularImage::from_values(grid, acc).expect("matching size");
    Ok((image, PatchReport { counts }))
}
