//! Supervised training with Adam on augmented simulated samples.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ccir_core::dataset::{load_manifest, load_sample, DatasetError};
use ccir_core::events::{merge, mirror, perturb, subsample, EventError};
use ccir_core::labels::make_label;
use ccir_core::losses::{hybrid_batch, LossConfig};
use ccir_core::metrics::psnr;
use ccir_core::rng::{derive_seed, stream_rng};
use ccir_core::{Axis, EventList, Grid, SourceSpec};

use crate::config::NetworkConfig;
use crate::infer::infer_patched;
use crate::input::prepare_input;
use crate::model::{NetError, Network};
use crate::params::Params;

const TAG_SPLIT: u64 = 0x5350_4c54;
const TAG_BATCH: u64 = 0x4241_5443;
const TAG_AUG: u64 = 0x4155_4700;
const TAG_INIT: u64 = 0x494e_4954;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetError),
    #[error("augmenting sample {sample}: {source}")]
    Augment {
        sample: String,
        #[source]
        source: EventError,
    },
    #[error("non-finite {what} at step {step}, sample {sample}")]
    NonFinite {
        step: usize,
        sample: String,
        what: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub perturb: bool,
    /// Half-width of the uniform lateral jitter, mm.
    pub perturb_pos_mm: f64,
    /// Extra energy smearing, FWHM fraction at 511 keV.
    pub perturb_e_res: f64,
    pub subsample: bool,
    /// Smallest event count kept by subsampling.
    pub subsample_min: usize,
    /// Mirror half of the samples, along a random axis.
    pub mirror: bool,
    pub merge: bool,
    /// Probability that a sample is merged with others.
    pub merge_prob: f64,
    /// Largest number of samples in a merge.
    pub merge_max: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            perturb: true,
            perturb_pos_mm: 1.0,
            perturb_e_res: 0.02,
            subsample: true,
            subsample_min: 50,
            mirror: true,
            merge: false,
            merge_prob: 0.3,
            merge_max: 3,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            perturb: false,
            subsample: false,
            mirror: false,
            merge: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_halving_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub loss: LossConfig,
    pub augment: Augmentation,
    pub seed: u64,
    /// Steps between validation passes; 0 disables them.
    pub val_every: usize,
    /// Validation samples scored per pass.
    pub val_limit: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_halving_every: 5000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 16,
            max_steps: 1000,
            loss: LossConfig::default(),
            augment: Augmentation::default(),
            seed: 0,
            val_every: 500,
            val_limit: 64,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Schedule of the full-size model.
    pub fn full_scale() -> Self {
        Self {
            lr_halving_every: 40000,
            ..Self::default()
        }
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.5f64.powi((step / self.lr_halving_every.max(1)) as i32)
    }

    /// Violations as `(field, message)`; the loss settings are checked by
    /// [`LossConfig::validate`].
    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, field: &'static str, msg: String| {
            if !ok {
                errs.push((field, msg));
            }
        };
        need(self.lr > 0.0 && self.lr.is_finite(), "lr", format!("{} must be positive", self.lr));
        need(self.lr_halving_every >= 1, "lr_halving_every", "must be at least 1".into());
        need((0.0..1.0).contains(&self.beta1), "beta1", format!("{} must lie in [0, 1)", self.beta1));
        need((0.0..1.0).contains(&self.beta2), "beta2", format!("{} must lie in [0, 1)", self.beta2));
        need(self.adam_eps > 0.0, "adam_eps", "must be positive".into());
        need(self.batch >= 1, "batch", "must be at least 1".into());
        need(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "val_fraction",
            format!("{} must lie in (0, 1)", self.val_fraction),
        );
        let a = &self.augment;
        need(a.perturb_pos_mm >= 0.0, "augment.perturb_pos_mm", "must be >= 0".into());
        need(a.perturb_e_res >= 0.0, "augment.perturb_e_res", "must be >= 0".into());
        need(a.subsample_min >= 1, "augment.subsample_min", "must be at least 1".into());
        need((0.0..=1.0).contains(&a.merge_prob), "augment.merge_prob", "must lie in [0, 1]".into());
        need(a.merge_max >= 2, "augment.merge_max", "must be at least 2".into());
        errs
    }
}

/// One supervised example: events and the sources that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub events: EventList,
    pub sources: Vec<SourceSpec>,
}

/// All samples of a dataset and its label width.
pub fn load_training_set(manifest_path: &Path) -> Result<(Vec<LabeledSample>, f64), TrainError> {
    let manifest = load_manifest(manifest_path)?;
    let samples = manifest
        .samples
        .iter()
        .map(|r| {
            Ok(LabeledSample {
                id: r.path.clone(),
                events: load_sample(manifest_path, r)?,
                sources: r.sources.clone(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok((samples, manifest.label_sigma_deg))
}

/// Deterministic split: `(train, validation)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(derive_seed(seed, TAG_SPLIT), 0);
    let order = index::sample(&mut rng, n, n).into_vec();
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_psnr: Option<f64>,
}

pub struct TrainOutcome {
    pub net: Network<f32>,
    pub log: Vec<LogRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

struct Example {
    events: EventList,
    sources: Vec<SourceSpec>,
}

fn augment_one(
    sample: &LabeledSample,
    aug: &Augmentation,
    seq_len: usize,
    seed: u64,
) -> Result<Example, EventError> {
    let mut rng = stream_rng(seed, 0);
    let mut events = sample.events.clone();
    let mut sources = sample.sources.clone();
    if aug.perturb {
        events = perturb(&events, aug.perturb_pos_mm, aug.perturb_e_res, rng.random())?;
    }
    let cap = events.len().min(seq_len);
    if aug.subsample && cap > 0 {
        let lo = aug.subsample_min.min(cap);
        let n = rng.random_range(lo..=cap);
        events = subsample(&events, n, rng.random())?;
    }
    if aug.mirror && rng.random_bool(0.5) {
        let axis = if rng.random_bool(0.5) { Axis::X } else { Axis::Y };
        events = mirror(&events, axis);
        sources = sources.iter().map(|s| s.mirrored(axis)).collect();
    }
    Ok(Example { events, sources })
}

/// Augmented events and label sources for slot `slot` of a step.
fn make_example(
    samples: &[LabeledSample],
    train: &[usize],
    first: usize,
    cfg: &TrainConfig,
    seq_len: usize,
    seed: u64,
) -> Result<Example, TrainError> {
    let aug = &cfg.augment;
    let wrap = |i: usize| {
        let s = &samples[i];
        move |source| TrainError::Augment {
            sample: s.id.clone(),
            source,
        }
    };
    let mut rng = stream_rng(seed, 1);
    let base = augment_one(&samples[first], aug, seq_len, derive_seed(seed, 0)).map_err(wrap(first))?;
    if !(aug.merge && train.len() > 1 && rng.random_bool(aug.merge_prob)) {
        return Ok(base);
    }
    let extra = rng.random_range(1..aug.merge_max);
    let mut parts = vec![base];
    for k in 0..extra {
        let i = train[rng.random_range(0..train.len())];
        parts.push(augment_one(&samples[i], aug, seq_len, derive_seed(seed, 1 + k as u64)).map_err(wrap(i))?);
    }
    let lists: Vec<EventList> = parts.iter().map(|p| p.events.clone()).collect();
    let events = merge(&lists, rng.random()).map_err(wrap(first))?;
    let sources = parts.into_iter().flat_map(|p| p.sources).collect();
    Ok(Example { events, sources })
}

/// Mean validation PSNR over finite values, `None` when nothing was scored.
pub fn validation_psnr(
    net: &Network<f32>,
    samples: &[LabeledSample],
    ids: &[usize],
    label_sigma_deg: f64,
) -> Option<f64> {
    let grid = Grid::new(net.cfg.out_w, net.cfg.out_h).expect("validated output size");
    let scores: Vec<f64> = ids
        .par_iter()
        .filter_map(|&i| {
            let s = &samples[i];
            let (img, _) = infer_patched(net, &s.events).ok()?;
            let label = make_label(&s.sources, label_sigma_deg, grid);
            Some(psnr(&label, &img).ok()?.as_f64())
        })
        .collect();
    let finite: Vec<f64> = scores.into_iter().filter(|v| v.is_finite()).collect();
    (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
}

struct Adam {
    m: Params<f32>,
    v: Params<f32>,
    t: i32,
}

impl Adam {
    fn new(p: &Params<f32>) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params<f32>, grads: &Params<f64>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                let mk = cfg.beta1 * m.data[k] as f64 + (1.0 - cfg.beta1) * gk;
                let vk = cfg.beta2 * v.data[k] as f64 + (1.0 - cfg.beta2) * gk * gk;
                m.data[k] = mk as f32;
                v.data[k] = vk as f32;
                let upd = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps);
                p.data[k] = (p.data[k] as f64 - upd) as f32;
            }
        }
    }
}

/// Trains from `init` (or fresh weights) and reports every step to `on_record`.
pub fn train(
    samples: &[LabeledSample],
    label_sigma_deg: f64,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    init: Option<Network<f32>>,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, TrainError> {
    if let Some((field, message)) = cfg.validate().into_iter().chain(cfg.loss.validate()).next() {
        return Err(TrainError::Config { field, message });
    }
    if samples.len() < 2 {
        return Err(TrainError::Config {
            field: "samples",
            message: format!("need at least 2 samples for a split, got {}", samples.len()),
        });
    }
    let mut net = match init {
        Some(n) => n,
        None => Network::<f32>::init(net_cfg, derive_seed(cfg.seed, TAG_INIT))?,
    };
    let grid = Grid::new(net.cfg.out_w, net.cfg.out_h).expect("validated output size");
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction, cfg.seed);
    let val_scored: Vec<usize> = val_idx.iter().copied().take(cfg.val_limit).collect();
    let mut adam = Adam::new(&net.params);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let bsz = cfg.batch;
    for step in 0..cfg.max_steps {
        let mut rng = stream_rng(derive_seed(cfg.seed, TAG_BATCH), step as u64);
        let picks: Vec<usize> = if train_idx.len() >= bsz {
            index::sample(&mut rng, train_idx.len(), bsz).into_iter().map(|k| train_idx[k]).collect()
        } else {
            (0..bsz).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect()
        };
        let aug_seed = derive_seed(cfg.seed, TAG_AUG);
        let examples: Vec<(usize, Example)> = picks
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let seed = derive_seed(aug_seed, (step * bsz + b) as u64);
                make_example(samples, &train_idx, i, cfg, net.cfg.seq_len, seed).map(|e| (i, e))
            })
            .collect::<Result<_, _>>()?;
        let passes: Vec<_> = examples
            .par_iter()
            .map(|(_, ex)| {
                let (img, cache) = net.forward_cached(&prepare_input(&ex.events, &net.cfg));
                let label = make_label(&ex.sources, label_sigma_deg, grid).values;
                (img, cache, label)
            })
            .collect();
        let nonfinite = |what| {
            move |b: usize| TrainError::NonFinite {
                step,
                sample: samples[examples[b].0].id.clone(),
                what,
            }
        };
        if let Some(b) = passes.iter().position(|p| p.0.iter().any(|v| !v.is_finite())) {
            return Err(nonfinite("prediction")(b));
        }
        let preds: Vec<Vec<f64>> = passes.iter().map(|p| p.0.iter().map(|&v| v as f64).collect()).collect();
        let labels: Vec<&[f64]> = passes.iter().map(|p| p.2.as_slice()).collect();
        let pred_refs: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
        let (loss, dimgs) = hybrid_batch(&labels, &pred_refs, &cfg.loss).expect("matching sizes");
        if !loss.total.is_finite() {
            return Err(nonfinite("loss")(0));
        }
        let grads: Vec<Params<f32>> = passes
            .par_iter()
            .zip(&dimgs)
            .map(|(p, d)| {
                let d32: Vec<f32> = d.iter().map(|&v| v as f32).collect();
                net.backward(&p.1, &d32).0
            })
            .collect();
        let mut total = grads[0].cast::<f64>();
        for g in &grads[1..] {
            total.add_assign(&g.cast());
        }
        if let Some(b) = grads.iter().position(|g| g.first_non_finite().is_some()) {
            return Err(nonfinite("gradient")(b));
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut net.params, &total, lr, cfg);
        let done = step + 1;
        let val_psnr = if cfg.val_every > 0 && (done % cfg.val_every == 0 || done == cfg.max_steps) {
            validation_psnr(&net, samples, &val_scored, label_sigma_deg)
        } else {
            None
        };
        let rec = LogRecord {
            step: done,
            lr,
            l1: loss.l1,
            l2: loss.l2,
            total: loss.total,
            val_psnr,
        };
        on_record(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        net,
        log,
        train_ids: train_idx.iter().map(|&i| samples[i].id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| samples[i].id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_schedule() {
        let full = TrainConfig::full_scale();
        assert_eq!(full.lr_at(0), 2e-4);
        assert_eq!(full.lr_at(39_999), 2e-4);
        assert!((full.lr_at(40_000) - 1e-4).abs() < 1e-18);
        assert!((full.lr_at(80_000) - 5e-5).abs() < 1e-18);
        assert!((TrainConfig::default().lr_at(5000) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn split_is_eighty_twenty_and_disjoint() {
        let (tr, va) = split_indices(50, 0.2, 3);
        assert_eq!((tr.len(), va.len()), (40, 10));
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(split_indices(50, 0.2, 3), (tr, va));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_empty());
        let bad = TrainConfig {
            lr: 0.0,
            batch: 0,
            ..TrainConfig::default()
        };
        let fields: Vec<_> = bad.validate().into_iter().map(|e| e.0).collect();
        assert_eq!(fields, vec!["lr", "batch"]);
    }
}
