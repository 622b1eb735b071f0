//! Finite-difference check of the analytic backward pass, in f64.
//!
//! The objective is the hybrid loss with its normalizers frozen at the base
//! point, `alpha * l1 + beta * l2`, whose gradient is exactly what training
//! backpropagates. Weights are redrawn at a larger scale than the training
//! initialization so that every tensor, biases and norm parameters included,
//! carries gradient. Coordinates whose central difference would straddle a
//! LeakyReLU kink or an end of the Dice ramp are skipped and counted.

use rand::seq::index;
use rand::Rng as _;
use serde::Serialize;

use ccir_core::losses::{dice_loss, hybrid_loss, shape_loss, LossConfig};
use ccir_core::rng::{derive_seed, stream_rng};

use crate::config::NetworkConfig;
use crate::input::PreparedInput;
use crate::model::{NetError, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Parameter and input coordinates to compare.
    pub coords: usize,
    pub step: f64,
    /// Tokens holding events; the rest stay padding.
    pub valid: usize,
    /// Relative errors use `max(|analytic|, |numeric|, floor * max_scale)`
    /// as denominator, `max_scale` being the largest checked gradient.
    pub floor: f64,
    pub loss: LossConfig,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coords: 240,
            step: 1e-5,
            valid: 11,
            floor: 1e-6,
            loss: LossConfig {
                dice_smoothing: 1.0,
                ..LossConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `rstb0.st1.attn.qkv.weight[17]`.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_abs_gradient: f64,
}

struct Problem {
    net: Network<f64>,
    input: PreparedInput,
    label: Vec<f64>,
    alpha: f64,
    beta: f64,
    loss: LossConfig,
}

/// Kink state of one evaluation: LeakyReLU signs and Dice ramp regions.
#[derive(PartialEq)]
struct Regime(Vec<bool>, Vec<u8>);

impl Problem {
    fn eval(&self, net: &Network<f64>, input: &PreparedInput) -> (f64, Regime) {
        let (img, cache) = net.forward_cached(input);
        let (l1, _) = shape_loss(&self.label, &img, &self.loss).expect("same size");
        let (l2, _) = dice_loss(&self.label, &img, &self.loss).expect("same size");
        let ramp = img
            .iter()
            .map(|&v| {
                let r = (v - self.loss.t) / self.loss.dice_smoothing;
                u8::from(r > 0.0) + u8::from(r >= 1.0)
            })
            .collect();
        (self.alpha * l1 + self.beta * l2, Regime(cache.activation_signs(), ramp))
    }
}

fn random_problem(cfg: &NetworkConfig, seed: u64, opts: &GradCheckOptions) -> Result<Problem, NetError> {
    let mut net = Network::<f64>::init(cfg, seed)?;
    let mut rng = stream_rng(derive_seed(seed, 1), 0);
    for t in &mut net.params.tensors {
        let scale = if t.name.contains("norm") && t.name.ends_with("weight") {
            None
        } else if t.name.starts_with("ig.") {
            Some(0.6)
        } else {
            Some(0.35)
        };
        for v in &mut t.data {
            *v = match scale {
                Some(s) => rng.random_range(-s..s),
                None => rng.random_range(0.5..1.5),
            };
        }
    }
    let l = cfg.seq_len;
    let valid = opts.valid.min(l);
    let mut data = vec![0.0; 4 * l];
    for p in 0..valid {
        data[p] = rng.random_range(-1.0..1.0);
        data[l + p] = rng.random_range(-1.0..1.0);
        data[2 * l + p] = rng.random_range(0.05..0.6);
        data[3 * l + p] = rng.random_range(0.05..0.8);
    }
    let input = PreparedInput { len: l, valid, data };
    let n = cfg.out_w * cfg.out_h;
    let label: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.4) { rng.random_range(0.1..1.0) } else { 0.0 })
        .collect();
    let img = net.forward_input(&input);
    let (b, _) = hybrid_loss(&label, &img, &opts.loss).expect("same size");
    Ok(Problem {
        net,
        input,
        label,
        alpha: b.alpha,
        beta: b.beta,
        loss: opts.loss,
    })
}

/// Compares analytic and central-difference gradients on randomly chosen
/// parameter and input coordinates.
pub fn grad_check(cfg: &NetworkConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, NetError> {
    let prob = random_problem(cfg, seed, opts)?;
    let (img, cache) = prob.net.forward_cached(&prob.input);
    let (_, g1) = shape_loss(&prob.label, &img, &prob.loss).expect("same size");
    let (_, g2) = dice_loss(&prob.label, &img, &prob.loss).expect("same size");
    let dimg: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| prob.alpha * a + prob.beta * b).collect();
    let (grads, dinput) = prob.net.backward(&cache, &dimg);
    let (_, base_regime) = prob.eval(&prob.net, &prob.input);

    let n_params = prob.net.params.n_scalars();
    // inputs are checked on the valid tokens only; padding is covered by
    // the masking tests
    let valid_inputs: Vec<usize> = (0..4)
        .flat_map(|ch| (0..prob.input.valid).map(move |p| ch * prob.input.len + p))
        .collect();
    let total = n_params + valid_inputs.len();
    let mut rng = stream_rng(derive_seed(seed, 2), 0);
    let picks = index::sample(&mut rng, total, opts.coords.min(total)).into_vec();

    let h = opts.step;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for k in picks {
        let (analytic, name, plus, minus) = if k < n_params {
            let (ti, ei) = prob.net.params.locate(k).expect("in range");
            let mut p = prob.net.clone();
            let base = p.params.tensors[ti].data[ei];
            p.params.tensors[ti].data[ei] = base + h;
            let plus = prob.eval(&p, &prob.input);
            p.params.tensors[ti].data[ei] = base - h;
            let minus = prob.eval(&p, &prob.input);
            let name = format!("{}[{ei}]", p.params.tensors[ti].name);
            (grads.tensors[ti].data[ei], name, plus, minus)
        } else {
            let j = valid_inputs[k - n_params];
            let mut inp = prob.input.clone();
            let base = inp.data[j];
            inp.data[j] = base + h;
            let plus = prob.eval(&prob.net, &inp);
            inp.data[j] = base - h;
            let minus = prob.eval(&prob.net, &inp);
            let name = format!("input[{}, {}]", j / inp.len, j % inp.len);
            (dinput[j], name, plus, minus)
        };
        if plus.1 != base_regime || minus.1 != base_regime {
            skipped += 1;
            continue;
        }
        rows.push((name, analytic, (plus.0 - minus.0) / (2.0 * h)));
    }
    let scale = rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
    let mut report = GradCheckReport {
        seed,
        max_rel_error: 0.0,
        worst: String::new(),
        checked: rows.len(),
        skipped,
        max_abs_gradient: scale,
    };
    for (name, a, n) in rows {
        let den = a.abs().max(n.abs()).max(opts.floor * scale).max(f64::MIN_POSITIVE);
        let rel = (a - n).abs() / den;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = name;
        }
    }
    Ok(report)
}

/// Largest gradient entry at a constructed exact minimum: the final conv is
/// zeroed and its bias set to 1 so the output equals an all-ones label.
pub fn rigged_minimum_gradient(cfg: &NetworkConfig, seed: u64, loss: &LossConfig) -> Result<f64, NetError> {
    let mut net = Network::<f64>::init(cfg, seed)?;
    let (w, b) = (net.layout.out_w, net.layout.out_b);
    net.params.get_mut(w).iter_mut().for_each(|v| *v = 0.0);
    net.params.get_mut(b)[0] = 1.0;
    let l = cfg.seq_len;
    let mut rng = stream_rng(derive_seed(seed, 3), 0);
    let valid = (l / 2).max(1);
    let mut data = vec![0.0; 4 * l];
    for ch in 0..4 {
        for p in 0..valid {
            data[ch * l + p] = rng.random_range(0.0..1.0);
        }
    }
    let input = PreparedInput { len: l, valid, data };
    let (img, cache) = net.forward_cached(&input);
    let label = vec![1.0; img.len()];
    let (_, dimg) = hybrid_loss(&label, &img, loss).expect("same size");
    let (grads, dinput) = net.backward(&cache, &dimg);
    let max_param = grads.tensors.iter().flat_map(|t| t.data.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(dinput.iter().fold(max_param, |m, v| m.max(v.abs())))
}
