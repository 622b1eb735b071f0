//! Release acceptance checks, one line per criterion.
//!
//! Criteria 10 and 11 need trained desk-scale weights: `tests/data/desk.ccwt`
//! or the path in `CCIR_WEIGHTS`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use ccir_cli::bench::{classical, run_bench};
use ccir_cli::config::RunConfig;
use ccir_core::codec::{decode_events, encode_events, read_csv, write_csv};
use ccir_core::dataset::SampleGenerator;
use ccir_core::events::{energy_sigma, merge, EventList, FarFieldEvent};
use ccir_core::geom::angles_from_direction;
use ccir_core::imaging::{decode_image, encode_image, mlem, mlem_system, pixel_distance, sbp, soe, ReconConfig, SparseSystem};
use ccir_core::kinematics::{compton_cos_theta, klein_nishina_pdf, scattered_energies, KleinNishinaSampler};
use ccir_core::labels::make_label;
use ccir_core::losses::{dice_loss, hybrid_loss, shape_loss, LossConfig};
use ccir_core::metrics::{psnr, ssim};
use ccir_core::rng::{derive_seed, stream_rng};
use ccir_core::simulator::{simulate, simulate_with_truth, EmissionLine};
use ccir_core::{AngularImage, CameraModel, Grid, SimOptions, SourceSpec};
use ccir_net::config::NetworkConfig;
use ccir_net::gradcheck::{grad_check, GradCheckOptions};
use ccir_net::infer::infer_patched;
use ccir_net::model::Network;

type Outcome = Result<String, String>;

/// Analytic gradient and the function it should match.
type Check<'a> = (&'a [f64], &'a dyn Fn(&[f64]) -> f64);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn c1_kinematics_roundtrip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let e0 = if rng.random_bool(0.5) { 511.0 } else { 1275.0 };
        let c: f64 = rng.random_range(-1.0..=1.0);
        let (e1, e2) = scattered_energies(e0, c).map_err(|e| e.to_string())?;
        let back = compton_cos_theta(e1, e2).map_err(|e| e.to_string())?.value();
        worst = worst.max((back - c).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(worst < 1e-12, "max roundtrip error {worst:e}");
    ensure!(secs < 1.0, "took {secs:.2} s");
    Ok(format!("max error {worst:.2e}"))
}

fn c2_klein_nishina_chi_square() -> Outcome {
    let t = Instant::now();
    let bins = 50;
    let n = 1_000_000;
    // bin probabilities by Simpson quadrature of the unnormalized density
    let sub = 200;
    let mut mass = vec![0.0; bins];
    for (b, m) in mass.iter_mut().enumerate() {
        let lo = -1.0 + 2.0 * b as f64 / bins as f64;
        let h = 2.0 / bins as f64 / sub as f64;
        let mut s = 0.0;
        for k in 0..=sub {
            let w = if k == 0 || k == sub { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * klein_nishina_pdf(511.0, lo + k as f64 * h).unwrap();
        }
        *m = s * h / 3.0;
    }
    let total: f64 = mass.iter().sum();
    let sampler = KleinNishinaSampler::new(511.0).map_err(|e| e.to_string())?;
    let dist = ChiSquared::new((bins - 1) as f64).unwrap();
    let mut ps = Vec::new();
    for seed in 0..3 {
        let mut rng = stream_rng(seed, 0);
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let c = sampler.sample(&mut rng).map_err(|e| e.to_string())?;
            counts[(((c + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(&mass)
            .map(|(&o, &m)| {
                let e = n as f64 * m / total;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        ps.push(1.0 - dist.cdf(stat));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(ps.iter().all(|&p| p > 0.01), "p-values {ps:?}");
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("p-values {:.3} {:.3} {:.3}", ps[0], ps[1], ps[2]))
}

fn c3_metric_oracles() -> Outcome {
    let grid = Grid::square(256);
    let zeros = AngularImage::zeros(grid);
    let mut hot = zeros.clone();
    hot.set(17, 200, 1.0);
    let p = psnr(&hot, &zeros).unwrap().as_f64();
    ensure!((p - 48.1648).abs() < 1e-4 && (p - 10.0 * 65536f64.log10()).abs() < 1e-6, "psnr {p}");
    let ones = AngularImage::from_values(grid, vec![1.0; grid.len()]).unwrap();
    let s = ssim(&ones, &zeros).unwrap();
    ensure!((s - 9.99900e-5).abs() < 1e-9, "ssim(1, 0) {s}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = AngularImage::from_values(grid, (0..grid.len()).map(|_| rng.random()).collect()).unwrap();
    let sx = ssim(&x, &x).unwrap();
    ensure!(sx == 1.0, "ssim(x, x) {sx}");
    Ok(format!("psnr {p:.6} dB, ssim(1,0) {s:.6e}"))
}

fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], j: usize, h: f64) -> f64 {
    let (mut p, mut m) = (x.to_vec(), x.to_vec());
    p[j] += h;
    m[j] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn c4_loss_oracles() -> Outcome {
    let t = Instant::now();
    let cfg = LossConfig::default();
    let (l, _) = shape_loss(&[1.0, 0.0, 0.0, 0.0], &[0.9, 0.1, 0.0, 0.0], &cfg).map_err(|e| e.to_string())?;
    ensure!((l - 0.003).abs() <= 1e-12, "2x2 shape loss {l}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = cfg.dice_smoothing;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..64).map(|_| if rng.random_bool(0.4) { rng.random() } else { 0.0 }).collect();
        // predictions stay clear of the two kinks of the dice ramp
        let xh: Vec<f64> = (0..64)
            .map(|_| loop {
                let v: f64 = rng.random_range(-0.1..1.0);
                if (v - cfg.t).abs() > 2.0 * s && (v - cfg.t - s).abs() > 2.0 * s {
                    break v;
                }
            })
            .collect();
        let (b, gh) = hybrid_loss(&x, &xh, &cfg).map_err(|e| e.to_string())?;
        let (_, gs) = shape_loss(&x, &xh, &cfg).unwrap();
        let (_, gd) = dice_loss(&x, &xh, &cfg).unwrap();
        let frozen = |p: &[f64]| b.alpha * shape_loss(&x, p, &cfg).unwrap().0 + b.beta * dice_loss(&x, p, &cfg).unwrap().0;
        let checks: [Check; 3] = [
            (&gs[..], &|p: &[f64]| shape_loss(&x, p, &cfg).unwrap().0),
            (&gd[..], &|p: &[f64]| dice_loss(&x, p, &cfg).unwrap().0),
            (&gh[..], &frozen),
        ];
        for (g, f) in checks {
            let floor = 1e-2 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (j, &a) in g.iter().enumerate() {
                let n = fd(f, &xh, j, 1e-6);
                let e = (a - n).abs() / a.abs().max(n.abs()).max(floor).max(f64::MIN_POSITIVE);
                worst = worst.max(e);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(worst < 1e-6, "max relative gradient error {worst:e}");
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("2x2 loss {l}, max gradient error {worst:.2e}"))
}

fn line(e: f64) -> Vec<EmissionLine> {
    vec![EmissionLine {
        energy_kev: e,
        weight: 1.0,
    }]
}

fn c5_simulator_physics() -> Outcome {
    let t = Instant::now();
    let cam = CameraModel::default();
    let mut worst = 0.0f64;
    for (k, e0) in [511.0, 1275.0].into_iter().enumerate() {
        let src = [SourceSpec::new(1.1, 0.15).with_lines(line(e0))];
        let (l, truth) = simulate_with_truth(&cam, &src, 20_000, &SimOptions::noiseless(k as u64)).map_err(|e| e.to_string())?;
        for (ev, tr) in l.events.iter().zip(&truth) {
            ensure!(ev.e1 + ev.e2 == e0, "e1 + e2 = {} for line {e0}", ev.e1 + ev.e2);
            let c = compton_cos_theta(ev.e1, ev.e2).map_err(|e| e.to_string())?.value();
            worst = worst.max((c - tr.cos_theta).abs());
        }
    }
    ensure!(worst < 1e-9, "cosine roundtrip error {worst:e}");
    let l = simulate(&cam, &[SourceSpec::new(1.1, 0.15)], 100_000, &SimOptions::default()).map_err(|e| e.to_string())?;
    let mut offsets = Vec::new();
    for e0 in [511.0, 1275.0] {
        let sigma = energy_sigma(e0, cam.e_res_absorber_511);
        let (lo, width, bins) = (e0 - 4.0 * sigma, sigma / 5.0, 40);
        let mut hist = vec![0usize; bins];
        for ev in &l.events {
            let b = ((ev.e1 + ev.e2 - lo) / width).floor();
            if (0.0..bins as f64).contains(&b) {
                hist[b as usize] += 1;
            }
        }
        let peak = (0..bins).max_by_key(|&b| hist[b]).unwrap();
        let mode = lo + (peak as f64 + 0.5) * width;
        offsets.push((mode - e0) / sigma);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(offsets.iter().all(|o| o.abs() <= 1.5), "photopeak offsets {offsets:?} sigma");
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!(
        "cos error {worst:.1e}, peak offsets {:+.2} {:+.2} sigma",
        offsets[0], offsets[1]
    ))
}

fn c6_classical_localization() -> Outcome {
    let grid = Grid::square(128);
    let truth = (70, 58);
    let (phi, c) = angles_from_direction(grid.pixel_direction(truth.0, truth.1).unwrap());
    let src = [SourceSpec::new(phi, c).with_lines(line(511.0))];
    let cam = CameraModel::default();
    let list = simulate(&cam, &src, 1000, &SimOptions::noiseless(6)).map_err(|e| e.to_string())?;
    let cfg = ReconConfig {
        seed: 6,
        mlem_iters: 30,
        ..ReconConfig::default()
    };
    let mut parts = Vec::new();
    for (name, tol, budget) in [("sbp", 1, 5.0), ("mlem", 2, 60.0), ("soe", 2, 60.0)] {
        let t = Instant::now();
        let img = single_threaded(|| match name {
            "sbp" => sbp(&list, grid, &cam, &cfg),
            "mlem" => mlem(&list, grid, &cam, &cfg),
            _ => soe(&list, grid, &cam, &cfg),
        })
        .map_err(|e| e.to_string())?
        .0;
        let secs = t.elapsed().as_secs_f64();
        let d = pixel_distance(img.argmax(), truth);
        ensure!(d <= tol, "{name} argmax {:?} is {d} px from {truth:?}", img.argmax());
        ensure!(secs < budget, "{name} took {secs:.1} s");
        parts.push(format!("{name} {d} px {secs:.2} s"));
    }
    Ok(parts.join(", "))
}

fn c7_classical_ordering() -> Outcome {
    let cfg = RunConfig::default();
    let rows = run_bench(&cfg, 20, 1000, None).map_err(|e| e.to_string())?;
    let p = |name: &str| rows.iter().find(|r| r.algorithm == name).unwrap().mean_psnr_db;
    let (sbp_db, soe_db, mlem_db) = (p("sbp"), p("soe"), p("mlem"));
    let msg = format!("PSNR sbp {sbp_db:.2} soe {soe_db:.2} mlem {mlem_db:.2} dB");
    ensure!(mlem_db > soe_db + 1.0 && soe_db + 1.0 > sbp_db + 2.0, "{msg}");
    Ok(msg)
}

fn toy_loglik(sys: &SparseSystem, lambda: &[f64]) -> f64 {
    let mut ll = -lambda.iter().sum::<f64>();
    for i in 0..sys.n_rows() {
        let (idx, w) = sys.row(i);
        ll += idx.iter().zip(w).map(|(&j, t)| t * lambda[j as usize]).sum::<f64>().ln();
    }
    ll
}

fn c8_mlem_toy() -> Outcome {
    let sys = SparseSystem::from_rows(2, &[vec![(0, 0.9), (1, 0.1)], vec![(0, 0.5), (1, 0.5)], vec![(0, 0.2), (1, 0.8)]]);
    let (lambda, trace) = mlem_system(&sys, 5000);
    let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
    for a in 0..=4000 {
        for b in 0..=4000 {
            let l = [a as f64 * 1e-3, b as f64 * 1e-3];
            if a + b < 2500 || a + b > 3500 {
                continue;
            }
            let ll = toy_loglik(&sys, &l);
            if ll > best.0 {
                best = (ll, l);
            }
        }
    }
    let err = (lambda[0] - best.1[0]).abs().max((lambda[1] - best.1[1]).abs());
    ensure!(err <= 2e-3, "fixed point {lambda:?} vs grid {:?}", best.1);
    // once converged, successive values differ only by summation rounding
    let ulps = trace
        .log_likelihood
        .windows(2)
        .map(|w| (w[0] - w[1]) / (f64::EPSILON * w[0].abs()))
        .fold(0.0f64, f64::max);
    ensure!(ulps <= 4.0, "log-likelihood decreased by {ulps:.1} ulp");
    Ok(format!(
        "fixed point {:.4} {:.4}, grid {:.3} {:.3}, largest drop {ulps:.1} ulp",
        lambda[0], lambda[1], best.1[0], best.1[1]
    ))
}

fn c9_gradient_check() -> Outcome {
    let t = Instant::now();
    let tiny = NetworkConfig::tiny();
    let mut errs = Vec::new();
    for seed in 0..3 {
        let r = grad_check(&tiny, seed, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
        errs.push(r.max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(errs.iter().all(|&e| e < 1e-4), "max relative errors {errs:?}");
    ensure!(secs < 120.0, "took {secs:.1} s");
    Ok(format!("max relative errors {:.1e} {:.1e} {:.1e}", errs[0], errs[1], errs[2]))
}

fn weights() -> Result<Network<f32>, String> {
    let path = std::env::var_os("CCIR_WEIGHTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/desk.ccwt"));
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Network::from_bytes(&bytes).map_err(|e| e.to_string())
}

/// Seed of the held-out samples; training sets are built from other seeds.
const HELD_OUT_SEED: u64 = 1007;

fn scores(label: &AngularImage, img: &AngularImage) -> (f64, f64) {
    (psnr(label, img).unwrap().as_f64(), ssim(label, img).unwrap())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c10_network_beats_mlem() -> Outcome {
    let net = weights()?;
    let cfg = RunConfig::default();
    let grid = Grid::new(net.cfg.out_w, net.cfg.out_h).unwrap();
    let gen = SampleGenerator::default();
    let mut rows = Vec::new();
    for i in 0..100 {
        let (sources, n) = gen.draw(HELD_OUT_SEED, i);
        let opts = SimOptions {
            seed: derive_seed(HELD_OUT_SEED, i as u64),
            ..SimOptions::default()
        };
        let list = simulate(&cfg.camera, &sources, n, &opts).map_err(|e| e.to_string())?;
        let label = make_label(&sources, cfg.label_sigma_deg, grid);
        let m = classical(&cfg, "mlem", &list, grid, opts.seed).map_err(|e| e.to_string())?;
        let (x, _) = infer_patched(&net, &list).map_err(|e| e.to_string())?;
        let ((mp, ms), (np, ns)) = (scores(&label, &m), scores(&label, &x));
        rows.push([mp, ms, np, ns]);
    }
    let col = |k: usize| mean(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    let (mp, ms, np, ns) = (col(0), col(1), col(2), col(3));
    let msg = format!("network {np:.2} dB / ssim {ns:.3}, mlem {mp:.2} dB / ssim {ms:.3}");
    ensure!(np >= mp + 2.0 && ns > ms, "{msg}");
    Ok(msg)
}

/// Three equal sources, `per_source` events each, merged.
fn triple(cfg: &RunConfig, index: usize, per_source: usize) -> Result<(EventList, Vec<SourceSpec>), String> {
    let gen = SampleGenerator {
        sources_min: 3,
        sources_max: 3,
        ..SampleGenerator::default()
    };
    let mut sources = gen.draw(HELD_OUT_SEED, index).0;
    for s in &mut sources {
        s.intensity = 1.0;
    }
    let lists = sources
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let opts = SimOptions {
                seed: derive_seed(derive_seed(HELD_OUT_SEED, index as u64), (per_source * 4 + k) as u64),
                ..SimOptions::default()
            };
            simulate(&cfg.camera, std::slice::from_ref(s), per_source, &opts).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let list = merge(&lists, derive_seed(HELD_OUT_SEED, index as u64)).map_err(|e| e.to_string())?;
    Ok((list, sources))
}

fn c11_event_count_trend() -> Outcome {
    let net = weights()?;
    let cfg = RunConfig::default();
    let grid = Grid::new(net.cfg.out_w, net.cfg.out_h).unwrap();
    let counts = [50, 100, 200, 300, 400];
    let mut mlem_db = Vec::new();
    let mut net_db = Vec::new();
    for &n in &counts {
        let (mut m, mut x) = (Vec::new(), Vec::new());
        for i in 0..30 {
            let (list, sources) = triple(&cfg, i, n)?;
            let label = make_label(&sources, cfg.label_sigma_deg, grid);
            let img = classical(&cfg, "mlem", &list, grid, i as u64).map_err(|e| e.to_string())?;
            m.push(scores(&label, &img).0);
            let (out, _) = infer_patched(&net, &list).map_err(|e| e.to_string())?;
            x.push(scores(&label, &out).0);
        }
        mlem_db.push(mean(&m));
        net_db.push(mean(&x));
    }
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join(" ");
    let msg = format!(
        "per-source counts {counts:?}: network {} dB, mlem {} dB",
        fmt(&net_db),
        fmt(&mlem_db)
    );
    // the trend is over 50, 100, 200, 400; 300 is only the comparison point
    let trend = [0, 1, 2, 4];
    for v in [&net_db, &mlem_db] {
        ensure!(trend.windows(2).all(|w| v[w[1]] >= v[w[0]] - 0.3), "{msg}");
    }
    ensure!(net_db[1] >= mlem_db[3], "{msg}");
    Ok(msg)
}

fn small_net() -> Network<f32> {
    let cfg = NetworkConfig {
        seq_len: 64,
        ..NetworkConfig::default()
    };
    Network::init(&cfg, 12).unwrap()
}

fn c12_patched_inference() -> Outcome {
    let net = small_net();
    let cam = CameraModel::default();
    let list = simulate(&cam, &[SourceSpec::new(1.2, 0.1)], 50, &SimOptions::default()).map_err(|e| e.to_string())?;
    let direct = net.forward(&list);
    let (one, r1) = infer_patched(&net, &list).map_err(|e| e.to_string())?;
    ensure!(r1.counts == vec![50], "patches {:?}", r1.counts);
    ensure!(one.values == direct.values, "single patch differs from the direct forward pass");
    let full = simulate(&cam, &[SourceSpec::new(1.2, 0.1)], 64, &SimOptions::default()).map_err(|e| e.to_string())?;
    let twice = EventList {
        events: full.events.iter().chain(&full.events).copied().collect(),
        ..full.clone()
    };
    let (a, _) = infer_patched(&net, &full).map_err(|e| e.to_string())?;
    let (b, r2) = infer_patched(&net, &twice).map_err(|e| e.to_string())?;
    ensure!(r2.counts == vec![64, 64], "patches {:?}", r2.counts);
    ensure!(a.values == b.values, "two identical patches differ from one");
    Ok("single and duplicated patches bitwise equal".into())
}

fn c13_format_roundtrips() -> Outcome {
    let cam = CameraModel::default();
    let list = simulate(&cam, &[SourceSpec::new(0.9, -0.3)], 2000, &SimOptions::default()).map_err(|e| e.to_string())?;
    let bits = |l: &EventList| -> Vec<[u64; 4]> {
        l.events
            .iter()
            .map(|e| [e.dx.to_bits(), e.dy.to_bits(), e.e1.to_bits(), e.e2.to_bits()])
            .collect()
    };
    let f32s = EventList {
        events: list
            .events
            .iter()
            .map(|e| FarFieldEvent::new(e.dx as f32 as f64, e.dy as f32 as f64, e.e1 as f32 as f64, e.e2 as f32 as f64))
            .collect(),
        ..list.clone()
    };
    // both event formats store f32 fields
    let bytes = encode_events(&f32s);
    let back = decode_events(&bytes).map_err(|e| e.to_string())?;
    ensure!(
        bits(&back) == bits(&f32s) && back.gap_mm == list.gap_mm && encode_events(&back) == bytes,
        "event binary roundtrip"
    );
    let csv = read_csv(&write_csv(&f32s), f32s.gap_mm).map_err(|e| e.to_string())?;
    ensure!(bits(&csv) == bits(&f32s), "csv roundtrip");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let grid = Grid::new(40, 24).unwrap();
    let img = AngularImage::from_values(grid, (0..grid.len()).map(|_| (rng.random::<f64>() - 0.3) as f32 as f64).collect()).unwrap();
    let img_bytes = encode_image(&img);
    let img_back = decode_image(&img_bytes).map_err(|e| e.to_string())?;
    ensure!(
        img_back.values.iter().map(|v| v.to_bits()).eq(img.values.iter().map(|v| v.to_bits())) && encode_image(&img_back) == img_bytes,
        "image roundtrip"
    );
    let net = small_net();
    let bytes = net.to_bytes();
    let net_back = Network::<f32>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure!(net_back.to_bytes() == bytes, "weights roundtrip");
    for (t, u) in net.params.tensors.iter().zip(&net_back.params.tensors) {
        ensure!(
            t.name == u.name && t.shape == u.shape && t.data.iter().map(|v| v.to_bits()).eq(u.data.iter().map(|v| v.to_bits())),
            "tensor {} changed",
            t.name
        );
    }
    Ok(format!("events, csv, image and {} weight tensors exact", net.params.tensors.len()))
}

/// Runs the binary and returns its JSON report.
fn ccir(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ccir"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("ccir {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn digests(report: &Value) -> Vec<String> {
    report["outputs"]
        .as_array()
        .map(|v| v.iter().map(|d| d["fnv1a64"].as_str().unwrap_or_default().to_string()).collect())
        .unwrap_or_default()
}

fn c14_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut d = Vec::new();
        d.extend(digests(&ccir(&["simulate", "--seed", "14", "--workers", "1", "--events", "800", "--out", &p("ev.ccev")])?));
        for algo in ["sbp", "soe", "mlem"] {
            let out = p(&format!("{algo}.ccim"));
            d.extend(digests(&ccir(&[
                "reconstruct", "--seed", "14", "--workers", "1", "--algo", algo, "--grid", "64", "--in", &p("ev.ccev"), "--out", &out,
            ])?));
            let m = ccir(&["metrics", "--label", &p("sbp.ccim"), "--image", &out, "--normalize"])?;
            d.push(m["results"].to_string());
        }
        d.extend(digests(&ccir(&[
            "dataset", "--seed", "14", "--workers", "1", "--samples", "24", "--grid", "64", "--out", &p("ds"),
        ])?));
        d.extend(digests(&ccir(&[
            "train", "--seed", "14", "--workers", "1", "--steps", "20", "--set", "train.val_every=10", "--set",
            "train.augment.merge=true", "--dataset", &p("ds/manifest.json"), "--out", &p("w.ccwt"),
        ])?));
        runs.push(d);
    }
    ensure!(runs[0] == runs[1], "digests differ:\n{:?}\n{:?}", runs[0], runs[1]);
    Ok(format!("{} outputs reproduced bitwise", runs[0].len()))
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 14] = [
        (1, c1_kinematics_roundtrip),
        (2, c2_klein_nishina_chi_square),
        (3, c3_metric_oracles),
        (4, c4_loss_oracles),
        (5, c5_simulator_physics),
        (6, c6_classical_localization),
        (7, c7_classical_ordering),
        (8, c8_mlem_toy),
        (9, c9_gradient_check),
        (10, c10_network_beats_mlem),
        (11, c11_event_count_trend),
        (12, c12_patched_inference),
        (13, c13_format_roundtrips),
        (14, c14_determinism),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (n, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n:>2} PASS {msg} [{secs:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {msg} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
