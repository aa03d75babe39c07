//! Release gate: one test per acceptance criterion. Each prints a single
//! `acceptance: <name> ... PASS/FAIL` line (run with `--nocapture` to see
//! them). A process-wide mutex serializes the criteria so the wall-clock
//! budgets are measured without the tests competing for cores.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use unida_core::backbones::{Backbone, BackboneConfig, BackboneKind};
use unida_core::data::{generate_synthetic, SyntheticSpec};
use unida_core::gradcheck;
use unida_core::methods::{otsu_threshold, MethodConfig, MethodKind, PredictionBatch, UnidaMethod};
use unida_core::ot::{partial_sinkhorn, sinkhorn};
use unida_core::protocol::{
    bayes_suggest, build_scenario, h_score, h_score_value, random_baseline, run_trial,
    split_target, ParamDomain, ParamPoint, ParamValue, SearchSpace, TrialSettings,
};
use unida_core::rng;
use unida_core::tensor::{conv1d, irfft, rfft, s3_shuffle, spectral_gate, Parameter, Tensor};

static GATE: Mutex<()> = Mutex::new(());

fn criterion(name: &str, body: impl FnOnce() -> Result<String, String>) {
    let _lock = GATE.lock().unwrap_or_else(|e| e.into_inner());
    match body() {
        Ok(detail) => println!("acceptance: {name} ... PASS ({detail})"),
        Err(why) => {
            println!("acceptance: {name} ... FAIL ({why})");
            panic!("{name}: {why}");
        }
    }
}

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Uniform values bounded away from zero, for kinked ops (relu, abs).
fn rand_vec_offzero(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    rand_vec(n, rng).into_iter().map(|u| u.signum() * (0.1 + 0.9 * u.abs())).collect()
}

fn leaf(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::leaf(shape, rand_vec(shape.iter().product(), rng))
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient checks for every differentiable op and all
//    four backbones, >= 3 shapes each, rel err < 1e-4, under two minutes.
// ---------------------------------------------------------------------------

struct FdSuite {
    failures: Vec<String>,
    checks: usize,
    coords: usize,
    worst: f64,
}

impl FdSuite {
    fn run(&mut self, name: &str, params: &[Parameter], f: &dyn Fn() -> Tensor) {
        let report = gradcheck::check(|| f(), params, 1e-5);
        self.checks += 1;
        self.coords += report.coords_checked;
        if report.max_rel_err > self.worst {
            self.worst = report.max_rel_err;
        }
        if !report.within(1e-4) {
            self.failures.push(format!(
                "{name}: rel err {:.3e} at {}[{}]",
                report.max_rel_err, report.worst_param, report.worst_index
            ));
        }
    }
}

/// Weighted sum turning any tensor into a scalar loss with non-uniform
/// output gradients. The weights are frozen so rebuilds see the same loss.
fn frozen_weights(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::constant(shape, rand_vec(shape.iter().product(), rng))
}

#[test]
fn gradient_suite() {
    criterion("gradient finite differences", || {
        let start = Instant::now();
        let mut rng = rng::stream(42, "acceptance.grad", &[]);
        let mut suite = FdSuite { failures: Vec::new(), checks: 0, coords: 0, worst: 0.0 };

        let shapes2: [[usize; 2]; 3] = [[2, 3], [3, 4], [2, 5]];
        let shapes3: [[usize; 3]; 3] = [[2, 2, 6], [1, 3, 8], [3, 1, 4]];

        for shape in &shapes2 {
            let a = leaf(shape, &mut rng);
            let b = leaf(shape, &mut rng);
            let w = frozen_weights(shape, &mut rng);
            let pair = [
                Parameter::new("a", a.clone()),
                Parameter::new("b", b.clone()),
            ];
            suite.run("add", &pair, &|| a.add(&b).mul(&w).sum());
            suite.run("sub", &pair, &|| a.sub(&b).mul(&w).sum());
            suite.run("mul", &pair, &|| a.mul(&b).mul(&w).sum());
            let one = [Parameter::new("a", a.clone())];
            suite.run("neg", &one, &|| a.neg().mul(&w).sum());
            suite.run("scale", &one, &|| a.scale(1.7).mul(&w).sum());
            suite.run("add_scalar", &one, &|| a.add_scalar(0.9).mul(&w).sum());
            suite.run("gelu", &one, &|| a.gelu().mul(&w).sum());
            suite.run("sigmoid", &one, &|| a.sigmoid().mul(&w).sum());
            suite.run("softplus", &one, &|| a.softplus().mul(&w).sum());
            suite.run("softmax", &one, &|| a.softmax(1).unwrap().mul(&w).sum());
            suite.run("log_softmax", &one, &|| a.log_softmax(1).unwrap().mul(&w).sum());
            suite.run("layer_norm", &one, &|| a.layer_norm(1e-6).mul(&w).sum());
            suite.run("l2_normalize", &one, &|| a.l2_normalize(1e-9).mul(&w).sum());
            suite.run("sum", &one, &|| a.sum());
            suite.run("mean", &one, &|| a.mean());
            let w0 = frozen_weights(&[shape[1]], &mut rng);
            suite.run("sum_axis", &one, &|| a.sum_axis(0).unwrap().mul(&w0).sum());
            suite.run("mean_axis", &one, &|| a.mean_axis(0).unwrap().mul(&w0).sum());
            let wc = frozen_weights(&[shape[0], 2 * shape[1]], &mut rng);
            suite.run("concat", &pair, &|| {
                Tensor::concat(&[a.clone(), b.clone()], 1).unwrap().mul(&wc).sum()
            });
            let wr = frozen_weights(&[shape[1], shape[0]], &mut rng);
            suite.run("reshape", &one, &|| a.reshape(&[shape[1], shape[0]]).mul(&wr).sum());
            let idx: Vec<usize> = (0..shape[0]).map(|i| (i * 2 + 1) % shape[1]).collect();
            let wt = frozen_weights(&[shape[0]], &mut rng);
            suite.run("take_per_row", &one, &|| a.take_per_row(&idx).unwrap().mul(&wt).sum());
            suite.run("dropout_eval", &one, &|| {
                let mut r = rng::stream(0, "acceptance.unused", &[]);
                a.dropout(0.5, false, &mut r).mul(&w).sum()
            });

            // Kinked ops on values bounded away from the kink.
            let k =
                Tensor::leaf(shape, rand_vec_offzero(shape.iter().product(), &mut rng));
            let kp = [Parameter::new("k", k.clone())];
            suite.run("relu", &kp, &|| k.relu().mul(&w).sum());
            suite.run("abs", &kp, &|| k.abs().mul(&w).sum());

            // Matmul with its own inner dimension.
            let m = leaf(&[shape[0], 4], &mut rng);
            let n = leaf(&[4, shape[1]], &mut rng);
            let mm = [
                Parameter::new("m", m.clone()),
                Parameter::new("n", n.clone()),
            ];
            suite.run("matmul", &mm, &|| m.matmul(&n).mul(&w).sum());
        }

        for shape in &shapes3 {
            let a = leaf(shape, &mut rng);
            let one = [Parameter::new("a", a.clone())];
            let wp = frozen_weights(&[shape[2], shape[0], shape[1]], &mut rng);
            suite.run("permute", &one, &|| a.permute(&[2, 0, 1]).unwrap().mul(&wp).sum());
            let keep = shape[2] - 1;
            let wn = frozen_weights(&[shape[0], shape[1], keep], &mut rng);
            suite.run("narrow", &one, &|| a.narrow(2, 1, keep).unwrap().mul(&wn).sum());
        }

        // Convolution across stride/padding variants.
        for (i, &(bs, ci, t, co, k, stride, pad)) in
            [(2, 2, 8, 3, 3, 1, 1), (1, 3, 9, 4, 2, 2, 0), (3, 1, 6, 2, 3, 1, 2)]
                .iter()
                .enumerate()
        {
            let x = leaf(&[bs, ci, t], &mut rng);
            let wgt = leaf(&[co, ci, k], &mut rng);
            let bias = leaf(&[co], &mut rng);
            let t_out = (t + 2 * pad - k) / stride + 1;
            let w = frozen_weights(&[bs, co, t_out], &mut rng);
            let params = [
                Parameter::new(format!("conv{i}.x"), x.clone()),
                Parameter::new(format!("conv{i}.w"), wgt.clone()),
                Parameter::new(format!("conv{i}.b"), bias.clone()),
            ];
            suite.run("conv1d", &params, &|| {
                conv1d(&x, &wgt, &bias, stride, pad).unwrap().mul(&w).sum()
            });
        }

        // Frequency-domain ops.
        for t in [6usize, 8, 10] {
            let bins = t / 2 + 1;
            let x = leaf(&[2, 2, t], &mut rng);
            let y = leaf(&[2, 2, t], &mut rng);
            let one = [Parameter::new("x", x.clone())];
            let pair = [
                Parameter::new("x", x.clone()),
                Parameter::new("y", y.clone()),
            ];
            let wb = frozen_weights(&[2, 2, bins], &mut rng);
            suite.run("rfft_magnitude", &one, &|| {
                let (mag, _) = rfft(&x).to_polar();
                mag.mul(&wb).sum()
            });
            let wt = frozen_weights(&[2, 2, t], &mut rng);
            suite.run("irfft_roundtrip", &one, &|| {
                irfft(&rfft(&x), t).unwrap().mul(&wt).sum()
            });
            let window: Vec<f64> = (0..bins).map(|j| 0.4 + 0.1 * j as f64).collect();
            let kept = bins.min(3);
            let wk = frozen_weights(&[2, 2, kept], &mut rng);
            suite.run("fft_window_truncate", &one, &|| {
                let c = rfft(&x).scale_last_axis(&window).narrow_last(kept).unwrap();
                let (mag, _) = c.to_polar();
                mag.mul(&wk).sum()
            });
            suite.run("fft_mul_elementwise", &pair, &|| {
                irfft(&rfft(&x).mul_elementwise(&rfft(&y)), t).unwrap().mul(&wt).sum()
            });
        }

        // Straight-through ops, checked on their exactly differentiable
        // inputs; the decision parameters are surrogate-trained and excluded.
        for t in [8usize, 12, 16] {
            let x = leaf(&[2, 2, t], &mut rng);
            let one = [Parameter::new("x", x.clone())];
            let w = frozen_weights(&[2, 2, t], &mut rng);
            let priority = Tensor::leaf(&[4], vec![0.9, 0.1, 0.5, 0.4]);
            suite.run("s3_shuffle_data", &one, &|| {
                s3_shuffle(&x, &priority, 0.2).unwrap().mul(&w).sum()
            });
        }
        for n in [4usize, 6, 8] {
            let re = leaf(&[2, n], &mut rng);
            let im = leaf(&[2, n], &mut rng);
            let tau = Tensor::leaf(&[1], vec![0.3]);
            // Per-bin powers kept away from the 0.3 threshold so the h=1e-5
            // probes cannot flip the gate.
            let power: Vec<f64> = (0..n).map(|j| if j % 2 == 0 { 0.1 } else { 0.7 }).collect();
            let wr = frozen_weights(&[2, n], &mut rng);
            let wi = frozen_weights(&[2, n], &mut rng);
            let pair = [
                Parameter::new("re", re.clone()),
                Parameter::new("im", im.clone()),
            ];
            suite.run("spectral_gate_data", &pair, &|| {
                let (gre, gim) = spectral_gate(&re, &im, &tau, &power, 10.0).unwrap();
                gre.mul(&wr).sum().add(&gim.mul(&wi).sum())
            });
        }

        // All four backbones end to end, surrogate-trained params excluded.
        for kind in BackboneKind::ALL {
            for (si, &(bs, d, t)) in [(2usize, 2usize, 8usize), (1, 3, 12), (3, 1, 16)]
                .iter()
                .enumerate()
            {
                let cfg = BackboneConfig {
                    kind,
                    in_channels: d,
                    seq_len: t,
                    feature_dim: 6,
                    cnn_channels: (3, 4),
                    cnn_kernels: (3, 3, 3),
                    dropout: 0.0,
                    n_segments: 4,
                    s3_layers: 2,
                    shuffle_temperature: 0.2,
                    n_fourier_modes: 3,
                    freq_feature_dim: 8,
                    patch_size: 4,
                    embed_dim: 6,
                    tsla_layers: 1,
                    icb_hidden: 8,
                    gate_sharpness: 10.0,
                };
                let backbone = Backbone::new(&cfg, 7 + si as u64).unwrap();
                let st: HashSet<String> = backbone
                    .straight_through_params()
                    .into_iter()
                    .map(|p| p.name)
                    .collect();
                let params: Vec<Parameter> = backbone
                    .params()
                    .into_iter()
                    .filter(|p| !st.contains(&p.name))
                    .collect();
                let x = Tensor::constant(&[bs, d, t], rand_vec(bs * d * t, &mut rng));
                let w = frozen_weights(&[bs, 6], &mut rng);
                suite.run(&format!("backbone_{kind}"), &params, &|| {
                    let mut r = rng::stream(0, "acceptance.unused", &[]);
                    backbone.forward(&x, false, &mut r).unwrap().mul(&w).sum()
                });
            }
        }

        let elapsed = start.elapsed().as_secs_f64();
        if !suite.failures.is_empty() {
            return Err(suite.failures.join("; "));
        }
        if elapsed >= 120.0 {
            return Err(format!("took {elapsed:.1}s, budget is 120s"));
        }
        Ok(format!(
            "{} checks / {} coordinates, max rel err {:.2e}, {elapsed:.1}s",
            suite.checks, suite.coords, suite.worst
        ))
    });
}

// ---------------------------------------------------------------------------
// 2. FFT: roundtrip under 1e-9 for lengths 1..=64; impulse and DC spectra
//    exact to 1e-12.
// ---------------------------------------------------------------------------

#[test]
fn fft_suite() {
    criterion("fft roundtrip and exact spectra", || {
        let mut rng = rng::stream(7, "acceptance.fft", &[]);
        let mut worst_rt: f64 = 0.0;
        for t in 1..=64usize {
            let x = Tensor::constant(&[2, 3, t], rand_vec(6 * t, &mut rng));
            let back = irfft(&rfft(&x), t).map_err(|e| format!("length {t}: {e}"))?;
            let xd = x.data();
            let err = back
                .data()
                .iter()
                .zip(xd.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst_rt = worst_rt.max(err);
            if err >= 1e-9 {
                return Err(format!("roundtrip error {err:.3e} at length {t}"));
            }

            // Unit impulse at the origin: every bin is exactly 1 + 0i.
            let mut imp = vec![0.0; t];
            imp[0] = 1.0;
            let spec = rfft(&Tensor::constant(&[1, t], imp));
            for (j, (&re, &im)) in spec.re.data().iter().zip(spec.im.data().iter()).enumerate()
            {
                if (re - 1.0).abs() > 1e-12 || im.abs() > 1e-12 {
                    return Err(format!("impulse bin {j} of length {t}: {re}+{im}i"));
                }
            }

            // Constant signal: T * c in the DC bin, zero elsewhere.
            let c = 0.375;
            let spec = rfft(&Tensor::constant(&[1, t], vec![c; t]));
            for (j, (&re, &im)) in spec.re.data().iter().zip(spec.im.data().iter()).enumerate()
            {
                let want = if j == 0 { c * t as f64 } else { 0.0 };
                if (re - want).abs() > 1e-12 || im.abs() > 1e-12 {
                    return Err(format!("dc bin {j} of length {t}: {re}+{im}i, want {want}"));
                }
            }
        }
        Ok(format!("lengths 1..=64, worst roundtrip {worst_rt:.2e}"))
    });
}

// ---------------------------------------------------------------------------
// 3. OT: marginal feasibility, brute-force LP agreement, partial mass,
//    cost-shift and joint-scaling invariance.
// ---------------------------------------------------------------------------

fn rand_cost(n: usize, m: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n * m).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn ot_suite() {
    criterion("optimal transport solver", || {
        let mut rng = rng::stream(11, "acceptance.ot", &[]);

        // Marginal feasibility on random 5x5 instances.
        let mut worst_violation: f64 = 0.0;
        for _ in 0..20 {
            let cost = rand_cost(5, 5, &mut rng);
            let mut mu: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..1.0)).collect();
            let mut nu: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..1.0)).collect();
            let (sm, sn) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
            mu.iter_mut().for_each(|v| *v /= sm);
            nu.iter_mut().for_each(|v| *v /= sn);
            let plan = sinkhorn(&cost, 5, 5, &mu, &nu, 0.05, 20_000, 1e-9)
                .map_err(|e| format!("5x5 solve: {e}"))?;
            worst_violation = worst_violation.max(plan.marginal_violation());
            if plan.marginal_violation() >= 1e-6 {
                return Err(format!("marginal violation {:.3e}", plan.marginal_violation()));
            }
        }

        // Entropic cost vs. the permutation LP on 3x3 uniform-marginal
        // instances (Birkhoff vertices are the six permutation matrices).
        let perms: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let u = [1.0 / 3.0; 3];
        let mut worst_gap: f64 = 0.0;
        for _ in 0..20 {
            let cost = rand_cost(3, 3, &mut rng);
            let lp = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum::<f64>() / 3.0)
                .fold(f64::INFINITY, f64::min);
            let plan = sinkhorn(&cost, 3, 3, &u, &u, 0.01, 200_000, 1e-12)
                .map_err(|e| format!("3x3 solve: {e}"))?;
            let gap = (plan.transport_cost(&cost) - lp).abs();
            worst_gap = worst_gap.max(gap);
            if gap >= 1e-2 {
                return Err(format!("entropic cost {gap:.3e} away from LP optimum"));
            }
        }

        // Partial transport moves exactly the requested mass and respects
        // the marginal caps.
        for _ in 0..10 {
            let cost = rand_cost(4, 6, &mut rng);
            let mu: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
            let nu: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.0)).collect();
            let cap = mu.iter().sum::<f64>().min(nu.iter().sum());
            let mass = 0.6 * cap;
            let plan = partial_sinkhorn(&cost, 4, 6, &mu, &nu, mass, 0.05, 50_000, 1e-10)
                .map_err(|e| format!("partial solve: {e}"))?;
            if (plan.total_mass() - mass).abs() >= 1e-6 {
                return Err(format!(
                    "partial mass {} differs from requested {mass}",
                    plan.total_mass()
                ));
            }
            for (i, r) in plan.row_sums().iter().enumerate() {
                if *r > mu[i] + 1e-8 {
                    return Err(format!("row {i} exceeds its marginal: {r} > {}", mu[i]));
                }
            }
            for (j, c) in plan.col_sums().iter().enumerate() {
                if *c > nu[j] + 1e-8 {
                    return Err(format!("col {j} exceeds its marginal: {c} > {}", nu[j]));
                }
            }
        }

        // Invariances: shifting every cost, or scaling cost and epsilon
        // together, leaves the plan unchanged.
        let cost = rand_cost(5, 5, &mut rng);
        let mu = [0.2; 5];
        let nu = [0.2; 5];
        let base = sinkhorn(&cost, 5, 5, &mu, &nu, 0.1, 100_000, 1e-12).unwrap();
        let shifted: Vec<f64> = cost.iter().map(|c| c + 2.3).collect();
        let shift_plan = sinkhorn(&shifted, 5, 5, &mu, &nu, 0.1, 100_000, 1e-12).unwrap();
        let scaled: Vec<f64> = cost.iter().map(|c| c * 3.7).collect();
        let scale_plan = sinkhorn(&scaled, 5, 5, &mu, &nu, 0.37, 100_000, 1e-12).unwrap();
        for (name, other) in [("cost shift", &shift_plan), ("joint scaling", &scale_plan)] {
            let diff = base
                .matrix
                .iter()
                .zip(other.matrix.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff >= 1e-8 {
                return Err(format!("{name} moved the plan by {diff:.3e}"));
            }
        }

        Ok(format!(
            "worst marginal violation {worst_violation:.2e}, worst LP gap {worst_gap:.2e}"
        ))
    });
}

// ---------------------------------------------------------------------------
// 4. H-score bounds and scenario algebra over 1000+ random cases, plus the
//    hand-computed reference value.
// ---------------------------------------------------------------------------

#[test]
fn h_score_and_scenario_algebra() {
    criterion("h-score and scenario properties", || {
        let hand = h_score_value(0.8, 0.6);
        if (hand - 0.6857).abs() > 1e-4 {
            return Err(format!("hand value (0.8, 0.6) gave {hand}"));
        }

        let mut rng = rng::stream(23, "acceptance.hscore", &[]);
        for i in 0..1000 {
            let a: f64 = rng.random_range(0.0..1.0);
            let b: f64 = rng.random_range(0.0..1.0);
            let h = h_score_value(a, b);
            let (lo, hi) = (a.min(b), a.max(b));
            if !(0.0..=1.0).contains(&h) || h < lo - 1e-12 || h > hi + 1e-12 {
                return Err(format!("case {i}: h({a}, {b}) = {h} out of [{lo}, {hi}]"));
            }
            if (h - h_score_value(b, a)).abs() > 1e-15 {
                return Err(format!("case {i}: h not symmetric at ({a}, {b})"));
            }
            if h_score_value(a, 0.0) != 0.0 || h_score_value(0.0, b) != 0.0 {
                return Err("zero accuracy must zero the h-score".into());
            }
        }

        for i in 0..1000u64 {
            let k = rng.random_range(2..=12usize);
            let rs = rng.random_range(0..k) as i64;
            let mut rt = rng.random_range(0..k) as i64;
            if rt == rs {
                rt = (rt + 1) % k as i64;
            }
            let sc = build_scenario(k, "a", "b", rs, rt)
                .map_err(|e| format!("case {i}: build failed: {e}"))?;
            let common: HashSet<i64> = sc.common_set.iter().copied().collect();
            if common.contains(&rs) || common.contains(&rt) {
                return Err(format!("case {i}: removed class leaked into the common set"));
            }
            if sc.common_set.len() != k - 2
                || sc.source_private_set != vec![rt]
                || sc.target_private_set != vec![rs]
            {
                return Err(format!("case {i}: wrong partition for k={k}, rs={rs}, rt={rt}"));
            }
            if sc.source_classes().len() != k - 1 || sc.target_classes().len() != k - 1 {
                return Err(format!("case {i}: label sets must each drop one class"));
            }
            if build_scenario(k, "a", "b", rs, rs).is_ok()
                || build_scenario(k, "a", "a", rs, rt).is_ok()
            {
                return Err(format!("case {i}: degenerate scenario was accepted"));
            }

            // A perfect predictor scores 1 (two classes leave no common
            // set, so scoring is only defined from three classes up).
            if k < 3 {
                continue;
            }
            let truth: Vec<i64> = sc.target_classes().to_vec();
            let perfect: Vec<i64> = truth
                .iter()
                .map(|&y| if common.contains(&y) { y } else { PredictionBatch::UNKNOWN })
                .collect();
            let rep = h_score(&perfect, &truth, &sc).map_err(|e| format!("case {i}: {e}"))?;
            if (rep.h_score - 1.0).abs() > 1e-12 {
                return Err(format!("case {i}: perfect predictions scored {}", rep.h_score));
            }
        }

        let data = generate_synthetic(&SyntheticSpec {
            n_domains: 1,
            n_classes: 4,
            samples_per_class: 9,
            n_channels: 1,
            seq_len: 8,
            ..SyntheticSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let ds = data.domain("d0").map_err(|e| e.to_string())?;
        for i in 0..1000u64 {
            let (tr1, ev1) = split_target(ds, 0.8, i).map_err(|e| e.to_string())?;
            let (tr2, ev2) = split_target(ds, 0.8, i).map_err(|e| e.to_string())?;
            if tr1 != tr2 || ev1 != ev2 {
                return Err(format!("split not deterministic for seed {i}"));
            }
            let mut all: Vec<usize> = tr1.iter().chain(ev1.iter()).copied().collect();
            all.sort_unstable();
            if all != (0..ds.n).collect::<Vec<_>>() {
                return Err(format!("split for seed {i} is not a partition"));
            }
        }

        Ok("3000 random cases plus hand values".into())
    });
}

// ---------------------------------------------------------------------------
// 5. Detector contracts: threshold monotonicity per method and zero-weight
//    isolation on one fixed random batch.
// ---------------------------------------------------------------------------

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        kind: BackboneKind::Cnn,
        in_channels: 2,
        seq_len: 16,
        feature_dim: 6,
        cnn_channels: (3, 4),
        cnn_kernels: (3, 3, 3),
        dropout: 0.0,
        n_fourier_modes: 5,
        patch_size: 4,
        embed_dim: 6,
        ..BackboneConfig::default()
    }
}

fn unknown_count(m: &UnidaMethod, x: &Tensor) -> Result<usize, String> {
    let pred = m.predict(x).map_err(|e| e.to_string())?;
    Ok(pred.labels.iter().filter(|&&l| l == PredictionBatch::UNKNOWN).count())
}

#[test]
fn detector_contracts() {
    criterion("detector thresholds and zero-weight isolation", || {
        let bcfg = tiny_backbone();
        let mut rng = rng::stream(31, "acceptance.detector", &[]);
        let x = Tensor::constant(&[24, 2, 16], rand_vec(24 * 2 * 16, &mut rng));
        let fresh = |kind: MethodKind, cfg: MethodConfig| {
            UnidaMethod::new(kind, &bcfg, cfg, 4, 24, 5).map_err(|e| e.to_string())
        };

        // Entropy detectors: raising the threshold must not increase the
        // UNKNOWN count. Confidence/mass detectors: must not decrease it.
        let sweeps: [(MethodKind, &str, Vec<f64>, bool); 4] = [
            (MethodKind::Uan, "w0", (0..=10).map(|i| i as f64 / 10.0).collect(), false),
            (MethodKind::Dance, "rho_margin", (1..=20).map(|i| i as f64 / 10.0).collect(), false),
            (MethodKind::Ppot, "delta", (0..=10).map(|i| i as f64 / 10.0).collect(), true),
            (MethodKind::Uniot, "mass_threshold", (1..=15).map(|i| i as f64 / 10.0).collect(), true),
        ];
        for (kind, field, grid, increasing) in sweeps {
            let mut prev: Option<usize> = None;
            for v in grid {
                let mut cfg = MethodConfig::default();
                match field {
                    "w0" => cfg.w0 = v,
                    "rho_margin" => cfg.rho_margin = v,
                    "delta" => cfg.delta = v,
                    _ => cfg.mass_threshold = v,
                }
                let count = unknown_count(&fresh(kind, cfg)?, &x)?;
                if let Some(p) = prev {
                    let ok = if increasing { count >= p } else { count <= p };
                    if !ok {
                        return Err(format!(
                            "{kind}: unknown count moved {p} -> {count} against the {field} sweep"
                        ));
                    }
                }
                prev = Some(count);
            }
        }

        // Fixed-rule detectors: labels must agree with their score rule.
        let ova = fresh(MethodKind::Ovanet, MethodConfig::default())?;
        let pred = ova.predict(&x).map_err(|e| e.to_string())?;
        for (l, s) in pred.labels.iter().zip(&pred.scores) {
            if (*l == PredictionBatch::UNKNOWN) != (1.0 - s > 0.5) {
                return Err("ovanet labels disagree with the one-vs-all score rule".into());
            }
        }
        let uni = fresh(MethodKind::Unijdot, MethodConfig::default())?;
        let pred = uni.predict(&x).map_err(|e| e.to_string())?;
        let thr = otsu_threshold(&pred.scores, 64);
        for (l, s) in pred.labels.iter().zip(&pred.scores) {
            let reject = matches!(thr, Some(t) if *s < t);
            if (*l == PredictionBatch::UNKNOWN) != reject {
                return Err("unijdot labels disagree with the adaptive threshold".into());
            }
        }
        // Raising an explicit cutoff over the returned scores can only grow
        // the rejected set.
        let mut sorted = pred.scores.clone();
        sorted.sort_by(f64::total_cmp);
        let mut prev = 0usize;
        for t in sorted {
            let count = pred.scores.iter().filter(|&&s| s < t).count();
            if count < prev {
                return Err("score-level rejection is not monotone".into());
            }
            prev = count;
        }

        // Zero-weight isolation: with both method weights at zero, one
        // training step must leave every method's backbone and classifier
        // bit-identical to plain source classification.
        let src_x = Tensor::constant(&[8, 2, 16], rand_vec(8 * 2 * 16, &mut rng));
        let src_y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let tgt_x = Tensor::constant(&[8, 2, 16], rand_vec(8 * 2 * 16, &mut rng));
        let tgt_idx: Vec<usize> = (0..8).collect();
        let cfg0 = MethodConfig { lambda_align: 0.0, lambda_aux: 0.0, ..MethodConfig::default() };
        let mut snapshots: Vec<(MethodKind, Vec<Vec<f64>>)> = Vec::new();
        for (i, kind) in MethodKind::ALL.into_iter().enumerate() {
            let mut m = fresh(kind, cfg0.clone())?;
            let mut r = rng::stream(3, "acceptance.iso", &[i as u64]);
            m.train_step(&src_x, &src_y, &tgt_x, &tgt_idx, &mut r)
                .map_err(|e| format!("{kind}: {e}"))?;
            snapshots.push((kind, m.model.params().iter().map(|p| p.value.to_vec()).collect()));
        }
        let (first_kind, reference) = &snapshots[0];
        for (kind, params) in &snapshots[1..] {
            if params != reference {
                return Err(format!(
                    "{kind} and {first_kind} disagree after a zero-weight step"
                ));
            }
        }

        Ok("4 threshold sweeps, 2 fixed rules, 6-way isolation".into())
    });
}

// ---------------------------------------------------------------------------
// 6. Bayesian optimizer finds the quadratic optimum within 0.05 in at least
//    9 of 10 seeds, 30 trials each, under 30 seconds.
// ---------------------------------------------------------------------------

#[test]
fn bayesian_optimizer() {
    criterion("bayesian optimizer on the shifted quadratic", || {
        let start = Instant::now();
        let space = SearchSpace {
            params: vec![(
                "x".to_string(),
                ParamDomain::Continuous { lo: 0.0, hi: 1.0, log: false },
            )],
        };
        // Grid oracle for the optimum of f(x) = -(x - 0.7)^2 on [0, 1].
        let oracle = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .max_by(|a, b| {
                let f = |x: f64| -(x - 0.7) * (x - 0.7);
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();

        let mut hits = 0;
        let mut gaps = Vec::new();
        for seed in 0..10u64 {
            let mut history: Vec<(ParamPoint, f64)> = Vec::new();
            for _ in 0..30 {
                let point = bayes_suggest(&history, &space, seed).map_err(|e| e.to_string())?;
                let x = match point.get("x") {
                    Some(ParamValue::Float(v)) => *v,
                    other => return Err(format!("unexpected suggestion {other:?}")),
                };
                let y = -(x - 0.7) * (x - 0.7);
                history.push((point, y));
            }
            let best = history
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .and_then(|(p, _)| match p.get("x") {
                    Some(ParamValue::Float(v)) => Some(*v),
                    _ => None,
                })
                .ok_or("no best point recorded")?;
            let gap = (best - oracle).abs();
            gaps.push(gap);
            if gap <= 0.05 {
                hits += 1;
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if hits < 9 {
            return Err(format!("only {hits}/10 seeds within 0.05 of {oracle}: {gaps:?}"));
        }
        if elapsed >= 30.0 {
            return Err(format!("took {elapsed:.1}s, budget is 30s"));
        }
        Ok(format!("{hits}/10 seeds, worst gap {:.3}, {elapsed:.1}s", gaps.iter().fold(0.0f64, |a, &b| a.max(b))))
    });
}

// ---------------------------------------------------------------------------
// 7. End-to-end smoke: all six methods on CNN and FNO beat the uniform-guess
//    oracle by 0.10 mean H-score over three seeds; unijdot clears 0.5.
// ---------------------------------------------------------------------------

#[test]
fn end_to_end_smoke() {
    criterion("end-to-end benchmark smoke", || {
        let start = Instant::now();
        let data = generate_synthetic(&SyntheticSpec {
            n_domains: 2,
            n_classes: 5,
            samples_per_class: 60,
            n_channels: 3,
            seq_len: 64,
            ..SyntheticSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let scenario = build_scenario(5, "d0", "d1", 4, 0).map_err(|e| e.to_string())?;
        let settings = TrialSettings { epochs: 20, split_ratio: 0.8 };

        // Empirical uniform-guess oracle on an evaluation-sized sample.
        let mut brng = rng::stream(1234, "acceptance.baseline", &[]);
        let mut baseline = 0.0;
        for _ in 0..200 {
            baseline += random_baseline(&scenario, 48, &mut brng)
                .map_err(|e| e.to_string())?
                .h_score;
        }
        baseline /= 200.0;

        // Per-method hyperparameters fixed at desk-scale searched values;
        // the full benchmark re-searches these per run, the way the final
        // reported tables fix whatever the search found.
        let searched = |kind: MethodKind| -> MethodConfig {
            let base = MethodConfig::default();
            match kind {
                MethodKind::Uan | MethodKind::Ovanet => base,
                MethodKind::Dance => {
                    MethodConfig { lambda_aux: 0.0, rho_margin: 0.97, ..base }
                }
                MethodKind::Ppot => MethodConfig { delta: 0.35, ..base },
                MethodKind::Uniot => {
                    MethodConfig { ot_epsilon: 0.01, mass_threshold: 0.69, ..base }
                }
                MethodKind::Unijdot => {
                    MethodConfig { learning_rate: 3e-4, gamma: 0.8, ..base }
                }
            }
        };
        let point = ParamPoint::new();
        let mut lines = Vec::new();
        let mut failures = Vec::new();
        let mut unijdot_mean = 0.0;
        for kind in MethodKind::ALL {
            let mcfg = searched(kind);
            let mut scores = Vec::new();
            for bk in [BackboneKind::Cnn, BackboneKind::Fno] {
                let bcfg = BackboneConfig {
                    kind: bk,
                    in_channels: 3,
                    seq_len: 64,
                    ..BackboneConfig::default()
                };
                for seed in 0..3u64 {
                    let rec = run_trial(
                        &data, &scenario, kind, &bcfg, &mcfg, &point, &settings, seed,
                    )
                    .map_err(|e| format!("{kind}/{bk}/{seed}: {e}"))?;
                    eprintln!(
                        "smoke {kind}/{bk} seed {seed}: H = {:.3} ({:.0}s)",
                        rec.report.h_score,
                        start.elapsed().as_secs_f64()
                    );
                    scores.push(rec.report.h_score);
                }
            }
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            lines.push(format!("{kind} {mean:.3}"));
            if mean < baseline + 0.10 {
                failures.push(format!("{kind} mean {mean:.3} vs oracle {baseline:.3} + 0.10"));
            }
            if kind == MethodKind::Unijdot {
                unijdot_mean = mean;
            }
        }
        if unijdot_mean <= 0.5 {
            failures.push(format!("unijdot mean {unijdot_mean:.3} not above 0.5"));
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 1200.0 {
            failures.push(format!("took {elapsed:.0}s, budget is 1200s"));
        }
        if !failures.is_empty() {
            return Err(format!("{} [means: {}]", failures.join("; "), lines.join(", ")));
        }
        Ok(format!("oracle {baseline:.3}; means {}; {elapsed:.0}s", lines.join(", ")))
    });
}

// ---------------------------------------------------------------------------
// 8. Reproducibility: identical CSV bytes across reruns, including --jobs 4.
// ---------------------------------------------------------------------------

const REPRO_CONFIG: &str = r#"
master_seed = 9
[dataset.synthetic]
n_domains = 3
n_classes = 3
samples_per_class = 6
n_channels = 2
seq_len = 16
[backbone]
feature_dim = 8
n_fourier_modes = 8
[selection]
n_runs = 2
n_val = 1
n_eval = 2
final_seeds = 2
epochs = 1
[[search]]
name = "learning_rate"
type = "continuous"
lo = 1e-4
hi = 1e-2
log = true
"#;

fn scenario_csv(dir: &Path) -> Result<Vec<u8>, String> {
    let mut hits: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".scenarios.csv")))
        .collect();
    if hits.len() != 1 {
        return Err(format!("expected one scenario CSV in {}, found {}", dir.display(), hits.len()));
    }
    std::fs::read(hits.remove(0)).map_err(|e| e.to_string())
}

#[test]
fn reproducibility() {
    criterion("byte-identical reruns", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = dir.path().join("repro.toml");
        std::fs::write(&cfg, REPRO_CONFIG).map_err(|e| e.to_string())?;
        let bin = env!("CARGO_BIN_EXE_unida-bench");

        let mut outputs = Vec::new();
        for (name, jobs) in [("a", "1"), ("b", "1"), ("c", "4")] {
            let out = dir.path().join(name);
            let status = Command::new(bin)
                .args(["run", "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(&out)
                .args(["--jobs", jobs])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!(
                    "run {name} failed: {}",
                    String::from_utf8_lossy(&status.stderr)
                ));
            }
            outputs.push(scenario_csv(&out)?);
        }
        if outputs[0] != outputs[1] {
            return Err("two identical runs produced different CSV bytes".into());
        }
        if outputs[0] != outputs[2] {
            return Err("--jobs 4 changed the CSV bytes".into());
        }
        let rows = outputs[0].split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
        if rows != 4 {
            return Err(format!("expected header + 2 scenarios + mean, got {rows} lines"));
        }
        Ok("three runs, identical bytes, jobs 1 and 4".into())
    });
}
