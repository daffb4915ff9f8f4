//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line before asserting.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use coe_core::encoders::{finite_diff_check, supervised_loss, ClassifierHead, EncoderParams, FdOptions};
use coe_core::experiment::{fusion_vs_addition, robustness_sweep, run, ExperimentConfig};
use coe_core::data::PerturbMode;
use coe_core::fusion::{
    exact_masked_max, objective, optimize_theta, smooth_max2, theta_gradient, ConfidenceTensor, MarginConfig,
    ThetaOptimizer,
};
use coe_core::mi::{info_nce, CriticParams, MiBatch};
use coe_core::numeric::rng_from_seed;
use coe_core::refinery::{postprocess_adjacency, SparseMatrix};
use coe_core::theory::{
    convergence_check, convexity_probe, empirical_lipschitz, generalization_bound, lipschitz_bound, random_opinions,
    BoundInputs, ProbeSpace,
};

fn verdict(id: &str, passed: bool, detail: String, start: Instant) {
    let tag = if passed { "PASS" } else { "FAIL" };
    // written to the process stdout directly so the line survives output capture
    let mut out = std::io::stdout().lock();
    writeln!(out, "{tag} criterion {id}: {detail} ({:.2}s)", start.elapsed().as_secs_f64()).unwrap();
    assert!(passed, "criterion {id} failed: {detail}");
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

fn random_sparse(n: usize, density: f64, rng: &mut ChaCha8Rng) -> SparseMatrix {
    let mut trip = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if rng.random::<f64>() < density {
                trip.push((i, j, normal(rng)));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, trip)
}

fn fd_worst(f: impl Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64], seed: u64) -> f64 {
    let opts = FdOptions {
        seed,
        ..FdOptions::default()
    };
    finite_diff_check(f, params, analytic, opts).unwrap().max_rel_error
}

#[test]
fn criterion_01_gradient_soundness() {
    let start = Instant::now();
    let mut ce = 0.0f64;
    let mut nce = 0.0f64;
    let mut theta = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = rng_from_seed(1000 + inst);

        let n = 12;
        let (d, c) = (5, 3);
        let adj = postprocess_adjacency(&random_sparse(n, 0.3, &mut rng)).unwrap().adjacency;
        let x = normal_matrix(n, d, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let idx: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let enc = EncoderParams::init(d, 6, 4, 2, 2000 + inst);
        let head = ClassifierHead {
            weight: normal_matrix(4, c, &mut rng),
            bias: Array1::from_shape_fn(c, |_| normal(&mut rng)),
        };
        let g = supervised_loss(&adj, &x, &enc, &head, &labels, &idx).unwrap();
        let mut params = enc.flatten();
        params.extend(head.flatten());
        let mut analytic: Vec<f64> = g.encoder.iter().flat_map(|w| w.iter().cloned()).collect();
        analytic.extend(g.head_weight.iter().chain(g.head_bias.iter()));
        let split = enc.num_params();
        let f = |p: &[f64]| {
            let mut e = enc.clone();
            e.assign(&p[..split]);
            let mut h = head.clone();
            h.assign(&p[split..]);
            supervised_loss(&adj, &x, &e, &h, &labels, &idx).unwrap().loss
        };
        ce = ce.max(fd_worst(f, &params, &analytic, inst));

        let (b, dz) = (8, 4);
        let za = normal_matrix(b, dz, &mut rng);
        let zb = normal_matrix(b, dz, &mut rng);
        let critic = CriticParams::init(dz, 0.2 + 0.5 * rng.random::<f64>(), 3000 + inst);
        let batch = MiBatch::full(b);
        let out = info_nce(&za, &zb, &critic, &batch).unwrap();
        let mut params: Vec<f64> = za.iter().chain(zb.iter()).cloned().collect();
        params.extend(critic.flatten());
        let analytic: Vec<f64> = out
            .grad_a
            .iter()
            .chain(out.grad_b.iter())
            .chain(out.grad_weight.iter())
            .chain(out.grad_bias.iter())
            .cloned()
            .collect();
        let m = za.len();
        let f = |p: &[f64]| {
            let a = Array2::from_shape_vec((b, dz), p[..m].to_vec()).unwrap();
            let bb = Array2::from_shape_vec((b, dz), p[m..2 * m].to_vec()).unwrap();
            let mut cr = critic.clone();
            cr.assign(&p[2 * m..]);
            info_nce(&a, &bb, &cr, &batch).unwrap().value
        };
        nce = nce.max(fd_worst(f, &params, &analytic, inst));

        let lambda = [0.0, 1.0, 100.0][inst as usize % 3];
        let alpha = 1.0 + 19.0 * rng.random::<f64>();
        let (c, k) = (3, 3);
        let ops = random_opinions(15, c, k, 4000 + inst);
        let t0 = ConfidenceTensor {
            theta: normal_matrix(c, c * k, &mut rng),
            norm_cap: None,
        };
        let grad = theta_gradient(&t0, &ops, alpha, lambda).unwrap();
        let params: Vec<f64> = t0.theta.iter().cloned().collect();
        let analytic: Vec<f64> = grad.iter().cloned().collect();
        let f = |p: &[f64]| {
            let t = ConfidenceTensor {
                theta: Array2::from_shape_vec((c, c * k), p.to_vec()).unwrap(),
                norm_cap: None,
            };
            objective(&t, &ops, alpha, lambda).unwrap()
        };
        theta = theta.max(fd_worst(f, &params, &analytic, inst));
    }
    let worst = ce.max(nce).max(theta);
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "1",
        worst < 1e-3 && elapsed < 30.0,
        format!("max relative FD error: cross_entropy {ce:.2e}, info_nce {nce:.2e}, theta_gradient {theta:.2e} (< 1e-3)"),
        start,
    );
}

#[test]
fn criterion_02_postprocess_invariants() {
    let start = Instant::now();
    let mut rng = rng_from_seed(2);
    let mut ok = true;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let sp = random_sparse(n, rng.random::<f64>(), &mut rng);
        let out = postprocess_adjacency(&sp).unwrap();
        let a = out.adjacency.to_dense();
        let deg = out.degrees.as_ref().unwrap();
        let raw = sp.to_dense();
        for i in 0..n {
            for j in 0..n {
                ok &= a[[i, j]].to_bits() == a[[j, i]].to_bits();
                ok &= a[[i, j]] >= 0.0;
                let want = 0.5 * (raw[[i, j]].max(0.0) + raw[[j, i]].max(0.0)) + if i == j { 1.0 } else { 0.0 };
                let got = a[[i, j]] * (deg[i] * deg[j]).sqrt();
                worst = worst.max((got - want).abs());
            }
        }
    }
    let ex = postprocess_adjacency(&SparseMatrix::from_dense(ndarray::array![[0.0, -1.0], [2.0, 0.0]].view()))
        .unwrap()
        .adjacency
        .to_dense();
    let exact = ex.iter().all(|&v| v == 0.5);
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "2",
        ok && worst <= 1e-12 && exact && elapsed < 5.0,
        format!("symmetric and non-negative: {ok}, reconstruction error {worst:.1e} (≤ 1e-12), worked example exact: {exact}"),
        start,
    );
}

#[test]
fn criterion_03_convexity_probe() {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for c in 2..=5 {
        let v = convexity_probe(c, 1.0, 5.0, 10_000, 30 + c as u64, ProbeSpace::Logits).unwrap();
        parts.push(format!("c={c}: {v:.3e}"));
        worst = worst.max(v);
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "3",
        worst <= 1e-9 && elapsed < 10.0,
        format!("max midpoint violation in logits {} (≤ 1e-9)", parts.join(", ")),
        start,
    );
}

#[test]
fn criterion_04_lipschitz_probe() {
    let start = Instant::now();
    let bound = lipschitz_bound(2, 1, 1.0, 2.0).unwrap().value;
    let closed = 2.0 * 2f64.sqrt() * (2.0 + 2f64.exp() / 2.0);
    let ops = random_opinions(1, 2, 1, 4);
    let observed = empirical_lipschitz(&ops, 1.0, 2.0, 1000, 40).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "4",
        observed <= bound && (bound - closed).abs() <= 1e-9 && elapsed < 10.0,
        format!("empirical {observed:.4} ≤ bound {bound:.6}, closed form {closed:.6}"),
        start,
    );
}

#[test]
fn criterion_05_convergence_probe() {
    let start = Instant::now();
    let (n, c, k) = (40, 3, 3);
    let (alpha, lambda) = (2.0, 1.0);
    let ops = random_opinions(n, c, k, 5);
    let lr = 1.0 / lipschitz_bound(c, k, lambda, alpha).unwrap().value;
    let cfg = MarginConfig {
        alpha,
        lambda,
        lr,
        iterations: 500,
        optimizer: ThetaOptimizer::PlainGd,
        norm_cap: None,
    };
    let (_, trace) = optimize_theta(&ops, &cfg).unwrap();
    let report = convergence_check(&trace, lr, lambda, n).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "5",
        report.passed && report.steps == 500 && elapsed < 30.0,
        format!(
            "min ‖∇‖² {:.4e} ≤ {:.4e} over T={}",
            report.min_grad_norm_sq, report.bound, report.steps
        ),
        start,
    );
}

#[test]
fn criterion_06_infonce_bound() {
    let start = Instant::now();
    let mut rng = rng_from_seed(6);
    let mut worst_gap = f64::NEG_INFINITY;
    for t in 0..1000u64 {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(2..=6);
        let za = normal_matrix(b, d, &mut rng);
        let zb = if t % 2 == 0 { za.clone() } else { normal_matrix(b, d, &mut rng) };
        let critic = CriticParams::init(d, 0.05 + rng.random::<f64>(), 600 + t);
        let v = info_nce(&za, &zb, &critic, &MiBatch::full(b)).unwrap().value;
        worst_gap = worst_gap.max(v - (b as f64).ln());
    }
    let b = 10;
    let row = Array2::from_shape_fn((1, 4), |(_, j)| j as f64 + 1.0);
    let same = Array2::from_shape_fn((b, 4), |(_, j)| row[[0, j]]);
    let degenerate = info_nce(&same, &same, &CriticParams::init(4, 0.2, 61), &MiBatch::full(b))
        .unwrap()
        .value;
    let err = (degenerate + (b as f64).ln()).abs();
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "6",
        worst_gap <= 0.0 && err <= 1e-9 && elapsed < 10.0,
        format!("max I_lb − ln B {worst_gap:.4e} (≤ 0), identical rows |I_lb + ln B| {err:.1e}"),
        start,
    );
}

#[test]
fn criterion_07_smooth_max() {
    let start = Instant::now();
    let mut rng = rng_from_seed(7);
    let mut ok = true;
    let mut worst = 0.0f64;
    for &alpha in &[50.0, 100.0, 1000.0] {
        for _ in 0..10_000 {
            let c = rng.random_range(2..=10);
            let e: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / s).collect();
            let m = rng.random_range(0..c);
            let gap = (smooth_max2(&p, m, alpha) - exact_masked_max(&p, m)).abs();
            let tol = (c as f64).ln() / alpha;
            ok &= gap <= tol;
            worst = worst.max(gap / tol);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "7",
        ok && elapsed < 5.0,
        format!("worst |smooth − exact| / (ln c / α) = {worst:.4}"),
        start,
    );
}

fn reference_config() -> ExperimentConfig {
    ExperimentConfig {
        epochs: 200,
        ..ExperimentConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_08_end_to_end() {
    let start = Instant::now();
    let cfg = reference_config();
    assert_eq!(cfg.seeds.len(), 5);
    let report = run(&cfg).unwrap();
    let coe = report.accuracies("coe", "default");
    let rf = report.accuracies("rf", "default");
    let wrf = report.accuracies("wrf", "default");
    let expert = |name: &str| -> Vec<f64> {
        report
            .experts
            .iter()
            .filter(|e| e.expert == name)
            .map(|e| e.accuracy)
            .collect()
    };
    let names = ["layer0", "layer1", "pair01", "total"];
    let layer_gap = (mean(&expert("layer0")) - mean(&expert("layer1"))).abs();
    let a = layer_gap >= 0.10;
    let best_expert = names.iter().map(|n| mean(&expert(n))).fold(f64::NEG_INFINITY, f64::max);
    let b = mean(&coe) >= best_expert && mean(&coe) >= mean(&rf) && mean(&coe) >= mean(&wrf);

    let fva = fusion_vs_addition(&cfg).unwrap();
    let fused = mean(&fva.accuracies("fused", "default"));
    let added = mean(&fva.accuracies("added", "default"));
    let c = fused >= added;
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "8",
        a && b && c && elapsed < 600.0,
        format!(
            "(a) layer gap {:.1} pts (≥ 10); (b) CoE {:.3} vs best expert {best_expert:.3}, RF {:.3}, WRF {:.3}; (c) fused {fused:.3} vs added {added:.3}",
            100.0 * layer_gap,
            mean(&coe),
            mean(&rf),
            mean(&wrf)
        ),
        start,
    );
}

#[test]
fn criterion_09_robustness() {
    let start = Instant::now();
    let cfg = reference_config();
    let report = robustness_sweep(&cfg, &[0.5], &[PerturbMode::Delete]).unwrap();
    let coe = report.accuracies("coe", "delete=0.5");
    let raw = report.accuracies("no_gsl", "delete=0.5");
    assert_eq!(coe.len(), 5);
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "9",
        mean(&coe) >= mean(&raw) && elapsed < 600.0,
        format!("delete 0.5: CoE {:.3} vs w/o GSL {:.3} over 5 seeds", mean(&coe), mean(&raw)),
        start,
    );
}

#[test]
fn criterion_10_generalization_calculator() {
    let start = Instant::now();
    let base = BoundInputs {
        n: 100,
        norm_cap: 1.0,
        expert_norm: 1.0,
        k: 4,
        margin: 0.5,
        delta: 0.1,
        classes: 3,
    };
    let total = |i: BoundInputs| generalization_bound(0.0, &i, false).unwrap().total;
    let example = total(base);
    let mut ok = (example - 1.167).abs() <= 0.001;
    let ns = [10, 100, 1_000, 10_000, 1_000_000];
    ok &= ns.windows(2).all(|w| total(BoundInputs { n: w[1], ..base }) < total(BoundInputs { n: w[0], ..base }));
    let gammas = [0.1, 0.25, 0.5, 1.0, 2.0];
    ok &= gammas
        .windows(2)
        .all(|w| total(BoundInputs { margin: w[1], ..base }) < total(BoundInputs { margin: w[0], ..base }));
    let ks = [1, 2, 4, 8, 16];
    ok &= ks.windows(2).all(|w| total(BoundInputs { k: w[1], ..base }) > total(BoundInputs { k: w[0], ..base }));
    let caps = [0.5, 1.0, 2.0, 4.0];
    ok &= caps
        .windows(2)
        .all(|w| total(BoundInputs { norm_cap: w[1], ..base }) > total(BoundInputs { norm_cap: w[0], ..base }));
    let r4 = generalization_bound(0.0, &base, false).unwrap().rademacher;
    let r1 = generalization_bound(0.0, &BoundInputs { k: 1, ..base }, false).unwrap().rademacher;
    let ratio = r4 / r1;
    ok &= ratio == 2.0;
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "10",
        ok && elapsed < 1.0,
        format!("n=100 total {example:.4} (1.167 ± 0.001), monotone grids and √k ratio {ratio}"),
        start,
    );
}
