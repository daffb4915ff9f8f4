//! Numerical checks of the Stage-2 objective's analytic properties and the
//! margin-based generalization bound.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoeError, Result};
use crate::fusion::{objective, ConfidenceTensor, OpinionBatch, ThetaTrace};
use crate::numeric::{argmax_slice, logsumexp, rng_from_seed, softmax};

/// `2√c·k·(1 + λ + (λ/c)·e^α)`, with its logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    /// `+∞` when the value overflows.
    pub value: f64,
    pub log_value: f64,
    /// Set when the value was only computed in log space.
    pub log_space: bool,
}

pub fn lipschitz_bound(c: usize, k: usize, lambda: f64, alpha: f64) -> Result<LipschitzBound> {
    if c == 0 || k == 0 || !(lambda >= 0.0) || !(alpha > 0.0) {
        return Err(CoeError::Invalid(format!(
            "Lipschitz bound needs c, k, α > 0 and λ ≥ 0 (got {c}, {k}, {alpha}, {lambda})"
        )));
    }
    let cf = c as f64;
    let lead = 2.0 * cf.sqrt() * k as f64;
    if alpha <= 300.0 {
        let value = lead * (1.0 + lambda + lambda / cf * alpha.exp());
        return Ok(LipschitzBound {
            value,
            log_value: value.ln(),
            log_space: false,
        });
    }
    let log_tail = if lambda > 0.0 {
        (lambda / cf).ln() + alpha
    } else {
        f64::NEG_INFINITY
    };
    let log_value = lead.ln() + logsumexp(&[(1.0 + lambda).ln(), log_tail]);
    Ok(LipschitzBound {
        value: f64::INFINITY,
        log_value,
        log_space: true,
    })
}

/// Largest `|𝓛(Θ) − 𝓛(Θ′)| / ‖Θ − Θ′‖_F` over random pairs in the unit
/// Frobenius ball. Identical pairs are skipped.
pub fn empirical_lipschitz(
    opinions: &OpinionBatch,
    lambda: f64,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if alpha > 5.0 {
        return Err(CoeError::Invalid(format!(
            "empirical Lipschitz probe runs at α ≤ 5, got {alpha}"
        )));
    }
    let c = opinions.num_classes;
    let width = opinions.g.ncols();
    let dim = c * width;
    let mut rng = rng_from_seed(seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Array2<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let radius = rng.random::<f64>().powf(1.0 / dim as f64);
        Array2::from_shape_vec((c, width), v.into_iter().map(|x| x / norm * radius).collect()).unwrap()
    };
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let dist = (&a - &b).iter().map(|x| x * x).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let la = objective(&ConfidenceTensor { theta: a, norm_cap: None }, opinions, alpha, lambda)?;
        let lb = objective(&ConfidenceTensor { theta: b, norm_cap: None }, opinions, alpha, lambda)?;
        best = best.max((la - lb).abs() / dist);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub min_grad_norm_sq: f64,
    pub bound: f64,
    pub steps: usize,
    pub passed: bool,
}

/// `min_t ‖∇𝓛(Θ_t)‖² ≤ 2(𝓛(Θ₀) − 𝓛*)/(lr·T)` with the lower bound `𝓛* = −λN`.
pub fn convergence_check(trace: &ThetaTrace, lr: f64, lambda: f64, n: usize) -> Result<ConvergenceReport> {
    if trace.loss.len() < 2 || trace.grad_norm_sq.len() != trace.loss.len() {
        return Err(CoeError::Invalid(format!(
            "convergence check needs at least one step, trace has {} entries",
            trace.loss.len()
        )));
    }
    let steps = trace.loss.len() - 1;
    let floor = -lambda * n as f64;
    let bound = 2.0 * (trace.loss[0] - floor) / (lr * steps as f64);
    let min_grad_norm_sq = trace.min_grad_norm_sq();
    Ok(ConvergenceReport {
        min_grad_norm_sq,
        bound,
        steps,
        passed: min_grad_norm_sq <= bound,
    })
}

/// Where the per-node loss is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSpace {
    /// The loss as a function of `u = Θg`.
    Logits,
    /// The loss as a function of the fused probability vector on the simplex.
    Probabilities,
}

/// Largest midpoint gap `f((u+v)/2) − (f(u)+f(v))/2` over random pairs drawn by `sample`.
pub fn midpoint_violation<F, S>(f: F, mut sample: S, trials: usize) -> f64
where
    F: Fn(&[f64]) -> f64,
    S: FnMut() -> (Vec<f64>, Vec<f64>),
{
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (u, v) = sample();
        let mid: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
        worst = worst.max(f(&mid) - 0.5 * (f(&u) + f(&v)));
    }
    worst
}

/// Midpoint-convexity probe of the per-node `C − λM` with a random true
/// class per trial. Logits are drawn from `N(0, 3²)`; probability vectors
/// uniformly from the simplex.
pub fn convexity_probe(c: usize, lambda: f64, alpha: f64, trials: usize, seed: u64, space: ProbeSpace) -> Result<f64> {
    if c < 2 {
        return Err(CoeError::Invalid("convexity probe needs c ≥ 2".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let m = rng.random_range(0..c);
        let v = match space {
            ProbeSpace::Logits => {
                let mut draw = || -> Vec<f64> {
                    (0..c)
                        .map(|_| 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect()
                };
                let pair = (draw(), draw());
                let f = |u: &[f64]| crate::fusion::node_loss(u, m, alpha, lambda);
                midpoint_violation(f, || pair.clone(), 1)
            }
            ProbeSpace::Probabilities => {
                let mut draw = || -> Vec<f64> {
                    let e: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|x| x / s).collect()
                };
                let pair = (draw(), draw());
                let f = |p: &[f64]| {
                    -p[m].ln() - lambda * (p[m] - crate::fusion::smooth_max2(p, m, alpha))
                };
                midpoint_violation(f, || pair.clone(), 1)
            }
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub norm_cap: f64,
    pub expert_norm: f64,
    pub k: usize,
    pub margin: f64,
    pub delta: f64,
    pub classes: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n > 0
            && self.norm_cap > 0.0
            && self.expert_norm > 0.0
            && self.k > 0
            && self.margin > 0.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.classes > 0;
        if ok {
            Ok(())
        } else {
            Err(CoeError::Invalid(format!("bound inputs out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub empirical: f64,
    pub rademacher: f64,
    pub confidence: f64,
    pub total: f64,
}

/// `ramp + C·2·B·G·√k/(γ√n) + 3√(ln(2/δ)/(2n))`, with `C = √(ln c)` when
/// `multiclass_constant` is set and 1 otherwise.
pub fn generalization_bound(ramp: f64, inputs: &BoundInputs, multiclass_constant: bool) -> Result<GeneralizationBound> {
    inputs.validate()?;
    if !(0.0..=1.0).contains(&ramp) {
        return Err(CoeError::Invalid(format!("empirical ramp loss {ramp} outside [0, 1]")));
    }
    let n = inputs.n as f64;
    let cmc = if multiclass_constant {
        (inputs.classes as f64).ln().sqrt()
    } else {
        1.0
    };
    let rademacher = cmc * 2.0 * inputs.norm_cap * inputs.expert_norm * (inputs.k as f64).sqrt() / (inputs.margin * n.sqrt());
    let confidence = 3.0 * ((2.0 / inputs.delta).ln() / (2.0 * n)).sqrt();
    Ok(GeneralizationBound {
        empirical: ramp,
        rademacher,
        confidence,
        total: ramp + rademacher + confidence,
    })
}

/// `0` above the margin, linear inside it, `1` at or below zero.
pub fn ramp_loss(margin: f64, gamma: f64) -> f64 {
    if margin >= gamma {
        0.0
    } else if margin > 0.0 {
        1.0 - margin / gamma
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub margins: Vec<f64>,
    pub ramp: Vec<f64>,
    pub mean_ramp: f64,
    pub zero_one: f64,
    pub margin_zero_one: f64,
    /// `(lower edge, count)` over ten equal bins spanning `[-1, 1]`.
    pub histogram: Vec<(f64, usize)>,
    pub ordering_holds: bool,
}

/// Margins `f_y − max_{y′≠y} f_{y′}` and the three losses
/// `ℓ₀₋₁ ≤ 𝕀[margin ≤ 0] ≤ ramp` per sample.
pub fn ramp_and_margin(scores: &Array2<f64>, labels: &[usize], gamma: f64) -> Result<MarginReport> {
    if scores.nrows() != labels.len() || scores.nrows() == 0 {
        return Err(CoeError::Shape(format!("{} score rows for {} labels", scores.nrows(), labels.len())));
    }
    if !(gamma > 0.0) {
        return Err(CoeError::Invalid(format!("margin threshold must be positive, got {gamma}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(CoeError::NonFinite("scores".into()));
    }
    let n = labels.len() as f64;
    let mut margins = Vec::with_capacity(labels.len());
    let mut ramp = Vec::with_capacity(labels.len());
    let mut histogram: Vec<(f64, usize)> = (0..10).map(|b| (-1.0 + 0.2 * b as f64, 0)).collect();
    let (mut zo, mut mzo) = (0.0, 0.0);
    let mut ordering_holds = true;
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let r = row.to_vec();
        let rival = r
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let m = r[y] - rival;
        let l01 = if argmax_slice(&r) != y { 1.0 } else { 0.0 };
        let lm = if m <= 0.0 { 1.0 } else { 0.0 };
        let lr = ramp_loss(m, gamma);
        ordering_holds &= l01 <= lm && lm <= lr;
        zo += l01;
        mzo += lm;
        let bin = (((m + 1.0) / 0.2).floor().max(0.0) as usize).min(9);
        histogram[bin].1 += 1;
        margins.push(m);
        ramp.push(lr);
    }
    Ok(MarginReport {
        mean_ramp: ramp.iter().sum::<f64>() / n,
        margins,
        ramp,
        zero_one: zo / n,
        margin_zero_one: mzo / n,
        histogram,
        ordering_holds,
    })
}

/// One entry of `theory_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub inputs: serde_json::Value,
    pub observed: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CoeError::json(path, e))?;
        fs::write(path, text).map_err(|e| CoeError::io(path, e))
    }
}

/// Random labelled opinions: `k` softmax blocks of `c` classes per node.
pub fn random_opinions(n: usize, c: usize, k: usize, seed: u64) -> OpinionBatch {
    let mut rng = rng_from_seed(seed);
    let mut g = Array2::zeros((n, k * c));
    for i in 0..n {
        for e in 0..k {
            let raw: Vec<f64> = (0..c)
                .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            for (j, p) in softmax(&raw).into_iter().enumerate() {
                g[[i, e * c + j]] = p;
            }
        }
    }
    let y = (0..n).map(|_| rng.random_range(0..c)).collect();
    OpinionBatch::new(g, Some(y), c).expect("well-formed opinions")
}

/// Run every probe at its reference setting on the given opinions (or on
/// random ones when none are supplied).
pub fn verify_theory(opinions: Option<&OpinionBatch>, seed: u64) -> Result<TheoryReport> {
    use crate::fusion::{optimize_theta, MarginConfig, ThetaOptimizer};
    use serde_json::json;

    let mut checks = Vec::new();

    for c in 2..=5 {
        let v = convexity_probe(c, 1.0, 5.0, 10_000, seed, ProbeSpace::Logits)?;
        checks.push(TheoryCheck {
            name: "convexity_logits".into(),
            inputs: json!({"c": c, "lambda": 1.0, "alpha": 5.0, "trials": 10_000}),
            observed: v,
            bound: 1e-9,
            passed: v <= 1e-9,
        });
        let v = convexity_probe(c, 1.0, 5.0, 10_000, seed, ProbeSpace::Probabilities)?;
        checks.push(TheoryCheck {
            name: "convexity_probabilities".into(),
            inputs: json!({"c": c, "lambda": 1.0, "alpha": 5.0, "trials": 10_000}),
            observed: v,
            bound: 1e-9,
            passed: v <= 1e-9,
        });
    }

    let single = random_opinions(1, 2, 1, seed);
    let emp = empirical_lipschitz(&single, 1.0, 2.0, 1000, seed)?;
    let lb = lipschitz_bound(2, 1, 1.0, 2.0)?;
    checks.push(TheoryCheck {
        name: "lipschitz_single_node".into(),
        inputs: json!({"c": 2, "k": 1, "lambda": 1.0, "alpha": 2.0, "trials": 1000}),
        observed: emp,
        bound: lb.value,
        passed: emp <= lb.value,
    });

    let owned;
    let batch = match opinions {
        Some(o) => o,
        None => {
            owned = random_opinions(50, 3, 4, seed);
            &owned
        }
    };
    let (c, k, n) = (batch.num_classes, batch.num_experts, batch.len());
    let (alpha, lambda) = (2.0, 1.0);
    let lb = lipschitz_bound(c, k, lambda, alpha)?;
    let emp = empirical_lipschitz(batch, lambda, alpha, 1000, seed)?;
    checks.push(TheoryCheck {
        name: "lipschitz_batch".into(),
        inputs: json!({"c": c, "k": k, "n": n, "lambda": lambda, "alpha": alpha}),
        observed: emp,
        bound: n as f64 * lb.value,
        passed: emp <= n as f64 * lb.value,
    });

    let lr = 1.0 / lb.value;
    let cfg = MarginConfig {
        alpha,
        lambda,
        lr,
        iterations: 500,
        optimizer: ThetaOptimizer::PlainGd,
        norm_cap: None,
    };
    let (_, trace) = optimize_theta(batch, &cfg)?;
    let conv = convergence_check(&trace, lr, lambda, n)?;
    checks.push(TheoryCheck {
        name: "convergence".into(),
        inputs: json!({"c": c, "k": k, "n": n, "lambda": lambda, "alpha": alpha, "lr": lr, "iterations": 500}),
        observed: conv.min_grad_norm_sq,
        bound: conv.bound,
        passed: conv.passed,
    });

    let inputs = BoundInputs {
        n: 100,
        norm_cap: 1.0,
        expert_norm: 1.0,
        k: 4,
        margin: 0.5,
        delta: 0.1,
        classes: 3,
    };
    let gb = generalization_bound(0.0, &inputs, false)?;
    checks.push(TheoryCheck {
        name: "generalization_n100".into(),
        inputs: serde_json::to_value(inputs).expect("plain struct"),
        observed: gb.total,
        bound: 1.167 + 0.001,
        passed: (gb.total - 1.167).abs() <= 0.001,
    });

    Ok(TheoryReport { checks })
}
