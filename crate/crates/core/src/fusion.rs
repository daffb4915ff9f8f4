//! Confidence-tensor fusion of expert opinions and its large-margin objective.
//!
//! The fused logits for node `i` are `u = Θ g_i`, where `g_i` stacks the `k`
//! expert probability vectors. Stage 2 minimizes `C − λM` over `Θ` with the
//! experts frozen.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::encoders::TensorRecord;
use crate::error::{CoeError, Result};
use crate::numeric::{argmax_slice, frobenius, logsumexp, softmax, Adam};

/// Stacked expert opinions. Row `i` is `g_i`: `k` blocks of `c` class
/// probabilities in roster order.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionBatch {
    pub g: Array2<f64>,
    pub nodes: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub num_experts: usize,
}

impl OpinionBatch {
    pub fn new(g: Array2<f64>, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || g.ncols() % num_classes != 0 || g.ncols() == 0 {
            return Err(CoeError::Shape(format!(
                "opinion width {} is not a positive multiple of {num_classes} classes",
                g.ncols()
            )));
        }
        if let Some(y) = &labels {
            if y.len() != g.nrows() {
                return Err(CoeError::Shape(format!("{} labels for {} opinions", y.len(), g.nrows())));
            }
            if let Some(&bad) = y.iter().find(|&&v| v >= num_classes) {
                return Err(CoeError::Invalid(format!("label {bad} out of range")));
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoeError::NonFinite("expert opinion".into()));
        }
        Ok(OpinionBatch {
            num_experts: g.ncols() / num_classes,
            nodes: (0..g.nrows()).collect(),
            g,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.g.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.g.nrows() == 0
    }

    /// Block of expert `e` for row `i`.
    pub fn block(&self, i: usize, e: usize) -> ArrayView1<'_, f64> {
        let c = self.num_classes;
        self.g.slice(s![i, e * c..(e + 1) * c])
    }

    fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| CoeError::Invalid("operation needs labeled opinions".into()))
    }

    /// Rows selected by position, labels carried along.
    pub fn select(&self, rows: &[usize]) -> OpinionBatch {
        OpinionBatch {
            g: self.g.select(ndarray::Axis(0), rows),
            nodes: rows.iter().map(|&r| self.nodes[r]).collect(),
            labels: self.labels.as_ref().map(|y| rows.iter().map(|&r| y[r]).collect()),
            num_classes: self.num_classes,
            num_experts: self.num_experts,
        }
    }
}

/// `Θ ∈ R^{c×kc}`: entry `(r, e·c + s)` is the credibility expert `e`'s vote
/// for class `s` lends to class `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTensor {
    pub theta: Array2<f64>,
    pub norm_cap: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ThetaFile {
    theta: TensorRecord,
    norm_cap: Option<f64>,
}

impl ConfidenceTensor {
    /// `[I/k, …, I/k]`: initial fused logits are the mean expert opinion.
    pub fn block_identity(c: usize, k: usize) -> Self {
        let mut theta = Array2::zeros((c, k * c));
        for e in 0..k {
            for r in 0..c {
                theta[[r, e * c + r]] = 1.0 / k as f64;
            }
        }
        ConfidenceTensor { theta, norm_cap: None }
    }

    pub fn zeros(c: usize, k: usize) -> Self {
        ConfidenceTensor {
            theta: Array2::zeros((c, k * c)),
            norm_cap: None,
        }
    }

    pub fn with_cap(mut self, cap: Option<f64>) -> Self {
        self.norm_cap = cap;
        self.project();
        self
    }

    pub fn num_classes(&self) -> usize {
        self.theta.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.theta.ncols() / self.theta.nrows()
    }

    /// Rescale onto the Frobenius ball if a cap is set.
    pub fn project(&mut self) {
        if let Some(cap) = self.norm_cap {
            let n = frobenius(&self.theta);
            if n > cap {
                self.theta *= cap / n;
            }
        }
    }

    fn check(&self, opinions: &OpinionBatch) -> Result<()> {
        if self.theta.nrows() != opinions.num_classes || self.theta.ncols() != opinions.g.ncols() {
            return Err(CoeError::Shape(format!(
                "Θ is {:?}, opinions have c={} and width {}",
                self.theta.dim(),
                opinions.num_classes,
                opinions.g.ncols()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = ThetaFile {
            theta: TensorRecord::from_matrix(&self.theta),
            norm_cap: self.norm_cap,
        };
        let text = serde_json::to_string(&f).map_err(|e| CoeError::json(path, e))?;
        fs::write(path, text).map_err(|e| CoeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoeError::io(path, e))?;
        let f: ThetaFile = serde_json::from_str(&text).map_err(|e| CoeError::json(path, e))?;
        let theta = f.theta.to_matrix()?;
        if theta.nrows() == 0 || theta.ncols() % theta.nrows() != 0 {
            return Err(CoeError::Shape(format!("Θ shape {:?}", theta.dim())));
        }
        Ok(ConfidenceTensor {
            theta,
            norm_cap: f.norm_cap,
        })
    }
}

/// Predicted class (ties to the lowest index) and fused probabilities `softmax(Θ g)`.
pub fn fuse_predict(theta: &ConfidenceTensor, g: ArrayView1<f64>) -> Result<(usize, Vec<f64>)> {
    if g.len() != theta.theta.ncols() {
        return Err(CoeError::Shape(format!(
            "opinion length {} vs Θ width {}",
            g.len(),
            theta.theta.ncols()
        )));
    }
    let u = theta.theta.dot(&g);
    let p = softmax(&u.to_vec());
    Ok((argmax_slice(&p), p))
}

/// Fused predictions for every row.
pub fn fuse_all(theta: &ConfidenceTensor, opinions: &OpinionBatch) -> Result<Vec<usize>> {
    theta.check(opinions)?;
    opinions
        .g
        .rows()
        .into_iter()
        .map(|g| fuse_predict(theta, g).map(|(c, _)| c))
        .collect()
}

/// `(1/α) log Σ_j exp(α (p − y⊙p)_j)`: the true-class entry is zeroed, not dropped.
pub fn smooth_max2(p: &[f64], true_class: usize, alpha: f64) -> f64 {
    let q: Vec<f64> = masked(p, true_class);
    let scaled: Vec<f64> = q.iter().map(|v| alpha * v).collect();
    logsumexp(&scaled) / alpha
}

fn masked(p: &[f64], m: usize) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(j, &v)| if j == m { 0.0 } else { v })
        .collect()
}

/// Largest entry of `p` with the true class zeroed.
pub fn exact_masked_max(p: &[f64], true_class: usize) -> f64 {
    masked(p, true_class).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-node `−log p_m − λ (p_m − smooth_max2(p))` with `p = softmax(u)`.
pub fn node_loss(u: &[f64], m: usize, alpha: f64, lambda: f64) -> f64 {
    let lse = logsumexp(u);
    let p: Vec<f64> = u.iter().map(|v| (v - lse).exp()).collect();
    (lse - u[m]) - lambda * (p[m] - smooth_max2(&p, m, alpha))
}

/// Gradient of [`node_loss`] w.r.t. the logits `u`.
pub fn node_loss_grad(u: &[f64], m: usize, alpha: f64, lambda: f64) -> Vec<f64> {
    let p = softmax(u);
    let q = masked(&p, m);
    let scaled: Vec<f64> = q.iter().map(|v| alpha * v).collect();
    let mut w = softmax(&scaled);
    w[m] = 0.0;
    // a = d(p_m − smax)/dp
    let mut a: Vec<f64> = w.iter().map(|v| -v).collect();
    a[m] += 1.0;
    let pa: f64 = p.iter().zip(&a).map(|(x, y)| x * y).sum();
    (0..u.len())
        .map(|k| {
            let ce = p[k] - if k == m { 1.0 } else { 0.0 };
            ce - lambda * p[k] * (a[k] - pa)
        })
        .collect()
}

fn fused_probs(theta: &ConfidenceTensor, opinions: &OpinionBatch) -> Result<Array2<f64>> {
    theta.check(opinions)?;
    let u = opinions.g.dot(&theta.theta.t());
    Ok(crate::numeric::softmax_rows(&u))
}

/// `M = Σ_i [p_{i,y} − smooth_max2(p_i)]`.
pub fn margin_loss_m(theta: &ConfidenceTensor, opinions: &OpinionBatch, alpha: f64) -> Result<f64> {
    let y = opinions.labels()?;
    let p = fused_probs(theta, opinions)?;
    Ok(p.rows()
        .into_iter()
        .zip(y)
        .map(|(row, &m)| row[m] - smooth_max2(&row.to_vec(), m, alpha))
        .sum())
}

/// `C = Σ_i −log p_{i,y}`, evaluated from the logits.
pub fn correctness_loss_c(theta: &ConfidenceTensor, opinions: &OpinionBatch) -> Result<f64> {
    let y = opinions.labels()?;
    theta.check(opinions)?;
    let u = opinions.g.dot(&theta.theta.t());
    Ok(u.rows()
        .into_iter()
        .zip(y)
        .map(|(row, &m)| logsumexp(&row.to_vec()) - row[m])
        .sum())
}

/// Stage-2 objective `C − λM`.
pub fn objective(theta: &ConfidenceTensor, opinions: &OpinionBatch, alpha: f64, lambda: f64) -> Result<f64> {
    let y = opinions.labels()?;
    theta.check(opinions)?;
    let u = opinions.g.dot(&theta.theta.t());
    Ok(u.rows()
        .into_iter()
        .zip(y)
        .map(|(row, &m)| node_loss(&row.to_vec(), m, alpha, lambda))
        .sum())
}

/// `∂(C − λM)/∂Θ = Σ_i (∂ℓ_i/∂u_i) g_iᵀ`.
pub fn theta_gradient(
    theta: &ConfidenceTensor,
    opinions: &OpinionBatch,
    alpha: f64,
    lambda: f64,
) -> Result<Array2<f64>> {
    let y = opinions.labels()?;
    theta.check(opinions)?;
    let u = opinions.g.dot(&theta.theta.t());
    let mut du = Array2::zeros(u.dim());
    for (i, &m) in y.iter().enumerate() {
        let d = node_loss_grad(&u.row(i).to_vec(), m, alpha, lambda);
        du.row_mut(i).assign(&Array1::from(d));
    }
    let grad = du.t().dot(&opinions.g);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(CoeError::NonFinite(
            "Θ gradient overflowed; inputs must stay finite for the log-domain smooth max".into(),
        ));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaOptimizer {
    PlainGd,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub optimizer: ThetaOptimizer,
    pub norm_cap: Option<f64>,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            alpha: 100.0,
            lambda: 100.0,
            lr: 0.001,
            iterations: 300,
            optimizer: ThetaOptimizer::Adaptive,
            norm_cap: None,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.lambda >= 0.0) || !(self.lr > 0.0) {
            return Err(CoeError::Invalid(format!(
                "margin config needs α > 0, λ ≥ 0, lr > 0 (got {}, {}, {})",
                self.alpha, self.lambda, self.lr
            )));
        }
        if let Some(cap) = self.norm_cap {
            if !(cap > 0.0) {
                return Err(CoeError::Invalid(format!("norm cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// Objective and squared gradient norm at every iterate `Θ_0 … Θ_T`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThetaTrace {
    pub loss: Vec<f64>,
    pub grad_norm_sq: Vec<f64>,
}

impl ThetaTrace {
    pub fn min_grad_norm_sq(&self) -> f64 {
        self.grad_norm_sq.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

pub fn optimize_theta(opinions: &OpinionBatch, cfg: &MarginConfig) -> Result<(ConfidenceTensor, ThetaTrace)> {
    cfg.validate()?;
    opinions.labels()?;
    let mut theta = ConfidenceTensor::block_identity(opinions.num_classes, opinions.num_experts).with_cap(cfg.norm_cap);
    let mut trace = ThetaTrace::default();
    let mut adam = Adam::new(cfg.lr);
    for t in 0..=cfg.iterations {
        let loss = objective(&theta, opinions, cfg.alpha, cfg.lambda)?;
        let grad = theta_gradient(&theta, opinions, cfg.alpha, cfg.lambda)
            .map_err(|e| CoeError::Divergence(format!("iteration {t}: {e}")))?;
        if !loss.is_finite() {
            return Err(CoeError::Divergence(format!("Stage-2 loss non-finite at iteration {t}")));
        }
        trace.loss.push(loss);
        trace.grad_norm_sq.push(grad.iter().map(|v| v * v).sum());
        if t == cfg.iterations {
            break;
        }
        match cfg.optimizer {
            ThetaOptimizer::PlainGd => theta.theta.scaled_add(-cfg.lr, &grad),
            ThetaOptimizer::Adaptive => {
                adam.tick();
                if !theta.theta.is_standard_layout() {
                    theta.theta = theta.theta.as_standard_layout().into_owned();
                }
                let grad = grad.as_standard_layout();
                adam.update(0, theta.theta.as_slice_mut().unwrap(), grad.as_slice().unwrap());
            }
        }
        theta.project();
    }
    Ok((theta, trace))
}

/// Index of each expert's top class per row.
fn expert_votes(opinions: &OpinionBatch) -> Vec<Vec<usize>> {
    (0..opinions.len())
        .map(|i| {
            (0..opinions.num_experts)
                .map(|e| argmax_slice(&opinions.block(i, e).to_vec()))
                .collect()
        })
        .collect()
}

/// Unweighted majority vote over expert argmaxes.
pub fn vote_rf(opinions: &OpinionBatch) -> Vec<usize> {
    let w = vec![1.0; opinions.num_experts];
    weighted_vote(opinions, &w)
}

/// Weighted vote; weights are normalized internally.
pub fn vote_wrf(opinions: &OpinionBatch, weights: &[f64]) -> Result<Vec<usize>> {
    if weights.len() != opinions.num_experts {
        return Err(CoeError::Shape(format!(
            "{} weights for {} experts",
            weights.len(),
            opinions.num_experts
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || weights.iter().all(|&w| w == 0.0) {
        return Err(CoeError::Invalid("vote weights must be non-negative and not all zero".into()));
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    Ok(weighted_vote(opinions, &norm))
}

fn weighted_vote(opinions: &OpinionBatch, weights: &[f64]) -> Vec<usize> {
    expert_votes(opinions)
        .into_iter()
        .map(|votes| {
            let mut tally = vec![0.0; opinions.num_classes];
            for (e, v) in votes.into_iter().enumerate() {
                tally[v] += weights[e];
            }
            argmax_slice(&tally)
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// `node TAB predicted TAB true`.
pub fn write_predictions(path: &Path, nodes: &[usize], pred: &[usize], truth: &[usize]) -> Result<()> {
    let mut out = String::from("node\tpredicted\ttrue\n");
    for ((n, p), t) in nodes.iter().zip(pred).zip(truth) {
        writeln!(out, "{n}\t{p}\t{t}").unwrap();
    }
    fs::write(path, out).map_err(|e| CoeError::io(path, e))
}
