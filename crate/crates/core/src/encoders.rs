//! GCN encoders, softmax classifier heads and their hand-derived backward
//! passes, plus the finite-difference harness used to verify every gradient.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{CoeError, Result};
use crate::numeric::{column_sums, glorot, rng_from_seed, softmax_rows, Activation};
use crate::refinery::NormalizedAdjacency;

/// Weights of an `L`-layer GCN. The activation is applied between layers;
/// the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub weights: Vec<Array2<f64>>,
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderParams {
    /// Glorot-uniform init. One layer maps `d_in → d`; deeper stacks use
    /// `d_hidden` for every inner width.
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, layers: usize, seed: u64) -> Self {
        assert!(layers >= 1, "encoder needs at least one layer");
        let mut rng = rng_from_seed(seed);
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(d_hidden, layers - 1));
        dims.push(d_out);
        let weights = dims
            .windows(2)
            .map(|w| glorot(w[0], w[1], &mut rng))
            .collect();
        EncoderParams {
            weights,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|w| w.iter().cloned()).collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut off = 0;
        for w in &mut self.weights {
            let n = w.len();
            w.as_slice_mut().unwrap().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn check(&self) -> Result<()> {
        for pair in self.weights.windows(2) {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(CoeError::Shape(format!(
                    "encoder layers do not chain: {:?} then {:?}",
                    pair[0].dim(),
                    pair[1].dim()
                )));
            }
        }
        if self.weights.iter().flat_map(|w| w.iter()).any(|v| !v.is_finite()) {
            return Err(CoeError::NonFinite("encoder weight".into()));
        }
        Ok(())
    }
}

/// Linear softmax head `softmax(Z W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn zeros(d: usize, c: usize) -> Self {
        ClassifierHead {
            weight: Array2::zeros((d, c)),
            bias: Array1::zeros(c),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.weight.nrows() {
            return Err(CoeError::Shape(format!(
                "embedding width {} vs head input {}",
                z.ncols(),
                self.weight.nrows()
            )));
        }
        Ok(z.dot(&self.weight) + &self.bias)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weight.iter().chain(self.bias.iter()).cloned().collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let n = self.weight.len();
        self.weight.as_slice_mut().unwrap().copy_from_slice(&flat[..n]);
        let c = self.bias.len();
        self.bias.as_slice_mut().unwrap().copy_from_slice(&flat[n..n + c]);
    }
}

/// Node representations together with the graph that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub graph: String,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GcnCache {
    /// `A′ H_l` for every layer.
    propagated: Vec<Array2<f64>>,
    /// Pre-activations `A′ H_l W_l`.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Forward pass keeping intermediates.
pub fn gcn_forward_cached(
    adj: &NormalizedAdjacency,
    x: &Array2<f64>,
    params: &EncoderParams,
) -> Result<GcnCache> {
    params.check()?;
    if x.nrows() != adj.num_nodes() {
        return Err(CoeError::Shape(format!(
            "features have {} rows, graph has {} nodes",
            x.nrows(),
            adj.num_nodes()
        )));
    }
    if x.ncols() != params.input_dim() {
        return Err(CoeError::Shape(format!(
            "features have {} columns, encoder expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let last = params.weights.len() - 1;
    let mut propagated = Vec::with_capacity(params.weights.len());
    let mut pre = Vec::with_capacity(params.weights.len());
    let mut h = x.clone();
    for (l, w) in params.weights.iter().enumerate() {
        let m = adj.propagate(&h);
        let p = m.dot(w);
        h = if l < last {
            p.mapv(|v| params.activation.apply(v))
        } else {
            p.clone()
        };
        propagated.push(m);
        pre.push(p);
    }
    Ok(GcnCache {
        propagated,
        pre,
        output: h,
    })
}

/// `Z = A′·act(… act(A′ X W₁) …)·W_L`.
pub fn gcn_forward(
    adj: &NormalizedAdjacency,
    x: &Array2<f64>,
    params: &EncoderParams,
) -> Result<Array2<f64>> {
    Ok(gcn_forward_cached(adj, x, params)?.output)
}

/// Gradients of a scalar w.r.t. the encoder weights and its input, given `dL/dZ`.
pub fn gcn_backward(
    adj: &NormalizedAdjacency,
    cache: &GcnCache,
    params: &EncoderParams,
    d_out: &Array2<f64>,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let last = params.weights.len() - 1;
    let mut grads = vec![Array2::zeros((0, 0)); params.weights.len()];
    let mut dh = d_out.clone();
    for l in (0..=last).rev() {
        let dp = if l < last {
            let act = params.activation;
            ndarray::Zip::from(&dh)
                .and(&cache.pre[l])
                .map_collect(|&g, &p| g * act.derivative(p))
        } else {
            dh
        };
        grads[l] = cache.propagated[l].t().dot(&dp);
        let dm = dp.dot(&params.weights[l].t());
        dh = adj.propagate(&dm);
    }
    (grads, dh)
}

/// Row-wise class probabilities.
pub fn classify(z: &Array2<f64>, head: &ClassifierHead) -> Result<Array2<f64>> {
    Ok(softmax_rows(&head.logits(z)?))
}

/// Mean negative log-likelihood over `idx` and its gradient w.r.t. the logits
/// (rows outside `idx` are zero).
pub fn cross_entropy(
    probs: &Array2<f64>,
    labels: &[usize],
    idx: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if idx.is_empty() {
        return Err(CoeError::Invalid("cross entropy over an empty index set".into()));
    }
    let n = idx.len() as f64;
    let mut grad = Array2::zeros(probs.dim());
    let mut loss = 0.0;
    for &i in idx {
        let y = labels[i];
        if y >= probs.ncols() {
            return Err(CoeError::Invalid(format!("label {y} out of range")));
        }
        loss -= probs[[i, y]].ln();
        for j in 0..probs.ncols() {
            grad[[i, j]] = probs[[i, j]] / n;
        }
        grad[[i, y]] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Gradients of the head given `dL/dlogits`: `(dW, db, dZ)`.
pub fn head_backward(
    z: &Array2<f64>,
    head: &ClassifierHead,
    d_logits: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    (
        z.t().dot(d_logits),
        column_sums(d_logits),
        d_logits.dot(&head.weight.t()),
    )
}

/// Loss and gradients for one supervised encoder + head.
#[derive(Debug, Clone)]
pub struct SupervisedGrads {
    pub loss: f64,
    pub encoder: Vec<Array2<f64>>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub input: Array2<f64>,
}

/// Cross-entropy of `classify(gcn_forward(·))` over `idx` with all gradients.
pub fn supervised_loss(
    adj: &NormalizedAdjacency,
    x: &Array2<f64>,
    encoder: &EncoderParams,
    head: &ClassifierHead,
    labels: &[usize],
    idx: &[usize],
) -> Result<SupervisedGrads> {
    let cache = gcn_forward_cached(adj, x, encoder)?;
    let probs = classify(&cache.output, head)?;
    let (loss, dlogits) = cross_entropy(&probs, labels, idx)?;
    let (hw, hb, dz) = head_backward(&cache.output, head, &dlogits);
    let (enc, dx) = gcn_backward(adj, &cache, encoder, &dz);
    Ok(SupervisedGrads {
        loss,
        encoder: enc,
        head_weight: hw,
        head_bias: hb,
        input: dx,
    })
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates checked; larger parameter vectors are subsampled.
    pub max_coords: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            max_coords: 200,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

/// Compare an analytic gradient to central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate-wise, on at most `max_coords`
/// sampled coordinates. The error of a coordinate is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(CoeError::Shape(format!(
            "{} params vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let coords: Vec<usize> = if params.len() <= opts.max_coords {
        (0..params.len()).collect()
    } else {
        let mut c = index::sample(&mut rng_from_seed(opts.seed), params.len(), opts.max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut theta = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + opts.step;
        let up = f(&theta);
        theta[i] = orig - opts.step;
        let down = f(&theta);
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(CoeError::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        TensorRecord {
            shape: vec![m.nrows(), m.ncols()],
            values: m.iter().cloned().collect(),
        }
    }

    pub fn from_vector(v: &Array1<f64>) -> Self {
        TensorRecord {
            shape: vec![v.len()],
            values: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape.as_slice() {
            &[r, c] if r * c == self.values.len() => {
                Ok(Array2::from_shape_vec((r, c), self.values.clone()).expect("checked shape"))
            }
            s => Err(CoeError::Shape(format!("record shape {s:?} is not a matrix of {} values", self.values.len()))),
        }
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        match self.shape.as_slice() {
            &[n] if n == self.values.len() => Ok(Array1::from(self.values.clone())),
            s => Err(CoeError::Shape(format!("record shape {s:?} is not a vector"))),
        }
    }
}

/// Named tensors, serialized as `params.json`.
pub type ParamStore = BTreeMap<String, TensorRecord>;

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let text = serde_json::to_string(store).map_err(|e| CoeError::json(path, e))?;
    fs::write(path, text).map_err(|e| CoeError::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(path).map_err(|e| CoeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoeError::json(path, e))
}

impl EncoderParams {
    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        for (l, w) in self.weights.iter().enumerate() {
            store.insert(format!("{prefix}.layer{l}"), TensorRecord::from_matrix(w));
        }
    }

    pub fn import(prefix: &str, store: &ParamStore, seed: u64) -> Result<Self> {
        let mut weights = Vec::new();
        while let Some(rec) = store.get(&format!("{prefix}.layer{}", weights.len())) {
            weights.push(rec.to_matrix()?);
        }
        if weights.is_empty() {
            return Err(CoeError::Invalid(format!("no encoder weights under {prefix}")));
        }
        let p = EncoderParams {
            weights,
            activation: Activation::Relu,
            seed,
        };
        p.check()?;
        Ok(p)
    }
}

impl ClassifierHead {
    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.weight"), TensorRecord::from_matrix(&self.weight));
        store.insert(format!("{prefix}.bias"), TensorRecord::from_vector(&self.bias));
    }

    pub fn import(prefix: &str, store: &ParamStore) -> Result<Self> {
        let get = |k: &str| {
            store
                .get(&format!("{prefix}.{k}"))
                .ok_or_else(|| CoeError::Invalid(format!("missing {prefix}.{k}")))
        };
        Ok(ClassifierHead {
            weight: get("weight")?.to_matrix()?,
            bias: get("bias")?.to_vector()?,
        })
    }
}
