//! Contrastive (InfoNCE) lower bound on the mutual information between two
//! aligned embedding matrices, with a projection + cosine critic.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::encoders::{ParamStore, TensorRecord};
use crate::error::{CoeError, Result};
use crate::numeric::{column_sums, glorot, logsumexp, rng_from_seed, Activation};

/// Score critic `f(a, b) = cos(proj(a), proj(b)) / τ` with `proj(z) = act(zW + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub temperature: f64,
    pub activation: Activation,
}

impl CriticParams {
    /// Square projection (`d_p = d`) with Glorot weights and ELU.
    pub fn init(d: usize, temperature: f64, seed: u64) -> Self {
        CriticParams {
            weight: glorot(d, d, &mut rng_from_seed(seed)),
            bias: Array1::zeros(d),
            temperature,
            activation: Activation::Elu,
        }
    }

    /// `proj = id`, so the score is plain cosine over τ.
    pub fn identity(d: usize, temperature: f64) -> Self {
        CriticParams {
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
            temperature,
            activation: Activation::Identity,
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CoeError::Invalid(format!(
                "critic temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.weight.nrows() != d || self.bias.len() != self.weight.ncols() {
            return Err(CoeError::Shape(format!(
                "critic {:?} + bias {} vs embedding width {d}",
                self.weight.dim(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weight.iter().chain(self.bias.iter()).cloned().collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let n = self.weight.len();
        let m = self.bias.len();
        self.weight.as_slice_mut().unwrap().copy_from_slice(&flat[..n]);
        self.bias.as_slice_mut().unwrap().copy_from_slice(&flat[n..n + m]);
    }
}

impl CriticParams {
    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.weight"), TensorRecord::from_matrix(&self.weight));
        store.insert(format!("{prefix}.bias"), TensorRecord::from_vector(&self.bias));
        store.insert(
            format!("{prefix}.temperature"),
            TensorRecord {
                shape: vec![1],
                values: vec![self.temperature],
            },
        );
    }

    pub fn import(prefix: &str, store: &ParamStore, activation: Activation) -> Result<Self> {
        let get = |k: &str| {
            store
                .get(&format!("{prefix}.{k}"))
                .ok_or_else(|| CoeError::Invalid(format!("missing {prefix}.{k}")))
        };
        let c = CriticParams {
            weight: get("weight")?.to_matrix()?,
            bias: get("bias")?.to_vector()?,
            temperature: get("temperature")?.to_vector()?[0],
            activation,
        };
        c.check(c.weight.nrows())?;
        Ok(c)
    }
}

/// Aligned node positions; row `i` of both matrices forms a positive pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiBatch {
    pub indices: Vec<usize>,
}

impl MiBatch {
    pub fn full(n: usize) -> Self {
        MiBatch {
            indices: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn project(z: ArrayView1<f64>, critic: &CriticParams) -> Array1<f64> {
    (z.dot(&critic.weight) + &critic.bias).mapv(|v| critic.activation.apply(v))
}

pub fn critic_score(za: ArrayView1<f64>, zb: ArrayView1<f64>, critic: &CriticParams) -> Result<f64> {
    if za.len() != zb.len() {
        return Err(CoeError::Shape(format!("{} vs {}", za.len(), zb.len())));
    }
    critic.check(za.len())?;
    let pa = project(za, critic);
    let pb = project(zb, critic);
    let na = pa.dot(&pa).sqrt();
    let nb = pb.dot(&pb).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoeError::ZeroProjection);
    }
    Ok(pa.dot(&pb) / (na * nb) / critic.temperature)
}

/// Symmetrized InfoNCE value and its gradients (of the value, not of its negation).
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub value: f64,
    /// Same shape as the input matrices; rows outside the batch are zero.
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

/// `(1/B) Σ_i [S_ii − logsumexp_j S_ij]` averaged with the column direction,
/// plus `dI/dS`.
pub fn info_nce_from_scores(s: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let b = s.nrows();
    if b < 2 || s.ncols() != b {
        return Err(CoeError::Invalid(format!("InfoNCE needs a square batch of at least 2, got {:?}", s.dim())));
    }
    let bf = b as f64;
    let row_lse: Vec<f64> = s.rows().into_iter().map(|r| logsumexp(r.as_slice().unwrap())).collect();
    let col_lse: Vec<f64> = s
        .columns()
        .into_iter()
        .map(|c| logsumexp(&c.to_vec()))
        .collect();
    let diag: f64 = s.diag().sum();
    let ab = (diag - row_lse.iter().sum::<f64>()) / bf;
    let ba = (diag - col_lse.iter().sum::<f64>()) / bf;
    let mut grad = Array2::zeros((b, b));
    let scale = 1.0 / (2.0 * bf);
    for i in 0..b {
        for j in 0..b {
            let r = (s[[i, j]] - row_lse[i]).exp();
            let c = (s[[i, j]] - col_lse[j]).exp();
            let eye = if i == j { 2.0 } else { 0.0 };
            grad[[i, j]] = scale * (eye - r - c);
        }
    }
    Ok(((ab + ba) / 2.0, grad))
}

struct Projected {
    x: Array2<f64>,
    pre: Array2<f64>,
    unit: Array2<f64>,
    norms: Vec<f64>,
}

fn project_batch(z: &Array2<f64>, batch: &MiBatch, critic: &CriticParams) -> Result<Projected> {
    let x = z.select(Axis(0), &batch.indices);
    let pre = x.dot(&critic.weight) + &critic.bias;
    let mut unit = pre.mapv(|v| critic.activation.apply(v));
    let mut norms = Vec::with_capacity(unit.nrows());
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(CoeError::ZeroProjection);
        }
        row /= n;
        norms.push(n);
    }
    Ok(Projected { x, pre, unit, norms })
}

/// Back through normalization and activation: returns `dL/dpre`.
fn unproject(p: &Projected, du: &Array2<f64>, act: Activation) -> Array2<f64> {
    let mut out = du.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let u = p.unit.row(i);
        let dot = u.dot(&du.row(i));
        for t in 0..row.len() {
            row[t] = (row[t] - u[t] * dot) / p.norms[i] * act.derivative(p.pre[[i, t]]);
        }
    }
    out
}

pub fn info_nce(
    za: &Array2<f64>,
    zb: &Array2<f64>,
    critic: &CriticParams,
    batch: &MiBatch,
) -> Result<InfoNce> {
    if batch.len() < 2 {
        return Err(CoeError::Invalid(format!("InfoNCE batch of {} < 2", batch.len())));
    }
    if za.dim() != zb.dim() {
        return Err(CoeError::Shape(format!("{:?} vs {:?}", za.dim(), zb.dim())));
    }
    if let Some(&bad) = batch.indices.iter().find(|&&i| i >= za.nrows()) {
        return Err(CoeError::Invalid(format!("batch index {bad} out of range")));
    }
    critic.check(za.ncols())?;
    let pa = project_batch(za, batch, critic)?;
    let pb = project_batch(zb, batch, critic)?;
    let tau = critic.temperature;
    let s = pa.unit.dot(&pb.unit.t()) / tau;
    let (value, ds) = info_nce_from_scores(&s)?;
    let dua = ds.dot(&pb.unit) / tau;
    let dub = ds.t().dot(&pa.unit) / tau;
    let dpa = unproject(&pa, &dua, critic.activation);
    let dpb = unproject(&pb, &dub, critic.activation);
    let grad_weight = pa.x.t().dot(&dpa) + pb.x.t().dot(&dpb);
    let grad_bias = column_sums(&dpa) + column_sums(&dpb);
    let dxa = dpa.dot(&critic.weight.t());
    let dxb = dpb.dot(&critic.weight.t());
    let mut grad_a = Array2::zeros(za.dim());
    let mut grad_b = Array2::zeros(zb.dim());
    for (r, &i) in batch.indices.iter().enumerate() {
        let mut ga = grad_a.row_mut(i);
        ga += &dxa.row(r);
        let mut gb = grad_b.row_mut(i);
        gb += &dxb.row(r);
    }
    Ok(InfoNce {
        value,
        grad_a,
        grad_b,
        grad_weight,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{finite_diff_check, FdOptions};
    use ndarray::array;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn critic_examples() {
        let c = CriticParams::identity(3, 0.2);
        let z = array![0.3, -1.0, 2.0];
        assert!((critic_score(z.view(), z.view(), &c).unwrap() - 5.0).abs() < 1e-12);
        let a = array![1.0, 0.0, 0.0];
        let b = array![0.0, 2.0, 0.0];
        assert_eq!(critic_score(a.view(), b.view(), &c).unwrap(), 0.0);
        let zero = array![0.0, 0.0, 0.0];
        assert!(matches!(critic_score(zero.view(), a.view(), &c), Err(CoeError::ZeroProjection)));
    }

    #[test]
    fn critic_matches_hand_composition() {
        let c = CriticParams::init(4, 0.2, 3);
        let z = random(2, 4, 8);
        let proj = |r: usize| -> Vec<f64> {
            (0..4)
                .map(|o| {
                    let s: f64 = (0..4).map(|t| z[[r, t]] * c.weight[[t, o]]).sum::<f64>() + c.bias[o];
                    if s > 0.0 {
                        s
                    } else {
                        s.exp() - 1.0
                    }
                })
                .collect()
        };
        let (p, q) = (proj(0), proj(1));
        let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = dot / (np * nq) / 0.2;
        let got = critic_score(z.row(0), z.row(1), &c).unwrap();
        assert!((got - want).abs() < 1e-12);
        let rev = critic_score(z.row(1), z.row(0), &c).unwrap();
        assert_eq!(got, rev);
    }

    #[test]
    fn identical_rows_give_minus_log_b() {
        let row = array![[0.4, -0.3, 0.9]];
        let z = Array2::from_shape_fn((6, 3), |(_, j)| row[[0, j]]);
        let c = CriticParams::init(3, 0.2, 1);
        let r = info_nce(&z, &z, &c, &MiBatch::full(6)).unwrap();
        assert!((r.value + 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn separable_pair_approaches_log_two() {
        let s = array![[20.0, 0.0], [0.0, 20.0]];
        let (v, _) = info_nce_from_scores(&s).unwrap();
        let oracle = 20.0 - (20f64.exp() + 1.0).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!(v + 2f64.ln() > 0.69);
    }

    #[test]
    fn bounded_by_log_batch() {
        for seed in 0..20 {
            let za = random(8, 5, seed);
            let zb = random(8, 5, seed + 100);
            let c = CriticParams::init(5, 0.2, seed);
            let r = info_nce(&za, &zb, &c, &MiBatch::full(8)).unwrap();
            assert!(r.value <= 8f64.ln());
        }
    }

    #[test]
    fn batch_too_small() {
        let z = random(4, 3, 0);
        let c = CriticParams::init(3, 0.2, 0);
        assert!(info_nce(&z, &z, &c, &MiBatch { indices: vec![1] }).is_err());
    }

    #[test]
    fn swap_symmetry() {
        let za = random(7, 4, 1);
        let zb = random(7, 4, 2);
        let c = CriticParams::init(4, 0.2, 3);
        let b = MiBatch::full(7);
        let ab = info_nce(&za, &zb, &c, &b).unwrap().value;
        let ba = info_nce(&zb, &za, &c, &b).unwrap().value;
        assert!((ab - ba).abs() < 1e-10);
    }

    #[test]
    fn rotation_invariant_with_identity_projection() {
        let za = random(6, 2, 4);
        let zb = random(6, 2, 5);
        let (s, co) = (0.7f64.sin(), 0.7f64.cos());
        let rot = array![[co, -s], [s, co]];
        let c = CriticParams::identity(2, 0.2);
        let b = MiBatch::full(6);
        let v = info_nce(&za, &zb, &c, &b).unwrap().value;
        let w = info_nce(&za.dot(&rot), &zb.dot(&rot), &c, &b).unwrap().value;
        assert!((v - w).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (n, d) = (6, 3);
        let za = random(n, d, 11);
        let zb = random(n, d, 12);
        let mut c = CriticParams::init(d, 0.5, 13);
        c.bias.fill(0.1);
        let batch = MiBatch {
            indices: vec![0, 2, 3, 5],
        };
        let r = info_nce(&za, &zb, &c, &batch).unwrap();
        let mut theta: Vec<f64> = za.iter().chain(zb.iter()).cloned().collect();
        theta.extend(c.flatten());
        let mut grad: Vec<f64> = r.grad_a.iter().chain(r.grad_b.iter()).cloned().collect();
        grad.extend(r.grad_weight.iter().chain(r.grad_bias.iter()));
        let f = |t: &[f64]| {
            let a = Array2::from_shape_vec((n, d), t[..n * d].to_vec()).unwrap();
            let b = Array2::from_shape_vec((n, d), t[n * d..2 * n * d].to_vec()).unwrap();
            let mut cc = c.clone();
            cc.assign(&t[2 * n * d..]);
            info_nce(&a, &b, &cc, &batch).unwrap().value
        };
        let rep = finite_diff_check(f, &theta, &grad, FdOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}
