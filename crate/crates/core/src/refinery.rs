//! Graph structure refinement for a single layer: feature propagation with
//! elementwise attention weights, cosine kNN reconstruction (exact or
//! hashed), and post-processing into a symmetric normalized adjacency.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Layer;
use crate::error::{CoeError, Result};
use crate::numeric::{relu, rng_from_seed};

/// Above this node count refined adjacencies are kept sparse.
pub const DENSE_LIMIT: usize = 2048;

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in triplets {
            assert!(i < n_rows && j < n_cols, "triplet ({i}, {j}) out of bounds");
            *map.entry((i, j)).or_insert(0.0) += v;
        }
        let mut indptr = vec![0; n_rows + 1];
        let mut indices = Vec::with_capacity(map.len());
        let mut values = Vec::with_capacity(map.len());
        for (&(i, j), &v) in &map {
            indptr[i + 1] += 1;
            indices.push(j);
            values.push(v);
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        SparseMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    /// Keep every nonzero entry of a dense matrix.
    pub fn from_dense(a: ArrayView2<f64>) -> Self {
        let (r, c) = a.dim();
        SparseMatrix::from_triplets(
            r,
            c,
            a.indexed_iter()
                .filter(|(_, &v)| v != 0.0)
                .map(|((i, j), &v)| (i, j, v)),
        )
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[s..e]
            .iter()
            .cloned()
            .zip(self.values[s..e].iter().cloned())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.indptr[i], self.indptr[i + 1]);
        match self.indices[s..e].binary_search(&j) {
            Ok(p) => self.values[s + p],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_rows, self.n_cols));
        for (i, j, v) in self.iter() {
            a[[i, j]] = v;
        }
        a
    }

    /// `self · x` for a dense right-hand side.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.n_cols, x.nrows());
        let mut out = Array2::zeros((self.n_rows, x.ncols()));
        for i in 0..self.n_rows {
            let mut orow = out.row_mut(i);
            for (j, v) in self.row(i) {
                orow.scaled_add(v, &x.row(j));
            }
        }
        out
    }
}

/// Symmetric propagation operator, dense at desk scale.
#[derive(Debug, Clone, PartialEq)]
pub enum NormalizedAdjacency {
    Dense(Array2<f64>),
    Sparse(SparseMatrix),
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        match self {
            NormalizedAdjacency::Dense(a) => a.nrows(),
            NormalizedAdjacency::Sparse(s) => s.n_rows,
        }
    }

    pub fn identity(n: usize) -> Self {
        NormalizedAdjacency::Dense(Array2::eye(n))
    }

    /// `A′ · x`. The operator is symmetric, so this is also its transpose product.
    pub fn propagate(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            NormalizedAdjacency::Dense(a) => a.dot(x),
            NormalizedAdjacency::Sparse(s) => s.matmul(x),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            NormalizedAdjacency::Dense(a) => a[[i, j]],
            NormalizedAdjacency::Sparse(s) => s.get(i, j),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            NormalizedAdjacency::Dense(a) => a.clone(),
            NormalizedAdjacency::Sparse(s) => s.to_dense(),
        }
    }

    /// Upper-triangle nonzeros `(i, j, w)` with `i <= j`, row-major.
    pub fn upper_entries(&self) -> Vec<(usize, usize, f64)> {
        match self {
            NormalizedAdjacency::Dense(a) => a
                .indexed_iter()
                .filter(|((i, j), &v)| i <= j && v != 0.0)
                .map(|((i, j), &v)| (i, j, v))
                .collect(),
            NormalizedAdjacency::Sparse(s) => s.iter().filter(|&(i, j, _)| i <= j).collect(),
        }
    }

    /// Entrywise mean of several operators on the same node set.
    pub fn average(parts: &[&NormalizedAdjacency]) -> Result<NormalizedAdjacency> {
        let n = parts
            .first()
            .ok_or_else(|| CoeError::Invalid("nothing to average".into()))?
            .num_nodes();
        if parts.iter().any(|p| p.num_nodes() != n) {
            return Err(CoeError::Shape("adjacencies differ in node count".into()));
        }
        let w = 1.0 / parts.len() as f64;
        if n <= DENSE_LIMIT {
            let mut acc = Array2::zeros((n, n));
            for p in parts {
                match p {
                    NormalizedAdjacency::Dense(a) => acc.scaled_add(w, a),
                    NormalizedAdjacency::Sparse(s) => {
                        for (i, j, v) in s.iter() {
                            acc[[i, j]] += w * v;
                        }
                    }
                }
            }
            Ok(NormalizedAdjacency::Dense(acc))
        } else {
            let trip = parts.iter().flat_map(|p| match p {
                NormalizedAdjacency::Sparse(s) => s.iter().map(|(i, j, v)| (i, j, w * v)).collect::<Vec<_>>(),
                NormalizedAdjacency::Dense(a) => a
                    .indexed_iter()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|((i, j), &v)| (i, j, w * v))
                    .collect(),
            });
            Ok(NormalizedAdjacency::Sparse(SparseMatrix::from_triplets(n, n, trip)))
        }
    }
}

/// Output of post-processing: `A′ = D̃^{-1/2} Ã D̃^{-1/2}` with `Ã = A_sym + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedLayer {
    pub adjacency: NormalizedAdjacency,
    /// Diagonal of `D̃`, when known.
    pub degrees: Option<Vec<f64>>,
    /// Neighbor count used by the kNN step, if any.
    pub k: Option<usize>,
    pub source: String,
}

impl RefinedLayer {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    /// Write `i TAB j TAB weight` rows for `i <= j`, weights to 17 significant digits.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| CoeError::io(path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "# n={}", self.num_nodes()).map_err(|e| CoeError::io(path, e))?;
        for (i, j, v) in self.adjacency.upper_entries() {
            writeln!(w, "{i}\t{j}\t{v:.16e}").map_err(|e| CoeError::io(path, e))?;
        }
        w.flush().map_err(|e| CoeError::io(path, e))
    }

    pub fn load_tsv(path: &Path, source: impl Into<String>) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| CoeError::io(path, e))?;
        let mut n = None;
        let mut trip = Vec::new();
        for (ln, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| CoeError::io(path, e))?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# n=") {
                n = Some(
                    rest.parse::<usize>()
                        .map_err(|_| CoeError::parse(path, ln + 1, "bad node count header"))?,
                );
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(CoeError::parse(path, ln + 1, "expected i TAB j TAB weight"));
            }
            let i: usize = cols[0].parse().map_err(|_| CoeError::parse(path, ln + 1, "bad row"))?;
            let j: usize = cols[1].parse().map_err(|_| CoeError::parse(path, ln + 1, "bad col"))?;
            let v: f64 = cols[2].parse().map_err(|_| CoeError::parse(path, ln + 1, "bad weight"))?;
            if i > j {
                return Err(CoeError::parse(path, ln + 1, "rows must have i <= j"));
            }
            trip.push((i, j, v));
        }
        let n = n.ok_or_else(|| CoeError::parse(path, 1, "missing '# n=' header"))?;
        let full = trip
            .iter()
            .flat_map(|&(i, j, v)| {
                if i == j {
                    vec![(i, j, v)]
                } else {
                    vec![(i, j, v), (j, i, v)]
                }
            })
            .collect::<Vec<_>>();
        if full.iter().any(|&(i, j, _)| i >= n || j >= n) {
            return Err(CoeError::parse(path, 0, "index out of range"));
        }
        let adjacency = if n <= DENSE_LIMIT {
            let mut a = Array2::zeros((n, n));
            for (i, j, v) in full {
                a[[i, j]] = v;
            }
            NormalizedAdjacency::Dense(a)
        } else {
            NormalizedAdjacency::Sparse(SparseMatrix::from_triplets(n, n, full))
        };
        Ok(RefinedLayer {
            adjacency,
            degrees: None,
            k: None,
            source: source.into(),
        })
    }
}

/// Elementwise weights of the attentive learner plus the propagation order.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub order: usize,
}

impl LearnerParams {
    /// All-ones weights, which reduce the learner to plain feature propagation.
    pub fn ones(num_nodes: usize, dim: usize, order: usize) -> Self {
        LearnerParams {
            w1: Array2::ones((num_nodes, dim)),
            w2: Array2::ones((num_nodes, dim)),
            order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KnnMode {
    Exact,
    /// Random-hyperplane hashing; nodes sorted by signature and cut into
    /// batches of `batch_size`, with candidates unioned over `num_tables`.
    Lsh {
        batch_size: usize,
        num_hashes: usize,
        num_tables: usize,
        seed: u64,
    },
}

/// Symmetric normalization of a plain layer: `D̃^{-1/2}(A + I)D̃^{-1/2}`.
pub fn normalize_layer(layer: &Layer) -> RefinedLayer {
    let n = layer.num_nodes();
    let trip = layer
        .edges()
        .iter()
        .flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)]);
    let mut out = postprocess_adjacency(&SparseMatrix::from_triplets(n, n, trip))
        .expect("binary adjacency is finite");
    out.source = layer.name.clone();
    out
}

/// Propagate features `order` times through the normalized layer, then apply
/// `relu(· ⊙ W1) ⊙ W2`. Layers without structure return their features as is.
pub fn attentive_embed(layer: &Layer, params: &LearnerParams) -> Result<Array2<f64>> {
    let x = &layer.features;
    if !layer.has_structure {
        return Ok(x.clone());
    }
    if params.order == 0 {
        return Err(CoeError::Invalid("propagation order must be >= 1".into()));
    }
    if params.w1.dim() != x.dim() || params.w2.dim() != x.dim() {
        return Err(CoeError::Shape(format!(
            "learner weights {:?}/{:?} do not match features {:?}",
            params.w1.dim(),
            params.w2.dim(),
            x.dim()
        )));
    }
    let op = normalize_layer(layer).adjacency;
    let mut h = x.clone();
    for _ in 0..params.order {
        h = op.propagate(&h);
    }
    Ok(ndarray::Zip::from(&h)
        .and(&params.w1)
        .and(&params.w2)
        .map_collect(|&p, &a, &b| relu(p * a) * b))
}

fn unit_rows(h: &Array2<f64>) -> Result<Array2<f64>> {
    let mut u = h.clone();
    for (i, mut row) in u.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(CoeError::DegenerateEmbedding(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(u)
}

/// Top-`k` by similarity, ties to the lowest index. `cands` excludes `i`.
fn top_k(i: usize, cands: &[usize], unit: &Array2<f64>, k: usize) -> Vec<(usize, f64)> {
    let ri = unit.row(i);
    let mut scored: Vec<(usize, f64)> = cands
        .iter()
        .map(|&j| (j, ri.dot(&unit.row(j))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Cosine kNN sparsification. Row `i` holds the similarities of its `k`
/// nearest neighbors (self excluded); everything else is zero.
pub fn knn_graph(h: &Array2<f64>, k: usize, mode: KnnMode) -> Result<SparseMatrix> {
    let n = h.nrows();
    if k >= n {
        return Err(CoeError::Invalid(format!("K={k} must be smaller than N={n}")));
    }
    let unit = unit_rows(h)?;
    let mut trip = Vec::with_capacity(n * k);
    match mode {
        KnnMode::Exact => {
            let sims = unit.dot(&unit.t());
            for i in 0..n {
                let row = sims.row(i);
                let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                for &j in order.iter().take(k) {
                    trip.push((i, j, row[j]));
                }
            }
        }
        KnnMode::Lsh {
            batch_size,
            num_hashes,
            num_tables,
            seed,
        } => {
            if batch_size < k + 1 {
                return Err(CoeError::Invalid(format!(
                    "LSH batch size {batch_size} must be at least K+1={}",
                    k + 1
                )));
            }
            if num_hashes == 0 || num_hashes > 63 || num_tables == 0 {
                return Err(CoeError::Invalid(
                    "LSH needs 1..=63 hash bits and at least one table".into(),
                ));
            }
            let candidates = lsh_candidates(&unit, batch_size, num_hashes, num_tables, seed);
            for (i, cands) in candidates.iter().enumerate() {
                for (j, s) in top_k(i, cands, &unit, k) {
                    trip.push((i, j, s));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(n, n, trip))
}

fn lsh_candidates(
    unit: &Array2<f64>,
    batch_size: usize,
    num_hashes: usize,
    num_tables: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let (n, d) = unit.dim();
    let mut rng = rng_from_seed(seed);
    let mut sets: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for _ in 0..num_tables {
        let planes = Array2::from_shape_fn((d, num_hashes), |_| {
            StandardNormal.sample(&mut rng)
        });
        let proj = unit.dot(&planes);
        let mut keyed: Vec<(u64, usize)> = (0..n)
            .map(|i| {
                let sig = proj
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (b, &v)| if v >= 0.0 { acc | (1 << b) } else { acc });
                (sig, i)
            })
            .collect();
        keyed.sort_unstable();
        let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
        let mut starts: Vec<usize> = (0..n).step_by(batch_size).collect();
        // fold a short tail into the previous batch so every batch can supply K neighbors
        if starts.len() > 1 && n - starts[starts.len() - 1] < batch_size {
            starts.pop();
        }
        for (b, &s) in starts.iter().enumerate() {
            let e = starts.get(b + 1).cloned().unwrap_or(n);
            let batch = &order[s..e];
            for &i in batch {
                sets[i].extend(batch.iter().filter(|&&j| j != i));
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Rectify, symmetrize, add self-loops and normalize.
pub fn postprocess_adjacency(a_sp: &SparseMatrix) -> Result<RefinedLayer> {
    if a_sp.n_rows != a_sp.n_cols {
        return Err(CoeError::Shape(format!(
            "adjacency is {}x{}, expected square",
            a_sp.n_rows, a_sp.n_cols
        )));
    }
    if a_sp.iter().any(|(_, _, v)| !v.is_finite()) {
        return Err(CoeError::NonFinite("adjacency entry".into()));
    }
    let n = a_sp.n_rows;
    // (i <= j) -> (relu a_ij, relu a_ji)
    let mut halves: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, j, v) in a_sp.iter() {
        let r = relu(v);
        if r == 0.0 {
            continue;
        }
        let e = halves.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
        if i == j {
            e.0 += r;
            e.1 += r;
        } else if i < j {
            e.0 += r;
        } else {
            e.1 += r;
        }
    }
    let mut tilde: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * halves.len() + n);
    let mut self_loop = vec![1.0; n];
    for (&(i, j), &(a, b)) in &halves {
        let s = (a + b) / 2.0;
        if i == j {
            self_loop[i] += s;
        } else {
            tilde.push((i, j, s));
            tilde.push((j, i, s));
        }
    }
    for (i, &v) in self_loop.iter().enumerate() {
        tilde.push((i, i, v));
    }
    let tilde = SparseMatrix::from_triplets(n, n, tilde);
    let degrees: Vec<f64> = (0..n).map(|i| tilde.row(i).map(|(_, v)| v).sum()).collect();
    let scaled = tilde
        .iter()
        .map(|(i, j, v)| (i, j, v / (degrees[i] * degrees[j]).sqrt()));
    let adjacency = if n <= DENSE_LIMIT {
        let mut a = Array2::zeros((n, n));
        for (i, j, v) in scaled {
            a[[i, j]] = v;
        }
        NormalizedAdjacency::Dense(a)
    } else {
        NormalizedAdjacency::Sparse(SparseMatrix::from_triplets(n, n, scaled))
    };
    Ok(RefinedLayer {
        adjacency,
        degrees: Some(degrees),
        k: None,
        source: String::new(),
    })
}

/// The learned matrix `Ã` implied by an input to [`postprocess_adjacency`].
pub fn tilde_from_input(a_sp: &SparseMatrix) -> Array2<f64> {
    let r = a_sp.to_dense().mapv(relu);
    let mut t = (&r + &r.t()) / 2.0;
    for i in 0..t.nrows() {
        t[[i, i]] += 1.0;
    }
    t
}

/// Full per-layer refinement: embed, kNN, post-process.
pub fn refine_layer(
    layer: &Layer,
    params: &LearnerParams,
    k: usize,
    mode: KnnMode,
) -> Result<RefinedLayer> {
    let h = attentive_embed(layer, params)?;
    let sp = knn_graph(&h, k, mode)?;
    let mut out = postprocess_adjacency(&sp)?;
    out.k = Some(k);
    out.source = layer.name.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn embed_single_isolated_node() {
        let l = Layer::new("a", 1, [], array![[1.0]]).unwrap();
        let h = attentive_embed(&l, &LearnerParams::ones(1, 1, 2)).unwrap();
        assert_eq!(h, array![[1.0]]);
    }

    #[test]
    fn embed_two_connected_nodes() {
        let l = Layer::new("a", 2, [(0, 1)], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let h = attentive_embed(&l, &LearnerParams::ones(2, 2, 1)).unwrap();
        assert_eq!(h, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn embed_without_structure_is_identity() {
        let mut l = Layer::new("a", 2, [(0, 1)], array![[1.0, -3.0], [0.0, 1.0]]).unwrap();
        l.has_structure = false;
        let h = attentive_embed(&l, &LearnerParams::ones(2, 2, 2)).unwrap();
        assert_eq!(h, l.features);
    }

    #[test]
    fn embed_rejects_bad_weight_shape() {
        let l = Layer::new("a", 2, [(0, 1)], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(attentive_embed(&l, &LearnerParams::ones(2, 3, 1)).is_err());
    }

    #[test]
    fn second_order_equals_first_order_twice() {
        let mut rng = rng_from_seed(8);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)];
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let l = Layer::new("a", 6, edges, x.clone()).unwrap();
        let mut w1 = Array2::ones((6, 3));
        w1[[2, 1]] = 0.3;
        let mut w2 = Array2::ones((6, 3));
        w2[[4, 0]] = -2.0;
        let p2 = LearnerParams { w1: w1.clone(), w2: w2.clone(), order: 2 };
        let got = attentive_embed(&l, &p2).unwrap();

        // oracle: dense operator built by hand, applied twice
        let a = l.dense_adjacency() + Array2::<f64>::eye(6);
        let d: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
        let op = Array2::from_shape_fn((6, 6), |(i, j)| a[[i, j]] / (d[i].sqrt() * d[j].sqrt()));
        let once = op.dot(&x);
        let twice = op.dot(&once);
        let want = ndarray::Zip::from(&twice)
            .and(&w1)
            .and(&w2)
            .map_collect(|&p, &a, &b| p.mul_add(a, 0.0).max(0.0) * b);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_three_points() {
        let h = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let sp = knn_graph(&h, 1, KnnMode::Exact).unwrap();
        assert_eq!(sp.get(0, 1), 1.0);
        assert_eq!(sp.get(1, 0), 1.0);
        // node 2 is orthogonal to both; tie goes to node 0
        assert_eq!(sp.row(2).collect::<Vec<_>>(), vec![(0, 0.0)]);
    }

    #[test]
    fn knn_full_is_dense_similarity() {
        let h = array![[1.0, 0.5], [0.2, 1.0], [-1.0, 0.3], [0.4, -0.9]];
        let sp = knn_graph(&h, 3, KnnMode::Exact).unwrap();
        let u = unit_rows(&h).unwrap();
        let s = u.dot(&u.t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { s[[i, j]] };
                assert_eq!(sp.get(i, j), want);
            }
        }
    }

    #[test]
    fn knn_rejects_zero_rows_and_large_k() {
        let h = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            knn_graph(&h, 1, KnnMode::Exact),
            Err(CoeError::DegenerateEmbedding(1))
        ));
        assert!(knn_graph(&array![[1.0], [2.0]], 2, KnnMode::Exact).is_err());
    }

    #[test]
    fn knn_matches_argsort_oracle() {
        let mut rng = rng_from_seed(21);
        let h = Array2::from_shape_fn((50, 6), |_| StandardNormal.sample(&mut rng));
        let sp = knn_graph(&h, 5, KnnMode::Exact).unwrap();
        for i in 0..50 {
            // brute force: cosine from scratch, full argsort
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| {
                    let dot: f64 = (0..6).map(|t| h[[i, t]] * h[[j, t]]).sum();
                    let ni: f64 = (0..6).map(|t| h[[i, t]].powi(2)).sum::<f64>().sqrt();
                    let nj: f64 = (0..6).map(|t| h[[j, t]].powi(2)).sum::<f64>().sqrt();
                    (dot / (ni * nj), j)
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut want: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            want.sort_unstable();
            let got: Vec<usize> = sp.row(i).map(|(j, _)| j).collect();
            assert_eq!(got, want, "row {i}");
        }
    }

    #[test]
    fn lsh_validates_batch_size() {
        let h = Array2::ones((10, 2));
        let mode = KnnMode::Lsh { batch_size: 3, num_hashes: 4, num_tables: 1, seed: 0 };
        assert!(knn_graph(&h, 3, mode).is_err());
    }

    #[test]
    fn postprocess_worked_example() {
        let a = SparseMatrix::from_dense(array![[0.0, -1.0], [2.0, 0.0]].view());
        let r = postprocess_adjacency(&a).unwrap();
        assert_eq!(r.adjacency.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn postprocess_of_zero_is_identity() {
        let a = SparseMatrix::from_triplets(3, 3, []);
        let r = postprocess_adjacency(&a).unwrap();
        assert_eq!(r.adjacency.to_dense(), Array2::<f64>::eye(3));
    }

    #[test]
    fn postprocess_random_spectral_radius() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let dense = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..2.0));
            let r = postprocess_adjacency(&SparseMatrix::from_dense(dense.view())).unwrap();
            let a = r.adjacency.to_dense();
            assert_eq!(a, a.t());
            assert!(a.iter().all(|&v| v >= 0.0));
            // power iteration oracle on a nonnegative symmetric matrix
            let mut v = ndarray::Array1::from_elem(5, 1.0);
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = a.dot(&v);
                lambda = w.dot(&w).sqrt() / v.dot(&v).sqrt();
                v = &w / w.dot(&w).sqrt();
            }
            assert!(lambda <= 1.0 + 1e-9, "spectral radius {lambda}");
        }
    }

    #[test]
    fn refined_tsv_round_trip() {
        let mut rng = rng_from_seed(4);
        let dense = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let r = postprocess_adjacency(&SparseMatrix::from_dense(dense.view())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.refined.tsv");
        r.save_tsv(&p).unwrap();
        let back = RefinedLayer::load_tsv(&p, "x").unwrap();
        assert_eq!(back.adjacency, r.adjacency);
    }

    #[test]
    fn sparse_and_dense_propagation_agree() {
        let mut rng = rng_from_seed(5);
        let dense = Array2::from_shape_fn((7, 7), |_| if rng.random::<f64>() < 0.4 { rng.random() } else { 0.0 });
        let x = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let sp = SparseMatrix::from_dense(dense.view());
        let a = NormalizedAdjacency::Sparse(sp).propagate(&x);
        let b = NormalizedAdjacency::Dense(dense).propagate(&x);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
