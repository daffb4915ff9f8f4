//! Multiplex networks: data model, dataset directories, synthetic generation,
//! node splits and edge perturbation.
//!
//! Adjacency is kept as a sorted list of undirected edges `(u, v)` with `u < v`.
//! Self-loops are never stored; they only appear inside normalization.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoeError, Result};
use crate::numeric::{derive_seed, rng_from_seed};

/// One relation type over the shared node set.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    edges: Vec<(usize, usize)>,
    pub features: Array2<f64>,
    /// Layers built from attributes alone carry no prior structure; the
    /// learner then passes features through unchanged.
    pub has_structure: bool,
}

impl Layer {
    /// Build a layer, validating edge indices and rejecting duplicates and self-loops.
    pub fn new(
        name: impl Into<String>,
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Array2<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(CoeError::Invalid(format!(
                    "layer {name}: edge ({a}, {b}) index out of range for N={num_nodes}"
                )));
            }
            if a == b {
                return Err(CoeError::Invalid(format!(
                    "layer {name}: self-loop on node {a}"
                )));
            }
            let e = (a.min(b), a.max(b));
            if !set.insert(e) {
                return Err(CoeError::Invalid(format!(
                    "layer {name}: duplicate edge ({}, {})",
                    e.0, e.1
                )));
            }
        }
        if features.nrows() != num_nodes {
            return Err(CoeError::Shape(format!(
                "layer {name}: features have {} rows, expected {num_nodes}",
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CoeError::Invalid(format!(
                "layer {name}: non-finite feature value"
            )));
        }
        Ok(Layer {
            name,
            edges: set.into_iter().collect(),
            features,
            has_structure: true,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Layer> {
        let mut l = Layer::new(self.name.clone(), self.num_nodes(), edges, self.features.clone())?;
        l.has_structure = self.has_structure;
        Ok(l)
    }

    /// Dense 0/1 adjacency without self-loops.
    pub fn dense_adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }
}

/// `V` layers over the same `N` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplexNetwork {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub layers: Vec<Layer>,
}

impl MultiplexNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| CoeError::Invalid("multiplex network needs at least one layer".into()))?;
        let n = first.num_nodes();
        let d = first.features.ncols();
        for l in &layers {
            if l.num_nodes() != n {
                return Err(CoeError::Invalid(format!(
                    "inconsistent node count: layer {} has {} nodes, expected {n}",
                    l.name,
                    l.num_nodes()
                )));
            }
            if l.features.ncols() != d {
                return Err(CoeError::Shape(format!(
                    "layer {} has feature dim {}, expected {d}",
                    l.name,
                    l.features.ncols()
                )));
            }
        }
        Ok(MultiplexNetwork {
            num_nodes: n,
            feature_dim: d,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabelSet {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(CoeError::Invalid(format!(
                "class index {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(LabelSet {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of the most frequent class among `idx`.
    pub fn majority_rate(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let mut counts = vec![0usize; self.num_classes];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        *counts.iter().max().unwrap() as f64 / idx.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    #[serde(rename = "val")]
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeSplit {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n {
                return Err(CoeError::Invalid(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(CoeError::Invalid(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

fn floor_fraction(fraction: f64, count: usize) -> usize {
    // absorbs representation error of decimal fractions such as 0.29 * 100
    (fraction * count as f64 + 1e-9).floor() as usize
}

/// Uniformly shuffled train/validation/test split; test takes the remainder.
pub fn split_nodes(n: usize, train: f64, val: f64, seed: u64) -> Result<NodeSplit> {
    if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
        return Err(CoeError::Invalid(format!(
            "split fractions ({train}, {val}) must be in [0,1] and sum to at most 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_train = floor_fraction(train, n);
    let n_val = floor_fraction(val, n).min(n - n_train);
    let mut s = NodeSplit {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    s.train.sort_unstable();
    s.validation.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

/// Controls for the SBM-style multiplex generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub num_layers: usize,
    /// Per-layer set of classes whose members are densely connected.
    pub informative: Vec<Vec<usize>>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_noise: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale reference dataset: two layers with complementary
    /// informative class sets.
    pub fn reference(seed: u64) -> Self {
        SyntheticSpec {
            num_nodes: 200,
            num_classes: 3,
            num_layers: 2,
            informative: vec![vec![0, 1], vec![2]],
            p_in: 0.1,
            p_out: 0.01,
            feature_noise: 1.0,
            feature_dim: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(CoeError::Invalid(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(CoeError::Invalid("feature noise must be >= 0".into()));
        }
        if self.num_layers == 0 || self.informative.len() != self.num_layers {
            return Err(CoeError::Invalid(format!(
                "need one informative class set per layer ({} sets for {} layers)",
                self.informative.len(),
                self.num_layers
            )));
        }
        for s in &self.informative {
            if s.is_empty() {
                return Err(CoeError::Invalid("informative class set is empty".into()));
            }
            if s.iter().any(|&c| c >= self.num_classes) {
                return Err(CoeError::Invalid("informative class out of range".into()));
            }
        }
        if self.num_classes == 0 || self.num_classes > self.num_nodes {
            return Err(CoeError::Invalid(format!(
                "num_classes {} must be in [1, N={}]",
                self.num_classes, self.num_nodes
            )));
        }
        if self.feature_dim < self.num_classes {
            return Err(CoeError::Invalid(format!(
                "feature_dim {} smaller than num_classes {}",
                self.feature_dim, self.num_classes
            )));
        }
        Ok(())
    }

    /// Edge probability between two nodes of the given classes on layer `v`.
    pub fn edge_probability(&self, v: usize, a: usize, b: usize) -> f64 {
        if a == b && self.informative[v].contains(&a) {
            self.p_in
        } else {
            self.p_out
        }
    }
}

/// Generate a multiplex network plus labels. Labels are assigned round-robin
/// and all layers share one feature matrix.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MultiplexNetwork, LabelSet)> {
    spec.validate()?;
    let n = spec.num_nodes;
    let c = spec.num_classes;
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();

    let mut frng = rng_from_seed(derive_seed(spec.seed, 0xFEA7));
    let mut features = Array2::<f64>::zeros((n, spec.feature_dim));
    let noise = if spec.feature_noise > 0.0 {
        Some(Normal::new(0.0, spec.feature_noise).expect("valid stddev"))
    } else {
        None
    };
    for i in 0..n {
        features[[i, labels[i]]] = 1.0;
        if let Some(dist) = &noise {
            for j in 0..spec.feature_dim {
                features[[i, j]] += dist.sample(&mut frng);
            }
        }
    }

    let mut layers = Vec::with_capacity(spec.num_layers);
    for v in 0..spec.num_layers {
        let mut rng = rng_from_seed(derive_seed(spec.seed, 1 + v as u64));
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let p = spec.edge_probability(v, labels[a], labels[b]);
                if p > 0.0 && rng.random::<f64>() < p {
                    edges.push((a, b));
                }
            }
        }
        layers.push(Layer::new(format!("layer{v}"), n, edges, features.clone())?);
    }
    Ok((MultiplexNetwork::new(layers)?, LabelSet::new(labels, c)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Add,
    Delete,
}

impl std::str::FromStr for PerturbMode {
    type Err = CoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(PerturbMode::Add),
            "delete" => Ok(PerturbMode::Delete),
            other => Err(CoeError::Invalid(format!("unknown perturbation mode {other}"))),
        }
    }
}

/// Randomly delete existing edges or insert absent ones, `⌊ratio·|E|⌋` of them.
pub fn perturb_edges(layer: &Layer, ratio: f64, mode: PerturbMode, seed: u64) -> Result<Layer> {
    if !(0.0..=0.9 + 1e-12).contains(&ratio) {
        return Err(CoeError::Invalid(format!(
            "perturbation ratio {ratio} outside [0, 0.9]"
        )));
    }
    let m = layer.num_edges();
    let count = floor_fraction(ratio, m);
    if count == 0 {
        return Ok(layer.clone());
    }
    let mut rng = rng_from_seed(seed);
    match mode {
        PerturbMode::Delete => {
            let drop: BTreeSet<usize> = index::sample(&mut rng, m, count).into_iter().collect();
            let kept = layer
                .edges()
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, e)| *e)
                .collect();
            layer.with_edges(kept)
        }
        PerturbMode::Add => {
            let n = layer.num_nodes();
            let present: BTreeSet<(usize, usize)> = layer.edges().iter().cloned().collect();
            let absent: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
                .filter(|e| !present.contains(e))
                .collect();
            if absent.len() < count {
                return Err(CoeError::Invalid(format!(
                    "cannot add {count} edges: only {} absent pairs",
                    absent.len()
                )));
            }
            let mut edges = layer.edges().to_vec();
            edges.extend(
                index::sample(&mut rng, absent.len(), count)
                    .into_iter()
                    .map(|i| absent[i]),
            );
            layer.with_edges(edges)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_classes: usize,
    feature_dim: usize,
    layers: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CoeError::MissingFile(path.to_path_buf())
        } else {
            CoeError::io(path, e)
        }
    })?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CoeError::io(path, e))
}

fn parse_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for (ln, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(CoeError::parse(path, ln + 1, "expected src TAB dst"));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CoeError::parse(path, ln + 1, format!("bad node index {s:?}")))
        };
        let (a, b) = (parse(cols[0])?, parse(cols[1])?);
        if cols.len() == 3 && cols[2].trim() != "1" {
            return Err(CoeError::parse(
                path,
                ln + 1,
                format!("non-binary adjacency entry {:?}", cols[2]),
            ));
        }
        if a >= n || b >= n {
            return Err(CoeError::parse(
                path,
                ln + 1,
                format!("index out of range: ({a}, {b}) with N={n}"),
            ));
        }
        if a == b {
            return Err(CoeError::parse(path, ln + 1, "self-loop"));
        }
        let e = (a.min(b), a.max(b));
        if !seen.insert(e) {
            return Err(CoeError::parse(path, ln + 1, "duplicate edge"));
        }
        edges.push(e);
    }
    Ok(edges)
}

fn parse_features(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let lines: Vec<String> = read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.len() != n {
        return Err(CoeError::parse(
            path,
            lines.len(),
            format!("inconsistent node count: {} feature rows, expected {n}", lines.len()),
        ));
    }
    let mut x = Array2::zeros((n, d));
    for (i, line) in lines.iter().enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != d {
            return Err(CoeError::parse(
                path,
                i + 1,
                format!("expected {d} values, found {}", vals.len()),
            ));
        }
        for (j, v) in vals.iter().enumerate() {
            let f: f64 = v
                .trim()
                .parse()
                .map_err(|_| CoeError::parse(path, i + 1, format!("bad decimal {v:?}")))?;
            if !f.is_finite() {
                return Err(CoeError::parse(path, i + 1, "non-finite feature"));
            }
            x[[i, j]] = f;
        }
    }
    Ok(x)
}

fn parse_labels(path: &Path, n: usize, c: usize) -> Result<Vec<usize>> {
    let mut labels = vec![None; n];
    for (ln, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(CoeError::parse(path, ln + 1, "expected node TAB class"));
        }
        let node: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| CoeError::parse(path, ln + 1, "bad node index"))?;
        let class: usize = cols[1]
            .trim()
            .parse()
            .map_err(|_| CoeError::parse(path, ln + 1, "bad class index"))?;
        if node >= n {
            return Err(CoeError::parse(path, ln + 1, format!("index out of range: node {node}")));
        }
        if class >= c {
            return Err(CoeError::parse(
                path,
                ln + 1,
                format!("class index {class} >= num_classes {c}"),
            ));
        }
        labels[node] = Some(class);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| CoeError::parse(path, 0, format!("node {i} has no label"))))
        .collect()
}

/// Read a dataset directory (`meta.json`, per-layer edge and feature files,
/// `labels.tsv`, optional `split.json`).
pub fn load_multiplex(root: &Path) -> Result<(MultiplexNetwork, LabelSet, Option<NodeSplit>)> {
    let meta_path = root.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CoeError::MissingFile(meta_path.clone())
        } else {
            CoeError::io(&meta_path, e)
        }
    })?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| CoeError::json(&meta_path, e))?;
    let n = meta.num_nodes;

    let mut layers = Vec::new();
    for name in &meta.layers {
        let epath = root.join(format!("{name}.edges.tsv"));
        let fpath = root.join(format!("{name}.features.csv"));
        let edges = parse_edges(&epath, n)?;
        let feats = parse_features(&fpath, n, meta.feature_dim)?;
        layers.push(Layer::new(name.clone(), n, edges, feats)?);
    }
    let net = MultiplexNetwork::new(layers)?;
    let labels = LabelSet::new(
        parse_labels(&root.join("labels.tsv"), n, meta.num_classes)?,
        meta.num_classes,
    )?;

    let split_path = root.join("split.json");
    let split = if split_path.exists() {
        let text = fs::read_to_string(&split_path).map_err(|e| CoeError::io(&split_path, e))?;
        let s: NodeSplit = serde_json::from_str(&text).map_err(|e| CoeError::json(&split_path, e))?;
        s.validate(n)?;
        Some(s)
    } else {
        None
    };
    Ok((net, labels, split))
}

fn create(path: PathBuf) -> Result<BufWriter<fs::File>> {
    fs::File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CoeError::io(path, e))
}

/// Write a dataset directory readable by [`load_multiplex`].
pub fn save_multiplex(
    root: &Path,
    net: &MultiplexNetwork,
    labels: &LabelSet,
    split: Option<&NodeSplit>,
) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| CoeError::io(root, e))?;
    let meta = Meta {
        num_nodes: net.num_nodes,
        num_classes: labels.num_classes,
        feature_dim: net.feature_dim,
        layers: net.layers.iter().map(|l| l.name.clone()).collect(),
    };
    let meta_path = root.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| CoeError::json(&meta_path, e))?;
    fs::write(&meta_path, text).map_err(|e| CoeError::io(&meta_path, e))?;

    for layer in &net.layers {
        let epath = root.join(format!("{}.edges.tsv", layer.name));
        let mut w = create(epath.clone())?;
        for &(a, b) in layer.edges() {
            writeln!(w, "{a}\t{b}").map_err(|e| CoeError::io(&epath, e))?;
        }
        w.flush().map_err(|e| CoeError::io(&epath, e))?;

        let fpath = root.join(format!("{}.features.csv", layer.name));
        let mut w = create(fpath.clone())?;
        for row in layer.features.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| CoeError::io(&fpath, e))?;
        }
        w.flush().map_err(|e| CoeError::io(&fpath, e))?;
    }

    let lpath = root.join("labels.tsv");
    let mut w = create(lpath.clone())?;
    for (i, y) in labels.labels.iter().enumerate() {
        writeln!(w, "{i}\t{y}").map_err(|e| CoeError::io(&lpath, e))?;
    }
    w.flush().map_err(|e| CoeError::io(&lpath, e))?;

    if let Some(s) = split {
        let spath = root.join("split.json");
        let text = serde_json::to_string(s).map_err(|e| CoeError::json(&spath, e))?;
        fs::write(&spath, text).map_err(|e| CoeError::io(&spath, e))?;
    }
    Ok(())
}
