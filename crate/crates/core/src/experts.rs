//! Two-level experts: one per refined layer, one per fused pair of layers and
//! one on the graph fused from all layers, trained jointly with
//! cross-entropy and InfoNCE coupling terms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis, Zip};
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use crate::fusion::OpinionBatch;

use crate::data::{LabelSet, NodeSplit};
use crate::encoders::{
    classify, cross_entropy, gcn_backward, gcn_forward, gcn_forward_cached, head_backward, load_params, save_params,
    ClassifierHead, EncoderParams, GcnCache, ParamStore, TensorRecord,
};
use crate::error::{CoeError, Result};
use crate::mi::{info_nce, CriticParams, MiBatch};
use crate::numeric::{derive_seed, hconcat, relu, relu_grad, rng_from_seed, Adam};
use crate::refinery::{knn_graph, postprocess_adjacency, KnnMode, RefinedLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertLevel {
    Low,
    High,
}

/// The graph an expert is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeField {
    Layer(usize),
    Pair(usize, usize),
    Total,
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub id: usize,
    pub level: ExpertLevel,
    pub field: KnowledgeField,
    pub graph: RefinedLayer,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub trained: bool,
}

/// Elementwise learner `relu(C ⊙ W1) ⊙ W2` over concatenated embeddings,
/// followed by kNN sparsification.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLearner {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    /// Low-level expert ids whose embeddings are concatenated, in order.
    pub inputs: Vec<usize>,
    pub k: usize,
    pub mode: KnnMode,
}

impl FusionLearner {
    /// All-ones weights.
    pub fn ones(num_nodes: usize, width: usize, inputs: Vec<usize>, k: usize, mode: KnnMode) -> Self {
        FusionLearner {
            w1: Array2::ones((num_nodes, width)),
            w2: Array2::ones((num_nodes, width)),
            inputs,
            k,
            mode,
        }
    }

    pub fn embed(&self, c: &Array2<f64>) -> Result<Array2<f64>> {
        if c.dim() != self.w1.dim() {
            return Err(CoeError::Shape(format!(
                "fusion input {:?} vs learner {:?}",
                c.dim(),
                self.w1.dim()
            )));
        }
        Ok(Zip::from(c)
            .and(&self.w1)
            .and(&self.w2)
            .map_collect(|&x, &a, &b| relu(x * a) * b))
    }

    /// `(dW1, dW2)` given `dL/dH`.
    pub fn backward(&self, c: &Array2<f64>, dh: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut d1 = Array2::zeros(c.dim());
        let mut d2 = Array2::zeros(c.dim());
        Zip::from(&mut d1)
            .and(&mut d2)
            .and(c)
            .and(&self.w1)
            .and(&self.w2)
            .and(dh)
            .for_each(|g1, g2, &x, &a, &b, &g| {
                let pre = x * a;
                *g2 = g * relu(pre);
                *g1 = g * b * relu_grad(pre) * x;
            });
        (d1, d2)
    }
}

/// Concatenate the input embeddings, apply the learner, then kNN and post-process.
pub fn build_fused_graph(parts: &[&Array2<f64>], learner: &FusionLearner) -> Result<RefinedLayer> {
    if parts.is_empty() {
        return Err(CoeError::Invalid("fusion needs at least one embedding".into()));
    }
    if parts.iter().any(|p| p.nrows() != parts[0].nrows()) {
        return Err(CoeError::Shape("fused embeddings are not aligned on nodes".into()));
    }
    let h = learner.embed(&hconcat(parts))?;
    let sp = knn_graph(&h, learner.k, learner.mode)?;
    let mut out = postprocess_adjacency(&sp)?;
    out.k = Some(learner.k);
    out.source = format!("fused{:?}", learner.inputs);
    Ok(out)
}

/// All experts in roster order: the `V` low-level experts, then one per
/// pair `(i, j)` with `i < j` in lexicographic order, then the all-layer expert.
#[derive(Debug, Clone)]
pub struct ExpertRoster {
    pub experts: Vec<Expert>,
    /// Keyed by the id of the high-level expert the learner feeds.
    pub learners: BTreeMap<usize, FusionLearner>,
    /// Input features of each low-level expert.
    pub features: Vec<Array2<f64>>,
    pub num_classes: usize,
}

/// `V + V(V−1)/2 + 1`.
pub fn roster_size(num_layers: usize) -> usize {
    num_layers + num_layers * num_layers.saturating_sub(1) / 2 + 1
}

/// Knowledge fields in roster order.
pub fn roster_fields(num_layers: usize, high_level: bool) -> Vec<KnowledgeField> {
    let mut out: Vec<KnowledgeField> = (0..num_layers).map(KnowledgeField::Layer).collect();
    if high_level {
        for i in 0..num_layers {
            for j in (i + 1)..num_layers {
                out.push(KnowledgeField::Pair(i, j));
            }
        }
        out.push(KnowledgeField::Total);
    }
    out
}

impl ExpertRoster {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.features.len()
    }

    /// Embedding of every expert, computed from the current parameters and graphs.
    pub fn embeddings(&self) -> Result<Vec<Array2<f64>>> {
        let mut out: Vec<Array2<f64>> = Vec::with_capacity(self.len());
        for e in &self.experts {
            let z = match e.level {
                ExpertLevel::Low => {
                    let v = match e.field {
                        KnowledgeField::Layer(v) => v,
                        _ => unreachable!("low-level experts hold a single layer"),
                    };
                    gcn_forward(&e.graph.adjacency, &self.features[v], &e.encoder)?
                }
                ExpertLevel::High => {
                    let learner = &self.learners[&e.id];
                    let parts: Vec<&Array2<f64>> = learner.inputs.iter().map(|&i| &out[i]).collect();
                    let h = learner.embed(&hconcat(&parts))?;
                    gcn_forward(&e.graph.adjacency, &h, &e.encoder)?
                }
            };
            out.push(z);
        }
        Ok(out)
    }

    /// Class probabilities of every expert for every node.
    pub fn probabilities(&self) -> Result<Vec<Array2<f64>>> {
        if let Some(e) = self.experts.iter().find(|e| !e.trained) {
            return Err(CoeError::Invalid(format!("expert {} has not been trained", e.id)));
        }
        self.embeddings()?
            .iter()
            .zip(&self.experts)
            .map(|(z, e)| classify(z, &e.head))
            .collect()
    }
}

/// Stacked opinions in roster order for the given nodes; labels attached when supplied.
pub fn expert_opinions(roster: &ExpertRoster, nodes: &[usize], labels: Option<&LabelSet>) -> Result<OpinionBatch> {
    let order: Vec<usize> = (0..roster.len()).collect();
    expert_opinions_ordered(roster, nodes, labels, &order)
}

/// As [`expert_opinions`] with blocks laid out in `order`.
pub fn expert_opinions_ordered(
    roster: &ExpertRoster,
    nodes: &[usize],
    labels: Option<&LabelSet>,
    order: &[usize],
) -> Result<OpinionBatch> {
    let probs = roster.probabilities()?;
    opinions_from_probabilities(&probs, nodes, labels, order, roster.num_classes)
}

/// Assemble opinions from per-expert probability matrices.
pub fn opinions_from_probabilities(
    probs: &[Array2<f64>],
    nodes: &[usize],
    labels: Option<&LabelSet>,
    order: &[usize],
    num_classes: usize,
) -> Result<OpinionBatch> {
    if let Some(&bad) = order.iter().find(|&&e| e >= probs.len()) {
        return Err(CoeError::Invalid(format!("expert {bad} not in roster")));
    }
    let blocks: Vec<Array2<f64>> = order.iter().map(|&e| probs[e].select(Axis(0), nodes)).collect();
    let views: Vec<&Array2<f64>> = blocks.iter().collect();
    let g = hconcat(&views);
    let y = labels.map(|l| nodes.iter().map(|&i| l.labels[i]).collect());
    let mut batch = OpinionBatch::new(g, y, num_classes)?;
    batch.nodes = nodes.to_vec();
    Ok(batch)
}

/// Stage-1 settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub temperature: f64,
    /// Neighbors for fused graphs.
    pub knn_k: usize,
    pub knn_mode: KnnMode,
    pub refresh_every: usize,
    /// Build pairwise and all-layer experts.
    pub high_level: bool,
    /// Cross-entropy heads on the high-level experts.
    pub high_level_ce: bool,
    pub mutual_information: bool,
    /// Nodes per InfoNCE batch; all nodes when unset.
    pub mi_batch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            lr: 0.001,
            hidden_dim: 128,
            embed_dim: 64,
            layers: 2,
            temperature: 0.2,
            knn_k: 15,
            knn_mode: KnnMode::Exact,
            refresh_every: 10,
            high_level: true,
            high_level_ce: true,
            mutual_information: true,
            mi_batch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(CoeError::Invalid("encoder dimensions and depth must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(CoeError::Invalid("learning rate and temperature must be positive".into()));
        }
        if self.refresh_every == 0 {
            return Err(CoeError::Invalid("refresh_every must be positive".into()));
        }
        if matches!(self.mi_batch, Some(b) if b < 2) {
            return Err(CoeError::Invalid("mi_batch must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-epoch objective and its parts, measured before each update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss: Vec<f64>,
    pub classification: Vec<f64>,
    pub mutual_information: Vec<f64>,
}

/// Pairs of expert ids coupled by an InfoNCE term.
fn mi_pairs(fields: &[KnowledgeField]) -> Vec<(usize, usize)> {
    let id = |f: KnowledgeField| fields.iter().position(|&x| x == f);
    let v = fields.iter().filter(|f| matches!(f, KnowledgeField::Layer(_))).count();
    let mut out = Vec::new();
    for i in 0..v {
        for j in (i + 1)..v {
            out.push((i, j));
        }
    }
    if let Some(tot) = id(KnowledgeField::Total) {
        for i in 0..v {
            out.push((i, tot));
        }
    }
    for i in 0..v {
        for j in 0..v {
            if i == j {
                continue;
            }
            if let Some(p) = id(KnowledgeField::Pair(i.min(j), i.max(j))) {
                out.push((i, p));
            }
        }
    }
    out
}

fn update_matrix(adam: &mut Adam, slot: &mut usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
    let g = grad.as_standard_layout();
    adam.update(*slot, param.as_slice_mut().expect("standard layout"), g.as_slice().expect("standard layout"));
    *slot += 1;
}

fn update_vector(adam: &mut Adam, slot: &mut usize, param: &mut ndarray::Array1<f64>, grad: &ndarray::Array1<f64>) {
    adam.update(*slot, param.as_slice_mut().expect("contiguous"), &grad.to_vec());
    *slot += 1;
}

/// Train all experts, fusion learners and the shared critic.
pub fn train_experts(
    layers: &[RefinedLayer],
    features: &[Array2<f64>],
    labels: &LabelSet,
    split: &NodeSplit,
    cfg: &TrainConfig,
) -> Result<(ExpertRoster, TrainTrace)> {
    cfg.validate()?;
    if layers.is_empty() || layers.len() != features.len() {
        return Err(CoeError::Invalid(format!(
            "need one feature matrix per layer (≥1), got {} layers and {} matrices",
            layers.len(),
            features.len()
        )));
    }
    if split.train.is_empty() {
        return Err(CoeError::Invalid("training split is empty".into()));
    }
    let n = labels.len();
    split.validate(n)?;
    for (l, x) in layers.iter().zip(features) {
        if l.num_nodes() != n || x.nrows() != n {
            return Err(CoeError::Shape("layers, features and labels disagree on N".into()));
        }
    }
    let v = layers.len();
    let c = labels.num_classes;
    let d = cfg.embed_dim;
    let fields = roster_fields(v, cfg.high_level);
    let pairs = if cfg.mutual_information { mi_pairs(&fields) } else { Vec::new() };

    let mut experts = Vec::with_capacity(fields.len());
    let mut learners = BTreeMap::new();
    for (id, &field) in fields.iter().enumerate() {
        let (level, graph, d_in) = match field {
            KnowledgeField::Layer(l) => (ExpertLevel::Low, layers[l].clone(), features[l].ncols()),
            KnowledgeField::Pair(i, j) => {
                learners.insert(id, FusionLearner::ones(n, 2 * d, vec![i, j], cfg.knn_k, cfg.knn_mode));
                (ExpertLevel::High, layers[i].clone(), 2 * d)
            }
            KnowledgeField::Total => {
                learners.insert(id, FusionLearner::ones(n, v * d, (0..v).collect(), cfg.knn_k, cfg.knn_mode));
                (ExpertLevel::High, layers[0].clone(), v * d)
            }
        };
        experts.push(Expert {
            id,
            level,
            field,
            graph,
            encoder: EncoderParams::init(d_in, cfg.hidden_dim, d, cfg.layers, derive_seed(cfg.seed, 100 + id as u64)),
            head: ClassifierHead::zeros(d, c),
            trained: false,
        });
    }
    let mut critic = CriticParams::init(d, cfg.temperature, derive_seed(cfg.seed, 7));
    let mut adam = Adam::new(cfg.lr);
    let mut trace = TrainTrace::default();
    let k = experts.len();

    for epoch in 0..cfg.epochs {
        // forward
        let mut inputs: Vec<Option<Array2<f64>>> = vec![None; k];
        let mut caches: Vec<GcnCache> = Vec::with_capacity(k);
        for id in 0..k {
            let cache = match experts[id].field {
                KnowledgeField::Layer(l) => gcn_forward_cached(&experts[id].graph.adjacency, &features[l], &experts[id].encoder)?,
                _ => {
                    let learner = &learners[&id];
                    let parts: Vec<&Array2<f64>> = learner.inputs.iter().map(|&i| &caches[i].output).collect();
                    let cat = hconcat(&parts);
                    if epoch % cfg.refresh_every == 0 {
                        let mut g = build_fused_graph(&parts, learner)?;
                        g.source = format!("{:?}", experts[id].field);
                        experts[id].graph = g;
                    }
                    let h = learner.embed(&cat)?;
                    let cache = gcn_forward_cached(&experts[id].graph.adjacency, &h, &experts[id].encoder)?;
                    inputs[id] = Some(cat);
                    cache
                }
            };
            caches.push(cache);
        }

        // losses
        let mut dz: Vec<Array2<f64>> = caches.iter().map(|c| Array2::zeros(c.output.dim())).collect();
        let mut head_grads = Vec::with_capacity(k);
        let mut ce_total = 0.0;
        for id in 0..k {
            let supervised = experts[id].level == ExpertLevel::Low || cfg.high_level_ce;
            if !supervised {
                head_grads.push(None);
                continue;
            }
            let probs = classify(&caches[id].output, &experts[id].head)?;
            let (loss, dlogits) = cross_entropy(&probs, &labels.labels, &split.train)?;
            ce_total += loss;
            let (gw, gb, gz) = head_backward(&caches[id].output, &experts[id].head, &dlogits);
            dz[id] += &gz;
            head_grads.push(Some((gw, gb)));
        }
        let mut mi_total = 0.0;
        let mut critic_w = Array2::zeros(critic.weight.dim());
        let mut critic_b = ndarray::Array1::zeros(critic.bias.len());
        if !pairs.is_empty() {
            let batch = match cfg.mi_batch {
                Some(b) if b < n => {
                    let mut idx = index::sample(&mut rng_from_seed(derive_seed(cfg.seed, 1_000_000 + epoch as u64)), n, b).into_vec();
                    idx.sort_unstable();
                    MiBatch { indices: idx }
                }
                _ => MiBatch::full(n),
            };
            for &(a, b) in &pairs {
                let r = info_nce(&caches[a].output, &caches[b].output, &critic, &batch)?;
                mi_total += r.value;
                dz[a] -= &r.grad_a;
                dz[b] -= &r.grad_b;
                critic_w -= &r.grad_weight;
                critic_b -= &r.grad_bias;
            }
        }
        let loss = ce_total - mi_total;
        if !loss.is_finite() {
            return Err(CoeError::Divergence(format!(
                "Stage-1 loss non-finite at epoch {epoch} (last finite: {:?})",
                trace.loss.last()
            )));
        }
        trace.loss.push(loss);
        trace.classification.push(ce_total);
        trace.mutual_information.push(mi_total);

        // backward + update
        adam.tick();
        let mut slot = 0;
        for id in 0..k {
            let e = &mut experts[id];
            let (enc_grads, dinput) = gcn_backward(&e.graph.adjacency, &caches[id], &e.encoder, &dz[id]);
            for (w, g) in e.encoder.weights.iter_mut().zip(&enc_grads) {
                update_matrix(&mut adam, &mut slot, w, g);
            }
            if let Some((gw, gb)) = &head_grads[id] {
                update_matrix(&mut adam, &mut slot, &mut e.head.weight, gw);
                update_vector(&mut adam, &mut slot, &mut e.head.bias, gb);
            } else {
                slot += 2;
            }
            if let Some(cat) = &inputs[id] {
                let learner = learners.get_mut(&id).expect("high-level expert has a learner");
                let (g1, g2) = learner.backward(cat, &dinput);
                update_matrix(&mut adam, &mut slot, &mut learner.w1, &g1);
                update_matrix(&mut adam, &mut slot, &mut learner.w2, &g2);
            }
        }
        if !pairs.is_empty() {
            update_matrix(&mut adam, &mut slot, &mut critic.weight, &critic_w);
            update_vector(&mut adam, &mut slot, &mut critic.bias, &critic_b);
        }
    }
    for e in &mut experts {
        e.trained = true;
    }
    Ok((
        ExpertRoster {
            experts,
            learners,
            features: features.to_vec(),
            num_classes: c,
        },
        trace,
    ))
}

/// Train one supervised expert on an arbitrary graph.
pub fn train_single_expert(
    graph: RefinedLayer,
    features: &Array2<f64>,
    labels: &LabelSet,
    split: &NodeSplit,
    cfg: &TrainConfig,
) -> Result<(Expert, Vec<f64>)> {
    let solo = TrainConfig {
        high_level: false,
        mutual_information: false,
        ..cfg.clone()
    };
    let (roster, trace) = train_experts(&[graph], std::slice::from_ref(features), labels, split, &solo)?;
    Ok((roster.experts.into_iter().next().expect("one expert"), trace.loss))
}

/// Accuracy of one expert's argmax over the given nodes.
pub fn expert_accuracy(probs: &Array2<f64>, labels: &LabelSet, nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes
        .iter()
        .filter(|&&i| crate::numeric::argmax(probs.row(i)) == labels.labels[i])
        .count();
    hits as f64 / nodes.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RosterEntry {
    id: usize,
    level: ExpertLevel,
    field: KnowledgeField,
    graph_source: String,
    k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RosterFile {
    num_classes: usize,
    num_layers: usize,
    experts: Vec<RosterEntry>,
    knn_mode: Option<KnnMode>,
}

/// Write `roster.json` plus `expert_<id>/params.json` and `expert_<id>/graph.tsv`.
pub fn save_roster(dir: &Path, roster: &ExpertRoster) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoeError::io(dir, e))?;
    let file = RosterFile {
        num_classes: roster.num_classes,
        num_layers: roster.num_layers(),
        experts: roster
            .experts
            .iter()
            .map(|e| RosterEntry {
                id: e.id,
                level: e.level,
                field: e.field,
                graph_source: e.graph.source.clone(),
                k: e.graph.k,
            })
            .collect(),
        knn_mode: roster.learners.values().next().map(|l| l.mode),
    };
    let path = dir.join("roster.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| CoeError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| CoeError::io(&path, e))?;
    for e in &roster.experts {
        let sub = dir.join(format!("expert_{}", e.id));
        fs::create_dir_all(&sub).map_err(|err| CoeError::io(&sub, err))?;
        let mut store = ParamStore::new();
        e.encoder.export("encoder", &mut store);
        e.head.export("head", &mut store);
        if let Some(l) = roster.learners.get(&e.id) {
            store.insert("learner.w1".into(), TensorRecord::from_matrix(&l.w1));
            store.insert("learner.w2".into(), TensorRecord::from_matrix(&l.w2));
        }
        save_params(&sub.join("params.json"), &store)?;
        e.graph.save_tsv(&sub.join("graph.tsv"))?;
    }
    Ok(())
}

/// Inverse of [`save_roster`]; `features` are the low-level expert inputs.
pub fn load_roster(dir: &Path, features: Vec<Array2<f64>>) -> Result<ExpertRoster> {
    let path = dir.join("roster.json");
    if !path.exists() {
        return Err(CoeError::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| CoeError::io(&path, e))?;
    let file: RosterFile = serde_json::from_str(&text).map_err(|e| CoeError::json(&path, e))?;
    if file.num_layers != features.len() {
        return Err(CoeError::Invalid(format!(
            "roster has {} layers but {} feature matrices were given",
            file.num_layers,
            features.len()
        )));
    }
    let mut experts = Vec::new();
    let mut learners = BTreeMap::new();
    for entry in file.experts {
        let sub = dir.join(format!("expert_{}", entry.id));
        let store = load_params(&sub.join("params.json"))?;
        let mut graph = RefinedLayer::load_tsv(&sub.join("graph.tsv"), entry.graph_source)?;
        graph.k = entry.k;
        if entry.level == ExpertLevel::High {
            let get = |k: &str| {
                store
                    .get(k)
                    .ok_or_else(|| CoeError::Invalid(format!("missing {k} for expert {}", entry.id)))
            };
            let inputs = match entry.field {
                KnowledgeField::Pair(i, j) => vec![i, j],
                _ => (0..file.num_layers).collect(),
            };
            learners.insert(
                entry.id,
                FusionLearner {
                    w1: get("learner.w1")?.to_matrix()?,
                    w2: get("learner.w2")?.to_matrix()?,
                    inputs,
                    k: entry.k.unwrap_or(1),
                    mode: file.knn_mode.unwrap_or(KnnMode::Exact),
                },
            );
        }
        experts.push(Expert {
            id: entry.id,
            level: entry.level,
            field: entry.field,
            graph,
            encoder: EncoderParams::import("encoder", &store, 0)?,
            head: ClassifierHead::import("head", &store)?,
            trained: true,
        });
    }
    Ok(ExpertRoster {
        experts,
        learners,
        features,
        num_classes: file.num_classes,
    })
}
