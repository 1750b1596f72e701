//! Graph attention classifier for one atlas.
//!
//! Each layer runs `K` attention heads. Head `k` projects the node features
//! with `W^k`, scores every edge `(i, j)` of the neighbour mask as
//! `LeakyReLU(a_src·W h_i + a_dst·W h_j)`, normalises the scores with a
//! softmax over `N(i)` and aggregates the projected neighbours. Heads are
//! concatenated or averaged, then passed through LeakyReLU. Node embeddings
//! of the last layer are averaged into a graph embedding, and a dense layer
//! with a softmax gives the class probabilities `[P(negative), P(positive)]`.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Neighborhood, Tape, Tensor, Var};
use crate::dataset::Label;
use crate::graphbuild::FcnGraph;
use crate::seed;

#[derive(Debug, Error)]
pub enum GatError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("graph has {found} input features per node, model expects {expected}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training split lacks class {0}")]
    MissingClass(Label),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GatError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMerge {
    Concat,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub layer_count: usize,
    pub hidden_units: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Per-layer merge; empty means concat everywhere except the last layer.
    pub head_merge: Vec<HeadMerge>,
    /// Multiplies raw attention scores by the adjacency weight of the edge.
    pub edge_weighted_attention: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            layer_count: 3,
            hidden_units: 64,
            heads: 4,
            leaky_slope: 0.2,
            dropout: 0.5,
            head_merge: Vec::new(),
            edge_weighted_attention: false,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count < 1 || self.hidden_units < 1 || self.heads < 1 {
            return Err(GatError::Config(
                "layer_count, hidden_units and heads must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GatError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.head_merge.is_empty() && self.head_merge.len() != self.layer_count {
            return Err(GatError::Config(format!(
                "head_merge lists {} layers, layer_count is {}",
                self.head_merge.len(),
                self.layer_count
            )));
        }
        Ok(())
    }

    pub fn merge_for(&self, layer: usize) -> HeadMerge {
        match self.head_merge.get(layer) {
            Some(m) => *m,
            None if layer + 1 == self.layer_count => HeadMerge::Average,
            None => HeadMerge::Concat,
        }
    }

    fn output_dim(&self, layer: usize) -> usize {
        match self.merge_for(layer) {
            HeadMerge::Concat => self.heads * self.hidden_units,
            HeadMerge::Average => self.hidden_units,
        }
    }

    fn input_dim(&self, layer: usize, features: usize) -> usize {
        if layer == 0 {
            features
        } else {
            self.output_dim(layer - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 300,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GatError::Config(msg.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience exceeds max_epochs");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and epsilon > 0");
        }
        Ok(())
    }
}

/// Model input: node features plus the attention mask.
#[derive(Debug, Clone)]
pub struct GraphInput {
    /// `n × f`, row-major.
    pub features: Tensor,
    pub mask: Arc<Neighborhood>,
    /// Adjacency weight of every mask edge, in mask order.
    pub edge_weights: Tensor,
}

impl GraphInput {
    pub fn new(features: &Array2<f64>, neighbor_lists: &[Vec<usize>], adjacency: &Array2<f64>) -> Self {
        let (n, f) = features.dim();
        assert_eq!(neighbor_lists.len(), n, "one neighbour list per node");
        assert!(
            neighbor_lists.iter().all(|l| !l.is_empty()),
            "every node needs at least its self-loop"
        );
        let mask = Neighborhood::from_lists(neighbor_lists);
        let weights: Vec<f64> = (0..n)
            .flat_map(|i| mask.row(i).iter().map(move |&j| adjacency[[i, j]]).collect::<Vec<_>>())
            .collect();
        let e = weights.len();
        Self {
            features: Tensor::new(vec![n, f], features.iter().copied().collect()).expect("shape"),
            mask: Arc::new(mask),
            edge_weights: Tensor::new(vec![e], weights).expect("shape"),
        }
    }

    pub fn from_graph(graph: &FcnGraph) -> Self {
        Self::new(&graph.node_features, &graph.neighbor_lists, &graph.adjacency)
    }

    pub fn node_count(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub graph: GraphInput,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatModel {
    pub atlas: String,
    pub input_dim: usize,
    pub config: GatConfig,
    /// Layer-major `W`, `a` pairs per head, then `fc.w` and `fc.b`.
    pub params: Vec<ParamTensor>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

impl GatModel {
    pub fn new(atlas: impl Into<String>, input_dim: usize, config: GatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(GatError::Config("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_units;
        let mut params = Vec::new();
        for l in 0..config.layer_count {
            let fan_in = config.input_dim(l, input_dim);
            for k in 0..config.heads {
                params.push(ParamTensor {
                    name: format!("layer{l}.head{k}.w"),
                    shape: vec![fan_in, h],
                    data: glorot(&mut rng, fan_in, h),
                });
                params.push(ParamTensor {
                    name: format!("layer{l}.head{k}.a"),
                    shape: vec![2 * h],
                    data: glorot(&mut rng, 2 * h, 1),
                });
            }
        }
        let last = config.output_dim(config.layer_count - 1);
        params.push(ParamTensor {
            name: "fc.w".into(),
            shape: vec![last, 2],
            data: glorot(&mut rng, last, 2),
        });
        params.push(ParamTensor {
            name: "fc.b".into(),
            shape: vec![2],
            data: vec![0.0; 2],
        });
        Ok(Self {
            atlas: atlas.into(),
            input_dim,
            config,
            params,
        })
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| &p.data).map(|x| x * x).sum()
    }

    fn check_input(&self, graph: &GraphInput) -> Result<()> {
        if graph.feature_dim() != self.input_dim {
            return Err(GatError::FeatureMismatch {
                expected: self.input_dim,
                found: graph.feature_dim(),
            });
        }
        Ok(())
    }

    fn leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = Tensor::new(p.shape.clone(), p.data.clone())
                    .expect("parameter shapes are consistent")
                    .with_requires_grad(requires_grad);
                tape.leaf(t)
            })
            .collect()
    }

    /// Records the forward pass and returns the `1 × 2` probability node.
    fn forward(&self, tape: &mut Tape, leaves: &[Var], graph: &GraphInput, train: bool, seed: u64) -> Result<Var> {
        let cfg = &self.config;
        let mut h = tape.leaf(graph.features.clone());
        let weights = cfg
            .edge_weighted_attention
            .then(|| tape.leaf(graph.edge_weights.clone()));
        for l in 0..cfg.layer_count {
            let dropped = tape.dropout(h, cfg.dropout, train, seed::derive(seed, &[l as u64]))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for k in 0..cfg.heads {
                let base = 2 * (l * cfg.heads + k);
                let head = head_forward(
                    tape,
                    dropped,
                    leaves[base],
                    leaves[base + 1],
                    &graph.mask,
                    weights,
                    cfg.leaky_slope,
                )?;
                heads.push(head);
            }
            let merged = merge_heads(tape, &heads, cfg.merge_for(l))?;
            h = tape.leaky_relu(merged, cfg.leaky_slope);
        }
        let pooled = tape.mean_rows(h)?;
        let n = leaves.len();
        let logits = tape.matmul(pooled, leaves[n - 2])?;
        let logits = tape.add_row(logits, leaves[n - 1])?;
        Ok(tape.softmax_rows(logits)?)
    }

    /// `[P(negative), P(positive)]` with dropout off.
    pub fn predict(&self, graph: &GraphInput) -> Result<[f64; 2]> {
        self.check_input(graph)?;
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let probs = self.forward(&mut tape, &leaves, graph, false, 0)?;
        let p = tape.value(probs).data();
        Ok([p[0], p[1]])
    }

    /// Node embeddings after the last attention layer, dropout off.
    pub fn embed(&self, graph: &GraphInput) -> Result<Array2<f64>> {
        self.check_input(graph)?;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let mut h = tape.leaf(graph.features.clone());
        let weights = cfg
            .edge_weighted_attention
            .then(|| tape.leaf(graph.edge_weights.clone()));
        for l in 0..cfg.layer_count {
            let mut heads = Vec::new();
            for k in 0..cfg.heads {
                let base = 2 * (l * cfg.heads + k);
                heads.push(head_forward(
                    &mut tape,
                    h,
                    leaves[base],
                    leaves[base + 1],
                    &graph.mask,
                    weights,
                    cfg.leaky_slope,
                )?);
            }
            let merged = merge_heads(&mut tape, &heads, cfg.merge_for(l))?;
            h = tape.leaky_relu(merged, cfg.leaky_slope);
        }
        let t = tape.value(h);
        Ok(Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("shape"))
    }

    /// Cross-entropy of one sample and its gradient for every parameter.
    pub fn loss_and_gradient(&self, sample: &Sample, train: bool, seed: u64) -> Result<(f64, [f64; 2], Vec<Vec<f64>>)> {
        self.check_input(&sample.graph)?;
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, true);
        let probs = self.forward(&mut tape, &leaves, &sample.graph, train, seed)?;
        let loss = tape.cross_entropy(probs, &one_hot(sample.label))?;
        tape.backward(loss)?;
        let p = tape.value(probs).data();
        let grads = leaves
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((tape.value(loss).data()[0], [p[0], p[1]], grads))
    }

    /// Mean cross-entropy and accuracy in eval mode.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Err(GatError::EmptySplit("evaluation"));
        }
        let results: Vec<[f64; 2]> = samples
            .par_iter()
            .map(|s| self.predict(&s.graph))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut correct = 0;
        for (s, p) in samples.iter().zip(&results) {
            loss -= p[s.label.index()].max(crate::autodiff::LOG_FLOOR).ln();
            correct += usize::from(argmax(*p) == s.label);
        }
        let n = samples.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GatError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| GatError::Checkpoint(e.to_string()))?;
        model.config.validate()?;
        let reference = Self::new(model.atlas.clone(), model.input_dim, model.config.clone(), 0)?;
        let consistent = reference.params.len() == model.params.len()
            && reference.params.iter().zip(&model.params).all(|(r, m)| {
                r.name == m.name && r.shape == m.shape && m.data.len() == m.shape.iter().product::<usize>()
            });
        if !consistent {
            return Err(GatError::Checkpoint("parameter layout does not match configuration".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn one_hot(label: Label) -> Tensor {
    let mut t = vec![0.0; 2];
    t[label.index()] = 1.0;
    Tensor::new(vec![1, 2], t).expect("shape")
}

/// Predicted label; exact ties go to the negative class.
pub fn argmax(p: [f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Positive
    } else {
        Label::Negative
    }
}

fn head_forward(
    tape: &mut Tape,
    h: Var,
    w: Var,
    a: Var,
    mask: &Arc<Neighborhood>,
    edge_weights: Option<Var>,
    slope: f64,
) -> Result<Var> {
    let wh = tape.matmul(h, w)?;
    let mut scores = tape.attention_logits(wh, a, mask)?;
    if let Some(ew) = edge_weights {
        scores = tape.mul(scores, ew)?;
    }
    let scores = tape.leaky_relu(scores, slope);
    let alpha = tape.masked_softmax(scores, mask)?;
    Ok(tape.aggregate(alpha, mask, wh)?)
}

fn merge_heads(tape: &mut Tape, heads: &[Var], merge: HeadMerge) -> Result<Var> {
    match merge {
        HeadMerge::Concat => Ok(tape.concat_cols(heads)?),
        HeadMerge::Average => {
            let mut acc = heads[0];
            for &h in &heads[1..] {
                acc = tape.add(acc, h)?;
            }
            Ok(tape.scale(acc, 1.0 / heads.len() as f64))
        }
    }
}

fn to_array(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("matrix")
}

/// Dense `n × n` attention matrix of one head; zero outside the mask.
pub fn attention_coefficients(
    h: &Array2<f64>,
    w: &Array2<f64>,
    a: &[f64],
    neighbors: &Neighborhood,
    slope: f64,
) -> Result<Array2<f64>> {
    let n = h.nrows();
    assert!(
        (0..neighbors.node_count()).all(|i| !neighbors.row(i).is_empty()),
        "every node needs at least its self-loop"
    );
    if h.ncols() != w.nrows() {
        return Err(GatError::FeatureMismatch {
            expected: w.nrows(),
            found: h.ncols(),
        });
    }
    let mask = Arc::new(neighbors.clone());
    let mut tape = Tape::new();
    let hv = tape.leaf(Tensor::new(vec![n, h.ncols()], h.iter().copied().collect())?);
    let wv = tape.leaf(Tensor::new(vec![w.nrows(), w.ncols()], w.iter().copied().collect())?);
    let av = tape.leaf(Tensor::new(vec![a.len()], a.to_vec())?);
    let wh = tape.matmul(hv, wv)?;
    let scores = tape.attention_logits(wh, av, &mask)?;
    let scores = tape.leaky_relu(scores, slope);
    let alpha = tape.masked_softmax(scores, &mask)?;
    let alpha = tape.value(alpha).data();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for (e, &j) in mask.row_range(i).zip(mask.row(i)) {
            out[[i, j]] = alpha[e];
        }
    }
    Ok(out)
}

/// Parameters of one attention layer: `(W^k, a^k)` per head.
pub struct LayerParams<'a> {
    pub heads: &'a [(Array2<f64>, Vec<f64>)],
}

/// One attention layer in eval mode, activation included.
pub fn gat_layer(
    h: &Array2<f64>,
    layer: &LayerParams<'_>,
    neighbors: &Neighborhood,
    merge: HeadMerge,
    slope: f64,
) -> Result<Array2<f64>> {
    let mask = Arc::new(neighbors.clone());
    let mut tape = Tape::new();
    let hv = tape.leaf(Tensor::new(vec![h.nrows(), h.ncols()], h.iter().copied().collect())?);
    let mut heads = Vec::new();
    for (w, a) in layer.heads {
        if w.nrows() != h.ncols() {
            return Err(GatError::FeatureMismatch {
                expected: w.nrows(),
                found: h.ncols(),
            });
        }
        let wv = tape.leaf(Tensor::new(vec![w.nrows(), w.ncols()], w.iter().copied().collect())?);
        let av = tape.leaf(Tensor::new(vec![a.len()], a.clone())?);
        heads.push(head_forward(&mut tape, hv, wv, av, &mask, None, slope)?);
    }
    if heads.is_empty() {
        return Err(GatError::Config("a layer needs at least one head".into()));
    }
    let merged = merge_heads(&mut tape, &heads, merge)?;
    let out = tape.leaky_relu(merged, slope);
    Ok(to_array(tape.value(out)))
}

/// Mean of the node embeddings.
pub fn global_average_pool(embeddings: &Array2<f64>) -> Vec<f64> {
    assert!(embeddings.nrows() > 0, "pooling needs at least one node");
    embeddings
        .mean_axis(ndarray::Axis(0))
        .expect("nonempty")
        .to_vec()
}

/// Adam over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[ParamTensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with `grads` of the data loss; the decay term
    /// `weight_decay · ‖p‖²` contributes `2 · weight_decay · p`.
    pub fn step(&mut self, params: &mut [ParamTensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data.iter_mut().enumerate() {
                let g = grads[i][j] + 2.0 * self.weight_decay * *x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
                *x -= update;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss with dropout active.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: GatModel,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch Adam with early stopping on validation accuracy.
///
/// Ties in validation accuracy go to the lower validation loss.
pub fn train(model: GatModel, train_set: &[Sample], validation: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(GatError::EmptySplit("training"));
    }
    if validation.is_empty() {
        return Err(GatError::EmptySplit("validation"));
    }
    for label in Label::ALL {
        if !train_set.iter().any(|s| s.label == label) {
            return Err(GatError::MissingClass(label));
        }
    }
    for s in train_set.iter().chain(validation) {
        model.check_input(&s.graph)?;
    }

    let mut model = model;
    let mut adam = Adam::new(cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let (v_loss, v_acc) = model.evaluate(validation)?;
    let mut best = (v_acc, v_loss, 0usize, model.params.clone());

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, [f64; 2], Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let dropout_seed = seed::derive(cfg.seed, &[epoch as u64, i as u64]);
                    model.loss_and_gradient(&train_set[i], true, dropout_seed)
                })
                .collect::<Result<_>>()?;
            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            let mut batch_loss = 0.0;
            for (&i, (loss, probs, g)) in batch.iter().zip(&results) {
                batch_loss += loss;
                correct += usize::from(argmax(*probs) == train_set[i].label);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(GatError::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grads);
            loss_sum += batch_loss;
        }
        let (v_loss, v_acc) = model.evaluate(validation)?;
        if !v_loss.is_finite() {
            return Err(GatError::Divergence {
                epoch,
                batch: usize::MAX,
                loss: v_loss,
            });
        }
        let n = train_set.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            validation_loss: v_loss,
            validation_accuracy: v_acc,
        });
        log::debug!(
            "{} epoch {epoch}: loss {:.4} acc {:.3} val_loss {v_loss:.4} val_acc {v_acc:.3}",
            model.atlas,
            loss_sum / n,
            correct as f64 / n
        );
        if v_acc > best.0 || (v_acc == best.0 && v_loss < best.1) {
            best = (v_acc, v_loss, epoch, model.params.clone());
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    model.params = best.3;
    Ok(TrainOutcome {
        model,
        best_epoch: best.2,
        best_validation_accuracy: best.0,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn self_loops(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![i]).collect()
    }

    fn leaky(x: f64, s: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            s * x
        }
    }

    #[test]
    fn attention_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let h = random_matrix(&mut rng, n, 4);
        let w = random_matrix(&mut rng, 4, 3);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lists = vec![vec![0, 1, 3], vec![1, 2], vec![0, 2, 3, 4], vec![3], vec![1, 4]];
        let alpha = attention_coefficients(&h, &w, &a, &Neighborhood::from_lists(&lists), 0.2).unwrap();

        let wh = h.dot(&w);
        for (i, list) in lists.iter().enumerate() {
            let e = |j: usize| {
                let mut cat = wh.row(i).to_vec();
                cat.extend(wh.row(j).iter());
                leaky(cat.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>(), 0.2).exp()
            };
            let z: f64 = list.iter().map(|&j| e(j)).sum();
            for j in 0..n {
                let expected = if list.contains(&j) { e(j) / z } else { 0.0 };
                assert!((alpha[[i, j]] - expected).abs() < 1e-10);
            }
            assert!((alpha.row(i).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn self_loop_only_and_symmetric_neighbors() {
        let h = array![[1.0, 2.0], [1.0, 2.0], [0.5, -1.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let a = vec![0.3, -0.2, 0.7, 0.1];
        let lists = vec![vec![0, 1], vec![1], vec![0, 1, 2]];
        let alpha = attention_coefficients(&h, &w, &a, &Neighborhood::from_lists(&lists), 0.2).unwrap();
        assert_eq!(alpha[[1, 1]], 1.0);
        assert!((alpha[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((alpha[[2, 0]] - alpha[[2, 1]]).abs() < 1e-15);
    }

    #[test]
    fn single_head_concat_equals_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_matrix(&mut rng, 4, 3);
        let heads = vec![(random_matrix(&mut rng, 3, 2), vec![0.1, -0.4, 0.3, 0.2])];
        let mask = Neighborhood::complete(4);
        let layer = LayerParams { heads: &heads };
        let c = gat_layer(&h, &layer, &mask, HeadMerge::Concat, 0.2).unwrap();
        let m = gat_layer(&h, &layer, &mask, HeadMerge::Average, 0.2).unwrap();
        assert_eq!(c, m);
    }

    #[test]
    fn self_loops_collapse_to_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_matrix(&mut rng, 4, 3);
        let heads = vec![
            (random_matrix(&mut rng, 3, 2), vec![0.5; 4]),
            (random_matrix(&mut rng, 3, 2), vec![-0.5; 4]),
        ];
        let mask = Neighborhood::from_lists(&self_loops(4));
        let out = gat_layer(&h, &LayerParams { heads: &heads }, &mask, HeadMerge::Concat, 0.2).unwrap();
        assert_eq!(out.dim(), (4, 4));
        for (k, (w, _)) in heads.iter().enumerate() {
            let expected = h.dot(w).mapv(|x| leaky(x, 0.2));
            for i in 0..4 {
                for c in 0..2 {
                    assert!((out[[i, 2 * k + c]] - expected[[i, c]]).abs() < 1e-12);
                }
            }
        }
        let bad = random_matrix(&mut rng, 4, 5);
        assert!(matches!(
            gat_layer(&bad, &LayerParams { heads: &heads }, &mask, HeadMerge::Concat, 0.2),
            Err(GatError::FeatureMismatch { .. })
        ));
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(global_average_pool(&array![[1.0, 2.0], [3.0, 4.0]]), vec![2.0, 3.0]);
        assert_eq!(global_average_pool(&array![[5.0, -1.0]]), vec![5.0, -1.0]);
    }

    fn toy_input(rng: &mut ChaCha8Rng, n: usize, f: usize) -> GraphInput {
        let x = random_matrix(rng, n, f);
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut l = vec![i, (i + 1) % n, (i + n - 1) % n];
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        GraphInput::new(&x, &lists, &Array2::from_elem((n, n), 0.5))
    }

    #[test]
    fn zero_output_layer_gives_even_odds_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = toy_input(&mut rng, 6, 5);
        let mut model = GatModel::new("A", 5, GatConfig::default(), 1).unwrap();
        let p = model.predict(&g).unwrap();
        assert_eq!(p, model.predict(&g).unwrap());
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        model.param_mut("fc.w").unwrap().data.fill(0.0);
        assert_eq!(model.predict(&g).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn feature_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = toy_input(&mut rng, 6, 4);
        let model = GatModel::new("A", 5, GatConfig::default(), 1).unwrap();
        assert!(matches!(
            model.predict(&g),
            Err(GatError::FeatureMismatch { expected: 5, found: 4 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = GatModel::new("AAL", 7, GatConfig::default(), 4).unwrap();
        let back = GatModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let mut broken = model.clone();
        broken.params.pop();
        assert!(GatModel::from_json(&broken.to_json().unwrap()).is_err());
    }

    #[test]
    fn weight_decay_shrinks_norm_without_data_gradient() {
        let mut model = GatModel::new("A", 5, GatConfig::default(), 1).unwrap();
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&cfg, &model.params);
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let mut norm = model.squared_norm();
        for _ in 0..5 {
            adam.step(&mut model.params, &zeros);
            let next = model.squared_norm();
            assert!(next < norm);
            norm = next;
        }
    }

    #[test]
    fn config_validation() {
        assert!(GatConfig { dropout: 1.0, ..GatConfig::default() }.validate().is_err());
        assert!(GatConfig { heads: 0, ..GatConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 400, ..TrainConfig::default() }.validate().is_err());
        let cfg = GatConfig::default();
        assert_eq!(
            (0..3).map(|l| cfg.merge_for(l)).collect::<Vec<_>>(),
            vec![HeadMerge::Concat, HeadMerge::Concat, HeadMerge::Average]
        );
    }
}
