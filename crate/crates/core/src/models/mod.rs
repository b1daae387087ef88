//! Classifier heads over pooled embeddings: FCN, CNN, concatenation fusion
//! of two CNN branches, and FIONA (gated, projected branches whose
//! projections are also aligned by the CKA loss).

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::cka::FeatureMatrix;
use crate::error::{Error, Result};

pub const FCN_HIDDEN: [usize; 3] = [128, 64, 32];
pub const CONV_FILTERS: [usize; 2] = [16, 32];
pub const CONV_KERNEL: usize = 3;
pub const HEAD_HIDDEN: usize = 50;
pub const NUM_CLASSES: usize = 2;
/// Smallest embedding width that survives two conv + pool stages.
pub const MIN_CNN_INPUT: usize = 10;

pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_PROJECTION_DIM: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Fcn,
    Cnn,
    ConcatFusion,
    Fiona,
}

impl Architecture {
    pub fn tag(self) -> u8 {
        match self {
            Architecture::Fcn => 0,
            Architecture::Cnn => 1,
            Architecture::ConcatFusion => 2,
            Architecture::Fiona => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Architecture::Fcn,
            1 => Architecture::Cnn,
            2 => Architecture::ConcatFusion,
            3 => Architecture::Fiona,
            _ => return None,
        })
    }

    pub fn branches(self) -> usize {
        match self {
            Architecture::Fcn | Architecture::Cnn => 1,
            Architecture::ConcatFusion | Architecture::Fiona => 2,
        }
    }

    pub fn is_fusion(self) -> bool {
        self.branches() == 2
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Fcn => "fcn",
            Architecture::Cnn => "cnn",
            Architecture::ConcatFusion => "concat",
            Architecture::Fiona => "fiona",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub input_dims: Vec<usize>,
    pub dropout: f64,
    /// Width of the FIONA projections; ignored by other architectures.
    pub projection_dim: usize,
}

impl ModelConfig {
    pub fn fcn(input_dim: usize) -> Self {
        Self::with(Architecture::Fcn, vec![input_dim])
    }

    pub fn cnn(input_dim: usize) -> Self {
        Self::with(Architecture::Cnn, vec![input_dim])
    }

    pub fn concat_fusion(dims: (usize, usize)) -> Self {
        Self::with(Architecture::ConcatFusion, vec![dims.0, dims.1])
    }

    pub fn fiona(dims: (usize, usize), projection_dim: usize) -> Self {
        Self {
            projection_dim,
            ..Self::with(Architecture::Fiona, vec![dims.0, dims.1])
        }
    }

    fn with(arch: Architecture, input_dims: Vec<usize>) -> Self {
        Self {
            arch,
            input_dims,
            dropout: DEFAULT_DROPOUT,
            projection_dim: DEFAULT_PROJECTION_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.len() != self.arch.branches() {
            return Err(Error::Config(format!(
                "{} expects {} input dim(s), got {}",
                self.arch,
                self.arch.branches(),
                self.input_dims.len()
            )));
        }
        if let Some(&d) = self.input_dims.iter().find(|&&d| d == 0) {
            return Err(Error::Config(format!("input dim must be positive, got {d}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.arch != Architecture::Fcn {
            if let Some(&d) = self.input_dims.iter().find(|&&d| d < MIN_CNN_INPUT) {
                return Err(Error::DegenerateInput {
                    op: "cnn",
                    detail: format!("input dim {d} below minimum {MIN_CNN_INPUT}"),
                });
            }
        }
        if self.arch == Architecture::Fiona && self.projection_dim == 0 {
            return Err(Error::Config("projection dim must be positive".into()));
        }
        Ok(())
    }
}

/// Width of the flattened output of the two conv + pool stages for an
/// embedding of width `input_dim`.
pub fn cnn_flatten_width(input_dim: usize) -> usize {
    let mut len = input_dim;
    for _ in CONV_FILTERS {
        len = (len - (CONV_KERNEL - 1)) / 2;
    }
    len * CONV_FILTERS[1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Whether a forward pass trains (dropout active, drawing from the rng) or
/// runs inference.
pub enum Phase<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Phase<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Phase::Train(rng) => Some(rng),
            Phase::Eval => None,
        }
    }
}

/// Per-branch graph nodes of a fusion model.
#[derive(Debug, Clone, Copy)]
pub struct BranchNodes {
    pub flat: NodeId,
    pub gate: Option<NodeId>,
    pub gated: Option<NodeId>,
    pub projected: Option<NodeId>,
}

/// Materialised FIONA branch features.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub gated: FeatureMatrix,
    pub projected: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `n x 2` class probabilities; column 1 is the deepfake class.
    pub probs: NodeId,
    /// Graph leaves for each model parameter, in [`ModelGraph::parameters`] order.
    pub params: Vec<NodeId>,
    pub branches: Vec<BranchNodes>,
}

impl ForwardOutput {
    /// The two projected FIONA branch nodes, if this was a FIONA pass.
    pub fn projections(&self) -> Option<(NodeId, NodeId)> {
        match self.branches.as_slice() {
            [a, b] => Some((a.projected?, b.projected?)),
            _ => None,
        }
    }

    pub fn branch_outputs(&self, graph: &Graph) -> Result<Vec<BranchOutputs>> {
        self.branches
            .iter()
            .filter_map(|b| Some((b.gated?, b.projected?)))
            .map(|(gated, projected)| {
                Ok(BranchOutputs {
                    gated: FeatureMatrix::new(graph.value(gated).clone())?,
                    projected: FeatureMatrix::new(graph.value(projected).clone())?,
                })
            })
            .collect()
    }
}

/// A network with named parameters and the configuration that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: ModelConfig,
    params: Vec<Parameter>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

struct Builder<'r> {
    params: Vec<Parameter>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, fan_in: usize, units: usize) {
        let w = glorot(&[fan_in, units], fan_in, units, self.rng);
        self.push(format!("{name}.weight"), w);
        self.push(format!("{name}.bias"), Tensor::zeros(&[units]));
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) {
        let k = CONV_KERNEL;
        let w = glorot(&[k, c_in, c_out], k * c_in, k * c_out, self.rng);
        self.push(format!("{name}.weight"), w);
        self.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    }

    fn cnn_trunk(&mut self, prefix: &str) {
        self.conv(&format!("{prefix}conv1"), 1, CONV_FILTERS[0]);
        self.conv(&format!("{prefix}conv2"), CONV_FILTERS[0], CONV_FILTERS[1]);
    }

    fn push(&mut self, name: String, value: Tensor) {
        self.params.push(Parameter { name, value });
    }
}

/// Walks the parameter list in construction order during a forward pass.
struct Cursor<'m> {
    params: &'m [Parameter],
    nodes: Vec<NodeId>,
}

impl Cursor<'_> {
    fn next(&mut self, graph: &mut Graph) -> NodeId {
        let p = &self.params[self.nodes.len()];
        let id = graph.param(p.value.clone());
        self.nodes.push(id);
        id
    }

    fn dense(&mut self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = self.next(graph);
        let b = self.next(graph);
        graph.dense(x, w, b)
    }

    fn conv_relu_pool(&mut self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = self.next(graph);
        let b = self.next(graph);
        let c = graph.conv1d(x, w, b)?;
        let r = graph.relu(c);
        graph.maxpool1d(r)
    }

    fn cnn_trunk(&mut self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (n, d) = graph.value(x).dims2().expect("validated input");
        let seq = graph.reshape(x, &[n, d, 1])?;
        let h = self.conv_relu_pool(graph, seq)?;
        let h = self.conv_relu_pool(graph, h)?;
        graph.flatten(h)
    }
}

impl ModelGraph {
    /// Builds a freshly initialised model. Weights are Glorot-uniform,
    /// biases zero.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        match config.arch {
            Architecture::Fcn => {
                let mut width = config.input_dims[0];
                for (i, &units) in FCN_HIDDEN.iter().enumerate() {
                    b.dense(&format!("fc{}", i + 1), width, units);
                    width = units;
                }
                b.dense("out", width, NUM_CLASSES);
            }
            Architecture::Cnn => {
                b.cnn_trunk("");
                b.dense("fc", cnn_flatten_width(config.input_dims[0]), HEAD_HIDDEN);
                b.dense("out", HEAD_HIDDEN, NUM_CLASSES);
            }
            Architecture::ConcatFusion => {
                b.cnn_trunk("a.");
                b.cnn_trunk("b.");
                let width: usize = config.input_dims.iter().map(|&d| cnn_flatten_width(d)).sum();
                b.dense("head.fc", width, HEAD_HIDDEN);
                b.dense("head.out", HEAD_HIDDEN, NUM_CLASSES);
            }
            Architecture::Fiona => {
                for (prefix, &d) in ["a.", "b."].iter().zip(&config.input_dims) {
                    let flat = cnn_flatten_width(d);
                    b.cnn_trunk(prefix);
                    b.dense(&format!("{prefix}gate"), flat, flat);
                    b.dense(&format!("{prefix}proj"), flat, config.projection_dim);
                }
                b.dense("head.fc", 2 * config.projection_dim, HEAD_HIDDEN);
                b.dense("head.out", HEAD_HIDDEN, NUM_CLASSES);
            }
        }
        let params = b.params;
        Ok(Self { config, params })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against a fresh build of `config`.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let template = Self::new(config.clone(), &mut rand::SeedableRng::seed_from_u64(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Data(format!(
                "{} expects {} parameter tensors, got {}",
                config.arch,
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Data(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        const BRANCH_OPS: [&str; 2] = ["forward: branch a", "forward: branch b"];
        if inputs.len() != self.config.input_dims.len() {
            return Err(Error::Config(format!(
                "{} takes {} input batch(es), got {}",
                self.config.arch,
                self.config.input_dims.len(),
                inputs.len()
            )));
        }
        let mut rows = None;
        for (i, (t, &d)) in inputs.iter().zip(&self.config.input_dims).enumerate() {
            match t.dims2() {
                Some((n, w)) if w == d && rows.is_none_or(|r| r == n) => rows = Some(n),
                _ => {
                    let expected = [rows.unwrap_or(t.shape()[0]), d];
                    return Err(Error::dim(BRANCH_OPS[i], t.shape(), &expected));
                }
            }
        }
        let n = rows.expect("at least one input");
        if self.config.arch == Architecture::Fiona && n < 2 {
            return Err(Error::DegenerateInput {
                op: "fiona forward",
                detail: "batches need at least 2 samples for kernel alignment".into(),
            });
        }
        Ok(n)
    }

    /// Records a forward pass on `graph`. Parameters enter as gradient-tracked
    /// leaves, inputs as constants.
    pub fn forward(&self, graph: &mut Graph, inputs: &[Tensor], mut phase: Phase<'_>) -> Result<ForwardOutput> {
        self.check_inputs(inputs)?;
        let rate = self.config.dropout;
        let mut cur = Cursor {
            params: &self.params,
            nodes: Vec::with_capacity(self.params.len()),
        };
        let xs: Vec<NodeId> = inputs.iter().map(|t| graph.input(t.clone())).collect();
        let mut branches = Vec::new();

        let logits = match self.config.arch {
            Architecture::Fcn => {
                let mut h = xs[0];
                for _ in FCN_HIDDEN {
                    let z = cur.dense(graph, h)?;
                    let a = graph.relu(z);
                    h = graph.dropout(a, rate, phase.rng())?;
                }
                cur.dense(graph, h)?
            }
            Architecture::Cnn => {
                let flat = cur.cnn_trunk(graph, xs[0])?;
                let h = graph.dropout(flat, rate, phase.rng())?;
                let z = cur.dense(graph, h)?;
                let a = graph.relu(z);
                cur.dense(graph, a)?
            }
            Architecture::ConcatFusion => {
                let fa = cur.cnn_trunk(graph, xs[0])?;
                let fb = cur.cnn_trunk(graph, xs[1])?;
                for flat in [fa, fb] {
                    branches.push(BranchNodes {
                        flat,
                        gate: None,
                        gated: None,
                        projected: None,
                    });
                }
                let fused = graph.concat(fa, fb)?;
                let h = graph.dropout(fused, rate, phase.rng())?;
                let z = cur.dense(graph, h)?;
                let a = graph.relu(z);
                cur.dense(graph, a)?
            }
            Architecture::Fiona => {
                for &x in &xs {
                    let flat = cur.cnn_trunk(graph, x)?;
                    let pre_gate = cur.dense(graph, flat)?;
                    let gate = graph.sigmoid(pre_gate);
                    let gated = graph.mul(gate, flat)?;
                    let projected = cur.dense(graph, gated)?;
                    branches.push(BranchNodes {
                        flat,
                        gate: Some(gate),
                        gated: Some(gated),
                        projected: Some(projected),
                    });
                }
                let pa = branches[0].projected.expect("set above");
                let pb = branches[1].projected.expect("set above");
                let fused = graph.concat(pa, pb)?;
                let h = graph.dropout(fused, rate, phase.rng())?;
                let z = cur.dense(graph, h)?;
                let a = graph.relu(z);
                cur.dense(graph, a)?
            }
        };
        debug_assert_eq!(cur.nodes.len(), self.params.len());
        let probs = graph.softmax(logits);
        Ok(ForwardOutput {
            probs,
            params: cur.nodes,
            branches,
        })
    }

    /// Inference-mode class probabilities, `n x 2`.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, inputs, Phase::Eval)?;
        Ok(graph.value(out.probs).clone())
    }
}

/// Convenience constructors seeded from a single integer.
pub fn build_fcn(input_dim: usize, dropout: f64, seed: u64) -> Result<ModelGraph> {
    build(ModelConfig { dropout, ..ModelConfig::fcn(input_dim) }, seed)
}

pub fn build_cnn(input_dim: usize, dropout: f64, seed: u64) -> Result<ModelGraph> {
    build(ModelConfig { dropout, ..ModelConfig::cnn(input_dim) }, seed)
}

pub fn build_concat_fusion(dims: (usize, usize), dropout: f64, seed: u64) -> Result<ModelGraph> {
    build(ModelConfig { dropout, ..ModelConfig::concat_fusion(dims) }, seed)
}

pub fn build_fiona(dims: (usize, usize), projection_dim: usize, dropout: f64, seed: u64) -> Result<ModelGraph> {
    build(
        ModelConfig {
            dropout,
            ..ModelConfig::fiona(dims, projection_dim)
        },
        seed,
    )
}

fn build(config: ModelConfig, seed: u64) -> Result<ModelGraph> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init);
    ModelGraph::new(config, &mut rng)
}
