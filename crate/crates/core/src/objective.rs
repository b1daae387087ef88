//! Cross-entropy and the joint objective `CE + lambda * (1 - CKA)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::cka::{self, FeatureMatrix};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::models::NUM_CLASSES;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the alignment term.
    pub lambda: f64,
    pub cka_epsilon: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            cka_epsilon: cka::DEFAULT_EPSILON,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=0.2).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 0.2]",
                self.label_smoothing
            )));
        }
        if !(self.cka_epsilon.is_finite() && self.cka_epsilon >= 0.0) {
            return Err(Error::Config(format!("cka epsilon must be >= 0, got {}", self.cka_epsilon)));
        }
        Ok(())
    }
}

/// Model inputs (one matrix per branch) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<Label>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() > 2 {
            return Err(Error::Data(format!("batches carry 1 or 2 inputs, got {}", inputs.len())));
        }
        for t in &inputs {
            match t.dims2() {
                Some((n, _)) if n == labels.len() => {}
                _ => return Err(Error::dim("batch", t.shape(), &[labels.len()])),
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot select an empty batch".into()));
        }
        let inputs = self
            .inputs
            .iter()
            .map(|t| t.select_rows(rows))
            .collect::<Result<_>>()?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok(Self { inputs, labels })
    }
}

fn target(label: Label, class: usize, smoothing: f64) -> f64 {
    let hot = if label.index() == class { 1.0 } else { 0.0 };
    (1.0 - smoothing) * hot + smoothing / NUM_CLASSES as f64
}

fn check_probs(probs: &Tensor, labels: &[Label]) -> Result<usize> {
    match probs.dims2() {
        Some((n, NUM_CLASSES)) if n == labels.len() && n > 0 => Ok(n),
        _ => Err(Error::dim("cross_entropy", probs.shape(), &[labels.len(), NUM_CLASSES])),
    }
}

/// Mean over samples of `-sum_c y_c log p_c`, with `p` floored at
/// [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, labels: &[Label], smoothing: f64) -> Result<f64> {
    let n = check_probs(probs, labels)?;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        for (c, &p) in probs.row(i).iter().enumerate() {
            let y = target(label, c, smoothing);
            if y != 0.0 {
                total -= y * p.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// [`cross_entropy`] recorded on the graph.
pub fn cross_entropy_node(graph: &mut Graph, probs: NodeId, labels: &[Label], smoothing: f64) -> Result<NodeId> {
    let p = graph.value(probs);
    let n = check_probs(p, labels)?;
    let value = cross_entropy(p, labels, smoothing)?;
    let mut grad = Tensor::zeros(p.shape());
    for (i, &label) in labels.iter().enumerate() {
        for c in 0..NUM_CLASSES {
            let pv = p.data()[i * NUM_CLASSES + c];
            if pv > PROB_FLOOR {
                grad.data_mut()[i * NUM_CLASSES + c] = -target(label, c, smoothing) / (n as f64 * pv);
            }
        }
    }
    graph.scalar_op(vec![probs], value, vec![grad])
}

/// Loss nodes and component values of one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: NodeId,
    pub cross_entropy: f64,
    /// CKA between the projected branches, when the model has them.
    pub cka: Option<f64>,
}

/// Builds the training loss. With `projections` present the CKA is always
/// measured; it only enters the loss when `lambda > 0`, and with
/// `lambda == 0` the returned total is the cross-entropy node itself.
pub fn total_loss_node(
    graph: &mut Graph,
    probs: NodeId,
    labels: &[Label],
    projections: Option<(NodeId, NodeId)>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let ce = cross_entropy_node(graph, probs, labels, cfg.label_smoothing)?;
    let ce_value = graph.value(ce).item().expect("scalar");
    let Some((x, y)) = projections else {
        return Ok(LossTerms {
            total: ce,
            cross_entropy: ce_value,
            cka: None,
        });
    };
    if cfg.lambda == 0.0 {
        let xf = FeatureMatrix::new(graph.value(x).clone())?;
        let yf = FeatureMatrix::new(graph.value(y).clone())?;
        return Ok(LossTerms {
            total: ce,
            cross_entropy: ce_value,
            cka: cka::cka_with_epsilon(&xf, &yf, cfg.cka_epsilon).ok(),
        });
    }
    let (align, cka_value) = cka::cka_loss(graph, x, y, cfg.cka_epsilon)?;
    let weighted = graph.scale(align, cfg.lambda);
    let total = graph.add(ce, weighted)?;
    Ok(LossTerms {
        total,
        cross_entropy: ce_value,
        cka: Some(cka_value),
    })
}

/// Value-level joint loss `CE + lambda * (1 - CKA(x, y))`.
pub fn total_loss(
    probs: &Tensor,
    labels: &[Label],
    branch_x: &FeatureMatrix,
    branch_y: &FeatureMatrix,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let ce = cross_entropy(probs, labels, cfg.label_smoothing)?;
    let alignment = cka::cka_with_epsilon(branch_x, branch_y, cfg.cka_epsilon)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + cfg.lambda * (1.0 - alignment).max(0.0))
}
