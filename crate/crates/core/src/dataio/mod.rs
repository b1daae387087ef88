//! Embedding datasets: the FEMB container, id-joined branch pairs, seeded
//! stratified splits and a synthetic two-modality generator.

mod femb;
mod synth;

pub use femb::{decode_femb, encode_femb, manifest_path, read_femb, write_femb, FEMB_MAGIC, FEMB_VERSION};
pub use synth::{synth_generate, synth_generate_split, SynthConfig};

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::objective::Batch;
use crate::rng::{self, Stream};

/// Labeled fixed-width embeddings, stored as `f32` as they arrive from the
/// extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    vectors: Vec<f32>,
    ids: Vec<String>,
    labels: Vec<Label>,
    source_tag: String,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        ids: Vec<String>,
        labels: Vec<Label>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dim must be positive".into()));
        }
        if ids.len() != labels.len() || vectors.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "{} ids, {} labels and {} values do not describe a {}-wide matrix",
                ids.len(),
                labels.len(),
                vectors.len(),
                dim
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {}", i / dim)));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate id {dup:?}")));
        }
        Ok(Self {
            dim,
            vectors,
            ids,
            labels,
            source_tag: source_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// The embeddings widened to `f64`, `count x dim`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.count() == 0 {
            return Err(Error::Data(format!("dataset {:?} has no rows", self.source_tag)));
        }
        Tensor::new(
            vec![self.count(), self.dim],
            self.vectors.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(vec![self.to_tensor()?], self.labels.clone())
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut vectors = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            vectors.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            vectors,
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            source_tag: self.source_tag.clone(),
        }
    }

    /// Rows whose id is in `keep`, in their current order.
    pub fn select_ids(&self, keep: &HashSet<String>) -> Self {
        let rows: Vec<usize> = (0..self.count()).filter(|&i| keep.contains(&self.ids[i])).collect();
        self.subset(&rows)
    }
}

/// Two embedding sources joined on utterance id. Row `i` of `a` and row `i`
/// of `b` describe the same utterance; rows are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    a: EmbeddingDataset,
    b: EmbeddingDataset,
    /// Source rows `(row in a, row in b)` of each joined row.
    alignment: Vec<(usize, usize)>,
}

impl PairedDataset {
    pub fn a(&self) -> &EmbeddingDataset {
        &self.a
    }

    pub fn b(&self) -> &EmbeddingDataset {
        &self.b
    }

    pub fn alignment(&self) -> &[(usize, usize)] {
        &self.alignment
    }

    pub fn count(&self) -> usize {
        self.a.count()
    }

    pub fn ids(&self) -> &[String] {
        self.a.ids()
    }

    pub fn labels(&self) -> &[Label] {
        self.a.labels()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.dim(), self.b.dim())
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(vec![self.a.to_tensor()?, self.b.to_tensor()?], self.labels().to_vec())
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            a: self.a.subset(rows),
            b: self.b.subset(rows),
            alignment: rows.iter().map(|&r| self.alignment[r]).collect(),
        }
    }

    pub fn select_ids(&self, keep: &HashSet<String>) -> Self {
        let rows: Vec<usize> = (0..self.count()).filter(|&i| keep.contains(&self.ids()[i])).collect();
        self.subset(&rows)
    }
}

/// Inner join of two sources on id, ordered by id.
pub fn pair(a: &EmbeddingDataset, b: &EmbeddingDataset) -> Result<PairedDataset> {
    let b_rows: HashMap<&str, usize> = b.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut joined: Vec<(usize, usize)> = Vec::new();
    for (ra, id) in a.ids.iter().enumerate() {
        if let Some(&rb) = b_rows.get(id.as_str()) {
            if a.labels[ra] != b.labels[rb] {
                return Err(Error::Data(format!(
                    "label conflict for id {id:?}: {} in {:?}, {} in {:?}",
                    a.labels[ra], a.source_tag, b.labels[rb], b.source_tag
                )));
            }
            joined.push((ra, rb));
        }
    }
    if joined.is_empty() {
        return Err(Error::Data(format!(
            "no shared ids between {:?} and {:?}",
            a.source_tag, b.source_tag
        )));
    }
    joined.sort_by(|x, y| a.ids[x.0].cmp(&a.ids[y.0]));
    let rows_a: Vec<usize> = joined.iter().map(|p| p.0).collect();
    let rows_b: Vec<usize> = joined.iter().map(|p| p.1).collect();
    Ok(PairedDataset {
        a: a.subset(&rows_a),
        b: b.subset(&rows_b),
        alignment: joined,
    })
}

/// Anything with per-row labels that can be cut into row subsets.
pub trait Labeled: Sized {
    fn row_labels(&self) -> &[Label];
    fn take_rows(&self, rows: &[usize]) -> Result<Self>;
}

impl Labeled for EmbeddingDataset {
    fn row_labels(&self) -> &[Label] {
        self.labels()
    }

    fn take_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(self.subset(rows))
    }
}

impl Labeled for PairedDataset {
    fn row_labels(&self) -> &[Label] {
        self.labels()
    }

    fn take_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(self.subset(rows))
    }
}

impl Labeled for Batch {
    fn row_labels(&self) -> &[Label] {
        &self.labels
    }

    fn take_rows(&self, rows: &[usize]) -> Result<Self> {
        self.select(rows)
    }
}

/// Per-class held-out counts: `round(count * fraction)`, kept within
/// `[1, count - 1]` so both sides see every class.
fn held_out_count(count: usize, fraction: f64) -> usize {
    ((count as f64 * fraction).round() as usize).clamp(1, count - 1)
}

/// Seeded split preserving class proportions. Returns `(kept, held_out)`,
/// each in original row order.
pub fn stratified_split<D: Labeled>(data: &D, fraction: f64, seed: u64) -> Result<(D, D)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let labels = data.row_labels();
    let mut rng = rng::stream(seed, Stream::Split);
    let mut held = Vec::new();
    for class in [Label::Bonafide, Label::Deepfake] {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} sample(s); a split needs at least 2",
                rows.len()
            )));
        }
        let take = held_out_count(rows.len(), fraction);
        rows.shuffle(&mut rng);
        held.extend_from_slice(&rows[..take]);
    }
    held.sort_unstable();
    let held_set: HashSet<usize> = held.iter().copied().collect();
    let kept: Vec<usize> = (0..labels.len()).filter(|i| !held_set.contains(i)).collect();
    Ok((data.take_rows(&kept)?, data.take_rows(&held)?))
}
