//! Linear centered kernel alignment (CKA) between two feature matrices
//! sharing the same samples, as a similarity measure and as a
//! differentiable loss `1 - CKA`.
//!
//! With `K = X X^T`, `L = Y Y^T`, `H = I - 11^T / n`, `K~ = H K H`:
//!
//! ```text
//! HSIC(K~, L~) = trace(K~ L~)
//! CKA(X, Y)    = HSIC(K~, L~) / sqrt(HSIC(K~, K~) HSIC(L~, L~))
//! ```

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result, Side};

/// Self-HSIC values at or below this are treated as a collapsed batch.
pub const DEFAULT_EPSILON: f64 = 1e-12;

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// An `n x d` batch of branch features, `n >= 2`, all values finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Tensor);

impl FeatureMatrix {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (n, _) = tensor
            .dims2()
            .ok_or_else(|| Error::dim("feature matrix", tensor.shape(), &[0, 0]))?;
        if n < 2 {
            return Err(Error::DegenerateInput {
                op: "feature matrix",
                detail: format!("{n} sample(s); centering needs at least 2"),
            });
        }
        if !tensor.all_finite() {
            return Err(Error::Numeric("feature matrix".into()));
        }
        Ok(Self(tensor))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Symmetric `n x n` kernel matrix, either raw (`K`) or centered (`H K H`).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
    centered: bool,
}

impl GramMatrix {
    /// Wraps an uncentered kernel matrix given in row-major order.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim("gram matrix", &[n, n], &[data.len()]));
        }
        Ok(Self {
            n,
            data,
            centered: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn matmul_features(&self, x: &Tensor) -> Vec<f64> {
        let d = x.shape()[1];
        let mut out = vec![0.0; self.n * d];
        for i in 0..self.n {
            let out_row = &mut out[i * d..(i + 1) * d];
            for j in 0..self.n {
                let k = self.get(i, j);
                for (o, v) in out_row.iter_mut().zip(x.row(j)) {
                    *o += k * v;
                }
            }
        }
        out
    }
}

/// `K = X X^T`.
pub fn gram_matrix(x: &FeatureMatrix) -> GramMatrix {
    let n = x.rows();
    let t = x.as_tensor();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
            data[i * n + j] = dot;
            data[j * n + i] = dot;
        }
    }
    GramMatrix {
        n,
        data,
        centered: false,
    }
}

/// `H K H`, computed as double mean subtraction in O(n^2).
pub fn center_gram(k: &GramMatrix) -> Result<GramMatrix> {
    if k.centered {
        return Err(Error::Contract("gram matrix is already centered".into()));
    }
    let asym = k.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::Contract(format!(
            "gram matrix is not symmetric (max deviation {asym:e})"
        )));
    }
    let n = k.n;
    let nf = n as f64;
    let row_means: Vec<f64> = k.data.chunks_exact(n).map(|r| r.iter().sum::<f64>() / nf).collect();
    let col_means: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| k.get(i, j)).sum::<f64>() / nf)
        .collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut data = k.data.clone();
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] += grand - row_means[i] - col_means[j];
        }
    }
    Ok(GramMatrix {
        n,
        data,
        centered: true,
    })
}

/// `trace(K~ L~)`; both arguments symmetric, so this is their elementwise
/// inner product.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.n != l.n {
        return Err(Error::dim("hsic", &[k.n, k.n], &[l.n, l.n]));
    }
    if !(k.centered && l.centered) {
        return Err(Error::Contract("hsic requires centered gram matrices".into()));
    }
    Ok(k.data.iter().zip(&l.data).map(|(a, b)| a * b).sum())
}

/// Intermediate quantities of one CKA evaluation.
#[derive(Debug, Clone)]
struct Alignment {
    kc: GramMatrix,
    lc: GramMatrix,
    cross: f64,
    self_x: f64,
    self_y: f64,
}

impl Alignment {
    fn compute(x: &FeatureMatrix, y: &FeatureMatrix, epsilon: f64) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::dim("cka", x.as_tensor().shape(), y.as_tensor().shape()));
        }
        let kc = center_gram(&gram_matrix(x))?;
        let lc = center_gram(&gram_matrix(y))?;
        let self_x = hsic(&kc, &kc)?;
        if self_x <= epsilon {
            return Err(Error::DegenerateBatch {
                side: Side::X,
                value: self_x,
            });
        }
        let self_y = hsic(&lc, &lc)?;
        if self_y <= epsilon {
            return Err(Error::DegenerateBatch {
                side: Side::Y,
                value: self_y,
            });
        }
        let cross = hsic(&kc, &lc)?;
        Ok(Self {
            kc,
            lc,
            cross,
            self_x,
            self_y,
        })
    }

    fn value(&self) -> f64 {
        self.cross / (self.self_x * self.self_y).sqrt()
    }

    /// Gradients of CKA with respect to `x` and `y`:
    /// `dCKA/dX = 2 / sqrt(bc) * (L~ X - (a/b) K~ X)` and symmetrically for `Y`.
    fn gradients(&self, x: &FeatureMatrix, y: &FeatureMatrix) -> (Tensor, Tensor) {
        let norm = 2.0 / (self.self_x * self.self_y).sqrt();
        let side = |own: &GramMatrix, other: &GramMatrix, own_self: f64, f: &FeatureMatrix| {
            let ratio = self.cross / own_self;
            let other_f = other.matmul_features(f.as_tensor());
            let own_f = own.matmul_features(f.as_tensor());
            let data = other_f
                .iter()
                .zip(&own_f)
                .map(|(o, s)| norm * (o - ratio * s))
                .collect();
            Tensor::new(f.as_tensor().shape().to_vec(), data).expect("same shape as features")
        };
        (
            side(&self.kc, &self.lc, self.self_x, x),
            side(&self.lc, &self.kc, self.self_y, y),
        )
    }
}

/// Linear CKA in `[0, 1]`, guarded with [`DEFAULT_EPSILON`].
pub fn cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    cka_with_epsilon(x, y, DEFAULT_EPSILON)
}

pub fn cka_with_epsilon(x: &FeatureMatrix, y: &FeatureMatrix, epsilon: f64) -> Result<f64> {
    Ok(Alignment::compute(x, y, epsilon)?.value())
}

/// Records `1 - CKA(x, y)` on the graph so that gradients reach both
/// feature nodes. Returns the loss node and the CKA value.
///
/// Round-off can push CKA a hair above 1 (it is exactly 1 for `n = 2`), so
/// the loss is floored at 0.
pub fn cka_loss(graph: &mut Graph, x: NodeId, y: NodeId, epsilon: f64) -> Result<(NodeId, f64)> {
    let xf = FeatureMatrix::new(graph.value(x).clone())?;
    let yf = FeatureMatrix::new(graph.value(y).clone())?;
    let alignment = Alignment::compute(&xf, &yf, epsilon)?;
    let value = alignment.value();
    let (gx, gy) = alignment.gradients(&xf, &yf);
    let neg = |t: Tensor| {
        let shape = t.shape().to_vec();
        Tensor::new(shape, t.into_data().into_iter().map(|v| -v).collect()).expect("same shape")
    };
    let node = graph.scalar_op(vec![x, y], (1.0 - value).max(0.0), vec![neg(gx), neg(gy)])?;
    Ok((node, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn gram_examples() {
        let i2 = fm(&[&[1., 0.], &[0., 1.]]);
        assert_eq!(gram_matrix(&i2).data(), &[1., 0., 0., 1.]);
        let z = fm(&[&[0., 0.], &[0., 0.]]);
        assert_eq!(gram_matrix(&z).data(), &[0.; 4]);
        let x = fm(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(gram_matrix(&x).data(), &[5., 11., 11., 25.]);
    }

    #[test]
    fn feature_matrix_rejects_bad_input() {
        assert!(FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).is_err());
        assert!(matches!(
            FeatureMatrix::from_rows(&[vec![1.0], vec![f64::NAN]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn centering_constant_kernel_gives_zero() {
        let k = GramMatrix::new(3, vec![1.0; 9]).unwrap();
        let c = center_gram(&k).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-15));
        assert!(c.is_centered());
    }

    #[test]
    fn centering_leaves_centered_kernel_unchanged() {
        let data = vec![2., -1., -1., -1., 2., -1., -1., -1., 2.];
        let k = GramMatrix::new(3, data.clone()).unwrap();
        let c = center_gram(&k).unwrap();
        for (a, b) in c.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn centering_rejects_asymmetric_and_recentering() {
        let k = GramMatrix::new(2, vec![1., 2., 3., 4.]).unwrap();
        assert!(matches!(center_gram(&k), Err(Error::Contract(_))));
        let c = center_gram(&GramMatrix::new(2, vec![1., 0., 0., 1.]).unwrap()).unwrap();
        assert!(center_gram(&c).is_err());
    }

    #[test]
    fn hsic_rules() {
        let c = center_gram(&GramMatrix::new(2, vec![2., 1., 1., 3.]).unwrap()).unwrap();
        let zero = center_gram(&GramMatrix::new(2, vec![0.; 4]).unwrap()).unwrap();
        assert_eq!(hsic(&zero, &c).unwrap(), 0.0);
        let fro: f64 = c.data().iter().map(|v| v * v).sum();
        assert_eq!(hsic(&c, &c).unwrap(), fro);
        let raw = GramMatrix::new(2, vec![2., 1., 1., 3.]).unwrap();
        assert!(hsic(&raw, &c).is_err());
        let big = center_gram(&GramMatrix::new(3, vec![0.; 9]).unwrap()).unwrap();
        assert!(matches!(hsic(&c, &big), Err(Error::Dimension { .. })));
    }

    #[test]
    fn degenerate_batch_names_side() {
        let x = fm(&[&[1., 2.], &[3., 1.], &[0., 5.]]);
        let constant = fm(&[&[1., 1.], &[1., 1.], &[1., 1.]]);
        match cka(&x, &constant) {
            Err(Error::DegenerateBatch { side: Side::Y, .. }) => {}
            other => panic!("{other:?}"),
        }
        match cka(&constant, &x) {
            Err(Error::DegenerateBatch { side: Side::X, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn self_similarity_and_zero_loss() {
        let x = fm(&[&[1., 2., 0.], &[3., 1., 1.], &[0., 5., 2.], &[1., 1., 1.]]);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let mut g = Graph::new();
        let a = g.param(x.as_tensor().clone());
        let b = g.param(x.as_tensor().clone());
        let (loss, value) = cka_loss(&mut g, a, b, DEFAULT_EPSILON).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-12);
        assert!((value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_sample_counts_error() {
        let x = fm(&[&[1.], &[2.]]);
        let y = fm(&[&[1.], &[2.], &[3.]]);
        assert!(matches!(cka(&x, &y), Err(Error::Dimension { .. })));
    }
}
