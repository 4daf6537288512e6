//! Block kernels on the label grid and the algebra the Riccati system needs.
//!
//! A kernel with `n` labels and `r x c` blocks is stored as one dense
//! `(n r) x (n c)` matrix whose block `(i, j)` is `G(u_i, u_j)`. In that
//! layout the flip-transpose `G(u,v) ↦ G(v,u)ᵀ` is the plain matrix
//! transpose, and a weighted composition is a single matrix product.

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n: usize,
    rows: usize,
    cols: usize,
    mat: DMatrix<f64>,
}

impl Kernel {
    pub fn zeros(n: usize, rows: usize, cols: usize) -> Self {
        Self { n, rows, cols, mat: DMatrix::zeros(n * rows, n * cols) }
    }

    /// Wraps a dense `(n rows) x (n cols)` matrix.
    ///
    /// Panics if the matrix shape does not match.
    pub fn from_matrix(n: usize, rows: usize, cols: usize, mat: DMatrix<f64>) -> Self {
        assert_eq!(mat.shape(), (n * rows, n * cols), "kernel matrix shape");
        Self { n, rows, cols, mat }
    }

    /// Scalar kernel from an `n x n` table.
    pub fn from_scalar_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mat = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Self::from_matrix(n, 1, 1, mat)
    }

    /// Kernel whose every block is `block`.
    pub fn constant(n: usize, block: &DMatrix<f64>) -> Self {
        let (r, c) = block.shape();
        let mut k = Self::zeros(n, r, c);
        for i in 0..n {
            for j in 0..n {
                k.set_block(i, j, block);
            }
        }
        k
    }

    pub fn labels(&self) -> usize {
        self.n
    }

    pub fn block_rows(&self) -> usize {
        self.rows
    }

    pub fn block_cols(&self) -> usize {
        self.cols
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn block_view(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        self.mat.view((i * self.rows, j * self.cols), (self.rows, self.cols))
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.block_view(i, j).into_owned()
    }

    pub fn set_block(&mut self, i: usize, j: usize, b: &DMatrix<f64>) {
        self.mat.view_mut((i * self.rows, j * self.cols), (self.rows, self.cols)).copy_from(b);
    }

    /// Entry of a scalar kernel.
    pub fn scalar(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.rows == 1 && self.cols == 1);
        self.mat[(i, j)]
    }

    pub fn is_square_blocks(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.mat.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.mat.amax()
    }

    /// Discrete `L²(U×U)` norm.
    pub fn l2_norm(&self, grid: &LabelGrid) -> f64 {
        let w = grid.weights();
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += w[i] * w[j] * self.block_view(i, j).norm_squared();
            }
        }
        acc.sqrt()
    }

    /// The matrix with blocks `√w_i G(i,j) √w_j`, whose spectral norm is the
    /// operator norm of the kernel on the discretized `L²(U)`.
    pub fn weighted_symmetric_scaling(&self, grid: &LabelGrid) -> DMatrix<f64> {
        let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
        let (r, c) = (self.rows, self.cols);
        DMatrix::from_fn(self.mat.nrows(), self.mat.ncols(), |a, b| {
            sw[a / r] * self.mat[(a, b)] * sw[b / c]
        })
    }

    /// Scales block row `k` by `w_k` (the quadrature weight of the summation label).
    pub(crate) fn weighted_rows(&self, grid: &LabelGrid) -> DMatrix<f64> {
        let w = grid.weights();
        let r = self.rows;
        let mut out = self.mat.clone();
        for (a, mut row) in out.row_iter_mut().enumerate() {
            row *= w[a / r];
        }
        out
    }

    /// Scales block column `k` by `w_k`.
    pub(crate) fn weighted_cols(&self, grid: &LabelGrid) -> DMatrix<f64> {
        let w = grid.weights();
        let c = self.cols;
        let mut out = self.mat.clone();
        for (b, mut col) in out.column_iter_mut().enumerate() {
            col *= w[b / c];
        }
        out
    }

    pub fn scale(&self, s: f64) -> Kernel {
        Kernel { mat: &self.mat * s, ..self.clone() }
    }

    pub fn add(&self, other: &Kernel) -> Result<Kernel> {
        self.check_same_shape(other)?;
        Ok(Kernel { mat: &self.mat + &other.mat, ..self.clone() })
    }

    pub fn sub(&self, other: &Kernel) -> Result<Kernel> {
        self.check_same_shape(other)?;
        Ok(Kernel { mat: &self.mat - &other.mat, ..self.clone() })
    }

    fn check_same_shape(&self, other: &Kernel) -> Result<()> {
        if (self.n, self.rows, self.cols) != (other.n, other.rows, other.cols) {
            return Err(Error::Dimension(format!(
                "kernel shapes differ: {} labels {}x{} vs {} labels {}x{}",
                self.n, self.rows, self.cols, other.n, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// `G^S(i,j) = (G(i,j) + G(j,i)ᵀ) / 2`.
pub fn symmetrize(g: &Kernel) -> Kernel {
    assert!(g.is_square_blocks(), "symmetrize needs square blocks");
    let mut mat = g.mat.transpose();
    mat += &g.mat;
    mat *= 0.5;
    Kernel { mat, ..g.clone() }
}

/// `G(i,j) ↦ G(j,i)ᵀ`.
pub fn flip_transpose(g: &Kernel) -> Kernel {
    Kernel { n: g.n, rows: g.cols, cols: g.rows, mat: g.mat.transpose() }
}

/// Weighted composition `(G1 ∘ G2)(i,j) = Σ_k w_k G1(i,k) G2(k,j)`.
pub fn compose(g1: &Kernel, g2: &Kernel, grid: &LabelGrid) -> Result<Kernel> {
    if g1.n != g2.n || g1.n != grid.len() || g1.cols != g2.rows {
        return Err(Error::Dimension(format!(
            "cannot compose a {}-label kernel with {}-column blocks and a {}-label kernel with {}-row blocks on a {}-point grid",
            g1.n,
            g1.cols,
            g2.n,
            g2.rows,
            grid.len()
        )));
    }
    let mat = &g1.mat * g2.weighted_rows(grid);
    Ok(Kernel { n: g1.n, rows: g1.rows, cols: g2.cols, mat })
}

/// Max over blocks of the entrywise deviation `|G(i,j) − G(j,i)ᵀ|`.
pub fn check_flip_symmetry(g: &Kernel) -> f64 {
    assert!(g.is_square_blocks(), "flip symmetry needs square blocks");
    let m = &g.mat;
    let mut dev: f64 = 0.0;
    for a in 0..m.nrows() {
        for b in (a + 1)..m.ncols() {
            dev = dev.max((m[(a, b)] - m[(b, a)]).abs());
        }
    }
    dev
}

/// A per-label field of `dim`-vectors, stacked label by label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    dim: usize,
    data: DVector<f64>,
}

impl LabelField {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, data: DVector::zeros(n * dim) }
    }

    pub fn constant(n: usize, value: &[f64]) -> Self {
        let dim = value.len();
        Self { dim, data: DVector::from_fn(n * dim, |k, _| value[k % dim]) }
    }

    pub fn from_vector(dim: usize, data: DVector<f64>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "field length must be a multiple of dim");
        Self { dim, data }
    }

    pub fn from_labels(values: &[DVector<f64>]) -> Self {
        let dim = values.first().map_or(1, |v| v.len());
        let mut data = DVector::zeros(values.len() * dim);
        for (i, v) in values.iter().enumerate() {
            data.rows_mut(i * dim, dim).copy_from(v);
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn get(&self, i: usize) -> DVectorView<'_, f64> {
        self.data.rows(i * self.dim, self.dim)
    }

    pub fn set(&mut self, i: usize, v: &DVector<f64>) {
        self.data.rows_mut(i * self.dim, self.dim).copy_from(v);
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn vector_mut(&mut self) -> &mut DVector<f64> {
        &mut self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    /// Each label's vector multiplied by its quadrature weight.
    pub fn weighted(&self, grid: &LabelGrid) -> LabelField {
        let w = grid.weights();
        let dim = self.dim;
        LabelField { dim, data: DVector::from_fn(self.data.len(), |k, _| w[k / dim] * self.data[k]) }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One matrix per label, viewed as a block-diagonal operator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiag {
    blocks: Vec<DMatrix<f64>>,
}

impl BlockDiag {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn get(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn transpose(&self) -> BlockDiag {
        BlockDiag { blocks: self.blocks.iter().map(|b| b.transpose()).collect() }
    }

    /// Block `(i, j)` of the result is `D_i G(i, j)`.
    pub fn left_mul(&self, g: &Kernel) -> Kernel {
        let (p, r) = self.blocks[0].shape();
        assert_eq!(r, g.rows, "block-diagonal left factor shape");
        let n = g.n;
        let mut out = DMatrix::zeros(n * p, n * g.cols);
        for (i, d) in self.blocks.iter().enumerate() {
            let rows = g.mat.rows(i * r, r);
            out.rows_mut(i * p, p).copy_from(&(d * rows));
        }
        Kernel { n, rows: p, cols: g.cols, mat: out }
    }

    /// Block `(i, j)` of the result is `G(i, j) D_j`.
    pub fn right_mul(&self, g: &Kernel) -> Kernel {
        let (c, q) = self.blocks[0].shape();
        assert_eq!(c, g.cols, "block-diagonal right factor shape");
        let n = g.n;
        let mut out = DMatrix::zeros(n * g.rows, n * q);
        for (j, d) in self.blocks.iter().enumerate() {
            let cols = g.mat.columns(j * c, c);
            out.columns_mut(j * q, q).copy_from(&(cols * d));
        }
        Kernel { n, rows: g.rows, cols: q, mat: out }
    }

    /// The dense `(n r) x (n c)` block-diagonal matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (r, c) = self.blocks[0].shape();
        let n = self.blocks.len();
        let mut m = DMatrix::zeros(n * r, n * c);
        for (i, blk) in self.blocks.iter().enumerate() {
            m.view_mut((i * r, i * c), (r, c)).copy_from(blk);
        }
        m
    }

    /// Per-label product with a field: `(D x)_i = D_i x_i`.
    pub fn apply(&self, x: &LabelField) -> LabelField {
        let p = self.blocks[0].nrows();
        let mut out = DVector::zeros(self.blocks.len() * p);
        for (i, d) in self.blocks.iter().enumerate() {
            out.rows_mut(i * p, p).copy_from(&(d * x.get(i)));
        }
        LabelField::from_vector(p, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{apply_kernel, build_grid, operator_norm, sample_kernel, sample_scalar_kernel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar2(rows: [[f64; 2]; 2]) -> Kernel {
        Kernel::from_scalar_rows(&[rows[0].to_vec(), rows[1].to_vec()])
    }

    #[test]
    fn symmetrize_examples() {
        let g = build_grid(4).unwrap();
        let sym = sample_kernel(&g, 2, 2, |u, v| {
            DMatrix::from_row_slice(2, 2, &[u + v, u * v, u * v + 0.1, (u * v).cos()])
        })
        .unwrap();
        let sym = symmetrize(&sym);
        assert_eq!(symmetrize(&sym), sym);

        let anti = sample_scalar_kernel(&g, |u, v| u - v).unwrap();
        assert!(symmetrize(&anti).matrix().iter().all(|&x| x == 0.0));

        let s = symmetrize(&scalar2([[0.0, 1.0], [2.0, 0.0]]));
        assert_eq!(s, scalar2([[0.0, 1.5], [1.5, 0.0]]));
    }

    #[test]
    fn flip_examples() {
        let k = scalar2([[0.0, 1.0], [2.0, 0.0]]);
        assert_eq!(flip_transpose(&k), scalar2([[0.0, 2.0], [1.0, 0.0]]));
        let s = scalar2([[1.0, 3.0], [3.0, 4.0]]);
        assert_eq!(flip_transpose(&s), s);
        let g = build_grid(3).unwrap();
        let k = sample_kernel(&g, 2, 3, |u, v| DMatrix::from_fn(2, 3, |a, b| u * a as f64 - v * b as f64))
            .unwrap();
        assert_eq!(flip_transpose(&flip_transpose(&k)), k);
        let f = flip_transpose(&k);
        assert_eq!(f.block(0, 2), k.block(2, 0).transpose());
    }

    #[test]
    fn compose_examples() {
        let g = build_grid(3).unwrap();
        let any = sample_scalar_kernel(&g, |u, v| u + 2.0 * v).unwrap();
        let zero = Kernel::zeros(3, 1, 1);
        assert!(compose(&zero, &any, &g).unwrap().matrix().iter().all(|&x| x == 0.0));

        let a = sample_scalar_kernel(&g, |_, _| 1.5).unwrap();
        let b = sample_scalar_kernel(&g, |_, _| -4.0).unwrap();
        let ab = compose(&a, &b, &g).unwrap();
        assert!(ab.matrix().iter().all(|&x| (x + 6.0).abs() < 1e-14));

        let g2 = build_grid(2).unwrap();
        let id = scalar2([[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(compose(&id, &id, &g2).unwrap(), scalar2([[0.5, 0.0], [0.0, 0.5]]));
    }

    #[test]
    fn compose_dimension_mismatch() {
        let g = build_grid(2).unwrap();
        let a = Kernel::zeros(2, 2, 3);
        let b = Kernel::zeros(2, 2, 2);
        assert!(compose(&a, &b, &g).is_err());
    }

    #[test]
    fn flip_symmetry_deviation() {
        let g = build_grid(5).unwrap();
        let k = sample_scalar_kernel(&g, |u, v| (3.0 * u).sin() * v + u * u).unwrap();
        assert_eq!(check_flip_symmetry(&symmetrize(&k)), 0.0);
        let s = sample_scalar_kernel(&g, |u, v| (u * v).exp()).unwrap();
        assert_eq!(check_flip_symmetry(&s), 0.0);
        assert_eq!(check_flip_symmetry(&scalar2([[0.0, 1.0], [2.0, 0.0]])), 1.0);
    }

    #[test]
    fn block_diag_products() {
        let g = build_grid(3).unwrap();
        let k = sample_kernel(&g, 2, 2, |u, v| DMatrix::from_fn(2, 2, |a, b| u + a as f64 * v - b as f64))
            .unwrap();
        let d = BlockDiag::new((0..3).map(|i| DMatrix::from_fn(3, 2, |a, b| (i + a * b) as f64 + 0.5)).collect());
        let l = d.left_mul(&k);
        assert_eq!(l.block(1, 2), d.get(1) * k.block(1, 2));
        let dt = d.transpose();
        let r = dt.right_mul(&k.clone());
        assert_eq!(r.block(2, 0), k.block(2, 0) * dt.get(0));
    }

    fn arb_kernel(n: usize, d: usize) -> impl Strategy<Value = Kernel> {
        proptest::collection::vec(-2.0f64..2.0, n * n * d * d)
            .prop_map(move |v| Kernel::from_matrix(n, d, d, DMatrix::from_vec(n * d, n * d, v)))
    }

    fn arb_field(n: usize, d: usize) -> impl Strategy<Value = LabelField> {
        proptest::collection::vec(-3.0f64..3.0, n * d)
            .prop_map(move |v| LabelField::from_vector(d, DVector::from_vec(v)))
    }

    fn quad_form(k: &Kernel, y: &LabelField, g: &LabelGrid) -> f64 {
        let gy = apply_kernel(k, y, g).unwrap();
        y.weighted(g).vector().dot(gy.vector())
    }

    proptest! {
        #[test]
        fn apply_is_linear(k in arb_kernel(4, 2), x in arb_field(4, 2), y in arb_field(4, 2),
                           a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = build_grid(4).unwrap();
            let mut comb = x.clone();
            *comb.vector_mut() = x.vector() * a + y.vector() * b;
            let lhs = apply_kernel(&k, &comb, &g).unwrap();
            let rhs = apply_kernel(&k, &x, &g).unwrap().vector() * a + apply_kernel(&k, &y, &g).unwrap().vector() * b;
            for (l, r) in lhs.vector().iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn apply_bounded_by_operator_norm(k in arb_kernel(5, 2), x in arb_field(5, 2)) {
            let g = build_grid(5).unwrap();
            let nrm = operator_norm(&k, &g).value;
            let out = apply_kernel(&k, &x, &g).unwrap();
            prop_assert!(g.field_norm(&out) <= nrm * g.field_norm(&x) * (1.0 + 1e-6) + 1e-12);
        }

        #[test]
        fn symmetrize_preserves_quadratic_form(k in arb_kernel(4, 3), y in arb_field(4, 3)) {
            let g = build_grid(4).unwrap();
            let q1 = quad_form(&k, &y, &g);
            let q2 = quad_form(&symmetrize(&k), &y, &g);
            prop_assert!((q1 - q2).abs() <= 1e-12 * (1.0 + q1.abs()));
        }

        #[test]
        fn compose_is_associative(a in arb_kernel(3, 2), b in arb_kernel(3, 2), c in arb_kernel(3, 2)) {
            let g = build_grid(3).unwrap();
            let l = compose(&compose(&a, &b, &g).unwrap(), &c, &g).unwrap();
            let r = compose(&a, &compose(&b, &c, &g).unwrap(), &g).unwrap();
            prop_assert!((l.matrix() - r.matrix()).amax() <= 1e-12 * (1.0 + l.max_abs()));
        }

        #[test]
        fn composed_norm_submultiplicative(a in arb_kernel(4, 2)) {
            let g = build_grid(4).unwrap();
            let n1 = operator_norm(&a, &g).value;
            let n2 = operator_norm(&compose(&a, &a, &g).unwrap(), &g).value;
            prop_assert!(n2 <= n1 * n1 * (1.0 + 1e-6) + 1e-12);
        }
    }

    #[test]
    fn midpoint_apply_converges_at_second_order() {
        // smooth kernel against a smooth field, compare at the fixed label u = 0.5
        // (the midpoint grid with odd n contains it)
        let kernel = |u: f64, v: f64| (u * v).exp();
        let field = |v: f64| (2.0 * v).cos();
        let at_half = |n: usize| {
            let g = build_grid(n).unwrap();
            let k = sample_scalar_kernel(&g, kernel).unwrap();
            let x = LabelField::from_vector(1, DVector::from_iterator(n, g.points().iter().map(|&v| field(v))));
            apply_kernel(&k, &x, &g).unwrap().get(n / 2)[0]
        };
        // reference by a much finer midpoint sum
        let reference: f64 = {
            let m = 200_001;
            (0..m).map(|k| (k as f64 + 0.5) / m as f64).map(|v| kernel(0.5, v) * field(v)).sum::<f64>() / m as f64
        };
        let e1 = (at_half(9) - reference).abs();
        let e2 = (at_half(27) - reference).abs();
        let order = (e1 / e2).ln() / 3.0_f64.ln();
        assert_relative_eq!(order, 2.0, epsilon = 0.1);
    }
}
