//! Symmetric sparse matrices and a sparse Cholesky solver.

use std::io::{BufRead, Write};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Error, Result};

/// Square sparse matrix stored row-major with sorted, unique column indices.
///
/// Both triangles are stored. Entries are kept in canonical `(row, col)`
/// order so that serialization is bit-stable.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrixSym {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrixSym {
    /// Sums duplicate entries. Structural symmetry is not checked here; see
    /// [`SparseMatrixSym::is_symmetric`].
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(i, j, _)) = triplets.iter().find(|&&(i, j, _)| i >= n || j >= n) {
            return Err(Error::InvalidArgument(format!("entry ({i}, {j}) outside a {n}x{n} matrix")));
        }
        if let Some(&(i, j, v)) = triplets.iter().find(|t| !t.2.is_finite()) {
            return Err(Error::Numerical(format!("non-finite entry {v} at ({i}, {j})")));
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseMatrixSym { n, row_ptr, cols, vals })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Canonical `(row, col, value)` triplets.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn write_text(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "sparsesym {} {}", self.n, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(out, "{i} {j} {v}")?;
        }
        Ok(())
    }

    pub fn read_text(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty matrix file".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (n, nnz) = match parts.as_slice() {
            ["sparsesym", n, nnz] => (
                n.parse::<usize>().map_err(|_| Error::Format("bad dimension".into()))?,
                nnz.parse::<usize>().map_err(|_| Error::Format("bad entry count".into()))?,
            ),
            _ => return Err(Error::Format(format!("bad matrix header `{header}`"))),
        };
        let mut triplets = Vec::with_capacity(nnz);
        for line in lines {
            let line = line?;
            let p: Vec<&str> = line.split_whitespace().collect();
            let [i, j, v] = p.as_slice() else {
                return Err(Error::Format(format!("bad matrix line `{line}`")));
            };
            let bad = || Error::Format(format!("bad matrix line `{line}`"));
            triplets.push((
                i.parse().map_err(|_| bad())?,
                j.parse().map_err(|_| bad())?,
                v.parse().map_err(|_| bad())?,
            ));
        }
        if triplets.len() != nnz {
            return Err(Error::Format(format!("expected {nnz} entries, found {}", triplets.len())));
        }
        SparseMatrixSym::from_triplets(n, triplets)
    }
}

/// Sparse `LLᵀ` factorization, computed once and reused for many solves.
///
/// Runs single-threaded so that results are bitwise reproducible.
pub struct Cholesky {
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
}

impl std::fmt::Debug for Cholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cholesky").field("n", &self.dim()).finish()
    }
}

impl Cholesky {
    /// Factors the symmetric positive definite matrix given by its lower
    /// triangle (`row >= col`); upper entries are ignored.
    pub fn factor(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let lower: Vec<Triplet<usize, usize, f64>> = entries
            .iter()
            .filter(|&&(i, j, _)| i >= j)
            .map(|&(i, j, v)| Triplet::new(i, j, v))
            .collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &lower)
            .map_err(|e| Error::Numerical(format!("cannot assemble matrix: {e:?}")))?;
        let symbolic = factorize_symbolic_cholesky(
            a.symbolic(),
            Side::Lower,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams::default(),
        )
        .map_err(|e| Error::Numerical(format!("symbolic factorization failed: {e:?}")))?;
        let mut values = vec![0.0; symbolic.len_val()];
        let mut mem = MemBuffer::new(symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
        symbolic
            .factorize_numeric_llt(
                &mut values,
                a.as_ref(),
                Side::Lower,
                LltRegularization::default(),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| Error::Numerical(format!("matrix is not positive definite: {e:?}")))?;
        Ok(Cholesky { symbolic, values })
    }

    pub fn dim(&self) -> usize {
        self.symbolic.nrows()
    }

    /// Solves `A X = B` in place for `ncols` right-hand sides stored
    /// column-major in `rhs`.
    pub fn solve_in_place(&self, rhs: &mut [f64], ncols: usize) {
        let n = self.dim();
        assert_eq!(rhs.len(), n * ncols);
        if n == 0 {
            return;
        }
        let llt = LltRef::new(&self.symbolic, &self.values);
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(ncols, Par::Seq));
        let mat = MatMut::from_column_major_slice_mut(rhs, n, ncols);
        llt.solve_in_place_with_conj(Conj::No, mat, Par::Seq, MemStack::new(&mut mem));
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x, 1);
        x
    }
}
