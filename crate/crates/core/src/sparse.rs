//! Compressed sparse storage, fill-reducing ordering and a left-looking
//! sparse LU with partial pivoting (Gilbert-Peierls).

use std::collections::BTreeSet;
use std::ops::{AddAssign, Mul};

use serde::{Deserialize, Serialize};

/// Compressed sparse row matrix. Column indices are sorted within each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<T>,
}

impl<T> CsrMatrix<T>
where
    T: Copy + Default + AddAssign,
{
    /// Assembles a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed in insertion order, so assembly is deterministic.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        // stable: duplicate entries keep insertion order
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));

        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        let span = self.indptr[row]..self.indptr[row + 1];
        match self.indices[span.clone()].binary_search(&col) {
            Ok(pos) => self.data[span.start + pos],
            Err(_) => T::default(),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::default(); self.ncols]; self.nrows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        out
    }
}

impl<T: Copy> CsrMatrix<T> {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T>
    where
        T: Default + AddAssign + Mul<Output = T>,
    {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let mut acc = T::default();
                for (c, v) in self.row(r) {
                    acc += v * x[c];
                }
                acc
            })
            .collect()
    }
}

/// Compressed sparse column matrix of reals, square.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub n: usize,
    pub colptr: Vec<usize>,
    pub rowidx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let n = a.len();
        let mut colptr = vec![0];
        let mut rowidx = Vec::new();
        let mut values = Vec::new();
        for c in 0..n {
            for (r, row) in a.iter().enumerate() {
                if row[c] != 0.0 {
                    rowidx.push(r);
                    values.push(row[c]);
                }
            }
            colptr.push(rowidx.len());
        }
        Self {
            n,
            colptr,
            rowidx,
            values,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for p in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowidx[p]] += self.values[p] * x[c];
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("matrix is structurally or numerically singular at column {column}")]
pub struct SingularMatrix {
    pub column: usize,
}

/// Sparse LU factors `P A = L U` with unit-diagonal `L`.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    l: CscMatrix,
    u: CscMatrix,
    /// `pinv[i] = k`: original row `i` is the `k`-th pivot row.
    pinv: Vec<usize>,
}

/// Relative threshold under which the diagonal entry is still preferred as
/// pivot over the column maximum.
const DIAGONAL_PIVOT_TOL: f64 = 1e-3;

impl SparseLu {
    pub fn factor(a: &CscMatrix) -> Result<Self, SingularMatrix> {
        let n = a.n;
        let cap = 4 * a.values.len() + n;
        let mut l = CscMatrix {
            n,
            colptr: vec![0; n + 1],
            rowidx: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
        };
        let mut u = CscMatrix {
            n,
            colptr: vec![0; n + 1],
            rowidx: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
        };
        let mut pinv = vec![usize::MAX; n];
        let mut x = vec![0.0; n];
        let mut xi = vec![0usize; n];
        let mut work = ReachWork::new(n);

        for k in 0..n {
            l.colptr[k] = l.rowidx.len();
            u.colptr[k] = u.rowidx.len();
            let top = sparse_lower_solve(&l, a, k, &mut xi, &mut x, &pinv, &mut work);

            let mut ipiv = usize::MAX;
            let mut best = -1.0f64;
            for &i in &xi[top..n] {
                if pinv[i] == usize::MAX {
                    let t = x[i].abs();
                    if t > best {
                        best = t;
                        ipiv = i;
                    }
                } else {
                    u.rowidx.push(pinv[i]);
                    u.values.push(x[i]);
                }
            }
            if ipiv == usize::MAX || best <= 0.0 || !best.is_finite() {
                return Err(SingularMatrix { column: k });
            }
            if pinv[k] == usize::MAX && x[k].abs() >= best * DIAGONAL_PIVOT_TOL {
                ipiv = k;
            }
            let pivot = x[ipiv];
            u.rowidx.push(k);
            u.values.push(pivot);
            pinv[ipiv] = k;
            l.rowidx.push(ipiv);
            l.values.push(1.0);
            for &i in &xi[top..n] {
                if pinv[i] == usize::MAX {
                    l.rowidx.push(i);
                    l.values.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        l.colptr[n] = l.rowidx.len();
        u.colptr[n] = u.rowidx.len();
        for r in l.rowidx.iter_mut() {
            *r = pinv[*r];
        }
        Ok(Self { n, l, u, pinv })
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let mut x = vec![0.0; self.n];
        for (i, &bi) in b.iter().enumerate() {
            x[self.pinv[i]] = bi;
        }
        // L: unit diagonal stored first in each column
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l.colptr[j] + 1..self.l.colptr[j + 1] {
                    x[self.l.rowidx[p]] -= self.l.values[p] * xj;
                }
            }
        }
        // U: diagonal stored last in each column
        for j in (0..self.n).rev() {
            let last = self.u.colptr[j + 1] - 1;
            x[j] /= self.u.values[last];
            let xj = x[j];
            if xj != 0.0 {
                for p in self.u.colptr[j]..last {
                    x[self.u.rowidx[p]] -= self.u.values[p] * xj;
                }
            }
        }
        b.copy_from_slice(&x);
    }

    pub fn fill_in(&self) -> usize {
        self.l.values.len() + self.u.values.len()
    }
}

struct ReachWork {
    marked: Vec<bool>,
    stack: Vec<usize>,
    ptr: Vec<usize>,
}

impl ReachWork {
    fn new(n: usize) -> Self {
        Self {
            marked: vec![false; n],
            stack: Vec::with_capacity(n),
            ptr: vec![0; n],
        }
    }
}

/// Solves `L x = A(:, k)` for the partially built `L`. Returns `top` such that
/// `xi[top..n]` holds the nonzero pattern of `x` in topological order.
fn sparse_lower_solve(
    l: &CscMatrix,
    a: &CscMatrix,
    k: usize,
    xi: &mut [usize],
    x: &mut [f64],
    pinv: &[usize],
    work: &mut ReachWork,
) -> usize {
    let n = a.n;
    let mut top = n;
    for p in a.colptr[k]..a.colptr[k + 1] {
        let root = a.rowidx[p];
        if !work.marked[root] {
            top = depth_first(l, root, top, xi, pinv, work);
        }
    }
    for &i in &xi[top..n] {
        work.marked[i] = false;
        x[i] = 0.0;
    }
    for p in a.colptr[k]..a.colptr[k + 1] {
        x[a.rowidx[p]] = a.values[p];
    }
    for px in top..n {
        let j = xi[px];
        let col = pinv[j];
        if col == usize::MAX {
            continue;
        }
        let xj = x[j];
        for p in l.colptr[col] + 1..l.colptr[col + 1] {
            x[l.rowidx[p]] -= l.values[p] * xj;
        }
    }
    top
}

fn depth_first(
    l: &CscMatrix,
    root: usize,
    mut top: usize,
    xi: &mut [usize],
    pinv: &[usize],
    work: &mut ReachWork,
) -> usize {
    work.stack.clear();
    work.stack.push(root);
    while let Some(&j) = work.stack.last() {
        let col = pinv[j];
        if !work.marked[j] {
            work.marked[j] = true;
            work.ptr[j] = if col == usize::MAX { 0 } else { l.colptr[col] };
        }
        let end = if col == usize::MAX { 0 } else { l.colptr[col + 1] };
        let mut descended = false;
        while work.ptr[j] < end {
            let i = l.rowidx[work.ptr[j]];
            work.ptr[j] += 1;
            if !work.marked[i] {
                work.stack.push(i);
                descended = true;
                break;
            }
        }
        if !descended {
            work.stack.pop();
            top -= 1;
            xi[top] = j;
        }
    }
    top
}

/// Minimum-degree elimination order on an undirected graph given as
/// adjacency lists. Ties break toward the lowest node index.
pub fn minimum_degree_order(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut graph: Vec<BTreeSet<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().copied().filter(|&j| j != i).collect())
        .collect();
    for i in 0..n {
        let nbrs: Vec<usize> = graph[i].iter().copied().collect();
        for j in nbrs {
            graph[j].insert(i);
        }
    }
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&i| !eliminated[i])
            .min_by_key(|&i| (graph[i].len(), i))
            .unwrap();
        eliminated[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut graph[v]).into_iter().collect();
        for &a in &nbrs {
            graph[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    graph[a].insert(b);
                }
            }
        }
    }
    order
}
