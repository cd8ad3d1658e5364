//! Crowd graph construction and per-particle collectiveness.
//!
//! Edges join each particle to its K nearest neighbours (by position) with
//! weight `max(cos(v_i, v_j), 0)`. Path similarities decay geometrically with
//! path length, which sums to `Z = (I - zW)^{-1} - I`; a particle's
//! collectiveness is its row sum of `Z`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracker::{ParticleTrack, Point};

/// Node count above which solves switch from dense elimination to fixed-point iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

/// Stopping tolerance for the iterative solver.
pub const ITERATIVE_TOLERANCE: f64 = 1e-10;

/// Compressed sparse row matrix, square.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists. Zero values are dropped.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} rows for an {n}x{n} matrix",
                rows.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|(c, _)| *c);
            for (c, v) in row {
                if c >= n {
                    return Err(Error::ShapeMismatch(format!("column {c} out of range for n={n}")));
                }
                if !v.is_finite() {
                    return Err(Error::param("non-finite matrix entry"));
                }
                if v != 0.0 {
                    if cols.len() > *row_ptr.last().unwrap() && *cols.last().unwrap() == c {
                        return Err(Error::param(format!("duplicate column {c}")));
                    }
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let rows = (0..m.n)
            .map(|i| m.row(i).iter().enumerate().map(|(j, v)| (j, *v)).collect())
            .collect();
        Self::from_rows(m.n, rows).expect("dense matrix is well formed")
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n).map(|i| self.row_nnz(i)).max().unwrap_or(0)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d.data[i * self.n + j] = v;
            }
        }
        d
    }
}

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("matrix rows must all have length n".into()));
        }
        Ok(Self { n, data: rows.concat() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.n, other.n, "matrix sizes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self * s` for sparse `s`.
    fn mul_sparse(&self, s: &SparseMatrix, scale: f64) -> DenseMatrix {
        let n = self.n;
        let mut out = DenseMatrix::zeros(n);
        for i in 0..n {
            let dst = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (j, w) in s.row(k) {
                    dst[j] += a * scale * w;
                }
            }
        }
        out
    }
}

/// Cosine of the angle between two velocities; 0 when either speed is below `speed_eps`.
pub fn velocity_correlation(vi: (f64, f64), vj: (f64, f64), speed_eps: f64) -> f64 {
    let ni = vi.0.hypot(vi.1);
    let nj = vj.0.hypot(vj.1);
    if ni < speed_eps || nj < speed_eps || ni == 0.0 || nj == 0.0 {
        return 0.0;
    }
    ((vi.0 * vj.0 + vi.1 * vj.1) / (ni * nj)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub k: usize,
    pub speed_eps: f64,
    pub min_displacement: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            k: 20,
            speed_eps: 1e-6,
            min_displacement: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: u64,
    pub position: Point,
    pub velocity: (f64, f64),
}

/// Directed K-NN crowd graph at one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdGraph {
    pub keyframe: usize,
    pub nodes: Vec<GraphNode>,
    pub k: usize,
    pub weights: SparseMatrix,
}

/// Indices of the `k` nearest nodes to `i` (excluding `i`), ties broken by index.
fn nearest_neighbors(positions: &[Point], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = positions
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, p)| {
            let dx = p.x - positions[i].x;
            let dy = p.y - positions[i].y;
            (dx * dx + dy * dy, j)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Builds the crowd graph from the particles that moved into `keyframe`.
///
/// A particle participates when it has a sample at `keyframe` and at the
/// previous keyframe, and its displacement is at least `min_displacement`.
/// Nodes are ordered by track id.
pub fn build_graph(tracks: &[ParticleTrack], keyframe: usize, params: &GraphParams) -> Result<CrowdGraph> {
    if params.k < 1 {
        return Err(Error::param("K must be at least 1"));
    }
    let mut nodes: Vec<GraphNode> = tracks
        .iter()
        .filter_map(|t| {
            let v = t.velocity_at(keyframe)?;
            let p = t.point_at(keyframe)?.position();
            (v.0.hypot(v.1) >= params.min_displacement).then_some(GraphNode {
                id: t.id,
                position: p,
                velocity: v,
            })
        })
        .collect();
    if nodes.len() < 2 {
        return Err(Error::GraphUnderpopulated);
    }
    nodes.sort_by_key(|n| n.id);

    let positions: Vec<Point> = nodes.iter().map(|n| n.position).collect();
    let rows: Vec<Vec<(usize, f64)>> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            nearest_neighbors(&positions, i, params.k)
                .into_iter()
                .map(|j| {
                    let c = velocity_correlation(nodes[i].velocity, nodes[j].velocity, params.speed_eps);
                    (j, c.max(0.0))
                })
                .collect()
        })
        .collect();
    let weights = SparseMatrix::from_rows(nodes.len(), rows)?;
    Ok(CrowdGraph {
        keyframe,
        nodes,
        k: params.k,
        weights,
    })
}

fn check_decay(w: &SparseMatrix, z: f64) -> Result<()> {
    let k = w.max_row_nnz() as f64;
    if !(z > 0.0) || !z.is_finite() || z * k >= 1.0 {
        return Err(Error::DecayOutOfRange);
    }
    Ok(())
}

/// Decayed path-similarity matrix `Z = (I - zW)^{-1} - I`.
///
/// Computed by solving `(I - zW) Z = zW`; no inverse is formed.
pub fn z_closed_form(w: &SparseMatrix, z: f64) -> Result<DenseMatrix> {
    check_decay(w, z)?;
    if w.n() <= DIRECT_SOLVE_LIMIT {
        solve_dense(w, z)
    } else {
        Ok(solve_fixed_point(w, z))
    }
}

/// Gaussian elimination on `[I - zW | zW]` without pivoting.
///
/// `I - zW` is a strictly diagonally dominant M-matrix under the decay
/// precondition, so elimination is stable without pivoting, every
/// multiplier is non-positive, and both the right-hand side and the
/// solution stay entrywise non-negative.
fn solve_dense(w: &SparseMatrix, z: f64) -> Result<DenseMatrix> {
    let n = w.n();
    let mut m = vec![0.0f64; n * n];
    let mut rhs = vec![0.0f64; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
        for (j, v) in w.row(i) {
            m[i * n + j] -= z * v;
            rhs[i * n + j] += z * v;
        }
    }
    eliminate(&mut m, &mut rhs, n, n)?;
    Ok(DenseMatrix { n, data: rhs })
}

/// In-place forward elimination and back substitution; `rhs` holds `cols` columns per row.
fn eliminate(m: &mut [f64], rhs: &mut [f64], n: usize, cols: usize) -> Result<()> {
    for k in 0..n {
        let pivot = m[k * n + k];
        if !(pivot > 0.0) {
            return Err(Error::Singular);
        }
        let (upper, lower) = m.split_at_mut((k + 1) * n);
        let pivot_row = &upper[k * n..(k + 1) * n];
        let (rhs_upper, rhs_lower) = rhs.split_at_mut((k + 1) * cols);
        let rhs_pivot = &rhs_upper[k * cols..(k + 1) * cols];
        for (row, rhs_row) in lower.chunks_exact_mut(n).zip(rhs_lower.chunks_exact_mut(cols)) {
            let l = row[k] / pivot;
            if l == 0.0 {
                continue;
            }
            row[k] = 0.0;
            for j in k + 1..n {
                row[j] -= l * pivot_row[j];
            }
            for (r, p) in rhs_row.iter_mut().zip(rhs_pivot) {
                *r -= l * p;
            }
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            let a = m[i * n + j];
            if a == 0.0 {
                continue;
            }
            let (head, tail) = rhs.split_at_mut(j * cols);
            let xj = &tail[..cols];
            for (r, x) in head[i * cols..(i + 1) * cols].iter_mut().zip(xj) {
                *r -= a * x;
            }
        }
        let d = m[i * n + i];
        for r in &mut rhs[i * cols..(i + 1) * cols] {
            *r /= d;
        }
    }
    Ok(())
}

/// Iterates `Z <- zW (I + Z)` until the a-posteriori error bound drops below tolerance.
fn solve_fixed_point(w: &SparseMatrix, z: f64) -> DenseMatrix {
    let n = w.n();
    let rate = z * w.max_row_nnz() as f64;
    let mut current = w.to_dense();
    current.data.iter_mut().for_each(|v| *v *= z);
    let base = current.clone();
    loop {
        let mut next = w.to_dense();
        // (I + Z)^T is not needed: row i of zW(I+Z) = z * sum_k W[i,k] (e_k + Z[k,:]).
        for i in 0..n {
            let dst = &mut next.data[i * n..(i + 1) * n];
            dst.copy_from_slice(base.row(i));
            for (k, wik) in w.row(i) {
                let src = &current.data[k * n..(k + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += z * wik * s;
                }
            }
        }
        let step = next.max_abs_diff(&current);
        current = next;
        if step * rate / (1.0 - rate) <= ITERATIVE_TOLERANCE {
            return current;
        }
    }
}

/// Truncated path-similarity series `sum_{L=1}^{max_len} z^L W^L`.
pub fn z_series(w: &SparseMatrix, z: f64, max_len: usize) -> Result<DenseMatrix> {
    check_decay(w, z)?;
    if max_len < 1 {
        return Err(Error::param("series length must be at least 1"));
    }
    let mut term = w.to_dense();
    term.data.iter_mut().for_each(|v| *v *= z);
    let mut acc = term.clone();
    for _ in 1..max_len {
        term = term.mul_sparse(w, z);
        for (a, t) in acc.data.iter_mut().zip(&term.data) {
            *a += t;
        }
    }
    Ok(acc)
}

/// Row sums of `Z`.
pub fn particle_collectiveness(z_matrix: &DenseMatrix) -> Vec<f64> {
    (0..z_matrix.n()).map(|i| z_matrix.row(i).iter().sum()).collect()
}

/// Collectiveness vector without materialising `Z`: solves `(I - zW) phi = zW 1`.
pub fn collectiveness_direct(w: &SparseMatrix, z: f64) -> Result<Vec<f64>> {
    check_decay(w, z)?;
    let n = w.n();
    let mut rhs: Vec<f64> = (0..n).map(|i| z * w.row(i).map(|(_, v)| v).sum::<f64>()).collect();
    if n <= DIRECT_SOLVE_LIMIT {
        let mut m = vec![0.0f64; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            for (j, v) in w.row(i) {
                m[i * n + j] -= z * v;
            }
        }
        eliminate(&mut m, &mut rhs, n, 1)?;
        Ok(rhs)
    } else {
        let rate = z * w.max_row_nnz() as f64;
        let base = rhs.clone();
        let mut phi = rhs;
        loop {
            let next: Vec<f64> = (0..n)
                .map(|i| base[i] + w.row(i).map(|(k, v)| z * v * phi[k]).sum::<f64>())
                .collect();
            let step = next.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            phi = next;
            if step * rate / (1.0 - rate) <= ITERATIVE_TOLERANCE {
                return Ok(phi);
            }
        }
    }
}

/// Upper bound `z / (1 - zK)` on the entries of `Z`.
pub fn kappa(z: f64, k: usize) -> Result<f64> {
    let zk = z * k as f64;
    if !(z > 0.0) || !(zk < 1.0) {
        return Err(Error::KappaUndefined);
    }
    Ok(z / (1.0 - zk))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectivenessResult {
    pub phi: Vec<f64>,
    pub kappa: f64,
    pub threshold: f64,
    pub kept: Vec<bool>,
    pub z: f64,
}

impl CollectivenessResult {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|k| **k).count()
    }
}

/// Keeps particles whose collectiveness reaches `factor * kappa`.
pub fn filter_outliers(phi: &[f64], z: f64, k: usize, factor: f64) -> Result<CollectivenessResult> {
    let kappa = kappa(z, k)?;
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::param("threshold factor must be positive"));
    }
    let threshold = factor * kappa;
    Ok(CollectivenessResult {
        phi: phi.to_vec(),
        kappa,
        threshold,
        kept: phi.iter().map(|p| *p >= threshold).collect(),
        z,
    })
}

/// Per-keyframe diagnostic record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeDiagnostics {
    pub t: usize,
    pub kappa: f64,
    pub phi: Vec<f64>,
    pub kept: Vec<bool>,
}

impl KeyframeDiagnostics {
    pub fn new(t: usize, result: &CollectivenessResult) -> Self {
        Self {
            t,
            kappa: result.kappa,
            phi: result.phi.clone(),
            kept: result.kept.clone(),
        }
    }
}

/// Graph, collectiveness and filtering for one keyframe.
pub fn analyze_keyframe(
    tracks: &[ParticleTrack],
    keyframe: usize,
    params: &GraphParams,
    z: f64,
    factor: f64,
) -> Result<(CrowdGraph, CollectivenessResult)> {
    // Validate z against the configured K up front so that sparse rows cannot mask a bad config.
    kappa(z, params.k).map_err(|_| Error::DecayOutOfRange)?;
    let graph = build_graph(tracks, keyframe, params)?;
    let phi = collectiveness_direct(&graph.weights, z)?;
    let result = filter_outliers(&phi, z, params.k, factor)?;
    Ok((graph, result))
}
