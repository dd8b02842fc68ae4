//! Undirected graphs and symmetric doubly stochastic communication matrices.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{eig_sym, SpectralDecomp};

/// Entries in `[-CLAMP_TOL, 0)` are rounded to zero.
pub const CLAMP_TOL: f64 = 1e-12;
pub const ROW_SUM_TOL: f64 = 1e-9;
pub const TOP_EIGEN_TOL: f64 = 1e-9;
/// Required margin of the smallest eigenvalue above -1.
pub const BOTTOM_EIGEN_MARGIN: f64 = 1e-9;

/// Simple undirected graph on nodes `0..n`. Edges are stored as `(i, j)`
/// with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    Complete,
    Star,
    Cycle,
    Path,
}

impl GraphFamily {
    pub fn min_nodes(self) -> usize {
        match self {
            GraphFamily::Complete | GraphFamily::Path => 1,
            GraphFamily::Star => 2,
            GraphFamily::Cycle => 3,
        }
    }
}

impl fmt::Display for GraphFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GraphFamily::Complete => "complete",
            GraphFamily::Star => "star",
            GraphFamily::Cycle => "cycle",
            GraphFamily::Path => "path",
        };
        f.write_str(name)
    }
}

impl Graph {
    pub fn new<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {{{i},{j}}} has an endpoint outside 0..{n}"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            if !set.insert((i.min(j), i.max(j))) {
                return Err(Error::InvalidGraph(format!("duplicate edge {{{i},{j}}}")));
            }
        }
        Ok(Graph { n, edges: set })
    }

    pub fn empty(n: usize) -> Result<Self> {
        Graph::new(n, std::iter::empty())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    /// Unordered pairs `i < j` that are not edges, in lexicographic order.
    pub fn non_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if !self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.edges.len() == self.n * (self.n - 1) / 2
    }

    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn with_edge(&self, i: usize, j: usize) -> Result<Graph> {
        Graph::new(self.n, self.edges().chain(std::iter::once((i, j))))
    }

    pub fn without_edge(&self, i: usize, j: usize) -> Graph {
        let mut g = self.clone();
        g.edges.remove(&(i.min(j), i.max(j)));
        g
    }

    /// Erdős–Rényi G(n, p).
    pub fn erdos_renyi<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Graph> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Graph::new(n, edges)
    }

    /// G(n, p) resampled until connected.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Graph> {
        if n > 1 && p <= 0.0 {
            return Err(Error::InvalidGraph("p must be positive for n > 1".into()));
        }
        loop {
            let g = Graph::erdos_renyi(n, p, rng)?;
            if g.is_connected() {
                return Ok(g);
            }
        }
    }
}

/// Builds one of the named families.
pub fn build_named_graph(family: GraphFamily, n: usize) -> Result<Graph> {
    if n < family.min_nodes() {
        return Err(Error::InvalidGraph(format!(
            "{family} graph requires n >= {}, got {n}",
            family.min_nodes()
        )));
    }
    let edges: Vec<(usize, usize)> = match family {
        GraphFamily::Complete => (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect(),
        GraphFamily::Star => (1..n).map(|j| (0, j)).collect(),
        GraphFamily::Cycle => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        GraphFamily::Path => (1..n).map(|i| (i - 1, i)).collect(),
    };
    Graph::new(n, edges)
}

/// Graph Laplacian `D - A`.
pub fn laplacian(g: &Graph) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(g.n, g.n);
    for (i, j) in g.edges() {
        l[(i, j)] = -1.0;
        l[(j, i)] = -1.0;
        l[(i, i)] += 1.0;
        l[(j, j)] += 1.0;
    }
    l
}

/// Symmetric doubly stochastic weight matrix together with its spectrum.
///
/// The leading eigenvector is pinned to the constant vector `1/sqrt(N)`,
/// even when the eigenvalue 1 is repeated (disconnected graphs).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommMatrix {
    p: DMatrix<f64>,
    graph: Graph,
    spectrum: SpectralDecomp,
}

impl CommMatrix {
    /// Validates an explicit weight matrix. The support graph is read off
    /// the positive off-diagonal entries; if `graph` is given, the support
    /// must lie inside it.
    pub fn from_matrix(p: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self> {
        let n = p.nrows();
        if n == 0 || p.ncols() != n {
            return Err(Error::InvalidCommMatrix(format!(
                "expected a non-empty square matrix, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        let mut p = p;
        for i in 0..n {
            for j in 0..n {
                let x = p[(i, j)];
                if !x.is_finite() {
                    return Err(Error::InvalidCommMatrix(format!("p[{i}][{j}] is not finite")));
                }
                if x < 0.0 {
                    if x >= -CLAMP_TOL {
                        p[(i, j)] = 0.0;
                    } else {
                        return Err(Error::InvalidCommMatrix(format!(
                            "p[{i}][{j}] = {x:e} is negative"
                        )));
                    }
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if p[(i, j)] != p[(j, i)] {
                    return Err(Error::InvalidCommMatrix(format!(
                        "p[{i}][{j}] = {} differs from p[{j}][{i}] = {}",
                        p[(i, j)],
                        p[(j, i)]
                    )));
                }
            }
        }
        for i in 0..n {
            let s: f64 = p.row(i).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidCommMatrix(format!(
                    "row {i} sums to {s}, expected 1"
                )));
            }
        }
        let support: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| p[(i, j)] > 0.0)
            .collect();
        if let Some(g) = graph {
            if g.n() != n {
                return Err(Error::DimensionMismatch {
                    expected: g.n(),
                    got: n,
                });
            }
            if let Some(&(i, j)) = support.iter().find(|&&(i, j)| !g.has_edge(i, j)) {
                return Err(Error::InvalidCommMatrix(format!(
                    "p[{i}][{j}] = {} > 0 but {{{i},{j}}} is not an edge",
                    p[(i, j)]
                )));
            }
        }
        let support = Graph::new(n, support)?;

        let mut spectrum = eig_sym(&p)?;
        let top = spectrum.eigenvalues[0];
        if (top - 1.0).abs() > TOP_EIGEN_TOL {
            return Err(Error::InvalidCommMatrix(format!(
                "largest eigenvalue is {top}, expected 1"
            )));
        }
        let bottom = spectrum.eigenvalues[n - 1];
        if bottom <= -1.0 + BOTTOM_EIGEN_MARGIN {
            return Err(Error::InvalidCommMatrix(format!(
                "smallest eigenvalue {bottom} is not above -1 + {BOTTOM_EIGEN_MARGIN:e}"
            )));
        }
        pin_consensus_vector(&mut spectrum)?;

        Ok(CommMatrix {
            p,
            graph: support,
            spectrum,
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        CommMatrix::from_matrix(DMatrix::identity(n, n), None)
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[(i, j)]
    }

    /// Support graph (positive off-diagonal entries).
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn spectrum(&self) -> &SpectralDecomp {
        &self.spectrum
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.spectrum.eigenvalues
    }

    pub fn lambda_min(&self) -> f64 {
        *self.spectrum.eigenvalues.last().expect("non-empty spectrum")
    }

    /// `lambda_2`, or `None` for a single node.
    pub fn lambda_second(&self) -> Option<f64> {
        self.spectrum.eigenvalues.get(1).copied()
    }

    pub fn eigenvector(&self, k: usize) -> DVector<f64> {
        self.spectrum.eigenvectors.column(k).into_owned()
    }

    pub fn trace(&self) -> f64 {
        self.p.trace()
    }

    /// Positive semi-definite up to `-1e-10`.
    pub fn is_psd(&self) -> bool {
        self.lambda_min() >= -1e-10
    }

    pub fn min_diagonal(&self) -> f64 {
        self.p.diagonal().min()
    }

    /// Applies `P ± eps * dP(i, j)`; see [`edge_delta`].
    pub fn perturb(&self, pert: EdgePerturbation, sign: PerturbSign) -> Result<CommMatrix> {
        let EdgePerturbation { i, j, eps } = pert;
        let n = self.n();
        if i >= n || j >= n {
            return Err(Error::InvalidPerturbation(format!(
                "pair {{{i},{j}}} is outside 0..{n}"
            )));
        }
        if i == j {
            return Err(Error::InvalidPerturbation(format!("pair {{{i},{j}}} is a self-loop")));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidPerturbation(format!("eps = {eps} must be positive")));
        }
        let mut p = self.p.clone();
        match sign {
            PerturbSign::Add => {
                if self.p[(i, j)] != 0.0 {
                    return Err(Error::InvalidPerturbation(format!(
                        "p[{i}][{j}] = {} is already nonzero",
                        self.p[(i, j)]
                    )));
                }
                let limit = self.p[(i, i)].min(self.p[(j, j)]);
                if eps >= limit {
                    let (which, val) = if self.p[(i, i)] <= self.p[(j, j)] {
                        (i, self.p[(i, i)])
                    } else {
                        (j, self.p[(j, j)])
                    };
                    return Err(Error::InvalidPerturbation(format!(
                        "eps = {eps} must be below p[{which}][{which}] = {val}"
                    )));
                }
                p[(i, i)] -= eps;
                p[(j, j)] -= eps;
                p[(i, j)] = eps;
                p[(j, i)] = eps;
            }
            PerturbSign::Remove => {
                let w = self.p[(i, j)];
                if w <= 0.0 {
                    return Err(Error::InvalidPerturbation(format!(
                        "p[{i}][{j}] = {w} is not an edge weight"
                    )));
                }
                if (w - eps).abs() > 1e-12 * w.max(1.0) {
                    return Err(Error::InvalidPerturbation(format!(
                        "eps = {eps} differs from p[{i}][{j}] = {w}"
                    )));
                }
                p[(i, i)] += w;
                p[(j, j)] += w;
                p[(i, j)] = 0.0;
                p[(j, i)] = 0.0;
            }
        }
        CommMatrix::from_matrix(p, None)
    }
}

/// Replaces the eigenvector block for eigenvalue 1 with an orthonormal basis
/// whose first member is `1/sqrt(N)`.
fn pin_consensus_vector(spec: &mut SpectralDecomp) -> Result<()> {
    let n = spec.dim();
    let m = spec
        .eigenvalues
        .iter()
        .take_while(|&&l| (l - 1.0).abs() <= TOP_EIGEN_TOL)
        .count();
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut basis = vec![ones.clone()];
    if m > 1 {
        // Remove the all-ones direction from the block; the remainder has
        // rank m - 1 and its dominant right singular vectors span it.
        let block = spec.eigenvectors.columns(0, m).into_owned();
        let coeffs = ones.transpose() * &block;
        let residual = &block - &ones * coeffs;
        let gram = residual.transpose() * &residual;
        let small = eig_sym(&gram)?;
        for k in 0..(m - 1) {
            let v = &residual * small.eigenvectors.column(k);
            let norm = v.norm();
            if norm < 1e-6 {
                return Err(Error::Numerical("failed to pin the consensus eigenvector".into()));
            }
            basis.push(v / norm);
        }
    }
    for (k, mut b) in basis.into_iter().enumerate() {
        if k > 0 {
            let scale = b.amax();
            if let Some(first) = b.iter().find(|x| x.abs() > 1e-12 * scale) {
                if *first < 0.0 {
                    b.neg_mut();
                }
            }
        }
        spec.eigenvectors.set_column(k, &b);
    }
    Ok(())
}

/// `P = I - beta * L`. Requires a nonnegative diagonal and `lambda_N(P) > -1`.
pub fn comm_from_laplacian(g: &Graph, beta: f64) -> Result<CommMatrix> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::param("beta", format!("{beta} must be a finite nonnegative number")));
    }
    let l = laplacian(g);
    let n = g.n();
    for (i, d) in g.degrees().into_iter().enumerate() {
        let diag = 1.0 - beta * d as f64;
        if diag < -CLAMP_TOL {
            return Err(Error::param(
                "beta",
                format!("{beta} makes p[{i}][{i}] = {diag} negative (degree {d})"),
            ));
        }
    }
    let p = DMatrix::identity(n, n) - l * beta;
    CommMatrix::from_matrix(p, Some(g)).map_err(|e| match e {
        Error::InvalidCommMatrix(msg) => Error::param("beta", msg),
        other => other,
    })
}

/// Convenience for the complete graph with `beta = scale / N`.
pub fn comm_complete_scaled(n: usize, scale: f64) -> Result<CommMatrix> {
    let g = build_named_graph(GraphFamily::Complete, n)?;
    comm_from_laplacian(&g, scale / n as f64)
}

/// Metropolis–Hastings weights `p_ij = 1/(1 + max(d_i, d_j))`.
pub fn comm_metropolis(g: &Graph) -> Result<CommMatrix> {
    let n = g.n();
    let deg = g.degrees();
    let mut p = DMatrix::zeros(n, n);
    for (i, j) in g.edges() {
        let w = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        p[(i, j)] = w;
        p[(j, i)] = w;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| p[(i, j)]).sum();
        p[(i, i)] = 1.0 - off;
    }
    CommMatrix::from_matrix(p, Some(g))
}

/// Edge function matrix `dP(i, j) = -(e_i - e_j)(e_i - e_j)^T`.
pub fn edge_delta(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    d[(i, i)] = -1.0;
    d[(j, j)] = -1.0;
    d[(i, j)] = 1.0;
    d[(j, i)] = 1.0;
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePerturbation {
    pub i: usize,
    pub j: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbSign {
    /// `P + eps * dP`: moves `eps` of self-reliance onto a new edge.
    Add,
    /// `P - eps * dP`: deletes an edge of weight `eps`.
    Remove,
}
