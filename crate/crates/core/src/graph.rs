//! Sensor graphs and the dense operators derived from them: the normalized
//! adjacency used by the spatiotemporal drift, the scaled Laplacian and its
//! Chebyshev basis for graph convolution, and the stability and stationary
//! covariance analysis of `I - αÂ`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{self, SymEigen};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<Edge>,
    adjacency: Tensor,
}

impl Graph {
    /// Builds a symmetric adjacency; when both directions of an edge are
    /// given the larger weight wins.
    pub fn from_edges(n_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut adj = vec![0.0; n_nodes * n_nodes];
        for e in &edges {
            for id in [e.from, e.to] {
                if id >= n_nodes {
                    return Err(Error::NodeIdOutOfRange { id, n_nodes });
                }
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "edge {}-{} has invalid weight {}",
                    e.from, e.to, e.weight
                )));
            }
            if e.from == e.to {
                return Err(Error::InvalidArgument(format!("self-loop on node {}", e.from)));
            }
            let (i, j) = (e.from, e.to);
            let w = adj[i * n_nodes + j].max(e.weight);
            adj[i * n_nodes + j] = w;
            adj[j * n_nodes + i] = w;
        }
        Ok(Self {
            n_nodes,
            edges,
            adjacency: Tensor::from_vec(&[n_nodes, n_nodes], adj),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.adjacency.data()[i * self.n_nodes + j] > 0.0
    }

    /// `D^{-1/2}(A + I)D^{-1/2}` with `D` the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.n_nodes;
        let a = self.adjacency.data();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| {
                let deg: f64 = 1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>();
                1.0 / deg.sqrt()
            })
            .collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let aij = a[i * n + j] + if i == j { 1.0 } else { 0.0 };
                out[i * n + j] = inv_sqrt[i] * aij * inv_sqrt[j];
            }
        }
        Tensor::from_vec(&[n, n], out)
    }

    /// `L̃ = 2L/λ_max − I` for the symmetric normalized Laplacian
    /// `L = I − D^{-1/2} A D^{-1/2}` (isolated nodes contribute `L_ii = 1`).
    pub fn scaled_laplacian(&self) -> Result<Tensor> {
        let n = self.n_nodes;
        let a = self.adjacency.data();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| {
                let deg: f64 = a[i * n..(i + 1) * n].iter().sum();
                if deg > 0.0 {
                    1.0 / deg.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut lap = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                lap[i * n + j] = id - inv_sqrt[i] * a[i * n + j] * inv_sqrt[j];
            }
        }
        let lambda_max = laplacian_lambda_max(&lap, n)?;
        let mut out = lap;
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                out[i * n + j] = 2.0 * out[i * n + j] / lambda_max - id;
            }
        }
        Ok(Tensor::from_vec(&[n, n], out))
    }
}

/// Dense graphs up to this size get an exact eigensolve for `λ_max`; power
/// iteration can stall when the top of the spectrum is clustered.
const EXACT_LAMBDA_MAX_NODES: usize = 512;

fn laplacian_lambda_max(lap: &[f64], n: usize) -> Result<f64> {
    let lambda = if n <= EXACT_LAMBDA_MAX_NODES {
        let e = linalg::sym_eigen(lap, n)?;
        *e.values.last().unwrap_or(&1.0)
    } else {
        linalg::power_iteration(lap, n, 200, 1e-10)
    };
    // an edgeless graph has L = I
    Ok(if lambda > 1e-12 { lambda } else { 1.0 })
}

/// Parse an edge list: one `from,to,weight` per line, `#` starts a comment.
/// A `# nodes=N` comment fixes the node count; otherwise `n_nodes` is used,
/// falling back to one more than the largest id seen.
pub fn parse_edge_list(text: &str, n_nodes: Option<usize>) -> Result<Graph> {
    let mut edges = Vec::new();
    let mut declared = None;
    let mut first_row = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("nodes=") {
                declared = Some(v.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: e.to_string(),
                })?);
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected `from,to,weight`, got {} fields", fields.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line: lineno + 1,
            message: format!("invalid {what} `{v}`"),
        };
        // a non-numeric first row is a header
        if first_row && fields[0].parse::<usize>().is_err() {
            first_row = false;
            continue;
        }
        first_row = false;
        let from = fields[0].parse::<usize>().map_err(|_| bad("node id", fields[0]))?;
        let to = fields[1].parse::<usize>().map_err(|_| bad("node id", fields[1]))?;
        let weight = fields[2].parse::<f64>().map_err(|_| bad("weight", fields[2]))?;
        edges.push(Edge { from, to, weight });
    }
    let inferred = edges.iter().map(|e| e.from.max(e.to) + 1).max().unwrap_or(0);
    let n = declared.or(n_nodes).unwrap_or(inferred);
    Graph::from_edges(n, edges)
}

/// Chebyshev polynomials `T_0 .. T_{order-1}` of a scaled Laplacian.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebBasis {
    polys: Vec<Tensor>,
}

impl ChebBasis {
    pub fn order(&self) -> usize {
        self.polys.len()
    }

    pub fn polys(&self) -> &[Tensor] {
        &self.polys
    }

    pub fn n_nodes(&self) -> usize {
        self.polys[0].dim(0)
    }
}

pub fn cheb_basis(scaled_laplacian: &Tensor, order: usize) -> Result<ChebBasis> {
    if order == 0 {
        return Err(Error::InvalidArgument("Chebyshev order must be ≥ 1".into()));
    }
    let s = scaled_laplacian.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(shape_mismatch("cheb_basis", s, &[s[0], s[0]]));
    }
    let n = s[0];
    let mut polys = vec![Tensor::eye(n)];
    if order > 1 {
        polys.push(scaled_laplacian.clone());
    }
    for k in 2..order {
        let next = scaled_laplacian
            .matmul(&polys[k - 1])?
            .scale(2.0)
            .sub(&polys[k - 2])?;
        polys.push(next);
    }
    Ok(ChebBasis { polys })
}

/// `M[..., i, ...] = Σ_j A[i][j] · x[..., j, ...]` along `node_axis`.
pub fn neighbor_mean_effect(a: &Tensor, x: &Tensor, node_axis: usize) -> Result<Tensor> {
    let n = a.shape().first().copied().unwrap_or(0);
    if a.rank() != 2 || a.dim(1) != n || node_axis >= x.rank() || x.dim(node_axis) != n {
        return Err(shape_mismatch("neighbor_mean_effect", a.shape(), x.shape()));
    }
    let inner: usize = x.shape()[node_axis + 1..].iter().product();
    let data = crate::kernels::node_mix(a.data(), n, x.data(), inner);
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stability {
    pub stable: bool,
    pub min_real_eig: f64,
}

fn drift_operator(a_norm: &Tensor, alpha: f64) -> Result<(Vec<f64>, usize)> {
    let n = a_norm.shape().first().copied().unwrap_or(0);
    if a_norm.rank() != 2 || a_norm.dim(1) != n {
        return Err(shape_mismatch("drift_operator", a_norm.shape(), &[n, n]));
    }
    let mut f: Vec<f64> = a_norm.data().iter().map(|&v| -alpha * v).collect();
    for i in 0..n {
        f[i * n + i] += 1.0;
    }
    Ok((f, n))
}

/// Eigendecomposition of `I − αA` for symmetric `A`.
pub fn drift_eigen(a_norm: &Tensor, alpha: f64) -> Result<SymEigen> {
    let (f, n) = drift_operator(a_norm, alpha)?;
    let asym = linalg::max_asymmetry(&f, n);
    if asym > 1e-12 {
        return Err(Error::NonSymmetric { max_asymmetry: asym });
    }
    linalg::sym_eigen(&f, n)
}

/// `I − αA` is stable when all its eigenvalues have positive real part.
pub fn stability_check(a_norm: &Tensor, alpha: f64) -> Result<Stability> {
    let e = drift_eigen(a_norm, alpha)?;
    let min_real_eig = e.values.first().copied().unwrap_or(1.0);
    Ok(Stability {
        stable: min_real_eig > 0.0,
        min_real_eig,
    })
}

/// Stationary covariance `V∞` of the spatiotemporal SDE, solving
/// `(I−αA)V + V(I−αA)ᵀ = 2I` through the Kronecker-sum system
/// `(I⊗F + F⊗I) vec(V) = vec(2I)`.
pub fn solve_lyapunov_stationary(a_norm: &Tensor, alpha: f64) -> Result<Tensor> {
    let st = stability_check(a_norm, alpha)?;
    if !st.stable {
        return Err(Error::Unstable {
            min_real_eig: st.min_real_eig,
        });
    }
    let (f, n) = drift_operator(a_norm, alpha)?;
    let nn = n * n;
    // column-major vec: index (i, j) ↦ j*n + i
    let mut k = vec![0.0; nn * nn];
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            // (F V)_{ij} = Σ_l F_il V_lj
            for l in 0..n {
                k[row * nn + (j * n + l)] += f[i * n + l];
            }
            // (V Fᵀ)_{ij} = Σ_l V_il F_jl
            for l in 0..n {
                k[row * nn + (l * n + i)] += f[j * n + l];
            }
        }
    }
    let mut rhs = vec![0.0; nn];
    for i in 0..n {
        rhs[i * n + i] = 2.0;
    }
    let x = linalg::lu_solve(k, nn, rhs)?;
    let mut v = vec![0.0; nn];
    for j in 0..n {
        for i in 0..n {
            v[i * n + j] = x[j * n + i];
        }
    }
    Ok(Tensor::from_vec(&[n, n], v))
}

/// Frobenius norm of `(I−αA)V + V(I−αA)ᵀ − rhs·I`.
pub fn lyapunov_residual(a_norm: &Tensor, alpha: f64, v: &Tensor, rhs: f64) -> Result<f64> {
    let (f, n) = drift_operator(a_norm, alpha)?;
    let f = Tensor::from_vec(&[n, n], f);
    let fv = f.matmul(v)?;
    let vft = v.matmul(&f.transpose()?)?;
    let mut r = fv.add(&vft)?;
    for i in 0..n {
        r.data_mut()[i * n + i] -= rhs;
    }
    Ok(r.sum_sq().sqrt())
}
