//! Multimodal interaction graph and its low/high-pass filters.
//!
//! A conversation of `N` utterances becomes a `3N`-node graph. Nodes are laid
//! out modality-major: text nodes `0..N`, audio `N..2N`, visual `2N..3N`.
//! Same-modal nodes are connected inside a sliding window of radius `k`, and
//! the three nodes of each utterance are connected to each other.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const N_MODALITIES: usize = 3;

/// Row of node `(modality, utterance)` in the stacked feature matrix.
pub fn node_index(modality: usize, utterance: usize, n_utt: usize) -> usize {
    modality * n_utt + utterance
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeWeight {
    pub value: f64,
    /// One endpoint had zero norm; the weight fell back to 0.5.
    pub degenerate: bool,
    /// Clamped cosine similarity, kept for the backward pass.
    pub cosine: f64,
}

/// Cosine similarity clamped to `[-1, 1]`, or `None` if either vector is zero.
pub fn cosine_similarity(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Option<f64> {
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some((x.dot(&y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Angular similarity `1 - arccos(cos(x, y)) / pi`, in `[0, 1]`.
pub fn edge_weight_same(x: ArrayView1<f64>, y: ArrayView1<f64>) -> EdgeWeight {
    match cosine_similarity(x, y) {
        Some(cos) => EdgeWeight {
            value: 1.0 - cos.acos() / PI,
            degenerate: false,
            cosine: cos,
        },
        None => EdgeWeight {
            value: 0.5,
            degenerate: true,
            cosine: 0.0,
        },
    }
}

/// Angular similarity scaled by `phi`, in `[0, phi]`.
pub fn edge_weight_cross(x: ArrayView1<f64>, y: ArrayView1<f64>, phi: f64) -> Result<EdgeWeight> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::invalid_config(format!("phi must be positive, got {phi}")));
    }
    let w = edge_weight_same(x, y);
    Ok(EdgeWeight {
        value: phi * w.value,
        ..w
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    SameModal,
    CrossModal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
    pub weight: EdgeWeight,
}

#[derive(Debug, Clone)]
pub struct InteractionGraph {
    pub n_utt: usize,
    pub window: usize,
    pub phi: f64,
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub edges: Vec<Edge>,
    /// Number of edges whose weight fell back to 0.5 because of a zero vector.
    pub degenerate_edges: usize,
}

impl InteractionGraph {
    pub fn n_nodes(&self) -> usize {
        N_MODALITIES * self.n_utt
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Pulls a gradient on the adjacency matrix back onto the node features.
    pub fn features_grad(&self, grad_adjacency: ArrayView2<f64>) -> Array2<f64> {
        let mut grad = Array2::zeros(self.features.raw_dim());
        for edge in &self.edges {
            if edge.weight.degenerate {
                continue;
            }
            let cos = edge.weight.cosine;
            // d(1 - acos(c)/pi)/dc, zero at the clamp boundary.
            let sin = (1.0 - cos * cos).sqrt();
            if sin <= 1e-12 {
                continue;
            }
            let scale = match edge.kind {
                EdgeKind::SameModal => 1.0,
                EdgeKind::CrossModal => self.phi,
            };
            let g_weight = grad_adjacency[[edge.i, edge.j]] + grad_adjacency[[edge.j, edge.i]];
            let g_cos = g_weight * scale / (PI * sin);
            let x = self.features.row(edge.i);
            let y = self.features.row(edge.j);
            let nx = x.dot(&x).sqrt();
            let ny = y.dot(&y).sqrt();
            // dc/dx = y/(|x||y|) - c x/|x|^2
            let gx = (&y / (nx * ny) - &x * (cos / (nx * nx))) * g_cos;
            let gy = (&x / (nx * ny) - &y * (cos / (ny * ny))) * g_cos;
            grad.row_mut(edge.i).scaled_add(1.0, &gx);
            grad.row_mut(edge.j).scaled_add(1.0, &gy);
        }
        grad
    }
}

/// Builds the interaction graph over stacked node features `[3N x d]`.
pub fn build_interaction_graph(features: ArrayView2<f64>, window: usize, phi: f64) -> Result<InteractionGraph> {
    let n_nodes = features.nrows();
    if n_nodes == 0 || !n_nodes.is_multiple_of(N_MODALITIES) {
        return Err(Error::invalid_input(format!(
            "expected 3N node rows with N >= 1, got {n_nodes}"
        )));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::invalid_config(format!("phi must be positive, got {phi}")));
    }
    let n_utt = n_nodes / N_MODALITIES;
    let mut adjacency = Array2::zeros((n_nodes, n_nodes));
    let mut edges = Vec::new();

    for m in 0..N_MODALITIES {
        for i in 0..n_utt {
            for j in (i + 1)..n_utt.min(i + window + 1) {
                let (a, b) = (node_index(m, i, n_utt), node_index(m, j, n_utt));
                let weight = edge_weight_same(features.row(a), features.row(b));
                edges.push(Edge {
                    i: a,
                    j: b,
                    kind: EdgeKind::SameModal,
                    weight,
                });
            }
        }
    }
    for i in 0..n_utt {
        for m in 0..N_MODALITIES {
            for m2 in (m + 1)..N_MODALITIES {
                let (a, b) = (node_index(m, i, n_utt), node_index(m2, i, n_utt));
                let weight = edge_weight_cross(features.row(a), features.row(b), phi)?;
                edges.push(Edge {
                    i: a,
                    j: b,
                    kind: EdgeKind::CrossModal,
                    weight,
                });
            }
        }
    }

    let mut degenerate_edges = 0;
    for e in &edges {
        adjacency[[e.i, e.j]] = e.weight.value;
        adjacency[[e.j, e.i]] = e.weight.value;
        degenerate_edges += e.weight.degenerate as usize;
    }
    if degenerate_edges > 0 {
        log::warn!("{degenerate_edges} edge(s) touch a zero-norm node; weight set to 0.5");
    }

    Ok(InteractionGraph {
        n_utt,
        window,
        phi,
        adjacency,
        features: features.to_owned(),
        edges,
        degenerate_edges,
    })
}

/// Undirected edge count predicted for `N` utterances and window `k`.
pub fn expected_edge_count(n_utt: usize, window: usize) -> (usize, usize) {
    let per_modality = if window < n_utt {
        n_utt * window - window * (window + 1) / 2
    } else {
        n_utt * n_utt.saturating_sub(1) / 2
    };
    (N_MODALITIES * per_modality, N_MODALITIES * n_utt)
}

/// `D^{-1/2} A D^{-1/2}` together with `D^{-1/2}` (zero on isolated nodes).
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: Array2<f64>,
    pub inv_sqrt_degree: Array1<f64>,
}

pub fn normalize_adjacency(adjacency: ArrayView2<f64>) -> Result<NormalizedAdjacency> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::invalid_input("adjacency must be square"));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (adjacency[[i, j]], adjacency[[j, i]]);
            if a != b {
                return Err(Error::invalid_input(format!(
                    "adjacency not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    let inv_sqrt_degree = adjacency
        .sum_axis(Axis(1))
        .mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let mut matrix = adjacency.to_owned();
    for ((i, j), v) in matrix.indexed_iter_mut() {
        *v *= inv_sqrt_degree[i] * inv_sqrt_degree[j];
    }
    Ok(NormalizedAdjacency {
        matrix,
        inv_sqrt_degree,
    })
}

impl NormalizedAdjacency {
    /// Gradient with respect to the (symmetric) adjacency entries, given the
    /// gradient on the normalized matrix.
    pub fn adjacency_grad(&self, adjacency: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
        let n = adjacency.nrows();
        let r = &self.inv_sqrt_degree;
        let mut g_adj = Array2::zeros((n, n));
        let mut g_r = Array1::<f64>::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let g = grad[[i, j]];
                if g == 0.0 {
                    continue;
                }
                g_adj[[i, j]] += g * r[i] * r[j];
                let a = adjacency[[i, j]];
                g_r[i] += g * a * r[j];
                g_r[j] += g * a * r[i];
            }
        }
        // r = d^{-1/2}  =>  dr/dd = -r^3 / 2; d_i = sum_j A_ij
        for i in 0..n {
            if r[i] == 0.0 {
                continue;
            }
            let g_deg = -0.5 * r[i] * r[i] * r[i] * g_r[i];
            g_adj.row_mut(i).mapv_inplace(|v| v + g_deg);
        }
        g_adj
    }
}

/// Low-pass `I + D^{-1/2} A D^{-1/2}` and high-pass `I - D^{-1/2} A D^{-1/2}`.
#[derive(Debug, Clone)]
pub struct FilterPair {
    pub low: Array2<f64>,
    pub high: Array2<f64>,
    pub normalized: NormalizedAdjacency,
}

pub fn normalized_filters(adjacency: ArrayView2<f64>) -> Result<FilterPair> {
    let normalized = normalize_adjacency(adjacency)?;
    let n = adjacency.nrows();
    let eye = Array2::<f64>::eye(n);
    let low = &eye + &normalized.matrix;
    let high = &eye - &normalized.matrix;
    Ok(FilterPair { low, high, normalized })
}

/// Ascending eigenvalues of a symmetric matrix (dense solve).
pub fn symmetric_eigenvalues(m: ArrayView2<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::invalid_input("eigenvalues need a square matrix"));
    }
    let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}
