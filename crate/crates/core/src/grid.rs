//! Electrical graph of the microgrid, its Green-like matrix and effective impedances.

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};

/// A power line between two nodes, stored with frozen node indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Series impedance in ohms.
    pub z: Complex64,
}

/// Validated microgrid graph. Node 0 is always the PCC; the remaining nodes keep input order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    incidence: DMatrix<f64>,
}

impl GridGraph {
    /// Validates and freezes a node list and an edge list `(from, to, z)`.
    pub fn build<S: AsRef<str>>(
        nodes: &[S],
        pcc: &str,
        edges: &[(S, S, Complex64)],
    ) -> Result<Self> {
        let mut seen = HashMap::new();
        for id in nodes {
            let id = id.as_ref();
            if seen.insert(id.to_string(), ()).is_some() {
                return Err(Error::DuplicateNode(id.to_string()));
            }
        }
        if !seen.contains_key(pcc) {
            return Err(Error::MissingPcc(pcc.to_string()));
        }

        let mut ids = Vec::with_capacity(nodes.len());
        ids.push(pcc.to_string());
        ids.extend(
            nodes
                .iter()
                .map(|s| s.as_ref().to_string())
                .filter(|s| s != pcc),
        );
        let index: HashMap<String, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();

        let mut frozen = Vec::with_capacity(edges.len());
        for (e, (a, b, z)) in edges.iter().enumerate() {
            let lookup = |s: &S| {
                index
                    .get(s.as_ref())
                    .copied()
                    .ok_or_else(|| Error::DanglingEdge {
                        edge: e,
                        node: s.as_ref().to_string(),
                    })
            };
            let (from, to) = (lookup(a)?, lookup(b)?);
            if from == to {
                return Err(Error::SelfLoop(e));
            }
            if z.re == 0.0 && z.im == 0.0 {
                return Err(Error::ZeroImpedance(e));
            }
            if !(z.re > 0.0 && z.im >= 0.0) || !z.re.is_finite() || !z.im.is_finite() {
                return Err(Error::InvalidImpedance {
                    edge: e,
                    re: z.re,
                    im: z.im,
                });
            }
            frozen.push(Edge { from, to, z: *z });
        }

        let n = ids.len();
        let mut incidence = DMatrix::zeros(frozen.len(), n);
        for (e, edge) in frozen.iter().enumerate() {
            incidence[(e, edge.from)] = -1.0;
            incidence[(e, edge.to)] = 1.0;
        }

        let grid = GridGraph {
            ids,
            index,
            edges: frozen,
            incidence,
        };
        if let Some(v) = grid.unreachable_node() {
            return Err(Error::Disconnected(grid.ids[v].clone()));
        }
        Ok(grid)
    }

    fn unreachable_node(&self) -> Option<usize> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &(w, _) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    /// Neighbour lists `(node, edge index)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[edge.from].push((edge.to, e));
            adj[edge.to].push((edge.from, e));
        }
        adj
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, v: usize) -> &str {
        &self.ids[v]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Incidence matrix `A` (|E| x n): -1 at the source node, +1 at the terminal node.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Complex Laplacian `Aᵀ Z⁻¹ A`.
    pub fn laplacian(&self) -> DMatrix<Complex64> {
        let n = self.n();
        let mut l = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for edge in &self.edges {
            let y = edge.z.inv();
            l[(edge.from, edge.from)] += y;
            l[(edge.to, edge.to)] += y;
            l[(edge.from, edge.to)] -= y;
            l[(edge.to, edge.from)] -= y;
        }
        l
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.n()
    }

    fn check_index(&self, v: usize) -> Result<()> {
        if v < self.n() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: v,
                n: self.n(),
            })
        }
    }
}

/// Parent pointers of a radial grid rooted at the PCC.
#[derive(Debug, Clone)]
pub struct RootedTree {
    parent: Vec<Option<(usize, usize)>>,
    depth: Vec<usize>,
}

impl RootedTree {
    pub fn new(grid: &GridGraph) -> Result<Self> {
        if !grid.is_tree() {
            return Err(Error::NotRadial {
                expected: grid.n() - 1,
                found: grid.edge_count(),
            });
        }
        let adj = grid.adjacency();
        let mut parent = vec![None; grid.n()];
        let mut depth = vec![0; grid.n()];
        let mut seen = vec![false; grid.n()];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(v) = queue.pop_front() {
            for &(w, e) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((v, e));
                    depth[w] = depth[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        Ok(RootedTree { parent, depth })
    }

    /// Edge indices on the unique path between `h` and `k`.
    pub fn path(&self, mut h: usize, mut k: usize) -> Vec<usize> {
        let mut edges = Vec::new();
        while h != k {
            if self.depth[h] >= self.depth[k] {
                let (p, e) = self.parent[h].expect("non-root node has a parent");
                edges.push(e);
                h = p;
            } else {
                let (p, e) = self.parent[k].expect("non-root node has a parent");
                edges.push(e);
                k = p;
            }
        }
        edges
    }

    pub fn parent(&self, v: usize) -> Option<(usize, usize)> {
        self.parent[v]
    }
}

/// The unique symmetric `X` with `X L = I - 1·1₀ᵀ` and `X 1₀ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenMatrix {
    pub x: DMatrix<Complex64>,
    pub x_real: DMatrix<f64>,
    /// Uniform line-impedance angle (radians).
    pub theta: f64,
}

/// Solves the bordered system `[[L, 1₀], [1₀ᵀ, 0]]⁻¹ = [[X, 1], [1ᵀ, 0]]` by dense LU.
pub fn green_matrix(grid: &GridGraph) -> Result<GreenMatrix> {
    let n = grid.n();
    let zero = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    let mut bordered = DMatrix::from_element(n + 1, n + 1, zero);
    bordered
        .view_mut((0, 0), (n, n))
        .copy_from(&grid.laplacian());
    bordered[(0, n)] = one;
    bordered[(n, 0)] = one;
    let inverse = bordered
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Internal("bordered Laplacian system is singular".into()))?;
    let block = inverse.view((0, 0), (n, n)).into_owned();
    let x = (&block + block.transpose()).map(|c| c * 0.5);
    let x_real = x.map(|c| c.re);
    let theta = uniform_angle(grid, f64::INFINITY)?.theta;
    Ok(GreenMatrix { x, x_real, theta })
}

impl GreenMatrix {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// `(1_v - 1_w)ᵀ X (1_v - 1_w)`.
    pub fn effective_impedance(&self, v: usize, w: usize) -> Result<Complex64> {
        let n = self.n();
        for idx in [v, w] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, n });
            }
        }
        Ok(self.x[(v, v)] + self.x[(w, w)] - self.x[(v, w)] - self.x[(w, v)])
    }

    /// Relative Frobenius residual of `X L = I - 1·1₀ᵀ`, and the norm of `X 1₀`.
    pub fn residuals(&self, grid: &GridGraph) -> (f64, f64) {
        let n = self.n();
        let mut target = DMatrix::<Complex64>::identity(n, n);
        for v in 0..n {
            target[(v, 0)] -= Complex64::new(1.0, 0.0);
        }
        let lhs = &self.x * grid.laplacian();
        let rel = (lhs - target).norm() / (n as f64).sqrt();
        (rel, self.x.column(0).norm())
    }
}

/// Result of fitting a single impedance angle to all lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleReport {
    pub theta: f64,
    /// `max ∠z_e - min ∠z_e`.
    pub spread: f64,
    pub max_deviation: f64,
    /// Set when `spread` exceeds the requested tolerance.
    pub flagged: bool,
}

/// |z_e|-weighted mean of the line impedance angles.
pub fn uniform_angle(grid: &GridGraph, tolerance: f64) -> Result<AngleReport> {
    let mut weight = 0.0;
    let mut acc = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (e, edge) in grid.edges().iter().enumerate() {
        let mag = edge.z.norm();
        if mag == 0.0 {
            return Err(Error::ZeroImpedance(e));
        }
        let angle = edge.z.arg();
        acc += mag * angle;
        weight += mag;
        lo = lo.min(angle);
        hi = hi.max(angle);
    }
    if weight == 0.0 {
        return Ok(AngleReport {
            theta: 0.0,
            spread: 0.0,
            max_deviation: 0.0,
            flagged: false,
        });
    }
    let theta = acc / weight;
    let spread = hi - lo;
    let max_deviation = (hi - theta).max(theta - lo);
    Ok(AngleReport {
        theta,
        spread,
        max_deviation,
        flagged: spread > tolerance,
    })
}

impl GridGraph {
    /// Convenience wrapper for [`GreenMatrix::effective_impedance`] with index validation on the grid.
    pub fn effective_impedance(
        &self,
        green: &GreenMatrix,
        v: usize,
        w: usize,
    ) -> Result<Complex64> {
        self.check_index(v)?;
        self.check_index(w)?;
        green.effective_impedance(v, w)
    }
}
