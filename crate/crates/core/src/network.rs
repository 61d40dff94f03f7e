//! Network description files and the bundled test networks.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gossip::Problem;
use crate::grid::GridGraph;
use crate::model::ClusterSet;
use crate::power_flow::ScenarioSpec;

const IEEE37: &str = include_str!("../data/ieee37_testbed.json");
const PATH3: &str = include_str!("../data/path3.json");

/// Names accepted by [`bundled`].
pub const BUNDLED: &[&str] = &["ieee37", "path3"];

/// Source text of a bundled network: `ieee37` (37-node feeder, 13 compensators) or `path3`
/// (three-node line with one load and one compensator).
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "ieee37" => Some(IEEE37),
        "path3" => Some(PATH3),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Pcc,
    Load,
    Compensator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: NodeKind,
    /// Injected active power (W); negative for consumption.
    #[serde(rename = "p_W", default, skip_serializing_if = "Option::is_none")]
    pub p_w: Option<f64>,
    /// Injected reactive power (var). For compensators this is the starting set-point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// On-disk network description (JSON, SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(rename = "base_voltage_V")]
    pub base_voltage_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc_phase_rad: Option<f64>,
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<EdgeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

/// Validated model objects built from a [`NetworkFile`].
#[derive(Debug, Clone)]
pub struct Network {
    pub grid: GridGraph,
    pub scenario: ScenarioSpec,
    /// Node indices of the compensators in increasing order; the PCC (index 0) comes first.
    pub compensators: Vec<usize>,
    /// Clusters over compensator positions, when the file lists them.
    pub clusters: Option<ClusterSet>,
}

impl Network {
    /// Simulation problem over the file's grid, loads and compensators.
    pub fn problem(&self) -> Result<Problem> {
        Problem::new(self.grid.clone(), self.scenario.clone(), &self.compensators)
    }

    /// Grid ids of the compensators, in position order.
    pub fn compensator_ids(&self) -> Vec<&str> {
        self.compensators.iter().map(|&v| self.grid.id(v)).collect()
    }
}

impl NetworkFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    /// Pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("network files always serialize");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| io_error(path, e))
    }

    pub fn bundled(name: &str) -> Option<Self> {
        bundled(name).map(|text| Self::from_json(text).expect("bundled networks are valid"))
    }

    fn pcc_id(&self) -> Result<&str> {
        let pccs: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Pcc)
            .map(|n| n.id.as_str())
            .collect();
        match pccs.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::Schema("nodes: no node has type `pcc`".into())),
            many => Err(Error::Schema(format!(
                "nodes: exactly one `pcc` node allowed, found {}: {}",
                many.len(),
                many.join(", ")
            ))),
        }
    }

    /// Validates the file and builds the grid, scenario, compensator set and clusters.
    pub fn to_network(&self) -> Result<Network> {
        let u = self.base_voltage_v;
        if !(u > 0.0 && u.is_finite()) {
            return Err(Error::Schema(format!(
                "base_voltage_V: must be positive, got {u}"
            )));
        }
        let phase = self.pcc_phase_rad.unwrap_or(0.0);
        if !phase.is_finite() {
            return Err(Error::Schema("pcc_phase_rad: must be finite".into()));
        }
        let pcc = self.pcc_id()?;
        for (k, node) in self.nodes.iter().enumerate() {
            let field = |name: &str| format!("nodes[{k}] (`{}`).{name}", node.id);
            for (name, value) in [("p_W", node.p_w), ("q_var", node.q_var), ("eta", node.eta)] {
                if value.is_some_and(|v| !v.is_finite()) {
                    return Err(Error::Schema(format!("{}: must be finite", field(name))));
                }
            }
            if node.kind == NodeKind::Load {
                match node.eta {
                    None => {
                        return Err(Error::Schema(format!(
                            "{}: required for loads",
                            field("eta")
                        )))
                    }
                    Some(e) if e < 0.0 => {
                        return Err(Error::Schema(format!(
                            "{}: must be non-negative, got {e}",
                            field("eta")
                        )))
                    }
                    _ => {}
                }
            }
        }
        let ids: Vec<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let edges: Vec<(&str, &str, Complex64)> = self
            .edges
            .iter()
            .map(|e| {
                (
                    e.from.as_str(),
                    e.to.as_str(),
                    Complex64::new(e.r_ohm, e.x_ohm),
                )
            })
            .collect();
        let grid = GridGraph::build(&ids, pcc, &edges)?;

        let n = grid.n();
        let mut s = vec![Complex64::new(0.0, 0.0); n];
        let mut eta = vec![0.0; n];
        let mut is_comp = vec![false; n];
        for node in &self.nodes {
            let v = grid
                .index_of(&node.id)
                .expect("ids were validated by the grid");
            if node.kind != NodeKind::Pcc {
                s[v] = Complex64::new(node.p_w.unwrap_or(0.0), node.q_var.unwrap_or(0.0));
                eta[v] = if node.kind == NodeKind::Load {
                    node.eta.unwrap_or(0.0)
                } else {
                    0.0
                };
            }
            is_comp[v] = node.kind != NodeKind::Load;
        }
        let compensators: Vec<usize> = (0..n).filter(|&v| is_comp[v]).collect();
        let scenario = ScenarioSpec {
            u_nominal: u,
            phase,
            s,
            eta,
        };
        scenario.validate(n)?;

        let clusters = match (&self.clusters, &self.probabilities) {
            (None, Some(_)) => {
                return Err(Error::Schema(
                    "probabilities: given without clusters".into(),
                ))
            }
            (None, None) => None,
            (Some(lists), rho) => {
                let position: BTreeMap<&str, usize> = compensators
                    .iter()
                    .enumerate()
                    .map(|(a, &v)| (grid.id(v), a))
                    .collect();
                let mut sets = Vec::with_capacity(lists.len());
                for (r, list) in lists.iter().enumerate() {
                    let members = list
                        .iter()
                        .map(|id| {
                            position.get(id.as_str()).copied().ok_or_else(|| {
                                Error::InvalidClusters(format!(
                                    "clusters[{r}]: `{id}` is not a compensator"
                                ))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    sets.push(members);
                }
                Some(ClusterSet::new(sets, rho.clone(), compensators.len())?)
            }
        };
        Ok(Network {
            grid,
            scenario,
            compensators,
            clusters,
        })
    }

    /// Replaces the clusters (given as compensator positions of `network`) and drops the
    /// probabilities unless they are non-uniform.
    pub fn set_clusters(&mut self, network: &Network, clusters: &ClusterSet) {
        let ids = network.compensator_ids();
        self.clusters = Some(
            clusters
                .clusters()
                .iter()
                .map(|c| c.iter().map(|&h| ids[h].to_string()).collect())
                .collect(),
        );
        let uniform = 1.0 / clusters.len() as f64;
        self.probabilities = if clusters.rho().iter().all(|&p| p == uniform) {
            None
        } else {
            Some(clusters.rho().to_vec())
        };
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads and validates a network file.
pub fn load_network(path: &Path) -> Result<Network> {
    NetworkFile::read(path)?.to_network()
}
