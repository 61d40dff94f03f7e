//! Fixtures shared by the benchmarks.

use orpf::{optimal_tree_clustering, ClusterSet, Network, NetworkFile, Problem};

/// Bundled 37-node feeder with its file clusters.
pub fn testbed() -> (Network, Problem, ClusterSet) {
    let network = NetworkFile::bundled("ieee37")
        .expect("bundled testbed")
        .to_network()
        .expect("valid testbed");
    let problem = network.problem().expect("testbed problem");
    let clusters = network.clusters.clone().expect("testbed clusters");
    (network, problem, clusters)
}

/// Testbed restricted to the PCC and the first `m - 1` compensators, with tree-cut clusters.
pub fn reduced_testbed(m: usize) -> (Problem, ClusterSet) {
    let network = testbed().0;
    let compensators: Vec<usize> = network.compensators.iter().copied().take(m).collect();
    let problem = Problem::new(
        network.grid.clone(),
        network.scenario.clone(),
        &compensators,
    )
    .expect("reduced problem");
    let clusters = optimal_tree_clustering(&network.grid, &compensators).expect("radial testbed");
    (problem, clusters)
}
