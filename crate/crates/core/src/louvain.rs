//! Louvain community detection on small weighted graphs.
//!
//! Two-phase modularity optimization: greedy local moves over nodes in
//! ascending id order, then community aggregation, repeated until no move
//! improves modularity. Node-visit order is fixed so results are
//! deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Undirected weighted graph over nodes `0..n`. Self-loops are stored once
/// under `adj[i][i]` and count twice toward the node degree, matching the
/// usual modularity conventions.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    adj: Vec<BTreeMap<usize, f64>>,
}

impl WeightedGraph {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            adj: vec![BTreeMap::new(); num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    /// Accumulates weight onto the undirected edge `{a, b}`.
    pub fn add_edge(&mut self, a: usize, b: usize, weight: f64) {
        assert!(weight >= 0.0, "edge weights must be non-negative");
        if a == b {
            *self.adj[a].entry(a).or_insert(0.0) += weight;
        } else {
            *self.adj[a].entry(b).or_insert(0.0) += weight;
            *self.adj[b].entry(a).or_insert(0.0) += weight;
        }
    }

    /// Total edge weight `m` (each undirected edge once, self-loops once).
    fn total_weight(&self) -> f64 {
        let mut m = 0.0;
        for (i, row) in self.adj.iter().enumerate() {
            for (&j, &w) in row {
                if j > i {
                    m += w;
                } else if j == i {
                    m += w;
                }
            }
        }
        m
    }

    /// Weighted degree `k_i` (self-loop counted twice).
    fn degree(&self, i: usize) -> f64 {
        self.adj[i]
            .iter()
            .map(|(&j, &w)| if j == i { 2.0 * w } else { w })
            .sum()
    }
}

/// A node-to-community assignment with its modularity.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Community id per node, ids renumbered `0..k` by smallest member.
    pub community_of: Vec<usize>,
    pub modularity: f64,
}

impl Partition {
    pub fn num_communities(&self) -> usize {
        self.community_of.iter().max().map_or(0, |&c| c + 1)
    }

    /// Nodes whose community contains no other node.
    pub fn singletons(&self) -> Vec<usize> {
        let k = self.num_communities();
        let mut counts = vec![0usize; k];
        for &c in &self.community_of {
            counts[c] += 1;
        }
        self.community_of
            .iter()
            .enumerate()
            .filter(|&(_, &c)| counts[c] == 1)
            .map(|(n, _)| n)
            .collect()
    }
}

/// Modularity of an assignment, computed directly from the graph:
/// `Q = Σ_c [ L_c/m − (D_c/2m)² ]` with `L_c` the internal weight and `D_c`
/// the total degree of community `c`.
pub fn modularity(graph: &WeightedGraph, assignment: &[usize]) -> f64 {
    assert_eq!(assignment.len(), graph.num_nodes());
    let m = graph.total_weight();
    if m <= 0.0 {
        return 0.0;
    }
    let num_comms = assignment.iter().max().map_or(0, |&c| c + 1);
    let mut internal = vec![0.0; num_comms];
    let mut degree = vec![0.0; num_comms];
    for (i, row) in graph.adj.iter().enumerate() {
        degree[assignment[i]] += graph.degree(i);
        for (&j, &w) in row {
            if j == i {
                internal[assignment[i]] += w;
            } else if j > i && assignment[i] == assignment[j] {
                internal[assignment[i]] += w;
            }
        }
    }
    (0..num_comms)
        .map(|c| internal[c] / m - (degree[c] / (2.0 * m)).powi(2))
        .sum()
}

const GAIN_EPS: f64 = 1e-12;

struct Level {
    graph: WeightedGraph,
    /// Original nodes folded into each current node.
    members: Vec<Vec<usize>>,
}

/// Runs Louvain, additionally reporting modularity (on the original graph)
/// after every accepted local move. The sequence is strictly increasing.
pub fn louvain_traced(graph: &WeightedGraph) -> Result<(Partition, Vec<f64>)> {
    run_louvain(graph, true)
}

/// Runs Louvain to a fixed point and returns the final partition.
pub fn louvain(graph: &WeightedGraph) -> Result<Partition> {
    run_louvain(graph, false).map(|(p, _)| p)
}

fn run_louvain(graph: &WeightedGraph, trace: bool) -> Result<(Partition, Vec<f64>)> {
    let n = graph.num_nodes();
    if n == 0 {
        return Ok((
            Partition {
                community_of: Vec::new(),
                modularity: 0.0,
            },
            Vec::new(),
        ));
    }
    for row in &graph.adj {
        if row.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Data("louvain requires finite non-negative weights".into()));
        }
    }

    let m = graph.total_weight();
    let mut level = Level {
        graph: graph.clone(),
        members: (0..n).map(|i| vec![i]).collect(),
    };
    let mut trace_out = Vec::new();

    // Each pass folds accepted moves into an aggregated graph; every accepted
    // move raises modularity by more than GAIN_EPS, so this terminates.
    loop {
        let moved = local_phase(&mut level, m, graph, trace, &mut trace_out);
        if !moved {
            let assignment = normalize_ids(&level_assignment(&level));
            let q = modularity(graph, &assignment);
            return Ok((
                Partition {
                    community_of: assignment,
                    modularity: q,
                },
                trace_out,
            ));
        }
    }
}

/// Assignment of ORIGINAL nodes implied by the current level (one community
/// per level node).
fn level_assignment(level: &Level) -> Vec<usize> {
    let total: usize = level.members.iter().map(|m| m.len()).sum();
    let mut assignment = vec![0usize; total];
    for (node, members) in level.members.iter().enumerate() {
        for &orig in members {
            assignment[orig] = node;
        }
    }
    assignment
}

/// Greedy local moves; `node_comm` starts as singletons. Returns whether any
/// node ended up outside its own singleton community.
fn local_phase(
    level: &mut Level,
    m: f64,
    original: &WeightedGraph,
    trace: bool,
    trace_out: &mut Vec<f64>,
) -> bool {
    let n = level.graph.num_nodes();
    let mut node_comm: Vec<usize> = (0..n).collect();
    if m <= 0.0 {
        return false;
    }
    let degrees: Vec<f64> = (0..n).map(|i| level.graph.degree(i)).collect();
    let mut comm_degree = degrees.clone();

    let mut any_move = false;
    loop {
        let mut moved_in_sweep = false;
        for node in 0..n {
            let current = node_comm[node];
            comm_degree[current] -= degrees[node];

            // Weight from `node` to each neighboring community (self-loop excluded).
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            links.insert(current, 0.0);
            for (&nb, &w) in &level.graph.adj[node] {
                if nb != node {
                    *links.entry(node_comm[nb]).or_insert(0.0) += w;
                }
            }

            let gain = |comm: usize, w_to: f64| -> f64 {
                w_to / m - degrees[node] * comm_degree[comm] / (2.0 * m * m)
            };
            // Candidates iterate in ascending community id, so among
            // near-equal gains the smallest id wins and staying put wins ties.
            let stay_gain = gain(current, links[&current]);
            let (mut best_comm, mut best_gain) = (current, stay_gain);
            for (&comm, &w_to) in &links {
                if comm == current {
                    continue;
                }
                let g = gain(comm, w_to);
                if g > best_gain + GAIN_EPS {
                    best_comm = comm;
                    best_gain = g;
                }
            }

            node_comm[node] = best_comm;
            comm_degree[best_comm] += degrees[node];
            if best_comm != current {
                moved_in_sweep = true;
                any_move = true;
                if trace {
                    // Report modularity of the implied original-graph partition.
                    let mut assignment = vec![0usize; original.num_nodes()];
                    for (ln, members) in level.members.iter().enumerate() {
                        for &orig in members {
                            assignment[orig] = node_comm[ln];
                        }
                    }
                    trace_out.push(modularity(original, &normalize_ids(&assignment)));
                }
            }
        }
        if !moved_in_sweep {
            break;
        }
    }

    if any_move {
        // Fold accepted moves into the level so aggregation (or the final
        // read-out) sees them.
        let mut merged = vec![Vec::new(); n];
        for node in 0..n {
            merged[node_comm[node]].extend(level.members[node].iter().copied());
        }
        let mut relabel = BTreeMap::new();
        for comm in node_comm.iter() {
            let next = relabel.len();
            relabel.entry(*comm).or_insert(next);
        }
        let mut new_members = vec![Vec::new(); relabel.len()];
        for (comm, members) in merged.into_iter().enumerate() {
            if let Some(&new_id) = relabel.get(&comm) {
                if !members.is_empty() {
                    new_members[new_id] = members;
                }
            }
        }
        let mut new_graph = WeightedGraph::new(relabel.len());
        for (i, row) in level.graph.adj.iter().enumerate() {
            let ci = relabel[&node_comm[i]];
            for (&j, &w) in row {
                if j == i {
                    new_graph.add_edge(ci, ci, w);
                } else if j > i {
                    let cj = relabel[&node_comm[j]];
                    new_graph.add_edge(ci, cj, w);
                }
            }
        }
        level.graph = new_graph;
        level.members = new_members;
    }
    any_move
}

/// Renumbers community ids to `0..k` ordered by smallest member node.
fn normalize_ids(assignment: &[usize]) -> Vec<usize> {
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = vec![0usize; assignment.len()];
    for (node, &c) in assignment.iter().enumerate() {
        let next = relabel.len();
        let id = *relabel.entry(c).or_insert(next);
        out[node] = id;
    }
    out
}
