//! AS-level physical network: graph generation, node placement, and
//! physical hop-count queries.
//!
//! The physical distance between two nodes is the hop count between their
//! ASes plus 1, so two nodes in the same AS are at distance 1.

use std::collections::BTreeSet;
use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::units::{AsId, NodeId};

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid parameters: as_count ({as_count}) must exceed edges_per_node ({edges_per_node})")]
    InvalidParams { as_count: u32, edges_per_node: u32 },
    #[error("AS graph is disconnected")]
    Disconnected,
    #[error("node {0} has no AS placement")]
    Unplaced(NodeId),
    #[error("topology dump parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected AS adjacency graph with precomputed all-pairs hop counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsGraph {
    as_count: u32,
    /// Unordered pairs stored as (low, high), both one-based.
    edges: BTreeSet<(u32, u32)>,
    hop_matrix: Vec<Vec<u32>>,
}

impl AsGraph {
    /// Builds a graph from an explicit edge list and computes hop counts.
    pub fn from_edges(
        as_count: u32,
        edges: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<AsGraph, TopologyError> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            assert!(u != v, "self-loop {u}");
            assert!(
                (1..=as_count).contains(&u) && (1..=as_count).contains(&v),
                "edge ({u},{v}) outside 1..={as_count}"
            );
            set.insert((u.min(v), u.max(v)));
        }
        let hop_matrix = all_pairs_hops(as_count, &set)?;
        Ok(AsGraph {
            as_count,
            edges: set,
            hop_matrix,
        })
    }

    pub fn as_count(&self) -> u32 {
        self.as_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    /// Shortest-path hop count between two ASes.
    pub fn hops(&self, a: AsId, b: AsId) -> u32 {
        self.hop_matrix[(a.0 - 1) as usize][(b.0 - 1) as usize]
    }

    /// Greatest hop count between any AS pair.
    pub fn diameter(&self) -> u32 {
        self.hop_matrix
            .iter()
            .flat_map(|row| row.iter().copied())
            .max()
            .unwrap_or(0)
    }

    pub fn degree(&self, asn: u32) -> usize {
        self.edges
            .iter()
            .filter(|&&(u, v)| u == asn || v == asn)
            .count()
    }
}

/// BFS shortest-path hop counts for every AS pair.
///
/// Fails if the graph is disconnected.
fn all_pairs_hops(as_count: u32, edges: &BTreeSet<(u32, u32)>) -> Result<Vec<Vec<u32>>, TopologyError> {
    let n = as_count as usize;
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[(u - 1) as usize].push((v - 1) as usize);
        adj[(v - 1) as usize].push((u - 1) as usize);
    }
    let mut matrix = Vec::with_capacity(n);
    for start in 0..n {
        let mut dist = vec![u32::MAX; n];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        if dist.iter().any(|&d| d == u32::MAX) {
            return Err(TopologyError::Disconnected);
        }
        matrix.push(dist);
    }
    Ok(matrix)
}

/// Barabási–Albert preferential attachment starting from a complete graph
/// on `edges_per_node` seed ASes. Each later AS attaches `edges_per_node`
/// edges to distinct existing ASes with probability proportional to degree,
/// sampled from a degree-repeated target list with duplicate rejection.
pub fn generate_ba_graph(
    as_count: u32,
    edges_per_node: u32,
    seed: u64,
) -> Result<AsGraph, TopologyError> {
    if edges_per_node == 0 || as_count <= edges_per_node {
        return Err(TopologyError::InvalidParams {
            as_count,
            edges_per_node,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let m0 = edges_per_node;
    let mut edges: Vec<(u32, u32)> = Vec::new();
    // Complete graph on the first m0 ASes keeps the seed core connected
    // and reproduces the 15-AS / 50-link reference figure for m = 4.
    for u in 1..=m0 {
        for v in (u + 1)..=m0 {
            edges.push((u, v));
        }
    }
    // One entry per degree unit; sampling an index is degree-proportional.
    let mut targets: Vec<u32> = Vec::new();
    for &(u, v) in &edges {
        targets.push(u);
        targets.push(v);
    }
    if m0 == 1 {
        // Degenerate seed core: a single AS with degree 0 is still a valid
        // attachment target for the second AS.
        targets.push(1);
    }
    for new_as in (m0 + 1)..=as_count {
        let mut chosen = BTreeSet::new();
        while chosen.len() < edges_per_node as usize {
            let t = targets[rng.random_range(0..targets.len())];
            chosen.insert(t);
        }
        if m0 == 1 && new_as == 2 {
            targets.clear(); // drop the artificial degree-0 entry
        }
        for &t in &chosen {
            edges.push((t, new_as));
            targets.push(t);
            targets.push(new_as);
        }
    }
    AsGraph::from_edges(as_count, edges)
}

/// Map from node id to the AS that hosts it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    node_as: Vec<AsId>,
}

impl Placement {
    /// Explicit assignment, for reproducible fixed layouts.
    pub fn from_assignments(graph: &AsGraph, node_as: Vec<AsId>) -> Placement {
        for &a in &node_as {
            assert!(
                a.0 >= 1 && a.0 <= graph.as_count(),
                "AS id {a} outside 1..={}",
                graph.as_count()
            );
        }
        Placement { node_as }
    }

    pub fn node_count(&self) -> usize {
        self.node_as.len()
    }

    pub fn as_of(&self, node: NodeId) -> AsId {
        self.node_as[node.0]
    }
}

/// Assigns every node (OSSes first, then peers) to an AS uniformly at random.
pub fn place_nodes(graph: &AsGraph, oss_count: usize, peer_count: usize, seed: u64) -> Placement {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let node_as = (0..oss_count + peer_count)
        .map(|_| AsId(rng.random_range(1..=graph.as_count())))
        .collect();
    Placement { node_as }
}

/// AS graph plus placement; answers physical distance queries d(i, j).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhysicalTopology {
    pub graph: AsGraph,
    pub placement: Placement,
}

impl PhysicalTopology {
    pub fn new(graph: AsGraph, placement: Placement) -> PhysicalTopology {
        PhysicalTopology { graph, placement }
    }

    /// Physical hop count: AS hops between the hosts of i and j, plus 1.
    pub fn distance(&self, i: NodeId, j: NodeId) -> u32 {
        self.graph
            .hops(self.placement.as_of(i), self.placement.as_of(j))
            + 1
    }
}

/// Physical distance lookup on loose parts, checking placement bounds.
pub fn physical_distance(
    placement: &Placement,
    graph: &AsGraph,
    i: NodeId,
    j: NodeId,
) -> Result<u32, TopologyError> {
    if i.0 >= placement.node_count() {
        return Err(TopologyError::Unplaced(i));
    }
    if j.0 >= placement.node_count() {
        return Err(TopologyError::Unplaced(j));
    }
    Ok(graph.hops(placement.as_of(i), placement.as_of(j)) + 1)
}

/// Plain-text dump: "as_count edge_count", one "u v" line per edge, then
/// one "node_id as_id" line per node. Dump-load-dump is byte identical.
pub fn dump_topology(topo: &PhysicalTopology) -> String {
    let mut out = String::new();
    writeln!(out, "{} {}", topo.graph.as_count(), topo.graph.edge_count()).unwrap();
    for (u, v) in topo.graph.edges() {
        writeln!(out, "{u} {v}").unwrap();
    }
    for node in 0..topo.placement.node_count() {
        writeln!(out, "{} {}", node, topo.placement.as_of(NodeId(node))).unwrap();
    }
    out
}

pub fn load_topology(text: &str) -> Result<PhysicalTopology, TopologyError> {
    let parse = |line: usize, tok: &str| -> Result<u32, TopologyError> {
        tok.parse().map_err(|_| TopologyError::Parse {
            line,
            msg: format!("expected integer, got {tok:?}"),
        })
    };
    let mut lines = text.lines().enumerate();
    let (ln, header) = lines.next().ok_or(TopologyError::Parse {
        line: 1,
        msg: "empty dump".into(),
    })?;
    let mut toks = header.split_whitespace();
    let as_count = parse(ln + 1, toks.next().unwrap_or(""))?;
    let edge_count = parse(ln + 1, toks.next().unwrap_or(""))? as usize;
    let mut edges = Vec::with_capacity(edge_count);
    for _ in 0..edge_count {
        let (ln, line) = lines.next().ok_or(TopologyError::Parse {
            line: edge_count + 1,
            msg: "truncated edge list".into(),
        })?;
        let mut toks = line.split_whitespace();
        let u = parse(ln + 1, toks.next().unwrap_or(""))?;
        let v = parse(ln + 1, toks.next().unwrap_or(""))?;
        edges.push((u, v));
    }
    let graph = AsGraph::from_edges(as_count, edges)?;
    let mut node_as = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let node = parse(ln + 1, toks.next().unwrap_or(""))? as usize;
        let asn = parse(ln + 1, toks.next().unwrap_or(""))?;
        if node != node_as.len() {
            return Err(TopologyError::Parse {
                line: ln + 1,
                msg: format!("node ids must be consecutive, expected {}", node_as.len()),
            });
        }
        node_as.push(AsId(asn));
    }
    let placement = Placement::from_assignments(&graph, node_as);
    Ok(PhysicalTopology::new(graph, placement))
}
