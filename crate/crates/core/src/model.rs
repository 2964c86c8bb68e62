//! Node and overlay state: bandwidth ledgers, the flow table, parent /
//! reserve / child sets and logical hop counts.
//!
//! Every mutation goes through the flow primitives here, which keep the
//! cached ledgers (m, n), the parent/child mirror sets and the traffic
//! aggregates consistent. `verify` recomputes all of it from scratch and is
//! the oracle the simulator runs between events when checking is enabled.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::topology::PhysicalTopology;
use crate::units::{AsId, ContentId, NodeId, Rate};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("node {node} upload capacity exceeded")]
    CapacityExceeded { node: NodeId },
    #[error("node {node} would exceed its demand for content {content}", content = content.label())]
    DemandExceeded { node: NodeId, content: ContentId },
    #[error("flow destination {node} is an OSS")]
    OssDestination { node: NodeId },
    #[error("flow rate must be positive")]
    NonPositiveRate,
    #[error("parent graph for content {content} has a cycle", content = content.label())]
    CycleDetected { content: ContentId },
}

/// Invariant violation found by `World::verify`; carries a diagnostic.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("model invariant violated: {0}")]
pub struct InvariantViolation(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Origin streaming server for exactly one content; never receives.
    Oss { content: ContentId },
    Peer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerState {
    Waiting,
    /// The content set drawn at join time; immutable for the session.
    Viewing { requested: Vec<ContentId> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub role: Role,
    pub as_id: AsId,
    /// Upload capacity M.
    pub capacity: Rate,
    /// Current upload usage m (cached from the flow table).
    upload: Rate,
    /// Required viewing rate N^k per content.
    demand: Vec<Rate>,
    /// Current receive rate n^k per content (cached from the flow table).
    receive: Vec<Rate>,
    pub state: PeerState,
    /// Bumped whenever a pending timer for this node must be cancelled.
    pub epoch: u64,
}

impl NodeRecord {
    pub fn upload(&self) -> Rate {
        self.upload
    }

    pub fn receive(&self, k: ContentId) -> Rate {
        self.receive[k.0]
    }

    pub fn demand(&self, k: ContentId) -> Rate {
        self.demand[k.0]
    }

    /// Remaining upload capacity M - m.
    pub fn headroom(&self) -> Rate {
        self.capacity - self.upload
    }

    pub fn is_oss(&self) -> bool {
        matches!(self.role, Role::Oss { .. })
    }

    /// Fully served for content k (the Eq. 4 indicator for one pair).
    pub fn is_served(&self, k: ContentId) -> bool {
        !self.is_oss() && self.receive[k.0] == self.demand[k.0] && self.demand[k.0].is_positive()
    }

    /// Whether this node can act as a transmission source for content k.
    pub fn holds(&self, k: ContentId) -> bool {
        match self.role {
            Role::Oss { content } => content == k,
            Role::Peer => self.is_served(k),
        }
    }
}

/// Node blueprint used at world construction.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub role: Role,
    pub capacity: Rate,
    /// Viewing rate requirement, applied to every content (peers only).
    pub demand: Rate,
}

/// The content universe and the distribution over requested subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCatalog {
    /// Non-empty subsets (sorted, distinct) with normalized probabilities.
    support: Vec<(Vec<ContentId>, f64)>,
}

impl ContentCatalog {
    /// Normalizes `weights` into a request distribution. Subsets must be
    /// non-empty, within the content universe and pairwise distinct.
    pub fn new(content_count: usize, weights: Vec<(Vec<ContentId>, f64)>) -> Result<ContentCatalog, String> {
        if weights.is_empty() {
            return Err("request distribution needs at least one subset".into());
        }
        let mut support = Vec::with_capacity(weights.len());
        let mut seen = BTreeSet::new();
        let total: f64 = weights.iter().map(|&(_, w)| w).sum();
        if !(total > 0.0) {
            return Err("request distribution weights must sum to a positive value".into());
        }
        for (mut subset, w) in weights {
            if w < 0.0 {
                return Err("request distribution weights must be non-negative".into());
            }
            subset.sort();
            subset.dedup();
            if subset.is_empty() {
                return Err("the empty content set has probability zero".into());
            }
            if subset.iter().any(|k| k.0 >= content_count) {
                return Err(format!(
                    "request distribution names content {} outside 1..={content_count}",
                    subset.iter().map(|k| k.label()).max().unwrap()
                ));
            }
            if !seen.insert(subset.clone()) {
                return Err("duplicate subset in request distribution".into());
            }
            support.push((subset, w / total));
        }
        Ok(ContentCatalog { support })
    }

    /// Uniform distribution over all non-empty subsets of the universe.
    pub fn uniform_nonempty(content_count: usize) -> ContentCatalog {
        assert!(content_count >= 1 && content_count <= 16);
        let subsets: Vec<(Vec<ContentId>, f64)> = (1u32..(1 << content_count))
            .map(|mask| {
                let subset = (0..content_count)
                    .filter(|k| mask & (1 << k) != 0)
                    .map(ContentId)
                    .collect();
                (subset, 1.0)
            })
            .collect();
        ContentCatalog::new(content_count, subsets).expect("uniform support is valid")
    }

    pub fn support(&self) -> &[(Vec<ContentId>, f64)] {
        &self.support
    }

    /// Draws a subset V with probability P(V).
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<ContentId> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (subset, p) in &self.support {
            acc += p;
            if u < acc {
                return subset.clone();
            }
        }
        self.support.last().expect("non-empty support").0.clone()
    }
}

/// Overlay-wide scenario parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayParams {
    /// Maximum logical hop count H.
    pub hop_limit: u32,
    /// Combined parent + reserve budget D.
    pub reserve_budget: usize,
    /// Quantization step defining "equal bandwidth" for the traffic-based
    /// exchange candidate set.
    pub bandwidth_class: Rate,
}

impl Default for OverlayParams {
    fn default() -> OverlayParams {
        OverlayParams {
            hop_limit: 4,
            reserve_budget: 4,
            bandwidth_class: Rate::from_mbps(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContentOverlay {
    parents: Vec<BTreeSet<NodeId>>,
    children: Vec<BTreeSet<NodeId>>,
    reserves: Vec<BTreeSet<NodeId>>,
    hops: Vec<Option<u32>>,
    /// Nodes that can transmit this content: the serving OSS plus every
    /// fully served peer.
    holders: BTreeSet<NodeId>,
}

impl ContentOverlay {
    fn new(nodes: usize) -> ContentOverlay {
        ContentOverlay {
            parents: vec![BTreeSet::new(); nodes],
            children: vec![BTreeSet::new(); nodes],
            reserves: vec![BTreeSet::new(); nodes],
            hops: vec![None; nodes],
            holders: BTreeSet::new(),
        }
    }
}

/// One simulation world: immutable topology plus all mutable overlay state.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    nodes: Vec<NodeRecord>,
    overlays: Vec<ContentOverlay>,
    flows: BTreeMap<(NodeId, NodeId, ContentId), Rate>,
    /// Reverse index: node -> set of (content, holder) reserve slots it fills.
    reserve_refs: BTreeMap<NodeId, BTreeSet<(ContentId, NodeId)>>,
    pub topo: PhysicalTopology,
    pub params: OverlayParams,
    joined_pairs: i64,
    weighted_traffic: i64,
    total_traffic: i64,
}

impl World {
    pub fn new(
        topo: PhysicalTopology,
        content_count: usize,
        params: OverlayParams,
        specs: Vec<NodeSpec>,
    ) -> World {
        assert_eq!(
            specs.len(),
            topo.placement.node_count(),
            "one placement per node"
        );
        let mut overlays: Vec<ContentOverlay> =
            (0..content_count).map(|_| ContentOverlay::new(specs.len())).collect();
        let nodes: Vec<NodeRecord> = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let id = NodeId(i);
                let demand = match spec.role {
                    Role::Oss { content } => {
                        assert!(content.0 < content_count, "OSS serves unknown content");
                        overlays[content.0].hops[i] = Some(0);
                        overlays[content.0].holders.insert(id);
                        vec![Rate::ZERO; content_count]
                    }
                    Role::Peer => {
                        assert!(spec.demand.is_positive(), "peer demand must be positive");
                        vec![spec.demand; content_count]
                    }
                };
                NodeRecord {
                    id,
                    role: spec.role,
                    as_id: topo.placement.as_of(id),
                    capacity: spec.capacity,
                    upload: Rate::ZERO,
                    demand,
                    receive: vec![Rate::ZERO; content_count],
                    state: PeerState::Waiting,
                    epoch: 0,
                }
            })
            .collect();
        World {
            nodes,
            overlays,
            flows: BTreeMap::new(),
            reserve_refs: BTreeMap::new(),
            topo,
            params,
            joined_pairs: 0,
            weighted_traffic: 0,
            total_traffic: 0,
        }
    }

    /// Maximum logical hop count H.
    pub fn hop_limit(&self) -> u32 {
        self.params.hop_limit
    }

    /// Combined parent + reserve budget D.
    pub fn reserve_budget(&self) -> usize {
        self.params.reserve_budget
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn content_count(&self) -> usize {
        self.overlays.len()
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord {
        &self.nodes[id.0]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeRecord {
        &mut self.nodes[id.0]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn contents(&self) -> impl Iterator<Item = ContentId> {
        (0..self.overlays.len()).map(ContentId)
    }

    pub fn distance(&self, i: NodeId, j: NodeId) -> u32 {
        self.topo.distance(i, j)
    }

    pub fn headroom(&self, id: NodeId) -> Rate {
        self.nodes[id.0].headroom()
    }

    pub fn parents(&self, id: NodeId, k: ContentId) -> &BTreeSet<NodeId> {
        &self.overlays[k.0].parents[id.0]
    }

    pub fn children(&self, id: NodeId, k: ContentId) -> &BTreeSet<NodeId> {
        &self.overlays[k.0].children[id.0]
    }

    pub fn reserves(&self, id: NodeId, k: ContentId) -> &BTreeSet<NodeId> {
        &self.overlays[k.0].reserves[id.0]
    }

    pub fn hop(&self, id: NodeId, k: ContentId) -> Option<u32> {
        self.overlays[k.0].hops[id.0]
    }

    pub(crate) fn set_hop(&mut self, id: NodeId, k: ContentId, hop: Option<u32>) {
        self.overlays[k.0].hops[id.0] = hop;
    }

    pub fn flow(&self, src: NodeId, dst: NodeId, k: ContentId) -> Rate {
        self.flows.get(&(src, dst, k)).copied().unwrap_or(Rate::ZERO)
    }

    pub fn flows(&self) -> impl Iterator<Item = (NodeId, NodeId, ContentId, Rate)> + '_ {
        self.flows.iter().map(|(&(s, d, k), &r)| (s, d, k, r))
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    /// Count of fully served (peer, content) pairs — the Eq. 4 integrand.
    pub fn joined_pairs(&self) -> i64 {
        self.joined_pairs
    }

    /// Sum of d * x over all flows, in tenths-of-Mbps hop units.
    pub fn weighted_traffic(&self) -> i64 {
        self.weighted_traffic
    }

    /// Sum of x over all flows, in tenths of Mbps.
    pub fn total_traffic(&self) -> i64 {
        self.total_traffic
    }

    /// Nodes that currently hold content k (the serving OSS and every
    /// fully served peer), in ascending id order.
    pub fn holders(&self, k: ContentId) -> &BTreeSet<NodeId> {
        &self.overlays[k.0].holders
    }

    fn adjust_served(&mut self, dst: NodeId, k: ContentId, was_served: bool) {
        let now_served = self.nodes[dst.0].is_served(k);
        if now_served != was_served {
            self.joined_pairs += i64::from(now_served) - i64::from(was_served);
            if now_served {
                self.overlays[k.0].holders.insert(dst);
            } else {
                self.overlays[k.0].holders.remove(&dst);
            }
        }
    }

    /// Adds `rate` on (src -> dst, content). Increments an existing entry.
    /// Rejects (leaving the world untouched) on any capacity violation.
    pub fn add_flow(
        &mut self,
        src: NodeId,
        dst: NodeId,
        k: ContentId,
        rate: Rate,
    ) -> Result<(), ModelError> {
        if !rate.is_positive() {
            return Err(ModelError::NonPositiveRate);
        }
        if self.nodes[dst.0].is_oss() {
            return Err(ModelError::OssDestination { node: dst });
        }
        if self.nodes[src.0].headroom() < rate {
            return Err(ModelError::CapacityExceeded { node: src });
        }
        if self.nodes[dst.0].receive(k) + rate > self.nodes[dst.0].demand(k) {
            return Err(ModelError::DemandExceeded { node: dst, content: k });
        }
        let was_served = self.nodes[dst.0].is_served(k);
        *self.flows.entry((src, dst, k)).or_insert(Rate::ZERO) += rate;
        self.nodes[src.0].upload += rate;
        self.nodes[dst.0].receive[k.0] += rate;
        self.overlays[k.0].parents[dst.0].insert(src);
        self.overlays[k.0].children[src.0].insert(dst);
        // a node cannot be both parent and reserve
        self.remove_reserve(dst, k, src);
        self.weighted_traffic += rate * self.distance(src, dst);
        self.total_traffic += rate.tenths();
        self.adjust_served(dst, k, was_served);
        Ok(())
    }

    /// Removes the whole (src -> dst, content) entry, if present.
    pub(crate) fn remove_flow_entry(&mut self, src: NodeId, dst: NodeId, k: ContentId) {
        let Some(rate) = self.flows.remove(&(src, dst, k)) else {
            return;
        };
        let was_served = self.nodes[dst.0].is_served(k);
        self.nodes[src.0].upload -= rate;
        self.nodes[dst.0].receive[k.0] -= rate;
        self.overlays[k.0].parents[dst.0].remove(&src);
        self.overlays[k.0].children[src.0].remove(&dst);
        self.weighted_traffic -= rate * self.distance(src, dst);
        self.total_traffic -= rate.tenths();
        self.adjust_served(dst, k, was_served);
    }

    /// Registers `reserve` as a standby parent for (holder, content).
    pub(crate) fn add_reserve(&mut self, holder: NodeId, k: ContentId, reserve: NodeId) {
        debug_assert!(reserve != holder, "node cannot reserve itself");
        debug_assert!(
            !self.overlays[k.0].parents[holder.0].contains(&reserve),
            "reserve overlaps parent set"
        );
        if self.overlays[k.0].reserves[holder.0].insert(reserve) {
            self.reserve_refs.entry(reserve).or_default().insert((k, holder));
        }
    }

    pub(crate) fn remove_reserve(&mut self, holder: NodeId, k: ContentId, reserve: NodeId) {
        if self.overlays[k.0].reserves[holder.0].remove(&reserve) {
            if let Some(refs) = self.reserve_refs.get_mut(&reserve) {
                refs.remove(&(k, holder));
                if refs.is_empty() {
                    self.reserve_refs.remove(&reserve);
                }
            }
        }
    }

    pub(crate) fn clear_reserves(&mut self, holder: NodeId, k: ContentId) {
        let members: Vec<NodeId> = self.overlays[k.0].reserves[holder.0].iter().copied().collect();
        for r in members {
            self.remove_reserve(holder, k, r);
        }
    }

    /// Holders whose reserve set for content k contains `reserve`.
    pub(crate) fn reserve_holders(&self, reserve: NodeId, k: ContentId) -> Vec<NodeId> {
        self.reserve_refs
            .get(&reserve)
            .map(|refs| {
                refs.iter()
                    .filter(|&&(rk, _)| rk == k)
                    .map(|&(_, holder)| holder)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Moves the whole reserve set of (from, k) to (to, k), remapping a
    /// `to`-self-reference to `from` so the set stays valid for its holder.
    pub(crate) fn transfer_reserves(&mut self, from: NodeId, to: NodeId, k: ContentId) -> Vec<NodeId> {
        let members: Vec<NodeId> = self.overlays[k.0].reserves[from.0].iter().copied().collect();
        for &r in &members {
            self.remove_reserve(from, k, r);
        }
        members
            .into_iter()
            .map(|r| if r == to { from } else { r })
            .collect()
    }

    /// Drops every flow and set membership touching `node`; counterparties'
    /// ledgers and P/C/B sets are purged and affected hop counts recomputed.
    /// Idempotent.
    pub fn remove_flows_of(&mut self, node: NodeId) {
        for k in self.contents().collect::<Vec<_>>() {
            let parents: Vec<NodeId> = self.overlays[k.0].parents[node.0].iter().copied().collect();
            let children: Vec<NodeId> = self.overlays[k.0].children[node.0].iter().copied().collect();
            for &p in &parents {
                self.remove_flow_entry(p, node, k);
            }
            for &c in &children {
                self.remove_flow_entry(node, c, k);
            }
            self.clear_reserves(node, k);
            if !self.nodes[node.0].is_oss() {
                self.overlays[k.0].hops[node.0] = None;
            }
            if !children.is_empty() {
                // detaching flows can only lower hops, and only below the
                // removed node; its former children bound the region
                self.recompute_hops_region(k, &children)
                    .expect("flow removal cannot create a cycle");
            }
        }
        // purge this node from other nodes' reserve sets
        if let Some(refs) = self.reserve_refs.remove(&node) {
            for (k, holder) in refs {
                self.overlays[k.0].reserves[holder.0].remove(&node);
            }
        }
    }

    /// Topological hop assignment for one content, without mutating state.
    /// Works on a flattened adjacency copy; the mirror sets are walked once.
    fn compute_hops(&self, k: ContentId) -> Result<Vec<Option<u32>>, ModelError> {
        let n = self.nodes.len();
        let overlay = &self.overlays[k.0];
        let mut offsets = Vec::with_capacity(n + 1);
        let mut edge_total = 0usize;
        for i in 0..n {
            offsets.push(edge_total);
            edge_total += overlay.children[i].len();
        }
        offsets.push(edge_total);
        let mut adjacency = Vec::with_capacity(edge_total);
        for i in 0..n {
            adjacency.extend(overlay.children[i].iter().map(|c| c.0 as u32));
        }
        let mut indegree: Vec<u32> = (0..n).map(|i| overlay.parents[i].len() as u32).collect();
        // hop encoding: u32::MAX = unset, otherwise the hop value
        const UNSET: u32 = u32::MAX;
        let mut hops: Vec<u32> = vec![UNSET; n];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for i in 0..n {
            if indegree[i] == 0 {
                queue.push_back(i);
            }
            if let Role::Oss { content } = self.nodes[i].role {
                if content == k {
                    hops[i] = 0;
                }
            }
        }
        let mut visited = 0usize;
        while let Some(i) = queue.pop_front() {
            visited += 1;
            let next = match hops[i] {
                UNSET => UNSET,
                h => h + 1,
            };
            for &c in &adjacency[offsets[i]..offsets[i + 1]] {
                let c = c as usize;
                if next != UNSET && (hops[c] == UNSET || hops[c] < next) && !self.nodes[c].is_oss()
                {
                    hops[c] = next;
                }
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if visited != n {
            return Err(ModelError::CycleDetected { content: k });
        }
        Ok(hops
            .into_iter()
            .map(|h| if h == UNSET { None } else { Some(h) })
            .collect())
    }

    /// Reassigns logical hops for one content in topological order from the
    /// OSS. Peers without any hop-carrying parent become UNSET.
    pub fn recompute_logical_hops(&mut self, k: ContentId) -> Result<(), ModelError> {
        let hops = self.compute_hops(k)?;
        self.overlays[k.0].hops = hops;
        Ok(())
    }

    /// Recomputes hops only for the nodes reachable from `roots` along
    /// child edges. Hops outside that region cannot depend on hops inside
    /// it (the region is closed under children), so cached values are used
    /// across the boundary. Linear in the region size.
    pub(crate) fn recompute_hops_region(
        &mut self,
        k: ContentId,
        roots: &[NodeId],
    ) -> Result<(), ModelError> {
        let mut region: BTreeSet<NodeId> = BTreeSet::new();
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(u) = stack.pop() {
            if region.insert(u) {
                stack.extend(self.overlays[k.0].children[u.0].iter().copied());
            }
        }
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        for &u in &region {
            let within = self.overlays[k.0].parents[u.0]
                .iter()
                .filter(|p| region.contains(p))
                .count();
            indegree.insert(u, within);
        }
        let mut queue: VecDeque<NodeId> = indegree
            .iter()
            .filter_map(|(&u, &d)| (d == 0).then_some(u))
            .collect();
        let mut visited = 0usize;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            if !self.nodes[u.0].is_oss() {
                let hop = self.overlays[k.0].parents[u.0]
                    .iter()
                    .filter_map(|p| self.overlays[k.0].hops[p.0])
                    .max()
                    .map(|h| h + 1);
                self.overlays[k.0].hops[u.0] = hop;
            }
            let children: Vec<NodeId> = self.overlays[k.0].children[u.0]
                .iter()
                .copied()
                .filter(|c| region.contains(c))
                .collect();
            for c in children {
                let d = indegree.get_mut(&c).expect("region is closed under children");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(c);
                }
            }
        }
        if visited != region.len() {
            return Err(ModelError::CycleDetected { content: k });
        }
        Ok(())
    }

    /// Whether any receiving node at or below `root` sits past the hop
    /// limit for content k.
    pub(crate) fn subtree_overflows_hop_limit(&self, root: NodeId, k: ContentId) -> bool {
        let mut stack = vec![root];
        let mut seen = BTreeSet::new();
        while let Some(u) = stack.pop() {
            if !seen.insert(u) {
                continue;
            }
            if self.nodes[u.0].receive(k).is_positive()
                && self.overlays[k.0].hops[u.0].is_some_and(|h| h > self.params.hop_limit)
            {
                return true;
            }
            stack.extend(self.overlays[k.0].children[u.0].iter().copied());
        }
        false
    }

    /// Whether `to` is reachable from `from` along parent->child edges for k.
    pub fn reaches(&self, from: NodeId, to: NodeId, k: ContentId) -> bool {
        if from == to {
            return true;
        }
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(u) = stack.pop() {
            for &c in &self.overlays[k.0].children[u.0] {
                if c == to {
                    return true;
                }
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        false
    }

    /// Debug snapshot: per-content edge list then ledger lines, ordered by id.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for k in self.contents() {
            writeln!(out, "content {}", k.label()).unwrap();
            for (&(s, d, fk), &r) in &self.flows {
                if fk == k {
                    writeln!(out, "{s} {d} {r}").unwrap();
                }
            }
        }
        writeln!(out, "ledgers").unwrap();
        for node in &self.nodes {
            let mut line = format!("{} {} {}", node.id, node.capacity, node.upload);
            for k in 0..self.content_count() {
                write!(line, " {}", node.receive[k]).unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }
        out
    }

    /// Full invariant oracle: recomputes ledgers, mirrors, hops and traffic
    /// aggregates from the flow table and compares against the cached state.
    pub fn verify(&self) -> Result<(), InvariantViolation> {
        self.verify_impl(false)
    }

    /// `verify` plus the checks that hold at event boundaries (not
    /// mid-repair): peers are either fully served or idle per content, and
    /// every flow source actually holds the content it transmits.
    pub fn verify_steady(&self) -> Result<(), InvariantViolation> {
        self.verify_impl(true)
    }

    fn verify_impl(&self, steady: bool) -> Result<(), InvariantViolation> {
        let fail = |msg: String| Err(InvariantViolation(msg));
        let content_count = self.content_count();
        assert!(self.nodes.len() < (1 << 24) && content_count < (1 << 16));
        let pack = |k: usize, a: usize, b: usize| ((k as u64) << 48) | ((a as u64) << 24) | b as u64;
        let mut upload = vec![Rate::ZERO; self.nodes.len()];
        let mut receive = vec![Rate::ZERO; self.nodes.len() * content_count];
        let mut weighted = 0i64;
        let mut total = 0i64;
        let mut fwd = Vec::with_capacity(self.flows.len());
        let mut rev = Vec::with_capacity(self.flows.len());
        for (&(s, d, k), &r) in &self.flows {
            if !r.is_positive() {
                return fail(format!("flow {s}->{d} has non-positive rate {r}"));
            }
            if self.nodes[d.0].is_oss() {
                return fail(format!("flow into OSS {d}"));
            }
            if steady && !self.nodes[s.0].holds(k) {
                return fail(format!(
                    "source {s} transmits content {} it does not hold",
                    k.label()
                ));
            }
            upload[s.0] += r;
            receive[d.0 * content_count + k.0] += r;
            weighted += r * self.distance(s, d);
            total += r.tenths();
            fwd.push(pack(k.0, s.0, d.0));
            rev.push(pack(k.0, d.0, s.0));
        }
        fwd.sort_unstable();
        rev.sort_unstable();
        let mut joined = 0i64;
        for node in &self.nodes {
            let i = node.id;
            if upload[i.0] != node.upload {
                return fail(format!(
                    "node {i} cached m={} but flows sum to {}",
                    node.upload, upload[i.0]
                ));
            }
            if node.upload > node.capacity || node.upload < Rate::ZERO {
                return fail(format!("node {i} upload {} outside [0, {}]", node.upload, node.capacity));
            }
            for k in self.contents() {
                let n_k = receive[i.0 * content_count + k.0];
                if n_k != node.receive[k.0] {
                    return fail(format!(
                        "node {i} content {} cached n={} but flows sum to {n_k}",
                        k.label(),
                        node.receive[k.0]
                    ));
                }
                if n_k > node.demand(k) || n_k < Rate::ZERO {
                    return fail(format!(
                        "node {i} content {} receive {n_k} outside [0, {}]",
                        k.label(),
                        node.demand(k)
                    ));
                }
                if node.is_oss() && n_k.is_positive() {
                    return fail(format!("OSS {i} receives content {}", k.label()));
                }
                if steady && !node.is_oss() && n_k.is_positive() && n_k != node.demand(k) {
                    return fail(format!(
                        "peer {i} partially served for content {}: {n_k} of {}",
                        k.label(),
                        node.demand(k)
                    ));
                }
                if node.is_served(k) {
                    joined += 1;
                }
            }
        }
        // conservation: every transmitted unit is received
        let total_upload: Rate = self.nodes.iter().map(|n| n.upload).sum();
        let total_receive: Rate = self
            .nodes
            .iter()
            .flat_map(|n| n.receive.iter().copied())
            .sum();
        if total_upload != total_receive {
            return fail(format!(
                "conservation broken: sum m = {total_upload}, sum n = {total_receive}"
            ));
        }
        if joined != self.joined_pairs {
            return fail(format!(
                "joined pairs cached {} but recomputed {joined}",
                self.joined_pairs
            ));
        }
        if weighted != self.weighted_traffic || total != self.total_traffic {
            return fail(format!(
                "traffic aggregates cached ({}, {}) but recomputed ({weighted}, {total})",
                self.weighted_traffic, self.total_traffic
            ));
        }
        // the mirror sets must equal the flow-derived adjacency exactly;
        // both sides are walked in sorted order and zipped
        let mut fwd_cursor = 0usize;
        let mut rev_cursor = 0usize;
        let mut reserve_links = 0usize;
        for k in self.contents() {
            let overlay = &self.overlays[k.0];
            let mut holders = 0usize;
            for i in self.node_ids() {
                for &c in &overlay.children[i.0] {
                    if fwd.get(fwd_cursor) != Some(&pack(k.0, i.0, c.0)) {
                        return fail(format!(
                            "child set of {i} for content {} disagrees with flows",
                            k.label()
                        ));
                    }
                    fwd_cursor += 1;
                }
                if fwd.get(fwd_cursor).is_some_and(|&e| e >> 24 == pack(k.0, i.0, 0) >> 24) {
                    return fail(format!(
                        "flow from {i} missing in its child set for content {}",
                        k.label()
                    ));
                }
                for &p in &overlay.parents[i.0] {
                    if rev.get(rev_cursor) != Some(&pack(k.0, i.0, p.0)) {
                        return fail(format!(
                            "parent set of {i} for content {} disagrees with flows",
                            k.label()
                        ));
                    }
                    rev_cursor += 1;
                }
                if rev.get(rev_cursor).is_some_and(|&e| e >> 24 == pack(k.0, i.0, 0) >> 24) {
                    return fail(format!(
                        "flow into {i} missing in its parent set for content {}",
                        k.label()
                    ));
                }
                let reserves = &overlay.reserves[i.0];
                if reserves.contains(&i) {
                    return fail(format!("node {i} reserves itself for content {}", k.label()));
                }
                if !reserves.is_disjoint(&overlay.parents[i.0]) {
                    return fail(format!(
                        "reserve/parent overlap for node {i} content {}",
                        k.label()
                    ));
                }
                let budget = self.params.reserve_budget.saturating_sub(overlay.parents[i.0].len());
                if reserves.len() > budget {
                    return fail(format!(
                        "node {i} content {} has {} reserves over budget {budget}",
                        k.label(),
                        reserves.len()
                    ));
                }
                reserve_links += reserves.len();
                let holds = self.nodes[i.0].holds(k);
                if holds != overlay.holders.contains(&i) {
                    return fail(format!(
                        "holder index stale for node {i} content {}",
                        k.label()
                    ));
                }
                holders += usize::from(holds);
            }
            if holders != overlay.holders.len() {
                return fail(format!("holder index size wrong for content {}", k.label()));
            }
        }
        if fwd_cursor != fwd.len() || rev_cursor != rev.len() {
            return fail("mirror sets do not cover every flow".to_string());
        }
        let mut ref_links = 0usize;
        for (r, refs) in &self.reserve_refs {
            for &(k, holder) in refs {
                if !self.overlays[k.0].reserves[holder.0].contains(r) {
                    return fail(format!("stale reserve ref {r} -> ({}, {holder})", k.label()));
                }
            }
            ref_links += refs.len();
        }
        if ref_links != reserve_links {
            return fail(format!(
                "reserve index carries {ref_links} refs for {reserve_links} memberships"
            ));
        }
        // acyclicity and hop consistency
        for k in self.contents() {
            let hops = self
                .compute_hops(k)
                .map_err(|e| InvariantViolation(e.to_string()))?;
            if hops != self.overlays[k.0].hops {
                return fail(format!("cached hops stale for content {}", k.label()));
            }
            for i in self.node_ids() {
                if let Some(h) = self.overlays[k.0].hops[i.0] {
                    if !self.nodes[i.0].is_oss() && h > self.params.hop_limit && self.nodes[i.0].is_served(k)
                    {
                        return fail(format!(
                            "node {i} content {} at hop {h} over limit {}",
                            k.label(),
                            self.params.hop_limit
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
