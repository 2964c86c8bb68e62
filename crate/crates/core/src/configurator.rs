//! Join-time composition of selection and both exchanges, reserve-set
//! maintenance, and overlay repair when peers depart.
//!
//! A join clears the requester's sets, runs the configured selector per
//! requested content, optionally runs the bandwidth exchange per admitted
//! content and the traffic exchange once, then fills reserve sets up to the
//! budget D. A departure orphans the node's children; each orphan tries to
//! close its deficit from its reserve set and departs itself when it
//! cannot, cascading. Peers whose logical hop is pushed past H by a repair
//! can no longer receive within the hop bound and depart the same way.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use crate::exchange::exchange1_fixed_point;
use crate::exchange::{exchange1, exchange2};
use crate::model::World;
use crate::selection::{select, Selector};
use crate::units::{ContentId, NodeId};

/// Overlay construction policy: a selector plus whether the two exchange
/// procedures run after admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    pub selector: Selector,
    pub exchanges: bool,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy { selector: Selector::Mlh, exchanges: false },
        Policy { selector: Selector::Mph, exchanges: false },
        Policy { selector: Selector::Random, exchanges: false },
        Policy { selector: Selector::Mlh, exchanges: true },
        Policy { selector: Selector::Mph, exchanges: true },
        Policy { selector: Selector::Random, exchanges: true },
    ];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.selector {
            Selector::Mlh => "mlh",
            Selector::Mph => "mph",
            Selector::Random => "scamp-like",
        };
        if self.exchanges {
            write!(f, "{base}+ex")
        } else {
            write!(f, "{base}")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown policy {0:?} (expected mlh, mph, scamp-like, mlh+ex, mph+ex or scamp-like+ex)")]
pub struct PolicyParseError(String);

impl FromStr for Policy {
    type Err = PolicyParseError;

    fn from_str(s: &str) -> Result<Policy, PolicyParseError> {
        let (base, exchanges) = match s.strip_suffix("+ex") {
            Some(base) => (base, true),
            None => (s, false),
        };
        let selector = match base {
            "mlh" => Selector::Mlh,
            "mph" => Selector::Mph,
            "scamp-like" => Selector::Random,
            _ => return Err(PolicyParseError(s.to_string())),
        };
        Ok(Policy { selector, exchanges })
    }
}

/// One join request: a waiting peer and the content set it drew.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinRequest {
    pub peer: NodeId,
    /// Requested contents, ascending; never empty.
    pub contents: Vec<ContentId>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinResult {
    pub peer: NodeId,
    /// Admission decision per requested content, in request order.
    pub decisions: Vec<(ContentId, bool)>,
    /// Whether the bandwidth-exchange termination condition held after the
    /// per-content exchange pass (vacuously true when exchanges are off).
    pub exchange1_fixed_point: bool,
    pub exchange2_partner: Option<NodeId>,
}

impl JoinResult {
    pub fn any_admitted(&self) -> bool {
        self.decisions.iter().any(|&(_, admitted)| admitted)
    }
}

/// Fills the reserve set of (peer, k) with uniformly random distinct served
/// viewers up to the budget D - |P|, or until the pool runs out.
fn fill_reserves(world: &mut World, peer: NodeId, k: ContentId, rng: &mut impl Rng) {
    let target = world
        .params
        .reserve_budget
        .saturating_sub(world.parents(peer, k).len());
    let eligible = |world: &World, j: NodeId| {
        j != peer
            && !world.node(j).is_oss()
            && world.node(j).is_served(k)
            && !world.parents(peer, k).contains(&j)
            && !world.reserves(peer, k).contains(&j)
    };
    // rejection sampling is uniform over the eligible pool and cheap while
    // holders are dense; fall back to materializing the pool otherwise
    let n = world.node_count();
    if world.holders(k).len() * 4 >= n {
        let mut attempts = 0usize;
        while world.reserves(peer, k).len() < target && attempts < 4 * n {
            attempts += 1;
            let j = NodeId(rng.random_range(0..n));
            if eligible(world, j) {
                world.add_reserve(peer, k, j);
            }
        }
    }
    if world.reserves(peer, k).len() < target {
        let mut pool: Vec<NodeId> = world
            .holders(k)
            .iter()
            .copied()
            .filter(|&j| eligible(world, j))
            .collect();
        while world.reserves(peer, k).len() < target && !pool.is_empty() {
            let pick = pool.swap_remove(rng.random_range(0..pool.len()));
            world.add_reserve(peer, k, pick);
        }
    }
}

/// Runs the initial peer configuration for one join request and reports the
/// per-content admission decisions.
pub fn initial_configuration(
    world: &mut World,
    req: &JoinRequest,
    policy: Policy,
    rng: &mut impl Rng,
) -> JoinResult {
    let peer = req.peer;
    // Step 1: start from clean sets for every requested content
    for &k in &req.contents {
        debug_assert!(world.parents(peer, k).is_empty(), "joiner must be detached");
        world.clear_reserves(peer, k);
    }
    // Step 2: per-content selection
    let mut decisions = Vec::with_capacity(req.contents.len());
    for &k in &req.contents {
        let outcome = select(world, peer, k, policy.selector, rng);
        decisions.push((k, outcome.is_admitted()));
    }
    // Step 3: bandwidth-based exchange per admitted content
    if policy.exchanges {
        for &(k, admitted) in &decisions {
            if admitted {
                exchange1(world, peer, k);
            }
        }
    }
    let exchange1_fixed_point = !policy.exchanges
        || decisions
            .iter()
            .filter(|&&(_, admitted)| admitted)
            .all(|&(k, _)| exchange1_fixed_point(world, peer, k));
    // Step 4: traffic-based exchange, once
    let exchange2_partner = if policy.exchanges && decisions.iter().any(|d| d.1) {
        exchange2(world, peer)
    } else {
        None
    };
    // Step 5: reserve fill for every content the peer now holds
    for k in world.contents().collect::<Vec<_>>() {
        if world.node(peer).receive(k).is_positive() {
            fill_reserves(world, peer, k, rng);
        }
    }
    JoinResult {
        peer,
        decisions,
        exchange1_fixed_point,
        exchange2_partner,
    }
}

/// Tries to close the (j, k) deficit from j's reserve set. Every tried
/// reserve leaves the set: into the parent set when usable, discarded
/// otherwise. A reserve is usable if it still serves k, has headroom, is
/// not a descendant of j (which would create a cycle) and its adoption
/// keeps j and every node below j within the hop limit; adoptions that
/// would push a served descendant past H are undone and the reserve
/// counted as unusable. Returns whether the deficit closed.
fn close_deficit_from_reserves(
    world: &mut World,
    j: NodeId,
    k: ContentId,
    rng: &mut impl Rng,
) -> bool {
    loop {
        let deficit = world.node(j).demand(k) - world.node(j).receive(k);
        if !deficit.is_positive() {
            return true;
        }
        let pool: Vec<NodeId> = world.reserves(j, k).iter().copied().collect();
        if pool.is_empty() {
            return false;
        }
        let r = pool[rng.random_range(0..pool.len())];
        world.remove_reserve(j, k, r);
        let usable = world.node(r).is_served(k)
            && world.headroom(r).is_positive()
            && world.hop(r, k).is_some_and(|h| h + 1 <= world.params.hop_limit)
            && !world.reaches(j, r, k);
        if !usable {
            continue;
        }
        let x = deficit.min(world.headroom(r));
        world
            .add_flow(r, j, k, x)
            .expect("usable reserve adoption cannot fail");
        world
            .recompute_hops_region(k, &[j])
            .expect("reserve adoption is cycle-checked");
        let overflow = world.subtree_overflows_hop_limit(j, k);
        if overflow {
            world.remove_flow_entry(r, j, k);
            world
                .recompute_hops_region(k, &[j])
                .expect("undoing an adoption cannot create a cycle");
        }
    }
}

/// Removes `departed` from the overlay and repairs its orphaned children,
/// cascading departures for peers that cannot be repaired. Returns every
/// additionally departed peer, in departure order.
pub fn repair_on_departure(world: &mut World, departed: NodeId, rng: &mut impl Rng) -> Vec<NodeId> {
    let mut cascade = Vec::new();
    depart(world, departed, rng, &mut cascade);
    cascade
}

fn depart(world: &mut World, node: NodeId, rng: &mut impl Rng, cascade: &mut Vec<NodeId>) {
    // orphans in deterministic order: ascending child id, then content id
    let mut orphans: Vec<(NodeId, ContentId)> = Vec::new();
    for k in world.contents().collect::<Vec<_>>() {
        for &c in world.children(node, k) {
            orphans.push((c, k));
        }
    }
    orphans.sort();
    world.remove_flows_of(node);
    for (child, k) in orphans {
        if cascade.contains(&child) {
            continue; // already departed in a nested cascade
        }
        let deficit = world.node(child).demand(k) - world.node(child).receive(k);
        if !deficit.is_positive() {
            continue;
        }
        if close_deficit_from_reserves(world, child, k, rng) {
            fill_reserves(world, child, k, rng);
        } else {
            cascade.push(child);
            depart(world, child, rng, cascade);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeSpec, OverlayParams, Role};
    use crate::topology::{AsGraph, Placement, PhysicalTopology};
    use crate::units::{AsId, Rate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const K1: ContentId = ContentId(0);
    const K2: ContentId = ContentId(1);

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(42)
    }

    /// Two OSSes (contents 1 and 2) plus peers, single AS.
    fn dual_content_world(oss_caps: [f64; 2], peer_caps: &[f64]) -> World {
        let graph = AsGraph::from_edges(1, []).unwrap();
        let placement =
            Placement::from_assignments(&graph, vec![AsId(1); 2 + peer_caps.len()]);
        let topo = PhysicalTopology::new(graph, placement);
        let mut specs = vec![
            NodeSpec {
                role: Role::Oss { content: K1 },
                capacity: Rate::from_mbps(oss_caps[0]),
                demand: Rate::ZERO,
            },
            NodeSpec {
                role: Role::Oss { content: K2 },
                capacity: Rate::from_mbps(oss_caps[1]),
                demand: Rate::ZERO,
            },
        ];
        specs.extend(peer_caps.iter().map(|&cap| NodeSpec {
            role: Role::Peer,
            capacity: Rate::from_mbps(cap),
            demand: Rate::from_mbps(2.0),
        }));
        World::new(topo, 2, OverlayParams::default(), specs)
    }

    fn join(world: &mut World, peer: usize, contents: &[ContentId], policy: &str) -> JoinResult {
        let req = JoinRequest {
            peer: NodeId(peer),
            contents: contents.to_vec(),
            timestamp: 0.0,
        };
        initial_configuration(world, &req, policy.parse().unwrap(), &mut rng())
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!("mlh-ex".parse::<Policy>().is_err());
        assert!("scamp".parse::<Policy>().is_err());
    }

    #[test]
    fn fresh_world_single_content_join() {
        let mut w = dual_content_world([30.0, 30.0], &[4.0]);
        let result = join(&mut w, 2, &[K1], "mlh+ex");
        assert_eq!(result.decisions, vec![(K1, true)]);
        assert!(result.exchange1_fixed_point);
        assert_eq!(result.exchange2_partner, None);
        assert_eq!(w.parents(NodeId(2), K1).iter().copied().collect::<Vec<_>>(), vec![NodeId(0)]);
        assert_eq!(w.hop(NodeId(2), K1), Some(1));
        assert!(w.reserves(NodeId(2), K1).is_empty(), "no viewers to reserve");
        w.verify_steady().unwrap();
    }

    #[test]
    fn saturated_content_is_rejected_per_content() {
        let mut w = dual_content_world([30.0, 1.0], &[4.0]);
        let result = join(&mut w, 2, &[K1, K2], "mlh");
        assert_eq!(result.decisions, vec![(K1, true), (K2, false)]);
        assert!(result.any_admitted());
        assert!(w.node(NodeId(2)).is_served(K1));
        assert_eq!(w.node(NodeId(2)).receive(K2), Rate::ZERO);
        w.verify_steady().unwrap();
    }

    #[test]
    fn random_policy_composes_with_exchanges() {
        // OSS saturated by a weak peer; the only candidate for the joiner is
        // that weak peer, so selection is forced and exchange1 must bubble
        // the strong joiner above it
        let mut w = dual_content_world([2.0, 30.0], &[2.0, 6.0]);
        join(&mut w, 2, &[K1], "scamp-like");
        assert_eq!(w.hop(NodeId(2), K1), Some(1));
        let result = join(&mut w, 3, &[K1], "scamp-like+ex");
        assert!(result.any_admitted());
        assert!(result.exchange1_fixed_point);
        assert_eq!(w.hop(NodeId(3), K1), Some(1), "exchanges ran for the random policy");
        assert_eq!(w.hop(NodeId(2), K1), Some(2));
        w.verify_steady().unwrap();
    }

    #[test]
    fn plain_policies_skip_exchanges() {
        let mut w = dual_content_world([2.0, 30.0], &[2.0, 6.0]);
        join(&mut w, 2, &[K1], "mlh");
        let result = join(&mut w, 3, &[K1], "mlh");
        assert!(result.any_admitted());
        assert_eq!(result.exchange2_partner, None);
        assert_eq!(w.hop(NodeId(3), K1), Some(2), "no exchange, joiner stays below");
    }

    #[test]
    fn reserves_fill_up_to_budget_from_viewers() {
        let mut w = dual_content_world([30.0, 30.0], &[4.0, 4.0, 4.0, 4.0, 4.0]);
        for p in 2..=5 {
            join(&mut w, p, &[K1], "mlh");
        }
        let result = join(&mut w, 6, &[K1], "mlh");
        assert!(result.any_admitted());
        let p6 = NodeId(6);
        let reserves = w.reserves(p6, K1).clone();
        // D = 4, one parent (the OSS) -> up to 3 reserves from the 4 viewers
        assert_eq!(w.parents(p6, K1).len(), 1);
        assert_eq!(reserves.len(), 3);
        for r in reserves {
            assert!(!w.node(r).is_oss());
            assert!(w.node(r).is_served(K1));
            assert!(!w.parents(p6, K1).contains(&r));
            assert_ne!(r, p6);
        }
        w.verify_steady().unwrap();
    }

    #[test]
    fn departing_leaf_causes_no_cascade() {
        let mut w = dual_content_world([30.0, 30.0], &[4.0, 4.0]);
        join(&mut w, 2, &[K1], "mlh");
        join(&mut w, 3, &[K1], "mlh");
        let cascade = repair_on_departure(&mut w, NodeId(3), &mut rng());
        assert!(cascade.is_empty());
        assert!(w.node(NodeId(2)).is_served(K1), "sibling untouched");
        w.verify_steady().unwrap();
    }

    #[test]
    fn child_rehomes_to_reserve_with_headroom() {
        // OSS capacity only admits via chain: o -> a -> child, plus viewer v
        // directly under o; v lands in the child's reserve set
        let mut w = dual_content_world([4.0, 30.0], &[4.0, 4.0, 4.0]);
        let (a, v, child) = (NodeId(2), NodeId(3), NodeId(4));
        join(&mut w, 2, &[K1], "mlh"); // a under OSS (headroom left: 2)
        join(&mut w, 3, &[K1], "mlh"); // v under OSS (OSS now full)
        let r = join(&mut w, 4, &[K1], "mlh");
        assert!(r.any_admitted());
        assert_eq!(w.hop(child, K1), Some(2));
        let reserves = w.reserves(child, K1).clone();
        assert!(reserves.len() == 1 && (reserves.contains(&a) || reserves.contains(&v)));

        // make sure the reserve is v (a is about to depart)
        if reserves.contains(&a) {
            w.clear_reserves(child, K1);
            w.add_reserve(child, K1, v);
        }
        let cascade = repair_on_departure(&mut w, a, &mut rng());
        assert!(cascade.is_empty(), "child re-homed, no cascade");
        assert!(w.node(child).is_served(K1));
        assert!(w.parents(child, K1).contains(&v));
        assert_eq!(w.hop(child, K1), Some(2), "hop recomputed through v");
        w.verify_steady().unwrap();
    }

    #[test]
    fn exhausted_reserves_cascade_down_a_chain() {
        // forced chain o(cap 2) -> a -> b -> c with no spare capacity anywhere
        let mut w = dual_content_world([2.0, 30.0], &[2.0, 2.0, 2.0]);
        join(&mut w, 2, &[K1], "mlh");
        join(&mut w, 3, &[K1], "mlh");
        join(&mut w, 4, &[K1], "mlh");
        assert_eq!(w.hop(NodeId(4), K1), Some(3));
        let cascade = repair_on_departure(&mut w, NodeId(2), &mut rng());
        assert_eq!(cascade, vec![NodeId(3), NodeId(4)], "whole chain starves in order");
        assert_eq!(w.joined_pairs(), 0);
        assert_eq!(w.flow_count(), 0);
        w.verify_steady().unwrap();
    }

    #[test]
    fn repair_skips_reserves_that_would_break_the_hop_bound() {
        // deep branch o -> 2 -> 3 -> 4 -> 5 places node 5 at hop 4 = H with
        // plenty of headroom; side branch o -> 6 -> 7; node 5 is node 7's
        // only reserve but adopting it would put 7 at hop 5
        let mut w = dual_content_world([4.0, 30.0], &[2.0, 2.0, 2.0, 30.0, 2.0, 4.0]);
        let n = Rate::from_mbps(2.0);
        for (s, d) in [(0, 2), (2, 3), (3, 4), (4, 5), (0, 6), (6, 7)] {
            w.add_flow(NodeId(s), NodeId(d), K1, n).unwrap();
        }
        w.recompute_logical_hops(K1).unwrap();
        assert_eq!(w.hop(NodeId(5), K1), Some(4));
        w.add_reserve(NodeId(7), K1, NodeId(5));
        let cascade = repair_on_departure(&mut w, NodeId(6), &mut rng());
        assert_eq!(cascade, vec![NodeId(7)], "hop-4 reserve unusable, orphan starves");
        assert!(w.node(NodeId(5)).is_served(K1), "deep branch untouched");
        assert!(w.reserves(NodeId(7), K1).is_empty(), "tried reserve discarded");
        w.verify_steady().unwrap();
    }

    #[test]
    fn repair_rejects_descendant_reserves() {
        // o -> a -> b; b is (incorrectly attractive) reserve for a
        let mut w = dual_content_world([4.0, 30.0], &[4.0, 4.0, 4.0]);
        let (a, b) = (NodeId(2), NodeId(3));
        join(&mut w, 2, &[K1], "mlh");
        join(&mut w, 3, &[K1], "mlh"); // b under OSS (2.0 left) or under a
        // force b under a to make it a descendant
        if !w.children(a, K1).contains(&b) {
            w.remove_flows_of(b);
            w.add_flow(a, b, K1, Rate::from_mbps(2.0)).unwrap();
            w.recompute_logical_hops(K1).unwrap();
        }
        // second parent for a is a real viewer v
        join(&mut w, 4, &[K1], "mlh");
        let v = NodeId(4);
        w.clear_reserves(a, K1);
        w.add_reserve(a, K1, b);
        w.add_reserve(a, K1, v);
        let cascade = repair_on_departure(&mut w, NodeId(0), &mut rng());
        // OSS 1 fed everything; a must re-home without adopting b
        assert!(!w.parents(a, K1).contains(&b), "descendant reserve rejected");
        // whatever else happened, the world stays consistent
        let _ = cascade;
        w.verify().unwrap();
    }
}
