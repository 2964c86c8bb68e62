//! Position-exchange procedures that relocate peers inside the overlay
//! after admission.
//!
//! A swap is the transposition of two peers' overlay positions: parent and
//! child sets, the attached flows (rates carried with the positions),
//! reserve memberships and logical hops all trade places; node-intrinsic
//! attributes (AS location, capacity, session state) stay put. Exchange 1
//! recursively bubbles a high-capacity joiner above its weaker parents;
//! exchange 2 trades places with an equal-bandwidth peer when that lowers
//! the summed physical-traffic cost Z of both.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::World;
use crate::units::{ContentId, NodeId, Rate};

/// Which contents a swap relocates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapScope {
    Content(ContentId),
    AllContents,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("swap {a} <-> {b} refused: {reason}")]
pub struct SwapRefused {
    pub a: NodeId,
    pub b: NodeId,
    reason: &'static str,
}

fn scope_contents(world: &World, scope: SwapScope) -> Vec<ContentId> {
    match scope {
        SwapScope::Content(k) => vec![k],
        SwapScope::AllContents => world.contents().collect(),
    }
}

/// All flow entries with an endpoint in {a, b} within scope, deduplicated.
fn touching_flows(
    world: &World,
    a: NodeId,
    b: NodeId,
    contents: &[ContentId],
) -> Vec<(NodeId, NodeId, ContentId, Rate)> {
    let mut keys: BTreeSet<(NodeId, NodeId, ContentId)> = BTreeSet::new();
    for &k in contents {
        for &x in [a, b].iter() {
            for &p in world.parents(x, k) {
                keys.insert((p, x, k));
            }
            for &c in world.children(x, k) {
                keys.insert((x, c, k));
            }
        }
    }
    keys.into_iter()
        .map(|(s, d, k)| (s, d, k, world.flow(s, d, k)))
        .collect()
}

/// Checks that each peer can carry the other's position: upload within
/// capacity and per-content receive within demand.
fn swap_feasible(world: &World, a: NodeId, b: NodeId, scope: SwapScope) -> Result<(), SwapRefused> {
    let refuse = |reason| Err(SwapRefused { a, b, reason });
    let contents = scope_contents(world, scope);
    let entries = touching_flows(world, a, b, &contents);
    let out_of = |n: NodeId| -> Rate { entries.iter().filter(|e| e.0 == n).map(|e| e.3).sum() };
    let new_upload_a = world.node(a).upload() - out_of(a) + out_of(b);
    let new_upload_b = world.node(b).upload() - out_of(b) + out_of(a);
    if new_upload_a > world.node(a).capacity {
        return refuse("upload exceeds capacity of first peer");
    }
    if new_upload_b > world.node(b).capacity {
        return refuse("upload exceeds capacity of second peer");
    }
    for &k in &contents {
        let in_of = |n: NodeId| -> Rate {
            entries
                .iter()
                .filter(|e| e.1 == n && e.2 == k)
                .map(|e| e.3)
                .sum()
        };
        let new_recv_a = world.node(a).receive(k) - in_of(a) + in_of(b);
        let new_recv_b = world.node(b).receive(k) - in_of(b) + in_of(a);
        if new_recv_a > world.node(a).demand(k) {
            return refuse("receive exceeds demand of first peer");
        }
        if new_recv_b > world.node(b).demand(k) {
            return refuse("receive exceeds demand of second peer");
        }
    }
    Ok(())
}

/// Exchanges the overlay positions of peers `a` and `b` within scope.
///
/// Flow rates travel with the positions, so a parent-child pair inverts:
/// if `b` fed `a`, afterwards `a` feeds `b` at the same rate. Applying the
/// same swap twice restores the original world. Refused (world untouched)
/// when either peer cannot carry the other's upload or receive load.
pub fn swap_positions(
    world: &mut World,
    a: NodeId,
    b: NodeId,
    scope: SwapScope,
) -> Result<(), SwapRefused> {
    assert!(a != b, "swap requires two distinct peers");
    assert!(
        !world.node(a).is_oss() && !world.node(b).is_oss(),
        "OSS positions never move"
    );
    swap_feasible(world, a, b, scope)?;
    let transpose = |n: NodeId| {
        if n == a {
            b
        } else if n == b {
            a
        } else {
            n
        }
    };
    let contents = scope_contents(world, scope);
    // detach every reserve membership held by or referencing a/b in scope;
    // they re-attach transposed after the flows move
    let mut reserve_adds: Vec<(NodeId, ContentId, NodeId)> = Vec::new();
    for &k in &contents {
        for (from, to) in [(a, b), (b, a)] {
            for r in world.transfer_reserves(from, to, k) {
                reserve_adds.push((to, k, r));
            }
        }
        for referrer in [a, b] {
            for holder in world.reserve_holders(referrer, k) {
                world.remove_reserve(holder, k, referrer);
                reserve_adds.push((holder, k, transpose(referrer)));
            }
        }
    }
    let entries = touching_flows(world, a, b, &contents);
    for &(s, d, k, _) in &entries {
        world.remove_flow_entry(s, d, k);
    }
    for &(s, d, k, r) in &entries {
        world
            .add_flow(transpose(s), transpose(d), k, r)
            .expect("swap feasibility pre-checked");
    }
    for (holder, k, r) in reserve_adds {
        world.add_reserve(holder, k, r);
    }
    for &k in &contents {
        let (ha, hb) = (world.hop(a, k), world.hop(b, k));
        world.set_hop(a, k, hb);
        world.set_hop(b, k, ha);
    }
    Ok(())
}

/// Bandwidth-based recursive exchange: while some non-OSS parent of `i` for
/// content k has strictly less capacity and at least as much upload usage,
/// swap `i` with the smallest-capacity such parent (ties by id) and repeat
/// from the new parent set. An infeasible swap drops that candidate and the
/// scan continues.
pub fn exchange1(world: &mut World, i: NodeId, k: ContentId) {
    loop {
        let mut candidates: Vec<NodeId> = world
            .parents(i, k)
            .iter()
            .copied()
            .filter(|&l| {
                !world.node(l).is_oss()
                    && world.node(i).capacity > world.node(l).capacity
                    && world.node(i).upload() <= world.node(l).upload()
            })
            .collect();
        candidates.sort_by_key(|&l| (world.node(l).capacity, l));
        let committed = candidates
            .into_iter()
            .any(|j| swap_positions(world, i, j, SwapScope::Content(k)).is_ok());
        if !committed {
            return;
        }
    }
}

/// The exchange-1 termination predicate for (i, k): no swappable parent
/// remains that has strictly less capacity while carrying at least as much
/// upload. Parents that match the capacity/usage condition but cannot
/// feasibly trade positions do not count; the algorithm skips them.
pub fn exchange1_fixed_point(world: &World, i: NodeId, k: ContentId) -> bool {
    world.parents(i, k).iter().all(|&l| {
        world.node(l).is_oss()
            || !(world.node(i).capacity > world.node(l).capacity
                && world.node(i).upload() <= world.node(l).upload())
            || swap_feasible(world, i, l, SwapScope::Content(k)).is_err()
    })
}

/// Physical-traffic cost Z of one node: the distance-weighted sum of its
/// inbound and outbound flow rates over all contents, in tenths-of-Mbps
/// hop units.
pub fn traffic_cost(world: &World, i: NodeId) -> i64 {
    let mut cost = 0i64;
    for k in world.contents() {
        for &p in world.parents(i, k) {
            cost += world.flow(p, i, k) * world.distance(p, i);
        }
        for &c in world.children(i, k) {
            cost += world.flow(i, c, k) * world.distance(i, c);
        }
    }
    cost
}

/// Post-swap costs (Z'_i, Z'_j) of an all-contents swap, evaluated from the
/// two current neighborhoods without touching the world.
fn hypothetical_costs(world: &World, i: NodeId, j: NodeId) -> (i64, i64) {
    let transpose = |n: NodeId| {
        if n == i {
            j
        } else if n == j {
            i
        } else {
            n
        }
    };
    // the occupant inherits the other's neighbors (transposed for
    // self-references) and rates; distances are measured from the occupant
    let cost_in_position_of = |occupant: NodeId, position: NodeId| -> i64 {
        let mut cost = 0i64;
        for k in world.contents() {
            for &p in world.parents(position, k) {
                cost += world.flow(p, position, k) * world.distance(transpose(p), occupant);
            }
            for &c in world.children(position, k) {
                cost += world.flow(position, c, k) * world.distance(occupant, transpose(c));
            }
        }
        cost
    };
    (cost_in_position_of(i, j), cost_in_position_of(j, i))
}

/// Bandwidth class index under the configured quantization step.
fn bandwidth_class(world: &World, n: NodeId) -> i64 {
    let step = world.params.bandwidth_class.tenths().max(1);
    world.node(n).capacity.tenths() / step
}

/// Physical-traffic-based exchange: evaluates an all-contents position swap
/// against every equal-bandwidth-class viewing peer and commits the single
/// candidate with the largest strict reduction of Z_i + Z_j, if any.
/// Returns the chosen partner.
pub fn exchange2(world: &mut World, i: NodeId) -> Option<NodeId> {
    let class = bandwidth_class(world, i);
    let z_i = traffic_cost(world, i);
    let mut best: Option<(i64, NodeId)> = None;
    for j in world.node_ids() {
        if j == i || world.node(j).is_oss() || bandwidth_class(world, j) != class {
            continue;
        }
        // viewing peers only: the candidate must hold at least one content
        if !world.contents().any(|k| world.node(j).receive(k).is_positive()) {
            continue;
        }
        if swap_feasible(world, i, j, SwapScope::AllContents).is_err() {
            continue;
        }
        let z_j = traffic_cost(world, j);
        let (z_i_new, z_j_new) = hypothetical_costs(world, i, j);
        let gain = (z_i + z_j) - (z_i_new + z_j_new);
        if gain > 0 && best.is_none_or(|(g, _)| gain > g) {
            best = Some((gain, j));
        }
    }
    let (_, j) = best?;
    swap_positions(world, i, j, SwapScope::AllContents).expect("feasibility pre-checked");
    Some(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeSpec, OverlayParams, Role};
    use crate::topology::{AsGraph, Placement, PhysicalTopology};
    use crate::units::AsId;

    const K: ContentId = ContentId(0);

    fn line_world(contents: usize, node_as: &[u32], caps: &[f64]) -> World {
        assert_eq!(node_as.len(), caps.len());
        let graph = AsGraph::from_edges(2, [(1, 2)]).unwrap();
        let placement =
            Placement::from_assignments(&graph, node_as.iter().map(|&a| AsId(a)).collect());
        let topo = PhysicalTopology::new(graph, placement);
        let specs: Vec<NodeSpec> = caps
            .iter()
            .enumerate()
            .map(|(idx, &cap)| {
                if idx < contents {
                    NodeSpec {
                        role: Role::Oss { content: ContentId(idx) },
                        capacity: Rate::from_mbps(cap),
                        demand: Rate::ZERO,
                    }
                } else {
                    NodeSpec {
                        role: Role::Peer,
                        capacity: Rate::from_mbps(cap),
                        demand: Rate::from_mbps(2.0),
                    }
                }
            })
            .collect();
        World::new(topo, contents, OverlayParams::default(), specs)
    }

    fn feed(w: &mut World, src: usize, dst: usize, mbps: f64) {
        feed_k(w, src, dst, K, mbps);
    }

    fn feed_k(w: &mut World, src: usize, dst: usize, k: ContentId, mbps: f64) {
        w.add_flow(NodeId(src), NodeId(dst), k, Rate::from_mbps(mbps))
            .unwrap();
        w.recompute_logical_hops(k).unwrap();
    }

    #[test]
    fn chain_swap_inverts_parent_child() {
        // o -> b -> a with x = 2 on both hops
        let mut w = line_world(1, &[1, 1, 1], &[30.0, 4.0, 4.0]);
        let (o, b, a) = (0, 1, 2);
        feed(&mut w, o, b, 2.0);
        feed(&mut w, b, a, 2.0);
        swap_positions(&mut w, NodeId(a), NodeId(b), SwapScope::Content(K)).unwrap();
        assert_eq!(w.flow(NodeId(o), NodeId(a), K), Rate::from_mbps(2.0));
        assert_eq!(w.flow(NodeId(a), NodeId(b), K), Rate::from_mbps(2.0));
        assert_eq!(w.hop(NodeId(a), K), Some(1));
        assert_eq!(w.hop(NodeId(b), K), Some(2));
        w.verify().unwrap();
    }

    #[test]
    fn swap_is_an_involution() {
        let mut w = line_world(1, &[1, 2, 1, 2, 1], &[30.0, 6.0, 5.0, 4.0, 4.0]);
        feed(&mut w, 0, 1, 2.0);
        feed(&mut w, 0, 2, 2.0);
        feed(&mut w, 1, 3, 1.0);
        feed(&mut w, 2, 3, 1.0);
        feed(&mut w, 2, 4, 2.0);
        w.add_reserve(NodeId(3), K, NodeId(4));
        w.add_reserve(NodeId(4), K, NodeId(1));
        let original = w.clone();
        swap_positions(&mut w, NodeId(1), NodeId(4), SwapScope::Content(K)).unwrap();
        assert_ne!(w, original);
        w.verify().unwrap();
        swap_positions(&mut w, NodeId(1), NodeId(4), SwapScope::Content(K)).unwrap();
        assert_eq!(w, original, "double swap restores the world exactly");
    }

    #[test]
    fn unrelated_swap_is_a_pure_relabel() {
        let mut w = line_world(1, &[1, 1, 1, 1, 1], &[30.0, 4.0, 4.0, 4.0, 4.0]);
        feed(&mut w, 0, 1, 2.0);
        feed(&mut w, 0, 2, 2.0);
        feed(&mut w, 1, 3, 2.0);
        feed(&mut w, 2, 4, 2.0);
        let before = w.clone();
        swap_positions(&mut w, NodeId(1), NodeId(2), SwapScope::Content(K)).unwrap();
        // every former neighbor of 1 now neighbors 2 and vice versa
        for n in [0usize, 3, 4] {
            let n = NodeId(n);
            assert_eq!(
                before.children(NodeId(1), K).contains(&n),
                w.children(NodeId(2), K).contains(&n)
            );
            assert_eq!(
                before.children(NodeId(2), K).contains(&n),
                w.children(NodeId(1), K).contains(&n)
            );
        }
        assert_eq!(w.flow(NodeId(2), NodeId(3), K), Rate::from_mbps(2.0));
        assert_eq!(w.flow(NodeId(1), NodeId(4), K), Rate::from_mbps(2.0));
        w.verify().unwrap();
    }

    #[test]
    fn infeasible_swap_is_refused_untouched() {
        // peer 1 uploads 4.0; peer 2 has capacity 2.0 and cannot take over
        let mut w = line_world(1, &[1, 1, 1, 1, 1], &[30.0, 6.0, 2.0, 4.0, 4.0]);
        feed(&mut w, 0, 1, 2.0);
        feed(&mut w, 0, 2, 2.0);
        feed(&mut w, 1, 3, 2.0);
        feed(&mut w, 1, 4, 2.0);
        let before = w.clone();
        let err = swap_positions(&mut w, NodeId(1), NodeId(2), SwapScope::Content(K));
        assert!(err.is_err());
        assert_eq!(w, before);
    }

    #[test]
    fn exchange1_bubbles_strong_joiner_up() {
        // o(h0) -> a(M=2, serving i at 2.0); i(M=6) fresh
        let mut w = line_world(1, &[1, 1, 1], &[30.0, 2.0, 6.0]);
        let (o, a, i) = (0, 1, 2);
        feed(&mut w, o, a, 2.0);
        feed(&mut w, a, i, 2.0);
        exchange1(&mut w, NodeId(i), K);
        assert_eq!(w.flow(NodeId(o), NodeId(i), K), Rate::from_mbps(2.0));
        assert_eq!(w.flow(NodeId(i), NodeId(a), K), Rate::from_mbps(2.0));
        assert_eq!(w.hop(NodeId(i), K), Some(1));
        assert_eq!(w.hop(NodeId(a), K), Some(2));
        w.verify().unwrap();
    }

    #[test]
    fn exchange1_with_oss_parent_is_a_noop() {
        let mut w = line_world(1, &[1, 1], &[30.0, 6.0]);
        feed(&mut w, 0, 1, 2.0);
        let before = w.clone();
        exchange1(&mut w, NodeId(1), K);
        assert_eq!(w, before);
    }

    #[test]
    fn exchange1_picks_smallest_capacity_parent_and_reaches_fixed_point() {
        // parents a(M=3, m=2) and b(M=5, m=2); i(M=6, m=2)
        let mut w = line_world(
            1,
            &[1, 1, 1, 1, 1, 1, 1],
            &[30.0, 3.0, 5.0, 6.0, 4.0, 4.0, 4.0],
        );
        let (o, a, b, i, c, d, e) = (0, 1, 2, 3, 4, 5, 6);
        feed(&mut w, o, a, 2.0);
        feed(&mut w, o, b, 2.0);
        feed(&mut w, a, i, 1.0);
        feed(&mut w, b, i, 1.0);
        feed(&mut w, i, c, 2.0); // m_i = 2
        feed(&mut w, a, d, 1.0); // m_a = 2
        feed(&mut w, b, e, 1.0); // m_b = 2
        exchange1(&mut w, NodeId(i), K);
        assert_eq!(w.hop(NodeId(i), K), Some(1), "i took a's hop-1 position");
        assert_eq!(w.hop(NodeId(a), K), Some(2));
        for &l in w.parents(NodeId(i), K) {
            if !w.node(l).is_oss() {
                let violating = w.node(NodeId(i)).capacity > w.node(l).capacity
                    && w.node(NodeId(i)).upload() <= w.node(l).upload();
                assert!(!violating, "exchange1 fixed point violated by parent {l}");
            }
        }
        w.verify().unwrap();
    }

    #[test]
    fn traffic_cost_cases() {
        let mut w = line_world(2, &[2, 1, 1, 2], &[30.0, 30.0, 4.0, 4.0]);
        // isolated node
        assert_eq!(traffic_cost(&w, NodeId(2)), 0);
        // one parent at d=2 with x=2
        feed_k(&mut w, 0, 2, ContentId(0), 2.0);
        assert_eq!(traffic_cost(&w, NodeId(2)), Rate::from_mbps(2.0) * 2);
        // add a parent at d=1 (x=2) and a child at d=2 (x=2) on the other content
        feed_k(&mut w, 1, 2, ContentId(1), 2.0);
        feed_k(&mut w, 2, 3, ContentId(1), 2.0);
        assert_eq!(
            traffic_cost(&w, NodeId(2)),
            Rate::from_mbps(2.0) * 2 + Rate::from_mbps(2.0) * 1 + Rate::from_mbps(2.0) * 2
        );
    }

    #[test]
    fn exchange2_commits_the_cross_as_improvement() {
        // i in AS1 fed from AS2; j in AS2 fed from AS1; swapping makes both local
        let mut w = line_world(1, &[2, 1, 2, 1], &[30.0, 4.0, 4.0, 4.0]);
        let (o, v, j, i) = (0, 1, 2, 3);
        feed(&mut w, o, v, 2.0); // v (AS1) served by OSS (AS2): d=2
        feed(&mut w, v, j, 2.0); // j (AS2) fed from AS1: Z_j = 4
        feed(&mut w, o, i, 2.0); // i (AS1) fed from AS2: Z_i = 4
        assert_eq!(traffic_cost(&w, NodeId(i)), 40);
        assert_eq!(traffic_cost(&w, NodeId(j)), 40);
        let partner = exchange2(&mut w, NodeId(i));
        assert_eq!(partner, Some(NodeId(j)));
        assert_eq!(w.flow(NodeId(v), NodeId(i), K), Rate::from_mbps(2.0));
        assert_eq!(w.flow(NodeId(o), NodeId(j), K), Rate::from_mbps(2.0));
        assert_eq!(traffic_cost(&w, NodeId(i)), 20);
        assert_eq!(traffic_cost(&w, NodeId(j)), 20);
        w.verify().unwrap();
    }

    #[test]
    fn exchange2_without_candidates_is_a_noop() {
        let mut w = line_world(1, &[1, 1, 2], &[30.0, 4.0, 8.0]);
        feed(&mut w, 0, 1, 2.0);
        feed(&mut w, 0, 2, 2.0);
        let before = w.clone();
        // node 2 is in a different bandwidth class; no candidate exists
        assert_eq!(exchange2(&mut w, NodeId(1)), None);
        assert_eq!(w, before);
    }

    #[test]
    fn exchange2_requires_strict_improvement() {
        // two peers in the same AS with symmetric positions: gain is zero
        let mut w = line_world(1, &[2, 1, 1], &[30.0, 4.0, 4.0]);
        feed(&mut w, 0, 1, 2.0);
        feed(&mut w, 0, 2, 2.0);
        let before = w.clone();
        assert_eq!(exchange2(&mut w, NodeId(1)), None);
        assert_eq!(w, before);
    }

    #[test]
    fn committed_exchange2_lowers_global_weighted_traffic() {
        let mut w = line_world(1, &[2, 1, 2, 1], &[30.0, 4.0, 4.0, 4.0]);
        feed(&mut w, 0, 1, 2.0);
        feed(&mut w, 1, 2, 2.0);
        feed(&mut w, 0, 3, 2.0);
        let before = w.weighted_traffic();
        assert!(exchange2(&mut w, NodeId(3)).is_some());
        assert!(w.weighted_traffic() < before);
        assert_eq!(w.total_traffic(), 60, "rates preserved by the swap");
        assert_eq!(w.joined_pairs(), 3, "served demand multiset preserved");
    }

    #[test]
    fn exchange2_matches_brute_force_on_random_worlds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2024);
        for round in 0..120 {
            let peer_count = rng.random_range(3..10usize);
            let mut node_as = vec![rng.random_range(1..=2u32)];
            let mut caps = vec![30.0];
            for _ in 0..peer_count {
                node_as.push(rng.random_range(1..=2));
                caps.push(f64::from(rng.random_range(1..20u32)) / 2.0);
            }
            let mut w = line_world(1, &node_as, &caps);
            for _ in 0..rng.random_range(0..12) {
                let s = NodeId(rng.random_range(0..=peer_count));
                let d = NodeId(rng.random_range(1..=peer_count));
                if s == d || w.reaches(d, s, K) || !w.node(s).holds(K) {
                    continue;
                }
                let deficit = w.node(d).demand(K) - w.node(d).receive(K);
                let x = deficit.min(w.headroom(s)).min(Rate::from_mbps(1.0));
                if x.is_positive() {
                    w.add_flow(s, d, K, x).unwrap();
                    w.recompute_logical_hops(K).unwrap();
                }
            }
            let i = NodeId(rng.random_range(1..=peer_count));
            if !w.node(i).receive(K).is_positive() {
                continue;
            }
            // brute force: apply every same-class candidate swap to a clone
            let mut best: Option<(i64, NodeId)> = None;
            for j in w.node_ids() {
                if j == i
                    || w.node(j).is_oss()
                    || bandwidth_class(&w, j) != bandwidth_class(&w, i)
                {
                    continue;
                }
                if !w.contents().any(|k| w.node(j).receive(k).is_positive()) {
                    continue;
                }
                let z_before = traffic_cost(&w, i) + traffic_cost(&w, j);
                let mut clone = w.clone();
                if swap_positions(&mut clone, i, j, SwapScope::AllContents).is_err() {
                    continue;
                }
                let z_after = traffic_cost(&clone, i) + traffic_cost(&clone, j);
                let gain = z_before - z_after;
                if gain > 0 && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, j));
                }
            }
            let mut expected = w.clone();
            if let Some((_, j)) = best {
                swap_positions(&mut expected, i, j, SwapScope::AllContents).unwrap();
            }
            let partner = exchange2(&mut w, i);
            assert_eq!(partner, best.map(|(_, j)| j), "round {round}");
            assert_eq!(w, expected, "round {round}");
            w.verify().unwrap();
        }
    }
}
