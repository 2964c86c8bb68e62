//! Peer selection: picks a parent set and flow assignment for one
//! (peer, content) request.
//!
//! Three selectors share one skeleton. Candidates are the nodes that hold
//! the content, have spare upload capacity and sit at a logical hop low
//! enough to keep the requester within the hop limit H. MLH peels
//! candidates in ascending logical-hop layers and picks the physically
//! closest node inside a layer; MPH swaps the two sort keys; the random
//! baseline draws candidates uniformly without replacement. Each engaged
//! node contributes min(remaining demand, headroom). A request is admitted
//! only when the demand is met exactly; otherwise nothing is applied.

use std::collections::BTreeSet;

use rand::Rng;

use crate::model::World;
use crate::units::{ContentId, NodeId, Rate};

/// Which selection algorithm a join request runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    Mlh,
    Mph,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectionOutcome {
    Admitted {
        parents: BTreeSet<NodeId>,
        /// Flow assignment in engagement order.
        flows: Vec<(NodeId, Rate)>,
    },
    Rejected,
}

impl SelectionOutcome {
    pub fn is_admitted(&self) -> bool {
        matches!(self, SelectionOutcome::Admitted { .. })
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    node: NodeId,
    hop: u32,
    distance: u32,
    headroom: Rate,
}

/// Step 1: nodes that hold content k, have positive headroom and whose
/// logical hop is both below the requester's hop (H + 1 for a fresh join)
/// and low enough that attaching keeps the requester at hop <= H.
fn candidates(world: &World, requester: NodeId, k: ContentId) -> Vec<Candidate> {
    let requester_hop = world.hop(requester, k).unwrap_or(world.hop_limit() + 1);
    world
        .holders(k)
        .iter()
        .copied()
        .filter(|&j| j != requester)
        .filter_map(|j| {
            let headroom = world.node(j).headroom();
            if !headroom.is_positive() {
                return None;
            }
            let hop = world.hop(j, k)?;
            if hop >= requester_hop || hop + 1 > world.hop_limit() {
                return None;
            }
            Some(Candidate {
                node: j,
                hop,
                distance: world.distance(j, requester),
                headroom,
            })
        })
        .collect()
}

/// Greedy assignment: peel layers by `layer_key` in ascending order, engage
/// nodes inside a layer in ascending (`pick_key`, id) order, taking
/// min(remaining, headroom) from each.
fn plan_layered(
    mut cands: Vec<Candidate>,
    demand: Rate,
    layer_key: fn(&Candidate) -> u32,
    pick_key: fn(&Candidate) -> u32,
) -> Vec<(NodeId, Rate)> {
    let mut remaining = demand;
    let mut picks = Vec::new();
    while remaining.is_positive() && !cands.is_empty() {
        let layer_val = cands.iter().map(layer_key).min().unwrap();
        let mut layer: Vec<Candidate> = cands.iter().copied().filter(|c| layer_key(c) == layer_val).collect();
        cands.retain(|c| layer_key(c) != layer_val);
        layer.sort_by_key(|c| (pick_key(c), c.node));
        for c in layer {
            if !remaining.is_positive() {
                break;
            }
            let x = remaining.min(c.headroom);
            picks.push((c.node, x));
            remaining -= x;
        }
    }
    picks
}

/// Applies a satisfied plan: adds the flows, records the requester's hop.
fn apply_plan(
    world: &mut World,
    i: NodeId,
    k: ContentId,
    picks: Vec<(NodeId, Rate)>,
) -> SelectionOutcome {
    for &(src, rate) in &picks {
        world
            .add_flow(src, i, k, rate)
            .expect("planned flow must be feasible");
    }
    let hop = world
        .parents(i, k)
        .iter()
        .filter_map(|p| world.hop(*p, k))
        .max()
        .map(|h| h + 1);
    world.set_hop(i, k, hop);
    SelectionOutcome::Admitted {
        parents: picks.iter().map(|&(n, _)| n).collect(),
        flows: picks,
    }
}

fn run_plan(
    world: &mut World,
    i: NodeId,
    k: ContentId,
    picks: Vec<(NodeId, Rate)>,
) -> SelectionOutcome {
    let assigned: Rate = picks.iter().map(|&(_, r)| r).sum();
    if assigned == world.node(i).demand(k) {
        apply_plan(world, i, k, picks)
    } else {
        SelectionOutcome::Rejected
    }
}

/// Minimum-logical-hop selection: layers by logical hop, physical distance
/// inside a layer.
pub fn mlh_select(world: &mut World, i: NodeId, k: ContentId) -> SelectionOutcome {
    let cands = candidates(world, i, k);
    let picks = plan_layered(cands, world.node(i).demand(k), |c| c.hop, |c| c.distance);
    run_plan(world, i, k, picks)
}

/// Minimum-physical-hop selection: the two sort keys of MLH swapped.
pub fn mph_select(world: &mut World, i: NodeId, k: ContentId) -> SelectionOutcome {
    let cands = candidates(world, i, k);
    let picks = plan_layered(cands, world.node(i).demand(k), |c| c.distance, |c| c.hop);
    run_plan(world, i, k, picks)
}

/// Uniform-random baseline: draws candidates without replacement.
pub fn random_select(
    world: &mut World,
    i: NodeId,
    k: ContentId,
    rng: &mut impl Rng,
) -> SelectionOutcome {
    let mut cands = candidates(world, i, k);
    let demand = world.node(i).demand(k);
    let mut remaining = demand;
    let mut picks = Vec::new();
    while remaining.is_positive() && !cands.is_empty() {
        let c = cands.swap_remove(rng.random_range(0..cands.len()));
        let x = remaining.min(c.headroom);
        picks.push((c.node, x));
        remaining -= x;
    }
    run_plan(world, i, k, picks)
}

/// Dispatches to the selector named by the policy.
pub fn select(
    world: &mut World,
    i: NodeId,
    k: ContentId,
    selector: Selector,
    rng: &mut impl Rng,
) -> SelectionOutcome {
    match selector {
        Selector::Mlh => mlh_select(world, i, k),
        Selector::Mph => mph_select(world, i, k),
        Selector::Random => random_select(world, i, k, rng),
    }
}
