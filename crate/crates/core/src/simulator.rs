//! Discrete-event engine: drives joins, departures and rejoins over
//! simulated time and integrates the two time-average performance metrics.
//!
//! The number of fully served (peer, content) pairs and the two traffic
//! sums are piecewise constant between events, so their time integrals are
//! exact sums of value times interval length. Batches are day-aligned; the
//! congestion degree of a batch is the ratio of the integrated
//! distance-weighted traffic to the integrated traffic volume.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use thiserror::Error;

use crate::configurator::{initial_configuration, repair_on_departure, JoinRequest, Policy};
use crate::model::{ContentCatalog, NodeSpec, OverlayParams, PeerState, Role, World};
use crate::selection::Selector;
use crate::stats::BatchMeansCi;
use crate::topology::{generate_ba_graph, place_nodes, PhysicalTopology, TopologyError};
use crate::units::{ContentId, NodeId, Rate};

pub const SECONDS_PER_DAY: f64 = 86400.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("invariant violation at t={time}: {message}")]
    Invariant {
        time: f64,
        message: String,
        snapshot: String,
    },
}

/// Full description of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub peer_count: usize,
    pub as_count: u32,
    pub edges_per_node: u32,
    pub content_count: usize,
    pub oss_per_content: usize,
    pub oss_bandwidth: Rate,
    pub peer_bandwidth_min: Rate,
    pub peer_bandwidth_max: Rate,
    pub view_rate: Rate,
    pub hop_limit: u32,
    pub reserve_budget: usize,
    pub bandwidth_class: Rate,
    pub request_distribution: ContentCatalog,
    pub mean_viewing_s: f64,
    pub viewing_cv: f64,
    pub mean_waiting_s: f64,
    pub policy: Policy,
    pub sim_days: u32,
    pub warmup_days: u32,
    pub batch_days: u32,
    /// Event-stream seed.
    pub seed: u64,
    /// Topology, placement and bandwidth seed; runs meant to be compared
    /// pairwise share it while varying `seed`.
    pub world_seed: u64,
    /// Full invariant verification every N events (slow; testing only).
    pub verify_every: Option<u64>,
    /// Abort if a join under an exchange policy ends its bandwidth-exchange
    /// pass short of the termination fixed point (testing only).
    pub check_exchange1_fixed_point: bool,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            peer_count: 1000,
            as_count: 15,
            edges_per_node: 4,
            content_count: 2,
            oss_per_content: 1,
            oss_bandwidth: Rate::from_mbps(30.0),
            peer_bandwidth_min: Rate::from_mbps(0.5),
            peer_bandwidth_max: Rate::from_mbps(10.0),
            view_rate: Rate::from_mbps(2.0),
            hop_limit: 4,
            reserve_budget: 4,
            bandwidth_class: Rate::from_mbps(0.5),
            request_distribution: ContentCatalog::uniform_nonempty(2),
            mean_viewing_s: 3.0 * 3600.0,
            viewing_cv: 6.0,
            mean_waiting_s: 3600.0,
            policy: Policy {
                selector: Selector::Mlh,
                exchanges: true,
            },
            sim_days: 12,
            warmup_days: 2,
            batch_days: 1,
            seed: 1,
            world_seed: 1,
            verify_every: None,
            check_exchange1_fixed_point: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            (self.peer_count > 0, "peer_count must be positive"),
            (self.content_count > 0, "content_count must be positive"),
            (self.oss_per_content > 0, "oss_per_content must be positive"),
            (self.edges_per_node > 0, "edges_per_node must be positive"),
            (
                self.as_count > self.edges_per_node,
                "as_count must exceed edges_per_node",
            ),
            (
                self.oss_bandwidth.is_positive(),
                "oss_bandwidth must be positive",
            ),
            (
                self.peer_bandwidth_min.is_positive(),
                "peer_bandwidth_min must be positive",
            ),
            (
                self.peer_bandwidth_max >= self.peer_bandwidth_min,
                "peer_bandwidth_max must be at least peer_bandwidth_min",
            ),
            (self.view_rate.is_positive(), "view_rate must be positive"),
            (self.hop_limit >= 1, "hop_limit must be at least 1"),
            (self.reserve_budget >= 1, "reserve_budget must be at least 1"),
            (
                self.bandwidth_class.is_positive(),
                "bandwidth_class must be positive",
            ),
            (self.mean_viewing_s > 0.0, "mean_viewing_s must be positive"),
            (self.viewing_cv > 0.0, "viewing_cv must be positive"),
            (self.mean_waiting_s > 0.0, "mean_waiting_s must be positive"),
            (self.sim_days > self.warmup_days, "sim_days must exceed warmup_days"),
            (self.batch_days > 0, "batch_days must be positive"),
        ];
        for (ok, msg) in positive {
            if !ok {
                return Err(msg.to_string());
            }
        }
        if (self.sim_days - self.warmup_days) % self.batch_days != 0 {
            return Err(format!(
                "sim_days - warmup_days ({}) must be a multiple of batch_days ({})",
                self.sim_days - self.warmup_days,
                self.batch_days
            ));
        }
        for (subset, _) in self.request_distribution.support() {
            if subset.iter().any(|k| k.0 >= self.content_count) {
                return Err("request distribution names a content outside the catalog".into());
            }
        }
        Ok(())
    }

    pub fn batch_count(&self) -> usize {
        ((self.sim_days - self.warmup_days) / self.batch_days) as usize
    }

    pub fn oss_count(&self) -> usize {
        self.content_count * self.oss_per_content
    }
}

/// One step of the SplitMix64 sequence; the basis of all seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Derives an independent sub-seed by folding each part through SplitMix64.
/// Documented so that any individual run of a sweep can be reproduced in
/// isolation from its (base seed, indices) coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Draws the content subset of one join request.
pub fn sample_content_set(catalog: &ContentCatalog, rng: &mut impl Rng) -> Vec<ContentId> {
    catalog.sample(rng)
}

/// Log-normal viewing time with the given mean and coefficient of
/// variation: sigma^2 = ln(1 + cv^2), mu = ln(mean) - sigma^2 / 2.
pub fn sample_viewing_time(mean_s: f64, cv: f64, rng: &mut impl Rng) -> f64 {
    let sigma2 = (1.0 + cv * cv).ln();
    let mu = mean_s.ln() - sigma2 / 2.0;
    LogNormal::new(mu, sigma2.sqrt())
        .expect("finite log-normal parameters")
        .sample(rng)
}

/// Exponential waiting time with the given mean.
pub fn sample_waiting_time(mean_s: f64, rng: &mut impl Rng) -> f64 {
    Exp::new(1.0 / mean_s)
        .expect("positive rate")
        .sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Demand(NodeId),
    ViewingComplete(NodeId, u64),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Event) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Event) -> Ordering {
        // min-heap through Reverse: earliest time first, ties by insertion
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Event) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        assert!(time.is_finite(), "event times must be finite");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(std::cmp::Reverse(Event { time, seq, kind }));
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|r| r.0)
    }
}

/// Integrates the piecewise-constant metric values into day-aligned batch
/// buckets, discarding the warmup prefix.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    last_time: f64,
    warmup_s: f64,
    batch_len_s: f64,
    joined_integral: Vec<f64>,
    weighted_integral: Vec<f64>,
    traffic_integral: Vec<f64>,
}

impl MetricsAccumulator {
    pub fn new(warmup_s: f64, batch_len_s: f64, batch_count: usize) -> MetricsAccumulator {
        MetricsAccumulator {
            last_time: 0.0,
            warmup_s,
            batch_len_s,
            joined_integral: vec![0.0; batch_count],
            weighted_integral: vec![0.0; batch_count],
            traffic_integral: vec![0.0; batch_count],
        }
    }

    /// Integrates the given current values over [last_time, to), splitting
    /// segments at batch boundaries so every second lands in one bucket.
    pub fn advance(&mut self, to: f64, joined: i64, weighted: i64, traffic: i64) {
        assert!(to >= self.last_time, "time must not run backwards");
        let batch_count = self.joined_integral.len();
        while self.last_time < to {
            let (bucket, boundary) = if self.last_time < self.warmup_s {
                (None, self.warmup_s)
            } else {
                let idx = ((self.last_time - self.warmup_s) / self.batch_len_s).floor() as usize;
                let end = self.warmup_s + (idx as f64 + 1.0) * self.batch_len_s;
                (if idx < batch_count { Some(idx) } else { None }, end)
            };
            let seg_end = to.min(boundary);
            if let Some(idx) = bucket {
                let dt = seg_end - self.last_time;
                self.joined_integral[idx] += joined as f64 * dt;
                self.weighted_integral[idx] += weighted as f64 * dt;
                self.traffic_integral[idx] += traffic as f64 * dt;
            }
            if seg_end == self.last_time {
                // `to` is beyond every bucket; nothing left to attribute
                self.last_time = to;
                break;
            }
            self.last_time = seg_end;
        }
    }

    pub fn last_time(&self) -> f64 {
        self.last_time
    }

    /// Eq. 4 time average for one batch: fully served (peer, content)
    /// pairs, averaged over the batch interval.
    pub fn joining_peers_average(&self, batch: usize) -> f64 {
        self.joined_integral[batch] / self.batch_len_s
    }

    /// Eq. 5 value for one batch: integrated distance-weighted traffic over
    /// integrated traffic volume; None when the batch carried no traffic.
    pub fn congestion_average(&self, batch: usize) -> Option<f64> {
        if self.traffic_integral[batch] > 0.0 {
            Some(self.weighted_integral[batch] / self.traffic_integral[batch])
        } else {
            None
        }
    }

    pub fn batch_count(&self) -> usize {
        self.joined_integral.len()
    }
}

/// Per-batch values of the two performance measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics {
    pub joining_peers: f64,
    /// None flags a zero-traffic batch.
    pub congestion: Option<f64>,
}

/// Outcome of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub policy: Policy,
    pub mean_waiting_s: f64,
    pub seed: u64,
    pub world_seed: u64,
    pub batches: Vec<BatchMetrics>,
    pub events_processed: u64,
    pub joins_admitted: u64,
    pub joins_rejected: u64,
    pub cascade_departures: u64,
}

// sub-seed tags for the independent random streams of one run
const SEED_GRAPH: u64 = 1;
const SEED_PLACEMENT: u64 = 2;
const SEED_BANDWIDTH: u64 = 3;
const SEED_EVENTS: u64 = 4;

/// Builds the world of a scenario: AS graph, uniform placement, one OSS
/// block per content, peer bandwidths uniform on the configured range at
/// 0.1 Mbps granularity.
pub fn build_world(config: &ScenarioConfig) -> Result<World, SimError> {
    let graph = generate_ba_graph(
        config.as_count,
        config.edges_per_node,
        derive_seed(config.world_seed, &[SEED_GRAPH]),
    )?;
    let placement = place_nodes(
        &graph,
        config.oss_count(),
        config.peer_count,
        derive_seed(config.world_seed, &[SEED_PLACEMENT]),
    );
    let mut bw_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.world_seed, &[SEED_BANDWIDTH]));
    let mut specs = Vec::with_capacity(config.oss_count() + config.peer_count);
    for i in 0..config.oss_count() {
        specs.push(NodeSpec {
            role: Role::Oss {
                content: ContentId(i / config.oss_per_content),
            },
            capacity: config.oss_bandwidth,
            demand: Rate::ZERO,
        });
    }
    let (lo, hi) = (
        config.peer_bandwidth_min.tenths(),
        config.peer_bandwidth_max.tenths(),
    );
    for _ in 0..config.peer_count {
        specs.push(NodeSpec {
            role: Role::Peer,
            capacity: Rate::from_tenths(bw_rng.random_range(lo..=hi)),
            demand: config.view_rate,
        });
    }
    let params = OverlayParams {
        hop_limit: config.hop_limit,
        reserve_budget: config.reserve_budget,
        bandwidth_class: config.bandwidth_class,
    };
    Ok(World::new(
        PhysicalTopology::new(graph, placement),
        config.content_count,
        params,
        specs,
    ))
}

/// Runs one scenario to its horizon and reports per-batch metrics.
/// The report is a pure function of the config (determinism contract).
pub fn run(config: &ScenarioConfig) -> Result<RunReport, SimError> {
    config.validate().map_err(SimError::InvalidConfig)?;
    let mut world = build_world(config)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, &[SEED_EVENTS]));
    let horizon = f64::from(config.sim_days) * SECONDS_PER_DAY;
    let mut metrics = MetricsAccumulator::new(
        f64::from(config.warmup_days) * SECONDS_PER_DAY,
        f64::from(config.batch_days) * SECONDS_PER_DAY,
        config.batch_count(),
    );
    let mut queue = EventQueue::default();
    let peer_ids: Vec<NodeId> = (config.oss_count()..config.oss_count() + config.peer_count)
        .map(NodeId)
        .collect();
    for &p in &peer_ids {
        queue.schedule(sample_waiting_time(config.mean_waiting_s, &mut rng), EventKind::Demand(p));
    }
    let mut events_processed = 0u64;
    let mut joins_admitted = 0u64;
    let mut joins_rejected = 0u64;
    let mut cascade_departures = 0u64;
    let mut last_event_time = 0.0f64;
    while let Some(event) = queue.pop() {
        if event.time > horizon {
            break;
        }
        assert!(event.time >= last_event_time, "event times must be non-decreasing");
        last_event_time = event.time;
        metrics.advance(
            event.time,
            world.joined_pairs(),
            world.weighted_traffic(),
            world.total_traffic(),
        );
        match event.kind {
            EventKind::Demand(p) => {
                debug_assert_eq!(world.node(p).state, PeerState::Waiting);
                let contents = sample_content_set(&config.request_distribution, &mut rng);
                let req = JoinRequest {
                    peer: p,
                    contents,
                    timestamp: event.time,
                };
                let result = initial_configuration(&mut world, &req, config.policy, &mut rng);
                if config.check_exchange1_fixed_point
                    && config.policy.exchanges
                    && !result.exchange1_fixed_point
                {
                    return Err(SimError::Invariant {
                        time: event.time,
                        message: format!("exchange1 fixed point violated for joining peer {p}"),
                        snapshot: world.snapshot(),
                    });
                }
                if result.any_admitted() {
                    joins_admitted += 1;
                    world.node_mut(p).state = PeerState::Viewing {
                        requested: req.contents,
                    };
                    let viewing =
                        sample_viewing_time(config.mean_viewing_s, config.viewing_cv, &mut rng);
                    queue.schedule(
                        event.time + viewing,
                        EventKind::ViewingComplete(p, world.node(p).epoch),
                    );
                } else {
                    joins_rejected += 1;
                    queue.schedule(
                        event.time + sample_waiting_time(config.mean_waiting_s, &mut rng),
                        EventKind::Demand(p),
                    );
                }
            }
            EventKind::ViewingComplete(p, epoch) => {
                if world.node(p).epoch != epoch
                    || !matches!(world.node(p).state, PeerState::Viewing { .. })
                {
                    continue; // cancelled by a starvation departure
                }
                world.node_mut(p).epoch += 1;
                world.node_mut(p).state = PeerState::Waiting;
                let cascade = repair_on_departure(&mut world, p, &mut rng);
                cascade_departures += cascade.len() as u64;
                for v in cascade {
                    world.node_mut(v).epoch += 1;
                    world.node_mut(v).state = PeerState::Waiting;
                    queue.schedule(
                        event.time + sample_waiting_time(config.mean_waiting_s, &mut rng),
                        EventKind::Demand(v),
                    );
                }
                queue.schedule(
                    event.time + sample_waiting_time(config.mean_waiting_s, &mut rng),
                    EventKind::Demand(p),
                );
            }
        }
        events_processed += 1;
        if config
            .verify_every
            .is_some_and(|n| n > 0 && events_processed % n == 0)
        {
            if let Err(violation) = world.verify_steady() {
                return Err(SimError::Invariant {
                    time: event.time,
                    message: violation.to_string(),
                    snapshot: world.snapshot(),
                });
            }
        }
    }
    metrics.advance(
        horizon,
        world.joined_pairs(),
        world.weighted_traffic(),
        world.total_traffic(),
    );
    if config.verify_every.is_some() {
        if let Err(violation) = world.verify_steady() {
            return Err(SimError::Invariant {
                time: horizon,
                message: violation.to_string(),
                snapshot: world.snapshot(),
            });
        }
    }
    let batches = (0..metrics.batch_count())
        .map(|b| BatchMetrics {
            joining_peers: metrics.joining_peers_average(b),
            congestion: metrics.congestion_average(b),
        })
        .collect();
    Ok(RunReport {
        policy: config.policy,
        mean_waiting_s: config.mean_waiting_s,
        seed: config.seed,
        world_seed: config.world_seed,
        batches,
        events_processed,
        joins_admitted,
        joins_rejected,
        cascade_departures,
    })
}

pub const CSV_HEADER: &str =
    "policy,lambda_inv_s,seed,batch_index,joining_peers,congestion_degree,joining_ci95,congestion_ci95";

fn congestion_field(c: Option<f64>) -> String {
    match c {
        Some(v) => format!("{v:.6}"),
        None => "nan".to_string(),
    }
}

/// One CSV data row per batch of a run.
pub fn csv_batch_row(report: &RunReport, batch_index: usize) -> String {
    let b = &report.batches[batch_index];
    format!(
        "{},{},{},{},{:.6},{},,",
        report.policy,
        report.mean_waiting_s,
        report.seed,
        batch_index,
        b.joining_peers,
        congestion_field(b.congestion),
    )
}

/// One CSV summary row per (policy, lambda) cell: the batch-means mean and
/// 95% half-width of both measures over all replications.
pub fn csv_summary_row(
    policy: Policy,
    mean_waiting_s: f64,
    joining: &BatchMeansCi,
    congestion: Option<&BatchMeansCi>,
) -> String {
    let (cd_mean, cd_hw) = match congestion {
        Some(ci) => (
            format!("{:.6}", ci.mean),
            format!("{:.6}", ci.half_width.unwrap_or(f64::NAN)),
        ),
        None => ("nan".to_string(), "nan".to_string()),
    };
    format!(
        "{},{},,summary,{:.6},{},{:.6},{}",
        policy,
        mean_waiting_s,
        joining.mean,
        cd_mean,
        joining.half_width.unwrap_or(f64::NAN),
        cd_hw,
    )
}
