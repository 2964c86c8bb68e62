//! Deterministic discrete-event simulator and algorithm library for
//! multi-streaming mesh-pull peer-to-peer overlay construction.
//!
//! The library models an AS-level physical network, builds content overlays
//! with hop-aware peer selection (minimum-logical-hop, minimum-physical-hop,
//! or a uniform-random baseline), relocates peers with two position-exchange
//! procedures, and drives churn (joins, departures, cascades) through an
//! event loop that integrates two time-average performance metrics: the
//! number of fully served (peer, content) pairs and the traffic-weighted
//! mean physical distance (congestion degree).

pub mod cli;
pub mod configurator;
pub mod exchange;
pub mod model;
pub mod selection;
pub mod simulator;
pub mod stats;
pub mod topology;
pub mod units;

pub use model::{ModelError, NodeRecord, NodeSpec, PeerState, Role, World};
pub use topology::{AsGraph, PhysicalTopology, Placement, TopologyError};
pub use units::{AsId, ContentId, NodeId, Rate};
