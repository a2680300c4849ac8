//! Decentralized multi-agent linear bandits over gossip networks.
//!
//! Agents on a connected graph share what they learn by Chebyshev-accelerated
//! consensus and act with UCB-style rules. The crate covers the network
//! layer ([`graph`], [`consensus`]), estimation and selection
//! ([`bandit`]), per-agent algorithms ([`agents`]) and the seeded
//! simulation harness ([`sim`]).

pub mod agents;
pub mod bandit;
pub mod consensus;
pub mod graph;
pub mod sim;
