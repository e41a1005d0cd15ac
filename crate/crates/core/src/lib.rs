//! Deterministic simulator of reputation-driven asynchronous federated
//! learning for distributed vehicle trajectory prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`scene`] ingests, synthesises, windows and corrupts trajectory scenes
//!   and computes ADE/FDE/RMSE.
//! * [`similarity`] scores trajectory segment pairs and builds the weighted
//!   trajectory graphs used for redundancy filtering and adjacency.
//! * [`reputation`] holds the subjective-logic opinion algebra and the
//!   per-vehicle hash-linked DAG with gossip dissemination.
//! * [`privacy`] clips and Laplace-perturbs shared parameter vectors.
//! * [`predictor`] is a graph-linear trajectory predictor with analytic
//!   gradients.
//! * [`federation`] runs asynchronous / synchronous aggregation slots with
//!   proof-of-reputation committee validation.
//! * [`drl`] is the vehicle-selection MDP with PPO and DQN trainers.
//! * [`experiment`] wires everything into the run/ablate/sweep/drl commands.

pub mod config;
pub mod drl;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod predictor;
pub mod privacy;
pub mod reputation;
pub mod rng;
pub mod scene;
pub mod similarity;

pub use error::{Error, Result};
