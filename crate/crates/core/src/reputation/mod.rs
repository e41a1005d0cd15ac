//! Subjective-logic reputation and the gossiped per-vehicle DAG ledger.

pub mod dag;
pub mod gossip;
pub mod opinion;

pub use dag::{DagTransaction, LocalDag, TxId, TxKind};
pub use gossip::{gossip_round, Topology};
pub use opinion::{
    combine_recommendations, count_interaction, final_reputation, fuse_final, fuse_or_average,
    local_opinion, reputation, InteractionStats, Opinion, Recommendation, UncertaintyWeight,
};
