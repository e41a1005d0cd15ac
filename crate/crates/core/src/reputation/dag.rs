//! Per-vehicle hash-linked transaction DAG.
//!
//! Each new transaction approves up to two current tips (the two oldest,
//! ordered by slot then id). DAGs merge by id-deduplicated set union, which
//! makes merging commutative, associative and idempotent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// Upper bound on a transaction payload, in bytes.
pub const MAX_PAYLOAD_BYTES: usize = 256 * 1024;

/// Author id used for the shared genesis transaction.
pub const GENESIS_AUTHOR: u32 = u32::MAX;

/// 64-bit truncation of a SHA-256 content hash.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxId({:016x})", self.0)
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxKind {
    Genesis,
    ModelShare,
    ReputationUpdate,
    DataShareEvent,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Genesis => 0,
            TxKind::ModelShare => 1,
            TxKind::ReputationUpdate => 2,
            TxKind::DataShareEvent => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagTransaction {
    pub id: TxId,
    pub kind: TxKind,
    pub payload: String,
    pub approves: Vec<TxId>,
    pub author: u32,
    pub slot: u64,
}

impl DagTransaction {
    pub fn new(kind: TxKind, payload: String, approves: Vec<TxId>, author: u32, slot: u64) -> Self {
        let id = content_hash(kind, &payload, &approves, author, slot);
        Self {
            id,
            kind,
            payload,
            approves,
            author,
            slot,
        }
    }

    pub fn genesis() -> Self {
        Self::new(TxKind::Genesis, "genesis".into(), Vec::new(), GENESIS_AUTHOR, 0)
    }

    pub fn verify_id(&self) -> bool {
        self.id == content_hash(self.kind, &self.payload, &self.approves, self.author, self.slot)
    }
}

fn content_hash(kind: TxKind, payload: &str, approves: &[TxId], author: u32, slot: u64) -> TxId {
    let mut h = Sha256::new();
    h.update([kind.tag()]);
    h.update((payload.len() as u64).to_le_bytes());
    h.update(payload.as_bytes());
    h.update((approves.len() as u64).to_le_bytes());
    for a in approves {
        h.update(a.0.to_le_bytes());
    }
    h.update(author.to_le_bytes());
    h.update(slot.to_le_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    TxId(u64::from_be_bytes(head))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDag {
    transactions: BTreeMap<TxId, DagTransaction>,
    approved: BTreeSet<TxId>,
}

impl Default for LocalDag {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalDag {
    /// A DAG holding only the shared genesis transaction.
    pub fn new() -> Self {
        let genesis = DagTransaction::genesis();
        let mut transactions = BTreeMap::new();
        transactions.insert(genesis.id, genesis);
        Self {
            transactions,
            approved: BTreeSet::new(),
        }
    }

    pub fn genesis_id() -> TxId {
        DagTransaction::genesis().id
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn get(&self, id: TxId) -> Option<&DagTransaction> {
        self.transactions.get(&id)
    }

    pub fn contains(&self, id: TxId) -> bool {
        self.transactions.contains_key(&id)
    }

    pub fn transactions(&self) -> impl Iterator<Item = &DagTransaction> {
        self.transactions.values()
    }

    pub fn ids(&self) -> BTreeSet<TxId> {
        self.transactions.keys().copied().collect()
    }

    /// Transactions that nothing approves yet.
    pub fn tips(&self) -> Vec<TxId> {
        self.transactions
            .keys()
            .filter(|id| !self.approved.contains(id))
            .copied()
            .collect()
    }

    /// Tips ordered oldest first (slot, then id).
    fn tips_by_age(&self) -> Vec<TxId> {
        let mut tips = self.tips();
        tips.sort_by_key(|id| (self.transactions[id].slot, *id));
        tips
    }

    /// Append a transaction approving the two oldest tips.
    pub fn append(&mut self, kind: TxKind, payload: String, author: u32, slot: u64) -> Result<DagTransaction> {
        if payload.len() > MAX_PAYLOAD_BYTES {
            invalid!("payload of {} bytes exceeds cap of {MAX_PAYLOAD_BYTES}", payload.len());
        }
        if kind == TxKind::Genesis {
            invalid!("genesis transactions cannot be appended");
        }
        let approves: Vec<TxId> = self.tips_by_age().into_iter().take(2).collect();
        let tx = DagTransaction::new(kind, payload, approves, author, slot);
        if self.transactions.contains_key(&tx.id) {
            invalid!("transaction id {} already present", tx.id);
        }
        self.insert(tx.clone());
        Ok(tx)
    }

    fn insert(&mut self, tx: DagTransaction) {
        self.approved.extend(tx.approves.iter().copied());
        self.transactions.insert(tx.id, tx);
    }

    /// Set-union merge of another DAG into this one.
    pub fn merge(&mut self, other: &LocalDag) {
        for (id, tx) in &other.transactions {
            if !self.transactions.contains_key(id) {
                self.insert(tx.clone());
            } else {
                debug_assert_eq!(&self.transactions[id], tx, "id collision on {id}");
            }
        }
    }

    /// Kahn's algorithm over approval edges; also checks that every approved
    /// id is present.
    pub fn is_acyclic(&self) -> bool {
        let mut indeg: BTreeMap<TxId, usize> = self.transactions.keys().map(|id| (*id, 0)).collect();
        for tx in self.transactions.values() {
            for a in &tx.approves {
                if !self.transactions.contains_key(a) {
                    return false;
                }
            }
            *indeg.get_mut(&tx.id).unwrap() = tx.approves.len();
        }
        // Edge a -> tx for each approval; process transactions whose parents are done.
        let mut children: BTreeMap<TxId, Vec<TxId>> = BTreeMap::new();
        for tx in self.transactions.values() {
            for a in &tx.approves {
                children.entry(*a).or_default().push(tx.id);
            }
        }
        let mut ready: Vec<TxId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut seen = 0;
        while let Some(id) = ready.pop() {
            seen += 1;
            for c in children.get(&id).into_iter().flatten() {
                let d = indeg.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(*c);
                }
            }
        }
        seen == self.transactions.len()
    }

    /// One JSON object per line: id, kind, approves, author, slot.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut txs: Vec<&DagTransaction> = self.transactions.values().collect();
        txs.sort_by_key(|tx| (tx.slot, tx.id));
        for tx in txs {
            let line = serde_json::json!({
                "id": tx.id.to_string(),
                "kind": tx.kind,
                "approves": tx.approves.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
                "author": tx.author,
                "slot": tx.slot,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Latest transaction of `kind` by `author`, by slot then id.
    pub fn latest_by(&self, author: u32, kind: TxKind) -> Option<&DagTransaction> {
        self.transactions
            .values()
            .filter(|tx| tx.author == author && tx.kind == kind)
            .max_by_key(|tx| (tx.slot, tx.id))
    }
}
