//! Push gossip of local DAGs over a vehicle topology.

use std::collections::VecDeque;

use rand::seq::index::sample;

use super::dag::LocalDag;
use crate::error::{invalid, Result};
use crate::rng;

/// Undirected adjacency lists over vehicle indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_adjacency(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n || j == i) {
                invalid!("vehicle {i} has an out-of-range or self neighbour");
            }
        }
        for i in 0..n {
            for &j in &neighbors[i] {
                if neighbors[j].binary_search(&i).is_err() {
                    invalid!("topology is not symmetric: {i} -> {j} without {j} -> {i}");
                }
            }
        }
        Ok(Self { neighbors })
    }

    pub fn ring(n: usize) -> Self {
        let neighbors = (0..n)
            .map(|i| {
                let mut v = vec![(i + 1) % n, (i + n - 1) % n];
                v.sort_unstable();
                v.dedup();
                v.retain(|&j| j != i);
                v
            })
            .collect();
        Self { neighbors }
    }

    pub fn complete(n: usize) -> Self {
        Self {
            neighbors: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    /// Vehicles within `radius` meters of each other are neighbours.
    pub fn from_positions(positions: &[[f64; 2]], radius: f64) -> Self {
        let n = positions.len();
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| {
                        j != i
                            && (positions[i][0] - positions[j][0]).hypot(positions[i][1] - positions[j][1])
                                <= radius
                    })
                    .collect()
            })
            .collect();
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    fn distances_from(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(i) = queue.pop_front() {
            let d = dist[i].unwrap();
            for &j in &self.neighbors[i] {
                if dist[j].is_none() {
                    dist[j] = Some(d + 1);
                    queue.push_back(j);
                }
            }
        }
        dist
    }

    /// Graph diameter, or `None` if the topology is disconnected.
    pub fn diameter(&self) -> Option<usize> {
        let mut best = 0;
        for s in 0..self.len() {
            for d in self.distances_from(s) {
                best = best.max(d?);
            }
        }
        Some(best)
    }
}

/// One synchronous gossip round.
///
/// Every vehicle pushes a snapshot of its DAG to `fanout` distinct random
/// neighbours (all of them if it has fewer). Receivers merge incoming DAGs
/// in ascending sender order. The sender choice for vehicle `i` is drawn
/// from a substream of `(seed, i)`.
pub fn gossip_round(dags: &[LocalDag], topology: &Topology, fanout: usize, seed: u64) -> Result<Vec<LocalDag>> {
    if topology.len() != dags.len() {
        invalid!("topology covers {} vehicles but {} DAGs were given", topology.len(), dags.len());
    }
    let mut inbox: Vec<Vec<usize>> = vec![Vec::new(); dags.len()];
    for (sender, _) in dags.iter().enumerate() {
        let nbrs = topology.neighbors(sender);
        let k = fanout.min(nbrs.len());
        if k == 0 {
            continue;
        }
        let mut rng = rng::substream(seed, "gossip", &[sender as u64]);
        for idx in sample(&mut rng, nbrs.len(), k).into_iter() {
            inbox[nbrs[idx]].push(sender);
        }
    }
    let mut next = dags.to_vec();
    for (receiver, senders) in inbox.iter_mut().enumerate() {
        senders.sort_unstable();
        for &s in senders.iter() {
            next[receiver].merge(&dags[s]);
        }
    }
    Ok(next)
}

/// True when every DAG holds the same transaction set.
pub fn consistent(dags: &[LocalDag]) -> bool {
    dags.windows(2).all(|w| w[0].ids() == w[1].ids())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reputation::dag::TxKind;

    fn seeded(n: usize) -> Vec<LocalDag> {
        (0..n)
            .map(|i| {
                let mut d = LocalDag::new();
                d.append(TxKind::ModelShare, format!("v{i}"), i as u32, 1).unwrap();
                d
            })
            .collect()
    }

    #[test]
    fn zero_fanout_changes_nothing() {
        let dags = seeded(5);
        assert_eq!(gossip_round(&dags, &Topology::ring(5), 0, 1).unwrap(), dags);
    }

    #[test]
    fn complete_graph_full_fanout_converges_in_one_round() {
        let dags = seeded(6);
        let next = gossip_round(&dags, &Topology::complete(6), 5, 3).unwrap();
        assert!(consistent(&next));
        assert_eq!(next[0].len(), 7);
    }

    #[test]
    fn topology_checks() {
        assert_eq!(Topology::ring(8).diameter(), Some(4));
        assert_eq!(Topology::complete(4).diameter(), Some(1));
        let split = Topology::from_adjacency(vec![vec![1], vec![0], vec![]]).unwrap();
        assert_eq!(split.diameter(), None);
        assert!(Topology::from_adjacency(vec![vec![1], vec![]]).is_err());
        assert!(gossip_round(&seeded(3), &Topology::ring(4), 1, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let dags = seeded(8);
        let ring = Topology::ring(8);
        assert_eq!(gossip_round(&dags, &ring, 1, 42).unwrap(), gossip_round(&dags, &ring, 1, 42).unwrap());
    }
}
