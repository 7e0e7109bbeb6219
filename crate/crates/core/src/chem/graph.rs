use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::hash_words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the valence sum; aromatic bonds count as one.
    pub fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    /// Stable code used by the circular fingerprint hash.
    pub fn code(self) -> u64 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            BondOrder::Single => '-',
            BondOrder::Double => '=',
            BondOrder::Triple => '#',
            BondOrder::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: &'static str,
    pub atomic_number: u32,
    pub charge: i32,
    /// Total attached hydrogens (implicit for organic-subset atoms, explicit
    /// for bracket atoms).
    pub hydrogens: u32,
    pub aromatic: bool,
    pub in_ring: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, i: usize) -> usize {
        if self.a == i {
            self.b
        } else {
            self.a
        }
    }
}

/// Heavy-atom molecular graph.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    adjacency: Vec<Vec<usize>>,
}

impl MolGraph {
    /// Build and validate a graph; ring flags are recomputed from the bonds.
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self> {
        let n = atoms.len();
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for (k, b) in bonds.iter().enumerate() {
            if b.a >= n || b.b >= n {
                return Err(Error::Validation(format!("bond {k} references a missing atom")));
            }
            if b.a == b.b {
                return Err(Error::Validation(format!("bond {k} joins atom {} to itself", b.a)));
            }
            if !seen.insert((b.a.min(b.b), b.a.max(b.b))) {
                return Err(Error::Validation(format!("duplicate bond between atoms {} and {}", b.a, b.b)));
            }
            adjacency[b.a].push(k);
            adjacency[b.b].push(k);
        }
        let mut g = Self { atoms, bonds, adjacency };
        let ring = g.ring_bonds();
        for (i, atom) in g.atoms.iter_mut().enumerate() {
            atom.in_ring = g.adjacency[i].iter().any(|&k| ring[k]);
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Bond indices incident to atom `i`.
    pub fn incident(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, BondOrder)> + '_ {
        self.adjacency[i].iter().map(move |&k| (self.bonds[k].other(i), self.bonds[k].order))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Per-bond flag: true when the bond lies on a cycle (is not a bridge).
    pub fn ring_bonds(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut in_ring = vec![true; self.bonds.len()];
        let mut time = 0;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // iterative DFS: (atom, parent bond, next incident slot)
            let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
            disc[root] = time;
            low[root] = time;
            time += 1;
            while let Some(top) = stack.last_mut() {
                let (u, parent) = (top.0, top.1);
                if top.2 < self.adjacency[u].len() {
                    let k = self.adjacency[u][top.2];
                    top.2 += 1;
                    if Some(k) == parent {
                        continue;
                    }
                    let v = self.bonds[k].other(u);
                    if disc[v] == usize::MAX {
                        disc[v] = time;
                        low[v] = time;
                        time += 1;
                        stack.push((v, Some(k), 0));
                    } else {
                        low[u] = low[u].min(disc[v]);
                    }
                } else {
                    stack.pop();
                    if let (Some(k), Some(&(p, _, _))) = (parent, stack.last()) {
                        low[p] = low[p].min(low[u]);
                        if low[u] > disc[p] {
                            in_ring[k] = false;
                        }
                    }
                }
            }
        }
        in_ring
    }

    /// Weisfeiler–Lehman style refined atom invariants, one per atom.
    pub fn refined_invariants(&self, rounds: usize) -> Vec<u64> {
        let mut inv: Vec<u64> = self
            .atoms
            .iter()
            .enumerate()
            .map(|(i, a)| {
                hash_words(&[
                    a.atomic_number as u64,
                    self.degree(i) as u64,
                    a.charge as i64 as u64,
                    a.hydrogens as u64,
                    a.aromatic as u64,
                    a.in_ring as u64,
                ])
            })
            .collect();
        for _ in 0..rounds {
            inv = (0..self.len())
                .map(|i| {
                    let mut env: Vec<(u64, u64)> = self.neighbors(i).map(|(j, o)| (o.code(), inv[j])).collect();
                    env.sort_unstable();
                    let mut words = vec![inv[i]];
                    words.extend(env.into_iter().flat_map(|(a, b)| [a, b]));
                    hash_words(&words)
                })
                .collect();
        }
        inv
    }

    /// Sorted multiset of refined invariants; equal for isomorphic graphs.
    pub fn invariant_signature(&self) -> Vec<u64> {
        let mut v = self.refined_invariants(self.len().max(1));
        v.sort_unstable();
        v
    }
}
