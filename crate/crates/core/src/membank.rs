//! FIFO memory bank of domain-tagged key embeddings.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Which bank entries may serve as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankNegatives {
    All,
    InDomain,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    seq: u64,
    embedding: Vector,
    domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Entry>,
    /// Sequence numbers of live entries, per domain, oldest first.
    by_domain: BTreeMap<usize, VecDeque<u64>>,
    next_seq: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, entries: VecDeque::new(), by_domain: BTreeMap::new(), next_seq: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends embeddings in order, evicting the oldest beyond capacity.
    ///
    /// Embeddings are stored by value; nothing downstream differentiates
    /// through them.
    pub fn enqueue<I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = (Vector, usize)>,
    {
        let items: Vec<(Vector, usize)> = items.into_iter().collect();
        if let Some((v, _)) = items.iter().find(|(v, _)| v.len() != self.dim) {
            return Err(Error::Shape(format!("bank holds {}-dim embeddings, got {}", self.dim, v.len())));
        }
        for (embedding, domain) in items {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.by_domain.entry(domain).or_default().push_back(seq);
            self.entries.push_back(Entry { seq, embedding, domain });
            while self.entries.len() > self.capacity {
                self.evict_front();
            }
        }
        Ok(())
    }

    fn evict_front(&mut self) {
        let old = self.entries.pop_front().expect("non-empty");
        let queue = self.by_domain.get_mut(&old.domain).expect("indexed domain");
        let front = queue.pop_front();
        debug_assert_eq!(front, Some(old.seq));
        if queue.is_empty() {
            self.by_domain.remove(&old.domain);
        }
    }

    fn entry_for(&self, seq: u64) -> &Entry {
        let head = self.entries.front().expect("indexed entry exists").seq;
        &self.entries[(seq - head) as usize]
    }

    /// Negative pool for an anchor in `domain`, oldest first.
    pub fn negatives(&self, domain: usize, mode: BankNegatives) -> Vec<&Vector> {
        match mode {
            BankNegatives::All => self.entries.iter().map(|e| &e.embedding).collect(),
            BankNegatives::InDomain => self
                .by_domain
                .get(&domain)
                .map(|q| q.iter().map(|&s| &self.entry_for(s).embedding).collect())
                .unwrap_or_default(),
        }
    }

    /// Entries oldest first, with their domain tags.
    pub fn iter(&self) -> impl Iterator<Item = (&Vector, usize)> {
        self.entries.iter().map(|e| (&e.embedding, e.domain))
    }

    /// Checks that the per-domain index mirrors the queue.
    pub fn index_is_consistent(&self) -> bool {
        let mut rebuilt: BTreeMap<usize, VecDeque<u64>> = BTreeMap::new();
        for e in &self.entries {
            rebuilt.entry(e.domain).or_default().push_back(e.seq);
        }
        let ordered = self.entries.iter().zip(self.entries.iter().skip(1)).all(|(a, b)| b.seq == a.seq + 1);
        rebuilt == self.by_domain && ordered && self.entries.len() <= self.capacity
    }
}
