//! Token trie of saved prefixes.
//!
//! Every non-root node owns a token segment and a holder page table in the
//! KV store covering the node's whole root path. A request whose prompt
//! walks `m` tokens into the trie restores those positions with a single
//! alias span onto the deepest matched holder.
//!
//! A save commits only the positions past the existing match, so a turn
//! that extends a cached conversation by `Δ` tokens references exactly `Δ`
//! new cells. Under budget pressure the leaf whose last touch is oldest is
//! removed first; inner nodes only go once their children have.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::kv::{TableId, UnifiedKvCache};
use crate::{SeqId, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(u32);

const ROOT: NodeId = NodeId(0);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RadixError {
    #[error("save needs {needed} cells but only {available} fit in the radix budget")]
    BudgetExceeded { needed: usize, available: usize },
    #[error("{seq} holds {have} positions, save needs {need}")]
    SequenceTooShort { seq: SeqId, have: usize, need: usize },
}

#[derive(Debug)]
struct Node {
    segment: Vec<Token>,
    /// Prefix length before `segment`.
    start: usize,
    holder: Option<TableId>,
    parent: Option<NodeId>,
    children: BTreeMap<Token, NodeId>,
    last_touch: u64,
}

impl Node {
    fn end(&self) -> usize {
        self.start + self.segment.len()
    }
}

/// Result of a prefix walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixMatch {
    pub len: usize,
    /// Page table covering at least `[0, len)`; `None` when `len == 0`.
    pub holder: Option<TableId>,
}

/// One line of the diagnostic dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeInfo {
    pub prefix_len: usize,
    pub cells: usize,
    pub last_touch: u64,
    pub first_token: u32,
    pub children: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RadixStats {
    pub nodes: usize,
    pub cells: usize,
    pub budget: usize,
    pub lookups: u64,
    pub matched_tokens: u64,
    pub saves: u64,
    pub committed_cells: u64,
    pub evicted_nodes: u64,
    pub evicted_cells: u64,
    pub rejected_saves: u64,
}

#[derive(Debug)]
pub struct RadixTrie {
    nodes: Vec<Option<Node>>,
    free_nodes: Vec<u32>,
    budget: usize,
    cells: usize,
    clock: u64,
    stats: RadixStats,
}

/// Walk state: deepest fully or partially matched node.
struct Walk {
    len: usize,
    path: Vec<NodeId>,
    /// Node the walk ended inside, with the matched length of its segment,
    /// when the match stops strictly inside a segment.
    partial: Option<(NodeId, usize)>,
}

impl RadixTrie {
    /// `budget` is the number of cells the trie may reference.
    pub fn new(budget: usize) -> Self {
        Self {
            nodes: vec![Some(Node {
                segment: Vec::new(),
                start: 0,
                holder: None,
                parent: None,
                children: BTreeMap::new(),
                last_touch: 0,
            })],
            free_nodes: Vec::new(),
            budget,
            cells: 0,
            clock: 0,
            stats: RadixStats::default(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Cells referenced by the trie, each counted once.
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().flatten().count() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.node_count() == 0
    }

    pub fn stats(&self) -> RadixStats {
        RadixStats {
            nodes: self.node_count(),
            cells: self.cells,
            budget: self.budget,
            ..self.stats
        }
    }

    fn node(&self, id: NodeId) -> &Node {
        self.nodes[id.0 as usize].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id.0 as usize].as_mut().expect("live node")
    }

    fn walk(&self, tokens: &[Token]) -> Walk {
        let mut w = Walk {
            len: 0,
            path: Vec::new(),
            partial: None,
        };
        let mut at = ROOT;
        while w.len < tokens.len() {
            let Some(&child) = self.node(at).children.get(&tokens[w.len]) else {
                break;
            };
            let seg = &self.node(child).segment;
            let common = seg
                .iter()
                .zip(&tokens[w.len..])
                .take_while(|(a, b)| a == b)
                .count();
            w.len += common;
            w.path.push(child);
            if common < seg.len() {
                w.partial = Some((child, common));
                break;
            }
            at = child;
        }
        w
    }

    /// Longest saved prefix of `tokens`, touching every node on the path.
    pub fn longest_prefix(&mut self, tokens: &[Token]) -> PrefixMatch {
        let w = self.walk(tokens);
        self.clock += 1;
        let now = self.clock;
        for &id in &w.path {
            self.node_mut(id).last_touch = now;
        }
        self.stats.lookups += 1;
        self.stats.matched_tokens += w.len as u64;
        PrefixMatch {
            len: w.len,
            holder: w.path.last().and_then(|&id| self.node(id).holder),
        }
    }

    /// Match length without touching.
    pub fn peek(&self, tokens: &[Token]) -> usize {
        self.walk(tokens).len
    }

    /// Commits `tokens` as a trie path, referencing `seq`'s cells for the
    /// positions past the current match. Returns the number of newly
    /// committed cells.
    pub fn save(
        &mut self,
        kv: &mut UnifiedKvCache,
        tokens: &[Token],
        seq: SeqId,
    ) -> Result<usize, RadixError> {
        let w = self.walk(tokens);
        self.clock += 1;
        let now = self.clock;
        for &id in &w.path {
            self.node_mut(id).last_touch = now;
        }
        let m = w.len;
        if m == tokens.len() {
            return Ok(0);
        }
        let have = kv.len(seq);
        if have < tokens.len() {
            return Err(RadixError::SequenceTooShort {
                seq,
                have,
                need: tokens.len(),
            });
        }
        let delta = tokens.len() - m;
        if self.cells + delta > self.budget {
            let protect: HashSet<NodeId> = w.path.iter().copied().collect();
            self.evict_protected(kv, self.cells + delta - self.budget, &protect);
            if self.cells + delta > self.budget {
                self.stats.rejected_saves += 1;
                return Err(RadixError::BudgetExceeded {
                    needed: delta,
                    available: self.budget - self.cells,
                });
            }
        }
        let parent = match w.partial {
            Some((node, common)) => self.split(kv, node, common),
            None => w.path.last().copied().unwrap_or(ROOT),
        };
        let cells = kv.cells(seq, m..tokens.len());
        let parent_holder = self.node(parent).holder.map(|h| (h, m));
        let holder = kv.create_holder(parent_holder, &cells);
        let id = self.alloc(Node {
            segment: tokens[m..].to_vec(),
            start: m,
            holder: Some(holder),
            parent: Some(parent),
            children: BTreeMap::new(),
            last_touch: now,
        });
        self.node_mut(parent).children.insert(tokens[m], id);
        self.cells += delta;
        self.stats.saves += 1;
        self.stats.committed_cells += delta as u64;
        Ok(delta)
    }

    /// Splits `id` after `at` segment tokens. The upper half gets a fresh
    /// holder over the same cells; the lower half keeps the old one.
    fn split(&mut self, kv: &mut UnifiedKvCache, id: NodeId, at: usize) -> NodeId {
        let (start, parent, old_holder, last_touch) = {
            let n = self.node(id);
            (n.start, n.parent.expect("split below root"), n.holder, n.last_touch)
        };
        let old_holder = old_holder.expect("non-root node has a holder");
        let cells = kv.table_cells(old_holder, start..start + at);
        let parent_holder = self.node(parent).holder.map(|h| (h, start));
        let upper_holder = kv.create_holder(parent_holder, &cells);
        let (upper_seg, lower_first) = {
            let n = self.node_mut(id);
            let lower = n.segment.split_off(at);
            let upper = std::mem::replace(&mut n.segment, lower);
            n.start = start + at;
            (upper, n.segment[0])
        };
        let first = upper_seg[0];
        let upper = self.alloc(Node {
            segment: upper_seg,
            start,
            holder: Some(upper_holder),
            parent: Some(parent),
            children: BTreeMap::from([(lower_first, id)]),
            last_touch,
        });
        self.node_mut(id).parent = Some(upper);
        self.node_mut(parent).children.insert(first, upper);
        upper
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        match self.free_nodes.pop() {
            Some(i) => {
                self.nodes[i as usize] = Some(node);
                NodeId(i)
            }
            None => {
                self.nodes.push(Some(node));
                NodeId(self.nodes.len() as u32 - 1)
            }
        }
    }

    /// Removes oldest-touched leaves until at least `needed` cells have
    /// been released from the trie or it is empty. Returns cells released.
    pub fn evict(&mut self, kv: &mut UnifiedKvCache, needed: usize) -> usize {
        self.evict_protected(kv, needed, &HashSet::new())
    }

    fn evict_protected(
        &mut self,
        kv: &mut UnifiedKvCache,
        needed: usize,
        protect: &HashSet<NodeId>,
    ) -> usize {
        let mut freed = 0;
        while freed < needed {
            let Some(victim) = self.oldest_leaf(protect) else {
                break;
            };
            freed += self.remove_leaf(kv, victim);
        }
        freed
    }

    /// Leaf with the oldest touch; ties go to the lower first token.
    fn oldest_leaf(&self, protect: &HashSet<NodeId>) -> Option<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(i, n)| n.as_ref().map(|n| (NodeId(i as u32), n)))
            .filter(|(id, n)| n.children.is_empty() && !protect.contains(id))
            .min_by_key(|(id, n)| (n.last_touch, n.segment[0], *id))
            .map(|(id, _)| id)
    }

    fn remove_leaf(&mut self, kv: &mut UnifiedKvCache, id: NodeId) -> usize {
        let node = self.nodes[id.0 as usize].take().expect("live node");
        debug_assert!(node.children.is_empty());
        self.free_nodes.push(id.0);
        if let Some(h) = node.holder {
            kv.release_table(h);
        }
        let parent = node.parent.expect("leaf below root");
        self.node_mut(parent).children.remove(&node.segment[0]);
        let n = node.segment.len();
        self.cells -= n;
        self.stats.evicted_nodes += 1;
        self.stats.evicted_cells += n as u64;
        n
    }

    /// Drops every node.
    pub fn clear(&mut self, kv: &mut UnifiedKvCache) -> usize {
        self.evict(kv, usize::MAX)
    }

    /// Flat listing of every non-root node in id order.
    pub fn dump(&self) -> Vec<NodeInfo> {
        self.nodes
            .iter()
            .skip(1)
            .flatten()
            .map(|n| NodeInfo {
                prefix_len: n.end(),
                cells: n.segment.len(),
                last_touch: n.last_touch,
                first_token: n.segment[0].0,
                children: n.children.len(),
            })
            .collect()
    }

    /// Every root path currently stored, as full token sequences of leaves.
    pub fn leaf_paths(&self) -> Vec<Vec<Token>> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let Some(n) = n else { continue };
            if !n.children.is_empty() {
                continue;
            }
            let mut chain = vec![NodeId(i as u32)];
            while let Some(p) = self.node(*chain.last().unwrap()).parent {
                if p == ROOT {
                    break;
                }
                chain.push(p);
            }
            let path = chain
                .iter()
                .rev()
                .flat_map(|&id| self.node(id).segment.iter().copied())
                .collect();
            out.push(path);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[u32]) -> Vec<Token> {
        v.iter().copied().map(Token).collect()
    }

    /// Puts `tokens` into `seq` and saves them.
    fn commit(kv: &mut UnifiedKvCache, trie: &mut RadixTrie, seq: SeqId, tokens: &[Token]) -> usize {
        kv.clear(seq);
        let m = trie.longest_prefix(tokens);
        if let Some(h) = m.holder {
            kv.alias_from_table(h, seq, 0, m.len).unwrap();
        }
        kv.append_cells(seq, tokens.len() - m.len).unwrap();
        let n = trie.save(kv, tokens, seq).unwrap();
        kv.clear(seq);
        n
    }

    #[test]
    fn empty_trie() {
        let mut t = RadixTrie::new(100);
        assert_eq!(
            t.longest_prefix(&toks(&[1, 2])),
            PrefixMatch {
                len: 0,
                holder: None
            }
        );
        let mut kv = UnifiedKvCache::new(8);
        assert_eq!(t.evict(&mut kv, 10), 0);
    }

    #[test]
    fn prefix_match_and_split() {
        let mut kv = UnifiedKvCache::new(64);
        let mut t = RadixTrie::new(64);
        let s = SeqId(0);
        assert_eq!(commit(&mut kv, &mut t, s, &toks(&[1, 2, 3, 4])), 4);
        assert_eq!(t.longest_prefix(&toks(&[1, 2, 3, 4, 5, 6])).len, 4);
        assert_eq!(t.longest_prefix(&toks(&[1, 2, 9])).len, 2);
        // Saving the divergent path splits [1,2,3,4] into [1,2] + [3,4].
        assert_eq!(commit(&mut kv, &mut t, s, &toks(&[1, 2, 9])), 1);
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.cells(), 5);
        assert_eq!(kv.occupancy(), 5);
        assert_eq!(t.longest_prefix(&toks(&[1, 2, 3, 4])).len, 4);
        kv.check_invariants().unwrap();
    }

    #[test]
    fn restored_cells_match_original() {
        let mut kv = UnifiedKvCache::new(64);
        let mut t = RadixTrie::new(64);
        let a = SeqId(0);
        let tokens = toks(&[5, 6, 7, 8, 9]);
        kv.append_cells(a, 5).unwrap();
        let original = kv.cells(a, 0..5);
        t.save(&mut kv, &tokens, a).unwrap();
        kv.clear(a);
        let m = t.longest_prefix(&tokens);
        let b = SeqId(1);
        kv.alias_from_table(m.holder.unwrap(), b, 0, 5).unwrap();
        assert_eq!(kv.cells(b, 0..5), original);
        assert_eq!(kv.span_count(b), 1);
    }

    #[test]
    fn delta_only_commit() {
        let mut kv = UnifiedKvCache::new(2048);
        let mut t = RadixTrie::new(2048);
        let s = SeqId(0);
        let base: Vec<Token> = (0..800).map(Token).collect();
        assert_eq!(commit(&mut kv, &mut t, s, &base), 800);
        let mut ext = base.clone();
        ext.extend((1000..1150).map(Token));
        assert_eq!(commit(&mut kv, &mut t, s, &ext), 150);
        // Repeat is a pure touch.
        assert_eq!(commit(&mut kv, &mut t, s, &ext), 0);
        assert_eq!(t.cells(), 950);
        assert_eq!(kv.occupancy(), 950);
    }

    #[test]
    fn budget_rejects_oversize_save() {
        let mut kv = UnifiedKvCache::new(64);
        let mut t = RadixTrie::new(10);
        let s = SeqId(0);
        kv.append_cells(s, 20).unwrap();
        let tokens: Vec<Token> = (0..20).map(Token).collect();
        assert!(matches!(
            t.save(&mut kv, &tokens, s),
            Err(RadixError::BudgetExceeded { .. })
        ));
        assert_eq!(t.cells(), 0);
    }

    #[test]
    fn single_leaf_evicts() {
        let mut kv = UnifiedKvCache::new(16);
        let mut t = RadixTrie::new(16);
        commit(&mut kv, &mut t, SeqId(0), &toks(&[1, 2, 3]));
        assert_eq!(t.evict(&mut kv, 1), 3);
        assert!(t.is_empty());
        assert_eq!(kv.occupancy(), 0);
        kv.check_invariants().unwrap();
    }

    #[test]
    fn shared_branch_survives_tail_eviction() {
        let mut kv = UnifiedKvCache::new(1024);
        let mut t = RadixTrie::new(1024);
        let s = SeqId(0);
        let system: Vec<Token> = (0..200).map(Token).collect();
        let tail = |k: u32| {
            let mut v = system.clone();
            v.extend((0..50).map(|i| Token(10_000 + k * 100 + i)));
            v
        };
        for k in 0..3 {
            commit(&mut kv, &mut t, s, &tail(k));
        }
        // Touch order: tail 1, then 0, then 2.
        for k in [1, 0, 2] {
            t.longest_prefix(&tail(k));
        }
        t.evict(&mut kv, 1);
        assert_eq!(t.peek(&tail(1)), 200);
        assert_eq!(t.peek(&tail(0)), 250);
        t.evict(&mut kv, 60);
        assert_eq!(t.peek(&tail(0)), 200);
        assert_eq!(t.peek(&tail(2)), 200);
        assert_eq!(t.peek(&system), 200);
        assert_eq!(t.cells(), 200);
        kv.check_invariants().unwrap();
    }

    #[test]
    fn tie_breaks_on_first_token() {
        let mut kv = UnifiedKvCache::new(64);
        let mut t = RadixTrie::new(64);
        let s = SeqId(0);
        commit(&mut kv, &mut t, s, &toks(&[9, 1]));
        commit(&mut kv, &mut t, s, &toks(&[4, 1]));
        // Same clock tick for both.
        t.clock += 1;
        let now = t.clock;
        for n in t.nodes.iter_mut().skip(1).flatten() {
            n.last_touch = now;
        }
        t.evict(&mut kv, 1);
        assert_eq!(t.peek(&toks(&[4, 1])), 0);
        assert_eq!(t.peek(&toks(&[9, 1])), 2);
    }
}
