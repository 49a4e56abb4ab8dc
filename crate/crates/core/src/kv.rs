//! Unified KV cell store.
//!
//! One cell per token position. Each live sequence points at a page table,
//! a list of spans covering logical positions `[0, len)` without gaps. A
//! span either owns a run of cells or aliases the same positions of another
//! page table. Aliasing writes one span no matter how many positions it
//! covers.
//!
//! Page tables are shared by reference count. A sequence whose table is
//! shared (aliased by another sequence or held by a radix node) never
//! mutates it in place: the next append or trim first swaps in a fresh
//! table that aliases the old one.
//!
//! Cells are reference counted individually so that radix commits can keep
//! a sequence's delta cells alive after the sequence itself is released.

use std::collections::HashMap;
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::SeqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CellId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TableId(u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("kv capacity exhausted: requested {requested} cells, {free} free")]
    CapacityExhausted { requested: usize, free: usize },
    #[error("donor covers {have} positions, alias needs {need}")]
    DonorRangeInvalid { have: usize, need: usize },
    #[error("alias destination has {len} positions, expected exactly {start}")]
    DestinationNotAtStart { len: usize, start: usize },
    #[error("trim position {from} beyond sequence length {len}")]
    TrimBeyondEnd { from: usize, len: usize },
    #[error("unknown sequence {0}")]
    UnknownSequence(SeqId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpanSource {
    Owned(Vec<CellId>),
    /// Same logical positions, resolved through another table.
    Alias(TableId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub source: SpanSource,
}

impl Span {
    fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Default)]
struct PageTable {
    spans: Vec<Span>,
    len: usize,
    refs: u32,
}

/// Bytes of KV state for `n` cached tokens: `2 · L · d · n · bytes`.
pub fn estimate_bytes(layers: u64, hidden: u64, n: u64, bytes_per_value: u64) -> u64 {
    2 * layers * hidden * n * bytes_per_value
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KvStats {
    pub capacity: usize,
    pub occupied: usize,
    pub live_sequences: usize,
    pub live_tables: usize,
    pub span_insertions: u64,
    pub alias_calls: u64,
    pub aliased_positions: u64,
    pub copy_on_write: u64,
}

#[derive(Debug)]
pub struct UnifiedKvCache {
    capacity: usize,
    free: Vec<CellId>,
    cell_refs: Vec<u32>,
    tables: Vec<Option<PageTable>>,
    free_tables: Vec<u32>,
    seqs: HashMap<SeqId, TableId>,
    span_insertions: u64,
    alias_calls: u64,
    aliased_positions: u64,
    copy_on_write: u64,
}

impl UnifiedKvCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            // Pop from the back, so cells are handed out in ascending order.
            free: (0..capacity as u32).rev().map(CellId).collect(),
            cell_refs: vec![0; capacity],
            tables: Vec::new(),
            free_tables: Vec::new(),
            seqs: HashMap::new(),
            span_insertions: 0,
            alias_calls: 0,
            aliased_positions: 0,
            copy_on_write: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_cells(&self) -> usize {
        self.free.len()
    }

    /// Physically allocated cells, each counted once however many page
    /// tables reference it.
    pub fn occupancy(&self) -> usize {
        self.capacity - self.free.len()
    }

    pub fn stats(&self) -> KvStats {
        KvStats {
            capacity: self.capacity,
            occupied: self.occupancy(),
            live_sequences: self.seqs.len(),
            live_tables: self.tables.iter().filter(|t| t.is_some()).count(),
            span_insertions: self.span_insertions,
            alias_calls: self.alias_calls,
            aliased_positions: self.aliased_positions,
            copy_on_write: self.copy_on_write,
        }
    }

    pub fn len(&self, seq: SeqId) -> usize {
        self.seqs.get(&seq).map_or(0, |&t| self.table(t).len)
    }

    pub fn span_count(&self, seq: SeqId) -> usize {
        self.seqs
            .get(&seq)
            .map_or(0, |&t| self.table(t).spans.len())
    }

    pub fn spans(&self, seq: SeqId) -> Vec<Span> {
        self.seqs
            .get(&seq)
            .map_or_else(Vec::new, |&t| self.table(t).spans.clone())
    }

    pub fn table_of(&self, seq: SeqId) -> Option<TableId> {
        self.seqs.get(&seq).copied()
    }

    pub fn table_len(&self, table: TableId) -> usize {
        self.table(table).len
    }

    pub fn cell_refcount(&self, cell: CellId) -> u32 {
        self.cell_refs[cell.0 as usize]
    }

    /// Extends `seq` by `n` freshly allocated cells.
    pub fn append_cells(&mut self, seq: SeqId, n: usize) -> Result<Range<usize>, KvError> {
        if n > self.free.len() {
            return Err(KvError::CapacityExhausted {
                requested: n,
                free: self.free.len(),
            });
        }
        let tid = self.exclusive_table(seq);
        let cells: Vec<CellId> = (0..n)
            .map(|_| {
                let c = self.free.pop().expect("free count checked");
                self.cell_refs[c.0 as usize] = 1;
                c
            })
            .collect();
        let table = self.table_mut(tid);
        let start = table.len;
        table.len += n;
        match table.spans.last_mut() {
            Some(Span {
                len,
                source: SpanSource::Owned(owned),
                ..
            }) => {
                owned.extend(cells);
                *len += n;
            }
            _ => {
                table.spans.push(Span {
                    start,
                    len: n,
                    source: SpanSource::Owned(cells),
                });
                self.span_insertions += 1;
            }
        }
        Ok(start..start + n)
    }

    /// Makes `dest[start..end)` resolve to `donor[start..end)` by writing a
    /// single alias span. No cells are copied.
    pub fn seq_alias(
        &mut self,
        donor: SeqId,
        dest: SeqId,
        start: usize,
        end: usize,
    ) -> Result<(), KvError> {
        let donor_table = *self
            .seqs
            .get(&donor)
            .ok_or(KvError::UnknownSequence(donor))?;
        self.alias_from_table(donor_table, dest, start, end)
    }

    /// Like [`Self::seq_alias`] with a page table (e.g. a radix holder) as
    /// the donor.
    pub fn alias_from_table(
        &mut self,
        donor: TableId,
        dest: SeqId,
        start: usize,
        end: usize,
    ) -> Result<(), KvError> {
        let have = self.table(donor).len;
        if end > have {
            return Err(KvError::DonorRangeInvalid { have, need: end });
        }
        let dest_len = self.len(dest);
        if dest_len != start {
            return Err(KvError::DestinationNotAtStart {
                len: dest_len,
                start,
            });
        }
        if end <= start {
            return Ok(());
        }
        let tid = self.exclusive_table(dest);
        self.table_mut(donor).refs += 1;
        let table = self.table_mut(tid);
        table.spans.push(Span {
            start,
            len: end - start,
            source: SpanSource::Alias(donor),
        });
        table.len = end;
        self.span_insertions += 1;
        self.alias_calls += 1;
        self.aliased_positions += (end - start) as u64;
        Ok(())
    }

    /// Truncates `seq` to `from` positions, returning the number of cells
    /// returned to the free pool.
    pub fn trim(&mut self, seq: SeqId, from: usize) -> Result<usize, KvError> {
        let len = self.len(seq);
        if from > len {
            return Err(KvError::TrimBeyondEnd { from, len });
        }
        if from == len {
            return Ok(0);
        }
        let tid = self.seqs[&seq];
        if self.table(tid).refs > 1 {
            // Shared: swap in a table that aliases the kept prefix.
            let fresh = self.new_table(from);
            if from > 0 {
                self.table_mut(tid).refs += 1;
                self.table_mut(fresh).spans.push(Span {
                    start: 0,
                    len: from,
                    source: SpanSource::Alias(tid),
                });
                self.span_insertions += 1;
            }
            self.seqs.insert(seq, fresh);
            self.copy_on_write += 1;
            return Ok(self.release_table(tid));
        }
        let mut freed = 0;
        let mut dropped_aliases = Vec::new();
        {
            let mut released_cells = Vec::new();
            let table = self.table_mut(tid);
            while let Some(span) = table.spans.last_mut() {
                if span.start >= from {
                    let span = table.spans.pop().expect("non-empty");
                    match span.source {
                        SpanSource::Owned(cells) => released_cells.extend(cells),
                        SpanSource::Alias(t) => dropped_aliases.push(t),
                    }
                } else if span.end() > from {
                    let keep = from - span.start;
                    if let SpanSource::Owned(cells) = &mut span.source {
                        released_cells.extend(cells.drain(keep..));
                    }
                    span.len = keep;
                    break;
                } else {
                    break;
                }
            }
            table.len = from;
            for c in released_cells {
                freed += self.unref_cell(c);
            }
        }
        for t in dropped_aliases {
            freed += self.release_table(t);
        }
        Ok(freed)
    }

    /// Drops all of `seq`'s state, returning the cells freed.
    pub fn clear(&mut self, seq: SeqId) -> usize {
        match self.seqs.remove(&seq) {
            Some(t) => self.release_table(t),
            None => 0,
        }
    }

    /// Cell identity at a logical position, resolved through aliases.
    pub fn resolve(&self, seq: SeqId, pos: usize) -> Option<CellId> {
        let mut tid = *self.seqs.get(&seq)?;
        loop {
            let table = self.table(tid);
            if pos >= table.len {
                return None;
            }
            let i = table.spans.partition_point(|s| s.end() <= pos);
            let span = &table.spans[i];
            match &span.source {
                SpanSource::Owned(cells) => return Some(cells[pos - span.start]),
                SpanSource::Alias(t) => tid = *t,
            }
        }
    }

    /// Cell identities for `range` of `seq`.
    pub fn cells(&self, seq: SeqId, range: Range<usize>) -> Vec<CellId> {
        let mut out = Vec::with_capacity(range.len());
        if let Some(&t) = self.seqs.get(&seq) {
            self.collect_cells(t, range, &mut out);
        }
        out
    }

    /// Cell identities for `range` of a page table.
    pub fn table_cells(&self, table: TableId, range: Range<usize>) -> Vec<CellId> {
        let mut out = Vec::with_capacity(range.len());
        self.collect_cells(table, range, &mut out);
        out
    }

    fn collect_cells(&self, tid: TableId, range: Range<usize>, out: &mut Vec<CellId>) {
        let table = self.table(tid);
        let first = table.spans.partition_point(|s| s.end() <= range.start);
        for span in &table.spans[first..] {
            if span.start >= range.end {
                break;
            }
            let lo = range.start.max(span.start);
            let hi = range.end.min(span.end());
            match &span.source {
                SpanSource::Owned(cells) => {
                    out.extend_from_slice(&cells[lo - span.start..hi - span.start])
                }
                SpanSource::Alias(t) => self.collect_cells(*t, lo..hi, out),
            }
        }
    }

    /// Creates an immutable holder table covering `[0, prefix_len)` through
    /// `parent` followed by `cells`, taking one reference on each cell.
    /// Returns the holder with one reference held by the caller.
    pub fn create_holder(&mut self, parent: Option<(TableId, usize)>, cells: &[CellId]) -> TableId {
        let prefix = parent.map_or(0, |(_, n)| n);
        let tid = self.new_table(prefix + cells.len());
        let mut spans = Vec::with_capacity(2);
        if let Some((p, n)) = parent.filter(|&(_, n)| n > 0) {
            debug_assert!(self.table(p).len >= n);
            self.table_mut(p).refs += 1;
            spans.push(Span {
                start: 0,
                len: n,
                source: SpanSource::Alias(p),
            });
        }
        if !cells.is_empty() {
            for c in cells {
                self.cell_refs[c.0 as usize] += 1;
            }
            spans.push(Span {
                start: prefix,
                len: cells.len(),
                source: SpanSource::Owned(cells.to_vec()),
            });
        }
        self.span_insertions += spans.len() as u64;
        self.table_mut(tid).spans = spans;
        tid
    }

    /// Cells owned directly by a table (not reached through aliases).
    pub fn owned_cells(&self, table: TableId) -> Vec<CellId> {
        self.table(table)
            .spans
            .iter()
            .filter_map(|s| match &s.source {
                SpanSource::Owned(c) => Some(c.iter().copied()),
                SpanSource::Alias(_) => None,
            })
            .flatten()
            .collect()
    }

    /// Drops one reference to `table`, freeing it (and cascading through
    /// its aliases) when none remain. Returns cells freed.
    pub fn release_table(&mut self, table: TableId) -> usize {
        let mut freed = 0;
        let mut stack = vec![table];
        while let Some(tid) = stack.pop() {
            let t = self.table_mut(tid);
            debug_assert!(t.refs > 0, "table refcount underflow");
            t.refs -= 1;
            if t.refs > 0 {
                continue;
            }
            let t = self.tables[tid.0 as usize].take().expect("live table");
            self.free_tables.push(tid.0);
            for span in t.spans {
                match span.source {
                    SpanSource::Owned(cells) => {
                        for c in cells {
                            freed += self.unref_cell(c);
                        }
                    }
                    SpanSource::Alias(a) => stack.push(a),
                }
            }
        }
        freed
    }

    pub fn retain_table(&mut self, table: TableId) {
        self.table_mut(table).refs += 1;
    }

    /// Verifies cell refcounts against every owned span and the free list.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut refs = vec![0u32; self.capacity];
        for t in self.tables.iter().flatten() {
            let mut pos = 0;
            for s in &t.spans {
                if s.start != pos {
                    return Err(format!("gap or overlap at position {pos}"));
                }
                pos = s.end();
                match &s.source {
                    SpanSource::Owned(cells) => {
                        if cells.len() != s.len {
                            return Err("owned span length mismatch".into());
                        }
                        for c in cells {
                            refs[c.0 as usize] += 1;
                        }
                    }
                    SpanSource::Alias(a) => {
                        let target = self.tables[a.0 as usize]
                            .as_ref()
                            .ok_or("alias to freed table")?;
                        if target.refs == 0 || target.len < s.end() {
                            return Err("alias target too short or unreferenced".into());
                        }
                    }
                }
            }
            if pos != t.len {
                return Err("table length mismatch".into());
            }
        }
        if refs != self.cell_refs {
            return Err("cell refcounts drifted".into());
        }
        let zero = refs.iter().filter(|&&r| r == 0).count();
        if zero != self.free.len() {
            return Err(format!(
                "{} unreferenced cells but {} on free list",
                zero,
                self.free.len()
            ));
        }
        Ok(())
    }

    fn unref_cell(&mut self, c: CellId) -> usize {
        let r = &mut self.cell_refs[c.0 as usize];
        debug_assert!(*r > 0, "cell refcount underflow");
        *r -= 1;
        if *r == 0 {
            self.free.push(c);
            1
        } else {
            0
        }
    }

    fn new_table(&mut self, len: usize) -> TableId {
        let table = PageTable {
            spans: Vec::new(),
            len,
            refs: 1,
        };
        match self.free_tables.pop() {
            Some(i) => {
                self.tables[i as usize] = Some(table);
                TableId(i)
            }
            None => {
                self.tables.push(Some(table));
                TableId(self.tables.len() as u32 - 1)
            }
        }
    }

    /// The sequence's table, created or copied-on-write so that it is safe
    /// to mutate in place.
    fn exclusive_table(&mut self, seq: SeqId) -> TableId {
        match self.seqs.get(&seq).copied() {
            None => {
                let t = self.new_table(0);
                self.seqs.insert(seq, t);
                t
            }
            Some(t) if self.table(t).refs > 1 => {
                let len = self.table(t).len;
                let fresh = self.new_table(len);
                if len > 0 {
                    self.table_mut(t).refs += 1;
                    self.table_mut(fresh).spans.push(Span {
                        start: 0,
                        len,
                        source: SpanSource::Alias(t),
                    });
                    self.span_insertions += 1;
                }
                self.seqs.insert(seq, fresh);
                self.release_table(t);
                self.copy_on_write += 1;
                fresh
            }
            Some(t) => t,
        }
    }

    fn table(&self, t: TableId) -> &PageTable {
        self.tables[t.0 as usize].as_ref().expect("live table")
    }

    fn table_mut(&mut self, t: TableId) -> &mut PageTable {
        self.tables[t.0 as usize].as_mut().expect("live table")
    }
}
