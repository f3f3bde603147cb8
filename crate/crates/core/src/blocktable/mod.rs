//! Per-(request, layer, head) page tables over the fast-tier block pool.
//!
//! The table is a dense `(B, L, H, N)` array of physical block ids: slot `b`
//! of a live request, layer, head and logical page. Entries of pages that are
//! not fast-resident point at [`NULL_BLOCK`], so every head keeps a dense
//! `0..len` logical range. A shadow copy stands in for the device-side table;
//! it is synchronized by [`BlockTable::flush_dirty`], which copies only the
//! coalesced runs of entries written since the previous flush.

mod pool;
mod recycle;

pub use pool::{BlockId, PhysicalPool, Tier, NULL_BLOCK};
pub use recycle::{CopyOp, Reassignment, RecyclePlan};

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::types::{HeadId, RequestId};

#[derive(Debug, Error, PartialEq)]
pub enum BlockTableError {
    #[error("out of memory: {requested} blocks requested, {free} free")]
    OutOfMemory { requested: u32, free: u32 },
    #[error("request {0} is not in the table")]
    UnknownRequest(RequestId),
    #[error("request {0} is already in the table")]
    DuplicateRequest(RequestId),
    #[error("{head}: logical page {logical} out of range (len {len})")]
    LogicalOutOfRange {
        head: HeadId,
        logical: u32,
        len: u32,
    },
    #[error("{head}: logical page {logical} is already evicted")]
    AlreadyNull { head: HeadId, logical: u32 },
    #[error("{head}: evicted page {logical} is not fast-resident")]
    NotResident { head: HeadId, logical: u32 },
    #[error("{head}: promoted page {logical} is already fast-resident")]
    AlreadyResident { head: HeadId, logical: u32 },
    #[error("{head}: promoted page {logical} has no slow-tier copy")]
    MissingSlowCopy { head: HeadId, logical: u32 },
    #[error("{head}: logical page {logical} maps to the null block")]
    NullDereference { head: HeadId, logical: u32 },
    #[error("block {0} cannot be released")]
    InvalidRelease(u32),
    #[error("head {0} outside the model")]
    HeadOutOfRange(HeadId),
}

const INITIAL_N: usize = 16;

#[derive(Debug, Clone)]
pub struct BlockTable {
    layers: u16,
    heads: u16,
    slots: usize,
    cap_n: usize,
    entries: Vec<BlockId>,
    lens: Vec<u32>,
    slot_of: HashMap<RequestId, usize>,
    free_slots: Vec<usize>,
    shadow: Vec<BlockId>,
    dirty: Vec<usize>,
    full_dirty: bool,
    pool: PhysicalPool,
}

impl BlockTable {
    /// A table for an `layers x heads` model over a fast pool of `pool_blocks`
    /// blocks (including the null block).
    pub fn new(layers: u16, heads: u16, pool_blocks: u32) -> Self {
        assert!(layers > 0 && heads > 0);
        Self {
            layers,
            heads,
            slots: 0,
            cap_n: INITIAL_N,
            entries: Vec::new(),
            lens: Vec::new(),
            slot_of: HashMap::new(),
            free_slots: Vec::new(),
            shadow: Vec::new(),
            dirty: Vec::new(),
            full_dirty: false,
            pool: PhysicalPool::new(Tier::Fast, pool_blocks),
        }
    }

    pub fn pool(&self) -> &PhysicalPool {
        &self.pool
    }

    /// `(B, L, H, N)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (
            self.slots,
            self.layers as usize,
            self.heads as usize,
            self.cap_n,
        )
    }

    pub fn table_len(&self) -> usize {
        self.entries.len()
    }

    pub fn requests(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.slot_of.keys().copied()
    }

    pub fn contains(&self, req: RequestId) -> bool {
        self.slot_of.contains_key(&req)
    }

    fn head_index(&self, slot: usize, head: HeadId) -> usize {
        slot * self.layers as usize * self.heads as usize + head.flat(self.heads)
    }

    fn offset(&self, slot: usize, head: HeadId, logical: u32) -> usize {
        self.head_index(slot, head) * self.cap_n + logical as usize
    }

    fn slot(&self, req: RequestId) -> Result<usize, BlockTableError> {
        self.slot_of
            .get(&req)
            .copied()
            .ok_or(BlockTableError::UnknownRequest(req))
    }

    fn check_head(&self, head: HeadId) -> Result<(), BlockTableError> {
        if head.in_bounds(self.layers, self.heads) {
            Ok(())
        } else {
            Err(BlockTableError::HeadOutOfRange(head))
        }
    }

    fn set(&mut self, off: usize, id: BlockId) {
        self.entries[off] = id;
        self.dirty.push(off);
    }

    pub fn add_request(&mut self, req: RequestId) -> Result<(), BlockTableError> {
        if self.slot_of.contains_key(&req) {
            return Err(BlockTableError::DuplicateRequest(req));
        }
        let slot = match self.free_slots.pop() {
            Some(s) => s,
            None => {
                let s = self.slots;
                self.slots += 1;
                let per_slot = self.layers as usize * self.heads as usize;
                self.entries
                    .resize(self.slots * per_slot * self.cap_n, NULL_BLOCK);
                self.shadow.resize(self.entries.len(), NULL_BLOCK);
                self.lens.resize(self.slots * per_slot, 0);
                s
            }
        };
        self.slot_of.insert(req, slot);
        Ok(())
    }

    /// Release every block of `req` and free its slot. Returns blocks freed.
    pub fn remove_request(&mut self, req: RequestId) -> Result<u32, BlockTableError> {
        let slot = self.slot(req)?;
        let mut freed = 0;
        for head in HeadId::all(self.layers, self.heads) {
            let hi = self.head_index(slot, head);
            for n in 0..self.lens[hi] {
                let off = self.offset(slot, head, n);
                let id = self.entries[off];
                if !id.is_null() {
                    self.pool.release(id)?;
                    freed += 1;
                }
                self.set(off, NULL_BLOCK);
            }
            self.lens[hi] = 0;
        }
        self.slot_of.remove(&req);
        self.free_slots.push(slot);
        Ok(freed)
    }

    /// Logical pages of `head` (resident or not).
    pub fn len(&self, req: RequestId, head: HeadId) -> Result<u32, BlockTableError> {
        let slot = self.slot(req)?;
        self.check_head(head)?;
        Ok(self.lens[self.head_index(slot, head)])
    }

    /// The `0..len` mapping of one head.
    pub fn mapping(&self, req: RequestId, head: HeadId) -> Result<&[BlockId], BlockTableError> {
        let slot = self.slot(req)?;
        self.check_head(head)?;
        let len = self.lens[self.head_index(slot, head)] as usize;
        let start = self.offset(slot, head, 0);
        Ok(&self.entries[start..start + len])
    }

    /// Logical pages of `head` currently backed by a real block.
    pub fn resident_pages(
        &self,
        req: RequestId,
        head: HeadId,
    ) -> Result<Vec<u32>, BlockTableError> {
        Ok(self
            .mapping(req, head)?
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_null())
            .map(|(n, _)| n as u32)
            .collect())
    }

    /// Physical block of a page, for consumers that read page data.
    /// Null-mapped pages are an error.
    pub fn read_block(
        &self,
        req: RequestId,
        head: HeadId,
        logical: u32,
    ) -> Result<BlockId, BlockTableError> {
        let map = self.mapping(req, head)?;
        match map.get(logical as usize) {
            None => Err(BlockTableError::LogicalOutOfRange {
                head,
                logical,
                len: map.len() as u32,
            }),
            Some(b) if b.is_null() => Err(BlockTableError::NullDereference { head, logical }),
            Some(&b) => Ok(b),
        }
    }

    fn grow_n(&mut self) {
        let new_n = self.cap_n * 2;
        let heads_total = self.slots * self.layers as usize * self.heads as usize;
        let mut entries = vec![NULL_BLOCK; heads_total * new_n];
        for hi in 0..heads_total {
            let len = self.lens[hi] as usize;
            entries[hi * new_n..hi * new_n + len]
                .copy_from_slice(&self.entries[hi * self.cap_n..hi * self.cap_n + len]);
        }
        self.entries = entries;
        self.cap_n = new_n;
        self.shadow = vec![NULL_BLOCK; self.entries.len()];
        self.dirty.clear();
        self.full_dirty = true;
    }

    /// Append a logical page to `head` backed by a fresh block.
    pub fn allocate_page(&mut self, req: RequestId, head: HeadId) -> Result<u32, BlockTableError> {
        let slot = self.slot(req)?;
        self.check_head(head)?;
        let id = self.pool.allocate()?;
        let hi = self.head_index(slot, head);
        if self.lens[hi] as usize == self.cap_n {
            self.grow_n();
        }
        let logical = self.lens[hi];
        self.lens[hi] += 1;
        let off = self.offset(slot, head, logical);
        self.set(off, id);
        Ok(logical)
    }

    /// Append a logical page that has no fast-tier block.
    pub fn append_null(&mut self, req: RequestId, head: HeadId) -> Result<u32, BlockTableError> {
        let slot = self.slot(req)?;
        self.check_head(head)?;
        let hi = self.head_index(slot, head);
        if self.lens[hi] as usize == self.cap_n {
            self.grow_n();
        }
        let logical = self.lens[hi];
        self.lens[hi] += 1;
        Ok(logical)
    }

    /// Return the page's block to the pool and point the entry at the null block.
    pub fn evict_to_null(
        &mut self,
        req: RequestId,
        head: HeadId,
        logical: u32,
    ) -> Result<BlockId, BlockTableError> {
        let slot = self.slot(req)?;
        self.check_head(head)?;
        let len = self.lens[self.head_index(slot, head)];
        if logical >= len {
            return Err(BlockTableError::LogicalOutOfRange { head, logical, len });
        }
        let off = self.offset(slot, head, logical);
        let id = self.entries[off];
        if id.is_null() {
            return Err(BlockTableError::AlreadyNull { head, logical });
        }
        self.pool.release(id)?;
        self.set(off, NULL_BLOCK);
        Ok(id)
    }

    /// Coalesced `(offset, length)` runs written since the last flush, in
    /// flattened `(b, l, h, n)` order. The shadow copy is brought up to date.
    pub fn flush_dirty(&mut self) -> Vec<(usize, usize)> {
        if self.full_dirty {
            self.full_dirty = false;
            self.dirty.clear();
            self.shadow.clone_from(&self.entries);
            return if self.entries.is_empty() {
                Vec::new()
            } else {
                vec![(0, self.entries.len())]
            };
        }
        let mut dirty = std::mem::take(&mut self.dirty);
        dirty.sort_unstable();
        dirty.dedup();
        let mut segments: Vec<(usize, usize)> = Vec::new();
        for off in dirty {
            self.shadow[off] = self.entries[off];
            match segments.last_mut() {
                Some((start, len)) if *start + *len == off => *len += 1,
                _ => segments.push((off, 1)),
            }
        }
        self.dirty = Vec::new();
        segments
    }

    /// Number of distinct entries awaiting synchronization.
    pub fn pending_dirty(&self) -> usize {
        if self.full_dirty {
            return self.entries.len();
        }
        let mut d = self.dirty.clone();
        d.sort_unstable();
        d.dedup();
        d.len()
    }

    pub fn shadow_matches(&self) -> bool {
        self.shadow == self.entries
    }

    /// Injectivity, conservation, null safety and density.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.pool.check()?;
        let mut seen = vec![false; self.pool.total_blocks() as usize];
        let mut live = 0u32;
        let per_slot = self.layers as usize * self.heads as usize;
        let active: Vec<bool> = {
            let mut a = vec![false; self.slots];
            for &s in self.slot_of.values() {
                a[s] = true;
            }
            a
        };
        for hi in 0..self.slots * per_slot {
            let len = self.lens[hi] as usize;
            if !active[hi / per_slot] && len != 0 {
                return Err(format!("free slot {} has pages", hi / per_slot));
            }
            let row = &self.entries[hi * self.cap_n..(hi + 1) * self.cap_n];
            for (n, id) in row.iter().enumerate() {
                if id.is_null() {
                    continue;
                }
                if n >= len {
                    return Err(format!("entry past logical end at head row {hi}, page {n}"));
                }
                if !self.pool.is_live(*id) {
                    return Err(format!("entry maps to free block {}", id.0));
                }
                if std::mem::replace(&mut seen[id.0 as usize], true) {
                    return Err(format!("block {} mapped twice", id.0));
                }
                live += 1;
            }
        }
        if live != self.pool.live_blocks() {
            return Err(format!(
                "{} live blocks but {} mapped",
                self.pool.live_blocks(),
                live
            ));
        }
        Ok(())
    }

    /// `request,layer,head,logical,physical,dirty` for every logical page.
    pub fn to_csv(&self) -> String {
        let mut dirty = vec![self.full_dirty; self.entries.len()];
        for &d in &self.dirty {
            dirty[d] = true;
        }
        let mut reqs: Vec<(RequestId, usize)> =
            self.slot_of.iter().map(|(r, s)| (*r, *s)).collect();
        reqs.sort();
        let mut out = String::from("request,layer,head,logical,physical,dirty\n");
        for (req, slot) in reqs {
            for head in HeadId::all(self.layers, self.heads) {
                for n in 0..self.lens[self.head_index(slot, head)] {
                    let off = self.offset(slot, head, n);
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        req.0, head.layer, head.head, n, self.entries[off].0, dirty[off] as u8
                    );
                }
            }
        }
        out
    }
}
