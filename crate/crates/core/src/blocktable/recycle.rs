use super::{BlockId, BlockTable, BlockTableError, NULL_BLOCK};
use crate::scoring::TopKSet;
use crate::types::{HeadId, RequestId};

/// An evicted page's block handed directly to a promoted page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reassignment {
    pub block: BlockId,
    pub from: u32,
    pub to: u32,
}

/// Slow-tier copy of logical page `logical` lands in fast block `dest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyOp {
    pub logical: u32,
    pub dest: BlockId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecyclePlan {
    pub evicted: Vec<u32>,
    pub promoted: Vec<u32>,
    pub reassigned: Vec<Reassignment>,
    pub freed: Vec<BlockId>,
    pub allocated: Vec<(u32, BlockId)>,
    pub copies: Vec<CopyOp>,
}

impl RecyclePlan {
    pub fn is_empty(&self) -> bool {
        self.evicted.is_empty() && self.promoted.is_empty()
    }
}

impl BlockTable {
    fn validate_rerank(
        &self,
        req: RequestId,
        head: HeadId,
        old: &TopKSet,
        new: &TopKSet,
        has_slow_copy: &dyn Fn(u32) -> bool,
    ) -> Result<(Vec<u32>, Vec<u32>), BlockTableError> {
        let map = self.mapping(req, head)?;
        let len = map.len() as u32;
        let evicted = old.difference(new);
        let promoted = new.difference(old);
        for &p in evicted.iter().chain(&promoted) {
            if p >= len {
                return Err(BlockTableError::LogicalOutOfRange {
                    head,
                    logical: p,
                    len,
                });
            }
        }
        if let Some(&p) = evicted.iter().find(|&&p| map[p as usize].is_null()) {
            return Err(BlockTableError::NotResident { head, logical: p });
        }
        if let Some(&p) = promoted.iter().find(|&&p| !map[p as usize].is_null()) {
            return Err(BlockTableError::AlreadyResident { head, logical: p });
        }
        if let Some(&p) = promoted.iter().find(|&&p| !has_slow_copy(p)) {
            return Err(BlockTableError::MissingSlowCopy { head, logical: p });
        }
        let deficit = promoted.len().saturating_sub(evicted.len()) as u32;
        if deficit > self.pool.free_blocks() {
            return Err(BlockTableError::OutOfMemory {
                requested: deficit,
                free: self.pool.free_blocks(),
            });
        }
        Ok((evicted, promoted))
    }

    fn entry_offset(&self, req: RequestId, head: HeadId, logical: u32) -> usize {
        let slot = self.slot_of[&req];
        self.offset(slot, head, logical)
    }

    /// Move fast residency of `head` from `old` to `new`, handing evicted
    /// blocks straight to promoted pages. Both sides are paired in ascending
    /// logical order; surplus evictions are freed and any deficit allocated.
    ///
    /// Nothing is modified when an error is returned.
    pub fn recycle(
        &mut self,
        req: RequestId,
        head: HeadId,
        old: &TopKSet,
        new: &TopKSet,
        has_slow_copy: impl Fn(u32) -> bool,
    ) -> Result<RecyclePlan, BlockTableError> {
        let (evicted, promoted) = self.validate_rerank(req, head, old, new, &has_slow_copy)?;
        let mut plan = RecyclePlan {
            evicted: evicted.clone(),
            promoted: promoted.clone(),
            ..RecyclePlan::default()
        };
        let pairs = evicted.len().min(promoted.len());
        for (&from, &to) in evicted.iter().zip(&promoted) {
            let src = self.entry_offset(req, head, from);
            let dst = self.entry_offset(req, head, to);
            let block = self.entries[src];
            self.set(src, NULL_BLOCK);
            self.set(dst, block);
            plan.reassigned.push(Reassignment { block, from, to });
            plan.copies.push(CopyOp {
                logical: to,
                dest: block,
            });
        }
        for &from in &evicted[pairs..] {
            let src = self.entry_offset(req, head, from);
            let block = self.entries[src];
            self.pool.release(block)?;
            self.set(src, NULL_BLOCK);
            plan.freed.push(block);
        }
        for &to in &promoted[pairs..] {
            let block = self.pool.allocate()?;
            let dst = self.entry_offset(req, head, to);
            self.set(dst, block);
            plan.allocated.push((to, block));
            plan.copies.push(CopyOp {
                logical: to,
                dest: block,
            });
        }
        Ok(plan)
    }

    /// Reference rerank: evict every outgoing page, then allocate every
    /// incoming one. Same final residency as [`BlockTable::recycle`].
    pub fn rerank_naive(
        &mut self,
        req: RequestId,
        head: HeadId,
        old: &TopKSet,
        new: &TopKSet,
        has_slow_copy: impl Fn(u32) -> bool,
    ) -> Result<RecyclePlan, BlockTableError> {
        let (evicted, promoted) = self.validate_rerank(req, head, old, new, &has_slow_copy)?;
        let mut plan = RecyclePlan {
            evicted: evicted.clone(),
            promoted: promoted.clone(),
            ..RecyclePlan::default()
        };
        for &p in &evicted {
            plan.freed.push(self.evict_to_null(req, head, p)?);
        }
        for &p in &promoted {
            let block = self.pool.allocate()?;
            let dst = self.entry_offset(req, head, p);
            self.set(dst, block);
            plan.allocated.push((p, block));
            plan.copies.push(CopyOp {
                logical: p,
                dest: block,
            });
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: HeadId = HeadId::new(0, 0);
    const R: RequestId = RequestId(1);

    fn table_with(pages: u32, resident: &[u32], blocks: u32) -> BlockTable {
        let mut t = BlockTable::new(1, 1, blocks);
        t.add_request(R).unwrap();
        for _ in 0..pages {
            t.allocate_page(R, H).unwrap();
        }
        for p in 0..pages {
            if !resident.contains(&p) {
                t.evict_to_null(R, H, p).unwrap();
            }
        }
        t.flush_dirty();
        t
    }

    #[test]
    fn identity_rerank_is_empty() {
        let mut t = table_with(8, &[0, 1, 2, 3], 16);
        let s = TopKSet::from_pages([0, 1, 2, 3], 0);
        let plan = t.recycle(R, H, &s, &s, |_| true).unwrap();
        assert!(plan.is_empty());
        assert!(plan.copies.is_empty());
        assert!(t.flush_dirty().is_empty());
    }

    #[test]
    fn equal_size_swap_reuses_blocks() {
        let mut t = table_with(8, &[0, 1, 2, 3], 16);
        let b2 = t.read_block(R, H, 2).unwrap();
        let b3 = t.read_block(R, H, 3).unwrap();
        let live = t.pool().live_blocks();
        let old = TopKSet::from_pages([0, 1, 2, 3], 0);
        let new = TopKSet::from_pages([0, 1, 4, 5], 16);
        let plan = t.recycle(R, H, &old, &new, |_| true).unwrap();
        assert_eq!(plan.evicted, vec![2, 3]);
        assert_eq!(plan.promoted, vec![4, 5]);
        assert_eq!(plan.reassigned.len(), 2);
        assert_eq!(plan.copies.len(), 2);
        assert!(plan.allocated.is_empty() && plan.freed.is_empty());
        assert_eq!(t.read_block(R, H, 4).unwrap(), b2);
        assert_eq!(t.read_block(R, H, 5).unwrap(), b3);
        assert_eq!(t.pool().live_blocks(), live);
        assert_eq!(t.flush_dirty(), vec![(2, 4)]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn shrinking_selection_frees_surplus() {
        let mut t = table_with(6, &[0, 1, 2, 3], 16);
        let old = TopKSet::from_pages([0, 1, 2, 3], 0);
        let new = TopKSet::from_pages([0, 1, 5], 16);
        let plan = t.recycle(R, H, &old, &new, |_| true).unwrap();
        assert_eq!(plan.reassigned.len(), 1);
        assert_eq!(plan.freed.len(), 1);
        assert_eq!(t.resident_pages(R, H).unwrap(), vec![0, 1, 5]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn growing_selection_allocates_deficit() {
        let mut t = table_with(6, &[0], 16);
        let old = TopKSet::from_pages([0], 0);
        let new = TopKSet::from_pages([2, 3, 4], 16);
        let plan = t.recycle(R, H, &old, &new, |_| true).unwrap();
        assert_eq!(plan.reassigned.len(), 1);
        assert_eq!(plan.allocated.len(), 2);
        assert_eq!(plan.copies.len(), 3);
        t.check_invariants().unwrap();
    }

    #[test]
    fn missing_slow_copy_is_rejected_without_side_effects() {
        let mut t = table_with(6, &[0, 1], 16);
        let before = t.to_csv();
        let old = TopKSet::from_pages([0, 1], 0);
        let new = TopKSet::from_pages([0, 4], 16);
        let err = t.recycle(R, H, &old, &new, |p| p != 4).unwrap_err();
        assert_eq!(
            err,
            BlockTableError::MissingSlowCopy {
                head: H,
                logical: 4
            }
        );
        assert_eq!(t.to_csv(), before);
    }

    #[test]
    fn naive_rerank_lands_on_same_residency() {
        let old = TopKSet::from_pages([0, 2, 3], 0);
        let new = TopKSet::from_pages([1, 3, 4, 5], 16);
        let mut a = table_with(6, &[0, 2, 3], 16);
        let mut b = a.clone();
        a.recycle(R, H, &old, &new, |_| true).unwrap();
        b.rerank_naive(R, H, &old, &new, |_| true).unwrap();
        assert_eq!(
            a.resident_pages(R, H).unwrap(),
            b.resident_pages(R, H).unwrap()
        );
        assert_eq!(a.pool().live_blocks(), b.pool().live_blocks());
    }
}
