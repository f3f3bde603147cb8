use super::BlockTableError;

/// Physical block id. Block 0 of every pool is the null block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u32);

/// Placeholder target for logical pages that hold no fast-tier data.
pub const NULL_BLOCK: BlockId = BlockId(0);

impl BlockId {
    pub fn is_null(self) -> bool {
        self == NULL_BLOCK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Fast,
    Slow,
}

/// Fixed-size pool of physical blocks with a LIFO free list.
#[derive(Debug, Clone)]
pub struct PhysicalPool {
    tier: Tier,
    total: u32,
    free: Vec<u32>,
    in_use: Vec<bool>,
}

impl PhysicalPool {
    /// A pool of `total` blocks, one of which is the reserved null block.
    pub fn new(tier: Tier, total: u32) -> Self {
        assert!(total >= 1, "pool needs room for the null block");
        Self {
            tier,
            total,
            // lowest ids are handed out first
            free: (1..total).rev().collect(),
            in_use: vec![false; total as usize],
        }
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn total_blocks(&self) -> u32 {
        self.total
    }

    pub fn free_blocks(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn live_blocks(&self) -> u32 {
        self.total - 1 - self.free_blocks()
    }

    pub fn is_live(&self, id: BlockId) -> bool {
        self.in_use.get(id.0 as usize).copied().unwrap_or(false)
    }

    pub fn allocate(&mut self) -> Result<BlockId, BlockTableError> {
        let id = self.free.pop().ok_or(BlockTableError::OutOfMemory {
            requested: 1,
            free: 0,
        })?;
        self.in_use[id as usize] = true;
        Ok(BlockId(id))
    }

    pub fn release(&mut self, id: BlockId) -> Result<(), BlockTableError> {
        if id.is_null() || !self.is_live(id) {
            return Err(BlockTableError::InvalidRelease(id.0));
        }
        self.in_use[id.0 as usize] = false;
        self.free.push(id.0);
        Ok(())
    }

    /// Free-list and ownership bookkeeping agree.
    pub(crate) fn check(&self) -> Result<(), String> {
        if self.free_blocks() + self.live_blocks() + 1 != self.total {
            return Err("conservation violated".into());
        }
        if self.in_use[0] {
            return Err("null block marked in use".into());
        }
        let mut on_free = vec![false; self.total as usize];
        for &f in &self.free {
            if f == 0 {
                return Err("null block on the free list".into());
            }
            if self.in_use[f as usize] {
                return Err(format!("block {f} both free and live"));
            }
            if std::mem::replace(&mut on_free[f as usize], true) {
                return Err(format!("block {f} on the free list twice"));
            }
        }
        let live = self.in_use.iter().filter(|&&u| u).count() as u32;
        if live != self.live_blocks() {
            return Err("live count mismatch".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_block_is_never_handed_out() {
        let mut p = PhysicalPool::new(Tier::Fast, 3);
        assert_eq!(p.allocate().unwrap(), BlockId(1));
        assert_eq!(p.allocate().unwrap(), BlockId(2));
        assert!(matches!(
            p.allocate(),
            Err(BlockTableError::OutOfMemory { .. })
        ));
        assert!(p.release(NULL_BLOCK).is_err());
        p.check().unwrap();
    }

    #[test]
    fn double_release_is_rejected() {
        let mut p = PhysicalPool::new(Tier::Fast, 4);
        let b = p.allocate().unwrap();
        p.release(b).unwrap();
        assert!(p.release(b).is_err());
        assert_eq!(p.free_blocks() + p.live_blocks() + 1, p.total_blocks());
    }
}
