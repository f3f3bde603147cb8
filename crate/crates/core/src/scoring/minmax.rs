use std::collections::HashMap;

use super::ScoringError;
use crate::types::{HeadId, RequestId};

/// Metadata is allocated in blocks covering this many KV pages.
pub const PAGES_PER_META_BLOCK: usize = 128;

/// Per-page elementwise key minima and maxima of one (request, layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxMeta {
    dim: usize,
    page_size: u32,
    k_min: Vec<f64>,
    k_max: Vec<f64>,
    fill: Vec<u32>,
}

impl MinMaxMeta {
    pub fn new(dim: usize, page_size: u32) -> Self {
        assert!(dim > 0 && page_size > 0);
        Self {
            dim,
            page_size,
            k_min: Vec::new(),
            k_max: Vec::new(),
            fill: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pages(&self) -> usize {
        self.fill.len()
    }

    pub fn fill(&self, page: u32) -> Option<u32> {
        self.fill.get(page as usize).copied()
    }

    /// Metadata blocks backing the current pages.
    pub fn blocks(&self) -> usize {
        self.pages().div_ceil(PAGES_PER_META_BLOCK)
    }

    /// Add an empty page and return its index.
    pub fn append_page(&mut self) -> u32 {
        if self.pages().is_multiple_of(PAGES_PER_META_BLOCK) {
            let want = (self.blocks() + 1) * PAGES_PER_META_BLOCK * self.dim;
            self.k_min.reserve_exact(want - self.k_min.len());
            self.k_max.reserve_exact(want - self.k_max.len());
        }
        self.k_min
            .extend(std::iter::repeat_n(f64::INFINITY, self.dim));
        self.k_max
            .extend(std::iter::repeat_n(f64::NEG_INFINITY, self.dim));
        self.fill.push(0);
        (self.fill.len() - 1) as u32
    }

    /// Fold `key` into the bounds of `page`.
    pub fn update(&mut self, page: u32, key: &[f64]) -> Result<(), ScoringError> {
        if key.len() != self.dim {
            return Err(ScoringError::DimensionMismatch {
                got: key.len(),
                expected: self.dim,
            });
        }
        let fill = self
            .fill
            .get_mut(page as usize)
            .ok_or(ScoringError::UnknownPage(page))?;
        if *fill >= self.page_size {
            return Err(ScoringError::PageFull {
                page,
                capacity: self.page_size,
            });
        }
        *fill += 1;
        let base = page as usize * self.dim;
        for (i, &k) in key.iter().enumerate() {
            let lo = &mut self.k_min[base + i];
            *lo = lo.min(k);
            let hi = &mut self.k_max[base + i];
            *hi = hi.max(k);
        }
        Ok(())
    }

    /// Append a key to the last page, opening a new page when it is full.
    /// Returns the page written.
    pub fn push_token(&mut self, key: &[f64]) -> Result<u32, ScoringError> {
        let page = match self.fill.last() {
            Some(&f) if f < self.page_size => (self.pages() - 1) as u32,
            _ => self.append_page(),
        };
        self.update(page, key)?;
        Ok(page)
    }

    pub fn bounds(&self, page: u32) -> Result<(&[f64], &[f64]), ScoringError> {
        match self.fill(page) {
            None => Err(ScoringError::UnknownPage(page)),
            Some(0) => Err(ScoringError::EmptyPage(page)),
            Some(_) => {
                let r = page as usize * self.dim..(page as usize + 1) * self.dim;
                Ok((&self.k_min[r.clone()], &self.k_max[r]))
            }
        }
    }
}

/// Elementwise min/max update of one page.
pub fn update_minmax(meta: &mut MinMaxMeta, page: u32, key: &[f64]) -> Result<(), ScoringError> {
    meta.update(page, key)
}

/// Fast-tier resident min/max metadata for every tracked (request, head).
///
/// Entries are kept for offloaded pages too, so offloaded pages can still be
/// scored and promoted.
#[derive(Debug, Default)]
pub struct MinMaxCache {
    entries: HashMap<(RequestId, HeadId), MinMaxMeta>,
}

impl MinMaxCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, req: RequestId, head: HeadId) -> Option<&MinMaxMeta> {
        self.entries.get(&(req, head))
    }

    pub fn get_or_insert(
        &mut self,
        req: RequestId,
        head: HeadId,
        dim: usize,
        page_size: u32,
    ) -> &mut MinMaxMeta {
        self.entries
            .entry((req, head))
            .or_insert_with(|| MinMaxMeta::new(dim, page_size))
    }

    pub fn remove_request(&mut self, req: RequestId) {
        self.entries.retain(|(r, _), _| *r != req);
    }

    /// Total metadata blocks allocated.
    pub fn blocks(&self) -> usize {
        self.entries.values().map(MinMaxMeta::blocks).sum()
    }

    /// Bytes held, given bytes per page of metadata.
    pub fn bytes(&self, minmax_page_bytes: u64) -> u64 {
        self.blocks() as u64 * PAGES_PER_META_BLOCK as u64 * minmax_page_bytes
    }
}
