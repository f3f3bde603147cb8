use std::fmt;

use crate::config::Config;

/// A KV head, addressed by layer and head index within the layer.
///
/// Ordering is `(layer, head)`, which is also the flattened head order used by
/// traces and block tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: u16,
    pub head: u16,
}

impl HeadId {
    pub const fn new(layer: u16, head: u16) -> Self {
        Self { layer, head }
    }

    /// Flat index `layer * heads_per_layer + head`.
    pub fn flat(self, heads_per_layer: u16) -> usize {
        self.layer as usize * heads_per_layer as usize + self.head as usize
    }

    pub fn from_flat(index: usize, heads_per_layer: u16) -> Self {
        let h = heads_per_layer as usize;
        Self::new((index / h) as u16, (index % h) as u16)
    }

    pub fn in_bounds(self, layers: u16, heads_per_layer: u16) -> bool {
        self.layer < layers && self.head < heads_per_layer
    }

    /// All heads of an `layers x heads_per_layer` model in flat order.
    pub fn all(layers: u16, heads_per_layer: u16) -> impl Iterator<Item = HeadId> {
        (0..layers).flat_map(move |l| (0..heads_per_layer).map(move |h| HeadId::new(l, h)))
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub prompt_tokens: u32,
    pub max_output_tokens: u32,
    /// Arrival time in simulated seconds; 0 for offline workloads.
    pub arrival_time_s: f64,
}

impl Request {
    pub fn new(id: u64, prompt_tokens: u32, max_output_tokens: u32) -> Self {
        assert!(prompt_tokens >= 1 && max_output_tokens >= 1);
        Self {
            id: RequestId(id),
            prompt_tokens,
            max_output_tokens,
            arrival_time_s: 0.0,
        }
    }

    pub fn arriving_at(mut self, t: f64) -> Self {
        self.arrival_time_s = t;
        self
    }

    /// Logical pages per head right after prefill.
    pub fn prompt_pages(&self, cfg: &Config) -> u64 {
        cfg.pages_for(self.prompt_tokens as u64)
    }

    /// Upper bound on logical pages per head over the request's lifetime.
    ///
    /// The first output token comes out of prefill, so the cache holds at most
    /// `prompt + max_output - 1` tokens.
    pub fn final_pages(&self, cfg: &Config) -> u64 {
        cfg.pages_for(self.prompt_tokens as u64 + self.max_output_tokens as u64 - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        for (i, h) in HeadId::all(3, 5).enumerate() {
            assert_eq!(h.flat(5), i);
            assert_eq!(HeadId::from_flat(i, 5), h);
        }
    }

    #[test]
    fn page_counts() {
        let cfg = Config::default();
        let r = Request::new(0, 10_000, 1);
        assert_eq!(r.prompt_pages(&cfg), 625);
        assert_eq!(r.final_pages(&cfg), 625);
        assert_eq!(Request::new(1, 10_000, 2).final_pages(&cfg), 626);
    }
}
