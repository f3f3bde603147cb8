use std::fmt::Write as _;

use super::{pair_rco, window_stability, SortedSelections, StabilityError};
use crate::trace::TopKTrace;
use crate::types::HeadId;

/// Per-head stability statistics of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub sample_id: String,
    pub layers: u16,
    pub heads_per_layer: u16,
    pub window: usize,
    pub stride: usize,
    /// First step of every evaluated window.
    pub window_starts: Vec<usize>,
    /// `ts[head][window]`, `None` if every pair of the window was degenerate.
    pub ts: Vec<Vec<Option<f64>>>,
    /// `rco_sum[head][offset - 1]` over window starts, with matching counts.
    pub rco_sum: Vec<Vec<f64>>,
    pub rco_count: Vec<Vec<u32>>,
    pub excluded_pairs: usize,
    /// Fraction used for [`Self::bottom_counts`].
    pub fraction: f64,
    /// Windows in which each head ranked in the bottom `fraction` by TS.
    pub bottom_counts: Vec<u32>,
}

impl StabilityReport {
    /// Evaluate every window `[s, s + window)` with `s = 0, stride, 2*stride, ..`
    /// that fits in the trace.
    pub fn compute(
        trace: &TopKTrace,
        window: usize,
        stride: usize,
        fraction: f64,
    ) -> Result<Self, StabilityError> {
        if window < 2 {
            return Err(StabilityError::WindowTooSmall);
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(StabilityError::BadFraction(fraction));
        }
        let stride = stride.max(1);
        let (layers, heads) = (trace.layers(), trace.heads_per_layer());
        let n_heads = layers as usize * heads as usize;
        let sorted = SortedSelections::new(trace);
        let window_starts: Vec<usize> = (0..)
            .map(|i| i * stride)
            .take_while(|s| s + window <= trace.steps())
            .collect();

        let mut ts = vec![Vec::with_capacity(window_starts.len()); n_heads];
        let mut rco_sum = vec![vec![0.0; window - 1]; n_heads];
        let mut rco_count = vec![vec![0u32; window - 1]; n_heads];
        let mut excluded_pairs = 0;
        for head in HeadId::all(layers, heads) {
            let h = head.flat(heads);
            for &s in &window_starts {
                match window_stability(trace, &sorted, head, s, window) {
                    Ok(w) => {
                        excluded_pairs += w.excluded;
                        ts[h].push(Some(w.value));
                    }
                    Err(StabilityError::AllPairsDegenerate { .. }) => {
                        excluded_pairs += window - 1;
                        ts[h].push(None);
                    }
                    Err(e) => return Err(e),
                }
                for delta in 1..window {
                    if let Some(v) = pair_rco(trace, &sorted, head, s, s + delta) {
                        rco_sum[h][delta - 1] += v;
                        rco_count[h][delta - 1] += 1;
                    }
                }
            }
        }

        let mut report = Self {
            sample_id: trace.sample_id.clone(),
            layers,
            heads_per_layer: heads,
            window,
            stride,
            window_starts,
            ts,
            rco_sum,
            rco_count,
            excluded_pairs,
            fraction,
            bottom_counts: Vec::new(),
        };
        report.bottom_counts = report.count_bottom(fraction);
        Ok(report)
    }

    pub fn n_heads(&self) -> usize {
        self.layers as usize * self.heads_per_layer as usize
    }

    pub fn n_windows(&self) -> usize {
        self.window_starts.len()
    }

    /// Mean RCO of `head` at offset `delta` (1-based), if any pair contributed.
    pub fn mean_rco(&self, head: HeadId, delta: usize) -> Option<f64> {
        let h = head.flat(self.heads_per_layer);
        let n = self.rco_count[h][delta - 1];
        (n > 0).then(|| self.rco_sum[h][delta - 1] / n as f64)
    }

    /// Windows in which every head has a defined TS.
    pub(crate) fn complete_windows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_windows()).filter(|&w| self.ts.iter().all(|row| row[w].is_some()))
    }

    /// Per head, how many complete windows placed it among the
    /// `round(fraction * heads)` lowest TS values. Ties rank lower head first.
    pub fn count_bottom(&self, fraction: f64) -> Vec<u32> {
        let n = self.n_heads();
        let m = (fraction * n as f64).round() as usize;
        let mut counts = vec![0u32; n];
        let mut order: Vec<usize> = (0..n).collect();
        for w in self.complete_windows() {
            order.sort_by(|&a, &b| {
                let (ta, tb) = (self.ts[a][w].unwrap(), self.ts[b][w].unwrap());
                ta.total_cmp(&tb).then(a.cmp(&b))
            });
            for &h in &order[..m] {
                counts[h] += 1;
            }
        }
        counts
    }

    /// Mean TS per head over complete windows, summed in ascending value order.
    pub fn mean_ts(&self) -> Vec<Option<f64>> {
        let windows: Vec<usize> = self.complete_windows().collect();
        self.ts
            .iter()
            .map(|row| {
                let mut v: Vec<f64> = windows.iter().map(|&w| row[w].unwrap()).collect();
                if v.is_empty() {
                    return None;
                }
                v.sort_by(f64::total_cmp);
                Some(v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    /// One line per head: `layer,head,mean_ts,bottom_count,windows`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# fxc stability report v1");
        let _ = writeln!(out, "sample_id={}", self.sample_id);
        let _ = writeln!(out, "layers={}", self.layers);
        let _ = writeln!(out, "heads={}", self.heads_per_layer);
        let _ = writeln!(out, "window={}", self.window);
        let _ = writeln!(out, "stride={}", self.stride);
        let _ = writeln!(out, "fraction={}", self.fraction);
        let _ = writeln!(out, "excluded_pairs={}", self.excluded_pairs);
        let _ = writeln!(out, "layer,head,mean_ts,bottom_count,windows");
        let mean = self.mean_ts();
        for head in HeadId::all(self.layers, self.heads_per_layer) {
            let h = head.flat(self.heads_per_layer);
            let ts = mean[h].map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let windows = self.ts[h].iter().filter(|v| v.is_some()).count();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                head.layer, head.head, ts, self.bottom_counts[h], windows
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_non_overlapping_by_default() {
        let mut t = TopKTrace::new("t", 1, 2, 1);
        for s in 0..10u32 {
            t.push_step(8, &[vec![0], vec![s % 8]]).unwrap();
        }
        let r = StabilityReport::compute(&t, 3, 3, 0.5).unwrap();
        assert_eq!(r.window_starts, vec![0, 3, 6]);
        // head 0 never changes; head 1 changes every step
        assert_eq!(r.mean_ts()[0], Some(1.0));
        assert_eq!(r.mean_ts()[1], Some(0.0));
        assert_eq!(r.bottom_counts, vec![0, 3]);
        assert_eq!(r.mean_rco(HeadId::new(0, 0), 2), Some(1.0));
    }

    #[test]
    fn text_has_one_line_per_head() {
        let mut t = TopKTrace::new("t", 2, 2, 1);
        for _ in 0..4 {
            t.push_step(4, &[vec![0], vec![1], vec![2], vec![3]])
                .unwrap();
        }
        let r = StabilityReport::compute(&t, 2, 2, 0.25).unwrap();
        let text = r.to_text();
        let rows = text
            .lines()
            .skip_while(|l| !l.starts_with("layer,"))
            .skip(1)
            .count();
        assert_eq!(rows, 4);
    }
}
