use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{StabilityError, StabilityReport};
use crate::types::HeadId;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadStats {
    pub mean_ts: Option<f64>,
    pub bottom_count: u32,
}

/// Stable/unstable classification of every KV head of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProfile {
    pub model_id: String,
    pub task: String,
    pub trace_ids: Vec<String>,
    layers: u16,
    heads_per_layer: u16,
    unstable: BTreeSet<HeadId>,
    stats: Vec<HeadStats>,
}

impl HeadProfile {
    /// A profile with an explicit unstable set and no statistics.
    pub fn from_unstable(
        model_id: impl Into<String>,
        layers: u16,
        heads_per_layer: u16,
        unstable: impl IntoIterator<Item = HeadId>,
    ) -> Result<Self, StabilityError> {
        let unstable: BTreeSet<HeadId> = unstable.into_iter().collect();
        if let Some(h) = unstable
            .iter()
            .find(|h| !h.in_bounds(layers, heads_per_layer))
        {
            return Err(StabilityError::DimensionMismatch(format!(
                "head {h} outside {layers}x{heads_per_layer} model"
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            task: String::new(),
            trace_ids: Vec::new(),
            layers,
            heads_per_layer,
            unstable,
            stats: vec![HeadStats::default(); layers as usize * heads_per_layer as usize],
        })
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = task.into();
        self
    }

    pub fn layers(&self) -> u16 {
        self.layers
    }

    pub fn heads_per_layer(&self) -> u16 {
        self.heads_per_layer
    }

    pub fn n_heads(&self) -> usize {
        self.layers as usize * self.heads_per_layer as usize
    }

    pub fn is_unstable(&self, head: HeadId) -> bool {
        self.unstable.contains(&head)
    }

    pub fn unstable(&self) -> &BTreeSet<HeadId> {
        &self.unstable
    }

    pub fn stable(&self) -> impl Iterator<Item = HeadId> + '_ {
        HeadId::all(self.layers, self.heads_per_layer).filter(|h| !self.unstable.contains(h))
    }

    pub fn stable_count(&self) -> usize {
        self.n_heads() - self.unstable.len()
    }

    /// True if every head of `layer` is stable.
    pub fn layer_all_stable(&self, layer: u16) -> bool {
        (0..self.heads_per_layer).all(|h| !self.unstable.contains(&HeadId::new(layer, h)))
    }

    pub fn stats(&self, head: HeadId) -> HeadStats {
        self.stats[head.flat(self.heads_per_layer)]
    }

    /// Header lines followed by `layer,head,mean_ts,bottom_count,class`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# fxc head profile v1");
        let _ = writeln!(out, "model_id={}", self.model_id);
        let _ = writeln!(out, "task={}", self.task);
        let _ = writeln!(out, "traces={}", self.trace_ids.join(";"));
        let _ = writeln!(out, "layers={}", self.layers);
        let _ = writeln!(out, "heads={}", self.heads_per_layer);
        let _ = writeln!(out, "layer,head,mean_ts,bottom_count,class");
        for head in HeadId::all(self.layers, self.heads_per_layer) {
            let s = self.stats(head);
            let ts = s
                .mean_ts
                .map_or_else(|| "-".to_string(), |v| format!("{v}"));
            let class = if self.is_unstable(head) {
                "unstable"
            } else {
                "stable"
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                head.layer, head.head, ts, s.bottom_count, class
            );
        }
        out
    }

    pub fn parse_str(text: &str) -> Result<Self, StabilityError> {
        let err = |line: usize, reason: &str| StabilityError::ProfileFormat {
            line,
            reason: reason.to_string(),
        };
        let mut model_id = None;
        let mut task = String::new();
        let mut traces = Vec::new();
        let mut layers = None;
        let mut heads = None;
        let mut lines = text.lines().enumerate();
        for (i, raw) in lines.by_ref() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "layer,head,mean_ts,bottom_count,class" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, "expected key=value"))?;
            match k {
                "model_id" => model_id = Some(v.to_string()),
                "task" => task = v.to_string(),
                "traces" => {
                    traces = v
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "layers" => layers = Some(v.parse::<u16>().map_err(|_| err(i + 1, "bad layers"))?),
                "heads" => heads = Some(v.parse::<u16>().map_err(|_| err(i + 1, "bad heads"))?),
                _ => return Err(err(i + 1, "unknown header key")),
            }
        }
        let (layers, heads) = match (layers, heads) {
            (Some(l), Some(h)) if l > 0 && h > 0 => (l, h),
            _ => return Err(err(0, "missing layers/heads header")),
        };
        let n = layers as usize * heads as usize;
        let mut seen = vec![false; n];
        let mut stats = vec![HeadStats::default(); n];
        let mut unstable = BTreeSet::new();
        for (i, raw) in lines {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(i + 1, "expected 5 fields"));
            }
            let l: u16 = f[0].parse().map_err(|_| err(i + 1, "bad layer"))?;
            let h: u16 = f[1].parse().map_err(|_| err(i + 1, "bad head"))?;
            let head = HeadId::new(l, h);
            if !head.in_bounds(layers, heads) {
                return Err(err(i + 1, "head out of range"));
            }
            let idx = head.flat(heads);
            if std::mem::replace(&mut seen[idx], true) {
                return Err(err(i + 1, "duplicate head"));
            }
            let mean_ts = match f[2] {
                "-" => None,
                v => Some(v.parse::<f64>().map_err(|_| err(i + 1, "bad mean_ts"))?),
            };
            let bottom_count = f[3].parse().map_err(|_| err(i + 1, "bad bottom_count"))?;
            stats[idx] = HeadStats {
                mean_ts,
                bottom_count,
            };
            match f[4] {
                "unstable" => {
                    unstable.insert(head);
                }
                "stable" => {}
                _ => return Err(err(i + 1, "class must be stable or unstable")),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(err(0, "missing head rows"));
        }
        Ok(Self {
            model_id: model_id.unwrap_or_default(),
            task,
            trace_ids: traces,
            layers,
            heads_per_layer: heads,
            unstable,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StabilityError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StabilityError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }
}

/// Classify heads from per-window temporal stability.
///
/// In every complete window of every report, heads are ranked by TS and the
/// lowest `round(fraction * heads)` are counted. Heads with the highest counts
/// are unstable; ties go to lower mean TS, then lower head id.
pub fn classify_heads(
    reports: &[StabilityReport],
    fraction: f64,
    model_id: &str,
    task: &str,
) -> Result<HeadProfile, StabilityError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(StabilityError::BadFraction(fraction));
    }
    let first = reports.first().ok_or(StabilityError::NoWindows)?;
    let (layers, heads) = (first.layers, first.heads_per_layer);
    if let Some(r) = reports
        .iter()
        .find(|r| (r.layers, r.heads_per_layer) != (layers, heads))
    {
        return Err(StabilityError::DimensionMismatch(format!(
            "report {} is {}x{}, expected {layers}x{heads}",
            r.sample_id, r.layers, r.heads_per_layer
        )));
    }
    let n = first.n_heads();
    let mut counts = vec![0u32; n];
    let mut ts_values: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut windows = 0usize;
    for r in reports {
        for (h, c) in r.count_bottom(fraction).into_iter().enumerate() {
            counts[h] += c;
        }
        for w in r.complete_windows() {
            windows += 1;
            for (h, vals) in ts_values.iter_mut().enumerate() {
                vals.push(r.ts[h][w].unwrap());
            }
        }
    }
    if windows == 0 {
        return Err(StabilityError::NoWindows);
    }
    let mean_ts: Vec<f64> = ts_values
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();

    let m = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        counts[b]
            .cmp(&counts[a])
            .then(mean_ts[a].total_cmp(&mean_ts[b]))
            .then(a.cmp(&b))
    });
    let unstable = order[..m]
        .iter()
        .map(|&h| HeadId::from_flat(h, heads))
        .collect();

    let mut trace_ids: Vec<String> = reports.iter().map(|r| r.sample_id.clone()).collect();
    trace_ids.sort();
    Ok(HeadProfile {
        model_id: model_id.to_string(),
        task: task.to_string(),
        trace_ids,
        layers,
        heads_per_layer: heads,
        unstable,
        stats: (0..n)
            .map(|h| HeadStats {
                mean_ts: Some(mean_ts[h]),
                bottom_count: counts[h],
            })
            .collect(),
    })
}
