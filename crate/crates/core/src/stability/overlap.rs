use std::fmt::Write as _;

use super::{HeadProfile, StabilityError};

/// Pairwise `|A_i ∩ A_j| / C` of unstable-head sets with common size `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl OverlapMatrix {
    /// Mean of the off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let n = self.labels.len();
        if n < 2 {
            return None;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values[i][j];
                }
            }
        }
        Some(sum / (n * (n - 1)) as f64)
    }

    /// `Dataset,<label>...` header, then one row per profile.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Dataset");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn cross_task_overlap(profiles: &[HeadProfile]) -> Result<OverlapMatrix, StabilityError> {
    let first = profiles.first().ok_or(StabilityError::EmptyProfiles)?;
    let c = first.unstable().len();
    if c == 0 {
        return Err(StabilityError::EmptyProfiles);
    }
    for p in profiles {
        if (p.layers(), p.heads_per_layer()) != (first.layers(), first.heads_per_layer()) {
            return Err(StabilityError::DimensionMismatch(format!(
                "profile {:?} is {}x{}, expected {}x{}",
                p.task,
                p.layers(),
                p.heads_per_layer(),
                first.layers(),
                first.heads_per_layer()
            )));
        }
        if p.unstable().len() != c {
            return Err(StabilityError::CardinalityMismatch(c, p.unstable().len()));
        }
    }
    let values = profiles
        .iter()
        .map(|a| {
            profiles
                .iter()
                .map(|b| a.unstable().intersection(b.unstable()).count() as f64 / c as f64)
                .collect()
        })
        .collect();
    let labels = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.task.is_empty() {
                format!("profile{i}")
            } else {
                p.task.clone()
            }
        })
        .collect();
    Ok(OverlapMatrix { labels, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::HeadId;

    fn profile(task: &str, flat: impl IntoIterator<Item = usize>) -> HeadProfile {
        HeadProfile::from_unstable(
            "m",
            32,
            8,
            flat.into_iter().map(|i| HeadId::from_flat(i, 8)),
        )
        .unwrap()
        .with_task(task)
    }

    #[test]
    fn identical_profiles_are_all_ones() {
        let p = profile("a", 0..64);
        let m = cross_task_overlap(&[p.clone(), p]).unwrap();
        assert!(m.values.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn disjoint_profiles_have_zero_off_diagonal() {
        let m = cross_task_overlap(&[profile("a", 0..64), profile("b", 64..128)]).unwrap();
        assert_eq!(m.values, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn shared_52_of_64() {
        let m = cross_task_overlap(&[profile("a", 0..64), profile("b", 12..76)]).unwrap();
        assert_eq!(m.values[0][1], 0.8125);
        assert_eq!(m.values[1][0], 0.8125);
        assert_eq!(m.mean_off_diagonal(), Some(0.8125));
        assert_eq!(m.to_csv(), "Dataset,a,b\na,1,0.8125\nb,0.8125,1\n");
    }

    #[test]
    fn cardinality_mismatch() {
        assert!(matches!(
            cross_task_overlap(&[profile("a", 0..64), profile("b", 0..63)]),
            Err(StabilityError::CardinalityMismatch(64, 63))
        ));
    }
}
