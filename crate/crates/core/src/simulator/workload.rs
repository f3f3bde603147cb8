use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::SimError;
use crate::synth::stream_rng;
use crate::types::Request;

const WORKLOAD_STREAM: u64 = 0x574f_524b;
const ARRIVAL_STREAM: u64 = 0x4152_5256;

/// Request lengths drawn uniformly from inclusive ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub requests: usize,
    pub prompt_tokens: (u32, u32),
    pub output_tokens: (u32, u32),
}

impl WorkloadSpec {
    pub fn fixed(requests: usize, prompt: u32, output: u32) -> Self {
        Self {
            requests,
            prompt_tokens: (prompt, prompt),
            output_tokens: (output, output),
        }
    }
}

pub fn offline_workload(spec: &WorkloadSpec, seed: u64) -> Result<Vec<Request>, SimError> {
    let (plo, phi) = spec.prompt_tokens;
    let (olo, ohi) = spec.output_tokens;
    if plo == 0 || olo == 0 || plo > phi || olo > ohi {
        return Err(SimError::BadWorkload(format!(
            "prompt {plo}..={phi}, output {olo}..={ohi}"
        )));
    }
    let mut rng = stream_rng(seed, &[WORKLOAD_STREAM]);
    Ok((0..spec.requests as u64)
        .map(|id| {
            let p = rng.random_range(plo..=phi);
            let o = rng.random_range(olo..=ohi);
            Request::new(id, p, o)
        })
        .collect())
}

/// Stamp Poisson arrival times at `rate` requests per second, in order.
pub fn poisson_arrivals(
    mut requests: Vec<Request>,
    rate: f64,
    seed: u64,
) -> Result<Vec<Request>, SimError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(SimError::BadRate(rate));
    }
    let exp = Exp::new(rate).map_err(|_| SimError::BadRate(rate))?;
    let mut rng = stream_rng(seed, &[ARRIVAL_STREAM]);
    let mut t = 0.0;
    for r in &mut requests {
        t += exp.sample(&mut rng);
        r.arrival_time_s = t;
    }
    Ok(requests)
}
