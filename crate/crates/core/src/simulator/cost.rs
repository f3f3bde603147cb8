use crate::config::Config;

/// Step durations: a fixed overhead plus a term linear in the work done.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub overhead_s: f64,
    pub attn_s_per_byte: f64,
    pub prefill_s_per_token: f64,
}

impl CostModel {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            overhead_s: cfg.step_overhead_s,
            attn_s_per_byte: cfg.attn_s_per_byte,
            prefill_s_per_token: cfg.prefill_s_per_token,
        }
    }

    /// One decode step reading `touched_bytes` of KV and metadata.
    pub fn decode_step(&self, touched_bytes: u64) -> f64 {
        self.overhead_s + self.attn_s_per_byte * touched_bytes as f64
    }

    pub fn prefill_step(&self, prompt_tokens: u64) -> f64 {
        self.overhead_s + self.prefill_s_per_token * prompt_tokens as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_in_bytes() {
        let c = CostModel::from_config(&Config::default());
        let a = c.decode_step(1 << 20);
        let b = c.decode_step(2 << 20);
        assert!((b - a - (a - c.overhead_s)).abs() < 1e-15);
        assert!(c.decode_step(0) > 0.0);
        assert!((c.prefill_step(1000) - (0.010 + 0.04)).abs() < 1e-12);
    }
}
