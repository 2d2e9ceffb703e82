use crate::error::{Error, Result};

/// Network sizes. The stuff classes of the class table bind the last
/// `stuff_count` memory slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channel width `C`.
    pub channels: usize,
    /// Global memory size `N`.
    pub memory: usize,
    /// Latent memory size `L`.
    pub latent: usize,
    pub num_blocks: usize,
    /// Number of real classes `D`; the class head adds one ∅ column.
    pub classes: usize,
    pub stuff_count: usize,
    pub d_max: f64,
    pub clip_len: usize,
    pub seed: u64,
    pub depth_enabled: bool,
    /// Standard deviation of the normal init for affine weights and memories.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            memory: 8,
            latent: 4,
            num_blocks: 2,
            classes: 3,
            stuff_count: 1,
            d_max: 80.0,
            clip_len: 2,
            seed: 0,
            depth_enabled: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.latent == 0 || self.classes == 0 || self.clip_len == 0 {
            return fail("C, L, D and T must be positive".into());
        }
        if self.memory <= self.stuff_count {
            return fail(format!(
                "global memory N={} must exceed stuff_count={}",
                self.memory, self.stuff_count
            ));
        }
        if self.stuff_count > self.classes {
            return fail(format!(
                "stuff_count={} exceeds class count D={}",
                self.stuff_count, self.classes
            ));
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return fail(format!("d_max must be positive, got {}", self.d_max));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn thing_slots(&self) -> usize {
        self.memory - self.stuff_count
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.channels
    }
}
