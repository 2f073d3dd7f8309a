use std::time::Duration;

/// Bounded retry with a doubling delay between attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub limit: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub fn new(limit: u32, base_delay_ms: u64) -> Self {
        RetryPolicy {
            limit,
            base_delay: Duration::from_millis(base_delay_ms),
        }
    }

    /// Delay to wait before 1-based `attempt`. The first attempt goes out
    /// immediately, attempt k >= 2 waits `base * 2^(k-2)`.
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u32.checked_shl(attempt - 2).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor)
    }

    pub fn wait_before(&self, attempt: u32) {
        let d = self.delay_before(attempt);
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}
