use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
    /// Longest the client will wait for a cooling token before giving up.
    pub max_token_wait: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(2),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
            max_token_wait: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BackoffError {
    #[error("attempt numbers start at 1")]
    ZeroAttempt,
    #[error("attempt {attempt} exceeds the retry bound of {max_attempts}")]
    BeyondBound { attempt: u32, max_attempts: u32 },
}

/// Delay to wait after failed attempt number `attempt`:
/// `base · factor^(attempt−1)`, saturating at the policy cap.
pub fn backoff_delay(attempt: u32, policy: &RetryPolicy) -> Result<Duration, BackoffError> {
    if attempt == 0 {
        return Err(BackoffError::ZeroAttempt);
    }
    if attempt > policy.max_attempts {
        return Err(BackoffError::BeyondBound { attempt, max_attempts: policy.max_attempts });
    }
    let cap = policy.max_delay.as_secs_f64();
    let raw = policy.base_delay.as_secs_f64() * policy.factor.max(1.0).powi(attempt as i32 - 1);
    Ok(Duration::from_secs_f64(raw.min(cap)))
}
