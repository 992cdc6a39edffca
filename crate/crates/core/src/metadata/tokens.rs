use std::fmt;
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("token pool is empty")]
    Empty,
    /// Every token is cooling down; the earliest becomes usable at this instant.
    #[error("all tokens are rate limited until {0}")]
    WaitUntil(DateTime<Utc>),
}

#[derive(Clone, PartialEq, Eq)]
pub struct TokenLease {
    pub index: usize,
    pub token: String,
}

impl fmt::Debug for TokenLease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenLease").field("index", &self.index).field("token", &"<redacted>").finish()
    }
}

#[derive(Debug)]
struct Slot {
    token: String,
    cooling_until: Option<DateTime<Utc>>,
    window_start: Option<DateTime<Utc>>,
    window_used: u32,
}

#[derive(Debug)]
struct PoolState {
    slots: Vec<Slot>,
    cursor: usize,
}

/// Round-robin token pool. Access is serialized internally so one pool can
/// be shared by concurrent workers.
pub struct TokenPool {
    state: Mutex<PoolState>,
    hourly_budget: Option<u32>,
}

impl fmt::Debug for TokenPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenPool").field("len", &self.len()).finish()
    }
}

impl TokenPool {
    pub fn new<I, S>(tokens: I) -> Result<Self, TokenError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let slots: Vec<Slot> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t: &String| !t.trim().is_empty())
            .map(|token| Slot { token: token.trim().to_string(), cooling_until: None, window_start: None, window_used: 0 })
            .collect();
        if slots.is_empty() {
            return Err(TokenError::Empty);
        }
        Ok(TokenPool { state: Mutex::new(PoolState { slots, cursor: 0 }), hourly_budget: None })
    }

    /// Parses a comma-separated list such as the `GITHUB_TOKENS` variable.
    pub fn from_comma_separated(value: &str) -> Result<Self, TokenError> {
        Self::new(value.split(','))
    }

    /// Caps requests per token per rolling hour window; an exhausted token
    /// cools down until its window ends.
    pub fn with_hourly_budget(mut self, budget: u32) -> Self {
        self.hourly_budget = Some(budget.max(1));
        self
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_token(&self, now: DateTime<Utc>) -> Result<TokenLease, TokenError> {
        let mut state = self.state.lock().unwrap();
        let n = state.slots.len();
        if n == 0 {
            return Err(TokenError::Empty);
        }
        for offset in 0..n {
            let index = (state.cursor + offset) % n;
            let slot = &mut state.slots[index];
            if slot.cooling_until.is_some_and(|t| now < t) {
                continue;
            }
            slot.cooling_until = None;
            if let Some(budget) = self.hourly_budget {
                let window_open = slot.window_start.is_some_and(|s| now < s + Duration::hours(1));
                if !window_open {
                    slot.window_start = Some(now);
                    slot.window_used = 0;
                }
                if slot.window_used >= budget {
                    slot.cooling_until = slot.window_start.map(|s| s + Duration::hours(1));
                    continue;
                }
                slot.window_used += 1;
            }
            let token = slot.token.clone();
            state.cursor = (index + 1) % n;
            return Ok(TokenLease { index, token });
        }
        let earliest = state
            .slots
            .iter()
            .filter_map(|s| s.cooling_until)
            .min()
            .expect("every slot is cooling");
        Err(TokenError::WaitUntil(earliest))
    }

    /// Marks a token as rate limited until `reset`.
    pub fn mark_rate_limited(&self, index: usize, reset: DateTime<Utc>) {
        let mut state = self.state.lock().unwrap();
        if let Some(slot) = state.slots.get_mut(index) {
            slot.cooling_until = Some(slot.cooling_until.map_or(reset, |t| t.max(reset)));
        }
    }
}
