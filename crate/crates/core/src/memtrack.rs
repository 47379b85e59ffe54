//! High-water accounting of tensor payload bytes.
//!
//! Every [`Tensor`](crate::Tensor) registers its payload on creation and
//! releases it on drop. The numbers are deterministic across platforms, unlike
//! process RSS. An optional budget turns an over-allocation into a panic with a
//! [`BudgetExceeded`] payload so callers can recover with `catch_unwind`.

use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LIMIT: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub requested: usize,
    pub in_use: usize,
    pub limit: usize,
}

pub(crate) fn register(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    let limit = LIMIT.load(Ordering::Relaxed);
    if limit != 0 && now > limit {
        CURRENT.fetch_sub(bytes, Ordering::Relaxed);
        std::panic::panic_any(BudgetExceeded {
            requested: bytes,
            in_use: now - bytes,
            limit,
        });
    }
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub(crate) fn release(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the bytes currently live.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Sets the payload budget in bytes; `None` removes it.
pub fn set_limit(limit: Option<usize>) {
    LIMIT.store(limit.unwrap_or(0), Ordering::Relaxed);
}
