//! Process-global allocation meter.
//!
//! Counts live tensor elements (dtype-agnostic) so peak memory can be compared
//! across mechanisms without depending on allocator or process RSS behaviour.
//! Every `Tensor` registers its element count on construction and releases it
//! on drop; the peak is monotone between resets.

use std::sync::atomic::{AtomicI64, Ordering};

static CURRENT: AtomicI64 = AtomicI64::new(0);
static PEAK: AtomicI64 = AtomicI64::new(0);

pub(crate) fn register(elements: usize) {
    let now = CURRENT.fetch_add(elements as i64, Ordering::SeqCst) + elements as i64;
    PEAK.fetch_max(now, Ordering::SeqCst);
}

pub(crate) fn release(elements: usize) {
    CURRENT.fetch_sub(elements as i64, Ordering::SeqCst);
}

/// Live tensor elements right now.
pub fn live_elements() -> usize {
    CURRENT.load(Ordering::SeqCst).max(0) as usize
}

/// Highest live element count observed since the last reset.
pub fn peak_live_elements() -> usize {
    PEAK.load(Ordering::SeqCst).max(0) as usize
}

/// Resets the peak to the current live count.
pub fn reset_peak() {
    let now = CURRENT.load(Ordering::SeqCst);
    PEAK.store(now, Ordering::SeqCst);
}
