//! Guarded allocation metering.
//!
//! The meter tracks the logical size of live tensors in bytes. It is a
//! bookkeeping device, not an allocator: callers request a guard for a
//! number of bytes, hold it for as long as the corresponding buffer is
//! alive, and drop it to release the accounting. A meter may carry a hard
//! budget; a request that would push the live total past the budget fails
//! with [`OutOfBudget`] and leaves the meter untouched.
//!
//! Invariants maintained at all times:
//!
//! * `0 <= current_bytes <= peak_bytes`
//! * `peak_bytes` is non-decreasing between calls to [`AllocationMeter::reset_peak`]
//! * when a budget is set, `current_bytes <= budget_bytes`
//!
//! Alongside the global counters the meter keeps the same statistics per
//! allocation category ([`Tag`]), so tests can assert, for example, that the
//! attention matrices of one layer account for exactly `h * N^2 * w` bytes,
//! or that recurrent state storage does not grow with sequence length.

use std::sync::{Arc, Mutex};

/// Category of a metered allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    /// Model parameters and other per-model constant buffers.
    Params,
    /// General activations (projections, hidden streams, logits).
    Activation,
    /// Materialised attention matrices.
    Attention,
    /// Recurrent state carried across timesteps by the selective scan.
    State,
}

impl Tag {
    const COUNT: usize = 4;

    fn index(self) -> usize {
        match self {
            Tag::Params => 0,
            Tag::Activation => 1,
            Tag::Attention => 2,
            Tag::State => 3,
        }
    }
}

/// Error returned when a guarded allocation would exceed the meter budget.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("allocation of {requested} bytes would exceed budget ({current} of {budget} bytes in use)")]
pub struct OutOfBudget {
    pub requested: u64,
    pub current: u64,
    pub budget: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    current: u64,
    peak: u64,
}

impl Counters {
    fn add(&mut self, bytes: u64) {
        self.current += bytes;
        if self.current > self.peak {
            self.peak = self.current;
        }
    }

    fn sub(&mut self, bytes: u64) {
        debug_assert!(self.current >= bytes, "meter release exceeds live total");
        self.current = self.current.saturating_sub(bytes);
    }
}

#[derive(Debug, Default)]
struct MeterState {
    global: Counters,
    by_tag: [Counters; Tag::COUNT],
}

/// Thread-safe allocation meter. Shared via `Arc`; all updates go through
/// an internal mutex so concurrent benchmark runs never observe a torn
/// current/peak pair.
#[derive(Debug)]
pub struct AllocationMeter {
    state: Mutex<MeterState>,
    budget: Option<u64>,
}

impl AllocationMeter {
    /// A meter with a hard budget in bytes.
    pub fn with_budget(budget_bytes: u64) -> Arc<Self> {
        Arc::new(AllocationMeter {
            state: Mutex::new(MeterState::default()),
            budget: Some(budget_bytes),
        })
    }

    /// A meter that only observes usage and never rejects an allocation.
    pub fn unbounded() -> Arc<Self> {
        Arc::new(AllocationMeter {
            state: Mutex::new(MeterState::default()),
            budget: None,
        })
    }

    /// Registers `bytes` of live storage under `tag`. Fails without side
    /// effects if a budget is set and would be exceeded. The returned guard
    /// releases the bytes when dropped.
    pub fn guarded_alloc(
        self: &Arc<Self>,
        bytes: u64,
        tag: Tag,
    ) -> Result<AllocGuard, OutOfBudget> {
        let mut state = self.state.lock().expect("meter mutex poisoned");
        if let Some(budget) = self.budget {
            if state.global.current.saturating_add(bytes) > budget {
                return Err(OutOfBudget {
                    requested: bytes,
                    current: state.global.current,
                    budget,
                });
            }
        }
        state.global.add(bytes);
        state.by_tag[tag.index()].add(bytes);
        Ok(AllocGuard {
            meter: Arc::clone(self),
            bytes,
            tag,
        })
    }

    /// Sets the peak (global and per-tag) back to the respective current
    /// live totals.
    pub fn reset_peak(&self) {
        let mut state = self.state.lock().expect("meter mutex poisoned");
        state.global.peak = state.global.current;
        for tag in state.by_tag.iter_mut() {
            tag.peak = tag.current;
        }
    }

    pub fn current_bytes(&self) -> u64 {
        self.state.lock().expect("meter mutex poisoned").global.current
    }

    pub fn peak_bytes(&self) -> u64 {
        self.state.lock().expect("meter mutex poisoned").global.peak
    }

    pub fn budget_bytes(&self) -> Option<u64> {
        self.budget
    }

    pub fn tag_current(&self, tag: Tag) -> u64 {
        self.state.lock().expect("meter mutex poisoned").by_tag[tag.index()].current
    }

    pub fn tag_peak(&self, tag: Tag) -> u64 {
        self.state.lock().expect("meter mutex poisoned").by_tag[tag.index()].peak
    }

    fn release(&self, bytes: u64, tag: Tag) {
        let mut state = self.state.lock().expect("meter mutex poisoned");
        state.global.sub(bytes);
        state.by_tag[tag.index()].sub(bytes);
    }
}

/// RAII guard for a metered allocation; dropping it returns the bytes to
/// the meter. Guards are deliberately not clonable — each corresponds to
/// exactly one live buffer.
#[derive(Debug)]
pub struct AllocGuard {
    meter: Arc<AllocationMeter>,
    bytes: u64,
    tag: Tag,
}

impl AllocGuard {
    #[must_use]
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Drop for AllocGuard {
    fn drop(&mut self) {
        self.meter.release(self.bytes, self.tag);
    }
}
