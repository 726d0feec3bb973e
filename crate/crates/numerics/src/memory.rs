//! Live-allocation accounting for tensor payloads.
//!
//! Every [`Tensor`](crate::Tensor) registers `8 * numel` bytes on creation and
//! releases them on drop. Counters are per thread: a measurement is only
//! meaningful when the tensors it covers are created and dropped on the
//! measuring thread. Peak memory reported by the benchmark harness is the
//! high-water mark of this counter, not OS resident memory.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

pub(crate) fn track(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn untrack(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Bytes of tensor payload currently alive on this thread.
pub fn live_bytes() -> i64 {
    LIVE.with(|l| l.get())
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> i64 {
    PEAK.with(|p| p.get())
}

/// Restart peak tracking from the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn peak_follows_allocations() {
        reset_peak();
        let base = live_bytes();
        {
            let _a = Tensor::zeros(&[1000]);
            assert_eq!(live_bytes() - base, 8000);
            let _b = _a.clone();
            assert_eq!(live_bytes() - base, 16000);
        }
        assert_eq!(live_bytes(), base);
        assert_eq!(peak_bytes() - base, 16000);
    }
}
