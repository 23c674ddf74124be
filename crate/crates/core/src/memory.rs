//! Allocation accounting for peak-memory measurements.
//!
//! [`CountingAlloc`] wraps the system allocator and keeps per-thread live and
//! peak byte counters. Measurements therefore only see allocations made on
//! the measuring thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

pub struct CountingAlloc;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn track(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

// SAFETY: every call is forwarded unchanged to `System`; the counters only
// touch const-initialized thread-locals, which never allocate.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            track(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            track(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        track(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            track(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Bytes currently allocated by this thread (net of frees).
pub fn live_bytes() -> isize {
    LIVE.with(Cell::get)
}

/// Runs `f` and returns its result with the peak number of bytes it held
/// above the live level at entry.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let start = live_bytes();
    let saved_peak = PEAK.with(|p| p.replace(start));
    let out = f();
    let peak = PEAK.with(|p| p.get());
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, (peak - start).max(0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_covers_a_temporary_buffer() {
        let (_, peak) = measure_peak(|| {
            let v = vec![0u8; 1 << 20];
            std::hint::black_box(&v);
        });
        assert!(peak >= 1 << 20, "{peak}");
    }

    #[test]
    fn nested_measurements_see_their_own_peak() {
        let (inner, outer) = measure_peak(|| {
            let a = vec![0u8; 4096];
            std::hint::black_box(&a);
            drop(a);
            measure_peak(|| std::hint::black_box(vec![0u8; 1024])).1
        });
        assert!((1024..4096).contains(&inner));
        assert!(outer >= 4096);
    }
}
