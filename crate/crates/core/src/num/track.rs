//! Allocation accounting for tensor buffers.
//!
//! Every freshly allocated tensor buffer reports its element count here.
//! [`with_tracking`] observes those reports for the duration of a closure,
//! which is how the memory contract of the optimized aggregation path is
//! checked: the naive route materializes `d x d` intermediates, the
//! optimized route must never allocate one.
//!
//! Tracking needs thread-local state and is only active with the `std`
//! feature; without it `with_tracking` runs the closure and reports empty
//! stats.

/// Summary of tensor-buffer allocations observed inside a tracking scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocStats {
    /// Number of buffer allocations.
    pub allocations: usize,
    /// Total elements allocated.
    pub total_elems: usize,
    /// Largest single allocation, in elements.
    pub largest_elems: usize,
    /// Allocations with at least `threshold_elems` elements.
    pub count_at_threshold: usize,
    /// Threshold used for `count_at_threshold`.
    pub threshold_elems: usize,
}

impl AllocStats {
    /// Largest single allocation in bytes (8 bytes per element).
    pub fn largest_bytes(&self) -> usize {
        self.largest_elems * core::mem::size_of::<f64>()
    }
}

#[cfg(feature = "std")]
mod imp {
    use super::AllocStats;
    use std::cell::RefCell;

    thread_local! {
        static SCOPE: RefCell<Option<AllocStats>> = const { RefCell::new(None) };
    }

    pub(crate) fn record(elems: usize) {
        SCOPE.with(|s| {
            if let Some(stats) = s.borrow_mut().as_mut() {
                stats.allocations += 1;
                stats.total_elems += elems;
                stats.largest_elems = stats.largest_elems.max(elems);
                if elems >= stats.threshold_elems {
                    stats.count_at_threshold += 1;
                }
            }
        });
    }

    struct ScopeGuard {
        previous: Option<AllocStats>,
    }

    impl Drop for ScopeGuard {
        fn drop(&mut self) {
            SCOPE.with(|s| {
                *s.borrow_mut() = self.previous.take();
            });
        }
    }

    /// Run `f` while counting tensor-buffer allocations on this thread.
    ///
    /// `threshold_elems` selects which allocations count towards
    /// [`AllocStats::count_at_threshold`] (use `d * d` to detect dense
    /// per-visit adjacency intermediates). Scopes nest; an inner scope
    /// shadows the outer one for its duration.
    pub fn with_tracking<R>(threshold_elems: usize, f: impl FnOnce() -> R) -> (R, AllocStats) {
        let previous = SCOPE.with(|s| {
            s.borrow_mut().replace(AllocStats {
                threshold_elems,
                ..AllocStats::default()
            })
        });
        let guard = ScopeGuard { previous };
        let result = f();
        let stats = SCOPE.with(|s| s.borrow().unwrap_or_default());
        drop(guard);
        (result, stats)
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    use super::AllocStats;

    pub(crate) fn record(_elems: usize) {}

    /// No-op without `std`: runs the closure and reports empty stats.
    pub fn with_tracking<R>(threshold_elems: usize, f: impl FnOnce() -> R) -> (R, AllocStats) {
        let result = f();
        (
            result,
            AllocStats {
                threshold_elems,
                ..AllocStats::default()
            },
        )
    }
}

pub(crate) use imp::record;
pub use imp::with_tracking;
