//! Run-wide counters exposed through the metrics endpoint.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

macro_rules! counters {
    ($($(#[$doc:meta])* $name:ident),* $(,)?) => {
        /// Monotonic counters updated by request handlers and the scheduler.
        #[derive(Debug, Default)]
        pub struct Counters {
            $($(#[$doc])* pub $name: AtomicU64,)*
        }

        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
        pub struct CounterSnapshot {
            $(pub $name: u64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }
        }

        impl CounterSnapshot {
            pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
                CounterSnapshot {
                    $($name: self.$name - earlier.$name,)*
                }
            }
        }
    };
}

counters! {
    requests,
    response_cache_hits,
    admitted,
    /// Admission attempts that found the budget full.
    deferred,
    rejected,
    timeouts,
    completed,
    failed,
    iterations,
    prefill_chunks,
    /// Iterations whose prefill entries were held back by the high-water mark.
    prefill_deferred_iterations,
    grouped_followers,
    grouped_cells,
    /// Prompt positions restored from the radix or a session.
    restored_cells,
    spec_proposed,
    spec_accepted,
    decode_passes,
    early_stops,
    tool_calls,
    tool_rejections,
    radix_saves,
    radix_saved_cells,
    radix_save_rejected,
    radix_evicted_cells,
    kv_exhausted,
}

impl Counters {
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_diff() {
        let c = Counters::default();
        Counters::bump(&c.requests);
        let a = c.snapshot();
        Counters::add(&c.requests, 4);
        Counters::bump(&c.completed);
        let d = c.snapshot().since(&a);
        assert_eq!((d.requests, d.completed, d.failed), (4, 1, 0));
    }
}
