//! Bounded worker pool for prompt-level fan-out.
//!
//! Results are keyed by input index, so the output order (and anything
//! aggregated from it) is independent of thread scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Apply `f` to every item with at most `workers` threads, returning results
/// in input order. `workers <= 1` runs inline.
pub fn bounded_map<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                slots.lock().expect("worker panicked holding slot lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked holding slot lock")
        .into_iter()
        .map(|slot| slot.expect("every index visited"))
        .collect()
}
