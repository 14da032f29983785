//! Scoped worker pools for independent units of work (classes, epochs).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `f(0..n)` on at most `threads` workers and returns the results in
/// index order. Each unit must be independent, so the output does not depend
/// on the thread count. The first error (by index) is returned.
pub fn map_indexed<T, E, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let workers = threads.max(1).min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, E>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every index ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_thread_count() {
        for threads in [1, 2, 3, 8] {
            let out: Result<Vec<usize>, ()> = map_indexed(17, threads, |i| Ok(i * i));
            assert_eq!(out.unwrap(), (0..17).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn first_error_by_index_wins() {
        let out: Result<Vec<usize>, usize> = map_indexed(10, 4, |i| if i % 3 == 2 { Err(i) } else { Ok(i) });
        assert_eq!(out, Err(2));
        let empty: Result<Vec<u8>, ()> = map_indexed(0, 4, |_| Ok(0));
        assert!(empty.unwrap().is_empty());
    }
}
