//! Order-preserving thread fan-out for embarrassingly parallel batches.
//!
//! Whatever the worker count, results come back in input order and every
//! per-item computation is self-contained, so outputs are byte-identical
//! to a sequential run. The worker count defaults to the machine's
//! available parallelism and is capped by the `SHIFTLAB_THREADS`
//! environment variable.

/// Worker count: `min(available_parallelism, SHIFTLAB_THREADS)`, at least 1.
pub fn thread_count() -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("SHIFTLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(hw);
    hw.min(cap).max(1)
}

/// Map `f` over `items`, fanning out across `thread_count()` scoped
/// threads in contiguous index ranges; the result vector preserves input
/// order exactly.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = thread_count().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(|it| f(it)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut out: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(|it| f(it)).collect::<Vec<R>>()))
            .collect();
        out = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
    });
    out.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let items: Vec<usize> = (0..1000).collect();
        let got = parallel_map(&items, |&i| i * i);
        let want: Vec<usize> = items.iter().map(|&i| i * i).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn empty_input_is_fine() {
        let items: Vec<u8> = vec![];
        assert!(parallel_map(&items, |&b| b).is_empty());
    }

    #[test]
    fn worker_count_is_at_least_one() {
        assert!(thread_count() >= 1);
    }
}
