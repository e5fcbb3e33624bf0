//! Deterministic data parallelism over row ranges. Each worker owns a
//! disjoint output range and results are merged in index order, so the
//! output never depends on the thread count. `IDFREE_THREADS` caps the pool.

pub fn max_threads() -> usize {
    if let Ok(v) = std::env::var("IDFREE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Applies `work` to contiguous index ranges covering 0..n and returns the
/// per-index results in order.
pub fn map_ranges<R: Send>(
    n: usize,
    min_chunk: usize,
    work: impl Fn(std::ops::Range<usize>) -> Vec<R> + Sync,
) -> Vec<R> {
    if n == 0 {
        return Vec::new();
    }
    let threads = max_threads().min(n.div_ceil(min_chunk.max(1))).max(1);
    if threads == 1 {
        return work(0..n);
    }
    let chunk = n.div_ceil(threads);
    let mut pieces: Vec<Option<Vec<R>>> = (0..threads).map(|_| None).collect();
    std::thread::scope(|scope| {
        let work = &work;
        let mut handles = Vec::new();
        for (t, slot) in pieces.iter_mut().enumerate() {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(n);
            if lo >= hi {
                *slot = Some(Vec::new());
                continue;
            }
            handles.push((slot, scope.spawn(move || work(lo..hi))));
        }
        for (slot, handle) in handles {
            *slot = Some(handle.join().expect("worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(n);
    for piece in pieces {
        out.extend(piece.expect("filled above"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_merge_matches_serial() {
        let serial = map_ranges(100, 1000, |r| r.map(|i| i * i).collect::<Vec<_>>());
        let parallel = map_ranges(100, 1, |r| r.map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), 100);
        assert_eq!(serial[7], 49);
    }
}
