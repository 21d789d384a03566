//! Sampling statistics of the reservoir buffer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use staer_core::replay::{ReplayBuffer, ReplayEntry, StoredLogits};
use staer_oracles::{chi_square_uniform, family_z_threshold, proportion_sigma};

fn entry(i: usize) -> ReplayEntry {
    ReplayEntry {
        x: Vec::new(),
        y: i,
        logits: StoredLogits::None,
        task: 0,
    }
}

/// How often each of `m` stream items is still held after streaming all of them.
fn retention_counts(b: usize, m: usize, streams: u64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; m];
    for _ in 0..streams {
        let mut buf = ReplayBuffer::new(b);
        for i in 0..m {
            buf.insert(entry(i), &mut rng);
        }
        for e in buf.entries() {
            counts[e.y] += 1;
        }
    }
    counts
}

#[test]
fn retention_probability_is_capacity_over_stream_length() {
    let streams = 100_000;
    for (b, m) in [(1, 10), (5, 50), (20, 100)] {
        let counts = retention_counts(b, m, streams, 42 + b as u64);
        let p = b as f64 / m as f64;
        let sigma = proportion_sigma(p, streams);
        // 3 sigma for the check as a whole, spread over the M items.
        let z = family_z_threshold(3.0, m);
        for (i, &c) in counts.iter().enumerate() {
            let est = c as f64 / streams as f64;
            assert!(
                (est - p).abs() <= z * sigma,
                "B={b} M={m} item {i}: {est} vs {p} (sigma {sigma})"
            );
        }
        let (_, pvalue) = chi_square_uniform(&counts);
        assert!(pvalue > 1e-3, "B={b} M={m}: chi-square p = {pvalue}");
    }
}

#[test]
fn short_streams_are_kept_whole() {
    let counts = retention_counts(8, 5, 100, 0);
    assert!(counts.iter().all(|&c| c == 100));
}

#[test]
fn uniform_sampling_from_buffer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut buf = ReplayBuffer::new(10);
    for i in 0..10 {
        buf.insert(entry(i), &mut rng);
    }
    let mut counts = [0u64; 10];
    for idx in buf.sample(100_000, &mut rng).unwrap() {
        counts[idx] += 1;
    }
    let (_, pvalue) = chi_square_uniform(&counts);
    assert!(pvalue > 1e-3);
}

#[test]
fn reserved_slots_fill_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buf = ReplayBuffer::new(3);
    let slots: Vec<_> = (0..2).map(|_| buf.reserve(&mut rng).unwrap()).collect();
    assert_eq!(slots, vec![0, 1]);
    assert!(buf.place(1, entry(1)).is_err());
    buf.place(0, entry(0)).unwrap();
    buf.place(1, entry(1)).unwrap();
    assert_eq!(buf.len(), 2);
    assert_eq!(buf.seen(), 2);
}
