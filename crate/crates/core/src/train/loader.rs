use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `len` consecutive epochs of trace `trace` starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subsequence {
    pub trace: usize,
    pub start: usize,
    pub len: usize,
}

impl Subsequence {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub subsequences: Vec<Subsequence>,
}

/// One training epoch of batches: every trace is cut at a random offset in
/// `[0, len)` into whole subsequences of `len` epochs, which are shuffled
/// across traces and grouped `batch_size` at a time (the last batch may be
/// short). Traces too short to yield a subsequence are reported in the
/// returned warnings.
pub fn sequential_loader(
    trace_lengths: &[usize],
    len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Batch>, Vec<String>) {
    let mut subs = Vec::new();
    let mut warnings = Vec::new();
    for (trace, &n) in trace_lengths.iter().enumerate() {
        let offset = rng.random_range(0..len.max(1));
        let count = n.saturating_sub(offset) / len.max(1);
        if count == 0 {
            warnings.push(format!(
                "trace {trace}: {n} epochs after offset {offset} is shorter than {len}; dropped"
            ));
            continue;
        }
        subs.extend((0..count).map(|i| Subsequence {
            trace,
            start: offset + i * len,
            len,
        }));
    }
    subs.shuffle(rng);
    let batches = subs
        .chunks(batch_size.max(1))
        .map(|c| Batch {
            subsequences: c.to_vec(),
        })
        .collect();
    (batches, warnings)
}

/// Start offsets, within a subsequence, of the sliding `horizon + 1` windows.
pub fn horizon_starts(len: usize, horizon: usize) -> std::ops::Range<usize> {
    0..(len + 1).saturating_sub(horizon + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_offset_splits_evenly() {
        // Find a seed whose single offset draw is zero.
        let seed = (0..10_000u64)
            .find(|s| ChaCha8Rng::seed_from_u64(*s).random_range(0..60usize) == 0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, w) = sequential_loader(&[120], 60, 8, &mut rng);
        assert!(w.is_empty());
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].subsequences.len(), 2);
    }

    #[test]
    fn subsequences_do_not_overlap_and_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lengths = [300, 250, 61, 10];
        let (batches, warnings) = sequential_loader(&lengths, 60, 3, &mut rng);
        assert!(warnings.iter().any(|w| w.starts_with("trace 3")));
        let mut all: Vec<Subsequence> = batches.iter().flat_map(|b| b.subsequences.clone()).collect();
        assert!(batches.iter().all(|b| b.subsequences.len() <= 3));
        all.sort_by_key(|s| (s.trace, s.start));
        for w in all.windows(2) {
            if w[0].trace == w[1].trace {
                assert!(w[0].start + w[0].len <= w[1].start);
            }
        }
        assert!(all.iter().all(|s| s.start + s.len <= lengths[s.trace]));
    }

    #[test]
    fn every_epoch_is_covered_over_many_seeds() {
        let lengths = [200, 157];
        let mut seen: Vec<Vec<bool>> = lengths.iter().map(|&n| vec![false; n]).collect();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (batches, _) = sequential_loader(&lengths, 60, 4, &mut rng);
            for s in batches.iter().flat_map(|b| &b.subsequences) {
                for k in s.range() {
                    seen[s.trace][k] = true;
                }
            }
        }
        // Tail epochs past the last whole subsequence need offset n mod 60.
        assert!(seen.iter().all(|v| v.iter().all(|x| *x)));
    }

    #[test]
    fn horizons_are_contiguous_in_time() {
        let t = crate::sim::synthesize_trace(&crate::sim::ScenarioConfig {
            duration: 130.0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (batches, _) = sequential_loader(&[t.epochs.len()], 60, 2, &mut rng);
        for s in batches.iter().flat_map(|b| &b.subsequences) {
            for h in horizon_starts(s.len, 15) {
                let w = &t.epochs[s.start + h..s.start + h + 16];
                for p in w.windows(2) {
                    let dt = p[1].timestamp - p[0].timestamp;
                    assert!(dt > 0.0 && dt <= 1.0 + 1e-9);
                }
            }
        }
        assert_eq!(horizon_starts(60, 15).len(), 45);
        assert_eq!(horizon_starts(10, 15).len(), 0);
    }
}
