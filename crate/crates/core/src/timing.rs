//! Small helpers shared by the benchmark entry points.

use std::time::Instant;

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub label: String,
    pub threads: usize,
    pub millis: f64,
}

impl TimingRow {
    pub fn new(label: impl Into<String>, threads: usize, millis: f64) -> Self {
        TimingRow {
            label: label.into(),
            threads,
            millis,
        }
    }
}

/// Median of the samples; 0 for an empty slice.
pub fn median_millis(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs `f` `warmup + reps` times and returns the wall-clock of the last
/// `reps` runs in milliseconds.
pub fn time_reps<F: FnMut()>(warmup: usize, reps: usize, mut f: F) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect()
}

/// FNV-1a over a byte stream, continuing from `state`.
pub fn fnv1a(state: u64, bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(state, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
