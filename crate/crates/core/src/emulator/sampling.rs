use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmulatorError, ProductState, QuantumState};
use crate::par::{self, ExecPolicy};

/// Shots drawn from one ChaCha8 stream. Streams are indexed by chunk so the
/// counts do not depend on how chunks are spread over threads.
const SHOTS_PER_STREAM: u64 = 4096;

/// Normalization tolerance accepted by the sampler.
pub const SAMPLE_NORM_TOLERANCE: f64 = 1e-6;

/// Measurement histogram; bitstrings put atom 0 leftmost.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitstringCounts {
    pub counts: BTreeMap<String, u64>,
}

impl BitstringCounts {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn get(&self, bits: &str) -> u64 {
        self.counts.get(bits).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &BitstringCounts) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += v;
        }
    }
}

impl<const N: usize> From<[(&str, u64); N]> for BitstringCounts {
    fn from(items: [(&str, u64); N]) -> Self {
        BitstringCounts {
            counts: items.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// States that can be measured in the computational basis.
pub trait Measure {
    fn atoms(&self) -> usize;
    /// Largest deviation of a norm from one.
    fn norm_error(&self) -> f64;
    /// Draws `shots` bitstrings from one RNG stream.
    fn draw(&self, rng: &mut ChaCha8Rng, shots: u64, out: &mut BTreeMap<String, u64>);
}

fn bits(index: usize, n: usize) -> String {
    (0..n)
        .map(|i| if index >> (n - 1 - i) & 1 == 1 { '1' } else { '0' })
        .collect()
}

impl Measure for QuantumState {
    fn atoms(&self) -> usize {
        self.atoms
    }

    fn norm_error(&self) -> f64 {
        (self.norm_sqr() - 1.0).abs()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, shots: u64, out: &mut BTreeMap<String, u64>) {
        let mut cdf = Vec::with_capacity(self.amplitudes.len());
        let mut acc = 0.0;
        for a in &self.amplitudes {
            acc += a.norm_sqr();
            cdf.push(acc);
        }
        let mut hist = vec![0u64; cdf.len()];
        for _ in 0..shots {
            let u = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            hist[k] += 1;
        }
        for (k, &c) in hist.iter().enumerate() {
            if c > 0 {
                *out.entry(bits(k, self.atoms)).or_insert(0) += c;
            }
        }
    }
}

impl Measure for ProductState {
    fn atoms(&self) -> usize {
        self.qubit_states.len()
    }

    fn norm_error(&self) -> f64 {
        self.qubit_states
            .iter()
            .map(|(g, r)| (g.norm_sqr() + r.norm_sqr() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, shots: u64, out: &mut BTreeMap<String, u64>) {
        let p: Vec<f64> = self
            .qubit_states
            .iter()
            .map(|(g, r)| r.norm_sqr() / (g.norm_sqr() + r.norm_sqr()))
            .collect();
        let mut s = String::with_capacity(p.len());
        for _ in 0..shots {
            s.clear();
            for &pr in &p {
                s.push(if rng.random::<f64>() < pr { '1' } else { '0' });
            }
            match out.get_mut(s.as_str()) {
                Some(c) => *c += 1,
                None => {
                    out.insert(s.clone(), 1);
                }
            }
        }
    }
}

/// Draws `shots` independent computational-basis measurements.
///
/// Deterministic in `(state, shots, seed)`: shots are split into fixed-size
/// chunks, chunk `c` drawing from ChaCha8 stream `c` of `seed`.
pub fn sample_counts<S: Measure + Sync>(
    state: &S,
    shots: u64,
    seed: u64,
) -> Result<BitstringCounts, EmulatorError> {
    sample_counts_with(state, shots, seed, ExecPolicy::default())
}

pub fn sample_counts_with<S: Measure + Sync>(
    state: &S,
    shots: u64,
    seed: u64,
    policy: ExecPolicy,
) -> Result<BitstringCounts, EmulatorError> {
    if shots == 0 {
        return Err(EmulatorError::Domain("shots must be at least 1".into()));
    }
    let err = state.norm_error();
    if !(err <= SAMPLE_NORM_TOLERANCE) {
        return Err(EmulatorError::Domain(format!(
            "state is not normalized (deviation {err:.3e})"
        )));
    }
    let chunks = shots.div_ceil(SHOTS_PER_STREAM);
    let partial = par::map_range(policy, chunks as usize, |c| {
        let c = c as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c);
        let n = SHOTS_PER_STREAM.min(shots - c * SHOTS_PER_STREAM);
        let mut out = BTreeMap::new();
        state.draw(&mut rng, n, &mut out);
        out
    });
    let mut counts = BitstringCounts::default();
    for part in partial {
        for (k, v) in part {
            *counts.counts.entry(k).or_insert(0) += v;
        }
    }
    Ok(counts)
}
