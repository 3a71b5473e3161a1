//! Deterministic pseudo-random streams.
//!
//! Every stochastic element in the lab (agent baseline draws, corpus filler
//! selection, per-trial counterfactual reruns) pulls from a [`DeterministicRng`]
//! derived from explicit integer coordinates, so a run is a pure function of
//! its seed on every platform. The generator is splitmix64.

/// Splitmix64 stream seeded from an ordered list of coordinates.
///
/// Streams derived from distinct coordinate lists are independent for all
/// practical purposes; identical coordinates always yield identical streams.
#[derive(Debug, Clone)]
pub struct DeterministicRng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DeterministicRng {
    pub fn new(seed: u64) -> Self {
        Self::from_parts(&[seed])
    }

    /// Derive a stream from ordered coordinates, e.g.
    /// `(scenario seed, removal index, trial index)`.
    pub fn from_parts(parts: &[u64]) -> Self {
        let mut state = 0x51_7c_c1_b7_27_22_0a_95u64;
        for &p in parts {
            state ^= p.wrapping_mul(GOLDEN_GAMMA).rotate_left(17);
            splitmix64(&mut state);
            state = state.wrapping_add(p);
        }
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        // 53 mantissa bits of the raw draw.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli draw. `p = 0.0` is always false, `p = 1.0` always true.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_parts_same_stream() {
        let mut a = DeterministicRng::from_parts(&[7, 3, 1]);
        let mut b = DeterministicRng::from_parts(&[7, 3, 1]);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_parts_diverge() {
        let mut a = DeterministicRng::from_parts(&[7, 3, 1]);
        let mut b = DeterministicRng::from_parts(&[7, 3, 2]);
        let matches = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(matches < 16);
    }

    #[test]
    fn bernoulli_degenerate_probabilities() {
        let mut rng = DeterministicRng::new(42);
        for _ in 0..256 {
            assert!(!rng.bernoulli(0.0));
            assert!(rng.bernoulli(1.0));
        }
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut rng = DeterministicRng::new(9);
        for _ in 0..1024 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }
}
