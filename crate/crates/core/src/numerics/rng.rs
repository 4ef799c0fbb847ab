use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded, platform-independent random stream.
///
/// ChaCha output is fully specified, so the same seed and call sequence give the
/// same samples everywhere. `counter` is the position inside the stream and is
/// enough (together with `seed` and `stream`) to restore the state.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Restores a state captured with [`RngState::counter`].
    pub fn restore(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.rng.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed ^ 0x9e37_79b9_7f4a_7c15, stream)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel sample, `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        let mut u = self.uniform();
        while u <= 0.0 {
            u = self.uniform();
        }
        -(-u.ln()).ln()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngState::new(7);
        let mut b = RngState::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        let mut c = RngState::new(8);
        assert_ne!(a.uniform(), c.uniform());
    }

    #[test]
    fn restore_resumes_stream() {
        let mut a = RngState::new(3);
        for _ in 0..17 {
            a.normal();
        }
        let mut b = RngState::restore(a.seed(), a.stream(), a.counter());
        for _ in 0..10 {
            assert_eq!(a.gumbel().to_bits(), b.gumbel().to_bits());
        }
    }

    #[test]
    fn gumbel_mean_is_euler_gamma() {
        let mut r = RngState::new(11);
        let n = 200_000;
        let m: f64 = (0..n).map(|_| r.gumbel()).sum::<f64>() / n as f64;
        assert!((m - 0.577_215_664_9).abs() < 0.01, "mean {m}");
    }
}
