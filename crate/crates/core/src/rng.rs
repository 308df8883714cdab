//! Random streams.
//!
//! Completion draws use one ChaCha stream per user. The uniform for user `n`
//! at slot `t` sits at a fixed position of that stream, so every policy run
//! with the same seed sees the same per-slot draws.

use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of Bernoulli outcomes.
pub trait Coin {
    fn flip(&mut self, p: f64) -> bool;
}

impl<R: RngCore> Coin for R {
    fn flip(&mut self, p: f64) -> bool {
        self.gen::<f64>() < p
    }
}

/// Answers "does user `n`'s task complete at slot `t` with probability `p`".
pub trait CompletionSource {
    fn completes(&mut self, user: usize, t: u64, p: f64) -> bool;
}

/// Per-user ChaCha streams derived from one seed.
#[derive(Clone, Debug)]
pub struct UserStreams {
    streams: Vec<ChaCha8Rng>,
}

impl UserStreams {
    pub fn new(seed: u64, num_users: usize) -> Self {
        let base = ChaCha8Rng::seed_from_u64(seed);
        let streams = (0..num_users)
            .map(|n| {
                let mut r = base.clone();
                r.set_stream(n as u64);
                r
            })
            .collect();
        UserStreams { streams }
    }

    /// The uniform draw of user `n` at slot `t`.
    pub fn uniform(&mut self, user: usize, t: u64) -> f64 {
        let r = &mut self.streams[user];
        r.set_word_pos(u128::from(t) * 2);
        r.gen::<f64>()
    }
}

impl CompletionSource for UserStreams {
    fn completes(&mut self, user: usize, t: u64, p: f64) -> bool {
        self.uniform(user, t) < p
    }
}

/// Completion outcomes fixed in advance, for golden traces.
#[derive(Clone, Debug, Default)]
pub struct Scripted {
    events: HashSet<(usize, u64)>,
    default: bool,
}

impl Scripted {
    pub fn never() -> Self {
        Scripted::default()
    }

    pub fn always() -> Self {
        Scripted { events: HashSet::new(), default: true }
    }

    /// Completion fires for `user` exactly at the listed slots.
    pub fn at(user: usize, slots: &[u64]) -> Self {
        Scripted { events: slots.iter().map(|&t| (user, t)).collect(), default: false }
    }
}

impl Coin for Scripted {
    fn flip(&mut self, _p: f64) -> bool {
        self.default
    }
}

impl CompletionSource for Scripted {
    fn completes(&mut self, user: usize, t: u64, _p: f64) -> bool {
        self.default || self.events.contains(&(user, t))
    }
}

/// Adapts a `CompletionSource` to the kernel's `Coin` for one user and slot.
pub struct SlotCoin<'a, S: CompletionSource + ?Sized> {
    pub source: &'a mut S,
    pub user: usize,
    pub t: u64,
}

impl<S: CompletionSource + ?Sized> Coin for SlotCoin<'_, S> {
    fn flip(&mut self, p: f64) -> bool {
        self.source.completes(self.user, self.t, p)
    }
}

/// Stream for policy-side randomness, kept apart from the user streams.
pub fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    r.set_stream(u64::MAX);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_draws_are_position_addressed() {
        let mut a = UserStreams::new(7, 3);
        let mut b = UserStreams::new(7, 3);
        let x = a.uniform(1, 10);
        b.uniform(1, 3);
        b.uniform(2, 10);
        assert_eq!(x, b.uniform(1, 10));
        assert_ne!(a.uniform(0, 10), a.uniform(1, 10));
    }
}
