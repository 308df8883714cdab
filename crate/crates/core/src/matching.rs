//! Maximum-weight assignment of users to capacitated server types, with
//! minimal dual prices.
//!
//! Users take at most one unit, type `k` at most `capacity[k]` units, and only
//! pairs with positive weight are ever matched. One type per server gives the
//! ordinary bipartite assignment problem.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const EPS: f64 = 1e-12;

/// Row-major `users x types` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub users: usize,
    pub types: usize,
    pub data: Vec<f64>,
}

impl Weights {
    pub fn new(users: usize, types: usize) -> Self {
        Weights { users, types, data: vec![0.0; users * types] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let types = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Weights { users: rows.len(), types, data }
    }

    #[inline]
    pub fn get(&self, u: usize, k: usize) -> f64 {
        self.data[u * self.types + k]
    }

    #[inline]
    pub fn set(&mut self, u: usize, k: usize, w: f64) {
        self.data[u * self.types + k] = w;
    }

    /// Weight of a (possibly empty) assignment.
    pub fn total(&self, assign: &[Option<usize>]) -> f64 {
        assign
            .iter()
            .enumerate()
            .filter_map(|(u, k)| k.map(|k| self.get(u, k)))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Type assigned to each user.
    pub assign: Vec<Option<usize>>,
    pub weight: f64,
    /// Smallest optimal dual price of each type's capacity.
    pub prices: Vec<f64>,
    /// Dual potential of each user, `max(0, max_k w - price)`.
    pub potentials: Vec<f64>,
}

impl Matching {
    /// Value of the dual objective, equal to `weight` at an optimum.
    pub fn dual_objective(&self, capacity: &[usize]) -> f64 {
        let p: f64 = self.prices.iter().zip(capacity).map(|(p, &c)| p * c as f64).sum();
        p + self.potentials.iter().sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    gain: f64,
    user: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then(other.user.cmp(&self.user))
    }
}

/// Residual graph over type nodes `0..K`, the free pool `K` and the
/// spare-capacity node `K + 1`, with one lazily cleaned heap per ordered
/// pair of locations.
struct Residual<'a> {
    w: &'a Weights,
    cap: &'a [usize],
    loc: Vec<usize>,
    load: Vec<usize>,
    heaps: Vec<BinaryHeap<Entry>>,
}

impl<'a> Residual<'a> {
    fn new(w: &'a Weights, cap: &'a [usize], assign: &[Option<usize>]) -> Self {
        let k = w.types;
        let free = k;
        let mut r = Residual {
            w,
            cap,
            loc: vec![free; w.users],
            load: vec![0; k],
            heaps: vec![BinaryHeap::new(); (k + 1) * (k + 1)],
        };
        for (u, a) in assign.iter().enumerate() {
            if let Some(t) = *a {
                r.loc[u] = t;
                r.load[t] += 1;
            }
        }
        for u in 0..w.users {
            r.push(u);
        }
        r
    }

    #[inline]
    fn weight_at(&self, u: usize, at: usize) -> f64 {
        if at == self.w.types {
            0.0
        } else {
            self.w.get(u, at)
        }
    }

    fn push(&mut self, u: usize) {
        let k = self.w.types;
        let from = self.loc[u];
        let base = self.weight_at(u, from);
        for to in 0..=k {
            if to == from {
                continue;
            }
            if to < k && self.w.get(u, to) <= 0.0 {
                continue;
            }
            let gain = self.weight_at(u, to) - base;
            self.heaps[from * (k + 1) + to].push(Entry { gain, user: u });
        }
    }

    /// Best valid move between two locations.
    fn best(&mut self, from: usize, to: usize) -> Option<Entry> {
        let k = self.w.types;
        let heap = &mut self.heaps[from * (k + 1) + to];
        while let Some(&e) = heap.peek() {
            if self.loc[e.user] == from {
                return Some(e);
            }
            heap.pop();
        }
        None
    }

    /// Longest-path potentials from the given source nodes (free pool `K`,
    /// spare node `K + 1`). Returns distances and the predecessor move of
    /// every node.
    fn longest(&mut self, sources: &[usize]) -> (Vec<f64>, Vec<Option<(usize, usize)>>) {
        let k = self.w.types;
        let spare = k + 1;
        let mut dist = vec![f64::NEG_INFINITY; k + 2];
        let mut pred: Vec<Option<(usize, usize)>> = vec![None; k + 2];
        for &s in sources {
            dist[s] = 0.0;
        }
        let mut edges: Vec<(usize, usize, f64, usize)> = Vec::new();
        for from in 0..=k {
            for to in 0..=k {
                if from != to {
                    if let Some(e) = self.best(from, to) {
                        edges.push((from, to, e.gain, e.user));
                    }
                }
            }
        }
        for t in 0..k {
            if self.load[t] < self.cap[t] {
                edges.push((t, spare, 0.0, usize::MAX));
            }
            if self.load[t] > 0 {
                edges.push((spare, t, 0.0, usize::MAX));
            }
        }
        for _ in 0..k + 2 {
            let mut changed = false;
            for &(a, b, g, u) in &edges {
                if dist[a] > f64::NEG_INFINITY && dist[a] + g > dist[b] + EPS {
                    dist[b] = dist[a] + g;
                    pred[b] = Some((a, u));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        (dist, pred)
    }

    /// One augmentation from the free pool to spare capacity. Returns false
    /// when no path has positive gain.
    fn augment(&mut self) -> bool {
        let k = self.w.types;
        let (free, spare) = (k, k + 1);
        let (dist, pred) = self.longest(&[free]);
        if !(dist[spare] > EPS) {
            return false;
        }
        let mut moves = Vec::new();
        let mut node = spare;
        let mut guard = 0;
        while node != free {
            let (prev, u) = match pred[node] {
                Some(p) => p,
                None => return false,
            };
            if u != usize::MAX {
                moves.push((u, node));
            }
            node = prev;
            guard += 1;
            if guard > k + 2 {
                return false;
            }
        }
        for (u, to) in moves {
            let from = self.loc[u];
            if from < k {
                self.load[from] -= 1;
            }
            if to < k {
                self.load[to] += 1;
            }
            self.loc[u] = to;
            self.push(u);
        }
        true
    }

    fn assignment(&self) -> Vec<Option<usize>> {
        let k = self.w.types;
        self.loc.iter().map(|&l| (l < k).then_some(l)).collect()
    }

    fn prices(&mut self) -> Vec<f64> {
        let k = self.w.types;
        let (dist, _) = self.longest(&[k, k + 1]);
        dist[..k].iter().map(|&d| if d > EPS { d } else { 0.0 }).collect()
    }
}

fn potentials(w: &Weights, prices: &[f64]) -> Vec<f64> {
    (0..w.users)
        .map(|u| {
            (0..w.types)
                .map(|k| w.get(u, k) - prices[k])
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Exact maximum-weight assignment with minimal dual prices.
pub fn assign(w: &Weights, capacity: &[usize]) -> Matching {
    assert_eq!(capacity.len(), w.types, "one capacity per type");
    let mut r = Residual::new(w, capacity, &vec![None; w.users]);
    while r.augment() {}
    let assign = r.assignment();
    let prices = r.prices();
    let potentials = potentials(w, &prices);
    Matching { weight: w.total(&assign), assign, prices, potentials }
}

/// Smallest optimal dual prices for an optimal assignment.
pub fn dual_prices_from_assignment(w: &Weights, capacity: &[usize], assign: &[Option<usize>]) -> Vec<f64> {
    Residual::new(w, capacity, assign).prices()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(w: &Weights, cap: &[usize]) -> f64 {
        fn go(u: usize, w: &Weights, left: &mut Vec<usize>) -> f64 {
            if u == w.users {
                return 0.0;
            }
            let mut best = go(u + 1, w, left);
            for k in 0..w.types {
                if left[k] > 0 && w.get(u, k) > 0.0 {
                    left[k] -= 1;
                    best = best.max(w.get(u, k) + go(u + 1, w, left));
                    left[k] += 1;
                }
            }
            best
        }
        go(0, w, &mut cap.to_vec())
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Weights {
        let mut w = Weights::new(n, k);
        for u in 0..n {
            for t in 0..k {
                w.set(u, t, rng.gen_range(-2.0..10.0));
            }
        }
        w
    }

    fn check_duals(w: &Weights, cap: &[usize], m: &Matching) {
        assert!((m.dual_objective(cap) - m.weight).abs() < 1e-9, "{} vs {}", m.dual_objective(cap), m.weight);
        for u in 0..w.users {
            for k in 0..w.types {
                assert!(m.potentials[u] + m.prices[k] >= w.get(u, k) - 1e-9);
            }
            if let Some(k) = m.assign[u] {
                assert!((m.potentials[u] + m.prices[k] - w.get(u, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=7);
            let k = rng.gen_range(1..=4);
            let cap: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=2)).collect();
            let w = random(&mut rng, n, k);
            let m = assign(&w, &cap);
            assert!((m.weight - brute(&w, &cap)).abs() < 1e-9);
            check_duals(&w, &cap, &m);
            let mut load = vec![0; k];
            for (u, a) in m.assign.iter().enumerate() {
                if let Some(t) = *a {
                    load[t] += 1;
                    assert!(w.get(u, t) > 0.0);
                }
            }
            assert!(load.iter().zip(&cap).all(|(l, c)| l <= c));
        }
    }

    #[test]
    fn unit_capacities_are_plain_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w = random(&mut rng, 6, 4);
            let m = assign(&w, &[1; 4]);
            assert!((m.weight - brute(&w, &[1; 4])).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_zero_prices() {
        let w = Weights::new(3, 2);
        let m = assign(&w, &[1, 1]);
        assert!(m.assign.iter().all(Option::is_none));
        assert_eq!(m.prices, vec![0.0, 0.0]);
    }

    #[test]
    fn single_pair_price_in_range() {
        let w = Weights::from_rows(&[vec![4.0]]);
        let m = assign(&w, &[1]);
        assert_eq!(m.assign, vec![Some(0)]);
        assert!(m.prices[0] >= 0.0 && m.prices[0] <= 4.0);
        check_duals(&w, &[1], &m);
    }

    #[test]
    fn contested_type_is_priced_at_runner_up() {
        let w = Weights::from_rows(&[vec![9.0], vec![5.0], vec![2.0]]);
        let m = assign(&w, &[1]);
        assert_eq!(m.assign, vec![Some(0), None, None]);
        assert_eq!(m.prices, vec![5.0]);
    }

    #[test]
    fn prices_from_given_assignment() {
        let w = Weights::from_rows(&[vec![3.0, 8.0], vec![6.0, 7.0]]);
        let m = assign(&w, &[1, 1]);
        let p = dual_prices_from_assignment(&w, &[1, 1], &m.assign);
        assert_eq!(p, m.prices);
    }
}
