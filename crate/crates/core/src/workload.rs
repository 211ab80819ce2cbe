//! Seeded query streams over the object space.
//!
//! Popularity follows a Zipf law (uniform at skew 0) or any explicit
//! probability vector. Object `i` of a distribution is `keys[i]`, so
//! truncated or reshaped distributions keep the identity of their objects.
//! Each query is a pure function of `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::ObjectId;

pub const MAX_VALUE_LEN: usize = 128;
pub const DEFAULT_UNIVERSE: u64 = 1_000_000;

/// Probability vector over a set of objects plus the aggregate query rate.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryDistribution {
    probs: Vec<f64>,
    keys: Vec<u64>,
    /// Total query rate `R` in queries per second.
    pub total_rate: f64,
    skew: Option<f64>,
    retained_mass: f64,
}

/// `p_i = i^(-skew) / H` over ranks `1..=universe`, where `H` is the
/// generalized harmonic number.
pub fn zipf_probs(universe: u64, skew: f64) -> Result<QueryDistribution> {
    if universe == 0 {
        return Err(Error::invalid("universe must hold at least one object"));
    }
    if !(skew >= 0.0) || !skew.is_finite() {
        return Err(Error::invalid(format!(
            "zipf skew must be finite and >= 0, got {skew}"
        )));
    }
    let weights: Vec<f64> = (1..=universe).map(|i| (i as f64).powf(-skew)).collect();
    // Summing smallest-first keeps the rounding error of long tails down.
    let norm: f64 = weights.iter().rev().sum();
    Ok(QueryDistribution {
        probs: weights.into_iter().map(|w| w / norm).collect(),
        keys: (0..universe).collect(),
        total_rate: 1.0,
        skew: Some(skew),
        retained_mass: 1.0,
    })
}

impl QueryDistribution {
    /// Distribution from explicit non-negative weights, normalized to sum 1.
    /// Object `i` gets key index `i`.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let keys = (0..weights.len() as u64).collect();
        Self::from_keyed_weights(keys, weights)
    }

    pub fn from_keyed_weights(keys: Vec<u64>, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != keys.len() {
            return Err(Error::invalid(
                "weights must be non-empty and match the key list",
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let norm: f64 = weights.iter().sum();
        if norm <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        Ok(QueryDistribution {
            probs: weights.into_iter().map(|w| w / norm).collect(),
            keys,
            total_rate: 1.0,
            skew: None,
            retained_mass: 1.0,
        })
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.total_rate = rate;
        self
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Key index of object `i`.
    pub fn key_index(&self, i: usize) -> u64 {
        self.keys[i]
    }

    pub fn key(&self, i: usize) -> ObjectId {
        ObjectId::from_index(self.keys[i])
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn skew(&self) -> Option<f64> {
        self.skew
    }

    /// Mass of the original distribution kept by truncation.
    pub fn retained_mass(&self) -> f64 {
        self.retained_mass
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Per-object rates `r_i = p_i * R`.
    pub fn rates(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p * self.total_rate).collect()
    }

    /// True when this is an untouched Zipf law over keys `0..universe`, which
    /// lets the sampler use the rejection-inversion fast path.
    fn is_pure_zipf(&self) -> bool {
        self.skew.is_some() && self.retained_mass == 1.0
    }
}

/// Keeps the `k` most probable objects and renormalizes them.
pub fn truncate_to_hot(d: &QueryDistribution, k: usize) -> Result<QueryDistribution> {
    if k == 0 || k > d.len() {
        return Err(Error::invalid(format!(
            "k must be in 1..={}, got {k}",
            d.len()
        )));
    }
    if k == d.len() {
        return Ok(d.clone());
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d.probs[b].total_cmp(&d.probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    let kept: f64 = order.iter().map(|&i| d.probs[i]).sum();
    Ok(QueryDistribution {
        probs: order.iter().map(|&i| d.probs[i] / kept).collect(),
        keys: order.iter().map(|&i| d.keys[i]).collect(),
        total_rate: d.total_rate,
        skew: None,
        retained_mass: d.retained_mass * kept,
    })
}

/// Caps every probability at `cap` and hands the excess to the uncapped
/// objects in proportion to their mass (water-filling). Order is preserved.
pub fn cap_max_prob(d: &QueryDistribution, cap: f64) -> Result<QueryDistribution> {
    if !(cap > 0.0) || cap * (d.len() as f64) < 1.0 - 1e-12 {
        return Err(Error::invalid(format!(
            "cannot cap {} objects at {cap}: total mass would fall below 1",
            d.len()
        )));
    }
    let mut probs = d.probs.clone();
    let mut capped = vec![false; probs.len()];
    loop {
        let over: Vec<usize> = (0..probs.len())
            .filter(|&i| !capped[i] && probs[i] > cap)
            .collect();
        if over.is_empty() {
            break;
        }
        for i in over {
            capped[i] = true;
            probs[i] = cap;
        }
        let fixed = cap * capped.iter().filter(|c| **c).count() as f64;
        let free: f64 = (0..probs.len())
            .filter(|&i| !capped[i])
            .map(|i| probs[i])
            .sum();
        if free <= 0.0 {
            break;
        }
        let scale = (1.0 - fixed) / free;
        for i in 0..probs.len() {
            if !capped[i] {
                probs[i] *= scale;
            }
        }
    }
    let mut out = d.clone();
    out.probs = probs;
    if out.probs != d.probs {
        out.skew = None;
    }
    Ok(out)
}

/// Draws object indices from a [`QueryDistribution`].
#[derive(Clone, Debug)]
pub enum Sampler {
    /// Inverse CDF over a precomputed cumulative table.
    Exact { cdf: Vec<f64> },
    /// Rejection-inversion Zipf sampler.
    Zipf { dist: Zipf<f64>, universe: u64 },
}

impl Sampler {
    pub fn exact(d: &QueryDistribution) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = d
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = f64::INFINITY;
        }
        Sampler::Exact { cdf }
    }

    /// Fast path when available, exact inverse CDF otherwise.
    pub fn for_distribution(d: &QueryDistribution) -> Self {
        match d.skew {
            Some(s) if d.is_pure_zipf() => Sampler::Zipf {
                dist: Zipf::new(d.len() as f64, s).expect("validated zipf parameters"),
                universe: d.len() as u64,
            },
            _ => Sampler::exact(d),
        }
    }

    /// Position (rank) of the sampled object in the distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            Sampler::Exact { cdf } => {
                let u: f64 = rng.random();
                cdf.partition_point(|&c| c <= u)
            }
            Sampler::Zipf { dist, universe } => {
                let x = dist.sample(rng) as u64;
                (x.clamp(1, *universe) - 1) as usize
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Get,
    Set,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub op: Op,
    pub key: ObjectId,
    /// Present for `Set` only, 1..=128 bytes.
    pub value: Option<Vec<u8>>,
    /// Simulated seconds.
    pub timestamp: f64,
    pub client_rack: u32,
    /// Rank of the key in the stream's distribution.
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arrivals {
    /// Exponential inter-arrival times at `rate` queries per second.
    Poisson { rate: f64 },
    /// One query every `1/rate` seconds.
    Fixed { rate: f64 },
}

impl Arrivals {
    pub fn rate(&self) -> f64 {
        match *self {
            Arrivals::Poisson { rate } | Arrivals::Fixed { rate } => rate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub seed: u64,
    pub write_ratio: f64,
    pub arrivals: Arrivals,
    pub client_racks: u32,
    pub value_len: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            seed: 0,
            write_ratio: 0.0,
            arrivals: Arrivals::Fixed { rate: 1.0 },
            client_racks: 1,
            value_len: 16,
        }
    }
}

/// Replayable query stream. Query `i` draws its randomness from ChaCha
/// stream `i` of the stream seed, so any query can be regenerated alone.
#[derive(Clone, Debug)]
pub struct QueryStream {
    sampler: Sampler,
    keys: Vec<u64>,
    cfg: StreamConfig,
    base: ChaCha8Rng,
    index: u64,
    clock: f64,
    exp: Option<Exp<f64>>,
}

impl QueryStream {
    pub fn new(d: &QueryDistribution, cfg: StreamConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.write_ratio) {
            return Err(Error::invalid(format!(
                "write ratio {} not in [0, 1]",
                cfg.write_ratio
            )));
        }
        if !(1..=MAX_VALUE_LEN).contains(&cfg.value_len) {
            return Err(Error::invalid(format!(
                "value length {} not in 1..=128",
                cfg.value_len
            )));
        }
        if cfg.client_racks == 0 {
            return Err(Error::invalid("need at least one client rack"));
        }
        let rate = cfg.arrivals.rate();
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::invalid(format!(
                "arrival rate must be positive, got {rate}"
            )));
        }
        let exp = match cfg.arrivals {
            Arrivals::Poisson { rate } => Some(Exp::new(rate).expect("positive rate")),
            Arrivals::Fixed { .. } => None,
        };
        Ok(QueryStream {
            sampler: Sampler::for_distribution(d),
            keys: d.keys.clone(),
            base: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            index: 0,
            clock: 0.0,
            exp,
        })
    }

    /// Forces the exact inverse-CDF sampler.
    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(index);
        rng.set_word_pos(0);
        rng
    }

    /// Query number `index` without its arrival time.
    pub fn query_at(&self, index: u64) -> Query {
        let mut rng = self.rng_for(index);
        self.draw(&mut rng, 0.0)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, timestamp: f64) -> Query {
        let rank = self.sampler.sample(rng);
        let is_write = self.cfg.write_ratio > 0.0 && rng.random::<f64>() < self.cfg.write_ratio;
        let client_rack = rng.random_range(0..self.cfg.client_racks);
        let value = is_write.then(|| {
            let mut v = vec![0u8; self.cfg.value_len];
            rng.fill(&mut v[..]);
            v
        });
        Query {
            op: if is_write { Op::Set } else { Op::Get },
            key: ObjectId::from_index(self.keys[rank]),
            value,
            timestamp,
            client_rack,
            rank,
        }
    }

    pub fn next_query(&mut self) -> Query {
        let mut rng = self.rng_for(self.index);
        let q = self.draw(&mut rng, 0.0);
        self.clock = match (&self.exp, self.cfg.arrivals) {
            (Some(exp), _) => self.clock + exp.sample(&mut rng),
            (None, Arrivals::Fixed { rate }) => self.index as f64 / rate,
            (None, Arrivals::Poisson { .. }) => unreachable!(),
        };
        self.index += 1;
        Query {
            timestamp: self.clock,
            ..q
        }
    }
}

impl Iterator for QueryStream {
    type Item = Query;

    fn next(&mut self) -> Option<Query> {
        Some(self.next_query())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(n: u64, s: f64) -> f64 {
        let mut h = 0.0;
        for i in 1..=n {
            h += 1.0 / (i as f64).powf(s);
        }
        h
    }

    #[test]
    fn zipf_examples() {
        let d = zipf_probs(4, 0.0).unwrap();
        assert!(d.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let d = zipf_probs(2, 1.0).unwrap();
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.probs()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(zipf_probs(0, 1.0).is_err());
        assert!(zipf_probs(10, -0.5).is_err());
        assert!(zipf_probs(10, f64::NAN).is_err());
    }

    #[test]
    fn zipf_probs_sum_to_one_and_decrease() {
        for &s in &[0.0, 0.5, 0.9, 0.99, 1.2] {
            let d = zipf_probs(100_000, s).unwrap();
            let total: f64 = d.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(d.probs().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sampled_frequency_of_hottest_object_matches_harmonic_oracle() {
        let p0 = 1.0 / harmonic(100, 0.99);
        let d = zipf_probs(100, 0.99).unwrap();
        assert!((d.probs()[0] - p0).abs() < 1e-12);
        for sampler in [Sampler::for_distribution(&d), Sampler::exact(&d)] {
            let stream = QueryStream::new(
                &d,
                StreamConfig {
                    seed: 5,
                    ..Default::default()
                },
            )
            .unwrap()
            .with_sampler(sampler);
            let n = 1_000_000;
            let hits = stream.take(n).filter(|q| q.rank == 0).count();
            let freq = hits as f64 / n as f64;
            assert!((freq / p0 - 1.0).abs() < 0.01, "freq {freq} vs {p0}");
        }
    }

    #[test]
    fn top_ten_frequencies_converge() {
        let d = zipf_probs(DEFAULT_UNIVERSE, 0.99).unwrap();
        let stream = QueryStream::new(
            &d,
            StreamConfig {
                seed: 17,
                ..Default::default()
            },
        )
        .unwrap();
        let n = 1_000_000;
        let mut counts = [0u64; 10];
        for q in stream.take(n) {
            if q.rank < 10 {
                counts[q.rank] += 1;
            }
        }
        let f0 = counts[0] as f64 / n as f64;
        assert!((f0 / d.probs()[0] - 1.0).abs() < 0.02);
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            // 4 sigma of a binomial proportion
            let sigma = (d.probs()[i] * (1.0 - d.probs()[i]) / n as f64).sqrt();
            assert!((f - d.probs()[i]).abs() < 4.0 * sigma, "rank {i}");
        }
    }

    #[test]
    fn fast_sampler_agrees_with_inverse_cdf() {
        // Two-sample chi-square over rank buckets; 12 degrees of freedom,
        // upper 0.001 tail.
        const CRITICAL: f64 = 32.909;
        let edges = [
            1usize,
            2,
            3,
            4,
            5,
            10,
            20,
            50,
            100,
            1_000,
            10_000,
            100_000,
            usize::MAX,
        ];
        let bucket = |r: usize| edges.iter().position(|&e| r < e).unwrap();
        let d = zipf_probs(DEFAULT_UNIVERSE, 0.99).unwrap();
        let n = 200_000;
        let mut fast = [0f64; 13];
        let mut exact = [0f64; 13];
        let s1 = QueryStream::new(
            &d,
            StreamConfig {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let s2 = QueryStream::new(
            &d,
            StreamConfig {
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap()
        .with_sampler(Sampler::exact(&d));
        for q in s1.take(n) {
            fast[bucket(q.rank)] += 1.0;
        }
        for q in s2.take(n) {
            exact[bucket(q.rank)] += 1.0;
        }
        let chi2: f64 = fast
            .iter()
            .zip(&exact)
            .filter(|(a, b)| **a + **b > 0.0)
            .map(|(a, b)| (a - b).powi(2) / (a + b))
            .sum();
        assert!(chi2 < CRITICAL, "chi2 = {chi2}");
    }

    #[test]
    fn write_ratio_extremes_and_binomial_band() {
        let d = zipf_probs(1000, 0.9).unwrap();
        let count_sets = |ratio: f64, n: usize| {
            let cfg = StreamConfig {
                seed: 3,
                write_ratio: ratio,
                ..Default::default()
            };
            QueryStream::new(&d, cfg)
                .unwrap()
                .take(n)
                .filter(|q| q.op == Op::Set)
                .count()
        };
        assert_eq!(count_sets(0.0, 10_000), 0);
        assert_eq!(count_sets(1.0, 10_000), 10_000);
        let frac = count_sets(0.1, 100_000) as f64 / 100_000.0;
        assert!((0.094..=0.106).contains(&frac), "{frac}");
        let bad = StreamConfig {
            write_ratio: 1.5,
            ..Default::default()
        };
        assert!(QueryStream::new(&d, bad).is_err());
    }

    #[test]
    fn writes_carry_values_and_reads_do_not() {
        let d = zipf_probs(100, 0.9).unwrap();
        let cfg = StreamConfig {
            seed: 9,
            write_ratio: 0.5,
            value_len: 128,
            ..Default::default()
        };
        for q in QueryStream::new(&d, cfg).unwrap().take(1000) {
            match q.op {
                Op::Get => assert!(q.value.is_none()),
                Op::Set => assert_eq!(q.value.as_ref().map(Vec::len), Some(128)),
            }
        }
    }

    #[test]
    fn replay_is_identical_and_random_access() {
        let d = zipf_probs(10_000, 0.99).unwrap();
        let cfg = StreamConfig {
            seed: 77,
            write_ratio: 0.2,
            arrivals: Arrivals::Poisson { rate: 1000.0 },
            client_racks: 4,
            value_len: 16,
        };
        let a: Vec<_> = QueryStream::new(&d, cfg.clone())
            .unwrap()
            .take(5000)
            .collect();
        let b: Vec<_> = QueryStream::new(&d, cfg.clone())
            .unwrap()
            .take(5000)
            .collect();
        assert_eq!(a, b);
        let s = QueryStream::new(&d, cfg).unwrap();
        let q = s.query_at(1234);
        assert_eq!(
            (q.op, q.key, &q.value),
            (a[1234].op, a[1234].key, &a[1234].value)
        );
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn fixed_arrivals_are_evenly_spaced() {
        let d = zipf_probs(10, 0.0).unwrap();
        let cfg = StreamConfig {
            arrivals: Arrivals::Fixed { rate: 200.0 },
            ..Default::default()
        };
        let qs: Vec<_> = QueryStream::new(&d, cfg).unwrap().take(5).collect();
        for (i, q) in qs.iter().enumerate() {
            assert!((q.timestamp - i as f64 / 200.0).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_examples() {
        let d = zipf_probs(10, 0.0).unwrap();
        assert_eq!(truncate_to_hot(&d, 10).unwrap(), d);
        let t = truncate_to_hot(&d, 5).unwrap();
        assert!(t.probs().iter().all(|p| (p - 0.2).abs() < 1e-12));
        assert!((t.retained_mass() - 0.5).abs() < 1e-12);
        assert!(truncate_to_hot(&d, 0).is_err());
        assert!(truncate_to_hot(&d, 11).is_err());

        let z = zipf_probs(10_000, 0.99).unwrap();
        let t = truncate_to_hot(&z, 100).unwrap();
        let expected = harmonic(100, 0.99) / harmonic(10_000, 0.99);
        assert!((t.retained_mass() - expected).abs() < 1e-12);
        assert_eq!(t.keys(), (0..100).collect::<Vec<u64>>().as_slice());
        assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_keeps_largest_of_unsorted_weights() {
        let d = QueryDistribution::from_weights(vec![1.0, 5.0, 3.0, 1.0]).unwrap();
        let t = truncate_to_hot(&d, 2).unwrap();
        assert_eq!(t.keys(), &[1, 2]);
        assert!((t.probs()[0] - 5.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn capping_redistributes_excess() {
        let z = truncate_to_hot(&zipf_probs(1000, 0.99).unwrap(), 111).unwrap();
        let cap = 0.5 / 25.6;
        let c = cap_max_prob(&z, cap).unwrap();
        assert!(c.max_prob() <= cap + 1e-12);
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(c.probs().windows(2).all(|w| w[0] >= w[1] - 1e-15));
        assert!(cap_max_prob(&z, 0.001).is_err());
    }
}
