//! Seeded random streams and the elementary samplers used by the Gibbs and
//! variational machinery.
//!
//! # Stream derivation
//!
//! Every random quantity is drawn from an [`RngStream`], a ChaCha8 generator
//! keyed by the global seed and positioned on one of its 2^64 independent
//! streams. Parallel code never shares a stream: it derives one per work unit
//! from `(global seed, purpose tag, iteration, unit index)` with
//! [`stream_id`], so results do not depend on thread count or scheduling.
//! The mapping is SplitMix64 folded over the parts, which makes every stream
//! auditable from the run manifest alone.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};

use crate::error::{domain, invalid, Result};
use crate::special::{digamma, ln_gamma, trigamma};

/// Purpose tags used when deriving streams. Kept in one place so that two
/// subsystems never collide on the same stream.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const NODE_AUGMENT: u64 = 2;
    pub const EDGE_AUGMENT: u64 = 3;
    pub const PROPAGATE: u64 = 4;
    pub const PHI: u64 = 5;
    pub const THETA: u64 = 6;
    pub const U: u64 = 7;
    pub const SCALES: u64 = 8;
    pub const ENCODER_NOISE: u64 = 9;
    pub const ATTENTION_NOISE: u64 = 10;
    pub const NODE_SUBSET: u64 = 11;
    pub const TLASGR: u64 = 12;
    pub const SPLIT: u64 = 13;
    pub const KMEANS: u64 = 14;
    pub const GENERATE: u64 = 15;
    pub const WEIGHTS: u64 = 16;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of identifiers into a single stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A single-owner random stream identified by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for the work unit named by `parts` under `seed`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::new(seed, stream_id(parts))
    }

    /// A child stream of this one, independent of its current position.
    pub fn child(&self, parts: &[u64]) -> Self {
        let mut path = Vec::with_capacity(parts.len() + 1);
        path.push(self.stream);
        path.extend_from_slice(parts);
        Self::derive(self.seed, &path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain!("{name} must be positive and finite, got {v}"))
    }
}

/// Marsaglia–Tsang for shape >= 1, unit scale.
fn gamma_unit_large(shape: f64, rng: &mut RngStream) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.open01();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// ln of a unit-scale Gamma(shape) draw. Works for arbitrarily small shapes,
/// where the draw itself would underflow.
pub fn sample_ln_gamma(shape: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("gamma shape", shape)?;
    if shape >= 1.0 {
        Ok(gamma_unit_large(shape, rng).ln())
    } else {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let g = gamma_unit_large(shape + 1.0, rng);
        Ok(g.ln() + rng.open01().ln() / shape)
    }
}

/// Draw from Gamma(shape, scale) (mean shape * scale).
pub fn sample_gamma(shape: f64, scale: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("gamma shape", shape)?;
    check_positive("gamma scale", scale)?;
    let g = if shape >= 1.0 {
        gamma_unit_large(shape, rng)
    } else {
        gamma_unit_large(shape + 1.0, rng) * rng.open01().powf(1.0 / shape)
    };
    Ok(g * scale)
}

/// Draw from Dirichlet(concentrations). Gamma draws are made in log space and
/// renormalized, so tiny concentrations (e.g. 0.01) never produce an all-zero
/// vector.
pub fn sample_dirichlet(concentrations: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut out = vec![0.0; concentrations.len()];
    sample_dirichlet_into(concentrations, &mut out, rng)?;
    Ok(out)
}

pub fn sample_dirichlet_into(concentrations: &[f64], out: &mut [f64], rng: &mut RngStream) -> Result<()> {
    if concentrations.is_empty() {
        return Err(invalid!("Dirichlet needs at least one concentration"));
    }
    debug_assert_eq!(concentrations.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(concentrations) {
        *o = sample_ln_gamma(a, rng)?;
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

pub fn sample_poisson(rate: f64, rng: &mut RngStream) -> Result<u64> {
    if rate == 0.0 {
        return Ok(0);
    }
    check_positive("Poisson rate", rate)?;
    let d = Poisson::new(rate).map_err(|e| domain!("Poisson rate {rate}: {e}"))?;
    Ok(d.sample(rng) as u64)
}

/// Draw from the zero-truncated Poisson, Pois(rate) conditioned on >= 1.
///
/// For rate >= 1 zeros are rejected (acceptance >= 1 - e^{-1}). For rate < 1
/// a proposal k = 1 + Pois(rate) is accepted with probability 1/k, which is
/// exact and accepts with probability (1 - e^{-rate}) / rate >= 0.63.
pub fn sample_truncated_poisson(rate: f64, rng: &mut RngStream) -> Result<u64> {
    check_positive("truncated Poisson rate", rate)?;
    let d = Poisson::new(rate).map_err(|e| domain!("Poisson rate {rate}: {e}"))?;
    if rate >= 1.0 {
        loop {
            let k = d.sample(rng) as u64;
            if k >= 1 {
                return Ok(k);
            }
        }
    }
    loop {
        let k = 1 + d.sample(rng) as u64;
        if k == 1 || rng.open01() * (k as f64) < 1.0 {
            return Ok(k);
        }
    }
}

/// Customers seated exactly before the remainder of a CRT draw is
/// approximated.
pub const CRT_EXACT_LIMIT: u64 = 1000;

/// Chinese-restaurant-table draw: number of tables after `count` customers
/// with the given concentration. Beyond [`CRT_EXACT_LIMIT`] customers the
/// remaining tables are drawn from a normal with their exact mean and
/// variance.
pub fn sample_crt(count: u64, concentration: f64, rng: &mut RngStream) -> Result<u64> {
    check_positive("CRT concentration", concentration)?;
    let a = concentration;
    let exact = count.min(CRT_EXACT_LIMIT);
    let mut tables = 0;
    for i in 0..exact {
        let p = a / (a + i as f64);
        if i == 0 || rng.random::<f64>() < p {
            tables += 1;
        }
    }
    if count > exact {
        let (m, n) = (exact as f64, count as f64);
        let mean = a * (digamma(a + n) - digamma(a + m));
        let var = (mean - a * a * (trigamma(a + m) - trigamma(a + n))).max(0.0);
        let draw = (mean + var.sqrt() * rng.normal()).round();
        tables += draw.clamp(0.0, n - m) as u64;
    }
    Ok(tables)
}

/// Multinomial(n, weights / sum(weights)) written into `out`.
pub fn sample_multinomial_into(n: u64, weights: &[f64], out: &mut [u64], rng: &mut RngStream) -> Result<()> {
    debug_assert_eq!(weights.len(), out.len());
    out.iter_mut().for_each(|o| *o = 0);
    if n == 0 {
        return Ok(());
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(domain!(
            "multinomial weights must have positive finite sum, got {total}"
        ));
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0) {
        return Err(domain!("multinomial weight {w} is negative"));
    }
    if weights.len() == 1 {
        out[0] = n;
        return Ok(());
    }
    if n <= 8 {
        // direct categorical draws
        for _ in 0..n {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = weights.len() - 1;
            for (k, &w) in weights.iter().enumerate() {
                if target < w {
                    chosen = k;
                    break;
                }
                target -= w;
            }
            // never land on a zero-weight slot because of rounding
            while weights[chosen] == 0.0 {
                chosen -= 1;
            }
            out[chosen] += 1;
        }
        return Ok(());
    }
    // conditional binomials
    let mut remaining_n = n;
    let mut remaining_w = total;
    let last = weights.len() - 1;
    for (k, &w) in weights.iter().enumerate() {
        if remaining_n == 0 {
            break;
        }
        if k == last || w >= remaining_w {
            out[k] = remaining_n;
            break;
        }
        let p = (w / remaining_w).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining_n, p)
            .map_err(|e| domain!("binomial({remaining_n}, {p}): {e}"))?
            .sample(rng);
        out[k] = draw;
        remaining_n -= draw;
        remaining_w -= w;
    }
    Ok(())
}

pub fn sample_multinomial_counts(n: u64, weights: &[f64], rng: &mut RngStream) -> Result<Vec<u64>> {
    if weights.is_empty() {
        return Err(invalid!("multinomial needs at least one weight"));
    }
    let mut out = vec![0; weights.len()];
    sample_multinomial_into(n, weights, &mut out, rng)?;
    Ok(out)
}

/// A Weibull draw together with the uniform noise that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeibullDraw {
    pub value: f64,
    pub noise: f64,
}

/// Reparameterized Weibull transform θ = scale · (−ln(1−ε))^{1/shape}.
pub fn weibull_transform(shape: f64, scale: f64, noise: f64) -> f64 {
    scale * (-(-noise).ln_1p()).powf(1.0 / shape)
}

pub fn sample_weibull(shape: f64, scale: f64, rng: &mut RngStream) -> Result<WeibullDraw> {
    check_positive("Weibull shape", shape)?;
    check_positive("Weibull scale", scale)?;
    let noise = rng.open01();
    Ok(WeibullDraw {
        value: weibull_transform(shape, scale, noise),
        noise,
    })
}

/// E[X^m] for X ~ Weibull(shape, scale).
pub fn weibull_moment(shape: f64, scale: f64, m: f64) -> f64 {
    scale.powf(m) * ln_gamma(1.0 + m / shape).exp()
}

/// Mean of the zero-truncated Poisson.
pub fn truncated_poisson_mean(rate: f64) -> f64 {
    rate / -(-rate).exp_m1()
}

/// Mean of CRT(count, concentration).
pub fn crt_mean(count: u64, concentration: f64) -> f64 {
    if count > CRT_EXACT_LIMIT {
        return concentration * (digamma(concentration + count as f64) - digamma(concentration));
    }
    (0..count).map(|i| concentration / (concentration + i as f64)).sum()
}

/// Vose alias table for repeated draws from a fixed discrete distribution.
#[derive(Clone, Debug)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        if n == 0 || !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(invalid!("alias table needs nonnegative weights with positive sum"));
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut alias = vec![0; n];
        let mut prob = vec![0.0; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while !small.is_empty() && !large.is_empty() {
            let s = small.pop().unwrap();
            let l = *large.last().unwrap();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(n: usize, mut f: impl FnMut() -> f64) -> (f64, f64) {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let x = f();
            s += x;
            s2 += x * x;
        }
        let m = s / n as f64;
        (m, (s2 / n as f64 - m * m).max(0.0))
    }

    #[test]
    fn equal_streams_agree_and_distinct_streams_differ() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let mut c = RngStream::new(7, 4);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_ne!(stream_id(&[1, 2]), stream_id(&[2, 1]));
    }

    #[test]
    fn gamma_rejects_bad_parameters() {
        let mut rng = RngStream::new(1, 0);
        assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(1.0, -1.0, &mut rng).is_err());
        assert!(sample_weibull(1.0, 0.0, &mut rng).is_err());
        assert!(sample_truncated_poisson(0.0, &mut rng).is_err());
        assert!(sample_crt(3, 0.0, &mut rng).is_err());
        assert!(sample_dirichlet(&[], &mut rng).is_err());
        assert!(sample_multinomial_counts(3, &[0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn gamma_moments() {
        let mut rng = RngStream::new(11, 0);
        let (m, v) = mean_of(200_000, || sample_gamma(3.0, 2.0, &mut rng).unwrap());
        assert!((m - 6.0).abs() < 0.05, "mean {m}");
        assert!((v - 12.0).abs() < 0.3, "var {v}");
        let (m, _) = mean_of(200_000, || sample_gamma(0.3, 1.5, &mut rng).unwrap());
        assert!((m - 0.45).abs() < 0.01, "mean {m}");
    }

    #[test]
    fn dirichlet_simplex_and_edge_cases() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..100 {
            let d = sample_dirichlet(&[0.01, 0.01], &mut rng).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|x| *x >= 0.0));
        }
        assert_eq!(sample_dirichlet(&[0.01], &mut rng).unwrap(), vec![1.0]);
        let d = sample_dirichlet(&[1e6, 1e6], &mut rng).unwrap();
        assert!((d[0] - 0.5).abs() < 0.001);
    }

    #[test]
    fn small_sampler_cases() {
        let mut rng = RngStream::new(9, 0);
        assert_eq!(sample_crt(0, 2.0, &mut rng).unwrap(), 0);
        for _ in 0..100 {
            assert_eq!(sample_crt(1, 0.3, &mut rng).unwrap(), 1);
            assert!(sample_truncated_poisson(0.01, &mut rng).unwrap() >= 1);
        }
        assert_eq!(sample_multinomial_counts(0, &[1.0, 2.0], &mut rng).unwrap(), vec![0, 0]);
        assert_eq!(
            sample_multinomial_counts(1000, &[2.0, 0.0, 0.0], &mut rng).unwrap(),
            vec![1000, 0, 0]
        );
        let w = sample_weibull(3.0, 2.5, &mut rng).unwrap();
        assert_eq!(w.value, weibull_transform(3.0, 2.5, w.noise));
        assert!((weibull_transform(0.7, 4.0, 1.0 - (-1f64).exp()) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn multinomial_sums_and_large_n_split() {
        let mut rng = RngStream::new(2, 0);
        let c = sample_multinomial_counts(1_000_000, &[1.0, 3.0], &mut rng).unwrap();
        assert_eq!(c[0] + c[1], 1_000_000);
        // 3 sigma of Binomial(1e6, 0.25) is ~1299
        assert!((c[0] as f64 - 250_000.0).abs() < 1300.0, "{c:?}");
    }

    #[test]
    fn crt_full_table_probability_at_small_n() {
        // P(CRT(3, a) = 3) = a/(a+1) * a/(a+2)
        let a = 0.7;
        let expected = a / (a + 1.0) * a / (a + 2.0);
        let mut rng = RngStream::new(4, 0);
        let n = 200_000;
        let hits = (0..n).filter(|_| sample_crt(3, a, &mut rng).unwrap() == 3).count();
        let p = hits as f64 / n as f64;
        let sd = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((p - expected).abs() < 4.0 * sd, "{p} vs {expected}");
    }

    #[test]
    fn crt_large_count_moments() {
        let (n, a) = (200_000u64, 3.0);
        let mean = crt_mean(n, a);
        let var: f64 = (0..n).map(|i| a / (a + i as f64)).map(|p| p * (1.0 - p)).sum();
        assert!((mean - (0..n).map(|i| a / (a + i as f64)).sum::<f64>()).abs() < 1e-9);
        let mut rng = RngStream::new(8, 0);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| sample_crt(n, a, &mut rng).unwrap() as f64)
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!(
            (m - mean).abs() < 3.0 * (var / draws.len() as f64).sqrt(),
            "{m} vs {mean}"
        );
        assert!((v / var - 1.0).abs() < 0.05, "{v} vs {var}");
    }

    #[test]
    fn alias_table_frequencies() {
        let w = [1.0, 0.0, 3.0, 6.0];
        let table = AliasTable::new(&w).unwrap();
        let mut rng = RngStream::new(8, 0);
        let mut counts = [0usize; 4];
        let n = 200_000;
        for _ in 0..n {
            counts[table.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for (c, wi) in counts.iter().zip(w) {
            let p = wi / 10.0;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * sd + 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn multinomial_always_sums_to_n(n in 0u64..5000, w in proptest::collection::vec(0.0f64..10.0, 1..12), seed in 0u64..1000) {
            let mut w = w;
            w[0] += 0.1;
            let mut rng = RngStream::new(seed, 0);
            let c = sample_multinomial_counts(n, &w, &mut rng).unwrap();
            proptest::prop_assert_eq!(c.iter().sum::<u64>(), n);
            for (ci, wi) in c.iter().zip(&w) {
                if *wi == 0.0 { proptest::prop_assert_eq!(*ci, 0); }
            }
        }

        #[test]
        fn crt_within_bounds(n in 0u64..200, a in 0.01f64..20.0, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 1);
            let l = sample_crt(n, a, &mut rng).unwrap();
            proptest::prop_assert!(l <= n);
            proptest::prop_assert!(l >= n.min(1));
        }
    }
}
