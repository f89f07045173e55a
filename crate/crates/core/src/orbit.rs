//! U-turn detection, the stopping time of the doubling construction, and the
//! law of the final index interval.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binwords::{BinWord, IndexInterval};
use crate::error::{Error, Result};
use crate::leapfrog::{Direction, Integrator, LeapfrogParams, State};
use crate::target::{MassMatrix, PhasePoint, Target};

/// Lazily extended table `j ↦ Φ^{∘(j)}(x₀)`. Entries are appended one step at a
/// time from the current extremes.
pub struct OrbitCache<'a> {
    integ: Integrator<'a>,
    // fwd[j] holds index j >= 0, bwd[j - 1] holds index -j.
    fwd: Vec<State>,
    bwd: Vec<State>,
}

impl<'a> OrbitCache<'a> {
    pub fn new(target: &'a Target, params: LeapfrogParams<'a>, anchor: PhasePoint) -> Self {
        let integ = Integrator::new(target, params);
        let s0 = integ.state(anchor);
        Self {
            integ,
            fwd: vec![s0],
            bwd: Vec::new(),
        }
    }

    pub fn anchor(&self) -> &State {
        &self.fwd[0]
    }

    pub fn mass(&self) -> &MassMatrix {
        self.integ.mass
    }

    pub fn target(&self) -> &Target {
        self.integ.target
    }

    pub fn step_size(&self) -> f64 {
        self.integ.h
    }

    pub fn grad_evals(&self) -> u64 {
        self.integ.grad_evals()
    }

    /// Indices computed so far.
    pub fn coverage(&self) -> IndexInterval {
        IndexInterval::new(-(self.bwd.len() as i64), self.fwd.len() as i64 - 1)
    }

    pub fn get(&self, j: i64) -> Result<&State> {
        let s = if j >= 0 {
            self.fwd.get(j as usize)
        } else {
            self.bwd.get((-j - 1) as usize)
        };
        s.ok_or(Error::CacheGap(j))
    }

    pub fn log_weight(&self, j: i64) -> Result<f64> {
        Ok(self.get(j)?.log_weight)
    }

    /// Extends the table until it contains `j`.
    pub fn extend_to(&mut self, j: i64) {
        if j >= 0 {
            while (self.fwd.len() as i64) <= j {
                let next = self.integ.step(self.fwd.last().unwrap(), Direction::Forward);
                self.fwd.push(next);
            }
        } else {
            while (self.bwd.len() as i64) < -j {
                let last = self.bwd.last().unwrap_or(&self.fwd[0]);
                let next = self.integ.step(last, Direction::Backward);
                self.bwd.push(next);
            }
        }
    }

    pub fn ensure(&mut self, interval: IndexInterval) {
        self.extend_to(interval.lo);
        self.extend_to(interval.hi);
    }

    fn any_diverged(&self, interval: IndexInterval) -> Result<bool> {
        for j in interval.iter() {
            if self.get(j)?.diverged {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn pair(&self, lo: i64, hi: i64) -> Result<bool> {
        Ok(uturn_pair(self.mass(), &self.get(lo)?.x, &self.get(hi)?.x))
    }
}

/// `true` iff one endpoint's momentum points against the displacement
/// `q_right - q_left`, measured as `pᵀM⁻¹(q_right - q_left) < 0`.
pub fn uturn_pair(mass: &MassMatrix, left: &PhasePoint, right: &PhasePoint) -> bool {
    let dq = &right.q - &left.q;
    let dir = mass.apply_inv(&dq);
    right.p.dot(&dir) < 0.0 || left.p.dot(&dir) < 0.0
}

/// `true` iff `v` is not in the U-turn set: every aligned sub-block of length
/// `2^k`, `1 <= k <= K-1`, of `interval(v)` passes [`uturn_pair`] on its
/// endpoints. An interval holding a diverged state never passes.
pub fn no_uturns(v: BinWord, cache: &OrbitCache<'_>) -> Result<bool> {
    let iv = v.interval();
    if cache.any_diverged(iv)? {
        return Ok(false);
    }
    let k_len = v.len();
    for k in 1..k_len {
        let block = 1i64 << k;
        for l in 1..=(1i64 << (k_len - k)) {
            let lo = iv.lo + (l - 1) * block;
            let hi = iv.lo + l * block - 1;
            if cache.pair(lo, hi)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// The half added by the last doubling of `w`.
pub fn new_half(w: BinWord) -> IndexInterval {
    let iv = w.interval();
    let half = 1i64 << (w.len() - 1);
    if w.bit(w.len() - 1) {
        IndexInterval::new(iv.hi - half + 1, iv.hi)
    } else {
        IndexInterval::new(iv.lo, iv.lo + half - 1)
    }
}

/// The half already present before the last doubling of `w`.
pub fn old_half(w: BinWord) -> IndexInterval {
    w.low_trunc(w.len() - 1)
        .map(|u| u.interval())
        .unwrap_or(IndexInterval::new(0, 0))
}

/// Decides `w ∈ U^{(K)}` assuming `w|_{K-1} ∉ U^{(K-1)}`: only the pairs that
/// the last doubling introduced are checked.
pub fn stage_uturn(w: BinWord, cache: &OrbitCache<'_>) -> Result<bool> {
    assert!(!w.is_empty());
    let new = new_half(w);
    if cache.any_diverged(new)? {
        return Ok(true);
    }
    if w.len() == 1 {
        return Ok(false);
    }
    let old = old_half(w);
    if cache.pair(old.lo, old.hi)? {
        return Ok(true);
    }
    let n = new.len() as i64;
    let mut block = 2;
    while block <= n {
        let mut lo = new.lo;
        while lo < new.hi {
            if cache.pair(lo, lo + block - 1)? {
                return Ok(true);
            }
            lo += block;
        }
        block *= 2;
    }
    Ok(false)
}

/// `S(v)`: the first `k` with `v|_k` in the U-turn set, `None` for infinity.
pub fn stopping_time(v: BinWord, cache: &OrbitCache<'_>) -> Result<Option<u32>> {
    for k in 1..=v.len() {
        if stage_uturn(v.low_trunc(k)?, cache)? {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Outcome of the doubling construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrbitSelection {
    pub i_f: IndexInterval,
    pub k_f: u32,
    /// The Bernoulli record drawn, `min(S, K_m)` bits long.
    pub v: BinWord,
    pub s_f: Option<u32>,
}

/// Draws the doubling record one bit at a time and stops at the first U-turn
/// or at depth `k_m`.
pub fn orbit_select_sample<R: Rng + ?Sized>(
    cache: &mut OrbitCache<'_>,
    k_m: u32,
    rng: &mut R,
) -> Result<OrbitSelection> {
    let mut v = BinWord::empty();
    for k in 0..k_m {
        let bit = rng.random_bool(0.5);
        let w = BinWord::new(k + 1, v.value() | ((bit as u64) << k))?;
        cache.ensure(w.interval());
        if stage_uturn(w, cache)? {
            return Ok(OrbitSelection {
                i_f: v.interval(),
                k_f: k,
                v: w,
                s_f: Some(k + 1),
            });
        }
        v = w;
    }
    Ok(OrbitSelection {
        i_f: v.interval(),
        k_f: k_m,
        v,
        s_f: None,
    })
}

/// An exact dyadic rational `num / 2^exp`, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dyadic {
    num: u64,
    exp: u32,
}

impl Dyadic {
    pub fn new(num: u64, exp: u32) -> Self {
        assert!(exp < 64);
        let shift = num.trailing_zeros().min(exp);
        let (num, exp) = if num == 0 { (0, 0) } else { (num >> shift, exp - shift) };
        Self { num, exp }
    }

    pub const ZERO: Dyadic = Dyadic { num: 0, exp: 0 };
    pub const ONE: Dyadic = Dyadic { num: 1, exp: 0 };

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn log2_denominator(&self) -> u32 {
        self.exp
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / (1u64 << self.exp) as f64
    }

    pub fn add(self, rhs: Dyadic) -> Dyadic {
        let exp = self.exp.max(rhs.exp);
        Dyadic::new(
            (self.num << (exp - self.exp)) + (rhs.num << (exp - rhs.exp)),
            exp,
        )
    }
}

impl std::fmt::Display for Dyadic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, 1u64 << self.exp)
    }
}

/// Exact law of the final interval `I_f`, aggregated per interval and sorted.
pub fn orbit_select_pmf(cache: &mut OrbitCache<'_>, k_m: u32) -> Result<Vec<(IndexInterval, Dyadic)>> {
    let mut out: BTreeMap<IndexInterval, Dyadic> = BTreeMap::new();
    walk(cache, k_m, BinWord::empty(), &mut out)?;
    Ok(out.into_iter().collect())
}

fn walk(
    cache: &mut OrbitCache<'_>,
    k_m: u32,
    v: BinWord,
    out: &mut BTreeMap<IndexInterval, Dyadic>,
) -> Result<()> {
    let k = v.len();
    if k == k_m {
        let e = out.entry(v.interval()).or_insert(Dyadic::ZERO);
        *e = e.add(Dyadic::new(1, k_m));
        return Ok(());
    }
    for bit in [false, true] {
        let w = BinWord::new(k + 1, v.value() | ((bit as u64) << k))?;
        cache.ensure(w.interval());
        if stage_uturn(w, cache)? {
            let e = out.entry(v.interval()).or_insert(Dyadic::ZERO);
            *e = e.add(Dyadic::new(1, k + 1));
        } else {
            walk(cache, k_m, w, out)?;
        }
    }
    Ok(())
}

/// `p_h(J | x₀)` for a single interval, zero when `J` is not reachable.
pub fn orbit_probability(cache: &mut OrbitCache<'_>, k_m: u32, interval: IndexInterval) -> Result<Dyadic> {
    Ok(orbit_select_pmf(cache, k_m)?
        .into_iter()
        .find(|(iv, _)| *iv == interval)
        .map(|(_, p)| p)
        .unwrap_or(Dyadic::ZERO))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::target::{Matrix, Vector};

    fn pt(q: &[f64], p: &[f64]) -> PhasePoint {
        PhasePoint::from_slices(q, p).unwrap()
    }

    fn w(len: u32, value: u64) -> BinWord {
        BinWord::new(len, value).unwrap()
    }

    #[test]
    fn uturn_pair_examples() {
        let m = MassMatrix::identity(2);
        let left = pt(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(!uturn_pair(&m, &left, &pt(&[1.0, 0.0], &[1.0, 0.0])));
        assert!(uturn_pair(&m, &left, &pt(&[1.0, 0.0], &[-1.0, 0.0])));
        assert!(!uturn_pair(&m, &left, &pt(&[0.0, 0.0], &[-3.0, 2.0])));
    }

    #[test]
    fn uturn_pair_uses_inverse_mass() {
        // p = (1, -1), dq = (1, 1): plain dot is 0, with M⁻¹ = diag(1/4, 1) it
        // is 1/4 - 1 < 0.
        let m = MassMatrix::diagonal(Vector::from_column_slice(&[4.0, 1.0])).unwrap();
        let left = pt(&[0.0, 0.0], &[1.0, 1.0]);
        let right = pt(&[1.0, 1.0], &[1.0, -1.0]);
        assert!(uturn_pair(&m, &left, &right));
        assert!(!uturn_pair(&MassMatrix::identity(2), &left, &right));
    }

    fn gaussian_cache<'a>(t: &'a Target, m: &'a MassMatrix, h: f64, x: PhasePoint) -> OrbitCache<'a> {
        OrbitCache::new(t, LeapfrogParams::new(h, m).unwrap(), x)
    }

    #[test]
    fn cache_matches_direct_iteration() {
        let t = Target::standard_gaussian(2);
        let m = MassMatrix::identity(2);
        let x = pt(&[1.0, 0.5], &[-0.2, 0.7]);
        let mut cache = gaussian_cache(&t, &m, 0.3, x.clone());
        cache.ensure(IndexInterval::new(-9, 12));
        assert_eq!(cache.coverage(), IndexInterval::new(-9, 12));
        assert_eq!(cache.grad_evals(), 22);
        let params = LeapfrogParams::new(0.3, &m).unwrap();
        for j in -9..=12 {
            let direct = crate::leapfrog::leapfrog_iter(&t, params, &x, j).x;
            let cached = &cache.get(j).unwrap().x;
            assert!((&direct.q - &cached.q).norm() < 1e-10);
            assert!((&direct.p - &cached.p).norm() < 1e-10);
        }
        assert!(matches!(cache.get(13), Err(Error::CacheGap(13))));
        assert_eq!(cache.get(0).unwrap().x, x);
    }

    #[test]
    fn no_uturns_length_one_is_true() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let mut cache = gaussian_cache(&t, &m, 2.0, pt(&[1.0], &[-3.0]));
        for v in BinWord::all(1) {
            cache.ensure(v.interval());
            assert!(no_uturns(v, &cache).unwrap());
        }
    }

    #[test]
    fn no_uturns_gap_is_an_error() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let cache = gaussian_cache(&t, &m, 0.1, pt(&[1.0], &[0.0]));
        assert!(matches!(no_uturns(w(2, 3), &cache), Err(Error::CacheGap(_))));
    }

    #[test]
    fn no_uturns_matches_pair_enumeration() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let mut cache = gaussian_cache(&t, &m, 0.1, pt(&[1.0], &[0.0]));
        let v = w(2, 3);
        cache.ensure(v.interval());
        // Only the length-2 blocks {0,1} and {2,3} are checked for K = 2.
        let expected = !cache.pair(0, 1).unwrap() && !cache.pair(2, 3).unwrap();
        assert_eq!(no_uturns(v, &cache).unwrap(), expected);
        // Starting at rest at q = 1 the particle moves towards the origin, so
        // p_1 < 0 while q_1 < q_0: no U-turn on (0, 1).
        assert!(expected);
    }

    #[test]
    fn flat_potential_never_stops() {
        let t = Target::flat(2);
        let m = MassMatrix::identity(2);
        let mut cache = gaussian_cache(&t, &m, 0.5, pt(&[0.0, 1.0], &[0.3, -0.4]));
        for k in 1..=5u32 {
            for v in BinWord::all(k) {
                cache.ensure(v.interval());
                assert!(no_uturns(v, &cache).unwrap());
                assert_eq!(stopping_time(v, &cache).unwrap(), None);
            }
        }
        let pmf = orbit_select_pmf(&mut cache, 3).unwrap();
        assert_eq!(pmf.len(), 8);
        for (iv, p) in pmf {
            assert_eq!(iv.len(), 8);
            assert_eq!(p, Dyadic::new(1, 3));
        }
    }

    #[test]
    fn stopping_time_never_one() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let mut rng = stream_rng(3, 0);
        for _ in 0..50 {
            let x = pt(&[rng.random_range(-3.0..3.0)], &[rng.random_range(-3.0..3.0)]);
            let mut cache = gaussian_cache(&t, &m, 1.0, x);
            for v in BinWord::all(4) {
                cache.ensure(v.interval());
                assert_ne!(stopping_time(v, &cache).unwrap(), Some(1));
            }
        }
    }

    /// Brute-force stopping time straight from the definition.
    fn brute_stopping(v: BinWord, cache: &OrbitCache<'_>) -> Option<u32> {
        (1..=v.len()).find(|&k| !no_uturns(v.low_trunc(k).unwrap(), cache).unwrap())
    }

    #[test]
    fn incremental_check_matches_definition() {
        let t = Target::gaussian(Matrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0])).unwrap();
        let m = MassMatrix::diagonal(Vector::from_column_slice(&[1.0, 0.5])).unwrap();
        let mut rng = stream_rng(4, 0);
        for _ in 0..30 {
            let x = PhasePoint::new(
                Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
            )
            .unwrap();
            let h = rng.random_range(0.1..1.2);
            let mut cache = gaussian_cache(&t, &m, h, x);
            for v in BinWord::all(5) {
                cache.ensure(v.interval());
                let s = stopping_time(v, &cache).unwrap();
                assert_eq!(s, brute_stopping(v, &cache));
                // Monotone U-turn sets: passing at K means passing at every prefix.
                if no_uturns(v, &cache).unwrap() {
                    for k in 1..5 {
                        assert!(no_uturns(v.low_trunc(k).unwrap(), &cache).unwrap());
                    }
                }
                // The stopping time depends on the first S bits only.
                if let Some(k) = s {
                    for hi in 0..(1u64 << (5 - k)) {
                        let u = w(5, (hi << k) | v.low_trunc(k).unwrap().value());
                        assert_eq!(stopping_time(u, &cache).unwrap(), Some(k));
                    }
                }
            }
        }
    }

    #[test]
    fn one_level_pmf() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let mut cache = gaussian_cache(&t, &m, 0.7, pt(&[0.2], &[1.0]));
        let pmf = orbit_select_pmf(&mut cache, 1).unwrap();
        assert_eq!(
            pmf,
            vec![
                (IndexInterval::new(-1, 0), Dyadic::new(1, 1)),
                (IndexInterval::new(0, 1), Dyadic::new(1, 1)),
            ]
        );
    }

    #[test]
    fn pmf_is_exact_and_matches_prefix_enumeration() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let mut cache = gaussian_cache(&t, &m, 1.2, pt(&[1.5], &[0.3]));
        let pmf = orbit_select_pmf(&mut cache, 3).unwrap();
        let total = pmf.iter().fold(Dyadic::ZERO, |acc, (_, p)| acc.add(*p));
        assert_eq!(total, Dyadic::ONE);

        let mut counts: BTreeMap<IndexInterval, u64> = BTreeMap::new();
        for b in BinWord::all(3) {
            let k_f = stopping_time(b, &cache).unwrap().map_or(3, |s| s - 1);
            *counts.entry(b.low_trunc(k_f).unwrap().interval()).or_default() += 1;
        }
        let expected: Vec<_> = counts.into_iter().map(|(iv, c)| (iv, Dyadic::new(c, 3))).collect();
        assert_eq!(pmf, expected);
    }

    #[test]
    fn symmetry_of_orbit_law() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let params = LeapfrogParams::new(1.0, &m).unwrap();
        let mut rng = stream_rng(5, 0);
        for _ in 0..10 {
            let x = pt(&[rng.random_range(-2.0..2.0)], &[rng.random_range(-2.0..2.0)]);
            for k_m in 1..=4 {
                let mut cache = OrbitCache::new(&t, params, x.clone());
                for (iv, p) in orbit_select_pmf(&mut cache, k_m).unwrap() {
                    for j in iv.iter() {
                        let moved = cache.get(j).unwrap().x.clone();
                        let mut other = OrbitCache::new(&t, params, moved);
                        let q = orbit_probability(&mut other, k_m, iv.shift(-j)).unwrap();
                        assert_eq!(p, q, "k_m={k_m} iv={iv:?} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_hits_only_supported_intervals() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        let params = LeapfrogParams::new(0.9, &m).unwrap();
        let x = pt(&[0.4], &[1.1]);
        let mut cache = OrbitCache::new(&t, params, x.clone());
        let pmf = orbit_select_pmf(&mut cache, 4).unwrap();
        let mut rng = stream_rng(6, 0);
        for _ in 0..500 {
            let mut c = OrbitCache::new(&t, params, x.clone());
            let sel = orbit_select_sample(&mut c, 4, &mut rng).unwrap();
            assert!(pmf.iter().any(|(iv, _)| *iv == sel.i_f));
            assert_eq!(sel.i_f, sel.v.low_trunc(sel.k_f).unwrap().interval());
        }
    }

    #[test]
    fn flat_sampler_always_reaches_max_depth() {
        let t = Target::flat(1);
        let m = MassMatrix::identity(1);
        let params = LeapfrogParams::new(0.5, &m).unwrap();
        let mut rng = stream_rng(7, 0);
        for _ in 0..100 {
            let mut c = OrbitCache::new(&t, params, pt(&[0.0], &[1.0]));
            let sel = orbit_select_sample(&mut c, 3, &mut rng).unwrap();
            assert_eq!(sel.k_f, 3);
            assert_eq!(sel.i_f.len(), 8);
            assert_eq!(sel.s_f, None);
        }
    }

    #[test]
    fn divergence_stops_the_doubling() {
        let t = Target::double_well();
        let m = MassMatrix::identity(1);
        let params = LeapfrogParams::new(0.5, &m).unwrap();
        let mut cache = OrbitCache::new(&t, params, pt(&[1e40], &[0.0]));
        let pmf = orbit_select_pmf(&mut cache, 3).unwrap();
        assert_eq!(pmf, vec![(IndexInterval::new(0, 0), Dyadic::ONE)]);
    }

    #[test]
    fn dyadic_arithmetic() {
        assert_eq!(Dyadic::new(2, 2), Dyadic::new(1, 1));
        assert_eq!(Dyadic::new(1, 2).add(Dyadic::new(1, 2)), Dyadic::new(1, 1));
        assert_eq!(Dyadic::new(0, 5), Dyadic::ZERO);
        assert_eq!(Dyadic::new(3, 3).to_string(), "3/8");
        assert_eq!(Dyadic::new(3, 2).to_f64(), 0.75);
    }
}
