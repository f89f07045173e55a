//! Assembled Markov kernels: NUTS (iterative and depth-first recursive), exact
//! one-step NUTS and HMC laws, HMC/MALA, and randomized-length HMC.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binwords::{BinWord, IndexInterval};
use crate::error::{invalid, Error, Result};
use crate::index_select::{accept_ratio, log_add, log_sum_exp, multinomial_in_block, qhat, WeightTree};
use crate::leapfrog::{Direction, Integrator, LeapfrogParams, State};
use crate::orbit::{new_half, orbit_select_pmf, stage_uturn, uturn_pair, OrbitCache};
use crate::target::{hamiltonian, momentum_refresh, MassMatrix, PhasePoint, Target, Vector};

pub const DEFAULT_MAX_DEPTH: u32 = 10;
pub const MAX_DEPTH_LIMIT: u32 = 20;
/// Largest `K_m` for which the exact one-step law is enumerated.
pub const PMF_DEPTH_LIMIT: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    NutsIterative,
    NutsRecursive,
    Hmc { steps: u32 },
    Rhmc { weights: Vec<f64> },
}

/// Deliberate kernel defects, used as negative controls for the statistical
/// checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Always take the proposal from the newly built half instead of
    /// accepting it with probability `min(1, π̃(new)/π̃(old))`.
    SkipSwapUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub h: f64,
    pub k_m: u32,
    pub mass: MassMatrix,
    pub kind: KernelKind,
    pub mutation: Mutation,
}

impl KernelConfig {
    pub fn new(h: f64, k_m: u32, mass: MassMatrix, kind: KernelKind) -> Result<Self> {
        LeapfrogParams::new(h, &mass)?;
        if !(1..=MAX_DEPTH_LIMIT).contains(&k_m) {
            return Err(invalid("k_m", format!("must lie in [1, {MAX_DEPTH_LIMIT}], got {k_m}")));
        }
        match &kind {
            KernelKind::Hmc { steps } if *steps == 0 => {
                return Err(invalid("steps", "need at least one leapfrog step"));
            }
            KernelKind::Rhmc { weights } => validate_weights(weights)?,
            _ => {}
        }
        Ok(Self {
            h,
            k_m,
            mass,
            kind,
            mutation: Mutation::None,
        })
    }

    pub fn nuts(h: f64, k_m: u32, mass: MassMatrix) -> Result<Self> {
        Self::new(h, k_m, mass, KernelKind::NutsIterative)
    }

    pub fn with_kind(mut self, kind: KernelKind) -> Result<Self> {
        self.kind = kind;
        Self::new(self.h, self.k_m, self.mass, self.kind).map(|c| Self {
            mutation: self.mutation,
            ..c
        })
    }

    pub fn with_mutation(mut self, mutation: Mutation) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn params(&self) -> LeapfrogParams<'_> {
        LeapfrogParams {
            h: self.h,
            mass: &self.mass,
        }
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("weights", "empty mixture"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid("weights", "entries must be finite and nonnegative"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(invalid("weights", format!("must sum to 1, got {s}")));
    }
    Ok(())
}

/// Diagnostics of one transition. Carries no momentum: every step refreshes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionInfo {
    pub j_f: i64,
    pub interval: IndexInterval,
    pub k_f: u32,
    pub n_grad: u64,
    pub diverged: bool,
    pub accepted: Option<bool>,
}

/// A transition from a fixed phase point; `x` is the selected state.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x: PhasePoint,
    pub info: TransitionInfo,
}

/// One step of the configured kernel from position `q`.
pub fn transition<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    q: &Vector,
    rng: &mut R,
) -> Result<(Vector, TransitionInfo)> {
    match &cfg.kind {
        KernelKind::NutsIterative => nuts_step_iterative(target, cfg, q, rng),
        KernelKind::NutsRecursive => nuts_step_recursive(target, cfg, q, rng),
        KernelKind::Hmc { steps } => hmc_step(target, cfg, *steps, q, rng),
        KernelKind::Rhmc { weights } => rhmc_step(target, cfg, weights, q, rng),
    }
}

fn refresh<R: Rng + ?Sized>(target: &Target, cfg: &KernelConfig, q: &Vector, rng: &mut R) -> Result<PhasePoint> {
    if q.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: q.len(),
        });
    }
    if cfg.mass.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: cfg.mass.dim(),
        });
    }
    Ok(PhasePoint {
        q: q.clone(),
        p: momentum_refresh(&cfg.mass, rng),
    })
}

pub fn nuts_step_iterative<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    q: &Vector,
    rng: &mut R,
) -> Result<(Vector, TransitionInfo)> {
    let x0 = refresh(target, cfg, q, rng)?;
    let t = nuts_iterative_from_phase(target, cfg, x0, rng)?;
    Ok((t.x.q, t.info))
}

/// Doubling with progressive selection interleaved: at each level draw the
/// direction bit and two uniforms, extend, and update the selected index only
/// if the extended interval passes the U-turn check.
pub fn nuts_iterative_from_phase<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    x0: PhasePoint,
    rng: &mut R,
) -> Result<Transition> {
    let mut cache = OrbitCache::new(target, cfg.params(), x0);
    let mut v = BinWord::empty();
    let mut j = 0i64;
    let mut l_cur = cache.anchor().log_weight;
    let mut diverged = cache.anchor().diverged;
    if !diverged {
        for k in 0..cfg.k_m {
            let bit = rng.random_bool(0.5);
            let u_multi: f64 = rng.random();
            let u_swap: f64 = rng.random();
            let w = BinWord::new(k + 1, v.value() | ((bit as u64) << k))?;
            cache.ensure(w.interval());
            let new = new_half(w);
            if stage_uturn(w, &cache)? {
                diverged = new.iter().any(|i| cache.get(i).map(|s| s.diverged).unwrap_or(true));
                break;
            }
            let weights = new
                .iter()
                .map(|i| cache.log_weight(i))
                .collect::<Result<Vec<_>>>()?;
            let l_new = log_sum_exp(weights.iter().cloned());
            let proposal = new.lo + multinomial_in_block(&weights, 0, weights.len() as u64 - 1, l_new, u_multi) as i64;
            let accept = match cfg.mutation {
                Mutation::SkipSwapUniform => true,
                Mutation::None => u_swap < accept_ratio(l_new, l_cur),
            };
            if accept {
                j = proposal;
            }
            l_cur = log_add(l_cur, l_new);
            v = w;
        }
    }
    let info = TransitionInfo {
        j_f: j,
        interval: v.interval(),
        k_f: v.len(),
        n_grad: cache.grad_evals(),
        diverged,
        accepted: None,
    };
    Ok(Transition {
        x: cache.get(j)?.x.clone(),
        info,
    })
}

/// Counts the phase points alive at once in the recursive sampler.
#[derive(Debug, Default)]
pub struct LiveCounter {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl LiveCounter {
    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }
}

struct Node<'c> {
    state: State,
    counter: &'c LiveCounter,
}

impl<'c> Node<'c> {
    fn new(state: State, counter: &'c LiveCounter) -> Rc<Self> {
        counter.live.set(counter.live.get() + 1);
        counter.peak.set(counter.peak.get().max(counter.live.get()));
        Rc::new(Self { state, counter })
    }
}

impl Drop for Node<'_> {
    fn drop(&mut self) {
        self.counter.live.set(self.counter.live.get() - 1);
    }
}

struct Subtree<'c> {
    near: Rc<Node<'c>>,
    far: Rc<Node<'c>>,
    far_idx: i64,
    proposal: Rc<Node<'c>>,
    proposal_idx: i64,
    log_sum: f64,
    ok: bool,
}

struct Recursion<'a, 'c> {
    integ: Integrator<'a>,
    counter: &'c LiveCounter,
    diverged: Cell<bool>,
}

impl<'a, 'c> Recursion<'a, 'c> {
    /// Builds the `2^k` states beyond `start` in direction `dir`. Only the
    /// near end and the proposal of each finished half are kept.
    fn build<R: Rng + ?Sized>(
        &self,
        start: Rc<Node<'c>>,
        start_idx: i64,
        dir: Direction,
        k: u32,
        rng: &mut R,
    ) -> Subtree<'c> {
        let sign = if dir == Direction::Forward { 1 } else { -1 };
        if k == 0 {
            let next = self.integ.step(&start.state, dir);
            drop(start);
            let ok = !next.diverged;
            if !ok {
                self.diverged.set(true);
            }
            let log_sum = next.log_weight;
            let node = Node::new(next, self.counter);
            return Subtree {
                near: node.clone(),
                far: node.clone(),
                far_idx: start_idx + sign,
                proposal: node,
                proposal_idx: start_idx + sign,
                log_sum,
                ok,
            };
        }
        let first = self.build(start, start_idx, dir, k - 1, rng);
        if !first.ok {
            return first;
        }
        let Subtree {
            near,
            far,
            far_idx,
            proposal,
            proposal_idx,
            log_sum,
            ..
        } = first;
        let second = self.build(far, far_idx, dir, k - 1, rng);
        if !second.ok {
            return Subtree {
                near,
                ..second
            };
        }
        let total = log_add(log_sum, second.log_sum);
        let u: f64 = rng.random();
        let take_second = u < (second.log_sum - total).exp();
        let (proposal, proposal_idx) = if take_second {
            (second.proposal, second.proposal_idx)
        } else {
            (proposal, proposal_idx)
        };
        let ok = match dir {
            Direction::Forward => !uturn_pair(self.integ.mass, &near.state.x, &second.far.state.x),
            Direction::Backward => !uturn_pair(self.integ.mass, &second.far.state.x, &near.state.x),
        };
        Subtree {
            near,
            far: second.far,
            far_idx: second.far_idx,
            proposal,
            proposal_idx,
            log_sum: total,
            ok,
        }
    }
}

pub fn nuts_step_recursive<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    q: &Vector,
    rng: &mut R,
) -> Result<(Vector, TransitionInfo)> {
    let x0 = refresh(target, cfg, q, rng)?;
    let t = nuts_recursive_from_phase(target, cfg, x0, rng)?;
    Ok((t.x.q, t.info))
}

pub fn nuts_recursive_from_phase<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    x0: PhasePoint,
    rng: &mut R,
) -> Result<Transition> {
    let counter = LiveCounter::default();
    nuts_recursive_counted(target, cfg, x0, rng, &counter)
}

/// The depth-first sampler with an explicit live-state counter; the peak
/// number of simultaneously stored states is at most `2(K_m + 1)`.
pub fn nuts_recursive_counted<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    x0: PhasePoint,
    rng: &mut R,
    counter: &LiveCounter,
) -> Result<Transition> {
    let rec = Recursion {
        integ: Integrator::new(target, cfg.params()),
        counter,
        diverged: Cell::new(false),
    };
    let anchor = Node::new(rec.integ.state(x0), counter);
    let mut l_sum = anchor.state.log_weight;
    if anchor.state.diverged {
        rec.diverged.set(true);
    }
    let mut left = Some((anchor.clone(), 0i64));
    let mut right = Some((anchor.clone(), 0i64));
    let (mut cur, mut cur_idx) = (anchor, 0i64);
    let mut k_f = 0;
    let mut interval = IndexInterval::new(0, 0);
    if !rec.diverged.get() {
        for k in 0..cfg.k_m {
            let bit = rng.random_bool(0.5);
            let (dir, end) = if bit {
                (Direction::Forward, &mut right)
            } else {
                (Direction::Backward, &mut left)
            };
            let (start, start_idx) = end.take().expect("end present while extending");
            let sub = rec.build(start, start_idx, dir, k, rng);
            if !sub.ok {
                break;
            }
            let u: f64 = rng.random();
            let accept = match cfg.mutation {
                Mutation::SkipSwapUniform => true,
                Mutation::None => u < accept_ratio(sub.log_sum, l_sum),
            };
            if accept {
                cur = sub.proposal;
                cur_idx = sub.proposal_idx;
            }
            l_sum = log_add(l_sum, sub.log_sum);
            *end = Some((sub.far, sub.far_idx));
            k_f = k + 1;
            let (l, li) = left.as_ref().unwrap();
            let (r, ri) = right.as_ref().unwrap();
            interval = IndexInterval::new(*li, *ri);
            if uturn_pair(&cfg.mass, &l.state.x, &r.state.x) {
                break;
            }
        }
    }
    let info = TransitionInfo {
        j_f: cur_idx,
        interval,
        k_f,
        n_grad: rec.integ.grad_evals(),
        diverged: rec.diverged.get(),
        accepted: None,
    };
    Ok(Transition {
        x: cur.state.x.clone(),
        info,
    })
}

/// One entry of an exact one-step law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmfEntry {
    pub j: i64,
    pub prob: f64,
    pub q: Vec<f64>,
}

/// Exact law of the selected relative index at a fixed phase point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPMF {
    pub anchor_q: Vec<f64>,
    pub anchor_p: Vec<f64>,
    pub entries: Vec<PmfEntry>,
}

impl ExactPMF {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.prob).sum()
    }

    pub fn prob(&self, j: i64) -> f64 {
        self.entries.iter().find(|e| e.j == j).map_or(0.0, |e| e.prob)
    }

    /// Probabilities over `lo..=hi` in index order.
    pub fn dense(&self, lo: i64, hi: i64) -> Vec<f64> {
        (lo..=hi).map(|j| self.prob(j)).collect()
    }
}

/// A dynamic-HMC scheme: a law on index sets containing 0, then a law on the
/// chosen set, both read off the orbit of the anchor.
pub trait DynamicScheme {
    /// Index sets with their probabilities.
    fn orbit_law(&self, cache: &mut OrbitCache<'_>) -> Result<Vec<(Vec<i64>, f64)>>;
    /// Probabilities of each index of `set`, in the order of `set`.
    fn index_law(&self, set: &[i64], cache: &OrbitCache<'_>) -> Result<Vec<f64>>;
}

pub struct NutsScheme {
    pub k_m: u32,
}

impl DynamicScheme for NutsScheme {
    fn orbit_law(&self, cache: &mut OrbitCache<'_>) -> Result<Vec<(Vec<i64>, f64)>> {
        Ok(orbit_select_pmf(cache, self.k_m)?
            .into_iter()
            .map(|(iv, p)| (iv.iter().collect(), p.to_f64()))
            .collect())
    }

    fn index_law(&self, set: &[i64], cache: &OrbitCache<'_>) -> Result<Vec<f64>> {
        let iv = IndexInterval::new(set[0], *set.last().unwrap());
        let v = iv.word().ok_or_else(|| invalid("set", "not a doubling interval"))?;
        let tree = WeightTree::from_orbit(cache, v)?;
        let origin = v.iota(0);
        Ok(set.iter().map(|&j| qhat(&tree, origin, v.iota(j))).collect())
    }
}

/// HMC with `T` steps as a dynamic scheme: the set `{0, T}` with probability
/// one and a Metropolis choice between its two points.
pub struct HmcScheme {
    pub steps: u32,
}

impl DynamicScheme for HmcScheme {
    fn orbit_law(&self, cache: &mut OrbitCache<'_>) -> Result<Vec<(Vec<i64>, f64)>> {
        cache.extend_to(self.steps as i64);
        Ok(vec![(vec![0, self.steps as i64], 1.0)])
    }

    fn index_law(&self, set: &[i64], cache: &OrbitCache<'_>) -> Result<Vec<f64>> {
        let a = accept_ratio(cache.log_weight(set[1])?, cache.log_weight(set[0])?);
        Ok(vec![1.0 - a, a])
    }
}

/// `Σ_J P(J | x₀) Σ_{j∈J} Q(j | J, x₀) δ_j`.
pub fn scheme_exact_pmf(
    scheme: &dyn DynamicScheme,
    target: &Target,
    params: LeapfrogParams<'_>,
    x0: &PhasePoint,
) -> Result<ExactPMF> {
    let mut cache = OrbitCache::new(target, params, x0.clone());
    let law = scheme.orbit_law(&mut cache)?;
    let mut acc: BTreeMap<i64, f64> = BTreeMap::new();
    for (set, p) in law {
        let q = scheme.index_law(&set, &cache)?;
        for (&j, qj) in set.iter().zip(q) {
            *acc.entry(j).or_insert(0.0) += p * qj;
        }
    }
    let entries = acc
        .into_iter()
        .map(|(j, prob)| {
            Ok(PmfEntry {
                j,
                prob,
                q: cache.get(j)?.x.q.iter().cloned().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExactPMF {
        anchor_q: x0.q.iter().cloned().collect(),
        anchor_p: x0.p.iter().cloned().collect(),
        entries,
    })
}

/// Exact one-step NUTS law at `x0` by enumerating every doubling record.
pub fn nuts_exact_pmf(target: &Target, cfg: &KernelConfig, x0: &PhasePoint) -> Result<ExactPMF> {
    if cfg.k_m > PMF_DEPTH_LIMIT {
        return Err(Error::BudgetExceeded {
            k_m: cfg.k_m,
            limit: PMF_DEPTH_LIMIT,
        });
    }
    scheme_exact_pmf(&NutsScheme { k_m: cfg.k_m }, target, cfg.params(), x0)
}

/// `α = min(1, exp(H(x₀) - H(Φ^{∘(T)}(x₀))))`, zero for a diverged proposal.
pub fn hmc_acceptance(target: &Target, cfg: &KernelConfig, x0: &PhasePoint, steps: u32) -> Result<f64> {
    let h0 = hamiltonian(target, &cfg.mass, x0)?;
    let out = crate::leapfrog::leapfrog_iter(target, cfg.params(), x0, steps as i64);
    if out.diverged {
        return Ok(0.0);
    }
    let h1 = hamiltonian(target, &cfg.mass, &out.x)?;
    Ok(accept_ratio(-h1, -h0))
}

pub fn hmc_step<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    steps: u32,
    q: &Vector,
    rng: &mut R,
) -> Result<(Vector, TransitionInfo)> {
    let x0 = refresh(target, cfg, q, rng)?;
    let t = hmc_from_phase(target, cfg, steps, x0, rng)?;
    Ok((t.x.q, t.info))
}

pub fn hmc_from_phase<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    steps: u32,
    x0: PhasePoint,
    rng: &mut R,
) -> Result<Transition> {
    if steps == 0 {
        return Err(invalid("steps", "need at least one leapfrog step"));
    }
    let integ = Integrator::new(target, cfg.params());
    let s0 = integ.state(x0);
    let s1 = integ.iterate(&s0, steps as i64);
    let alpha = if s1.diverged {
        0.0
    } else {
        accept_ratio(s1.log_weight, s0.log_weight)
    };
    let u: f64 = rng.random();
    let accepted = u < alpha;
    let info = TransitionInfo {
        j_f: if accepted { steps as i64 } else { 0 },
        interval: IndexInterval::new(0, steps as i64),
        k_f: 0,
        n_grad: integ.grad_evals(),
        diverged: s1.diverged,
        accepted: Some(accepted),
    };
    Ok(Transition {
        x: if accepted { s1.x } else { s0.x },
        info,
    })
}

/// Draws a trajectory length `T = j` with probability `weights[j - 1]`.
pub fn draw_length<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 1;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last = i as u32 + 1;
        }
        acc += w;
        if u < acc {
            return i as u32 + 1;
        }
    }
    last
}

pub fn rhmc_step<R: Rng + ?Sized>(
    target: &Target,
    cfg: &KernelConfig,
    weights: &[f64],
    q: &Vector,
    rng: &mut R,
) -> Result<(Vector, TransitionInfo)> {
    validate_weights(weights)?;
    let steps = draw_length(weights, rng);
    hmc_step(target, cfg, steps, q, rng)
}
