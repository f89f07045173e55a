//! The index-selection kernel: subtree weights, the rejection product, the
//! closed-form transition rows, and the progressive sampler.
//!
//! Leaves are addressed by `a ∈ [0, 2^K - 1]`, i.e. after the shift `ι` that
//! maps the signed interval onto `[0, 2^K - 1]`. The subtree of depth `n`
//! labelled `u ∈ [0, 2^n - 1]` holds the leaves whose `n` most-significant
//! bits equal `u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binwords::{BinWord, IndexInterval};
use crate::error::{invalid, Error, Result};
use crate::orbit::OrbitCache;

/// `log(e^a + e^b)` with `-∞` handled.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `min(1, e^{num - den})`, with the `0/0` case defined as `0`.
pub fn accept_ratio(log_num: f64, log_den: f64) -> f64 {
    if log_num == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_num >= log_den {
        1.0
    } else {
        (log_num - log_den).exp()
    }
}

/// Log-weights of every subtree of a complete binary tree of depth `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTree {
    depth: u32,
    // levels[n][u] = log π̃_n(u); levels[K] are the leaves.
    levels: Vec<Vec<f64>>,
}

impl WeightTree {
    pub fn from_leaves(leaves: Vec<f64>) -> Result<Self> {
        if !leaves.len().is_power_of_two() {
            return Err(invalid("leaves", format!("length {} is not a power of two", leaves.len())));
        }
        let depth = leaves.len().trailing_zeros();
        let mut levels = vec![leaves];
        for _ in 0..depth {
            let prev = levels.last().unwrap();
            let next: Vec<f64> = prev.chunks(2).map(|c| log_add(c[0], c[1])).collect();
            levels.push(next);
        }
        levels.reverse();
        Ok(Self { depth, levels })
    }

    /// Leaves `a ↦ -H(Φ^{∘(ι⁻¹(a))}(x₀))` over the interval generated by `v`.
    pub fn from_orbit(cache: &OrbitCache<'_>, v: BinWord) -> Result<Self> {
        let leaves = (0..1u64 << v.len())
            .map(|a| cache.log_weight(v.iota_inv(a)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_leaves(leaves)
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn size(&self) -> u64 {
        1u64 << self.depth
    }

    /// `log π̃_n(u)`.
    pub fn log_weight(&self, n: u32, u: u64) -> f64 {
        self.levels[n as usize][u as usize]
    }

    pub fn leaf(&self, a: u64) -> f64 {
        self.levels[self.depth as usize][a as usize]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.levels[self.depth as usize]
    }

    /// Probability of rejecting the swap at level `i` (0 = top) when sitting
    /// at leaf `a`: `1 - min(1, π̃_{i+1}(sibling) / π̃_{i+1}(own))`.
    fn stay_factor(&self, a: u64, i: u32) -> f64 {
        let own = a >> (self.depth - i - 1);
        let lo = self.log_weight(i + 1, own);
        let ls = self.log_weight(i + 1, own ^ 1);
        if lo == f64::NEG_INFINITY && ls == f64::NEG_INFINITY {
            return 1.0;
        }
        if ls >= lo {
            0.0
        } else {
            -(ls - lo).exp_m1()
        }
    }

    fn swap_prob(&self, a: u64, i: u32) -> f64 {
        let own = a >> (self.depth - i - 1);
        accept_ratio(self.log_weight(i + 1, own ^ 1), self.log_weight(i + 1, own))
    }
}

/// `Π(a, t)`: probability of rejecting the first `t` top-down swaps from `a`.
pub fn rejection_product(tree: &WeightTree, a: u64, t: u32) -> Result<f64> {
    if t > tree.depth {
        return Err(invalid("t", format!("{t} > depth {}", tree.depth)));
    }
    if a >= tree.size() {
        return Err(invalid("a", format!("{a} outside the tree")));
    }
    Ok((0..t).map(|i| tree.stay_factor(a, i)).product())
}

/// Length of the common most-significant-bit prefix of two depth-`K` leaves.
pub fn common_prefix(depth: u32, a: u64, b: u64) -> u32 {
    depth - (64 - (a ^ b).leading_zeros())
}

/// `q̂(a, b)` in closed form.
pub fn qhat(tree: &WeightTree, a: u64, b: u64) -> f64 {
    let k = tree.depth;
    if a == b {
        return (0..k).map(|i| tree.stay_factor(a, i)).product();
    }
    let n = common_prefix(k, a, b);
    let pi_n: f64 = (0..n).map(|i| tree.stay_factor(a, i)).product();
    if pi_n == 0.0 {
        return 0.0;
    }
    let sib = (a >> (k - n - 1)) ^ 1;
    let l_sib = tree.log_weight(n + 1, sib);
    if l_sib == f64::NEG_INFINITY {
        return 0.0;
    }
    pi_n * tree.swap_prob(a, n) * (tree.leaf(b) - l_sib).exp()
}

/// One row `b ↦ q̂(a, b)` of the index kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexKernelRow {
    pub origin: u64,
    pub probs: Vec<f64>,
}

pub fn qhat_row(tree: &WeightTree, a: u64) -> IndexKernelRow {
    IndexKernelRow {
        origin: a,
        probs: (0..tree.size()).map(|b| qhat(tree, a, b)).collect(),
    }
}

/// The full `2^K × 2^K` matrix of `q̂`, row-major.
pub fn qhat_matrix(tree: &WeightTree) -> Vec<Vec<f64>> {
    (0..tree.size()).map(|a| qhat_row(tree, a).probs).collect()
}

/// `q_h(j | I, x₀)`: probability that the index kernel moves from the anchor
/// to relative index `j` within the interval `I`.
pub fn q_h(j: i64, interval: IndexInterval, cache: &OrbitCache<'_>) -> Result<f64> {
    if !interval.contains(j) {
        return Err(Error::IndexOutOfInterval {
            index: j,
            lo: interval.lo,
            hi: interval.hi,
        });
    }
    let v = interval
        .word()
        .ok_or_else(|| invalid("interval", format!("{interval:?} is not a doubling interval")))?;
    let tree = WeightTree::from_orbit(cache, v)?;
    Ok(qhat(&tree, v.iota(0), v.iota(j)))
}

/// Inverse-CDF draw over the leaves `lo..=hi` with weights `e^{w - total}`,
/// scanning in ascending order.
pub fn multinomial_in_block(leaves: &[f64], lo: u64, hi: u64, total: f64, u: f64) -> u64 {
    let mut acc = 0.0;
    let mut last_positive = lo;
    for a in lo..=hi {
        let w = leaves[a as usize];
        if w == f64::NEG_INFINITY {
            continue;
        }
        last_positive = a;
        acc += (w - total).exp();
        if u < acc {
            return a;
        }
    }
    last_positive
}

/// Runs the progressive sampler level by level on a full tree and returns the
/// selected leaf. `v` is the doubling record the tree was built from; two
/// uniforms are drawn per level (multinomial, then swap).
pub fn progressive_sample<R: Rng + ?Sized>(tree: &WeightTree, v: BinWord, rng: &mut R) -> u64 {
    assert_eq!(tree.depth, v.len());
    let origin = v.iota(0);
    let mut current = origin;
    let leaves = tree.leaves();
    for k in 0..tree.depth {
        let u_multi: f64 = rng.random();
        let u_swap: f64 = rng.random();
        let old = origin >> k;
        let new = old ^ 1;
        let n = tree.depth - k;
        let (l_old, l_new) = (tree.log_weight(n, old), tree.log_weight(n, new));
        if l_new == f64::NEG_INFINITY {
            continue;
        }
        let lo = new << k;
        let hi = lo + (1u64 << k) - 1;
        let proposal = multinomial_in_block(leaves, lo, hi, l_new, u_multi);
        if u_swap < accept_ratio(l_new, l_old) {
            current = proposal;
        }
    }
    current
}
