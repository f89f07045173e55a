//! Binary words and the signed index intervals they generate.
//!
//! A word of length `K` is a sequence `v_{K-1} ... v_0` of bits, identified with
//! the integer `sum v_k 2^k` in `[0, 2^K - 1]`. In the doubling construction the
//! bit `v_k` records whether the `k`-th extension went right (`1`) or left (`0`),
//! and the word determines the interval of leapfrog indices built so far.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported word length.
pub const MAX_LEN: u32 = 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinWord {
    len: u32,
    value: u64,
}

impl BinWord {
    pub fn new(len: u32, value: u64) -> Result<Self> {
        if len > MAX_LEN {
            return Err(crate::error::invalid("len", format!("{len} > {MAX_LEN}")));
        }
        if value >= 1u64 << len {
            return Err(crate::error::invalid(
                "value",
                format!("{value} does not fit in {len} bits"),
            ));
        }
        Ok(Self { len, value })
    }

    /// The empty word.
    pub const fn empty() -> Self {
        Self { len: 0, value: 0 }
    }

    /// Builds a word from bits listed least-significant first.
    pub fn from_bits_lsb(bits: &[bool]) -> Self {
        assert!(bits.len() as u32 <= MAX_LEN);
        let value = bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i));
        Self {
            len: bits.len() as u32,
            value,
        }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    /// Bit `v_i`, with `v_0` the least significant.
    pub fn bit(&self, i: u32) -> bool {
        assert!(i < self.len, "bit {i} of a word of length {}", self.len);
        (self.value >> i) & 1 == 1
    }

    /// Appends `self` in front of `rhs`: the result is `self * 2^{|rhs|} + rhs`.
    pub fn concat(self, rhs: BinWord) -> BinWord {
        let len = self.len + rhs.len;
        assert!(len <= MAX_LEN, "concatenated word too long");
        BinWord {
            len,
            value: (self.value << rhs.len) | rhs.value,
        }
    }

    /// The `n` least-significant bits, `v_{n-1} ... v_0`.
    pub fn low_trunc(self, n: u32) -> Result<BinWord> {
        if n > self.len {
            return Err(Error::TruncationTooLong { n, len: self.len });
        }
        Ok(BinWord {
            len: n,
            value: self.value & mask(n),
        })
    }

    /// The `n` most-significant bits, `v_{K-1} ... v_{K-n}`.
    pub fn high_trunc(self, n: u32) -> Result<BinWord> {
        if n > self.len {
            return Err(Error::TruncationTooLong { n, len: self.len });
        }
        Ok(BinWord {
            len: n,
            value: self.value >> (self.len - n),
        })
    }

    /// Number of points to the left of the origin in [`BinWord::interval`].
    pub fn t_minus(&self) -> u64 {
        mask(self.len) - self.value
    }

    /// Number of points to the right of the origin in [`BinWord::interval`].
    pub fn t_plus(&self) -> u64 {
        self.value
    }

    /// The signed index interval `{-T_-, ..., T_+}`, i.e. `[0, 2^K - 1]` shifted
    /// left by `2^K - 1 - v`.
    pub fn interval(&self) -> IndexInterval {
        IndexInterval {
            lo: -(self.t_minus() as i64),
            hi: self.t_plus() as i64,
        }
    }

    /// The order-preserving bijection from [`BinWord::interval`] onto `[0, 2^K - 1]`.
    pub fn iota(&self, c: i64) -> u64 {
        let shifted = c + self.t_minus() as i64;
        debug_assert!(shifted >= 0 && (shifted as u64) <= mask(self.len));
        shifted as u64
    }

    /// Inverse of [`BinWord::iota`].
    pub fn iota_inv(&self, a: u64) -> i64 {
        a as i64 - self.t_minus() as i64
    }

    /// Iterates over all words of length `len` in increasing order.
    pub fn all(len: u32) -> impl Iterator<Item = BinWord> {
        assert!(len <= MAX_LEN);
        (0..1u64 << len).map(move |value| BinWord { len, value })
    }
}

impl std::fmt::Display for BinWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.len == 0 {
            return write!(f, "ε");
        }
        write!(f, "{:0width$b}", self.value, width = self.len as usize)
    }
}

fn mask(n: u32) -> u64 {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// A contiguous range of integers `lo ..= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexInterval {
    pub lo: i64,
    pub hi: i64,
}

impl IndexInterval {
    pub fn new(lo: i64, hi: i64) -> Self {
        assert!(lo <= hi, "empty interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn len(&self) -> u64 {
        (self.hi - self.lo + 1) as u64
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, j: i64) -> bool {
        self.lo <= j && j <= self.hi
    }

    pub fn shift(&self, by: i64) -> Self {
        Self {
            lo: self.lo + by,
            hi: self.hi + by,
        }
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<i64> {
        self.lo..=self.hi
    }

    /// Recovers the generating word when the interval contains 0 and has
    /// power-of-two length.
    pub fn word(&self) -> Option<BinWord> {
        if !self.contains(0) || !self.len().is_power_of_two() {
            return None;
        }
        let len = self.len().trailing_zeros();
        BinWord::new(len, self.hi as u64).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(len: u32, value: u64) -> BinWord {
        BinWord::new(len, value).unwrap()
    }

    #[test]
    fn concat_examples() {
        assert_eq!(w(2, 0b10).concat(w(1, 1)), w(3, 0b101));
        assert_eq!(w(1, 0).concat(w(3, 0b110)).value(), 0b110);
        assert_eq!(w(1, 0).concat(w(3, 0b110)).len(), 4);
    }

    #[test]
    fn truncations() {
        let a = w(4, 0b1101);
        assert_eq!(a.low_trunc(2).unwrap(), w(2, 0b01));
        assert_eq!(a.low_trunc(4).unwrap(), a);
        assert_eq!(a.low_trunc(0).unwrap(), BinWord::empty());
        assert_eq!(a.high_trunc(2).unwrap(), w(2, 0b11));
        assert_eq!(a.high_trunc(4).unwrap(), a);
        assert!(matches!(
            a.low_trunc(5),
            Err(Error::TruncationTooLong { n: 5, len: 4 })
        ));
        assert!(a.high_trunc(5).is_err());
    }

    #[test]
    fn interval_examples() {
        assert_eq!(w(2, 1).interval(), IndexInterval::new(-2, 1));
        assert_eq!(w(3, 7).interval(), IndexInterval::new(0, 7));
        assert_eq!(w(3, 0).interval(), IndexInterval::new(-7, 0));
        assert_eq!(w(1, 0).interval(), IndexInterval::new(-1, 0));
        assert_eq!(w(1, 1).interval(), IndexInterval::new(0, 1));
    }

    #[test]
    fn interval_matches_shifted_block_exhaustively() {
        for k in 1..=12u32 {
            for v in BinWord::all(k) {
                let shift = (1i64 << k) - 1 - v.value() as i64;
                let expected = IndexInterval::new(-shift, (1i64 << k) - 1 - shift);
                assert_eq!(v.interval(), expected);
                assert_eq!(expected.word(), Some(v));
            }
        }
    }

    #[test]
    fn nesting_adds_half_on_the_recorded_side() {
        for k in 1..=10u32 {
            for v in BinWord::all(k) {
                for j in 0..k {
                    let inner = v.low_trunc(j).unwrap().interval();
                    let outer = v.low_trunc(j + 1).unwrap().interval();
                    assert!(outer.lo <= inner.lo && inner.hi <= outer.hi);
                    let added = 1i64 << j;
                    if v.bit(j) {
                        assert_eq!((outer.lo, outer.hi), (inner.lo, inner.hi + added));
                    } else {
                        assert_eq!((outer.lo, outer.hi), (inner.lo - added, inner.hi));
                    }
                }
            }
        }
    }

    #[test]
    fn iota_maps_interval_onto_block() {
        for k in 1..=8u32 {
            for v in BinWord::all(k) {
                let image: Vec<u64> = v.interval().iter().map(|c| v.iota(c)).collect();
                let block: Vec<u64> = (0..1u64 << k).collect();
                assert_eq!(image, block);
                for a in block {
                    assert_eq!(v.iota(v.iota_inv(a)), a);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn high_low_partition(len in 0u32..40, raw in any::<u64>(), n_frac in 0.0f64..=1.0) {
            let value = raw & mask(len);
            let a = w(len, value);
            let n = ((len as f64) * n_frac).floor() as u32;
            let rebuilt = a.high_trunc(n).unwrap().concat(a.low_trunc(len - n).unwrap());
            prop_assert_eq!(rebuilt, a);
        }

        #[test]
        fn prefix_disagreement_is_monotone(len in 1u32..30, x in any::<u64>(), y in any::<u64>()) {
            let a = w(len, x & mask(len));
            let b = w(len, y & mask(len));
            for n in 0..=len {
                if a.high_trunc(n).unwrap() != b.high_trunc(n).unwrap() {
                    for l in n..=len {
                        prop_assert_ne!(a.high_trunc(l).unwrap(), b.high_trunc(l).unwrap());
                    }
                }
            }
        }
    }
}
