//! Integer encodings for products, product lines and competitive scenarios.
//!
//! * A product is a level tuple (one level per feature, 0-based); its rank is
//!   the mixed-radix number with feature 0 (price) as the most significant digit.
//! * A line is an unordered set of `line_size` distinct product ranks; its rank
//!   follows the combinatorial number system over the ascending tuple
//!   (`rank = Σ_i C(c_i, i + 1)`).
//! * A complete scenario assigns one line to each firm; its rank is
//!   `Σ_w a_w · A^(W - 1 - w)` with firm 0 most significant. A partial scenario
//!   drops one firm and keeps the remaining firms in their original order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever any rank layout changes; stored in table checkpoints.
pub const CODEC_VERSION: u32 = 1;

/// `C(n, k)`, or `None` on `u128` overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        // acc * (n - k + i) / i stays integral at every step
        acc = acc.checked_mul(n as u128 - k as u128 + i)? / i;
    }
    Some(acc)
}

pub fn checked_pow(base: u128, exp: u32) -> Option<u128> {
    let mut acc: u128 = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base)?;
    }
    Some(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductCodec {
    pub n_features: usize,
    pub n_levels: usize,
}

impl ProductCodec {
    pub fn new(n_features: usize, n_levels: usize) -> Result<Self> {
        if n_features == 0 || n_levels < 2 {
            return Err(Error::dim(format!(
                "product codec needs >= 1 feature and >= 2 levels, got {n_features}x{n_levels}"
            )));
        }
        let tau = checked_pow(n_levels as u128, n_features as u32)
            .filter(|&t| t <= u32::MAX as u128)
            .ok_or_else(|| Error::Capacity {
                what: "product configurations".into(),
                value: u128::MAX,
                limit: u32::MAX as u128,
            })?;
        debug_assert!(tau > 0);
        Ok(Self { n_features, n_levels })
    }

    /// Number of product configurations, `m^l`.
    pub fn n_products(&self) -> usize {
        self.n_levels.pow(self.n_features as u32)
    }

    pub fn encode(&self, levels: &[usize]) -> usize {
        debug_assert_eq!(levels.len(), self.n_features);
        levels.iter().fold(0, |acc, &lv| {
            debug_assert!(lv < self.n_levels);
            acc * self.n_levels + lv
        })
    }

    pub fn decode_into(&self, mut rank: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = rank % self.n_levels;
            rank /= self.n_levels;
        }
    }

    pub fn decode(&self, rank: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_features];
        self.decode_into(rank, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineCodec {
    pub n_products: usize,
    pub line_size: usize,
    n_lines: usize,
}

impl LineCodec {
    pub fn new(n_products: usize, line_size: usize) -> Result<Self> {
        if line_size == 0 || line_size > n_products {
            return Err(Error::dim(format!(
                "line size {line_size} must lie in 1..={n_products}"
            )));
        }
        let n = binomial(n_products as u64, line_size as u64)
            .filter(|&a| a <= u32::MAX as u128)
            .ok_or_else(|| Error::Capacity {
                what: "line configurations".into(),
                value: binomial(n_products as u64, line_size as u64).unwrap_or(u128::MAX),
                limit: u32::MAX as u128,
            })?;
        Ok(Self { n_products, line_size, n_lines: n as usize })
    }

    /// Number of line configurations, `C(tau, q)`.
    pub fn n_lines(&self) -> usize {
        self.n_lines
    }

    /// Rank of a strictly ascending product tuple.
    pub fn encode(&self, products: &[usize]) -> usize {
        debug_assert_eq!(products.len(), self.line_size);
        debug_assert!(products.windows(2).all(|w| w[0] < w[1]));
        products
            .iter()
            .enumerate()
            .map(|(i, &c)| binomial(c as u64, i as u64 + 1).unwrap() as usize)
            .sum()
    }

    /// Rank of an arbitrary-order set of distinct products.
    pub fn encode_unsorted(&self, products: &[usize]) -> usize {
        let mut sorted = products.to_vec();
        sorted.sort_unstable();
        self.encode(&sorted)
    }

    pub fn decode_into(&self, mut rank: usize, out: &mut [usize]) {
        debug_assert!(rank < self.n_lines);
        let mut hi = self.n_products;
        for i in (0..self.line_size).rev() {
            let k = i as u64 + 1;
            // largest c < hi with C(c, k) <= rank
            let (mut lo, mut up) = (i, hi - 1);
            while lo < up {
                let mid = (lo + up).div_ceil(2);
                if binomial(mid as u64, k).unwrap() as usize <= rank {
                    lo = mid;
                } else {
                    up = mid - 1;
                }
            }
            out[i] = lo;
            rank -= binomial(lo as u64, k).unwrap() as usize;
            hi = lo;
        }
    }

    pub fn decode(&self, rank: usize) -> Vec<usize> {
        let mut out = vec![0; self.line_size];
        self.decode_into(rank, &mut out);
        out
    }

    /// All lines in rank order, flattened (`n_lines * line_size`).
    pub fn table(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.n_lines * self.line_size];
        let mut buf = vec![0usize; self.line_size];
        for r in 0..self.n_lines {
            self.decode_into(r, &mut buf);
            for (o, &b) in out[r * self.line_size..].iter_mut().zip(&buf) {
                *o = b as u32;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCodec {
    pub n_lines: usize,
    pub n_firms: usize,
}

impl ScenarioCodec {
    pub fn new(n_lines: usize, n_firms: usize) -> Result<Self> {
        if n_firms < 2 {
            return Err(Error::dim(format!("need >= 2 firms, got {n_firms}")));
        }
        let k = checked_pow(n_lines as u128, n_firms as u32);
        match k {
            Some(k) if k <= usize::MAX as u128 => Ok(Self { n_lines, n_firms }),
            _ => Err(Error::Capacity {
                what: "competitive scenarios".into(),
                value: k.unwrap_or(u128::MAX),
                limit: usize::MAX as u128,
            }),
        }
    }

    /// Number of complete scenarios, `A^W`.
    pub fn n_scenarios(&self) -> usize {
        self.n_lines.pow(self.n_firms as u32)
    }

    /// Number of partial scenarios, `A^(W-1)`.
    pub fn n_partial(&self) -> usize {
        self.n_lines.pow(self.n_firms as u32 - 1)
    }

    pub fn encode(&self, lines: &[usize]) -> usize {
        debug_assert_eq!(lines.len(), self.n_firms);
        lines.iter().fold(0, |acc, &a| acc * self.n_lines + a)
    }

    pub fn decode_into(&self, mut rank: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = rank % self.n_lines;
            rank /= self.n_lines;
        }
    }

    pub fn decode(&self, rank: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_firms];
        self.decode_into(rank, &mut out);
        out
    }

    /// Rank of the partial scenario seen by `firm` (all other firms, in order).
    pub fn partial_of(&self, lines: &[usize], firm: usize) -> usize {
        lines
            .iter()
            .enumerate()
            .filter(|&(w, _)| w != firm)
            .fold(0, |acc, (_, &a)| acc * self.n_lines + a)
    }

    /// Complete scenario rank with firm 0 holding `line` against `partial`.
    pub fn complete_from_first(&self, line: usize, partial: usize) -> usize {
        line * self.n_partial() + partial
    }

    pub fn decode_partial(&self, rank: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_firms - 1];
        let mut r = rank;
        for slot in out.iter_mut().rev() {
            *slot = r % self.n_lines;
            r /= self.n_lines;
        }
        out
    }
}
