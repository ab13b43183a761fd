//! Global accuracy parameters derived from `epsilon = 1/E`.

use crate::rational::{floor_log2, pow2_neg, rat, rat_int, Rational};
use serde::{Deserialize, Serialize};

/// Implementation constants for measured (not proven) per-event bounds.
/// They are pinned here so the test suites assert against fixed values.
pub mod constants {
    /// `||y' - y||_1 <= K_IMPROVE_DISTANCE * (m + alpha) / delta` per improve call.
    pub const K_IMPROVE_DISTANCE: u64 = 4;
    /// Repacked bins per event `<= K_REPACKED_BINS * (1/eps^3) * log2(1/eps)`.
    pub const K_REPACKED_BINS: u64 = 6;
    /// Mixed small-item moved size `<= K_SMALL_MIXED / eps * s(trigger)`.
    pub const K_SMALL_MIXED: u64 = 28;
    /// Per-event migration factor `<= K_MIGRATION * (1/eps^4) * log2(1/eps)`.
    pub const K_MIGRATION: u64 = 16;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    /// `E = 1/epsilon`, integral by assumption.
    pub e: u64,
}

impl Params {
    /// `E >= 4` keeps `epsilon <= 1/4`, the strictest of the assumptions
    /// the analysis relies on.
    pub fn new(e: u64) -> Result<Self, String> {
        if e < 4 {
            return Err(format!("1/epsilon must be >= 4, got {e}"));
        }
        Ok(Params { e })
    }

    pub fn epsilon(&self) -> Rational {
        rat(1, self.e as i64)
    }

    /// `delta = epsilon`.
    pub fn delta(&self) -> Rational {
        self.epsilon()
    }

    /// `Delta = 2*eps + eps^2` (with `delta = eps`).
    pub fn big_delta(&self) -> Rational {
        let eps = self.epsilon();
        &eps + &eps + &eps * &eps
    }

    /// Items of size below `eps/14` are small.
    pub fn small_threshold(&self) -> Rational {
        rat(1, 14 * self.e as i64)
    }

    pub fn is_large(&self, size: &Rational) -> bool {
        *size >= self.small_threshold()
    }

    /// `floor(log2(1/eps))`, the log term in the group-size parameter.
    pub fn floor_log_inv_eps(&self) -> u32 {
        floor_log2(self.e)
    }

    /// Largest size category a large item can fall into:
    /// sizes are `>= eps/14`, so `l <= floor(log2(14/eps))`.
    pub fn max_category(&self) -> u32 {
        floor_log2(14 * self.e)
    }

    /// `kappa = SIZE(I_L) * eps / (2 (floor(log2(1/eps)) + 5))`.
    pub fn kappa(&self, large_size: &Rational) -> Rational {
        let denom = 2 * (self.floor_log_inv_eps() as i64 + 5);
        large_size * self.epsilon() / rat_int(denom)
    }

    /// Non-empty group count bound `(8/eps + 2)(ceil(log2(1/eps)) + 5)`,
    /// valid once `SIZE(I_L)` exceeds [`Params::group_bound_size_threshold`].
    pub fn group_count_bound(&self) -> u64 {
        (8 * self.e + 2) * (crate::rational::ceil_log2(self.e) as u64 + 5)
    }

    /// `(8/eps)(ceil(log2(1/eps)) + 5)`.
    pub fn group_bound_size_threshold(&self) -> Rational {
        rat_int((8 * self.e * (crate::rational::ceil_log2(self.e) as u64 + 5)) as i64)
    }

    /// Lower end of size category `l`: item sizes satisfy `2^-(l+1) < s <= 2^-l`.
    pub fn category_lower(&self, l: u32) -> Rational {
        pow2_neg(l + 1)
    }

    pub fn category_upper(&self, l: u32) -> Rational {
        pow2_neg(l)
    }

    /// Small-item size interval `S_j = [eps/2^(j+1), eps/2^j)`, `j >= 1`.
    pub fn small_cat_lower(&self, j: u32) -> Rational {
        self.epsilon() * pow2_neg(j + 1)
    }

    pub fn small_cat_upper(&self, j: u32) -> Rational {
        self.epsilon() * pow2_neg(j)
    }

    /// Queue length bounds `1/eps` and `2/eps`.
    pub fn queue_min(&self) -> usize {
        self.e as usize
    }

    pub fn queue_max(&self) -> usize {
        2 * self.e as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_eps_above_quarter() {
        assert!(Params::new(3).is_err());
        assert!(Params::new(4).is_ok());
    }

    #[test]
    fn derived_values_for_eps_quarter() {
        let p = Params::new(4).unwrap();
        assert_eq!(p.epsilon(), rat(1, 4));
        assert_eq!(p.big_delta(), rat(9, 16));
        assert_eq!(p.small_threshold(), rat(1, 56));
        assert_eq!(p.floor_log_inv_eps(), 2);
        // kappa denominator is 2*(2+5) = 14
        assert_eq!(p.kappa(&rat_int(56)), rat_int(1));
        // (8*4+2)*(2+5) = 238
        assert_eq!(p.group_count_bound(), 238);
        assert_eq!(p.max_category(), 5);
    }

    #[test]
    fn derived_values_for_eps_seventh() {
        let p = Params::new(7).unwrap();
        assert_eq!(p.floor_log_inv_eps(), 2);
        assert_eq!(p.kappa(&rat_int(98)), rat_int(1));
        assert_eq!(p.group_count_bound(), (8 * 7 + 2) * 8);
    }
}
