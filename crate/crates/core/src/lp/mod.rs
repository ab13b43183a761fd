//! Configuration LP over rounded sizes: instance construction, the exact
//! ratio-certified solver, and the coupled solution pair with its
//! improvement procedures.

pub mod improve;
pub mod pair;
pub mod simplex;
pub mod solve;

pub use improve::{improve, reduce_components, row_count, ImproveError, ImproveStats, ReduceStats};
pub use pair::{config_key, ConfigKey, LpViolation, PackedSolution, PairEntry};
pub use solve::{
    approx_solve, canonical, enumerate_maximal, exact_lin_for_items, ColumnPool, SizeConfig,
    SizeLp, SizeSolution,
};

use crate::rational::{format_rational, Rational};
use crate::rounding::RoundingState;
use std::collections::BTreeMap;

/// The merged-row LP view: one demand row per distinct rounded size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LpInstance {
    /// Distinct rounded sizes, descending.
    pub sizes: Vec<Rational>,
    /// Demand per size: total cardinality of the groups rounding to it.
    pub demand: Vec<u64>,
}

impl LpInstance {
    pub fn m(&self) -> usize {
        self.sizes.len()
    }

    pub fn to_size_lp(&self) -> SizeLp {
        SizeLp::new(
            self.sizes
                .iter()
                .zip(self.demand.iter())
                .map(|(s, d)| (s.clone(), crate::rational::rat_int(*d as i64)))
                .collect(),
        )
    }

    /// Plain-text tableau of the instance plus a solution pair, for golden
    /// tests and debugging.
    pub fn dump_with(&self, sol: &PackedSolution, rounding: &RoundingState) -> String {
        let mut lines = Vec::new();
        lines.push("rows (size: demand):".to_string());
        for (s, d) in self.sizes.iter().zip(self.demand.iter()) {
            lines.push(format!("  {}: {d}", format_rational(s)));
        }
        lines.push("pair (config | x | y):".to_string());
        for (key, entry) in &sol.entries {
            let cfg: Vec<String> = key
                .iter()
                .map(|(g, c)| {
                    let size = rounding
                        .group_rounded_size(*g)
                        .map(|s| format_rational(&s))
                        .unwrap_or_else(|| "?".into());
                    format!("{size}x{c}")
                })
                .collect();
            lines.push(format!(
                "  [{}] | {} | {}",
                cfg.join(", "),
                format_rational(&entry.x),
                entry.y
            ));
        }
        lines.join("\n")
    }
}

/// Builds the merged LP rows from the current rounding: groups with equal
/// rounded size share one demand row.
pub fn build_lp(rounding: &RoundingState) -> LpInstance {
    let mut rows: BTreeMap<Rational, u64> = BTreeMap::new();
    for gid in rounding.all_groups() {
        let size = rounding.group_rounded_size(gid).expect("live group");
        *rows.entry(size).or_insert(0) += rounding.group_len(gid) as u64;
    }
    let mut sizes: Vec<Rational> = rows.keys().cloned().collect();
    sizes.reverse();
    let demand: Vec<u64> = sizes.iter().map(|s| rows[s]).collect();
    LpInstance { sizes, demand }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Item;
    use crate::params::Params;
    use crate::rational::{one, rat, rat_int};

    fn params() -> Params {
        Params::new(4).unwrap()
    }

    #[test]
    fn build_lp_merges_equal_rounded_sizes() {
        let p = params();
        let mut rounding = RoundingState::new(1);
        // two items of 1/2 -> two singleton groups, both rounded to 1/2
        rounding.insert_large(&Item::new(1, rat(1, 2)), &p).unwrap();
        rounding.insert_large(&Item::new(2, rat(1, 2)), &p).unwrap();
        let lp = build_lp(&rounding);
        assert_eq!(lp.sizes, vec![rat(1, 2)]);
        assert_eq!(lp.demand, vec![2]);
        assert_eq!(lp.m(), 1);
    }

    #[test]
    fn build_lp_two_rows() {
        let p = params();
        let items = vec![
            Item::new(1, rat(1, 2)),
            Item::new(2, rat(1, 2)),
            Item::new(3, rat(1, 3)),
            Item::new(4, rat(1, 3)),
            Item::new(5, rat(1, 3)),
        ];
        let rounding = RoundingState::rebuild(&items, 1, None, &p).unwrap();
        // all five items share category 1; chunks of two round one 1/3 up,
        // so the rows merge to 1/2 (demand 3) and 1/3 (demand 2).
        let lp = build_lp(&rounding);
        assert_eq!(lp.sizes.len(), 2);
        assert_eq!(lp.sizes[0], rat(1, 2));
        assert_eq!(lp.demand, vec![3, 2]);
    }

    #[test]
    fn empty_rounding_gives_empty_lp() {
        let rounding = RoundingState::new(1);
        let lp = build_lp(&rounding);
        assert_eq!(lp.m(), 0);
        let mut pool = ColumnPool::new();
        let sol = approx_solve(&lp.to_size_lp(), &one(), &mut pool);
        assert_eq!(sol.value, rat_int(0));
    }
}
