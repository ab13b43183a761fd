//! Exact rational primal simplex for the covering LP
//! `min 1'x  s.t.  Ax >= b, x >= 0` over an explicit column pool,
//! plus the Gaussian kernel helper used for support reduction.

use crate::rational::{one, zero, Rational};
use num_traits::Zero;

/// Sparse column: (row, coefficient), rows strictly increasing.
pub type SparseCol = Vec<(usize, Rational)>;

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub value: Rational,
    /// Value per pool column (almost all zero).
    pub primal: Vec<Rational>,
    /// Dual price per row, nonnegative at optimality.
    pub duals: Vec<Rational>,
}

enum Col {
    Pool(usize),
    Surplus(usize),
}

/// Solves the restricted covering problem over `pool`. Every row with
/// positive demand must have at least one singleton column covering it
/// (the callers add max-multiplicity singletons), which provides the
/// initial feasible basis.
pub fn solve_covering(demand: &[Rational], pool: &[SparseCol]) -> SimplexResult {
    let m = demand.len();
    let n = pool.len();
    if m == 0 {
        return SimplexResult { value: zero(), primal: vec![zero(); n], duals: Vec::new() };
    }

    // Column access: pool columns cost 1, surplus columns cost 0 with -1.
    let col = |j: usize| -> Col {
        if j < n {
            Col::Pool(j)
        } else {
            Col::Surplus(j - n)
        }
    };
    let coeffs = |j: usize| -> SparseCol {
        match col(j) {
            Col::Pool(p) => pool[p].clone(),
            Col::Surplus(r) => vec![(r, -one())],
        }
    };
    let cost = |j: usize| -> Rational {
        match col(j) {
            Col::Pool(_) => one(),
            Col::Surplus(_) => zero(),
        }
    };

    // Initial basis: singleton cover for demanded rows, surplus otherwise.
    let mut basis: Vec<usize> = Vec::with_capacity(m);
    for (row, d) in demand.iter().enumerate() {
        if d.is_zero() || *d < zero() {
            basis.push(n + row);
            continue;
        }
        let j = pool
            .iter()
            .position(|c| c.len() == 1 && c[0].0 == row && c[0].1 > zero())
            .unwrap_or_else(|| panic!("no singleton column for demanded row {row}"));
        basis.push(j);
    }

    // B^-1 starts from the diagonal basis above.
    let mut binv: Vec<Vec<Rational>> = vec![vec![zero(); m]; m];
    for (row, &j) in basis.iter().enumerate() {
        let diag = match col(j) {
            Col::Pool(p) => pool[p][0].1.clone(),
            Col::Surplus(_) => -one(),
        };
        binv[row][row] = one() / diag;
    }
    let mut xb: Vec<Rational> = (0..m)
        .map(|row| {
            let d = demand[row].clone().max(zero());
            &binv[row][row] * d
        })
        .collect();

    let total_cols = n + m;
    let mut iter = 0usize;
    let fuel = 4000 + 60 * m;
    let bland_after = 6 * m + 40;
    loop {
        iter += 1;
        assert!(iter < fuel, "simplex failed to converge in {fuel} iterations");
        // Duals from the current basis.
        let mut duals = vec![zero(); m];
        for (row, &j) in basis.iter().enumerate() {
            let cb = cost(j);
            if cb.is_zero() {
                continue;
            }
            for (c, v) in duals.iter_mut().zip(binv[row].iter()) {
                *c += &cb * v;
            }
        }
        // Entering column: most negative reduced cost (Bland after stalls).
        let mut in_basis = vec![false; total_cols];
        for &j in &basis {
            in_basis[j] = true;
        }
        let mut entering: Option<(usize, Rational)> = None;
        for j in 0..total_cols {
            if in_basis[j] {
                continue;
            }
            let mut rc = cost(j);
            for (row, v) in coeffs(j) {
                rc -= &duals[row] * v;
            }
            if rc < zero() {
                if iter > bland_after {
                    entering = Some((j, rc));
                    break;
                }
                match &entering {
                    Some((_, best)) if rc >= *best => {}
                    _ => entering = Some((j, rc)),
                }
            }
        }
        let Some((j, _)) = entering else { break };
        // Direction d = B^-1 a_j.
        let mut dir = vec![zero(); m];
        for (row, v) in coeffs(j) {
            for (d, b) in dir.iter_mut().zip(binv.iter()) {
                *d += &b[row] * &v;
            }
        }
        // Ratio test.
        let mut leave: Option<(usize, Rational)> = None;
        for (row, d) in dir.iter().enumerate() {
            if *d > zero() {
                let ratio = &xb[row] / d;
                match &leave {
                    Some((lrow, best)) => {
                        if ratio < *best || (ratio == *best && basis[row] < basis[*lrow]) {
                            leave = Some((row, ratio));
                        }
                    }
                    None => leave = Some((row, ratio)),
                }
            }
        }
        let Some((r, step)) = leave else {
            panic!("covering LP unbounded, which cannot happen with unit costs")
        };
        // Pivot: update B^-1 and xb.
        let pivot = dir[r].clone();
        for v in binv[r].iter_mut() {
            *v /= &pivot;
        }
        xb[r] /= &pivot;
        let pivot_row = binv[r].clone();
        let pivot_x = xb[r].clone();
        for row in 0..m {
            if row == r || dir[row].is_zero() {
                continue;
            }
            let factor = dir[row].clone();
            for (v, pv) in binv[row].iter_mut().zip(pivot_row.iter()) {
                *v -= &factor * pv;
            }
            xb[row] -= &factor * &pivot_x;
        }
        let _ = step;
        basis[r] = j;
    }

    let mut duals = vec![zero(); m];
    for (row, &j) in basis.iter().enumerate() {
        let cb = cost(j);
        if cb.is_zero() {
            continue;
        }
        for (c, v) in duals.iter_mut().zip(binv[row].iter()) {
            *c += &cb * v;
        }
    }
    let mut primal = vec![zero(); n];
    let mut value = zero();
    for (row, &j) in basis.iter().enumerate() {
        debug_assert!(xb[row] >= zero(), "negative basic value");
        if j < n {
            primal[j] = xb[row].clone();
            value += &xb[row];
        }
    }
    SimplexResult { value, primal, duals }
}

/// One nonzero rational kernel vector of the matrix whose columns are
/// `cols` (dense, all the same length), or `None` if the columns are
/// linearly independent.
pub fn kernel_vector(cols: &[Vec<Rational>]) -> Option<Vec<Rational>> {
    let s = cols.len();
    if s == 0 {
        return None;
    }
    let rows = cols[0].len();
    // Row-reduce the rows x s matrix, tracking pivot columns.
    let mut mat: Vec<Vec<Rational>> = (0..rows)
        .map(|r| cols.iter().map(|c| c[r].clone()).collect())
        .collect();
    let mut pivot_col_of_row: Vec<Option<usize>> = vec![None; rows];
    let mut pivot_row_of_col: Vec<Option<usize>> = vec![None; s];
    let mut rank = 0usize;
    for c in 0..s {
        let mut pr = None;
        for r in rank..rows {
            if !mat[r][c].is_zero() {
                pr = Some(r);
                break;
            }
        }
        let Some(pr) = pr else { continue };
        mat.swap(rank, pr);
        let inv = one() / &mat[rank][c];
        for v in mat[rank].iter_mut() {
            *v *= &inv;
        }
        let pivot_row = mat[rank].clone();
        for (r, row) in mat.iter_mut().enumerate() {
            if r != rank && !row[c].is_zero() {
                let f = row[c].clone();
                for (v, pv) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= &f * pv;
                }
            }
        }
        pivot_col_of_row[rank] = Some(c);
        pivot_row_of_col[c] = Some(rank);
        rank += 1;
        if rank == rows {
            break;
        }
    }
    // Free column -> kernel vector.
    let free = (0..s).find(|c| pivot_row_of_col[*c].is_none())?;
    let mut v = vec![zero(); s];
    v[free] = one();
    for (r, pc) in pivot_col_of_row.iter().enumerate() {
        if let Some(pc) = pc {
            v[*pc] = -mat[r][free].clone();
        }
    }
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{rat, rat_int};

    fn dense(col: &[(usize, i64)]) -> SparseCol {
        col.iter().map(|(r, v)| (*r, rat_int(*v))).collect()
    }

    #[test]
    fn single_row_singleton() {
        // min bins covering 4 halves with config {1/2 : 2} -> 2 bins.
        let demand = vec![rat_int(4)];
        let pool = vec![dense(&[(0, 2)])];
        let res = solve_covering(&demand, &pool);
        assert_eq!(res.value, rat_int(2));
        assert_eq!(res.primal[0], rat_int(2));
    }

    #[test]
    fn prefers_combined_column() {
        // rows: size 1/2 demand 1, size 1/3 demand 1.
        // columns: {1/2:1}, {1/3:2}, {1/2:1,1/3:1}. optimum 1.
        let demand = vec![rat_int(1), rat_int(1)];
        let pool = vec![dense(&[(0, 1)]), dense(&[(1, 2)]), dense(&[(0, 1), (1, 1)])];
        let res = solve_covering(&demand, &pool);
        assert_eq!(res.value, rat_int(1));
        assert_eq!(res.primal[2], rat_int(1));
    }

    #[test]
    fn zero_demand_rows_are_free() {
        let demand = vec![rat_int(0), rat_int(3)];
        let pool = vec![dense(&[(0, 1)]), dense(&[(1, 3)])];
        let res = solve_covering(&demand, &pool);
        assert_eq!(res.value, rat_int(1));
    }

    #[test]
    fn fractional_demand() {
        let demand = vec![rat(5, 2)];
        let pool = vec![dense(&[(0, 2)])];
        let res = solve_covering(&demand, &pool);
        assert_eq!(res.value, rat(5, 4));
    }

    #[test]
    fn duals_price_rows() {
        let demand = vec![rat_int(4)];
        let pool = vec![dense(&[(0, 2)])];
        let res = solve_covering(&demand, &pool);
        assert_eq!(res.duals[0], rat(1, 2));
    }

    #[test]
    fn kernel_of_dependent_columns() {
        // cols (1,0), (0,1), (1,1): kernel (1,1,-1).
        let cols = vec![
            vec![rat_int(1), rat_int(0)],
            vec![rat_int(0), rat_int(1)],
            vec![rat_int(1), rat_int(1)],
        ];
        let v = kernel_vector(&cols).unwrap();
        // verify M v = 0
        for r in 0..2 {
            let mut acc = rat_int(0);
            for (c, vc) in cols.iter().zip(v.iter()) {
                acc += &c[r] * vc;
            }
            assert_eq!(acc, rat_int(0));
        }
        assert!(v.iter().any(|x| !x.is_zero()));
        assert!(kernel_vector(&cols[..2].to_vec()).is_none());
    }
}
