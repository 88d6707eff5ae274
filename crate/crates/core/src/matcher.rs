//! Stable matching when both sides rank pairs by the same match value.
//!
//! Every accelerator and every startup orders potential partners by the
//! shared value `u[a][s]`, so repeatedly taking the largest remaining pair
//! (among accelerators with a free seat and unplaced startups) yields the
//! stable matching. A pair taken this way can never be part of a blocking
//! pair: anything it would block with was still available, and smaller, at
//! the moment it was taken.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{Market, Matching, UtilityTable};

/// Greedy global-maximum assignment. Exact ties are broken toward the lower
/// accelerator index, then the lower startup index.
pub fn solve_stable(market: &Market, utilities: &UtilityTable) -> Result<Matching> {
    utilities.check_shape(market)?;
    if utilities.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite utility in market `{}`",
            market.id
        )));
    }
    let quotas = market.quotas();
    if quotas.iter().sum::<usize>() != market.n_startups() {
        return Err(Error::config(format!(
            "market `{}` quotas do not sum to the startup count",
            market.id
        )));
    }
    Ok(solve_greedy(&quotas, utilities))
}

/// Core of [`solve_stable`] without the input checks, for hot simulation loops.
pub fn solve_greedy(quotas: &[usize], utilities: &UtilityTable) -> Matching {
    let n_s = utilities.n_startups;
    let mut order: Vec<usize> = (0..utilities.values.len()).collect();
    order.sort_unstable_by(|&i, &j| {
        utilities.values[j]
            .partial_cmp(&utilities.values[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut free = quotas.to_vec();
    let mut assignment = vec![usize::MAX; n_s];
    let mut placed = 0;
    for idx in order {
        let (a, s) = (idx / n_s, idx % n_s);
        if free[a] > 0 && assignment[s] == usize::MAX {
            assignment[s] = a;
            free[a] -= 1;
            placed += 1;
            if placed == n_s {
                break;
            }
        }
    }
    Matching::new(assignment)
}

/// Every unmatched pair `(a, s')` with `U_{as'} > U_{μ(s'),s'}` and
/// `U_{as'} > min_{s∈μ⁻¹(a)} U_{as}`.
pub fn find_blocking_pairs(
    market: &Market,
    utilities: &UtilityTable,
    matching: &Matching,
) -> Vec<(usize, usize)> {
    let members = matching.members(market.n_accelerators());
    let worst: Vec<f64> = members
        .iter()
        .enumerate()
        .map(|(a, ms)| {
            ms.iter()
                .map(|&s| utilities.get(a, s))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut out = Vec::new();
    for (a, &floor) in worst.iter().enumerate() {
        for s in 0..market.n_startups() {
            let current = matching.accelerator_of(s);
            if current == a {
                continue;
            }
            let u = utilities.get(a, s);
            if u > utilities.get(current, s) && u > floor {
                out.push((a, s));
            }
        }
    }
    out
}

pub fn is_stable(market: &Market, utilities: &UtilityTable, matching: &Matching) -> bool {
    find_blocking_pairs(market, utilities, matching).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::market_with_ubar;
    use proptest::prelude::*;

    fn two_by_two() -> (Market, UtilityTable) {
        let rows = vec![vec![2.0, 1.5], vec![1.0, 0.5]];
        (
            market_with_ubar(&[1, 1], &rows),
            UtilityTable::from_rows(&rows).unwrap(),
        )
    }

    #[test]
    fn single_accelerator_takes_everyone() {
        let m = market_with_ubar(&[2], &[vec![0.3, -1.0]]);
        let u = UtilityTable::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let mu = solve_stable(&m, &u).unwrap();
        assert_eq!(mu.assignment, vec![0, 0]);
        assert!(find_blocking_pairs(&m, &u, &mu).is_empty());
        assert!(is_stable(&m, &u, &mu));
    }

    #[test]
    fn two_by_two_greedy() {
        let (m, u) = two_by_two();
        let mu = solve_stable(&m, &u).unwrap();
        assert_eq!(mu.assignment, vec![0, 1]);
        assert!(is_stable(&m, &u, &mu));
    }

    #[test]
    fn swapped_two_by_two_is_blocked_by_a1_s1() {
        let (m, u) = two_by_two();
        let swapped = Matching::new(vec![1, 0]);
        assert_eq!(find_blocking_pairs(&m, &u, &swapped), vec![(0, 0)]);
        assert!(!is_stable(&m, &u, &swapped));
    }

    #[test]
    fn ties_break_toward_lower_indices() {
        let rows = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let m = market_with_ubar(&[1, 1], &rows);
        let u = UtilityTable::from_rows(&rows).unwrap();
        assert_eq!(solve_stable(&m, &u).unwrap().assignment, vec![0, 1]);
    }

    #[test]
    fn non_finite_utility_is_a_numeric_error() {
        let (m, mut u) = two_by_two();
        u.set(1, 1, f64::NAN);
        assert!(matches!(solve_stable(&m, &u), Err(Error::Numeric(_))));
    }

    fn random_market() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        proptest::collection::vec(1usize..4, 1..5).prop_flat_map(|quotas| {
            let n: usize = quotas.iter().sum::<usize>() * quotas.len();
            (Just(quotas), proptest::collection::vec(-5.0f64..5.0, n))
        })
    }

    proptest! {
        #[test]
        fn greedy_output_is_stable((quotas, vals) in random_market()) {
            let n_s: usize = quotas.iter().sum();
            let rows: Vec<Vec<f64>> = vals.chunks(n_s).map(|c| c.to_vec()).collect();
            let m = market_with_ubar(&quotas, &rows);
            let u = UtilityTable::from_rows(&rows).unwrap();
            let mu = solve_stable(&m, &u).unwrap();
            mu.check_feasible(&m).unwrap();
            prop_assert!(is_stable(&m, &u, &mu));
        }

        #[test]
        fn positive_affine_maps_leave_the_matching_unchanged(
            (quotas, vals) in random_market(), scale in 0.01f64..50.0, shift in -20.0f64..20.0,
        ) {
            let n_s: usize = quotas.iter().sum();
            let rows: Vec<Vec<f64>> = vals.chunks(n_s).map(|c| c.to_vec()).collect();
            let m = market_with_ubar(&quotas, &rows);
            let u = UtilityTable::from_rows(&rows).unwrap();
            let base = solve_stable(&m, &u).unwrap();
            prop_assert_eq!(&base, &solve_stable(&m, &u.map(|v| v + shift)).unwrap());
            prop_assert_eq!(&base, &solve_stable(&m, &u.map(|v| scale * v + shift)).unwrap());
        }

        #[test]
        fn equity_share_split_leaves_the_matching_unchanged(
            (quotas, vals) in random_market(), share in 0.001f64..0.999,
        ) {
            let n_s: usize = quotas.iter().sum();
            let rows: Vec<Vec<f64>> = vals.chunks(n_s).map(|c| c.to_vec()).collect();
            let mut m = market_with_ubar(&quotas, &rows);
            for a in &mut m.accelerators {
                a.equity_share = share;
            }
            let u = UtilityTable::from_rows(&rows).unwrap();
            let base = solve_stable(&m, &u).unwrap();
            // Either side's payoff table is a positive multiple of the match value.
            prop_assert_eq!(&base, &solve_stable(&m, &u.map(|v| share * v)).unwrap());
            prop_assert_eq!(&base, &solve_stable(&m, &u.map(|v| (1.0 - share) * v)).unwrap());
        }
    }
}
