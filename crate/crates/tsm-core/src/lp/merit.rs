use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Merit-order clearing of a single service over box-constrained offers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeritOrder {
    pub dispatch: Vec<f64>,
    /// Cost of the last dispatched offer; zero when nothing is dispatched.
    pub price: f64,
    /// Index of the price-setting offer.
    pub marginal: Option<usize>,
    /// Demand sits exactly on a breakpoint of the supply curve, so any price
    /// in an interval clears the market.
    pub degenerate: bool,
}

/// Fills offers in ascending cost order (ties by input index) until demand is
/// met.
pub fn merit_order_clear(costs: &[f64], caps: &[f64], demand: f64) -> Result<MeritOrder> {
    if costs.len() != caps.len() {
        return Err(Error::InvalidParams(format!(
            "{} costs but {} capacities",
            costs.len(),
            caps.len()
        )));
    }
    if let Some(c) = caps.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidParams(format!("capacity {c} is not a non-negative number")));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParams("non-finite cost".into()));
    }
    if !(demand >= 0.0) || !demand.is_finite() {
        return Err(Error::InvalidParams(format!("demand {demand} is not a non-negative number")));
    }
    let total: f64 = caps.iter().sum();
    if demand > total {
        return Err(Error::InfeasibleDemand {
            demand,
            capacity: total,
        });
    }

    let mut order: Vec<usize> = (0..costs.len()).filter(|&i| caps[i] > 0.0).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));

    let mut dispatch = vec![0.0; costs.len()];
    if demand == 0.0 {
        return Ok(MeritOrder {
            dispatch,
            price: 0.0,
            marginal: None,
            degenerate: true,
        });
    }

    let mut filled = 0.0;
    let mut marginal = None;
    let mut pos = 0;
    for (k, &i) in order.iter().enumerate() {
        let take = caps[i].min(demand - filled);
        dispatch[i] = take;
        filled += take;
        marginal = Some(i);
        pos = k;
        if take < caps[i] || filled >= demand {
            break;
        }
    }
    let m = marginal.expect("positive demand implies a dispatched offer");
    let at_breakpoint = dispatch[m] == caps[m];
    let next_same_cost = order
        .get(pos + 1)
        .is_some_and(|&j| costs[j] == costs[m]);
    Ok(MeritOrder {
        dispatch,
        price: costs[m],
        marginal: Some(m),
        degenerate: at_breakpoint && !next_same_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum cost over dispatch splits on a fine grid (two offers).
    fn brute_min_cost(costs: [f64; 2], caps: [f64; 2], d: f64, step: f64) -> (f64, [f64; 2]) {
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        let mut a = 0.0;
        while a <= caps[0] + 1e-12 {
            let b = d - a;
            if (-1e-12..=caps[1] + 1e-12).contains(&b) {
                let c = costs[0] * a + costs[1] * b;
                if c < best.0 - 1e-12 {
                    best = (c, [a, b]);
                }
            }
            a += step;
        }
        best
    }

    #[test]
    fn fills_cheapest_first() {
        let r = merit_order_clear(&[10.0, 20.0], &[5.0, 5.0], 7.0).unwrap();
        assert_eq!(r.dispatch, vec![5.0, 2.0]);
        assert_eq!(r.price, 20.0);
        assert!(!r.degenerate);
        // Oracle: cost minimality and the right-derivative price.
        let (cost, split) = brute_min_cost([10.0, 20.0], [5.0, 5.0], 7.0, 0.25);
        assert_eq!(cost, 90.0);
        assert_eq!(split, [5.0, 2.0]);
        let (up, _) = brute_min_cost([10.0, 20.0], [5.0, 5.0], 7.25, 0.25);
        assert_eq!((up - cost) / 0.25, r.price);
    }

    #[test]
    fn zero_demand_prices_at_zero() {
        let r = merit_order_clear(&[10.0, 20.0], &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(r.dispatch, vec![0.0, 0.0]);
        assert_eq!(r.price, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn ties_follow_input_order() {
        let r = merit_order_clear(&[10.0, 10.0], &[5.0, 5.0], 6.0).unwrap();
        assert_eq!(r.dispatch, vec![5.0, 1.0]);
        assert_eq!(r.price, 10.0);
        let (cost, _) = brute_min_cost([10.0, 10.0], [5.0, 5.0], 6.0, 0.5);
        assert_eq!(cost, 60.0);
        let (up, _) = brute_min_cost([10.0, 10.0], [5.0, 5.0], 6.5, 0.5);
        let (down, _) = brute_min_cost([10.0, 10.0], [5.0, 5.0], 5.5, 0.5);
        assert_eq!((up - cost) / 0.5, 10.0);
        assert_eq!((cost - down) / 0.5, 10.0);
    }

    #[test]
    fn breakpoint_with_equal_next_cost_is_not_degenerate() {
        let r = merit_order_clear(&[10.0, 10.0], &[5.0, 5.0], 5.0).unwrap();
        assert!(!r.degenerate);
        let r = merit_order_clear(&[10.0, 20.0], &[5.0, 5.0], 10.0).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.price, 20.0);
    }

    #[test]
    fn shortfall_is_infeasible() {
        assert!(matches!(
            merit_order_clear(&[1.0, 2.0], &[3.0, 3.0], 7.0),
            Err(Error::InfeasibleDemand { .. })
        ));
    }
}
