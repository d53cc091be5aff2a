//! Safe layer: maps a raw per-port rate proposal onto the feasible set
//!
//! ```text
//! minimize   sum_i |x_i - x̂_i|
//! subject to lower_i <= x_i <= upper,   sum_i x_i <= budget
//! ```
//!
//! where `lower_i` is the smallest rate that still lets port `i` finish its
//! residual demand before the vehicle leaves. [`project`] solves this
//! exactly in `O(n log n)`; [`lp_oracle`] solves the same program with a
//! dense two-phase simplex and exists to cross-check it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{PortState, FEASIBILITY_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafeLayerError {
    #[error("infeasible projection ({reason}): {instance:?}")]
    Infeasible {
        reason: String,
        instance: ProjectionInstance,
    },
    #[error(
        "port {port} cannot finish: residual {residual_kwh} kWh in {residual_slots} slots at {rate_cap} kWh/slot"
    )]
    UnschedulablePort {
        port: usize,
        residual_kwh: f64,
        residual_slots: usize,
        rate_cap: f64,
    },
    #[error("lp solver: {0}")]
    Lp(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInstance {
    pub proposal: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub rates: Vec<f64>,
    pub l1_cost: f64,
    /// Set when the budget constraint was binding.
    pub clipped: bool,
}

/// Indices of ports currently holding a vehicle.
pub fn occupied_ports(ports: &[PortState]) -> Vec<usize> {
    ports
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(i, _)| i)
        .collect()
}

/// Deadline-induced minimum rate of each occupied port, in port order:
/// `max(0, residual - (residual_slots - 1) * rate_cap)`.
pub fn lower_bounds(ports: &[PortState], rate_cap: f64) -> Result<Vec<f64>, SafeLayerError> {
    ports
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(i, p)| {
            let slots = p.residual_slots as f64;
            if p.residual_slots == 0 || p.residual_demand_kwh > slots * rate_cap + FEASIBILITY_TOL {
                return Err(SafeLayerError::UnschedulablePort {
                    port: i,
                    residual_kwh: p.residual_demand_kwh,
                    residual_slots: p.residual_slots,
                    rate_cap,
                });
            }
            Ok((p.residual_demand_kwh - (slots - 1.0) * rate_cap).max(0.0))
        })
        .collect()
}

/// True when every occupied port can meet its lower bound within `budget`.
pub fn check_feasible(ports: &[PortState], rate_cap: f64, budget: f64) -> bool {
    match lower_bounds(ports, rate_cap) {
        Ok(lower) => lower.iter().sum::<f64>() <= budget + FEASIBILITY_TOL,
        Err(_) => false,
    }
}

fn validate(instance: &ProjectionInstance) -> Result<(), SafeLayerError> {
    let fail = |reason: String| {
        Err(SafeLayerError::Infeasible {
            reason,
            instance: instance.clone(),
        })
    };
    if instance.proposal.len() != instance.lower.len() {
        return fail("proposal and lower bounds differ in length".into());
    }
    if instance.proposal.iter().any(|v| !v.is_finite()) {
        return fail("non-finite proposal".into());
    }
    if !(instance.budget > 0.0) || !instance.upper.is_finite() || instance.upper < 0.0 {
        return fail("budget must be positive and upper finite".into());
    }
    for (i, &l) in instance.lower.iter().enumerate() {
        if !(l >= 0.0) || l > instance.upper + FEASIBILITY_TOL {
            return fail(format!("lower bound {l} on entry {i} outside [0, {}]", instance.upper));
        }
    }
    let floor: f64 = instance.lower.iter().sum();
    if floor > instance.budget + FEASIBILITY_TOL {
        return fail(format!("lower bounds sum to {floor} > budget {}", instance.budget));
    }
    Ok(())
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Exact L1 projection.
///
/// Clamp into the box; if the budget is exceeded, take the excess out of
/// entries in descending order of slack above their lower bound (ties to the
/// lower index). Every unit removed from a clamped entry costs exactly one
/// unit of L1 distance, so any such reduction is optimal with cost
/// `sum(clamp) - budget` on top of the clamping cost.
pub fn project(instance: &ProjectionInstance) -> Result<ProjectionResult, SafeLayerError> {
    validate(instance)?;
    let upper = instance.upper;
    let mut rates: Vec<f64> = instance
        .proposal
        .iter()
        .zip(&instance.lower)
        .map(|(&p, &l)| p.max(l).min(upper.max(l)))
        .collect();
    let total: f64 = rates.iter().sum();
    let clipped = total > instance.budget + FEASIBILITY_TOL;
    if clipped {
        let mut order: Vec<usize> = (0..rates.len()).collect();
        let slack = |i: usize| rates[i] - instance.lower[i];
        order.sort_by(|&a, &b| slack(b).total_cmp(&slack(a)).then(a.cmp(&b)));
        let mut excess = total - instance.budget;
        for i in order {
            if excess <= 0.0 {
                break;
            }
            let room = rates[i] - instance.lower[i];
            if room <= excess {
                rates[i] = instance.lower[i];
                excess -= room;
            } else {
                rates[i] -= excess;
                excess = 0.0;
            }
        }
    }
    Ok(ProjectionResult {
        l1_cost: l1(&rates, &instance.proposal),
        rates,
        clipped,
    })
}

/// Solves the projection as a linear program with a dense simplex.
///
/// Variables (all `>= 0`): `y = x - lower`, positive/negative parts `p, q`
/// of `x - x̂`, box slacks `s` and a budget slack:
///
/// ```text
/// min sum(p + q)
///   y_i - p_i + q_i = x̂_i - lower_i
///   y_i + s_i       = upper - lower_i
///   sum(y) + s_b    = budget - sum(lower)
/// ```
pub fn lp_oracle(instance: &ProjectionInstance) -> Result<ProjectionResult, SafeLayerError> {
    validate(instance)?;
    let n = instance.proposal.len();
    let nv = 4 * n + 1;
    let (y, p, q, s, sb) = (0, n, 2 * n, 3 * n, 4 * n);
    let mut cost = vec![0.0; nv];
    for i in 0..n {
        cost[p + i] = 1.0;
        cost[q + i] = 1.0;
    }
    let mut rows = Vec::with_capacity(2 * n + 1);
    let mut rhs = Vec::with_capacity(2 * n + 1);
    for i in 0..n {
        let mut r = vec![0.0; nv];
        r[y + i] = 1.0;
        r[p + i] = -1.0;
        r[q + i] = 1.0;
        rows.push(r);
        rhs.push(instance.proposal[i] - instance.lower[i]);

        let mut r = vec![0.0; nv];
        r[y + i] = 1.0;
        r[s + i] = 1.0;
        rows.push(r);
        rhs.push((instance.upper - instance.lower[i]).max(0.0));
    }
    let mut r = vec![0.0; nv];
    for i in 0..n {
        r[y + i] = 1.0;
    }
    r[sb] = 1.0;
    rows.push(r);
    rhs.push((instance.budget - instance.lower.iter().sum::<f64>()).max(0.0));

    let z = simplex::minimize(&cost, &rows, &rhs).map_err(SafeLayerError::Lp)?;
    let rates: Vec<f64> = (0..n).map(|i| instance.lower[i] + z[y + i]).collect();
    let clamped: f64 = instance
        .proposal
        .iter()
        .zip(&instance.lower)
        .map(|(&v, &l)| v.max(l).min(instance.upper.max(l)))
        .sum();
    Ok(ProjectionResult {
        l1_cost: l1(&rates, &instance.proposal),
        rates,
        clipped: clamped > instance.budget + FEASIBILITY_TOL,
    })
}

mod simplex {
    //! Dense two-phase tableau simplex with Bland's rule, for tiny programs
    //! in equality form `min c.z  s.t.  A z = b, z >= 0`.

    const EPS: f64 = 1e-11;

    struct Tableau {
        /// `m` constraint rows followed by the objective row; last column is the rhs.
        cells: Vec<Vec<f64>>,
        basis: Vec<usize>,
    }

    impl Tableau {
        fn rhs(&self, row: usize) -> f64 {
            *self.cells[row].last().expect("non-empty row")
        }

        fn pivot(&mut self, row: usize, col: usize) {
            let piv = self.cells[row][col];
            for v in self.cells[row].iter_mut() {
                *v /= piv;
            }
            let pivot_row = self.cells[row].clone();
            for (r, cells) in self.cells.iter_mut().enumerate() {
                if r == row {
                    continue;
                }
                let f = cells[col];
                if f != 0.0 {
                    for (v, pv) in cells.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
            self.basis[row] = col;
        }

        /// Runs pivots on the objective row until no allowed column improves.
        fn optimize(&mut self, allowed: usize) -> Result<(), String> {
            let m = self.basis.len();
            for _ in 0..10_000 {
                let obj = &self.cells[m];
                let Some(col) = (0..allowed).find(|&j| obj[j] < -EPS) else {
                    return Ok(());
                };
                let mut best: Option<(f64, usize)> = None;
                for r in 0..m {
                    let a = self.cells[r][col];
                    if a > EPS {
                        let ratio = self.rhs(r) / a;
                        let better = match best {
                            None => true,
                            Some((b, br)) => {
                                ratio < b - EPS || (ratio <= b + EPS && self.basis[r] < self.basis[br])
                            }
                        };
                        if better {
                            best = Some((ratio, r));
                        }
                    }
                }
                let Some((_, row)) = best else {
                    return Err("unbounded".into());
                };
                self.pivot(row, col);
            }
            Err("pivot limit reached".into())
        }
    }

    pub fn minimize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>, String> {
        let m = a.len();
        let n = c.len();
        let width = n + m + 1;
        let mut cells = Vec::with_capacity(m + 1);
        for (row, &rhs) in a.iter().zip(b) {
            let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
            let mut r = vec![0.0; width];
            for (j, v) in row.iter().enumerate() {
                r[j] = sign * v;
            }
            r[n + cells.len()] = 1.0;
            r[width - 1] = sign * rhs;
            cells.push(r);
        }
        // phase I: minimise the sum of artificials
        let mut obj = vec![0.0; width];
        for r in &cells {
            for j in 0..n {
                obj[j] -= r[j];
            }
            obj[width - 1] -= r[width - 1];
        }
        cells.push(obj);
        let mut t = Tableau {
            cells,
            basis: (n..n + m).collect(),
        };
        t.optimize(n + m)?;
        if -t.rhs(m) > 1e-8 {
            return Err(format!("infeasible (phase I residual {})", -t.rhs(m)));
        }
        // drive remaining artificials out of the basis where possible
        for r in 0..m {
            if t.basis[r] >= n {
                if let Some(col) = (0..n).find(|&j| t.cells[r][j].abs() > EPS) {
                    t.pivot(r, col);
                }
            }
        }
        // phase II objective in reduced form
        let mut obj = vec![0.0; width];
        obj[..n].copy_from_slice(c);
        for r in 0..m {
            let cb = if t.basis[r] < n { c[t.basis[r]] } else { 0.0 };
            if cb != 0.0 {
                for j in 0..width {
                    obj[j] -= cb * t.cells[r][j];
                }
            }
        }
        t.cells[m] = obj;
        t.optimize(n)?;
        let mut z = vec![0.0; n];
        for r in 0..m {
            if t.basis[r] < n {
                z[t.basis[r]] = t.rhs(r).max(0.0);
            }
        }
        Ok(z)
    }

    #[cfg(test)]
    mod tests {
        #[test]
        fn textbook_lp() {
            // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  ->  (2, 6), value 36
            let c = [-3.0, -5.0, 0.0, 0.0, 0.0];
            let a = vec![
                vec![1.0, 0.0, 1.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0, 1.0, 0.0],
                vec![3.0, 2.0, 0.0, 0.0, 1.0],
            ];
            let z = super::minimize(&c, &a, &[4.0, 12.0, 18.0]).unwrap();
            assert!((z[0] - 2.0).abs() < 1e-9 && (z[1] - 6.0).abs() < 1e-9);
        }

        #[test]
        fn detects_infeasibility() {
            // x + y = -1 with x, y >= 0
            let err = super::minimize(&[1.0, 1.0], &[vec![1.0, 1.0]], &[-1.0]).unwrap_err();
            assert!(err.contains("infeasible"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(proposal: &[f64], lower: &[f64], upper: f64, budget: f64) -> ProjectionInstance {
        ProjectionInstance {
            proposal: proposal.to_vec(),
            lower: lower.to_vec(),
            upper,
            budget,
        }
    }

    fn port(residual: f64, slots: usize) -> PortState {
        PortState {
            residual_demand_kwh: residual,
            residual_slots: slots,
        }
    }

    #[test]
    fn lower_bound_examples() {
        let ports = [port(10.0, 2), port(5.0, 3), port(7.0, 1), PortState::default()];
        assert_eq!(lower_bounds(&ports, 7.0).unwrap(), vec![3.0, 0.0, 7.0]);
        assert_eq!(occupied_ports(&ports), vec![0, 1, 2]);
    }

    #[test]
    fn lower_bound_rejects_unschedulable_port() {
        let err = lower_bounds(&[port(15.0, 2)], 7.0).unwrap_err();
        assert!(matches!(err, SafeLayerError::UnschedulablePort { port: 0, .. }));
    }

    #[test]
    fn feasibility_check() {
        assert!(check_feasible(&[], 7.0, 16.8));
        assert!(!check_feasible(&[port(7.0, 1), port(7.0, 1)], 7.0, 11.2));
        assert!(check_feasible(&[port(7.0, 1), port(4.2, 1)], 7.0, 11.2));
    }

    #[test]
    fn feasible_proposal_is_unchanged() {
        let r = project(&inst(&[5.0, 5.0, 5.0], &[0.0; 3], 7.0, 16.8)).unwrap();
        assert_eq!(r.rates, vec![5.0, 5.0, 5.0]);
        assert_eq!(r.l1_cost, 0.0);
        assert!(!r.clipped);
    }

    #[test]
    fn over_budget_cost_is_excess() {
        let i = inst(&[7.0, 7.0, 7.0], &[0.0; 3], 7.0, 16.8);
        let r = project(&i).unwrap();
        assert!((r.rates.iter().sum::<f64>() - 16.8).abs() < 1e-12);
        assert!((r.l1_cost - 4.2).abs() < 1e-12);
        assert!(r.clipped);
        let o = lp_oracle(&i).unwrap();
        assert!((o.l1_cost - 4.2).abs() < 1e-9);
    }

    #[test]
    fn clamp_only_case() {
        let i = inst(&[-1.0, 9.0], &[0.0, 3.0], 7.0, 14.0);
        let r = project(&i).unwrap();
        assert_eq!(r.rates, vec![0.0, 7.0]);
        let o = lp_oracle(&i).unwrap();
        assert!((o.l1_cost - r.l1_cost).abs() < 1e-9);
        assert!((o.rates[0]).abs() < 1e-9 && (o.rates[1] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn single_port_box_clamp() {
        let r = lp_oracle(&inst(&[10.0], &[0.0], 7.0, 7.0)).unwrap();
        assert!((r.rates[0] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn slack_budget_is_identity_on_clamp() {
        let i = inst(&[-2.0, 3.5, 12.0], &[0.0, 1.0, 2.0], 7.0, 100.0);
        let o = lp_oracle(&i).unwrap();
        for (a, b) in o.rates.iter().zip([0.0, 3.5, 7.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reduction_order_prefers_largest_slack_then_index() {
        let r = project(&inst(&[6.0, 6.0, 2.0], &[0.0, 0.0, 0.0], 7.0, 12.0)).unwrap();
        assert_eq!(r.rates, vec![4.0, 6.0, 2.0]);
    }

    #[test]
    fn infeasible_instance_is_reported() {
        let err = project(&inst(&[7.0, 7.0], &[7.0, 7.0], 7.0, 11.2)).unwrap_err();
        assert!(matches!(err, SafeLayerError::Infeasible { .. }));
        assert!(lp_oracle(&inst(&[7.0, 7.0], &[7.0, 7.0], 7.0, 11.2)).is_err());
    }

    fn instance_strategy() -> impl Strategy<Value = ProjectionInstance> {
        (1usize..=7)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(-2.0f64..10.0, n),
                    prop::collection::vec(0.0f64..1.0, n),
                    0.0f64..1.0,
                )
            })
            .prop_map(|(proposal, fractions, tight)| {
                let n = proposal.len();
                let budget = 5.6 * n as f64;
                // lower bounds at most 7 each, scaled down to fit the budget
                let raw: Vec<f64> = fractions.iter().map(|f| f * 7.0).collect();
                let sum: f64 = raw.iter().sum();
                let scale = if sum > budget * tight { budget * tight / sum } else { 1.0 };
                ProjectionInstance {
                    proposal,
                    lower: raw.iter().map(|l| l * scale).collect(),
                    upper: 7.0,
                    budget,
                }
            })
    }

    proptest! {
        #[test]
        fn projection_is_feasible_optimal_and_idempotent(i in instance_strategy()) {
            let r = project(&i).unwrap();
            for (x, l) in r.rates.iter().zip(&i.lower) {
                prop_assert!(*x >= *l - FEASIBILITY_TOL && *x <= i.upper + FEASIBILITY_TOL);
            }
            prop_assert!(r.rates.iter().sum::<f64>() <= i.budget + FEASIBILITY_TOL);
            let o = lp_oracle(&i).unwrap();
            prop_assert!((r.l1_cost - o.l1_cost).abs() < 1e-6, "{} vs {}", r.l1_cost, o.l1_cost);
            let again = project(&ProjectionInstance { proposal: r.rates.clone(), ..i.clone() }).unwrap();
            prop_assert_eq!(again.rates, r.rates);
        }

        #[test]
        fn schedulability_is_maintained(
            residuals in prop::collection::vec((0.01f64..1.0, 1usize..=12), 1..=7),
            proposal in prop::collection::vec(-2.0f64..10.0, 7),
        ) {
            let n = residuals.len();
            let rate = 5.6;
            let ports: Vec<PortState> = residuals
                .iter()
                .map(|&(f, s)| port(f * s as f64 * rate, s))
                .collect();
            let lower = lower_bounds(&ports, rate).unwrap();
            let i = ProjectionInstance { proposal: proposal[..n].to_vec(), lower, upper: 7.0, budget: rate * n as f64 };
            let r = project(&i).unwrap();
            for (p, x) in ports.iter().zip(&r.rates) {
                let left = (p.residual_demand_kwh - x).max(0.0);
                prop_assert!(left <= (p.residual_slots - 1) as f64 * rate + FEASIBILITY_TOL);
            }
        }
    }
}
