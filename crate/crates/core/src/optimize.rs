//! Capacity-constrained utility optimization and its entropy dual.
//!
//! `solve_system` maximizes aggregate utility subject to per-queue capacity
//! constraints by projected subgradient descent on the queue prices, with a
//! Newton polish on the active set and a final minimum-norm price projection
//! so degenerate multiplier sets resolve to a canonical representative.
//! `primal_reconstruct` maps the certified price/rate pair to the entropy
//! problem's solution, and `beta_star` checks the two optimal values agree.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelIndex, QueueSpec};

/// Per-route transfer rates.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub lambda: Vec<f64>,
}

/// Per-queue prices (Lagrange multipliers, units of time).
#[derive(Debug, Clone)]
pub struct Prices {
    pub q: Vec<f64>,
}

/// Residuals of the first-order optimality system.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// `max_i |U'_i(L_i) - sum_{j in i} q_j|`
    pub stationarity: f64,
    /// `max_j |q_j (C_j - sum_{i: j in i} L_i)|`
    pub complementary_slackness: f64,
    /// `max_j max(0, sum_{i: j in i} L_i - C_j)`, plus any negative rate.
    pub primal_feasibility: f64,
    /// `max_j max(0, -q_j)`
    pub dual_feasibility: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.complementary_slackness)
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
    }
}

/// Entropy-problem solution reconstructed from a certified dual pair.
#[derive(Debug, Clone)]
pub struct EntropySolution {
    /// `m*_ji = q*_j L*_i` over the incidence set, canonical pair order.
    pub m: Vec<f64>,
    /// `mbar*_i = L*_i U'_i(L*_i)`.
    pub m_bar: Vec<f64>,
    /// Entropy objective at the reconstructed point.
    pub objective: f64,
}

/// Solver result bundle (also carried inside non-convergence errors).
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub allocation: Allocation,
    pub prices: Prices,
    pub kkt: KktReport,
}

/// Primal/dual optimal values and their gap.
#[derive(Debug, Clone)]
pub struct BetaStarReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// Whether `gap <= tol * (1 + |dual|)` held.
    pub within_tol: bool,
}

const MAX_SUBGRADIENT_ITERS: usize = 200_000;
const NEWTON_ITERS: usize = 60;

/// Price sums below this are clamped when inverting the utility gradient.
const PRICE_FLOOR: f64 = 1e-12;

fn route_price_sum(idx: &ModelIndex, i: usize, q: &[f64]) -> f64 {
    idx.route_paths[i].iter().map(|&j| q[j]).sum()
}

fn rates_from_prices(idx: &ModelIndex, q: &[f64]) -> Vec<f64> {
    (0..idx.n_routes())
        .map(|i| {
            let s = route_price_sum(idx, i, q).max(PRICE_FLOOR);
            idx.control(i).utility.inv_prime(s).unwrap_or(f64::MAX)
        })
        .collect()
}

fn queue_loads(idx: &ModelIndex, lambda: &[f64]) -> Vec<f64> {
    let mut load = vec![0.0; idx.n_queues()];
    for (i, path) in idx.route_paths.iter().enumerate() {
        for &j in path {
            load[j] += lambda[i];
        }
    }
    load
}

/// Residuals of the first-order system for a candidate pair.
pub fn kkt_verify(idx: &ModelIndex, alloc: &Allocation, prices: &Prices) -> KktReport {
    let load = queue_loads(idx, &alloc.lambda);
    let mut stationarity: f64 = 0.0;
    for i in 0..idx.n_routes() {
        let s = route_price_sum(idx, i, &prices.q);
        let up = idx
            .control(i)
            .utility
            .prime(alloc.lambda[i].max(PRICE_FLOOR))
            .unwrap_or(f64::INFINITY);
        stationarity = stationarity.max((up - s).abs());
    }
    let mut slackness: f64 = 0.0;
    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for j in 0..idx.n_queues() {
        let cap = idx.capacity(j);
        slackness = slackness.max((prices.q[j] * (cap - load[j])).abs());
        primal = primal.max(load[j] - cap);
        dual = dual.max(-prices.q[j]);
    }
    for &l in &alloc.lambda {
        primal = primal.max(-l);
    }
    KktReport {
        stationarity,
        complementary_slackness: slackness,
        primal_feasibility: primal.max(0.0),
        dual_feasibility: dual.max(0.0),
    }
}

fn aggregate_utility(idx: &ModelIndex, lambda: &[f64]) -> f64 {
    (0..idx.n_routes())
        .map(|i| {
            idx.control(i)
                .utility
                .value(lambda[i])
                .unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

/// Dual function value at prices `q` (inner maximization in closed form).
fn dual_value(idx: &ModelIndex, q: &[f64], lambda: &[f64]) -> f64 {
    let mut v = 0.0;
    for i in 0..idx.n_routes() {
        let s = route_price_sum(idx, i, q).max(PRICE_FLOOR);
        v += idx.control(i).utility.value(lambda[i]).unwrap_or(0.0) - lambda[i] * s;
    }
    for j in 0..idx.n_queues() {
        v += q[j] * idx.capacity(j);
    }
    v
}

/// Scale a candidate allocation into the feasible region to get a utility
/// lower bound for Polyak steps.
fn feasible_utility(idx: &ModelIndex, lambda: &[f64]) -> f64 {
    let load = queue_loads(idx, lambda);
    let mut shrink = 1.0f64;
    for j in 0..idx.n_queues() {
        if load[j] > 0.0 {
            shrink = shrink.min(idx.capacity(j) / load[j]);
        }
    }
    let scaled: Vec<f64> = lambda
        .iter()
        .map(|&l| (l * shrink).max(PRICE_FLOOR))
        .collect();
    aggregate_utility(idx, &scaled)
}

/// Maximize aggregate utility subject to capacity constraints.
///
/// Projected dual subgradient with diminishing steps and a Polyak fallback
/// once a feasible lower bound is known, then a Newton refinement on the
/// tight queues and a minimum-norm projection of the prices onto the
/// stationarity equations. Terminates when every KKT residual is `<= tol`.
pub fn solve_system(idx: &ModelIndex, tol: f64) -> Result<(Allocation, Prices, KktReport)> {
    let active: Vec<usize> = (0..idx.n_queues())
        .filter(|&j| idx.route_paths.iter().any(|p| p.contains(&j)))
        .collect();
    if idx.n_routes() == 0 {
        return Err(Error::Domain("model has no routes".into()));
    }

    // Fair-share warm start: split each route's gradient evenly over its path.
    let mut q = vec![0.0f64; idx.n_queues()];
    {
        let mut sharers = vec![0usize; idx.n_queues()];
        for path in &idx.route_paths {
            for &j in path {
                sharers[j] += 1;
            }
        }
        let guess: Vec<f64> = (0..idx.n_routes())
            .map(|i| {
                idx.route_paths[i]
                    .iter()
                    .map(|&j| idx.capacity(j) / sharers[j] as f64)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        for i in 0..idx.n_routes() {
            let up = idx.control(i).utility.prime(guess[i]).unwrap_or(1.0);
            let hops = idx.route_paths[i].len() as f64;
            for &j in &idx.route_paths[i] {
                q[j] = q[j].max(up / hops);
            }
        }
    }

    let a0 = q.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut lower_bound = f64::NEG_INFINITY;

    for k in 1..=MAX_SUBGRADIENT_ITERS {
        let lambda = rates_from_prices(idx, &q);
        let load = queue_loads(idx, &lambda);
        let report = kkt_verify(
            idx,
            &Allocation {
                lambda: lambda.clone(),
            },
            &Prices { q: q.clone() },
        );
        let res = report.max_residual();
        if best.as_ref().map_or(true, |(b, _, _)| res < *b) {
            best = Some((res, q.clone(), lambda.clone()));
        }
        if res <= 0.5 * tol {
            break;
        }

        lower_bound = lower_bound.max(feasible_utility(idx, &lambda));
        // Subgradient of the dual at q (descent direction is -g).
        let g: Vec<f64> = (0..idx.n_queues())
            .map(|j| idx.capacity(j) - load[j])
            .collect();
        let gnorm2: f64 = active.iter().map(|&j| g[j] * g[j]).sum();
        if gnorm2 <= f64::MIN_POSITIVE {
            break;
        }
        let dv = dual_value(idx, &q, &lambda);
        let polyak = (dv - lower_bound) / gnorm2;
        let step = if lower_bound.is_finite() && polyak > 0.0 {
            polyak
        } else {
            a0 / (k as f64 * gnorm2.sqrt().max(1.0))
        };
        for &j in &active {
            q[j] = (q[j] - step * g[j]).max(0.0);
        }
    }

    let (_, mut q, _) = best.expect("at least one iterate");
    newton_polish(idx, &active, &mut q);
    let lambda = rates_from_prices(idx, &q);

    // Canonical prices: minimum-norm solution of the stationarity equations
    // restricted to tight queues.
    let mut final_q = q.clone();
    if let Some(proj) = min_norm_prices(idx, &q, &lambda) {
        let cand = kkt_verify(
            idx,
            &Allocation {
                lambda: lambda.clone(),
            },
            &Prices { q: proj.clone() },
        );
        let old = kkt_verify(
            idx,
            &Allocation {
                lambda: lambda.clone(),
            },
            &Prices { q: q.clone() },
        );
        if cand.max_residual() <= old.max_residual().max(tol) {
            final_q = proj;
        }
    }

    let alloc = Allocation {
        lambda: rates_from_prices(idx, &final_q),
    };
    let prices = Prices { q: final_q };
    let report = kkt_verify(idx, &alloc, &prices);
    if report.max_residual() <= tol {
        Ok((alloc, prices, report))
    } else {
        Err(Error::NonConvergence {
            message: format!(
                "KKT residual {:.3e} above tolerance {:.1e} after {} iterations",
                report.max_residual(),
                tol,
                MAX_SUBGRADIENT_ITERS
            ),
            best: Box::new(SolveOutcome {
                allocation: alloc,
                prices,
                kkt: report,
            }),
        })
    }
}

/// Newton iterations on the tight capacity equations `load_j(q) = C_j`.
fn newton_polish(idx: &ModelIndex, active: &[usize], q: &mut [f64]) {
    for _ in 0..NEWTON_ITERS {
        let lambda = rates_from_prices(idx, q);
        let load = queue_loads(idx, &lambda);
        // Queues that are tight (or priced) participate in the Newton system.
        let tight: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&j| {
                let slack = idx.capacity(j) - load[j];
                slack.abs() <= 1e-3 * (1.0 + idx.capacity(j)) || q[j] > 1e-9
            })
            .collect();
        if tight.is_empty() {
            return;
        }
        let pos: std::collections::HashMap<usize, usize> =
            tight.iter().enumerate().map(|(a, &j)| (j, a)).collect();
        let n = tight.len();
        let mut jac = DMatrix::<f64>::zeros(n, n);
        let mut f = DVector::<f64>::zeros(n);
        for (a, &j) in tight.iter().enumerate() {
            f[a] = idx.capacity(j) - load[j];
        }
        for i in 0..idx.n_routes() {
            let s = route_price_sum(idx, i, q).max(PRICE_FLOOR);
            // d lambda_i / d s = -lambda_i / (alpha s) for the fair family;
            // use a finite difference for tabulated utilities.
            let dl = match &idx.control(i).utility {
                crate::model::Utility::AlphaFair { alpha, .. } => -lambda[i] / (alpha * s),
                u => {
                    let h = 1e-6 * s;
                    let a = u.inv_prime(s + h).unwrap_or(lambda[i]);
                    let b = u.inv_prime((s - h).max(PRICE_FLOOR)).unwrap_or(lambda[i]);
                    (a - b) / (2.0 * h)
                }
            };
            for &j1 in &idx.route_paths[i] {
                let Some(&a1) = pos.get(&j1) else { continue };
                for &j2 in &idx.route_paths[i] {
                    if let Some(&a2) = pos.get(&j2) {
                        // d load_j1 / d q_j2
                        jac[(a1, a2)] -= dl;
                    }
                }
            }
        }
        // F(q) = C - load and jac = dF/dq (assembled as -dl >= 0), so the
        // Newton step is dq = -jac^{-1} F.
        let svd = jac.svd(true, true);
        let Ok(dq) = svd.solve(&f, 1e-12) else { return };
        let base: f64 = f.amax();
        if base <= 1e-14 {
            return;
        }
        let mut improved = false;
        let mut t = 1.0;
        for _ in 0..30 {
            let mut trial = q.to_vec();
            for (a, &j) in tight.iter().enumerate() {
                trial[j] = (trial[j] - t * dq[a]).max(0.0);
            }
            let tl = rates_from_prices(idx, &trial);
            let tload = queue_loads(idx, &tl);
            let tres = tight
                .iter()
                .map(|&j| (idx.capacity(j) - tload[j]).abs())
                .fold(0.0f64, f64::max);
            if tres < base {
                q.copy_from_slice(&trial);
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return;
        }
    }
}

/// Minimum-norm prices solving `sum_{j in i} q_j = U'_i(L_i)` with mass only
/// on tight queues; `None` when the projection is not cleanly nonnegative.
fn min_norm_prices(idx: &ModelIndex, q: &[f64], lambda: &[f64]) -> Option<Vec<f64>> {
    let load = queue_loads(idx, lambda);
    let tight: Vec<usize> = (0..idx.n_queues())
        .filter(|&j| {
            let slack = idx.capacity(j) - load[j];
            slack.abs() <= 1e-6 * (1.0 + idx.capacity(j)) && q[j] > 0.0
        })
        .collect();
    if tight.is_empty() {
        return None;
    }
    let pos: std::collections::HashMap<usize, usize> =
        tight.iter().enumerate().map(|(a, &j)| (j, a)).collect();
    let rows = idx.n_routes();
    let mut a = DMatrix::<f64>::zeros(rows, tight.len());
    let mut b = DVector::<f64>::zeros(rows);
    for i in 0..rows {
        for &j in &idx.route_paths[i] {
            if let Some(&col) = pos.get(&j) {
                a[(i, col)] = 1.0;
            }
        }
        b[i] = idx
            .control(i)
            .utility
            .prime(lambda[i].max(PRICE_FLOOR))
            .ok()?;
    }
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-12).ok()?;
    let mut out = vec![0.0; idx.n_queues()];
    for (col, &j) in tight.iter().enumerate() {
        if sol[col] < -1e-9 {
            return None;
        }
        out[j] = sol[col].max(0.0);
    }
    Some(out)
}

/// Queue-level rate exponent
/// `beta_j(m^j) = sum_i m_ji log(m_ji C_j / (m_j Lambda_i))`
/// with the `0 log 0 = 0` convention and terms only when `m_j > 0`.
pub fn beta_queue(queue: &QueueSpec, lambdas: &[f64], m: &[f64]) -> f64 {
    assert_eq!(lambdas.len(), m.len());
    let m_j: f64 = m.iter().sum();
    if !(m_j > 0.0) {
        return 0.0;
    }
    let mut v = 0.0;
    for (&mi, &li) in m.iter().zip(lambdas) {
        if mi > 0.0 {
            if !(li > 0.0) {
                return f64::INFINITY;
            }
            v += mi * (mi * queue.capacity / (m_j * li)).ln();
        }
    }
    v
}

/// Same exponent through its transform representation:
/// `max sum m_ji phi_i` subject to `sum Lambda_i e^{phi_i} <= C_j`,
/// solved at the binding constraint's stationarity point.
pub fn beta_queue_dual(queue: &QueueSpec, lambdas: &[f64], m: &[f64]) -> f64 {
    assert_eq!(lambdas.len(), m.len());
    let m_j: f64 = m.iter().sum();
    if !(m_j > 0.0) {
        // All-zero loading: value 0 by convention.
        return 0.0;
    }
    let mut value = 0.0;
    let mut constraint = 0.0;
    for (&mi, &li) in m.iter().zip(lambdas) {
        if mi > 0.0 {
            let phi = (mi * queue.capacity / (m_j * li)).ln();
            value += mi * phi;
            constraint += li * phi.exp();
        }
    }
    debug_assert!(
        (constraint - queue.capacity).abs() <= 1e-9 * (1.0 + queue.capacity),
        "stationarity point must bind the capacity constraint"
    );
    value
}

/// Entropy Lagrangian
/// `beta_{G,l}(m, mt) = sum_{m_ji > 0} m_ji log(m_ji C_j / (m_j e^{l_i}))
///  - sum_i [G_i(mt_i) - l_i mt_i]`.
///
/// With `l = 0` and `mt_i = sum_j m_ji` this is the entropy objective itself.
pub fn lagrangian(idx: &ModelIndex, m: &[f64], m_tilde: &[f64], lam: &[f64]) -> f64 {
    assert_eq!(m.len(), idx.n_pairs());
    assert_eq!(m_tilde.len(), idx.n_routes());
    assert_eq!(lam.len(), idx.n_routes());
    let mut queue_tot = vec![0.0; idx.n_queues()];
    for (k, &(j, _)) in idx.pairs.iter().enumerate() {
        queue_tot[j] += m[k];
    }
    let mut v = 0.0;
    for (k, &(j, i)) in idx.pairs.iter().enumerate() {
        if m[k] > 0.0 {
            v += m[k] * ((m[k] * idx.capacity(j) / queue_tot[j]).ln() - lam[i]);
        }
    }
    for i in 0..idx.n_routes() {
        let g = idx
            .control(i)
            .utility
            .g_value(m_tilde[i])
            .unwrap_or(f64::NEG_INFINITY);
        v -= g - lam[i] * m_tilde[i];
    }
    v
}

/// Entropy objective at consistent windows with zero multipliers.
pub fn beta_g(idx: &ModelIndex, m: &[f64]) -> f64 {
    let mut m_bar = vec![0.0; idx.n_routes()];
    for (k, &(_, i)) in idx.pairs.iter().enumerate() {
        m_bar[i] += m[k];
    }
    lagrangian(idx, m, &m_bar, &vec![0.0; idx.n_routes()])
}

/// Map a certified rate/price pair to the entropy solution
/// `m*_ji = q*_j L*_i`, `mbar*_i = L*_i U'_i(L*_i)`.
pub fn primal_reconstruct(
    idx: &ModelIndex,
    alloc: &Allocation,
    prices: &Prices,
    tol: f64,
) -> Result<EntropySolution> {
    let kkt = kkt_verify(idx, alloc, prices);
    if kkt.max_residual() > tol {
        return Err(Error::InconsistentDual(format!(
            "pair fails KKT at {:.3e} > {:.1e}",
            kkt.max_residual(),
            tol
        )));
    }
    let m: Vec<f64> = idx
        .pairs
        .iter()
        .map(|&(j, i)| prices.q[j] * alloc.lambda[i])
        .collect();
    let mut m_bar = vec![0.0; idx.n_routes()];
    for i in 0..idx.n_routes() {
        m_bar[i] = alloc.lambda[i] * idx.control(i).utility.prime(alloc.lambda[i])?;
    }
    // Consistency: stationarity makes the window totals match the pair sums.
    for i in 0..idx.n_routes() {
        let sum: f64 = idx.route_pairs[i].iter().map(|&k| m[k]).sum();
        if (sum - m_bar[i]).abs() > 100.0 * tol * (1.0 + m_bar[i]) {
            return Err(Error::InconsistentDual(format!(
                "route {}: window {} != pair sum {}",
                idx.model.routes[i].id, m_bar[i], sum
            )));
        }
    }
    let objective = lagrangian(idx, &m, &m_bar, &vec![0.0; idx.n_routes()]);
    Ok(EntropySolution {
        m,
        m_bar,
        objective,
    })
}

/// Solve, reconstruct, and compare the entropy optimum with the utility
/// optimum. A gap above `tol * (1 + |dual|)` is reported, not hidden.
pub fn beta_star(idx: &ModelIndex, tol: f64) -> Result<BetaStarReport> {
    let (alloc, prices, _) = solve_system(idx, tol)?;
    let entropy = primal_reconstruct(idx, &alloc, &prices, tol.max(1e-6))?;
    let dual = aggregate_utility(idx, &alloc.lambda);
    let gap = (entropy.objective - dual).abs();
    Ok(BetaStarReport {
        primal: entropy.objective,
        dual,
        gap,
        within_tol: gap <= tol.max(1e-10) * (1.0 + dual.abs()),
    })
}

/// Residuals of the two families defining the concentration manifold:
/// `m_ji C_j = m_j L*_i` and `G'_i(mbar_i) = log L*_i`.
pub fn manifold_residuals(idx: &ModelIndex, alloc: &Allocation, m: &[f64]) -> (f64, f64) {
    let mut queue_tot = vec![0.0; idx.n_queues()];
    for (k, &(j, _)) in idx.pairs.iter().enumerate() {
        queue_tot[j] += m[k];
    }
    let mut flow = 0.0f64;
    for (k, &(j, i)) in idx.pairs.iter().enumerate() {
        flow = flow.max((m[k] * idx.capacity(j) - queue_tot[j] * alloc.lambda[i]).abs());
    }
    let mut window = 0.0f64;
    for i in 0..idx.n_routes() {
        let m_bar: f64 = idx.route_pairs[i].iter().map(|&k| m[k]).sum();
        let g = idx
            .control(i)
            .utility
            .g_prime(m_bar)
            .unwrap_or(f64::INFINITY);
        window = window.max((g - alloc.lambda[i].ln()).abs());
    }
    (flow, window)
}

/// Reconstructed manifold point plus the Euclidean distance of `point` to it.
pub fn manifold_point_and_distance(
    idx: &ModelIndex,
    alloc: &Allocation,
    prices: &Prices,
    point: &[f64],
    tol: f64,
) -> Result<(EntropySolution, f64)> {
    let sol = primal_reconstruct(idx, alloc, prices, tol)?;
    let dist = sol
        .m
        .iter()
        .zip(point)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((sol, dist))
}
