//! Exact stationary analysis.
//!
//! The count vector `M = (M_ji)` over the incidence set has stationary law
//!
//! ```text
//! P(M = m) = (1/B) prod_j [ multinomial(m_j; m_ji) C_j^{-m_j} ]
//!                  prod_i exp(G_i^(c)(mbar_i))
//! ```
//!
//! computed here by enumerating total-count shells in log space, with a
//! geometric tail bound certifying the truncation. A direct generator solve
//! (see [`generator`]) serves as an independent oracle on finite spaces.

mod generator;

pub use generator::{aggregated_generator, generator_solve, Generator};

use std::collections::HashMap;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{ModelIndex, QueueSpec};
use crate::optimize;

/// Packet counts per (queue, route) incidence pair, in the canonical
/// queue-major order of [`ModelIndex::pairs`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CountVector(pub Vec<u32>);

impl CountVector {
    pub fn total(&self) -> u64 {
        self.0.iter().map(|&x| x as u64).sum()
    }
}

/// Truncation policy for state enumeration.
#[derive(Debug, Clone, Copy)]
pub enum NmaxPolicy {
    /// Grow shell by shell until the tail bound drops below
    /// `tail_tol * B` or the state budget is exhausted.
    Auto,
    /// Enumerate exactly up to this total count.
    Explicit(u32),
}

#[derive(Debug, Clone, Copy)]
pub struct ExactOptions {
    pub n_max: NmaxPolicy,
    /// Relative tail mass that makes a truncation acceptable.
    pub tail_tol: f64,
    /// Hard cap on enumerated states.
    pub state_budget: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions {
            n_max: NmaxPolicy::Auto,
            tail_tol: 1e-12,
            state_budget: 5_000_000,
        }
    }
}

impl ExactOptions {
    pub fn explicit(n_max: u32) -> Self {
        ExactOptions {
            n_max: NmaxPolicy::Explicit(n_max),
            ..Default::default()
        }
    }
}

/// Result of summing the unnormalized weights over a truncated space.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub n_max: u32,
    pub log_b: f64,
    /// Truncated normalizing constant (sum over the enumerated states).
    pub b: f64,
    /// Upper bound on the weight mass omitted beyond `n_max`.
    pub tail_bound: f64,
    pub states: usize,
}

/// Per-route window-potential tables `G_i^(c)(k)`, cached so tabulated
/// utilities are not re-maximized per state.
struct WindowTables {
    log_gc: Vec<Vec<f64>>,
}

impl WindowTables {
    fn new(idx: &ModelIndex) -> Self {
        WindowTables {
            log_gc: vec![Vec::new(); idx.n_routes()],
        }
    }

    fn extend(&mut self, idx: &ModelIndex, c: u64, upto: usize) {
        for i in 0..idx.n_routes() {
            let t = &mut self.log_gc[i];
            while t.len() <= upto {
                let k = t.len() as u64;
                t.push(idx.control(i).log_gc(c, k));
            }
        }
    }

    fn get(&self, i: usize, k: u64) -> f64 {
        self.log_gc[i][k as usize]
    }
}

/// Log of the product-form weight of a count vector.
///
/// `-inf` when a window cap is exceeded (the state is unreachable).
pub fn log_weight(idx: &ModelIndex, c: u64, m: &CountVector) -> f64 {
    assert_eq!(
        m.0.len(),
        idx.n_pairs(),
        "count vector must be indexed by the incidence set"
    );
    let queue_tot = idx.queue_totals(&m.0);
    let window_tot = idx.window_totals(&m.0);
    let mut lw = 0.0;
    for j in 0..idx.n_queues() {
        lw += ln_gamma(queue_tot[j] as f64 + 1.0);
        lw -= queue_tot[j] as f64 * idx.capacity(j).ln();
    }
    for (k, _) in idx.pairs.iter().enumerate() {
        lw -= ln_gamma(m.0[k] as f64 + 1.0);
    }
    for i in 0..idx.n_routes() {
        lw += idx.control(i).log_gc(c, window_tot[i]);
    }
    lw
}

/// Product-form weight in normal space; 0 when a window cap is exceeded.
pub fn unnormalized_weight(idx: &ModelIndex, c: u64, m: &CountVector) -> f64 {
    log_weight(idx, c, m).exp()
}

fn log_weight_tabled(
    idx: &ModelIndex,
    tables: &WindowTables,
    m: &[u32],
    queue_tot: &[u64],
    window_tot: &[u64],
) -> f64 {
    let mut lw = 0.0;
    for j in 0..idx.n_queues() {
        lw += ln_gamma(queue_tot[j] as f64 + 1.0);
        lw -= queue_tot[j] as f64 * idx.capacity(j).ln();
    }
    for &mk in m {
        lw -= ln_gamma(mk as f64 + 1.0);
    }
    for (i, &w) in window_tot.iter().enumerate() {
        lw += tables.get(i, w);
    }
    lw
}

/// Visit every count vector with total exactly `n` (respecting per-route
/// window caps) in lexicographic order over the canonical pair order.
pub(crate) fn for_each_in_shell(
    idx: &ModelIndex,
    caps: &[Option<u64>],
    n: u32,
    f: &mut impl FnMut(&[u32]),
) {
    let k = idx.n_pairs();
    let mut buf = vec![0u32; k];
    let mut route_used = vec![0u64; idx.n_routes()];
    fn rec(
        idx: &ModelIndex,
        caps: &[Option<u64>],
        buf: &mut [u32],
        route_used: &mut [u64],
        slot: usize,
        remaining: u32,
        f: &mut impl FnMut(&[u32]),
    ) {
        let k = buf.len();
        let (_, route) = idx.pairs[slot];
        let head_room = match caps[route] {
            Some(cap) => cap.saturating_sub(route_used[route]),
            None => u64::MAX,
        };
        if slot == k - 1 {
            if (remaining as u64) <= head_room {
                buf[slot] = remaining;
                f(buf);
            }
            return;
        }
        let hi = (remaining as u64).min(head_room) as u32;
        for v in 0..=hi {
            buf[slot] = v;
            route_used[route] += v as u64;
            rec(idx, caps, buf, route_used, slot + 1, remaining - v, f);
            route_used[route] -= v as u64;
        }
    }
    if k == 0 {
        if n == 0 {
            f(&buf);
        }
        return;
    }
    rec(idx, caps, &mut buf, &mut route_used, 0, n, f);
}

fn route_caps(idx: &ModelIndex, c: u64) -> Vec<Option<u64>> {
    (0..idx.n_routes())
        .map(|i| idx.control(i).cap_total(c))
        .collect()
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Geometric tail bound following the finite-sum comparison: pick interior
/// log-rates `lambda` (system solve at capacities shrunk by 0.9), write each
/// weight as a stable-network term times `exp(sum_i h_i(mbar_i))` with
/// `h_i(k) = G_i^(c)(k) - lambda_i k`, and bound everything beyond the last
/// shell by the concave envelope `phi = max-plus convolution of the h_i`
/// against a geometric series.
struct TailBounder {
    /// `log prod_j C_j / (C_j - sum_{i: j in i} e^{lambda_i})`.
    log_stable_mass: f64,
    lambda: Vec<f64>,
    /// Per-route `h_i` tables, extended on demand.
    h: Vec<Vec<f64>>,
    /// `phi_stage[r]` = envelope over routes `0..=r`.
    phi: Vec<Vec<f64>>,
}

impl TailBounder {
    fn new(idx: &ModelIndex) -> Result<Self> {
        // Interior point: solve the rate allocation at shrunk capacities so
        // every queue has slack.
        let mut shrunk = idx.model.clone();
        let mut lambda;
        let mut shrink = 0.9;
        loop {
            for (q, orig) in shrunk.queues.iter_mut().zip(&idx.model.queues) {
                q.capacity = orig.capacity * shrink;
            }
            let sidx = ModelIndex::new(&shrunk)?;
            let (alloc, _, _) = optimize::solve_system(&sidx, 1e-6)?;
            lambda = alloc.lambda;
            let ok = (0..idx.n_queues()).all(|j| {
                let load: f64 = (0..idx.n_routes())
                    .filter(|&i| idx.route_paths[i].contains(&j))
                    .map(|i| lambda[i])
                    .sum();
                load < idx.capacity(j) * 0.999
            });
            if ok {
                break;
            }
            shrink *= 0.9;
            if shrink < 0.5 {
                return Err(Error::Numerical(
                    "could not find an interior point for the tail bound".into(),
                ));
            }
        }
        let mut log_stable_mass = 0.0;
        for j in 0..idx.n_queues() {
            let load: f64 = (0..idx.n_routes())
                .filter(|&i| idx.route_paths[i].contains(&j))
                .map(|i| lambda[i])
                .sum();
            log_stable_mass += (idx.capacity(j) / (idx.capacity(j) - load)).ln();
        }
        Ok(TailBounder {
            log_stable_mass,
            lambda: lambda.iter().map(|&l| l.ln()).collect(),
            h: vec![Vec::new(); idx.n_routes()],
            phi: vec![Vec::new(); idx.n_routes()],
        })
    }

    fn extend_to(&mut self, idx: &ModelIndex, c: u64, n: usize) {
        let routes = idx.n_routes();
        for i in 0..routes {
            while self.h[i].len() <= n {
                let k = self.h[i].len() as u64;
                self.h[i].push(idx.control(i).log_gc(c, k) - self.lambda[i] * k as f64);
            }
        }
        while self.phi[0].len() <= n {
            let k = self.phi[0].len();
            self.phi[0].push(self.h[0][k]);
        }
        for r in 1..routes {
            while self.phi[r].len() <= n {
                let t = self.phi[r].len();
                let mut best = f64::NEG_INFINITY;
                for k in 0..=t {
                    let v = self.phi[r - 1][k] + self.h[r][t - k];
                    if v > best {
                        best = v;
                    }
                }
                self.phi[r].push(best);
            }
        }
    }

    /// Log of the bound on all weight strictly beyond total count `n_max`;
    /// `+inf` when the envelope has not started decaying yet.
    fn log_tail(&mut self, idx: &ModelIndex, c: u64, n_max: u32) -> f64 {
        let n = n_max as usize;
        self.extend_to(idx, c, n + 2);
        let phi = self.phi.last().expect("at least one route");
        let p1 = phi[n + 1];
        if p1 == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let eps = p1 - phi[n + 2];
        if !(eps > 0.0) {
            return f64::INFINITY;
        }
        // sum_{t > n} e^{phi(t)} <= e^{phi(n+1)} / (1 - e^{-eps})
        self.log_stable_mass + p1 - (-(-eps).exp_m1()).ln()
    }
}

/// Sum the product-form weights over a truncated shell enumeration.
///
/// Returns the truncated normalizer and a certified tail bound; errors when
/// the bound cannot be brought below `opts.tail_tol * B` within the policy.
pub fn normalizing_constant(idx: &ModelIndex, c: u64, opts: &ExactOptions) -> Result<Truncation> {
    assert!(c >= 1);
    let caps = route_caps(idx, c);
    let all_capped = caps.iter().all(|x| x.is_some());
    let cap_sum: Option<u64> = if all_capped {
        Some(caps.iter().map(|x| x.unwrap()).sum())
    } else {
        None
    };

    let mut tables = WindowTables::new(idx);
    let mut bounder: Option<TailBounder> = None;
    let mut log_b = f64::NEG_INFINITY;
    let mut states = 0usize;
    let mut n = 0u32;
    let hard_max = match opts.n_max {
        NmaxPolicy::Auto => u32::MAX,
        NmaxPolicy::Explicit(nm) => nm,
    };

    loop {
        tables.extend(idx, c, n as usize);
        let mut shell_log = f64::NEG_INFINITY;
        let mut shell_states = 0usize;
        for_each_in_shell(idx, &caps, n, &mut |m| {
            let qt = idx.queue_totals(m);
            let wt = idx.window_totals(m);
            let lw = log_weight_tabled(idx, &tables, m, &qt, &wt);
            shell_log = logsumexp2(shell_log, lw);
            shell_states += 1;
        });
        states += shell_states;
        if states > opts.state_budget {
            return Err(Error::StateBudgetExceeded(format!(
                "enumeration reached {} states at total count {} (budget {}); \
                 consider window caps or a larger budget",
                states, n, opts.state_budget
            )));
        }
        log_b = logsumexp2(log_b, shell_log);

        let done_by_caps = cap_sum.is_some_and(|cs| n as u64 >= cs);
        let at_explicit_limit = n >= hard_max;

        if done_by_caps {
            return Ok(Truncation {
                n_max: n,
                log_b,
                b: log_b.exp(),
                tail_bound: 0.0,
                states,
            });
        }

        let need_check = at_explicit_limit || matches!(opts.n_max, NmaxPolicy::Auto);
        if need_check {
            if bounder.is_none() {
                bounder = Some(TailBounder::new(idx)?);
            }
            let lb = bounder.as_mut().unwrap().log_tail(idx, c, n);
            let tail = lb.exp();
            let ok = lb.is_finite() || lb == f64::NEG_INFINITY;
            if ok && tail <= opts.tail_tol * log_b.exp() {
                return Ok(Truncation {
                    n_max: n,
                    log_b,
                    b: log_b.exp(),
                    tail_bound: tail,
                    states,
                });
            }
            if at_explicit_limit {
                if opts.tail_tol.is_infinite() {
                    return Ok(Truncation {
                        n_max: n,
                        log_b,
                        b: log_b.exp(),
                        tail_bound: tail,
                        states,
                    });
                }
                let grow = if lb.is_finite() {
                    let eps = estimate_decay(bounder.as_mut().unwrap());
                    ((lb - (opts.tail_tol * log_b.exp()).ln()) / eps.max(1e-3)).ceil() as u64
                } else {
                    (n as u64).max(8) * 2
                };
                return Err(Error::TruncationInsufficient(format!(
                    "tail bound {:.3e} exceeds {:.1e} * B at N_max = {}; \
                     grow N_max by roughly {}",
                    tail, opts.tail_tol, n, grow
                )));
            }
        }
        n += 1;
    }
}

fn estimate_decay(b: &mut TailBounder) -> f64 {
    let phi = b.phi.last().expect("route envelope");
    let n = phi.len();
    if n >= 2 {
        (phi[n - 2] - phi[n - 1]).max(0.0)
    } else {
        0.0
    }
}

/// Truncated enumeration of the stationary law.
#[derive(Debug, Clone)]
pub struct StationaryTable {
    pub c: u64,
    pub n_max: u32,
    pub k: usize,
    states: Vec<u32>,
    probs: Vec<f64>,
    pub log_b: f64,
    pub tail_bound: f64,
}

impl StationaryTable {
    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn state(&self, i: usize) -> &[u32] {
        &self.states[i * self.k..(i + 1) * self.k]
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.states.chunks(self.k).zip(self.probs.iter().copied())
    }

    /// Probability of one state; zero if outside the enumeration.
    pub fn lookup(&self, m: &[u32]) -> f64 {
        self.iter()
            .find(|(s, _)| *s == m)
            .map(|(_, p)| p)
            .unwrap_or(0.0)
    }

    pub fn index_map(&self) -> HashMap<Vec<u32>, usize> {
        self.states
            .chunks(self.k)
            .enumerate()
            .map(|(i, s)| (s.to_vec(), i))
            .collect()
    }
}

/// Enumerate the truncated stationary distribution.
pub fn stationary_distribution(
    idx: &ModelIndex,
    c: u64,
    opts: &ExactOptions,
) -> Result<StationaryTable> {
    let trunc = normalizing_constant(idx, c, opts)?;
    let caps = route_caps(idx, c);
    let mut tables = WindowTables::new(idx);
    tables.extend(idx, c, trunc.n_max as usize);
    let k = idx.n_pairs();
    let mut states = Vec::new();
    let mut logs = Vec::new();
    for n in 0..=trunc.n_max {
        for_each_in_shell(idx, &caps, n, &mut |m| {
            let qt = idx.queue_totals(m);
            let wt = idx.window_totals(m);
            let lw = log_weight_tabled(idx, &tables, m, &qt, &wt);
            if lw > f64::NEG_INFINITY {
                states.extend_from_slice(m);
                logs.push(lw);
            }
        });
    }
    let mut probs: Vec<f64> = logs.iter().map(|&lw| (lw - trunc.log_b).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(StationaryTable {
        c,
        n_max: trunc.n_max,
        k,
        states,
        probs,
        log_b: trunc.log_b,
        tail_bound: trunc.tail_bound,
    })
}

/// Exact throughput and mean-window report.
#[derive(Debug, Clone)]
pub struct ThroughputReport {
    /// Stationary injection (= acknowledgment) rate per route.
    pub lambda: Vec<f64>,
    /// `E[Mbar_i] / c` per route.
    pub mean_window_over_c: Vec<f64>,
    /// `E[M_ji] / c` per incidence pair.
    pub mean_counts_over_c: Vec<f64>,
    pub tail_bound: f64,
    /// Set when the tail bound could shift a throughput past 1e-9.
    pub truncation_warning: bool,
    /// Euclidean distance of the scaled mean state to the concentration
    /// manifold's reconstructed point; filled in by callers that hold the
    /// optimal allocation (see the sweep).
    pub manifold_distance: Option<f64>,
}

impl ThroughputReport {
    /// Distance of `E[M]/c` to a reference scaled state.
    pub fn distance_to(&self, reference: &[f64]) -> f64 {
        self.mean_counts_over_c
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `Lambda_i^(c) = E[g_i^(c)(Mbar_i)]` under the table.
pub fn exact_throughput(idx: &ModelIndex, table: &StationaryTable) -> ThroughputReport {
    let c = table.c;
    let mut lambda = vec![0.0; idx.n_routes()];
    let mut mean_window = vec![0.0; idx.n_routes()];
    let mut mean_counts = vec![0.0; idx.n_pairs()];
    for (m, p) in table.iter() {
        let wt = idx.window_totals(m);
        for i in 0..idx.n_routes() {
            lambda[i] += p * idx.control(i).window_rate(c, wt[i]);
            mean_window[i] += p * wt[i] as f64;
        }
        for (k, &mk) in m.iter().enumerate() {
            mean_counts[k] += p * mk as f64;
        }
    }
    let b = table.log_b.exp();
    let rel_tail = if b > 0.0 { table.tail_bound / b } else { 0.0 };
    let warn = (0..idx.n_routes()).any(|i| rel_tail * idx.control(i).window_rate(c, 0) > 1e-9);
    ThroughputReport {
        lambda,
        mean_window_over_c: mean_window.iter().map(|&w| w / c as f64).collect(),
        mean_counts_over_c: mean_counts.iter().map(|&w| w / c as f64).collect(),
        tail_bound: table.tail_bound,
        truncation_warning: warn,
        manifold_distance: None,
    }
}

/// Isolated-window stationary law `pi(m) ~ exp(G^(c)(m) - lambda m)`.
#[derive(Debug, Clone)]
pub struct WindowMarginal {
    pub probs: Vec<f64>,
    pub tail_bound: f64,
}

/// Truncated marginal of a window fed back at log acknowledgment rate
/// `lambda`; the isolated-component oracle for unit tests.
pub fn window_marginal(
    ctrl: &crate::model::CongestionControl,
    c: u64,
    lambda: f64,
    n_max: u32,
) -> Result<WindowMarginal> {
    let h = |k: u64| ctrl.log_gc(c, k) - lambda * k as f64;
    let logs: Vec<f64> = (0..=n_max as u64).map(h).collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "window marginal has no admissible states".into(),
        ));
    }
    let unnorm: Vec<f64> = logs.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = unnorm.iter().sum();

    // Geometric comparison beyond the truncation point.
    let h1 = h(n_max as u64 + 1);
    let tail = if h1 == f64::NEG_INFINITY {
        0.0
    } else {
        let ratio = (h(n_max as u64 + 2) - h1).exp();
        if !(ratio < 1.0) {
            return Err(Error::TruncationInsufficient(format!(
                "window marginal still growing at N_max = {n_max}"
            )));
        }
        (h1 - mx).exp() / (1.0 - ratio) / z
    };
    Ok(WindowMarginal {
        probs: unnorm.iter().map(|&u| u / z).collect(),
        tail_bound: tail,
    })
}

/// Isolated multi-class queue stationary probability
/// `(1 - rho) multinomial(m_j; m_ji) prod (Lambda_i / C_j)^{m_ji}`.
pub fn queue_marginal(queue: &QueueSpec, arrival_rates: &[f64], counts: &[u32]) -> Result<f64> {
    assert_eq!(arrival_rates.len(), counts.len());
    let offered: f64 = arrival_rates.iter().sum();
    if offered >= queue.capacity {
        return Err(Error::Unstable {
            queue: queue.id.clone(),
            offered,
            capacity: queue.capacity,
        });
    }
    let m_j: u64 = counts.iter().map(|&x| x as u64).sum();
    let mut lp = (1.0 - offered / queue.capacity).ln();
    lp += ln_gamma(m_j as f64 + 1.0);
    for (&m, &rate) in counts.iter().zip(arrival_rates) {
        lp -= ln_gamma(m as f64 + 1.0);
        if m > 0 {
            lp += m as f64 * (rate / queue.capacity).ln();
        }
    }
    Ok(lp.exp())
}

/// `P(||M/c - center|| >= eps)` under the table (Euclidean norm over the
/// incidence coordinates).
pub fn concentration_probability(table: &StationaryTable, center: &[f64], eps: f64) -> f64 {
    assert_eq!(center.len(), table.k);
    let c = table.c as f64;
    let mut p = 0.0;
    for (m, prob) in table.iter() {
        let d2: f64 = m
            .iter()
            .zip(center)
            .map(|(&mk, &ck)| {
                let d = mk as f64 / c - ck;
                d * d
            })
            .sum();
        if d2.sqrt() >= eps {
            p += prob;
        }
    }
    p
}
