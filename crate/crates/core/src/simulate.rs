//! Event-driven simulation of the detailed positional state.
//!
//! The chain holds, per queue, the ordered class sequence, and per route the
//! window count. Three transition families drive it: window injections at
//! `g_i^(c)(mbar_i)` (placed by the first queue's `delta`), transfers between
//! consecutive hops at `C_j gamma_j(l, m_j) delta_{j'}(l', m_{j'}+1)`, and
//! acknowledgments from the last hop at `C_j gamma_j(l, m_j)`.
//!
//! The engine races one exponential clock for the total rate, then picks the
//! transition by a categorical draw, so simultaneous events never arise.
//! `ChaCha12` with one stream per replication keeps runs reproducible and
//! replications independent.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::ModelIndex;

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub seed: u64,
    pub warmup_time: f64,
    pub measure_time: f64,
    pub c: u64,
    pub replications: u32,
}

impl SimConfig {
    /// Default warmup is a tenth of the measurement window.
    pub fn new(seed: u64, c: u64, measure_time: f64) -> Self {
        SimConfig {
            seed,
            warmup_time: measure_time / 10.0,
            measure_time,
            c,
            replications: 1,
        }
    }

    pub fn with_replications(mut self, reps: u32) -> Self {
        self.replications = reps;
        self
    }

    pub fn with_warmup(mut self, warmup: f64) -> Self {
        self.warmup_time = warmup;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.measure_time > 0.0) {
            return Err(Error::NoSamples(format!(
                "measure_time must be > 0, got {}",
                self.measure_time
            )));
        }
        if self.replications < 1 {
            return Err(Error::NoSamples("replications must be >= 1".into()));
        }
        if self.c < 1 {
            return Err(Error::Domain("congestion level must be >= 1".into()));
        }
        if !(self.warmup_time >= 0.0) {
            return Err(Error::Domain("warmup_time must be >= 0".into()));
        }
        Ok(())
    }
}

/// A packet in a queue: its route and when it entered this queue.
#[derive(Debug, Clone, Copy)]
pub struct Packet {
    pub route: usize,
    pub entered_at: f64,
}

/// Explicit simulator state: ordered class sequences plus window counts.
#[derive(Debug, Clone)]
pub struct DetailedState {
    /// Index 0 is the head of the queue (position 1).
    pub queues: Vec<Vec<Packet>>,
    pub windows: Vec<u64>,
}

impl DetailedState {
    pub fn empty(idx: &ModelIndex) -> Self {
        DetailedState {
            queues: vec![Vec::new(); idx.n_queues()],
            windows: vec![0; idx.n_routes()],
        }
    }

    /// Count vector over the incidence pairs.
    pub fn counts(&self, idx: &ModelIndex) -> Vec<u32> {
        let mut m = vec![0u32; idx.n_pairs()];
        for (j, q) in self.queues.iter().enumerate() {
            for p in q {
                m[idx.pair_position(j, p.route).expect("packet on its route")] += 1;
            }
        }
        m
    }

    #[cfg(debug_assertions)]
    fn assert_consistent(&self, idx: &ModelIndex) {
        let mut counted = vec![0u64; idx.n_routes()];
        for q in &self.queues {
            for p in q {
                counted[p.route] += 1;
            }
        }
        debug_assert_eq!(
            counted, self.windows,
            "window counters must track in-network packets"
        );
    }
}

/// One hazard of a frozen state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hazard {
    /// Window `route` injects at `g^(c)(window)`.
    Inject { route: usize },
    /// Queue `queue` completes one service at total rate `C_j`.
    Service { queue: usize },
}

/// Active hazards of a frozen state; the desk-scale view of the transition
/// rates (positional factors `gamma`/`delta` multiply these on sampling).
pub fn transition_hazards(idx: &ModelIndex, c: u64, state: &DetailedState) -> Vec<(Hazard, f64)> {
    let mut out = Vec::new();
    for i in 0..idx.n_routes() {
        let g = idx.control(i).window_rate(c, state.windows[i]);
        if g > 0.0 {
            out.push((Hazard::Inject { route: i }, g));
        }
    }
    for (j, q) in state.queues.iter().enumerate() {
        if !q.is_empty() {
            out.push((Hazard::Service { queue: j }, idx.capacity(j)));
        }
    }
    out
}

/// Statistics of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepStats {
    /// Acknowledgments per unit time, per route.
    pub throughput: Vec<f64>,
    /// Mean per-visit sojourn per queue (NaN when nothing departed).
    pub mean_sojourn: Vec<f64>,
    /// Time-averaged counts per incidence pair.
    pub mean_counts: Vec<f64>,
    /// Time-averaged window size per route.
    pub mean_window: Vec<f64>,
    /// Throughput over the first and second half of the window, per route.
    pub half_throughput: (Vec<f64>, Vec<f64>),
    pub events: u64,
}

#[derive(Debug, Clone)]
pub struct SimStats {
    pub per_rep: Vec<RepStats>,
    pub throughput_mean: Vec<f64>,
    pub throughput_se: Vec<f64>,
    pub sojourn_mean: Vec<f64>,
    pub sojourn_se: Vec<f64>,
    pub counts_mean: Vec<f64>,
    pub counts_se: Vec<f64>,
    pub window_mean: Vec<f64>,
    /// True when the chain froze (every hazard zero) at some point.
    pub degenerate: bool,
    /// True when across-replication variance differs wildly between the two
    /// halves of the window; confidence intervals are then suspect.
    pub nonstationary_warning: bool,
}

pub type TraceSink<'a> = &'a mut dyn Write;

pub fn simulate(idx: &ModelIndex, config: &SimConfig) -> Result<SimStats> {
    simulate_with_trace(idx, config, None)
}

/// Like [`simulate`], optionally writing one tab-separated line per event:
/// `time  kind  route  queue  position`.
pub fn simulate_with_trace(
    idx: &ModelIndex,
    config: &SimConfig,
    mut trace: Option<TraceSink<'_>>,
) -> Result<SimStats> {
    config.validate()?;
    let mut per_rep = Vec::with_capacity(config.replications as usize);
    let mut degenerate = false;
    for rep in 0..config.replications {
        let (stats, froze) = run_replication(idx, config, rep, &mut trace)?;
        degenerate |= froze;
        per_rep.push(stats);
    }
    Ok(aggregate(idx, per_rep, degenerate))
}

fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = samples
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn aggregate(idx: &ModelIndex, per_rep: Vec<RepStats>, degenerate: bool) -> SimStats {
    let collect = |f: &dyn Fn(&RepStats) -> &[f64], dim: usize| -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(dim);
        let mut ses = Vec::with_capacity(dim);
        for d in 0..dim {
            let samples: Vec<f64> = per_rep.iter().map(|r| f(r)[d]).collect();
            let (m, s) = mean_se(&samples);
            means.push(m);
            ses.push(s);
        }
        (means, ses)
    };
    let (throughput_mean, throughput_se) = collect(&|r| &r.throughput, idx.n_routes());
    let (sojourn_mean, sojourn_se) = collect(&|r| &r.mean_sojourn, idx.n_queues());
    let (counts_mean, counts_se) = collect(&|r| &r.mean_counts, idx.n_pairs());
    let (window_mean, _) = collect(&|r| &r.mean_window, idx.n_routes());

    // Across-replication variance of each half of the window; a large ratio
    // suggests the warmup did not reach stationarity.
    let mut nonstationary = false;
    if per_rep.len() >= 2 {
        for i in 0..idx.n_routes() {
            let var_of = |pick: &dyn Fn(&RepStats) -> f64| {
                let xs: Vec<f64> = per_rep.iter().map(pick).collect();
                let (_, se) = mean_se(&xs);
                se * se
            };
            let v1 = var_of(&|r| r.half_throughput.0[i]);
            let v2 = var_of(&|r| r.half_throughput.1[i]);
            if v1 > 1e-30 && v2 > 1e-30 && v1.max(v2) / v1.min(v2) > 16.0 {
                nonstationary = true;
            }
        }
    }

    SimStats {
        per_rep,
        throughput_mean,
        throughput_se,
        sojourn_mean,
        sojourn_se,
        counts_mean,
        counts_se,
        window_mean,
        degenerate,
        nonstationary_warning: nonstationary,
    }
}

struct Accumulators {
    counts_time: Vec<f64>,
    window_time: Vec<f64>,
    acks: Vec<u64>,
    acks_first_half: Vec<u64>,
    sojourn_sum: Vec<f64>,
    sojourn_n: Vec<u64>,
}

fn run_replication(
    idx: &ModelIndex,
    config: &SimConfig,
    rep: u32,
    trace: &mut Option<TraceSink<'_>>,
) -> Result<(RepStats, bool)> {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64);
    let c = config.c;
    let horizon = config.warmup_time + config.measure_time;
    let half = config.warmup_time + 0.5 * config.measure_time;

    let mut state = DetailedState::empty(idx);
    let mut t = 0.0f64;
    let mut events = 0u64;
    let mut froze = false;
    let mut acc = Accumulators {
        counts_time: vec![0.0; idx.n_pairs()],
        window_time: vec![0.0; idx.n_routes()],
        acks: vec![0; idx.n_routes()],
        acks_first_half: vec![0; idx.n_routes()],
        sojourn_sum: vec![0.0; idx.n_queues()],
        sojourn_n: vec![0; idx.n_queues()],
    };

    // Incremental hazard bookkeeping: per-route injection rates plus the
    // total capacity of busy queues; only components touched by the last
    // event are recomputed.
    let mut inject: Vec<f64> = (0..idx.n_routes())
        .map(|i| idx.control(i).window_rate(c, 0))
        .collect();
    let mut busy_capacity = 0.0f64;

    while t < horizon {
        let total: f64 = inject.iter().sum::<f64>() + busy_capacity;
        if total <= 0.0 {
            froze = true;
            accumulate(idx, &state, &mut acc, t, horizon, config);
            break;
        }
        let dt = -(1.0 - rng.gen::<f64>()).ln() / total;
        accumulate(idx, &state, &mut acc, t, (t + dt).min(horizon), config);
        t += dt;
        if t >= horizon {
            break;
        }
        events += 1;

        let mut u = rng.gen::<f64>() * total;
        let mut fired: Option<Hazard> = None;
        for i in 0..idx.n_routes() {
            if u < inject[i] {
                fired = Some(Hazard::Inject { route: i });
                break;
            }
            u -= inject[i];
        }
        if fired.is_none() {
            for (j, q) in state.queues.iter().enumerate() {
                if q.is_empty() {
                    continue;
                }
                let cap = idx.capacity(j);
                if u < cap {
                    fired = Some(Hazard::Service { queue: j });
                    break;
                }
                u -= cap;
            }
        }
        let Some(hazard) = fired else {
            // Rounding edge of the categorical draw; skip the tick.
            continue;
        };

        match hazard {
            Hazard::Inject { route } => {
                let j = idx.first_queue(route);
                let was_empty = state.queues[j].is_empty();
                let m_new = state.queues[j].len() + 1;
                let pos = idx.model.queues[j]
                    .discipline
                    .sample_arrival_position(&mut rng, m_new);
                state.queues[j].insert(
                    pos - 1,
                    Packet {
                        route,
                        entered_at: t,
                    },
                );
                state.windows[route] += 1;
                inject[route] = idx.control(route).window_rate(c, state.windows[route]);
                if was_empty {
                    busy_capacity += idx.capacity(j);
                }
                if let Some(w) = trace.as_deref_mut() {
                    writeln!(
                        w,
                        "{t:.9}\tinject\t{}\t{}\t{pos}",
                        idx.model.routes[route].id, idx.model.queues[j].id
                    )?;
                }
            }
            Hazard::Service { queue } => {
                let m_j = state.queues[queue].len();
                let pos = idx.model.queues[queue]
                    .discipline
                    .sample_service_position(&mut rng, m_j);
                let packet = state.queues[queue].remove(pos - 1);
                if state.queues[queue].is_empty() {
                    busy_capacity -= idx.capacity(queue);
                }
                if t >= config.warmup_time {
                    acc.sojourn_sum[queue] += t - packet.entered_at;
                    acc.sojourn_n[queue] += 1;
                }
                match idx.next_queue(packet.route, queue) {
                    Some(j2) => {
                        let was_empty = state.queues[j2].is_empty();
                        let m_new = state.queues[j2].len() + 1;
                        let pos2 = idx.model.queues[j2]
                            .discipline
                            .sample_arrival_position(&mut rng, m_new);
                        state.queues[j2].insert(
                            pos2 - 1,
                            Packet {
                                route: packet.route,
                                entered_at: t,
                            },
                        );
                        if was_empty {
                            busy_capacity += idx.capacity(j2);
                        }
                        if let Some(w) = trace.as_deref_mut() {
                            writeln!(
                                w,
                                "{t:.9}\ttransfer\t{}\t{}\t{pos}",
                                idx.model.routes[packet.route].id, idx.model.queues[queue].id
                            )?;
                        }
                    }
                    None => {
                        state.windows[packet.route] -= 1;
                        inject[packet.route] = idx
                            .control(packet.route)
                            .window_rate(c, state.windows[packet.route]);
                        if t >= config.warmup_time {
                            acc.acks[packet.route] += 1;
                            if t < half {
                                acc.acks_first_half[packet.route] += 1;
                            }
                        }
                        if let Some(w) = trace.as_deref_mut() {
                            writeln!(
                                w,
                                "{t:.9}\tack\t{}\t{}\t{pos}",
                                idx.model.routes[packet.route].id, idx.model.queues[queue].id
                            )?;
                        }
                    }
                }
            }
        }

        #[cfg(debug_assertions)]
        state.assert_consistent(idx);
    }

    let mt = config.measure_time;
    let stats = RepStats {
        throughput: acc.acks.iter().map(|&a| a as f64 / mt).collect(),
        mean_sojourn: acc
            .sojourn_sum
            .iter()
            .zip(&acc.sojourn_n)
            .map(|(&s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect(),
        mean_counts: acc.counts_time.iter().map(|&x| x / mt).collect(),
        mean_window: acc.window_time.iter().map(|&x| x / mt).collect(),
        half_throughput: (
            acc.acks_first_half
                .iter()
                .map(|&a| a as f64 / (0.5 * mt))
                .collect(),
            acc.acks
                .iter()
                .zip(&acc.acks_first_half)
                .map(|(&a, &h)| (a - h) as f64 / (0.5 * mt))
                .collect(),
        ),
        events,
    };
    Ok((stats, froze))
}

/// Add the state's time-weighted contribution over `[from, to)`, clipped to
/// the measurement window.
fn accumulate(
    idx: &ModelIndex,
    state: &DetailedState,
    acc: &mut Accumulators,
    from: f64,
    to: f64,
    config: &SimConfig,
) {
    let lo = from.max(config.warmup_time);
    let hi = to.min(config.warmup_time + config.measure_time);
    if hi <= lo {
        return;
    }
    let dt = hi - lo;
    for (j, q) in state.queues.iter().enumerate() {
        for p in q {
            acc.counts_time[idx.pair_position(j, p.route).expect("packet on route")] += dt;
        }
    }
    for (i, &w) in state.windows.iter().enumerate() {
        acc.window_time[i] += dt * w as f64;
    }
}

/// Time-weighted empirical law of the count vector.
#[derive(Debug, Clone)]
pub struct OccupancyHistogram {
    pub weights: HashMap<Vec<u32>, f64>,
    pub total_time: f64,
}

impl OccupancyHistogram {
    pub fn probability(&self, m: &[u32]) -> f64 {
        self.weights.get(m).copied().unwrap_or(0.0) / self.total_time
    }

    pub fn tv_distance(&self, other: &OccupancyHistogram) -> f64 {
        let mut tv = 0.0;
        for (k, &w) in &self.weights {
            tv += (w / self.total_time - other.probability(k)).abs();
        }
        for (k, &w) in &other.weights {
            if !self.weights.contains_key(k) {
                tv += w / other.total_time;
            }
        }
        0.5 * tv
    }

    pub fn tv_vs_table(&self, table: &crate::exact::StationaryTable) -> f64 {
        let mut tv = 0.0;
        let mut seen = 0.0;
        for (m, p) in table.iter() {
            let q = self.probability(m);
            tv += (p - q).abs();
            seen += q;
        }
        // Empirical mass on states outside the table.
        tv += (1.0 - seen).max(0.0);
        0.5 * tv
    }
}

/// Simulate and histogram the count vector, pooling all replications.
pub fn occupancy_histogram(idx: &ModelIndex, config: &SimConfig) -> Result<OccupancyHistogram> {
    config.validate()?;
    let mut weights: HashMap<Vec<u32>, f64> = HashMap::new();
    let mut total = 0.0;
    for rep in 0..config.replications {
        run_histogram_replication(idx, config, rep, &mut weights)?;
        total += config.measure_time;
    }
    Ok(OccupancyHistogram {
        weights,
        total_time: total,
    })
}

fn run_histogram_replication(
    idx: &ModelIndex,
    config: &SimConfig,
    rep: u32,
    weights: &mut HashMap<Vec<u32>, f64>,
) -> Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64);
    let c = config.c;
    let horizon = config.warmup_time + config.measure_time;
    let mut state = DetailedState::empty(idx);
    let mut counts = state.counts(idx);
    let mut t = 0.0f64;
    let mut inject: Vec<f64> = (0..idx.n_routes())
        .map(|i| idx.control(i).window_rate(c, 0))
        .collect();
    let mut busy_capacity = 0.0f64;

    loop {
        let total_rate: f64 = inject.iter().sum::<f64>() + busy_capacity;
        let next = if total_rate <= 0.0 {
            horizon
        } else {
            t - (1.0 - rng.gen::<f64>()).ln() / total_rate
        };
        let clip = next.min(horizon);
        let lo = t.max(config.warmup_time);
        if clip > lo {
            *weights.entry(counts.clone()).or_insert(0.0) += clip - lo;
        }
        t = next;
        if t >= horizon || total_rate <= 0.0 {
            return Ok(());
        }

        let mut u = rng.gen::<f64>() * total_rate;
        let mut done = false;
        for i in 0..idx.n_routes() {
            if u < inject[i] {
                let j = idx.first_queue(i);
                let m_new = state.queues[j].len() + 1;
                let pos = idx.model.queues[j]
                    .discipline
                    .sample_arrival_position(&mut rng, m_new);
                if state.queues[j].is_empty() {
                    busy_capacity += idx.capacity(j);
                }
                state.queues[j].insert(
                    pos - 1,
                    Packet {
                        route: i,
                        entered_at: t,
                    },
                );
                state.windows[i] += 1;
                inject[i] = idx.control(i).window_rate(c, state.windows[i]);
                counts[idx.pair_position(j, i).unwrap()] += 1;
                done = true;
                break;
            }
            u -= inject[i];
        }
        if done {
            continue;
        }
        for j in 0..idx.n_queues() {
            if state.queues[j].is_empty() {
                continue;
            }
            let cap = idx.capacity(j);
            if u >= cap {
                u -= cap;
                continue;
            }
            let m_j = state.queues[j].len();
            let pos = idx.model.queues[j]
                .discipline
                .sample_service_position(&mut rng, m_j);
            let packet = state.queues[j].remove(pos - 1);
            if state.queues[j].is_empty() {
                busy_capacity -= idx.capacity(j);
            }
            counts[idx.pair_position(j, packet.route).unwrap()] -= 1;
            match idx.next_queue(packet.route, j) {
                Some(j2) => {
                    let m_new = state.queues[j2].len() + 1;
                    let pos2 = idx.model.queues[j2]
                        .discipline
                        .sample_arrival_position(&mut rng, m_new);
                    if state.queues[j2].is_empty() {
                        busy_capacity += idx.capacity(j2);
                    }
                    state.queues[j2].insert(
                        pos2 - 1,
                        Packet {
                            route: packet.route,
                            entered_at: t,
                        },
                    );
                    counts[idx.pair_position(j2, packet.route).unwrap()] += 1;
                }
                None => {
                    state.windows[packet.route] -= 1;
                    inject[packet.route] = idx
                        .control(packet.route)
                        .window_rate(c, state.windows[packet.route]);
                }
            }
            break;
        }
    }
}

/// One flagged Little's-law residual.
#[derive(Debug, Clone)]
pub struct LittleViolation {
    pub queue: String,
    pub route: String,
    pub residual: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LittleReport {
    pub violations: Vec<LittleViolation>,
}

/// Check `Lambda_i q_j = m_ji` per (queue, route) pair; flags pairs whose
/// across-replication mean residual exceeds `tol_sigma` standard errors.
pub fn little_check(idx: &ModelIndex, stats: &SimStats, tol_sigma: f64) -> Result<LittleReport> {
    if stats.per_rep.len() < 2 {
        return Err(Error::NoSamples(
            "little_check needs at least 2 replications".into(),
        ));
    }
    let mut report = LittleReport::default();
    for (k, &(j, i)) in idx.pairs.iter().enumerate() {
        let residuals: Vec<f64> = stats
            .per_rep
            .iter()
            .map(|r| r.throughput[i] * r.mean_sojourn[j] - r.mean_counts[k])
            .collect();
        if residuals.iter().any(|r| r.is_nan()) {
            return Err(Error::NoSamples(format!(
                "no departures observed at queue `{}`",
                idx.model.queues[j].id
            )));
        }
        let (mean, se) = mean_se(&residuals);
        let z = if se > 0.0 { mean.abs() / se } else { 0.0 };
        if mean.abs() > tol_sigma * se.max(1e-12) {
            report.violations.push(LittleViolation {
                queue: idx.model.queues[j].id.clone(),
                route: idx.model.routes[i].id.clone(),
                residual: mean,
                se,
                z,
            });
        }
    }
    Ok(report)
}
