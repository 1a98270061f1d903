//! Network topology, service disciplines, and congestion-window controls.

mod discipline;
mod utility;

use std::collections::{HashMap, HashSet};
use std::fmt;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub use discipline::Discipline;
pub use utility::{default_concavity_grid, lambda_grid, Utility, DEFAULT_CONCAVITY_TOL};

/// A single-server queue with a fixed service capacity (packets/time).
#[derive(Debug, Clone)]
pub struct QueueSpec {
    pub id: String,
    pub capacity: f64,
    pub discipline: Discipline,
}

/// Per-route congestion control: a utility, the log acknowledgment rate used
/// only in isolated-window analysis, and an optional finite-support cap.
///
/// With `window_cap = Some(w)`, the injection rate is zero once the window
/// holds `w * c` packets, which makes the per-route state space at congestion
/// level `c` finite.
#[derive(Debug, Clone)]
pub struct CongestionControl {
    pub utility: Utility,
    pub ack_rate_log: f64,
    pub window_cap: Option<u64>,
}

impl CongestionControl {
    pub fn new(utility: Utility) -> Self {
        CongestionControl {
            utility,
            ack_rate_log: 0.0,
            window_cap: None,
        }
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.window_cap = Some(cap);
        self
    }

    /// Largest admissible window at congestion level `c`, if capped.
    pub fn cap_total(&self, c: u64) -> Option<u64> {
        self.window_cap.map(|w| w * c)
    }

    /// Injection rate `g^(c)(m) = exp(G^(c)(m+1) - G^(c)(m))`.
    ///
    /// The fair family uses the factorial form `e^{G^(c)(k)} =
    /// (c w)^{k/(a-1)} / (k!)^{1/(a-1)}`, so the rate is
    /// `(c w / (m+1))^{1/(a-1)}`; tabulated utilities use
    /// `exp(c [G((m+1)/c) - G(m/c)])`.
    pub fn window_rate(&self, c: u64, m: u64) -> f64 {
        assert!(c >= 1, "congestion level must be >= 1");
        if let Some(cap) = self.cap_total(c) {
            if m >= cap {
                return 0.0;
            }
        }
        match &self.utility {
            Utility::AlphaFair { alpha, weight } => {
                (c as f64 * weight / (m as f64 + 1.0)).powf(1.0 / (alpha - 1.0))
            }
            u @ Utility::Tabulated(_) => {
                let c = c as f64;
                let g1 = u.g_value((m as f64 + 1.0) / c).unwrap_or(f64::NEG_INFINITY);
                let g0 = u.g_value(m as f64 / c).unwrap_or(f64::NEG_INFINITY);
                (c * (g1 - g0)).exp()
            }
        }
    }

    /// `G^(c)(k)` in log space; `-inf` beyond the window cap.
    pub fn log_gc(&self, c: u64, k: u64) -> f64 {
        assert!(c >= 1, "congestion level must be >= 1");
        if let Some(cap) = self.cap_total(c) {
            if k > cap {
                return f64::NEG_INFINITY;
            }
        }
        match &self.utility {
            Utility::AlphaFair { alpha, weight } => {
                let k = k as f64;
                (k * (c as f64 * weight).ln() - ln_gamma(k + 1.0)) / (alpha - 1.0)
            }
            u @ Utility::Tabulated(_) => {
                let c = c as f64;
                c * u.g_value(k as f64 / c).unwrap_or(f64::NEG_INFINITY)
            }
        }
    }
}

/// An ordered path through the network plus its controller.
#[derive(Debug, Clone)]
pub struct RouteSpec {
    pub id: String,
    pub path: Vec<String>,
    pub control: CongestionControl,
}

/// Static topology: queues, ordered routes, and the derived incidence set of
/// (queue, route) pairs.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub queues: Vec<QueueSpec>,
    pub routes: Vec<RouteSpec>,
}

impl NetworkModel {
    pub fn new(queues: Vec<QueueSpec>, routes: Vec<RouteSpec>) -> Self {
        NetworkModel { queues, routes }
    }

    pub fn queue_index(&self, id: &str) -> Option<usize> {
        self.queues.iter().position(|q| q.id == id)
    }

    pub fn route_index(&self, id: &str) -> Option<usize> {
        self.routes.iter().position(|r| r.id == id)
    }

    /// Clone with every route capped at `cap` (windows at most `cap * c`).
    pub fn with_window_caps(&self, cap: u64) -> Self {
        let mut m = self.clone();
        for r in &mut m.routes {
            r.control.window_cap = Some(cap);
        }
        m
    }

    /// Clone with every queue switched to `discipline`.
    pub fn with_discipline(&self, discipline: Discipline) -> Self {
        let mut m = self.clone();
        for q in &mut m.queues {
            q.discipline = discipline.clone();
        }
        m
    }
}

/// A single invariant violation; validation output, not a fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl Violation {
    pub fn new(subject: String, message: String) -> Self {
        Violation { subject, message }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Occupancy up to which discipline tables are checked exactly.
const DISCIPLINE_CHECK_MAX: usize = 50;

/// Collect every invariant violation; an empty report means the model is
/// usable by all other modules.
pub fn validate_network(model: &NetworkModel) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen = HashSet::new();
    for q in &model.queues {
        if !seen.insert(q.id.as_str()) {
            out.push(Violation::new(
                format!("queue `{}`", q.id),
                "duplicate queue id".into(),
            ));
        }
        if !(q.capacity > 0.0) || !q.capacity.is_finite() {
            out.push(Violation::new(
                format!("queue `{}`", q.id),
                format!("capacity must be positive and finite, got {}", q.capacity),
            ));
        }
        out.extend(
            q.discipline
                .validate(&format!("queue `{}`", q.id), DISCIPLINE_CHECK_MAX),
        );
    }

    let mut seen = HashSet::new();
    for r in &model.routes {
        let subject = format!("route `{}`", r.id);
        if !seen.insert(r.id.as_str()) {
            out.push(Violation::new(subject.clone(), "duplicate route id".into()));
        }
        if r.path.is_empty() {
            out.push(Violation::new(subject.clone(), "path is empty".into()));
        }
        let mut hops = HashSet::new();
        for hop in &r.path {
            if model.queue_index(hop).is_none() {
                out.push(Violation::new(
                    subject.clone(),
                    format!("path references unknown queue `{hop}`"),
                ));
            }
            if !hops.insert(hop.as_str()) {
                out.push(Violation::new(
                    subject.clone(),
                    format!("path visits queue `{hop}` more than once"),
                ));
            }
        }
        match &r.control.utility {
            Utility::AlphaFair { alpha, weight } => {
                if !(*alpha > 1.0) {
                    out.push(Violation::new(
                        subject.clone(),
                        format!("alpha must be > 1, got {alpha}"),
                    ));
                }
                if !(*weight > 0.0) {
                    out.push(Violation::new(
                        subject.clone(),
                        format!("weight must be > 0, got {weight}"),
                    ));
                }
            }
            Utility::Tabulated(_) => {}
        }
        if !r.control.utility.is_exponentially_concave() {
            out.push(Violation::new(
                subject,
                "utility failed the exponential-concavity check".into(),
            ));
        }
    }
    out
}

/// Validated model with the incidence set and per-queue/per-route lookup
/// tables resolved. All analysis modules start from one of these.
#[derive(Debug, Clone)]
pub struct ModelIndex {
    pub model: NetworkModel,
    /// (queue index, route index) pairs, queue-major; the canonical coordinate
    /// order for count vectors and exports.
    pub pairs: Vec<(usize, usize)>,
    pair_pos: HashMap<(usize, usize), usize>,
    /// Per queue: positions into `pairs` of the classes it serves.
    pub queue_pairs: Vec<Vec<usize>>,
    /// Per route: positions into `pairs` along the path, in traversal order.
    pub route_pairs: Vec<Vec<usize>>,
    /// Per route: queue indices in traversal order.
    pub route_paths: Vec<Vec<usize>>,
}

impl ModelIndex {
    /// Validates and compiles; fails with the full violation report.
    pub fn new(model: &NetworkModel) -> Result<ModelIndex> {
        let violations = validate_network(model);
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
        let route_paths: Vec<Vec<usize>> = model
            .routes
            .iter()
            .map(|r| {
                r.path
                    .iter()
                    .map(|hop| model.queue_index(hop).expect("validated"))
                    .collect()
            })
            .collect();

        let mut pairs = Vec::new();
        for j in 0..model.queues.len() {
            for (i, path) in route_paths.iter().enumerate() {
                if path.contains(&j) {
                    pairs.push((j, i));
                }
            }
        }
        let pair_pos: HashMap<(usize, usize), usize> =
            pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        let queue_pairs = (0..model.queues.len())
            .map(|j| {
                pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, &(jj, _))| jj == j)
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect();
        let route_pairs = route_paths
            .iter()
            .enumerate()
            .map(|(i, path)| path.iter().map(|&j| pair_pos[&(j, i)]).collect())
            .collect();

        Ok(ModelIndex {
            model: model.clone(),
            pairs,
            pair_pos,
            queue_pairs,
            route_pairs,
            route_paths,
        })
    }

    pub fn n_queues(&self) -> usize {
        self.model.queues.len()
    }

    pub fn n_routes(&self) -> usize {
        self.model.routes.len()
    }

    /// Size of the incidence set.
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_position(&self, queue: usize, route: usize) -> Option<usize> {
        self.pair_pos.get(&(queue, route)).copied()
    }

    pub fn capacity(&self, j: usize) -> f64 {
        self.model.queues[j].capacity
    }

    pub fn control(&self, i: usize) -> &CongestionControl {
        &self.model.routes[i].control
    }

    /// First queue on route `i`.
    pub fn first_queue(&self, i: usize) -> usize {
        self.route_paths[i][0]
    }

    /// Queue following `j` on route `i`, or `None` from the last hop.
    pub fn next_queue(&self, i: usize, j: usize) -> Option<usize> {
        let path = &self.route_paths[i];
        let pos = path.iter().position(|&jj| jj == j).expect("queue on route");
        path.get(pos + 1).copied()
    }

    pub fn is_last_queue(&self, i: usize, j: usize) -> bool {
        *self.route_paths[i].last().expect("non-empty path") == j
    }

    /// Per-queue totals `m_j` of a count vector.
    pub fn queue_totals(&self, m: &[u32]) -> Vec<u64> {
        let mut out = vec![0u64; self.n_queues()];
        for (k, &(j, _)) in self.pairs.iter().enumerate() {
            out[j] += m[k] as u64;
        }
        out
    }

    /// Per-route window totals `m_bar_i` of a count vector.
    pub fn window_totals(&self, m: &[u32]) -> Vec<u64> {
        let mut out = vec![0u64; self.n_routes()];
        for (k, &(_, i)) in self.pairs.iter().enumerate() {
            out[i] += m[k] as u64;
        }
        out
    }
}
