//! Queue service disciplines as position-level share/placement tables.
//!
//! A discipline is a pair of distributions: `gamma(l, m)` gives the fraction
//! of the queue's capacity devoted to position `l` when `m` packets are
//! present, and `delta(l, m)` the probability an arrival that brings the
//! occupancy to `m` lands at position `l`. Positions are 1-based.

use rand::Rng;

use crate::model::Violation;

#[derive(Debug, Clone, PartialEq)]
pub enum Discipline {
    /// `gamma(l,m) = 1/m`, `delta(l,m) = 1/m`.
    ProcessorSharing,
    /// Head of line served, arrivals join the back.
    Fifo,
    /// Back of line served (newest packet preempts), arrivals join the back.
    LifoPreemptive,
    /// Explicit tables; row `m-1` has `m` entries for occupancy `m`.
    /// Occupancies beyond the tables fall back to uniform sharing.
    Custom {
        gamma: Vec<Vec<f64>>,
        delta: Vec<Vec<f64>>,
    },
}

impl Discipline {
    /// Service share of position `l` (1-based) among `m >= 1` packets.
    pub fn gamma(&self, l: usize, m: usize) -> f64 {
        debug_assert!(m >= 1 && 1 <= l && l <= m);
        match self {
            Discipline::ProcessorSharing => 1.0 / m as f64,
            Discipline::Fifo => {
                if l == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            Discipline::LifoPreemptive => {
                if l == m {
                    1.0
                } else {
                    0.0
                }
            }
            Discipline::Custom { gamma, .. } => table_entry(gamma, l, m),
        }
    }

    /// Placement probability of position `l` when an arrival brings the
    /// occupancy to `m >= 1`.
    pub fn delta(&self, l: usize, m: usize) -> f64 {
        debug_assert!(m >= 1 && 1 <= l && l <= m);
        match self {
            Discipline::ProcessorSharing => 1.0 / m as f64,
            Discipline::Fifo | Discipline::LifoPreemptive => {
                if l == m {
                    1.0
                } else {
                    0.0
                }
            }
            Discipline::Custom { delta, .. } => table_entry(delta, l, m),
        }
    }

    /// Draw the position whose packet completes service, given occupancy `m`.
    pub fn sample_service_position(&self, rng: &mut impl Rng, m: usize) -> usize {
        match self {
            Discipline::ProcessorSharing => rng.gen_range(1..=m),
            Discipline::Fifo => 1,
            Discipline::LifoPreemptive => m,
            Discipline::Custom { gamma, .. } => sample_table_row(rng, gamma, m),
        }
    }

    /// Draw the landing position of an arrival that brings occupancy to `m`.
    pub fn sample_arrival_position(&self, rng: &mut impl Rng, m: usize) -> usize {
        match self {
            Discipline::ProcessorSharing => rng.gen_range(1..=m),
            Discipline::Fifo | Discipline::LifoPreemptive => m,
            Discipline::Custom { delta, .. } => sample_table_row(rng, delta, m),
        }
    }

    /// Check row stochasticity for every occupancy up to `max_m`; reports are
    /// attributed to `subject` (typically the queue id).
    pub fn validate(&self, subject: &str, max_m: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        for m in 1..=max_m {
            let rows: [(&str, Vec<f64>); 2] = [
                ("gamma", (1..=m).map(|l| self.gamma(l, m)).collect()),
                ("delta", (1..=m).map(|l| self.delta(l, m)).collect()),
            ];
            for (name, row) in rows {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) {
                    out.push(Violation::new(
                        format!("{subject} {name} m={m}"),
                        "negative entry".to_string(),
                    ));
                } else if (sum - 1.0).abs() > 1e-9 {
                    out.push(Violation::new(
                        format!("{subject} {name} m={m}"),
                        format!("entries sum to {sum}, expected 1"),
                    ));
                }
            }
        }
        out
    }
}

fn table_entry(table: &[Vec<f64>], l: usize, m: usize) -> f64 {
    match table.get(m - 1) {
        Some(row) if row.len() == m => row[l - 1],
        _ => 1.0 / m as f64,
    }
}

fn sample_table_row(rng: &mut impl Rng, table: &[Vec<f64>], m: usize) -> usize {
    match table.get(m - 1) {
        Some(row) if row.len() == m => {
            let u: f64 = rng.gen::<f64>();
            let mut acc = 0.0;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k + 1;
                }
            }
            m
        }
        _ => rng.gen_range(1..=m),
    }
}
