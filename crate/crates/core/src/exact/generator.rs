//! Direct generator construction and stationary solve.
//!
//! Valid only for processor sharing, where the class-level count vector is
//! itself Markov; other disciplines are checked by simulation instead. With
//! every window capped the space is finite, the chain is irreducible, and
//! `pi Q = 0` can be solved without reference to the product form — an
//! independent oracle for the stationary table.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Discipline, ModelIndex};

/// Sparse rate matrix over enumerated count vectors.
#[derive(Debug, Clone)]
pub struct Generator {
    pub k: usize,
    states: Vec<u32>,
    pub index: HashMap<Vec<u32>, usize>,
    /// Off-diagonal transitions per state.
    out: Vec<Vec<(usize, f64)>>,
    /// Diagonal entries (negative total out-rate).
    pub diag: Vec<f64>,
}

impl Generator {
    pub fn n_states(&self) -> usize {
        self.diag.len()
    }

    pub fn state(&self, i: usize) -> &[u32] {
        &self.states[i * self.k..(i + 1) * self.k]
    }

    pub fn transitions(&self, i: usize) -> &[(usize, f64)] {
        &self.out[i]
    }

    /// `||pi Q||_inf` for a probability vector.
    pub fn residual(&self, pi: &[f64]) -> f64 {
        let n = self.n_states();
        let mut r = vec![0.0; n];
        for s in 0..n {
            r[s] += pi[s] * self.diag[s];
        }
        for s in 0..n {
            for &(t, rate) in &self.out[s] {
                r[t] += pi[s] * rate;
            }
        }
        r.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Build the class-level generator at congestion level `c`.
///
/// Requires processor sharing everywhere and a window cap on every route with
/// the capped space no larger than `n_max` total packets.
pub fn aggregated_generator(idx: &ModelIndex, c: u64, n_max: u64) -> Result<Generator> {
    for q in &idx.model.queues {
        if q.discipline != Discipline::ProcessorSharing {
            return Err(Error::UnsupportedOracle(format!(
                "queue `{}` is not processor sharing; the count process is only \
                 Markov under processor sharing",
                q.id
            )));
        }
    }
    let mut cap_sum: u64 = 0;
    for i in 0..idx.n_routes() {
        match idx.control(i).cap_total(c) {
            Some(cap) => cap_sum += cap,
            None => {
                return Err(Error::UnsupportedOracle(format!(
                    "route `{}` has no window cap; the exact oracle needs a finite space",
                    idx.model.routes[i].id
                )))
            }
        }
    }
    if cap_sum > n_max {
        return Err(Error::UnsupportedOracle(format!(
            "capped space holds up to {cap_sum} packets, above the budget {n_max}"
        )));
    }

    // Enumerate all admissible states (every window within its cap).
    let k = idx.n_pairs();
    let caps: Vec<Option<u64>> = (0..idx.n_routes())
        .map(|i| idx.control(i).cap_total(c))
        .collect();
    let mut states: Vec<u32> = Vec::new();
    for n in 0..=cap_sum as u32 {
        super::for_each_in_shell(idx, &caps, n, &mut |m| {
            states.extend_from_slice(m);
        });
    }
    let n_states = states.len() / k;
    let index: HashMap<Vec<u32>, usize> = states
        .chunks(k)
        .enumerate()
        .map(|(i, s)| (s.to_vec(), i))
        .collect();

    let mut out = vec![Vec::new(); n_states];
    let mut diag = vec![0.0; n_states];
    let mut scratch = vec![0u32; k];
    for s in 0..n_states {
        let m = &states[s * k..(s + 1) * k];
        let window_tot = idx.window_totals(m);
        let queue_tot = idx.queue_totals(m);
        let push = |scratch: &[u32], rate: f64, out: &mut Vec<(usize, f64)>| {
            let t = *index.get(scratch).expect("target state enumerated");
            out.push((t, rate));
        };
        // Injections.
        for i in 0..idx.n_routes() {
            let rate = idx.control(i).window_rate(c, window_tot[i]);
            if rate > 0.0 {
                let pair = idx.pair_position(idx.first_queue(i), i).unwrap();
                scratch.copy_from_slice(m);
                scratch[pair] += 1;
                push(&scratch, rate, &mut out[s]);
            }
        }
        // Service completions: class share of capacity under processor sharing.
        for (pair, &(j, i)) in idx.pairs.iter().enumerate() {
            if m[pair] == 0 {
                continue;
            }
            let rate = idx.capacity(j) * m[pair] as f64 / queue_tot[j] as f64;
            scratch.copy_from_slice(m);
            scratch[pair] -= 1;
            if let Some(j2) = idx.next_queue(i, j) {
                let pair2 = idx.pair_position(j2, i).unwrap();
                scratch[pair2] += 1;
            }
            push(&scratch, rate, &mut out[s]);
        }
        diag[s] = -out[s].iter().map(|&(_, r)| r).sum::<f64>();
    }

    Ok(Generator {
        k,
        states,
        index,
        out,
        diag,
    })
}

/// States from which larger solves switch from dense LU to Gauss-Seidel.
const DENSE_SOLVE_LIMIT: usize = 400;
const SOLVE_RESIDUAL: f64 = 1e-10;

/// Solve `pi Q = 0`, `sum pi = 1`.
///
/// Dense LU below [`DENSE_SOLVE_LIMIT`] states, Gauss-Seidel sweeps above;
/// either way the result satisfies `||pi Q||_inf <= 1e-10`.
pub fn generator_solve(gen: &Generator) -> Result<Vec<f64>> {
    let n = gen.n_states();
    if n == 0 {
        return Err(Error::DegenerateModel("generator has no states".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    check_irreducible(gen)?;

    let pi = if n <= DENSE_SOLVE_LIMIT {
        dense_solve(gen)?
    } else {
        gauss_seidel(gen)?
    };
    let res = gen.residual(&pi);
    if res > SOLVE_RESIDUAL {
        return Err(Error::Numerical(format!(
            "stationary solve stalled at residual {res:.3e} (target {SOLVE_RESIDUAL:.0e})"
        )));
    }
    Ok(pi)
}

fn check_irreducible(gen: &Generator) -> Result<()> {
    let n = gen.n_states();
    let mut fwd = vec![false; n];
    let mut stack = vec![0usize];
    fwd[0] = true;
    while let Some(s) = stack.pop() {
        for &(t, _) in &gen.out[s] {
            if !fwd[t] {
                fwd[t] = true;
                stack.push(t);
            }
        }
    }
    let mut incoming = vec![Vec::new(); n];
    for s in 0..n {
        for &(t, rate) in &gen.out[s] {
            incoming[t].push((s, rate));
        }
    }
    let mut bwd = vec![false; n];
    let mut stack = vec![0usize];
    bwd[0] = true;
    while let Some(s) = stack.pop() {
        for &(t, _) in &incoming[s] {
            if !bwd[t] {
                bwd[t] = true;
                stack.push(t);
            }
        }
    }
    if fwd.iter().all(|&x| x) && bwd.iter().all(|&x| x) {
        Ok(())
    } else {
        let dead = fwd.iter().zip(&bwd).position(|(&a, &b)| !(a && b)).unwrap();
        Err(Error::ReducibleChain(format!(
            "state {:?} is not strongly connected to the empty state",
            gen.state(dead)
        )))
    }
}

fn dense_solve(gen: &Generator) -> Result<Vec<f64>> {
    let n = gen.n_states();
    // Rows are balance equations (Q^T), with the last replaced by sum = 1.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        a[(s, s)] = gen.diag[s];
        for &(t, rate) in &gen.out[s] {
            a[(t, s)] += rate;
        }
    }
    for col in 0..n {
        a[(n - 1, col)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular balance system".into()))?;
    Ok(x.iter().cloned().collect())
}

fn gauss_seidel(gen: &Generator) -> Result<Vec<f64>> {
    let n = gen.n_states();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for s in 0..n {
        for &(t, rate) in &gen.out[s] {
            incoming[t].push((s, rate));
        }
    }
    let mut pi = vec![1.0 / n as f64; n];
    let mut best = f64::INFINITY;
    let mut stagnant = 0usize;
    for sweep in 0..200_000usize {
        for s in 0..n {
            let inflow: f64 = incoming[s].iter().map(|&(t, r)| pi[t] * r).sum();
            let d = -gen.diag[s];
            if d > 0.0 {
                pi[s] = inflow / d;
            }
        }
        let total: f64 = pi.iter().sum();
        for p in &mut pi {
            *p /= total;
        }
        if sweep % 8 == 7 {
            let res = gen.residual(&pi);
            if res <= 0.02 * SOLVE_RESIDUAL {
                break;
            }
            if res < best * 0.999 {
                best = res;
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant > 50 {
                    break;
                }
            }
        }
    }
    Ok(pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{stationary_distribution, ExactOptions};
    use crate::model::{CongestionControl, NetworkModel, QueueSpec, RouteSpec, Utility};
    use approx::assert_abs_diff_eq;

    fn capped_single(cap: u64) -> ModelIndex {
        ModelIndex::new(&NetworkModel::new(
            vec![QueueSpec {
                id: "q0".into(),
                capacity: 1.0,
                discipline: Discipline::ProcessorSharing,
            }],
            vec![RouteSpec {
                id: "r0".into(),
                path: vec!["q0".into()],
                control: CongestionControl::new(Utility::alpha_fair(2.0, 1.0).unwrap())
                    .with_cap(cap),
            }],
        ))
        .unwrap()
    }

    #[test]
    fn rates_match_closed_forms() {
        let idx = capped_single(10);
        let gen = aggregated_generator(&idx, 1, 100).unwrap();
        // State m = 3: departure at C m/m = 1, injection at c/(m+1) = 1/4.
        let s3 = gen.index[&vec![3u32]];
        let trans = gen.transitions(s3);
        assert_eq!(trans.len(), 2);
        for &(t, rate) in trans {
            match gen.state(t)[0] {
                2 => assert_abs_diff_eq!(rate, 1.0, epsilon = 1e-12),
                4 => assert_abs_diff_eq!(rate, 0.25, epsilon = 1e-12),
                other => panic!("unexpected target {other}"),
            }
        }
        // Empty state: only the injection, at rate c/1 = 1.
        let s0 = gen.index[&vec![0u32]];
        let trans = gen.transitions(s0);
        assert_eq!(trans.len(), 1);
        assert_abs_diff_eq!(trans[0].1, 1.0, epsilon = 1e-12);
        // Rows sum to zero against the diagonal.
        for s in 0..gen.n_states() {
            let sum: f64 = gen.transitions(s).iter().map(|&(_, r)| r).sum();
            assert_abs_diff_eq!(sum + gen.diag[s], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tandem_transfer_rates() {
        let model = NetworkModel::new(
            vec![
                QueueSpec {
                    id: "a".into(),
                    capacity: 1.0,
                    discipline: Discipline::ProcessorSharing,
                },
                QueueSpec {
                    id: "b".into(),
                    capacity: 1.0,
                    discipline: Discipline::ProcessorSharing,
                },
            ],
            vec![RouteSpec {
                id: "r0".into(),
                path: vec!["a".into(), "b".into()],
                control: CongestionControl::new(Utility::alpha_fair(2.0, 1.0).unwrap()).with_cap(8),
            }],
        );
        let idx = ModelIndex::new(&model).unwrap();
        let gen = aggregated_generator(&idx, 1, 100).unwrap();
        // State (2, 1): transfer a -> b at 1.0, acknowledgment at 1.0.
        let s = gen.index[&vec![2u32, 1u32]];
        let mut seen_transfer = false;
        let mut seen_ack = false;
        for &(t, rate) in gen.transitions(s) {
            match gen.state(t) {
                [1, 2] => {
                    assert_abs_diff_eq!(rate, 1.0, epsilon = 1e-12);
                    seen_transfer = true;
                }
                [2, 0] => {
                    assert_abs_diff_eq!(rate, 1.0, epsilon = 1e-12);
                    seen_ack = true;
                }
                _ => {}
            }
        }
        assert!(seen_transfer && seen_ack);
    }

    #[test]
    fn non_ps_discipline_is_rejected() {
        let mut model = capped_single(4).model.clone();
        model.queues[0].discipline = Discipline::Fifo;
        let idx = ModelIndex::new(&model).unwrap();
        assert!(matches!(
            aggregated_generator(&idx, 1, 100),
            Err(Error::UnsupportedOracle(_))
        ));
    }

    #[test]
    fn uncapped_route_is_rejected() {
        let model = NetworkModel::new(
            vec![QueueSpec {
                id: "q0".into(),
                capacity: 1.0,
                discipline: Discipline::ProcessorSharing,
            }],
            vec![RouteSpec {
                id: "r0".into(),
                path: vec!["q0".into()],
                control: CongestionControl::new(Utility::alpha_fair(2.0, 1.0).unwrap()),
            }],
        );
        let idx = ModelIndex::new(&model).unwrap();
        assert!(matches!(
            aggregated_generator(&idx, 1, 100),
            Err(Error::UnsupportedOracle(_))
        ));
    }

    #[test]
    fn birth_death_solve_matches_truncated_poisson() {
        // Cap 5 at c = 1: birth rate c/(m+1), death 1 -> truncated Poisson(1).
        let idx = capped_single(5);
        let gen = aggregated_generator(&idx, 1, 100).unwrap();
        let pi = generator_solve(&gen).unwrap();
        let weights: Vec<f64> = (0..=5u64)
            .map(|m| 1.0 / statrs::function::gamma::ln_gamma(m as f64 + 1.0).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        for (m, w) in weights.iter().enumerate() {
            let s = gen.index[&vec![m as u32]];
            assert_abs_diff_eq!(pi[s], w / z, epsilon = 1e-11);
        }
        assert!(gen.residual(&pi) <= 1e-10);
    }

    #[test]
    fn disconnected_routes_factorize() {
        let model = NetworkModel::new(
            vec![
                QueueSpec {
                    id: "a".into(),
                    capacity: 1.0,
                    discipline: Discipline::ProcessorSharing,
                },
                QueueSpec {
                    id: "b".into(),
                    capacity: 2.0,
                    discipline: Discipline::ProcessorSharing,
                },
            ],
            vec![
                RouteSpec {
                    id: "r0".into(),
                    path: vec!["a".into()],
                    control: CongestionControl::new(Utility::alpha_fair(2.0, 1.0).unwrap())
                        .with_cap(4),
                },
                RouteSpec {
                    id: "r1".into(),
                    path: vec!["b".into()],
                    control: CongestionControl::new(Utility::alpha_fair(3.0, 2.0).unwrap())
                        .with_cap(3),
                },
            ],
        );
        let idx = ModelIndex::new(&model).unwrap();
        let gen = aggregated_generator(&idx, 2, 100).unwrap();
        let pi = generator_solve(&gen).unwrap();

        // Individual solves of each isolated component.
        let solo = |which: usize| -> Vec<f64> {
            let m = NetworkModel::new(
                vec![model.queues[which].clone()],
                vec![RouteSpec {
                    path: vec![model.queues[which].id.clone()],
                    ..model.routes[which].clone()
                }],
            );
            let sidx = ModelIndex::new(&m).unwrap();
            let g = aggregated_generator(&sidx, 2, 100).unwrap();
            let p = generator_solve(&g).unwrap();
            (0..p.len()).map(|v| p[g.index[&vec![v as u32]]]).collect()
        };
        let pa = solo(0);
        let pb = solo(1);
        for (ma, &qa) in pa.iter().enumerate() {
            for (mb, &qb) in pb.iter().enumerate() {
                let s = gen.index[&vec![ma as u32, mb as u32]];
                assert_abs_diff_eq!(pi[s], qa * qb, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn product_form_agrees_with_generator_solve() {
        let idx = capped_single(6);
        let table = stationary_distribution(&idx, 2, &ExactOptions::default()).unwrap();
        let gen = aggregated_generator(&idx, 2, 100).unwrap();
        let pi = generator_solve(&gen).unwrap();
        let mut tv = 0.0;
        for (m, p) in table.iter() {
            let s = gen.index[m];
            tv += (p - pi[s]).abs();
        }
        assert!(tv * 0.5 <= 1e-8, "total variation {tv}");
    }
}
