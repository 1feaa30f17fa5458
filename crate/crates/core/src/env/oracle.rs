//! Exhaustive breadth-first search over joint states of deterministic scenarios.
//!
//! Used as an independent solvability oracle: it only relies on `step`, never
//! on any learned component.

use std::collections::{HashSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EnvInstance, EnvState, Scenario, N_ACTIONS};

fn joint_actions(n_agents: usize) -> Vec<Vec<usize>> {
    let total = N_ACTIONS.pow(n_agents as u32);
    (0..total)
        .map(|mut k| {
            (0..n_agents)
                .map(|_| {
                    let a = k % N_ACTIONS;
                    k /= N_ACTIONS;
                    a
                })
                .collect()
        })
        .collect()
}

/// Shortest open-loop joint plan from `start` whose accumulated reward reaches
/// `target`. Returns `None` when no plan within the horizon exists or the
/// scenario has stochastic dynamics.
pub fn shortest_plan(env: &EnvInstance, start: &EnvState, target: f64) -> Option<Vec<Vec<usize>>> {
    if env.spec().scenario == Scenario::GridPp {
        return None;
    }
    // dynamics of the remaining scenarios never touch the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let actions = joint_actions(env.n_agents());
    let req = env.spec().params.required_adjacency;
    let key = |s: &EnvState, ret: f64| {
        let alive: Vec<bool> = s.entities.iter().map(|e| e.alive).collect();
        (s.agent_cells.clone(), alive, s.adjacency_count.min(req), s.step, (ret * 1000.0).round() as i64)
    };
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(key(start, 0.0));
    queue.push_back((start.clone(), 0.0, Vec::new()));
    while let Some((state, ret, plan)) = queue.pop_front() {
        if state.done {
            continue;
        }
        for a in &actions {
            let mut next = state.clone();
            let r = env.step(&mut next, a, &mut rng).ok()?;
            let total = ret + r.reward;
            let mut p: Vec<Vec<usize>> = plan.clone();
            p.push(a.clone());
            if total >= target - 1e-12 {
                return Some(p);
            }
            if seen.insert(key(&next, total)) {
                queue.push_back((next, total, p));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvSpec};

    #[test]
    fn lbf1_is_solvable_from_every_spawn() {
        let env = make_env(EnvSpec::preset("lbf1").unwrap()).unwrap();
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s0, _) = env.reset(&mut rng);
            let plan = shortest_plan(&env, &s0, 1.0).expect("plan exists");
            assert!(plan.len() <= env.horizon());
            // replay
            let mut s = s0.clone();
            let mut ret = 0.0;
            for a in &plan {
                ret += env.step(&mut s, a, &mut rng).unwrap().reward;
            }
            assert_eq!(ret, 1.0);
        }
    }

    #[test]
    fn unreachable_target_returns_none() {
        let mut spec = EnvSpec::preset("lbf1").unwrap();
        spec.horizon = 3;
        let env = make_env(spec).unwrap();
        let (s0, _) = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(shortest_plan(&env, &s0, 1.0).is_none());
    }
}
