//! Two-state, two-agent MDP with additive rewards; agent 0 picks the next
//! state. Its optimal joint Q-function is representable by a VDN sum.

use macop::approximator::{Activation, NetSpec};
use macop::marl::{joint_q_values, vdn_td_update, Episode, QNet, TdConfig, TdMember};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GAMMA: f64 = 0.9;
const R0: [[f64; 2]; 2] = [[0.0, 0.5], [1.0, 0.2]];
const R1: [[f64; 2]; 2] = [[0.3, -0.1], [0.0, 0.4]];

fn onehot(s: usize) -> Vec<f64> {
    let mut v = vec![0.0; 2];
    v[s] = 1.0;
    v
}

/// Exact optimal joint values `q[s][a0][a1]` by value iteration.
pub fn value_iteration() -> [[[f64; 2]; 2]; 2] {
    let mut v = [0.0f64; 2];
    let mut q = [[[0.0; 2]; 2]; 2];
    for _ in 0..2000 {
        for s in 0..2 {
            for a0 in 0..2 {
                for a1 in 0..2 {
                    q[s][a0][a1] = R0[s][a0] + R1[s][a1] + GAMMA * v[a0];
                }
            }
        }
        for s in 0..2 {
            v[s] = q[s].iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    q
}

/// One single-transition episode for every `(s, a0, a1)`; never terminal.
pub fn dataset() -> Vec<Episode> {
    let mut out = Vec::new();
    for s in 0..2 {
        for a0 in 0..2 {
            for a1 in 0..2 {
                out.push(
                    Episode::from_parts(
                        vec![vec![onehot(s), onehot(s)], vec![onehot(a0), onehot(a0)]],
                        vec![vec![a0, a1]],
                        vec![R0[s][a0] + R1[s][a1]],
                        vec![false],
                        0,
                    )
                    .unwrap(),
                );
            }
        }
    }
    out
}

/// Full-batch VDN training for `updates` steps; returns the largest
/// deviation of the learned joint values from value iteration.
pub fn train_and_measure(updates: usize, seed: u64) -> f64 {
    let spec = NetSpec {
        input_dim: 2,
        hidden_dims: vec![16],
        head_hidden_dims: vec![],
        output_dim: 2,
        activation: Activation::Tanh,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = QNet::new(spec.clone(), 3e-3, &mut rng).unwrap();
    let mut b = QNet::new(spec, 3e-3, &mut rng).unwrap();
    let data = dataset();
    let batch: Vec<&Episode> = data.iter().collect();
    let cfg = TdConfig {
        gamma: GAMMA,
        reward_sign: 1.0,
        target_update_interval: 100,
        grad_clip: Some(10.0),
    };
    let slots = [vec![0], vec![1]];
    for _ in 0..updates {
        vdn_td_update(&mut [&mut a, &mut b], &slots, &batch, &cfg).unwrap();
    }
    let q = value_iteration();
    let joint = joint_q_values(&[TdMember { net: &a, slots: &slots[0] }, TdMember { net: &b, slots: &slots[1] }], &batch)
        .unwrap();
    let mut worst: f64 = 0.0;
    let mut i = 0;
    for s in 0..2 {
        for a0 in 0..2 {
            for a1 in 0..2 {
                worst = worst.max((joint[i] - q[s][a0][a1]).abs());
                i += 1;
            }
        }
    }
    worst
}
