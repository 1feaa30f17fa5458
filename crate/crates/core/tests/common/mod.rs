#![allow(dead_code)]

use macop::approximator::{backward, forward, Activation, NetSpec, ParamStore};
use rand::Rng;

pub fn random_spec<R: Rng>(rng: &mut R) -> NetSpec {
    let depth = rng.gen_range(1..=3);
    let head_depth = rng.gen_range(0..=2);
    NetSpec {
        input_dim: rng.gen_range(1..=6),
        hidden_dims: (0..depth).map(|_| rng.gen_range(1..=8)).collect(),
        head_hidden_dims: (0..head_depth).map(|_| rng.gen_range(1..=6)).collect(),
        output_dim: rng.gen_range(1..=5),
        activation: Activation::Tanh,
    }
}

/// Largest relative error between the analytic gradient of
/// `upstream . forward(x)` and central differences, over every parameter.
pub fn fd_max_rel_error<R: Rng>(rng: &mut R) -> f64 {
    let spec = random_spec(rng);
    let mut b = spec.backbone_layout().init(rng);
    let mut h = spec.head_layout().init(rng);
    let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..spec.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (gb, gh) = backward(&spec, &b, &h, &x, &up).unwrap();
    let f = |b: &ParamStore, h: &ParamStore| -> f64 {
        forward(&spec, b, h, &x).unwrap().iter().zip(&up).map(|(q, u)| q * u).sum()
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..b.len() {
        let v = b.as_slice()[i];
        b.as_mut_slice()[i] = v + eps;
        let fp = f(&b, &h);
        b.as_mut_slice()[i] = v - eps;
        let fm = f(&b, &h);
        b.as_mut_slice()[i] = v;
        worst = worst.max(rel(gb.as_slice()[i], (fp - fm) / (2.0 * eps)));
    }
    for i in 0..h.len() {
        let v = h.as_slice()[i];
        h.as_mut_slice()[i] = v + eps;
        let fp = f(&b, &h);
        h.as_mut_slice()[i] = v - eps;
        let fm = f(&b, &h);
        h.as_mut_slice()[i] = v;
        worst = worst.max(rel(gh.as_slice()[i], (fp - fm) / (2.0 * eps)));
    }
    worst
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// lbf4 with a small learner, for tests that roll out real episodes.
pub fn small_arena() -> macop::marl::Arena {
    use macop::env::{make_env, EnvSpec};
    let learner = macop::marl::LearnerConfig {
        hidden_dims: vec![16],
        head_hidden_dims: vec![8],
        batch_episodes: 4,
        ..Default::default()
    };
    macop::marl::Arena::new(make_env(EnvSpec::preset("lbf4").unwrap()).unwrap(), learner).unwrap()
}

/// A run small enough for integration tests: every loop stage executes.
pub fn tiny_config(seed: u64) -> macop::config::MacopConfig {
    macop::config::MacopConfig {
        seed,
        n_p: 2,
        n_min: 2,
        n_max: 3,
        t_tm: 300,
        t_ego: 200,
        pretrain_steps: 300,
        eval_episodes: 4,
        test_episodes: 4,
        meta_episodes_per_head: 1,
        expansion_episodes: 4,
        ewc_fisher_episodes: 4,
        fcp_population: 3,
        baseline_tm_steps: 300,
        baseline_ego_steps: 300,
        learner: macop::marl::LearnerConfig {
            hidden_dims: vec![16],
            head_hidden_dims: vec![8],
            batch_episodes: 4,
            ..macop::config::MacopConfig::desk().learner
        },
        ..macop::config::MacopConfig::desk()
    }
}
