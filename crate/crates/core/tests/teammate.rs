mod common;

use macop::marl::{ActionMode, Episode};
use macop::teammate::{dissimilarity, jsd_diversity, select_survivors, TeammateGroup};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax(q: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = q.iter().map(|v| (v / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Entropy of the mixture minus mean member entropy, averaged over rows.
fn jsd_direct(qs: &[Array2<f64>], t: f64) -> f64 {
    let (rows, actions) = qs[0].dim();
    let n = qs.len() as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let ps: Vec<Vec<f64>> = qs.iter().map(|q| softmax(&q.row(r).to_vec(), t)).collect();
        let mix: Vec<f64> = (0..actions).map(|a| ps.iter().map(|p| p[a]).sum::<f64>() / n).collect();
        total += entropy(&mix) - ps.iter().map(|p| entropy(p)).sum::<f64>() / n;
    }
    total / rows as f64
}

fn random_qs(rng: &mut ChaCha8Rng) -> (Vec<Array2<f64>>, f64) {
    let n = rng.gen_range(2..5);
    let rows = rng.gen_range(1..6);
    let actions = rng.gen_range(2..6);
    let qs = (0..n)
        .map(|_| Array2::from_shape_fn((rows, actions), |_| rng.gen_range(-3.0..3.0)))
        .collect();
    (qs, rng.gen_range(0.3..2.0))
}

#[test]
fn jsd_matches_entropy_form_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (mut qs, t) = random_qs(&mut rng);
        let views: Vec<_> = qs.iter().map(|q| q.view()).collect();
        let (v, grads) = jsd_diversity(&views, t).unwrap();
        assert!((v - jsd_direct(&qs, t)).abs() < 1e-12);
        let eps = 1e-6;
        for i in 0..qs.len() {
            let (rows, actions) = qs[i].dim();
            for r in 0..rows {
                for a in 0..actions {
                    let x = qs[i][[r, a]];
                    qs[i][[r, a]] = x + eps;
                    let fp = jsd_direct(&qs, t);
                    qs[i][[r, a]] = x - eps;
                    let fm = jsd_direct(&qs, t);
                    qs[i][[r, a]] = x;
                    let fd = (fp - fm) / (2.0 * eps);
                    assert!(common::rel(grads[i][[r, a]], fd) < 1e-5 || (grads[i][[r, a]] - fd).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn jsd_is_bounded_by_ln_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (qs, t) = random_qs(&mut rng);
        let views: Vec<_> = qs.iter().map(|q| q.view()).collect();
        let (v, _) = jsd_diversity(&views, t).unwrap();
        assert!(v >= -1e-15 && v <= (qs.len() as f64).ln() + 1e-12);
    }
}

fn log_softmax(q: &[f64], t: f64) -> Vec<f64> {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = q.iter().map(|v| ((v - m) / t).exp()).sum::<f64>().ln();
    q.iter().map(|v| (v - m) / t - lse).collect()
}

#[test]
fn dissimilarity_matches_log_space_product() {
    let arena = common::small_arena();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let slots = arena.teammate_slots();
    for trial in 0..5 {
        let g = TeammateGroup::new(2 * trial, &arena, &mut rng).unwrap();
        let h = TeammateGroup::new(2 * trial + 1, &arena, &mut rng).unwrap();
        let eps = ActionMode::EpsGreedy(0.3);
        let eps_list: Vec<Episode> = (0..6)
            .map(|_| arena.rollout(&arena.pair(g.comp_actor(eps), h.tm_actor(eps)), &mut rng).unwrap())
            .collect();
        let refs: Vec<&Episode> = eps_list.iter().collect();
        let t = arena.learner.temperature;
        let got = dissimilarity(g.tm.view(), h.tm.view(), &refs, &slots, t).unwrap();
        let mut want: f64 = 0.0;
        for ep in &refs {
            let mut s = 0.0;
            for tr in ep.transitions() {
                for &k in &slots {
                    let a = tr.joint_action()[k];
                    s += log_softmax(&g.tm.view().q_values(tr.obs(k)).unwrap(), t)[a]
                        - log_softmax(&h.tm.view().q_values(tr.obs(k)).unwrap(), t)[a];
                }
            }
            want = want.max((1.0 - s.exp()).abs());
        }
        assert!(common::rel(got, want) < 1e-9, "{got} vs {want}");
    }
}

fn pool() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..7).prop_flat_map(|n_p| {
        let m = 2 * n_p;
        (
            Just(n_p),
            Just((0..m).map(|i| i as f64 / m as f64).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::vec(-1.0f64..1.0, m),
        )
    })
}

proptest! {
    #[test]
    fn selection_keeps_n_p_by_the_two_stage_rule((n_p, sp, xp) in pool()) {
        let ids: Vec<u64> = (0..2 * n_p as u64).collect();
        let keep = select_survivors(&ids, &sp, &xp, n_p).unwrap();
        prop_assert_eq!(keep.len(), n_p);
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let mut by_sp: Vec<usize> = (0..2 * n_p).collect();
        by_sp.sort_by(|&a, &b| sp[a].total_cmp(&sp[b]));
        let stage_one = &by_sp[n_p / 2..];
        for k in &by_sp[..n_p / 2] {
            prop_assert!(!keep.contains(k));
        }
        let worst_kept = keep.iter().map(|&k| xp[k]).fold(f64::NEG_INFINITY, f64::max);
        for k in stage_one.iter().filter(|k| !keep.contains(k)) {
            prop_assert!(xp[*k] >= worst_kept);
        }
    }

    #[test]
    fn selection_ignores_pool_order((n_p, sp, xp) in pool(), seed in any::<u64>()) {
        let m = 2 * n_p;
        let ids: Vec<u64> = (0..m as u64).collect();
        let keep: Vec<u64> = select_survivors(&ids, &sp, &xp, n_p).unwrap().into_iter().map(|k| ids[k]).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..m).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pids: Vec<u64> = perm.iter().map(|&k| ids[k]).collect();
        let psp: Vec<f64> = perm.iter().map(|&k| sp[k]).collect();
        let pxp: Vec<f64> = perm.iter().map(|&k| xp[k]).collect();
        let mut pkeep: Vec<u64> = select_survivors(&pids, &psp, &pxp, n_p).unwrap().into_iter().map(|k| pids[k]).collect();
        pkeep.sort_unstable();
        prop_assert_eq!(pkeep, keep);
    }
}
