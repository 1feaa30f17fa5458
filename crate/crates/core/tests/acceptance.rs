//! One line per acceptance criterion; exits non-zero when any fails.

mod common;
mod toy;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use macop::analysis::{continual_metrics, crossplay_of_groups, evaluate_overall, EvalSet};
use macop::approximator::ParamStore;
use macop::config::{Algo, BaselineKind, MacopConfig};
use macop::ego::{continual_train, expansion_decision, EgoConfig, EgoPolicy, EgoVariant, HeadMeta};
use macop::orchestrator::{build_arena, replay_sequence, train, RunArtifacts, RunState};
use macop::teammate::select_survivors;
use macop::theory::{verify_theory, TheoryConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c1_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = (0..100).map(|_| common::fd_max_rel_error(&mut rng)).fold(0.0, f64::max);
    check(worst < 1e-4, format!("max relative error {worst:.2e} over 100 nets"))
}

fn c2_sandwich() -> Outcome {
    let rep = verify_theory(&TheoryConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
    check(
        rep.similar_pairs == 1000 && rep.sandwich_violations.is_empty(),
        format!("{} pairs, {} violations", rep.similar_pairs, rep.sandwich_violations.len()),
    )
}

fn c3_jsd_tv() -> Outcome {
    let cfg = TheoryConfig {
        similar_pairs: 0,
        ..TheoryConfig::default()
    };
    let rep = verify_theory(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    check(
        rep.jsd_tv_samples == 10_000 && rep.jsd_tv_violations.is_empty(),
        format!("{} pairs, {} violations", rep.jsd_tv_samples, rep.jsd_tv_violations.len()),
    )
}

fn c4_toy() -> Outcome {
    let err = toy::train_and_measure(20_000, 0);
    check(err < 1e-2, format!("max |Q - Q*| = {err:.2e}"))
}

/// Per-seed products shared by criteria 5 to 8.
struct SeedRuns {
    macop: RunArtifacts,
    grand_macop: f64,
    grand_finetune: f64,
    xp_macop: f64,
    xp_trajedi: f64,
    bwt_macop: f64,
    bwt_finetune: f64,
}

fn run_seed(seed: u64) -> SeedRuns {
    let cfg = MacopConfig {
        seed,
        ..MacopConfig::desk()
    };
    let arena = build_arena(&cfg).unwrap();
    let macop = train(Algo::Macop, &cfg).unwrap();
    let finetune = train(Algo::Baseline(BaselineKind::Finetune), &cfg).unwrap();
    let trajedi = train(Algo::Baseline(BaselineKind::Trajedi), &cfg).unwrap();

    let mut set = EvalSet::default();
    for a in [&macop, &finetune, &trajedi] {
        set.extend_run(&a.info.algo, seed, &a.info.run_id, a.archive.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = cfg.test_episodes;
    let grand_macop = evaluate_overall(&macop.ego, &set, n, macop.head_choice, &arena, &mut rng).unwrap().grand_mean;
    let grand_finetune = evaluate_overall(&finetune.ego, &set, n, finetune.head_choice, &arena, &mut rng)
        .unwrap()
        .grand_mean;

    let ratio = |a: &RunArtifacts| {
        let groups: Vec<(String, _)> = a.archive.iter().map(|g| (g.id.to_string(), g)).collect();
        crossplay_of_groups(&groups, n, 2000 + seed, &arena).unwrap().off_diagonal_ratio()
    };
    let (xp_macop, xp_trajedi) = (ratio(&macop), ratio(&trajedi));

    let (bwt_macop, _) = continual_metrics(macop.alpha.as_ref().unwrap()).unwrap();
    let sequence: Vec<_> = macop.sequence_groups().into_iter().cloned().collect();
    let (_, alpha) =
        replay_sequence(&sequence, EgoVariant::Finetune, &cfg, finetune.head_choice, &arena, &mut rng).unwrap();
    let (bwt_finetune, _) = continual_metrics(&alpha).unwrap();
    SeedRuns {
        macop,
        grand_macop,
        grand_finetune,
        xp_macop,
        xp_trajedi,
        bwt_macop,
        bwt_finetune,
    }
}

fn c5_overall(runs: &[SeedRuns]) -> Outcome {
    let m = median(runs.iter().map(|r| r.grand_macop).collect());
    let f = median(runs.iter().map(|r| r.grand_finetune).collect());
    check(
        m >= 1.10 * f,
        format!(
            "median grand mean macop {m:.3} vs finetune {f:.3} (x{:.3}); macop {} finetune {}",
            m / f,
            fmt(&runs.iter().map(|r| r.grand_macop).collect::<Vec<_>>()),
            fmt(&runs.iter().map(|r| r.grand_finetune).collect::<Vec<_>>())
        ),
    )
}

fn c6_incompatibility(runs: &[SeedRuns]) -> Outcome {
    let m = median(runs.iter().map(|r| r.xp_macop).collect());
    let t = median(runs.iter().map(|r| r.xp_trajedi).collect());
    check(
        m <= 0.7 && t >= m + 0.1,
        format!(
            "median off-diagonal/diagonal macop {m:.3} (<= 0.7), trajedi {t:.3} (>= {:.3}); macop {} trajedi {}",
            m + 0.1,
            fmt(&runs.iter().map(|r| r.xp_macop).collect::<Vec<_>>()),
            fmt(&runs.iter().map(|r| r.xp_trajedi).collect::<Vec<_>>())
        ),
    )
}

fn c7_bwt(runs: &[SeedRuns]) -> Outcome {
    let m = median(runs.iter().map(|r| r.bwt_macop).collect());
    let f = median(runs.iter().map(|r| r.bwt_finetune).collect());
    check(
        m > f,
        format!(
            "median BWT macop {m:.3} vs finetune {f:.3}; macop {} finetune {}",
            fmt(&runs.iter().map(|r| r.bwt_macop).collect::<Vec<_>>()),
            fmt(&runs.iter().map(|r| r.bwt_finetune).collect::<Vec<_>>())
        ),
    )
}

fn c8_heads(runs: &[SeedRuns]) -> Outcome {
    let n_p = MacopConfig::desk().n_p;
    let heads: Vec<usize> = runs.iter().map(|r| r.macop.ego.head_count()).collect();
    // population members over all iterations, as a generated-group count
    let groups: Vec<usize> = runs
        .iter()
        .map(|r| r.macop.log.iter().map(|it| it.members.len()).sum())
        .collect();
    let unique: Vec<usize> = runs.iter().map(|r| r.macop.archive.len()).collect();
    check(
        heads.iter().all(|&h| h >= 2) && groups.iter().all(|&g| g >= 3 * n_p),
        format!("heads {heads:?}, groups {groups:?} (>= {}), unique trained {unique:?}", 3 * n_p),
    )
}

fn rigged_termination() -> Result<(), String> {
    let cfg = MacopConfig {
        n_min: 1,
        xi: 0.0,
        pretrain_steps: 8000,
        ..common::tiny_config(2)
    };
    let arena = build_arena(&cfg).unwrap();
    let mut state = RunState::new(Algo::Macop, cfg).unwrap();
    let twin = state.population.members[0].clone();
    for m in state.population.members.iter_mut().skip(1) {
        m.tm = twin.tm.clone();
        m.comp_ego = twin.comp_ego.clone();
    }
    state.ego.backbone = twin.comp_ego.backbone.clone();
    state.ego.heads = vec![twin.comp_ego.head.clone()];
    state.ego.snapshots = vec![twin.comp_ego.backbone.clone()];
    state.ego.head_meta = vec![HeadMeta {
        group_id: Some(twin.id),
        r_new: None,
        r_best_existing: None,
    }];
    let hashes = state.ego.param_hashes();
    let more = state.step(&arena).unwrap();
    let rec = &state.log[0];
    let ok = !more && rec.terminated && rec.continual.is_empty() && state.sequence.is_empty();
    if ok && state.ego.param_hashes() == hashes {
        Ok(())
    } else {
        Err("rigged population did not stop before ego training".into())
    }
}

fn head_freeze() -> Result<(), String> {
    let arena = common::small_arena();
    let cfg = EgoConfig {
        expansion_episodes: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ego = EgoPolicy::new(arena.net_spec(), &mut rng).unwrap();
    let mut frozen: Vec<String> = Vec::new();
    for k in 0..4 {
        let tm = arena.new_qnet(&mut rng).unwrap();
        continual_train(&mut ego, tm.view(), k, 80, &cfg, &arena, &mut rng).unwrap();
        let old: Vec<String> = ego.heads.iter().chain(&ego.snapshots).map(ParamStore::hash_hex).collect();
        let n = frozen.len() / 2;
        let prior: Vec<String> = ego.heads[..n].iter().chain(&ego.snapshots[..n]).map(ParamStore::hash_hex).collect();
        if prior != frozen {
            return Err(format!("frozen head changed after group {k}"));
        }
        frozen = old;
    }
    Ok(())
}

fn c9_mechanisms() -> Outcome {
    let ids: Vec<u64> = (0..8).collect();
    let sp = [0.9, 0.1, 0.8, 0.5, 0.7, 0.2, 0.6, 0.4];
    let xp = [0.9, 0.0, 0.8, 0.1, 0.2, 0.0, 0.3, 0.4];
    let selection = select_survivors(&ids, &sp, &xp, 4).map_err(|e| e.to_string())? == vec![3, 4, 6, 7];
    let table = [
        (0.5, vec![0.6], 0.0, false),
        (0.66, vec![0.6], 0.05, true),
        (0.1, vec![], 0.0, true),
        (0.6, vec![0.6], 0.0, true),
        (0.59, vec![0.2, 0.6], 0.0, false),
    ];
    let expansion = table.iter().all(|(r, e, l, want)| expansion_decision(*r, e, *l) == *want);
    let rigged = rigged_termination();
    let freeze = head_freeze();
    check(
        selection && expansion && rigged.is_ok() && freeze.is_ok(),
        format!(
            "selection {selection}, expansion {expansion}, rigged stop {}, head freeze {}",
            rigged.map(|_| "true".to_string()).unwrap_or_else(|e| e),
            freeze.map(|_| "true".to_string()).unwrap_or_else(|e| e)
        ),
    )
}

fn c10_determinism() -> Outcome {
    let cfg = MacopConfig {
        pretrain_steps: 2000,
        ..common::tiny_config(10)
    };
    let a = train(Algo::Macop, &cfg).unwrap();
    let b = train(Algo::Macop, &cfg).unwrap();
    let strip = |a: &RunArtifacts| {
        let mut log = a.log.clone();
        log.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        macop::orchestrator::log_csv(&log).unwrap()
    };
    let same_log = strip(&a) == strip(&b);
    let group_hashes = |a: &RunArtifacts| -> Vec<String> {
        a.archive
            .iter()
            .flat_map(|g| [&g.tm.backbone, &g.tm.head, &g.comp_ego.backbone, &g.comp_ego.head])
            .map(ParamStore::hash_hex)
            .collect()
    };
    let same_hashes = a.ego.param_hashes() == b.ego.param_hashes() && group_hashes(&a) == group_hashes(&b);
    check(
        same_log && same_hashes,
        format!("log identical {same_log}, checkpoint hashes identical {same_hashes}"),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &out {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id:>2} {tag} {name} ({secs:.1}s): {detail}");
    out.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "gradient correctness", c1_gradients);
    ok &= run(2, "similarity sandwich bound", c2_sandwich);
    ok &= run(3, "jsd below total variation", c3_jsd_tv);
    ok &= run(4, "toy value decomposition convergence", c4_toy);
    let start = Instant::now();
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
        handles.into_iter().map(|h| h.join()).collect::<Result<Vec<_>, _>>()
    });
    println!("desk runs for seeds {SEEDS:?} took {:.0}s", start.elapsed().as_secs_f64());
    match runs {
        Ok(runs) => {
            ok &= run(5, "evaluation-set return over finetune", || c5_overall(&runs));
            ok &= run(6, "population incompatibility", || c6_incompatibility(&runs));
            ok &= run(7, "backward transfer over finetune", || c7_bwt(&runs));
            ok &= run(8, "multi-modality handling", || c8_heads(&runs));
        }
        Err(_) => {
            for (id, name) in [(5, "evaluation-set return"), (6, "incompatibility"), (7, "backward transfer"), (8, "heads")] {
                println!("criterion {id:>2} FAIL {name}: desk run panicked");
            }
            ok = false;
        }
    }
    ok &= run(9, "mechanism checks", c9_mechanisms);
    ok &= run(10, "determinism", c10_determinism);
    if !ok {
        std::process::exit(1);
    }
}
