//! Exact checks of the similarity/compatibility results on a small tabular
//! game whose trajectories can be enumerated.
//!
//! Two agents (one ego, one teammate), two states, two actions each, horizon
//! two, strictly positive transitions and per-step rewards in `(0, 1/2]`, so
//! every return lies in `(0, 1]`. Policies are tabular over `(t, s)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

const S: usize = 2;
const A: usize = 2;
const T: usize = 2;

/// `policy[t][s][a]`.
pub type TabularPolicy = [[[f64; A]; S]; T];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularGame {
    pub initial: [f64; S],
    /// `transition[s][a_ego][a_tm][s']`.
    pub transition: [[[[f64; S]; A]; A]; S],
    /// `reward[s][a_ego][a_tm]`.
    pub reward: [[[f64; A]; A]; S],
}

fn random_simplex<R: Rng + ?Sized, const N: usize>(rng: &mut R, floor: f64) -> [f64; N] {
    let mut v = [0.0; N];
    for x in v.iter_mut() {
        *x = floor + rng.gen::<f64>();
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

impl TabularGame {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut g = TabularGame {
            initial: random_simplex(rng, 0.05),
            transition: [[[[0.0; S]; A]; A]; S],
            reward: [[[0.0; A]; A]; S],
        };
        for s in 0..S {
            for ae in 0..A {
                for at in 0..A {
                    g.transition[s][ae][at] = random_simplex(rng, 0.05);
                    g.reward[s][ae][at] = 0.5 * (1.0 - rng.gen::<f64>());
                }
            }
        }
        g
    }

    /// Every trajectory `(s0, ae0, at0, s1, ae1, at1)` with its probability
    /// and return under the joint policy.
    fn trajectories(&self, ego: &TabularPolicy, tm: &TabularPolicy) -> Vec<([usize; 6], f64, f64)> {
        let mut out = Vec::with_capacity(64);
        for s0 in 0..S {
            for ae0 in 0..A {
                for at0 in 0..A {
                    for s1 in 0..S {
                        for ae1 in 0..A {
                            for at1 in 0..A {
                                let p = self.initial[s0]
                                    * ego[0][s0][ae0]
                                    * tm[0][s0][at0]
                                    * self.transition[s0][ae0][at0][s1]
                                    * ego[1][s1][ae1]
                                    * tm[1][s1][at1];
                                let g = self.reward[s0][ae0][at0] + self.reward[s1][ae1][at1];
                                out.push(([s0, ae0, at0, s1, ae1, at1], p, g));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Expected return by full enumeration.
    pub fn expected_return(&self, ego: &TabularPolicy, tm: &TabularPolicy) -> f64 {
        self.trajectories(ego, tm).iter().map(|(_, p, g)| p * g).sum()
    }
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R) -> TabularPolicy {
    let mut p = [[[0.0; A]; S]; T];
    for row in p.iter_mut().flatten() {
        *row = random_simplex(rng, 0.02);
    }
    p
}

/// Multiplicative perturbation of every action probability, renormalised.
pub fn perturb<R: Rng + ?Sized>(p: &TabularPolicy, scale: f64, rng: &mut R) -> TabularPolicy {
    let mut q = *p;
    for row in q.iter_mut().flatten() {
        for x in row.iter_mut() {
            *x *= (scale * (2.0 * rng.gen::<f64>() - 1.0)).exp();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    q
}

/// `max_tau |1 - prod_t pi_i(a_t|s_t) / pi_j(a_t|s_t)|` over all teammate
/// state-action sequences (all have positive probability in this game).
pub fn tabular_dissimilarity(pi_i: &TabularPolicy, pi_j: &TabularPolicy) -> f64 {
    let mut d: f64 = 0.0;
    for s0 in 0..S {
        for a0 in 0..A {
            for s1 in 0..S {
                for a1 in 0..A {
                    let r = pi_i[0][s0][a0] / pi_j[0][s0][a0] * pi_i[1][s1][a1] / pi_j[1][s1][a1];
                    d = d.max((1.0 - r).abs());
                }
            }
        }
    }
    d
}

/// `1/2 sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Two-distribution Jensen-Shannon divergence in nats.
pub fn jsd_pair(p: &[f64], q: &[f64]) -> f64 {
    let kl = |x: &[f64], m: &[f64]| -> f64 {
        x.iter()
            .zip(m)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a / b).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * (kl(p, &m) + kl(q, &m))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub similar_pairs: usize,
    pub sandwich_violations: Vec<String>,
    pub corollary_checked: usize,
    pub corollary_violations: Vec<String>,
    pub jsd_tv_samples: usize,
    pub jsd_tv_violations: Vec<String>,
    pub tv_premise_met: usize,
    pub tv_premise_violations: Vec<String>,
}

impl TheoryReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, checked: usize, v: &[String]| {
            let verdict = if v.is_empty() { "ok" } else { "VIOLATED" };
            s.push_str(&format!("[{name}] checked={checked} violations={} verdict={verdict}\n", v.len()));
            for line in v {
                s.push_str(&format!("  {line}\n"));
            }
        };
        section("sandwich-bound", self.similar_pairs, &self.sandwich_violations);
        section("incompatible-implies-dissimilar", self.corollary_checked, &self.corollary_violations);
        section("jsd-le-tv", self.jsd_tv_samples, &self.jsd_tv_violations);
        section("tv-premise-implies-dissimilar", self.tv_premise_met, &self.tv_premise_violations);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub similar_pairs: usize,
    pub jsd_samples: usize,
    pub tolerance: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            similar_pairs: 1000,
            jsd_samples: 10_000,
            tolerance: 1e-9,
        }
    }
}

/// Run every check; violated instances are listed verbatim in the report.
pub fn verify_theory<R: Rng + ?Sized>(cfg: &TheoryConfig, rng: &mut R) -> TheoryReport {
    let mut rep = TheoryReport::default();
    let tol = cfg.tolerance;
    while rep.similar_pairs < cfg.similar_pairs {
        let game = TabularGame::random(rng);
        let ego = random_policy(rng);
        let tm = random_policy(rng);
        let tm2 = perturb(&tm, 0.3 * rng.gen::<f64>(), rng);
        // ratio direction P(tau | tm2) / P(tau | tm)
        let d = tabular_dissimilarity(&tm2, &tm);
        let j = game.expected_return(&ego, &tm);
        let j2 = game.expected_return(&ego, &tm2);
        let eps = (d * (1.0 + rng.gen::<f64>())).min(1.0);
        if d <= eps {
            rep.similar_pairs += 1;
            if j2 < (1.0 - eps) * j - tol || j2 > (1.0 + eps) * j + tol {
                rep.sandwich_violations
                    .push(format!("eps={eps:.17e} d={d:.17e} J={j:.17e} J'={j2:.17e}"));
            }
        }
        for eps in [0.05, 0.1, 0.2, 0.5] {
            if j2 < (1.0 - eps) * j {
                rep.corollary_checked += 1;
                if d <= eps {
                    rep.corollary_violations
                        .push(format!("eps={eps} d={d:.17e} J={j:.17e} J'={j2:.17e}"));
                }
            }
        }
        let delta = tm
            .iter()
            .chain(&tm2)
            .flatten()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let tv_min = (0..T)
            .flat_map(|t| (0..S).map(move |s| (t, s)))
            .map(|(t, s)| total_variation(&tm[t][s], &tm2[t][s]))
            .fold(f64::INFINITY, f64::min);
        let k = A as f64;
        let eps: f64 = 0.1;
        let tf = T as f64;
        let bound = 0.5 * k * (k - 1.0) * delta * (1.0 - (1.0 - eps).powf(1.0 / tf)).min((1.0 + eps).powf(1.0 / tf) - 1.0);
        if tv_min > bound {
            rep.tv_premise_met += 1;
            let d_ij = tabular_dissimilarity(&tm, &tm2);
            if d_ij <= eps {
                rep.tv_premise_violations.push(format!(
                    "eps={eps} delta={delta:.17e} tv_min={tv_min:.17e} bound={bound:.17e} d={d_ij:.17e}"
                ));
            }
        }
    }
    for _ in 0..cfg.jsd_samples {
        let n = rng.gen_range(2..=6);
        let mut p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut q: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        // occasionally force disjoint or shared zeros
        if rng.gen_bool(0.1) {
            p[0] = 0.0;
            q[n - 1] = 0.0;
        }
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        let (js, tv) = (jsd_pair(&p, &q), total_variation(&p, &q));
        rep.jsd_tv_samples += 1;
        if js > tv + 1e-15 {
            rep.jsd_tv_violations.push(format!("p={p:?} q={q:?} jsd={js:.17e} tv={tv:.17e}"));
        }
    }
    rep
}
