//! Cross-method evaluation, continual-learning metrics, cross-play matrices
//! and the rank-sum test.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::archive::read_archive;
use crate::ego::{meta_select_head, EgoPolicy};
use crate::error::{Error, Result};
use crate::marl::{ActionMode, Actor, Arena, NetRef};
use crate::teammate::FrozenGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub group: FrozenGroup,
    pub algo: String,
    pub seed: u64,
    pub run_id: String,
}

impl EvalEntry {
    pub fn label(&self) -> String {
        format!("{}-s{}-g{}", self.algo, self.seed, self.group.id)
    }
}

/// Union of archived teammate groups from several runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub entries: Vec<EvalEntry>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append a run's groups, skipping `(run_id, group id)` pairs already present.
    pub fn extend_run(&mut self, algo: &str, seed: u64, run_id: &str, groups: Vec<FrozenGroup>) {
        let mut seen: HashSet<(String, u64)> = self.entries.iter().map(|e| (e.run_id.clone(), e.group.id)).collect();
        for g in groups {
            if seen.insert((run_id.to_string(), g.id)) {
                self.entries.push(EvalEntry {
                    group: g,
                    algo: algo.to_string(),
                    seed,
                    run_id: run_id.to_string(),
                });
            }
        }
    }
}

pub fn build_eval_set<P: AsRef<Path>>(run_dirs: &[P]) -> Result<EvalSet> {
    let mut set = EvalSet::default();
    for dir in run_dirs {
        let (info, groups) = read_archive(dir.as_ref())?;
        set.extend_run(&info.algo, info.seed, &info.run_id, groups);
    }
    if set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(set)
}

/// How the ego picks a head for an unknown group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Meta { episodes_per_head: usize },
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub label: String,
    pub head: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallReport {
    pub rows: Vec<OverallRow>,
    pub grand_mean: f64,
}

impl OverallReport {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }
}

fn check_compatible(ego: &EgoPolicy, g: &FrozenGroup, arena: &Arena) -> Result<()> {
    let spec = arena.net_spec();
    if g.tm.spec != spec || g.comp_ego.spec != spec || ego.spec != spec {
        return Err(Error::InvalidArgument(format!(
            "group {} or ego was trained for a different environment or network shape",
            g.id
        )));
    }
    Ok(())
}

/// Greedy return of `ego` against every entry, with the head picked per entry.
pub fn evaluate_overall<R: Rng + ?Sized>(
    ego: &EgoPolicy,
    set: &EvalSet,
    episodes_per_pair: usize,
    choice: HeadChoice,
    arena: &Arena,
    rng: &mut R,
) -> Result<OverallReport> {
    if episodes_per_pair == 0 {
        return Err(Error::InvalidArgument("episodes_per_pair must be >= 1".into()));
    }
    if set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if ego.heads.is_empty() {
        return Err(Error::InvalidArgument("ego has no heads".into()));
    }
    let mut rows = Vec::with_capacity(set.len());
    for e in &set.entries {
        check_compatible(ego, &e.group, arena)?;
        let head = match choice {
            HeadChoice::Meta { episodes_per_head } => {
                meta_select_head(ego, e.group.tm_ref(), episodes_per_head, arena, rng)?.chosen
            }
            HeadChoice::Random => rng.gen_range(0..ego.heads.len()),
        };
        let tm = Actor::Net {
            net: e.group.tm_ref(),
            mode: ActionMode::Greedy,
        };
        let (mean, std) = arena.evaluate(&arena.pair(ego.head_actor(head, ActionMode::Greedy), tm), episodes_per_pair, rng)?;
        rows.push(OverallRow {
            label: e.label(),
            head,
            mean,
            std,
        });
    }
    let grand_mean = rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64;
    Ok(OverallReport { rows, grand_mean })
}

/// `value / anchor`; the anchor method maps to 1.
pub fn rescale(value: f64, anchor: f64) -> Result<f64> {
    if anchor == 0.0 || !anchor.is_finite() {
        return Err(Error::InvalidArgument("anchor score must be finite and non-zero".into()));
    }
    Ok(value / anchor)
}

/// `alpha[k][j]`: return with group `j` after training on group `k`
/// (zero-based); `alpha_tilde[j]`: return of a fresh ego trained on `j` alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    pub group_ids: Vec<u64>,
    pub alpha: Vec<Vec<f64>>,
    pub alpha_tilde: Option<Vec<f64>>,
}

impl AlphaMatrix {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.alpha.iter().any(|r| r.len() != k) || self.group_ids.len() != k {
            return Err(Error::InvalidArgument("alpha matrix must be K x K".into()));
        }
        if self.alpha_tilde.as_ref().is_some_and(|t| t.len() != k) {
            return Err(Error::InvalidArgument("alpha_tilde must have K entries".into()));
        }
        Ok(())
    }
}

/// Backward and forward transfer. FWT is `None` without reference returns.
pub fn continual_metrics(m: &AlphaMatrix) -> Result<(f64, Option<f64>)> {
    m.validate()?;
    let k = m.k();
    if k < 2 {
        return Err(Error::InvalidArgument("continual metrics need K >= 2".into()));
    }
    let a = &m.alpha;
    let norm = 1.0 / (k - 1) as f64;
    // one-based k in 2..=K, j in 1..k, mapped to zero-based indices
    let bwt = norm
        * (2..=k)
            .map(|kk| (1..kk).map(|j| a[kk - 1][j - 1] - a[j - 1][j - 1]).sum::<f64>() / (kk - 1) as f64)
            .sum::<f64>();
    let fwt = m.alpha_tilde.as_ref().map(|t| {
        norm * (2..=k)
            .map(|kk| (2..=kk).map(|j| a[j - 1][j - 1] - t[j - 1]).sum::<f64>() / (kk - 1) as f64)
            .sum::<f64>()
    });
    Ok((bwt, fwt))
}

/// `values[i][j]`: return of group `i`'s teammate with group `j`'s partner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossPlayMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CrossPlayMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.values.len();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.values.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.values[i][j];
                }
            }
        }
        s / (n * (n - 1)) as f64
    }

    /// Mean off-diagonal over mean diagonal; infinite when the diagonal is 0.
    pub fn off_diagonal_ratio(&self) -> f64 {
        let d = self.diagonal_mean();
        if d <= 0.0 {
            f64::INFINITY
        } else {
            self.off_diagonal_mean() / d
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::from("teammate\\partner")];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Every cell evaluated with its own stream seeded by `seed`, so the
/// diagonal reproduces each group's self-play return under that seed.
pub fn crossplay_matrix(
    labels: &[String],
    teammates: &[NetRef<'_>],
    partners: &[NetRef<'_>],
    n_eval: usize,
    seed: u64,
    arena: &Arena,
) -> Result<CrossPlayMatrix> {
    let n = teammates.len();
    if n < 2 || partners.len() != n || labels.len() != n {
        return Err(Error::InvalidArgument("cross-play needs >= 2 groups with matching labels".into()));
    }
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = arena.pair(
                Actor::Net {
                    net: partners[j],
                    mode: ActionMode::Greedy,
                },
                Actor::Net {
                    net: teammates[i],
                    mode: ActionMode::Greedy,
                },
            );
            values[i][j] = arena.evaluate(&p, n_eval, &mut rng)?.0;
        }
    }
    Ok(CrossPlayMatrix {
        labels: labels.to_vec(),
        values,
    })
}

pub fn crossplay_of_groups(groups: &[(String, &FrozenGroup)], n_eval: usize, seed: u64, arena: &Arena) -> Result<CrossPlayMatrix> {
    let labels: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
    let tms: Vec<NetRef<'_>> = groups.iter().map(|g| g.1.tm_ref()).collect();
    let comps: Vec<NetRef<'_>> = groups.iter().map(|g| g.1.comp_ref()).collect();
    crossplay_matrix(&labels, &tms, &comps, n_eval, seed, arena)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// `b` significantly worse than `a`.
    Inferior,
    Equivalent,
    /// `b` significantly better than `a`.
    Superior,
}

impl Verdict {
    pub fn symbol(self) -> &'static str {
        match self {
            Verdict::Inferior => "+",
            Verdict::Equivalent => "≈",
            Verdict::Superior => "-",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Standardised rank sum of `a` (normal approximation, tie-corrected).
    pub statistic: f64,
    pub rank_sum_a: f64,
    pub p_value: f64,
    pub verdict: Verdict,
}

/// Midranks (one-based) of the pooled sample, plus the tie term
/// `sum (t^3 - t)` over tie groups.
pub fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon rank-sum test at the 0.05 level.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSum> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::InvalidArgument("rank-sum test needs >= 3 observations per sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank-sum sample"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
    let (ranks, ties) = midranks(&pooled);
    let w: f64 = ranks[..a.len()].iter().sum();
    let mean = n1 * (n + 1.0) / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let (z, p) = if var <= 0.0 {
        (0.0, 1.0)
    } else {
        let z = (w - mean) / var.sqrt();
        let normal = Normal::standard();
        (z, (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0))
    };
    let verdict = if p >= 0.05 {
        Verdict::Equivalent
    } else if z > 0.0 {
        Verdict::Inferior
    } else {
        Verdict::Superior
    };
    Ok(RankSum {
        statistic: z,
        rank_sum_a: w,
        p_value: p,
        verdict,
    })
}
