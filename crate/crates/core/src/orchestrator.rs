//! The outer training loop, the stopping criterion, baseline trainers and
//! run directories with resumable state.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{AlphaMatrix, HeadChoice};
use crate::archive::{write_archive, write_run_info, RunInfo};
use crate::config::{run_id, Algo, BaselineKind, MacopConfig};
use crate::ego::{continual_train, meta_select_head, train_best_response, ContinualReport, EgoConfig, EgoPolicy, EgoVariant};
use crate::env::{make_env, EnvSpec};
use crate::error::{Error, Result};
use crate::marl::{ActionMode, Actor, Arena, NetRef};
use crate::teammate::{
    init_population, mutate, select, DiversityKind, FrozenGroup, Population, TeammateGroup, TeammateObjective,
};

pub const STATE_FILE: &str = "state.json";
pub const EGO_FILE: &str = "ego.json";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const ALPHA_FILE: &str = "alpha.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Denominators at or below this make the stopping criterion infinite.
pub const CRITERION_EPS: f64 = 1e-9;

pub const LOG_COLUMNS: [&str; 10] = [
    "iteration",
    "member_id",
    "sp_mean",
    "sp_std",
    "xp_mean",
    "xp_std",
    "C",
    "head_count",
    "archive_size",
    "wall_seconds",
];

pub fn build_arena(config: &MacopConfig) -> Result<Arena> {
    Arena::new(make_env(EnvSpec::preset(&config.env)?)?, config.learner.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub value: f64,
    pub min_xp: f64,
    pub mean_sp: f64,
    pub xp: Vec<(f64, f64)>,
    pub sp: Vec<(f64, f64)>,
}

/// `min(xp) / mean(sp)`, or `+inf` when the mean is at most [`CRITERION_EPS`].
pub fn criterion_value(xp: &[f64], sp: &[f64]) -> Result<f64> {
    if xp.is_empty() || xp.len() != sp.len() {
        return Err(Error::InvalidArgument("criterion needs one xp and one sp return per member".into()));
    }
    let min_xp = xp.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_sp = sp.iter().sum::<f64>() / sp.len() as f64;
    if mean_sp <= CRITERION_EPS {
        warn!("mean self-play return {mean_sp} is not positive; stopping criterion set to +inf");
        return Ok(f64::INFINITY);
    }
    Ok(min_xp / mean_sp)
}

/// Estimate the stopping criterion. Each member's cross-play (meta-selected
/// head) and self-play returns share one episode seed stream.
pub fn stopping_criterion<R: Rng + ?Sized>(
    ego: &EgoPolicy,
    population: &Population,
    n_eval: usize,
    meta_episodes_per_head: usize,
    arena: &Arena,
    rng: &mut R,
) -> Result<CriterionReport> {
    if population.is_empty() {
        return Err(Error::InvalidArgument("empty population".into()));
    }
    let mut xp = Vec::with_capacity(population.len());
    let mut sp = Vec::with_capacity(population.len());
    for m in &population.members {
        let head = meta_select_head(ego, m.tm.view(), meta_episodes_per_head, arena, rng)?.chosen;
        let seed: u64 = rng.gen();
        let p = arena.pair(ego.head_actor(head, ActionMode::Greedy), m.tm_actor(ActionMode::Greedy));
        xp.push(arena.evaluate(&p, n_eval, &mut ChaCha8Rng::seed_from_u64(seed))?);
        sp.push(m.self_play_return(arena, n_eval, &mut ChaCha8Rng::seed_from_u64(seed))?);
    }
    let xs: Vec<f64> = xp.iter().map(|r| r.0).collect();
    let ss: Vec<f64> = sp.iter().map(|r| r.0).collect();
    let value = criterion_value(&xs, &ss)?;
    Ok(CriterionReport {
        value,
        min_xp: xs.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_sp: ss.iter().sum::<f64>() / ss.len() as f64,
        xp,
        sp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub member_id: u64,
    pub sp: (f64, f64),
    pub xp: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub generation: usize,
    pub members: Vec<MemberRecord>,
    pub criterion: Option<f64>,
    pub terminated: bool,
    pub continual: Vec<ContinualReport>,
    pub head_count: usize,
    pub archive_size: usize,
    pub trained_groups: usize,
    pub wall_seconds: f64,
}

/// How an algorithm generates teammates and adapts its ego.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recipe {
    pub objective: TeammateObjective,
    /// `None` for population-then-best-response methods.
    pub ego_variant: Option<EgoVariant>,
    pub head_choice: HeadChoice,
    pub alpha_reg: f64,
}

pub fn recipe(algo: Algo, config: &MacopConfig) -> Recipe {
    let meta = HeadChoice::Meta {
        episodes_per_head: config.meta_episodes_per_head,
    };
    let mut r = Recipe {
        objective: TeammateObjective {
            alpha_div: config.alpha_div,
            alpha_incom: config.alpha_incom,
            diversity: DiversityKind::Jsd,
        },
        ego_variant: Some(EgoVariant::MultiHead),
        head_choice: meta,
        alpha_reg: config.alpha_reg,
    };
    let Algo::Baseline(kind) = algo else {
        return r;
    };
    match kind {
        BaselineKind::Fcp | BaselineKind::Trajedi | BaselineKind::Lipo => {
            r.ego_variant = None;
            r.objective.alpha_incom = 0.0;
            match kind {
                BaselineKind::Fcp => r.objective.alpha_div = 0.0,
                BaselineKind::Lipo => r.objective.diversity = DiversityKind::CrossPlay,
                _ => {}
            }
        }
        BaselineKind::Finetune => r.ego_variant = Some(EgoVariant::Finetune),
        BaselineKind::SingleHead => r.ego_variant = Some(EgoVariant::SingleHead),
        BaselineKind::Ewc => r.ego_variant = Some(EgoVariant::Ewc),
        BaselineKind::Clear => r.ego_variant = Some(EgoVariant::Clear),
        BaselineKind::RandomHead => r.head_choice = HeadChoice::Random,
        BaselineKind::MacopNoIncom => r.objective.alpha_incom = 0.0,
        BaselineKind::MacopNoDiv => r.objective.alpha_div = 0.0,
        BaselineKind::MacopNoIncomDiv => {
            r.objective.alpha_incom = 0.0;
            r.objective.alpha_div = 0.0;
        }
        BaselineKind::MacopNoReg => r.alpha_reg = 0.0,
    }
    r
}

impl Recipe {
    fn ego_config(&self, config: &MacopConfig) -> Option<EgoConfig> {
        self.ego_variant.map(|v| EgoConfig {
            alpha_reg: self.alpha_reg,
            ..config.ego_config(v)
        })
    }
}

/// Everything needed to continue a run from an iteration boundary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub algo: Algo,
    pub config: MacopConfig,
    pub run_id: String,
    /// Completed iterations.
    pub iteration: usize,
    pub finished: bool,
    pub population: Population,
    pub ego: EgoPolicy,
    /// Every group the ego has trained with, once each, in first-use order.
    pub archive: Vec<FrozenGroup>,
    /// Group ids in ego training order; repeats when a parent survives.
    pub sequence: Vec<u64>,
    pub alpha: AlphaMatrix,
    pub log: Vec<IterationRecord>,
    pub rng: ChaCha8Rng,
}

/// Final products of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub info: RunInfo,
    pub config: MacopConfig,
    pub ego: EgoPolicy,
    pub head_choice: HeadChoice,
    pub archive: Vec<FrozenGroup>,
    pub sequence: Vec<u64>,
    pub alpha: Option<AlphaMatrix>,
    pub log: Vec<IterationRecord>,
}

impl RunArtifacts {
    pub fn group(&self, id: u64) -> Option<&FrozenGroup> {
        self.archive.iter().find(|g| g.id == id)
    }

    /// Groups in ego training order.
    pub fn sequence_groups(&self) -> Vec<&FrozenGroup> {
        self.sequence.iter().filter_map(|&id| self.group(id)).collect()
    }

    /// Per-row CSV records, header first.
    pub fn log_csv(&self) -> Result<String> {
        log_csv(&self.log)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn log_csv(log: &[IterationRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_COLUMNS)?;
    for r in log {
        for m in &r.members {
            w.write_record([
                r.iteration.to_string(),
                m.member_id.to_string(),
                m.sp.0.to_string(),
                m.sp.1.to_string(),
                opt(m.xp.map(|x| x.0)),
                opt(m.xp.map(|x| x.1)),
                opt(r.criterion),
                r.head_count.to_string(),
                r.archive_size.to_string(),
                format!("{:.3}", r.wall_seconds),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Return of `ego` with `group` under `choice` for head selection.
pub fn ego_return<R: Rng + ?Sized>(
    ego: &EgoPolicy,
    teammate: NetRef<'_>,
    choice: HeadChoice,
    n: usize,
    arena: &Arena,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let head = match choice {
        HeadChoice::Meta { episodes_per_head } => meta_select_head(ego, teammate, episodes_per_head, arena, rng)?.chosen,
        HeadChoice::Random => rng.gen_range(0..ego.head_count()),
    };
    let tm = Actor::Net {
        net: teammate,
        mode: ActionMode::Greedy,
    };
    arena.evaluate(&arena.pair(ego.head_actor(head, ActionMode::Greedy), tm), n, rng)
}

/// Append the transfer-matrix row for the newest entry of `sequence`:
/// returns with every group trained so far. Earlier rows are padded with
/// zeros (unmeasured entries above the diagonal).
fn push_alpha_row<R: Rng + ?Sized>(
    alpha: &mut AlphaMatrix,
    ego: &EgoPolicy,
    groups: &[&FrozenGroup],
    choice: HeadChoice,
    n: usize,
    arena: &Arena,
    rng: &mut R,
) -> Result<()> {
    let mut row = Vec::with_capacity(groups.len());
    for g in groups {
        row.push(ego_return(ego, g.tm_ref(), choice, n, arena, rng)?.0);
    }
    for r in &mut alpha.alpha {
        r.push(0.0);
    }
    alpha.alpha.push(row);
    alpha.group_ids.push(groups.last().expect("non-empty sequence").id);
    Ok(())
}

impl RunState {
    /// Seed the run and build (and pre-train) the first population.
    pub fn new(algo: Algo, config: MacopConfig) -> Result<Self> {
        config.validate()?;
        let arena = build_arena(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rec = recipe(algo, &config);
        let ego = EgoPolicy::new(arena.net_spec(), &mut rng)?;
        let (n, steps) = match rec.ego_variant {
            Some(_) => (config.n_p, config.pretrain_steps),
            None => (config.fcp_population, config.baseline_tm_steps),
        };
        let population = init_population(n, steps, &rec.objective, &arena, &mut rng)?;
        Ok(RunState {
            run_id: run_id(algo, &config)?,
            algo,
            config,
            iteration: 0,
            finished: false,
            population,
            ego,
            archive: Vec::new(),
            sequence: Vec::new(),
            alpha: AlphaMatrix::default(),
            log: Vec::new(),
            rng,
        })
    }

    pub fn recipe(&self) -> Recipe {
        recipe(self.algo, &self.config)
    }

    fn member_records(&mut self, arena: &Arena) -> Result<Vec<MemberRecord>> {
        let n = self.config.eval_episodes;
        let choice = self.recipe().head_choice;
        let mut out = Vec::with_capacity(self.population.len());
        for i in 0..self.population.len() {
            let m = &self.population.members[i];
            let sp = m.self_play_return(arena, n, &mut self.rng)?;
            let xp = if self.ego.head_count() > 0 {
                Some(ego_return(&self.ego, m.tm.view(), choice, n, arena, &mut self.rng)?)
            } else {
                None
            };
            out.push(MemberRecord {
                member_id: m.id,
                sp,
                xp,
            });
            let m = &mut self.population.members[i];
            m.sp_return_cache = Some(sp);
            m.xp_return_cache = xp;
        }
        Ok(out)
    }

    /// Run one loop iteration. Returns `false` once the run has finished.
    pub fn step(&mut self, arena: &Arena) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        let rec = self.recipe();
        let Some(ego_cfg) = rec.ego_config(&self.config) else {
            return self.population_then_best_response(arena).map(|_| false);
        };
        let start = Instant::now();
        let cfg = self.config.clone();
        let iter = self.iteration + 1;
        let members = if iter == 1 {
            self.member_records(arena)?
        } else {
            let off = mutate(&self.population, &self.ego, cfg.t_tm, &rec.objective, arena, &mut self.rng)?;
            let (pop, records) = select(
                &self.population,
                &off,
                &self.ego,
                cfg.eval_episodes,
                cfg.meta_episodes_per_head,
                arena,
                &mut self.rng,
            )?;
            self.population = pop;
            records
                .into_iter()
                .filter(|r| r.survived)
                .map(|r| MemberRecord {
                    member_id: r.id,
                    sp: r.sp,
                    xp: Some(r.xp),
                })
                .collect()
        };
        let mut criterion = None;
        if iter >= cfg.n_min && self.ego.head_count() > 0 {
            let c = stopping_criterion(
                &self.ego,
                &self.population,
                cfg.eval_episodes,
                cfg.meta_episodes_per_head,
                arena,
                &mut self.rng,
            )?;
            info!("iteration {iter}: C = {:.4} (min xp {:.4}, mean sp {:.4})", c.value, c.min_xp, c.mean_sp);
            criterion = Some(c.value);
            if c.value >= cfg.xi {
                self.finish_iteration(iter, members, criterion, true, Vec::new(), start);
                return Ok(false);
            }
        }
        let mut reports = Vec::with_capacity(self.population.len());
        for i in 0..self.population.len() {
            let m = &self.population.members[i];
            let report = continual_train(&mut self.ego, m.tm.view(), m.id, cfg.t_ego, &ego_cfg, arena, &mut self.rng)?;
            info!(
                "iteration {iter}: group {} r_new {:.3} kept {} heads {}",
                m.id, report.r_new, report.kept, report.head_count
            );
            reports.push(report);
            if !self.archive.iter().any(|g| g.id == m.id) {
                self.archive.push(m.freeze());
            }
            self.sequence.push(m.id);
            if cfg.track_alpha {
                let groups: Vec<&FrozenGroup> = self
                    .sequence
                    .iter()
                    .map(|id| self.archive.iter().find(|g| g.id == *id).expect("archived"))
                    .collect();
                push_alpha_row(
                    &mut self.alpha,
                    &self.ego,
                    &groups,
                    rec.head_choice,
                    cfg.test_episodes,
                    arena,
                    &mut self.rng,
                )?;
            }
        }
        let done = iter >= cfg.n_max;
        self.finish_iteration(iter, members, criterion, false, reports, start);
        if done {
            self.finished = true;
        }
        Ok(!self.finished)
    }

    fn finish_iteration(
        &mut self,
        iter: usize,
        members: Vec<MemberRecord>,
        criterion: Option<f64>,
        terminated: bool,
        continual: Vec<ContinualReport>,
        start: Instant,
    ) {
        self.iteration = iter;
        if terminated {
            self.finished = true;
        }
        self.log.push(IterationRecord {
            iteration: iter,
            generation: self.population.generation,
            members,
            criterion,
            terminated,
            continual,
            head_count: self.ego.head_count(),
            archive_size: self.archive.len(),
            trained_groups: self.sequence.len(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    fn population_then_best_response(&mut self, arena: &Arena) -> Result<()> {
        let start = Instant::now();
        let refs: Vec<NetRef<'_>> = self.population.members.iter().map(|m| m.tm.view()).collect();
        train_best_response(&mut self.ego, &refs, self.config.baseline_ego_steps, arena, &mut self.rng)?;
        self.sequence = self.population.ids();
        let members = self.member_records(arena)?;
        self.archive = self.population.members.iter().map(TeammateGroup::freeze).collect();
        self.finish_iteration(1, members, None, false, Vec::new(), start);
        self.finished = true;
        Ok(())
    }

    pub fn run_to_end(&mut self, arena: &Arena) -> Result<()> {
        while self.step(arena)? {}
        self.finalize(arena)
    }

    /// Optional forward-transfer references once the loop is over.
    fn finalize(&mut self, arena: &Arena) -> Result<()> {
        if self.config.alpha_tilde && self.config.track_alpha && self.alpha.alpha_tilde.is_none() && !self.sequence.is_empty()
        {
            let groups: Vec<FrozenGroup> = self
                .sequence
                .iter()
                .map(|id| self.archive.iter().find(|g| g.id == *id).expect("archived").clone())
                .collect();
            let t = alpha_tilde(&groups, &self.config, self.recipe().head_choice, arena, &mut self.rng)?;
            self.alpha.alpha_tilde = Some(t);
        }
        Ok(())
    }

    pub fn artifacts(&self) -> RunArtifacts {
        RunArtifacts {
            info: RunInfo {
                algo: self.algo.name().to_string(),
                env: self.config.env.clone(),
                seed: self.config.seed,
                run_id: self.run_id.clone(),
            },
            config: self.config.clone(),
            ego: self.ego.clone(),
            head_choice: self.recipe().head_choice,
            archive: self.archive.clone(),
            sequence: self.sequence.clone(),
            alpha: (self.recipe().ego_variant.is_some() && self.config.track_alpha).then(|| self.alpha.clone()),
            log: self.log.clone(),
        }
    }

    /// Write resumable state and every artifact into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let art = self.artifacts();
        write_run_info(dir, &art.info)?;
        write_archive(dir, &self.archive)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml_string()?)?;
        fs::write(dir.join(EGO_FILE), self.ego.to_json()?)?;
        fs::write(dir.join(LOG_FILE), art.log_csv()?)?;
        if let Some(a) = &art.alpha {
            fs::write(dir.join(ALPHA_FILE), serde_json::to_string_pretty(a)?)?;
        }
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&Summary::of(&art))?)?;
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string(self)?)?;
        fs::rename(tmp, dir.join(STATE_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let state: RunState = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        state.config.validate()?;
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algo: String,
    pub run_id: String,
    pub iterations: usize,
    pub head_count: usize,
    pub archive_size: usize,
    pub trained_groups: usize,
    pub final_criterion: Option<f64>,
    pub ego_hashes: Vec<String>,
}

impl Summary {
    pub fn of(a: &RunArtifacts) -> Self {
        Summary {
            algo: a.info.algo.clone(),
            run_id: a.info.run_id.clone(),
            iterations: a.log.len(),
            head_count: a.ego.head_count(),
            archive_size: a.archive.len(),
            trained_groups: a.sequence.len(),
            final_criterion: a.log.iter().rev().find_map(|r| r.criterion).filter(|c| c.is_finite()),
            ego_hashes: a.ego.param_hashes(),
        }
    }
}

/// Train the full algorithm in memory.
pub fn macop_train(config: &MacopConfig) -> Result<RunArtifacts> {
    train(Algo::Macop, config)
}

pub fn run_baseline(kind: BaselineKind, config: &MacopConfig) -> Result<RunArtifacts> {
    train(Algo::Baseline(kind), config)
}

pub fn train(algo: Algo, config: &MacopConfig) -> Result<RunArtifacts> {
    let arena = build_arena(config)?;
    let mut state = RunState::new(algo, config.clone())?;
    state.run_to_end(&arena)?;
    Ok(state.artifacts())
}

/// Train into `dir`, saving state after every iteration.
pub fn train_to_dir(algo: Algo, config: &MacopConfig, dir: &Path) -> Result<RunArtifacts> {
    let arena = build_arena(config)?;
    let mut state = RunState::new(algo, config.clone())?;
    state.save(dir)?;
    drive(&mut state, &arena, dir)
}

/// Continue an interrupted run from its last saved iteration.
pub fn resume_dir(dir: &Path) -> Result<RunArtifacts> {
    let mut state = RunState::load(dir)?;
    let arena = build_arena(&state.config)?;
    drive(&mut state, &arena, dir)
}

fn drive(state: &mut RunState, arena: &Arena, dir: &Path) -> Result<RunArtifacts> {
    while state.step(arena)? {
        state.save(dir)?;
    }
    state.finalize(arena)?;
    state.save(dir)?;
    Ok(state.artifacts())
}

/// Train a fresh ego of `variant` on `groups` in order, filling the
/// transfer matrix after each group.
pub fn replay_sequence<R: Rng + ?Sized>(
    groups: &[FrozenGroup],
    variant: EgoVariant,
    config: &MacopConfig,
    choice: HeadChoice,
    arena: &Arena,
    rng: &mut R,
) -> Result<(EgoPolicy, AlphaMatrix)> {
    let cfg = config.ego_config(variant);
    let mut ego = EgoPolicy::new(arena.net_spec(), rng)?;
    let mut alpha = AlphaMatrix::default();
    for k in 0..groups.len() {
        continual_train(&mut ego, groups[k].tm_ref(), groups[k].id, config.t_ego, &cfg, arena, rng)?;
        let seen: Vec<&FrozenGroup> = groups[..=k].iter().collect();
        push_alpha_row(&mut alpha, &ego, &seen, choice, config.test_episodes, arena, rng)?;
    }
    Ok((ego, alpha))
}

/// Return of a freshly initialised single-head ego trained only with each
/// group.
pub fn alpha_tilde<R: Rng + ?Sized>(
    groups: &[FrozenGroup],
    config: &MacopConfig,
    choice: HeadChoice,
    arena: &Arena,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cfg = config.ego_config(EgoVariant::Finetune);
    groups
        .iter()
        .map(|g| {
            let mut ego = EgoPolicy::new(arena.net_spec(), rng)?;
            continual_train(&mut ego, g.tm_ref(), g.id, config.t_ego, &cfg, arena, rng)?;
            Ok(ego_return(&ego, g.tm_ref(), choice, config.test_episodes, arena, rng)?.0)
        })
        .collect()
}
