//! Teammate groups, their population, and the evolutionary operators that
//! make each generation diverse and incompatible with the current ego.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{backward_batch, forward_batch, infer_batch, NetCheckpoint};
use crate::ego::{meta_select_head, EgoPolicy};
use crate::error::{Error, Result};
use crate::marl::{
    softmax, td_loss_grads, ActionMode, Actor, Arena, Episode, NetGrads, NetRef, QNet, ReplayBuffer, TdMember,
};

/// One population individual: a teammate network for the teammate slots and
/// its complementary partner for the ego slots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeammateGroup {
    pub id: u64,
    pub lineage: Option<u64>,
    pub generation: usize,
    pub tm: QNet,
    pub comp_ego: QNet,
    #[serde(skip)]
    pub sp_buffer: ReplayBuffer,
    #[serde(skip)]
    pub xp_buffer: ReplayBuffer,
    pub sp_return_cache: Option<(f64, f64)>,
    pub xp_return_cache: Option<(f64, f64)>,
}

impl TeammateGroup {
    pub fn new<R: Rng + ?Sized>(id: u64, arena: &Arena, rng: &mut R) -> Result<Self> {
        Ok(TeammateGroup {
            id,
            lineage: None,
            generation: 0,
            tm: arena.new_qnet(rng)?,
            comp_ego: arena.new_qnet(rng)?,
            sp_buffer: ReplayBuffer::new(arena.learner.buffer_capacity),
            xp_buffer: ReplayBuffer::new(arena.learner.buffer_capacity),
            sp_return_cache: None,
            xp_return_cache: None,
        })
    }

    pub fn tm_actor(&self, mode: ActionMode) -> Actor<'_> {
        Actor::Net {
            net: self.tm.view(),
            mode,
        }
    }

    pub fn comp_actor(&self, mode: ActionMode) -> Actor<'_> {
        Actor::Net {
            net: self.comp_ego.view(),
            mode,
        }
    }

    pub fn invalidate_caches(&mut self) {
        self.sp_return_cache = None;
        self.xp_return_cache = None;
    }

    /// Greedy self-play return with the complementary partner.
    pub fn self_play_return<R: Rng + ?Sized>(&self, arena: &Arena, n: usize, rng: &mut R) -> Result<(f64, f64)> {
        let p = arena.pair(self.comp_actor(ActionMode::Greedy), self.tm_actor(ActionMode::Greedy));
        arena.evaluate(&p, n, rng)
    }

    pub fn freeze(&self) -> FrozenGroup {
        FrozenGroup {
            id: self.id,
            lineage: self.lineage,
            generation: self.generation,
            tm: NetCheckpoint {
                spec: self.tm.spec.clone(),
                backbone: self.tm.backbone.clone(),
                head: self.tm.head.clone(),
            },
            comp_ego: NetCheckpoint {
                spec: self.comp_ego.spec.clone(),
                backbone: self.comp_ego.backbone.clone(),
                head: self.comp_ego.head.clone(),
            },
            sp_return: self.sp_return_cache,
            xp_return: self.xp_return_cache,
        }
    }
}

/// Read-only archive form of a group: online parameters only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenGroup {
    pub id: u64,
    pub lineage: Option<u64>,
    pub generation: usize,
    pub tm: NetCheckpoint,
    pub comp_ego: NetCheckpoint,
    pub sp_return: Option<(f64, f64)>,
    pub xp_return: Option<(f64, f64)>,
}

impl FrozenGroup {
    pub fn tm_ref(&self) -> NetRef<'_> {
        NetRef {
            spec: &self.tm.spec,
            backbone: &self.tm.backbone,
            head: &self.tm.head,
        }
    }

    pub fn comp_ref(&self) -> NetRef<'_> {
        NetRef {
            spec: &self.comp_ego.spec,
            backbone: &self.comp_ego.backbone,
            head: &self.comp_ego.head,
        }
    }

    /// Rebuild a trainable group; optimizer state starts fresh.
    pub fn thaw(&self, arena: &Arena) -> TeammateGroup {
        let lr = arena.learner.lr;
        let net = |c: &NetCheckpoint| QNet::from_params(c.spec.clone(), c.backbone.clone(), c.head.clone(), lr);
        TeammateGroup {
            id: self.id,
            lineage: self.lineage,
            generation: self.generation,
            tm: net(&self.tm),
            comp_ego: net(&self.comp_ego),
            sp_buffer: ReplayBuffer::new(arena.learner.buffer_capacity),
            xp_buffer: ReplayBuffer::new(arena.learner.buffer_capacity),
            sp_return_cache: self.sp_return,
            xp_return_cache: self.xp_return,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<TeammateGroup>,
    pub generation: usize,
    /// Next unused group id; ids are allocated monotonically along a run.
    pub next_id: u64,
}

impl Population {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.id).collect()
    }

    /// Deep copies of every member under fresh ids, one generation later.
    pub fn offspring(&self, arena: &Arena) -> Population {
        let mut next_id = self.next_id;
        let members = self
            .members
            .iter()
            .map(|m| {
                let mut c = m.clone();
                c.lineage = Some(m.id);
                c.id = next_id;
                next_id += 1;
                c.generation = self.generation + 1;
                c.sp_buffer = ReplayBuffer::new(arena.learner.buffer_capacity);
                c.xp_buffer = ReplayBuffer::new(arena.learner.buffer_capacity);
                c.invalidate_caches();
                c
            })
            .collect();
        Population {
            members,
            generation: self.generation + 1,
            next_id,
        }
    }
}

/// Which population-diversity pressure accompanies self-play.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityKind {
    /// Ascend the Jensen-Shannon divergence of member policies.
    Jsd,
    /// Minimise return of randomly paired cross-group episodes.
    CrossPlay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeammateObjective {
    pub alpha_div: f64,
    pub alpha_incom: f64,
    pub diversity: DiversityKind,
}

impl Default for TeammateObjective {
    fn default() -> Self {
        TeammateObjective {
            alpha_div: 0.1,
            alpha_incom: 0.1,
            diversity: DiversityKind::Jsd,
        }
    }
}

/// Population of `n_p` freshly initialised groups, pre-trained by self-play
/// plus the diversity term (no incompatibility pressure).
pub fn init_population<R: Rng + ?Sized>(
    n_p: usize,
    pretrain_steps: usize,
    objective: &TeammateObjective,
    arena: &Arena,
    rng: &mut R,
) -> Result<Population> {
    if n_p == 0 {
        return Err(Error::InvalidArgument("population size must be >= 1".into()));
    }
    let members = (0..n_p as u64)
        .map(|id| TeammateGroup::new(id, arena, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut pop = Population {
        members,
        generation: 0,
        next_id: n_p as u64,
    };
    if pretrain_steps > 0 {
        let obj = TeammateObjective {
            alpha_incom: 0.0,
            ..*objective
        };
        train_population(&mut pop, None, pretrain_steps, &obj, arena, rng)?;
    }
    Ok(pop)
}

fn log_softmax_rows(q: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = q.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m) / temperature);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Jensen-Shannon divergence of the softmax policies of several groups,
/// averaged over a batch of observations, with its gradient with respect to
/// every group's q-values.
///
/// `per_group_q[i]` holds one row of q-values per observation.
pub fn jsd_diversity(per_group_q: &[ArrayView2<f64>], temperature: f64) -> Result<(f64, Vec<Array2<f64>>)> {
    let n = per_group_q.len();
    if n == 0 {
        return Err(Error::InvalidArgument("jsd needs at least one group".into()));
    }
    let shape = per_group_q[0].dim();
    if per_group_q.iter().any(|q| q.dim() != shape) {
        return Err(Error::InvalidArgument("q batches must share shape".into()));
    }
    if per_group_q.iter().any(|q| q.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("q-values"));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let (rows, actions) = shape;
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let logp: Vec<Array2<f64>> = per_group_q.iter().map(|q| log_softmax_rows(*q, temperature)).collect();
    let nf = n as f64;
    let mut value = 0.0;
    let mut grads = vec![Array2::zeros(shape); n];
    let mut log_mix = vec![0.0; actions];
    let mut g = vec![0.0; actions];
    for r in 0..rows {
        for (a, lm) in log_mix.iter_mut().enumerate() {
            let m = logp.iter().map(|l| l[[r, a]]).fold(f64::NEG_INFINITY, f64::max);
            *lm = m + (logp.iter().map(|l| (l[[r, a]] - m).exp()).sum::<f64>() / nf).ln();
        }
        for (i, l) in logp.iter().enumerate() {
            let mut kl = 0.0;
            let mut mean_g = 0.0;
            for a in 0..actions {
                let p = l[[r, a]].exp();
                g[a] = (l[[r, a]] - log_mix[a]) / nf;
                kl += p * (l[[r, a]] - log_mix[a]);
                mean_g += p * g[a];
            }
            value += kl / nf;
            for a in 0..actions {
                let p = l[[r, a]].exp();
                grads[i][[r, a]] = p * (g[a] - mean_g) / (temperature * rows as f64);
            }
        }
    }
    Ok((value / rows as f64, grads))
}

/// Teammate-slot inputs of every transition in `batch`, one row each.
fn teammate_inputs(batch: &[&Episode], slots: &[usize], dim: usize) -> Array2<f64> {
    let mut flat = Vec::new();
    let mut rows = 0;
    for ep in batch {
        for tr in ep.transitions() {
            for &s in slots {
                flat.extend_from_slice(tr.obs(s));
                rows += 1;
            }
        }
    }
    Array2::from_shape_vec((rows, dim), flat).expect("rows")
}

/// Gradient of the population JSD with respect to member `i`'s parameters,
/// evaluated on `inputs`. Other members are held fixed.
fn jsd_member_grads(members: &[TeammateGroup], i: usize, inputs: Array2<f64>, temperature: f64) -> Result<(f64, NetGrads)> {
    let own = &members[i].tm;
    let others: Vec<Array2<f64>> = members
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, m)| infer_batch(&m.tm.spec, &m.tm.backbone, &m.tm.head, inputs.view()))
        .collect::<Result<_>>()?;
    let (q, cache) = forward_batch(&own.spec, &own.backbone, &own.head, inputs)?;
    let mut views = vec![q.view()];
    views.extend(others.iter().map(|o| o.view()));
    let (value, gq) = jsd_diversity(&views, temperature)?;
    let mut g = own.zero_grads();
    backward_batch(
        &own.spec,
        &own.backbone,
        &own.head,
        &cache,
        gq.into_iter().next().expect("own"),
        Some(&mut g.backbone),
        &mut g.head,
    )?;
    Ok((value, g))
}

/// Train every member for `budget` environment steps (counted over all
/// members' rollouts) under the composite teammate objective. `ego`, when
/// present, supplies the cross-play partner; it is never modified.
pub fn train_population<R: Rng + ?Sized>(
    pop: &mut Population,
    ego: Option<&EgoPolicy>,
    budget: usize,
    objective: &TeammateObjective,
    arena: &Arena,
    rng: &mut R,
) -> Result<usize> {
    if budget == 0 {
        return Err(Error::InvalidArgument("teammate budget must be >= 1 step".into()));
    }
    if pop.is_empty() {
        return Err(Error::InvalidArgument("empty population".into()));
    }
    let ego = ego.filter(|e| !e.heads.is_empty());
    let lc = &arena.learner;
    let ego_slots = arena.ego_slots();
    let tm_slots = arena.teammate_slots();
    let n = pop.members.len();
    for m in &mut pop.members {
        m.sp_buffer = ReplayBuffer::new(lc.buffer_capacity);
        m.xp_buffer = ReplayBuffer::new(lc.buffer_capacity);
        m.invalidate_caches();
    }
    let cross_group = objective.diversity == DiversityKind::CrossPlay && n > 1 && objective.alpha_div > 0.0;
    let (xp_weight, xp_active) = if cross_group {
        (objective.alpha_div, true)
    } else {
        (objective.alpha_incom, ego.is_some())
    };
    let jsd_active = objective.diversity == DiversityKind::Jsd && objective.alpha_div > 0.0 && n > 1;
    let sp_td = lc.td(1.0);
    let xp_td = lc.td(-1.0);
    let mut t = 0usize;
    let mut round = 0usize;
    while t <= budget {
        let eps = ActionMode::EpsGreedy(lc.eps.value(t, budget));
        for i in 0..n {
            if xp_active {
                let ep = if cross_group {
                    let mut j = rng.gen_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    let p = arena.pair(pop.members[j].comp_actor(eps), pop.members[i].tm_actor(eps));
                    arena.rollout(&p, rng)?
                } else {
                    let e = ego.expect("xp_active implies ego");
                    let head = round % e.heads.len();
                    let p = arena.pair(e.head_actor(head, ActionMode::Greedy), pop.members[i].tm_actor(eps));
                    arena.rollout(&p, rng)?
                };
                t += ep.len();
                pop.members[i].xp_buffer.push(ep);
            }
            let m = &pop.members[i];
            let ep = arena.rollout(&arena.pair(m.comp_actor(eps), m.tm_actor(eps)), rng)?;
            t += ep.len();
            pop.members[i].sp_buffer.push(ep);
        }
        for _ in 0..lc.updates_per_round {
            for i in 0..n {
                let (mut g_tm, mut g_comp) = {
                    let m = &pop.members[i];
                    let sp_batch = m.sp_buffer.sample(lc.batch_episodes, rng);
                    let members = [
                        TdMember {
                            net: &m.tm,
                            slots: &tm_slots,
                        },
                        TdMember {
                            net: &m.comp_ego,
                            slots: &ego_slots,
                        },
                    ];
                    let (_, mut g) = td_loss_grads(&members, &sp_batch, &sp_td)?;
                    let g_comp = g.pop().expect("two members");
                    let mut g_tm = g.pop().expect("two members");
                    if xp_active && xp_weight > 0.0 && !m.xp_buffer.is_empty() {
                        let xp_batch = m.xp_buffer.sample(lc.batch_episodes, rng);
                        let xm = [TdMember {
                            net: &m.tm,
                            slots: &tm_slots,
                        }];
                        let (_, gx) = td_loss_grads(&xm, &xp_batch, &xp_td)?;
                        g_tm.add_scaled(&gx[0], xp_weight)?;
                    }
                    if jsd_active {
                        let inputs = teammate_inputs(&sp_batch, &tm_slots, m.tm.spec.input_dim);
                        let (_, gd) = jsd_member_grads(&pop.members, i, inputs, lc.temperature)?;
                        // ascend the divergence
                        g_tm.add_scaled(&gd, -objective.alpha_div)?;
                    }
                    (g_tm, g_comp)
                };
                let m = &mut pop.members[i];
                m.tm.apply_gradients(&mut g_tm, lc.grad_clip, lc.target_update_interval)?;
                m.comp_ego.apply_gradients(&mut g_comp, lc.grad_clip, lc.target_update_interval)?;
                m.invalidate_caches();
            }
        }
        round += 1;
    }
    Ok(t)
}

/// Deep-copy `parent` under fresh ids and train the copies against the
/// frozen `ego` for `t_tm` environment steps.
pub fn mutate<R: Rng + ?Sized>(
    parent: &Population,
    ego: &EgoPolicy,
    t_tm: usize,
    objective: &TeammateObjective,
    arena: &Arena,
    rng: &mut R,
) -> Result<Population> {
    let mut off = parent.offspring(arena);
    train_population(&mut off, Some(ego), t_tm, objective, arena, rng)?;
    Ok(off)
}

/// Indices of the survivors of a pool of `2 n_p` candidates: drop the
/// `floor(n_p/2)` lowest self-play returns, then the `ceil(n_p/2)` highest
/// cross-play returns among the rest. Ties remove the lower id first.
pub fn select_survivors(ids: &[u64], sp: &[f64], xp: &[f64], n_p: usize) -> Result<Vec<usize>> {
    if ids.len() != 2 * n_p || sp.len() != ids.len() || xp.len() != ids.len() {
        return Err(Error::InvalidArgument("selection pool must hold 2 n_p scored candidates".into()));
    }
    if sp.iter().chain(xp).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("selection returns"));
    }
    let mut alive: Vec<usize> = (0..ids.len()).collect();
    alive.sort_by(|&a, &b| sp[a].total_cmp(&sp[b]).then(ids[a].cmp(&ids[b])));
    alive.drain(..n_p / 2);
    alive.sort_by(|&a, &b| xp[b].total_cmp(&xp[a]).then(ids[a].cmp(&ids[b])));
    alive.drain(..n_p.div_ceil(2));
    alive.sort_unstable();
    Ok(alive)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: u64,
    pub sp: (f64, f64),
    pub xp: (f64, f64),
    pub survived: bool,
}

/// Merge parents and offspring and keep `n_p` members by the two-stage rule.
/// Cross-play uses the ego head chosen by meta-testing for each candidate.
pub fn select<R: Rng + ?Sized>(
    parent: &Population,
    offspring: &Population,
    ego: &EgoPolicy,
    n_eval: usize,
    meta_episodes_per_head: usize,
    arena: &Arena,
    rng: &mut R,
) -> Result<(Population, Vec<SelectionRecord>)> {
    let n_p = parent.len();
    if offspring.len() != n_p {
        return Err(Error::DimensionMismatch {
            context: "offspring population",
            expected: n_p,
            got: offspring.len(),
        });
    }
    let pool: Vec<&TeammateGroup> = parent.members.iter().chain(&offspring.members).collect();
    let mut sp = Vec::with_capacity(pool.len());
    let mut xp = Vec::with_capacity(pool.len());
    for m in &pool {
        sp.push(m.self_play_return(arena, n_eval, rng)?);
        let report = meta_select_head(ego, m.tm.view(), meta_episodes_per_head, arena, rng)?;
        let p = arena.pair(ego.head_actor(report.chosen, ActionMode::Greedy), m.tm_actor(ActionMode::Greedy));
        xp.push(arena.evaluate(&p, n_eval, rng)?);
    }
    let ids: Vec<u64> = pool.iter().map(|m| m.id).collect();
    let sp_means: Vec<f64> = sp.iter().map(|s| s.0).collect();
    let xp_means: Vec<f64> = xp.iter().map(|s| s.0).collect();
    let keep = select_survivors(&ids, &sp_means, &xp_means, n_p)?;
    let records = (0..pool.len())
        .map(|k| SelectionRecord {
            id: ids[k],
            sp: sp[k],
            xp: xp[k],
            survived: keep.contains(&k),
        })
        .collect();
    let members = keep
        .iter()
        .map(|&k| {
            let mut m = pool[k].clone();
            m.sp_return_cache = Some(sp[k]);
            m.xp_return_cache = Some(xp[k]);
            m
        })
        .collect();
    Ok((
        Population {
            members,
            generation: offspring.generation,
            next_id: parent.next_id.max(offspring.next_id),
        },
        records,
    ))
}

/// `max_traj |1 - prod_t prod_slots pi_i(a|o) / pi_j(a|o)|` over teammate
/// slots, with softmax policies. A zero probability under `pi_j` yields
/// `f64::INFINITY`.
pub fn dissimilarity(
    tm_i: NetRef<'_>,
    tm_j: NetRef<'_>,
    trajectories: &[&Episode],
    teammate_slots: &[usize],
    temperature: f64,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("dissimilarity needs at least one trajectory".into()));
    }
    let mut d: f64 = 0.0;
    for ep in trajectories {
        let mut ratio = 1.0;
        for tr in ep.transitions() {
            for &s in teammate_slots {
                let a = tr.joint_action()[s];
                let pi = softmax(&tm_i.q_values(tr.obs(s))?, temperature)[a];
                let pj = softmax(&tm_j.q_values(tr.obs(s))?, temperature)[a];
                if pj == 0.0 {
                    return Ok(f64::INFINITY);
                }
                ratio *= pi / pj;
            }
        }
        d = d.max((1.0 - ratio).abs());
    }
    Ok(d)
}
