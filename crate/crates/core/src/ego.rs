//! The controllable agents: a shared backbone with a growable list of frozen
//! output heads, trained against one teammate group at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{clip_grad_norm, NetSpec, ParamStore};
use crate::error::{Error, Result};
use crate::marl::{td_loss_grads, ActionMode, Actor, Arena, Episode, NetGrads, NetRef, QNet, ReplayBuffer, TdMember};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    /// Group whose training produced (or last refreshed) the head; `None`
    /// for a best response to several partners.
    pub group_id: Option<u64>,
    pub r_new: Option<f64>,
    pub r_best_existing: Option<f64>,
}

/// Diagonal Fisher penalty state accumulated over past groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub fisher_backbone: ParamStore,
    pub fisher_head: ParamStore,
    pub anchor_backbone: ParamStore,
    pub anchor_head: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPolicy {
    pub spec: NetSpec,
    pub backbone: ParamStore,
    pub heads: Vec<ParamStore>,
    /// Backbone copy taken when the matching head was retained.
    pub snapshots: Vec<ParamStore>,
    pub head_meta: Vec<HeadMeta>,
    #[serde(default)]
    pub ewc: Option<EwcState>,
    /// Rehearsal memory, one episode list per past group.
    #[serde(default)]
    pub rehearsal: Vec<Vec<Episode>>,
}

impl EgoPolicy {
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(EgoPolicy {
            backbone: spec.backbone_layout().init(rng),
            spec,
            heads: Vec::new(),
            snapshots: Vec::new(),
            head_meta: Vec::new(),
            ewc: None,
            rehearsal: Vec::new(),
        })
    }

    pub fn head_ref(&self, i: usize) -> NetRef<'_> {
        NetRef {
            spec: &self.spec,
            backbone: &self.backbone,
            head: &self.heads[i],
        }
    }

    pub fn head_actor(&self, i: usize, mode: ActionMode) -> Actor<'_> {
        Actor::Net {
            net: self.head_ref(i),
            mode,
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// sha256 of backbone, every head and every snapshot, in order.
    pub fn param_hashes(&self) -> Vec<String> {
        std::iter::once(&self.backbone)
            .chain(&self.heads)
            .chain(&self.snapshots)
            .map(ParamStore::hash_hex)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ego: EgoPolicy = serde_json::from_str(s)?;
        if ego.heads.len() != ego.snapshots.len() || ego.heads.len() != ego.head_meta.len() {
            return Err(Error::Checkpoint("head, snapshot and metadata counts differ".into()));
        }
        Ok(ego)
    }
}

/// `(1/m) sum_i ||phi - phi_i||_p` and its gradient with respect to `phi`.
/// The gradient of a zero-distance term is taken as zero.
pub fn reg_loss(backbone: &ParamStore, snapshots: &[ParamStore], p: f64) -> Result<(f64, ParamStore)> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("l_p norm needs finite p >= 1, got {p}")));
    }
    let mut grad = ParamStore::zeros(backbone.len());
    if snapshots.is_empty() {
        return Ok((0.0, grad));
    }
    let m = snapshots.len() as f64;
    let mut value = 0.0;
    for snap in snapshots {
        if snap.len() != backbone.len() {
            return Err(Error::DimensionMismatch {
                context: "backbone snapshot",
                expected: backbone.len(),
                got: snap.len(),
            });
        }
        let diff: Vec<f64> = backbone.as_slice().iter().zip(snap.as_slice()).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|d| d.abs().powf(p)).sum::<f64>().powf(1.0 / p);
        value += norm / m;
        if norm > 0.0 {
            let scale = norm.powf(1.0 - p) / m;
            for (g, d) in grad.as_mut_slice().iter_mut().zip(&diff) {
                *g += scale * d.signum() * d.abs().powf(p - 1.0);
            }
        }
    }
    Ok((value, grad))
}

/// Keep the new head iff there is no positive reference return or its
/// relative gain over the best existing head reaches `lambda`.
pub fn expansion_decision(r_new: f64, r_existing: &[f64], lambda: f64) -> bool {
    let Some(best) = r_existing.iter().cloned().reduce(f64::max) else {
        return true;
    };
    if best <= 0.0 {
        return true;
    }
    (r_new - best) / best >= lambda
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEvalReport {
    pub per_head_mean: Vec<f64>,
    pub episodes_per_head: usize,
    pub chosen: usize,
}

/// Round-robin trial episodes for every head against `teammate`, returning
/// the head with the best running mean (ties to the lowest index).
pub fn meta_select_head<R: Rng + ?Sized>(
    ego: &EgoPolicy,
    teammate: NetRef<'_>,
    episodes_per_head: usize,
    arena: &Arena,
    rng: &mut R,
) -> Result<HeadEvalReport> {
    let m = ego.heads.len();
    if m == 0 {
        return Err(Error::InvalidArgument("ego has no heads".into()));
    }
    let mut means = vec![0.0; m];
    let mut counts = vec![0usize; m];
    let tm = Actor::Net {
        net: teammate,
        mode: ActionMode::Greedy,
    };
    if m > 1 {
        for k in 0..m * episodes_per_head {
            let i = k % m;
            let ep = arena.rollout(&arena.pair(ego.head_actor(i, ActionMode::Greedy), tm), rng)?;
            means[i] += (ep.return_undiscounted - means[i]) / (counts[i] + 1) as f64;
            counts[i] += 1;
        }
    }
    Ok(HeadEvalReport {
        chosen: crate::marl::argmax(&means),
        per_head_mean: means,
        episodes_per_head: if m > 1 { episodes_per_head } else { 0 },
    })
}

/// How the ego adapts to each new group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoVariant {
    /// Fresh head per group, backbone regularised towards snapshots,
    /// resilient expansion.
    MultiHead,
    /// One head; every parameter tuned freely.
    Finetune,
    /// One head; backbone regularised towards its previous snapshot.
    SingleHead,
    /// One head with a diagonal Fisher penalty.
    Ewc,
    /// One head with evenly split rehearsal of past groups' episodes.
    Clear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoConfig {
    pub variant: EgoVariant,
    pub alpha_reg: f64,
    pub reg_p: f64,
    pub lambda: f64,
    /// Episodes per head when scoring heads for expansion.
    pub expansion_episodes: usize,
    pub meta_episodes_per_head: usize,
    pub ewc_mu: f64,
    /// Single-episode TD gradients averaged into each Fisher estimate.
    pub ewc_fisher_episodes: usize,
}

impl Default for EgoConfig {
    fn default() -> Self {
        EgoConfig {
            variant: EgoVariant::MultiHead,
            alpha_reg: 10.0,
            reg_p: 2.0,
            lambda: 0.0,
            expansion_episodes: 32,
            meta_episodes_per_head: 4,
            ewc_mu: 1.0,
            ewc_fisher_episodes: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub group_id: u64,
    pub kept: bool,
    pub r_new: f64,
    pub r_existing: Vec<f64>,
    pub steps: usize,
    pub head_count: usize,
}

enum Penalty<'a> {
    None,
    Reg { snapshots: &'a [ParamStore], alpha: f64, p: f64 },
    Ewc { state: &'a EwcState, mu: f64 },
}

struct TrainOutcome {
    steps: usize,
    xp: ReplayBuffer,
}

/// Shared ego training loop. Each round collects a cross-play episode with a
/// uniformly drawn partner and, when `self_play` is set, a self-play episode
/// with a fresh trainable complementary teammate; the ego then takes TD steps
/// over its own slots on both buffers plus the penalty gradient.
#[allow(clippy::too_many_arguments)]
fn train_ego_net<R: Rng + ?Sized>(
    net: &mut QNet,
    partners: &[NetRef<'_>],
    self_play: bool,
    budget: usize,
    penalty: &Penalty<'_>,
    rehearsal: &[Episode],
    arena: &Arena,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if budget == 0 {
        return Err(Error::InvalidArgument("ego budget must be >= 1 step".into()));
    }
    if partners.is_empty() {
        return Err(Error::InvalidArgument("no teammate to train with".into()));
    }
    let lc = &arena.learner;
    let ego_slots = arena.ego_slots();
    let tm_slots = arena.teammate_slots();
    let td = lc.td(1.0);
    let mut xp_buf = ReplayBuffer::new(lc.buffer_capacity);
    let mut sp_buf = ReplayBuffer::new(lc.buffer_capacity);
    let mut comp_tm = if self_play { Some(arena.new_qnet(rng)?) } else { None };
    let mut t = 0;
    while t <= budget {
        let eps = ActionMode::EpsGreedy(lc.eps.value(t, budget));
        let partner = partners[if partners.len() > 1 { rng.gen_range(0..partners.len()) } else { 0 }];
        let ego_actor = Actor::Net { net: net.view(), mode: eps };
        let tm_actor = Actor::Net {
            net: partner,
            mode: ActionMode::Greedy,
        };
        let ep = arena.rollout(&arena.pair(ego_actor, tm_actor), rng)?;
        t += ep.len();
        xp_buf.push(ep);
        if let Some(c) = &comp_tm {
            let p = arena.pair(ego_actor, Actor::Net { net: c.view(), mode: eps });
            let ep = arena.rollout(&p, rng)?;
            t += ep.len();
            sp_buf.push(ep);
        }
        for _ in 0..lc.updates_per_round {
            let mut g = {
                let member = [TdMember {
                    net,
                    slots: &ego_slots,
                }];
                let mut batch = if rehearsal.is_empty() {
                    xp_buf.sample(lc.batch_episodes, rng)
                } else {
                    let half = lc.batch_episodes.div_ceil(2);
                    let mut b = xp_buf.sample(half, rng);
                    let past = rand::seq::index::sample(rng, rehearsal.len(), (lc.batch_episodes - half).min(rehearsal.len()));
                    b.extend(past.iter().map(|i| &rehearsal[i]));
                    b
                };
                let (_, mut gs) = td_loss_grads(&member, &batch, &td)?;
                let mut g = gs.pop().expect("one member");
                if !sp_buf.is_empty() {
                    batch = sp_buf.sample(lc.batch_episodes, rng);
                    let (_, gsp) = td_loss_grads(&member, &batch, &td)?;
                    g.add_scaled(&gsp[0], 1.0)?;
                }
                g
            };
            if let Some(c) = lc.grad_clip {
                clip_grad_norm(&mut [&mut g.backbone, &mut g.head], c);
            }
            add_penalty(net, &mut g, penalty)?;
            net.apply_gradients(&mut g, None, lc.target_update_interval)?;
            if let Some(c) = comp_tm.as_mut() {
                let batch = sp_buf.sample(lc.batch_episodes, rng);
                let member = [TdMember { net: c, slots: &tm_slots }];
                let (_, mut gc) = td_loss_grads(&member, &batch, &td)?;
                c.apply_gradients(&mut gc[0], lc.grad_clip, lc.target_update_interval)?;
            }
        }
    }
    Ok(TrainOutcome { steps: t, xp: xp_buf })
}

fn add_penalty(net: &QNet, g: &mut NetGrads, penalty: &Penalty<'_>) -> Result<()> {
    match *penalty {
        Penalty::None => {}
        Penalty::Reg { snapshots, alpha, p } => {
            if alpha > 0.0 {
                let (_, rg) = reg_loss(&net.backbone, snapshots, p)?;
                g.backbone.add_scaled(&rg, alpha)?;
            }
        }
        Penalty::Ewc { state, mu } => {
            let (gb, gh) = ewc_grad(state, &net.backbone, &net.head, mu)?;
            g.backbone.add_scaled(&gb, 1.0)?;
            g.head.add_scaled(&gh, 1.0)?;
        }
    }
    Ok(())
}

/// `(mu/2) sum_j F_j (theta_j - theta*_j)^2` over backbone and head.
pub fn ewc_penalty(state: &EwcState, backbone: &ParamStore, head: &ParamStore, mu: f64) -> f64 {
    let part = |f: &ParamStore, a: &ParamStore, x: &ParamStore| {
        f.as_slice()
            .iter()
            .zip(a.as_slice())
            .zip(x.as_slice())
            .map(|((f, a), x)| f * (x - a) * (x - a))
            .sum::<f64>()
    };
    0.5 * mu * (part(&state.fisher_backbone, &state.anchor_backbone, backbone) + part(&state.fisher_head, &state.anchor_head, head))
}

fn ewc_grad(state: &EwcState, backbone: &ParamStore, head: &ParamStore, mu: f64) -> Result<(ParamStore, ParamStore)> {
    let part = |f: &ParamStore, a: &ParamStore, x: &ParamStore| -> Result<ParamStore> {
        if f.len() != x.len() || a.len() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "ewc state",
                expected: x.len(),
                got: f.len(),
            });
        }
        Ok(ParamStore::from_vec(
            f.as_slice()
                .iter()
                .zip(a.as_slice())
                .zip(x.as_slice())
                .map(|((f, a), x)| mu * f * (x - a))
                .collect(),
        ))
    };
    Ok((
        part(&state.fisher_backbone, &state.anchor_backbone, backbone)?,
        part(&state.fisher_head, &state.anchor_head, head)?,
    ))
}

/// Mean of squared single-episode TD gradients over up to `n` episodes.
fn fisher_diagonal<R: Rng + ?Sized>(net: &QNet, episodes: &ReplayBuffer, n: usize, arena: &Arena, rng: &mut R) -> Result<NetGrads> {
    let slots = arena.ego_slots();
    let td = arena.learner.td(1.0);
    let mut f = net.zero_grads();
    let picked = episodes.sample(n, rng);
    for ep in &picked {
        let (_, g) = td_loss_grads(&[TdMember { net, slots: &slots }], &[*ep], &td)?;
        for (acc, v) in f.backbone.as_mut_slice().iter_mut().zip(g[0].backbone.as_slice()) {
            *acc += v * v;
        }
        for (acc, v) in f.head.as_mut_slice().iter_mut().zip(g[0].head.as_slice()) {
            *acc += v * v;
        }
    }
    if !picked.is_empty() {
        let s = 1.0 / picked.len() as f64;
        f.backbone.scale(s);
        f.head.scale(s);
    }
    Ok(f)
}

/// Train the ego to cooperate with one new teammate group (held frozen).
pub fn continual_train<R: Rng + ?Sized>(
    ego: &mut EgoPolicy,
    teammate: NetRef<'_>,
    group_id: u64,
    t_ego: usize,
    cfg: &EgoConfig,
    arena: &Arena,
    rng: &mut R,
) -> Result<ContinualReport> {
    if t_ego == 0 {
        return Err(Error::InvalidArgument("ego budget must be >= 1 step".into()));
    }
    let lr = arena.learner.lr;
    let n_eval = cfg.expansion_episodes.max(1);
    let partner = [teammate];
    let tm_actor = Actor::Net {
        net: teammate,
        mode: ActionMode::Greedy,
    };
    if cfg.variant == EgoVariant::MultiHead {
        let head = ego.spec.head_layout().init(rng);
        let mut net = QNet::from_params(ego.spec.clone(), ego.backbone.clone(), head, lr);
        let penalty = Penalty::Reg {
            snapshots: &ego.snapshots,
            alpha: cfg.alpha_reg,
            p: cfg.reg_p,
        };
        let out = train_ego_net(&mut net, &partner, true, t_ego, &penalty, &[], arena, rng)?;
        ego.backbone = net.backbone.clone();
        let ego_new = Actor::Net {
            net: net.view(),
            mode: ActionMode::Greedy,
        };
        let (r_new, _) = arena.evaluate(&arena.pair(ego_new, tm_actor), n_eval, rng)?;
        let r_existing = (0..ego.heads.len())
            .map(|i| {
                let p = arena.pair(ego.head_actor(i, ActionMode::Greedy), tm_actor);
                arena.evaluate(&p, n_eval, rng).map(|r| r.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let kept = expansion_decision(r_new, &r_existing, cfg.lambda);
        if kept {
            ego.heads.push(net.head);
            ego.snapshots.push(ego.backbone.clone());
            ego.head_meta.push(HeadMeta {
                group_id: Some(group_id),
                r_new: Some(r_new),
                r_best_existing: r_existing.iter().cloned().reduce(f64::max),
            });
        }
        return Ok(ContinualReport {
            group_id,
            kept,
            r_new,
            r_existing,
            steps: out.steps,
            head_count: ego.heads.len(),
        });
    }

    let head = match ego.heads.first() {
        Some(h) => h.clone(),
        None => ego.spec.head_layout().init(rng),
    };
    let mut net = QNet::from_params(ego.spec.clone(), ego.backbone.clone(), head, lr);
    let past: Vec<Episode> = if cfg.variant == EgoVariant::Clear {
        ego.rehearsal.iter().flatten().cloned().collect()
    } else {
        Vec::new()
    };
    let out = {
        let penalty = match (cfg.variant, &ego.ewc) {
            (EgoVariant::SingleHead, _) => Penalty::Reg {
                snapshots: &ego.snapshots,
                alpha: cfg.alpha_reg,
                p: cfg.reg_p,
            },
            (EgoVariant::Ewc, Some(state)) => Penalty::Ewc { state, mu: cfg.ewc_mu },
            _ => Penalty::None,
        };
        train_ego_net(&mut net, &partner, true, t_ego, &penalty, &past, arena, rng)?
    };
    finish_single_head(ego, net, out, group_id, cfg, arena, rng, n_eval, tm_actor)
}

#[allow(clippy::too_many_arguments)]
fn finish_single_head<R: Rng + ?Sized>(
    ego: &mut EgoPolicy,
    net: QNet,
    out: TrainOutcome,
    group_id: u64,
    cfg: &EgoConfig,
    arena: &Arena,
    rng: &mut R,
    n_eval: usize,
    tm_actor: Actor<'_>,
) -> Result<ContinualReport> {
    let ego_new = Actor::Net {
        net: net.view(),
        mode: ActionMode::Greedy,
    };
    let (r_new, _) = arena.evaluate(&arena.pair(ego_new, tm_actor), n_eval, rng)?;
    match cfg.variant {
        EgoVariant::Ewc => {
            let f = fisher_diagonal(&net, &out.xp, cfg.ewc_fisher_episodes, arena, rng)?;
            let (fb, fh) = match ego.ewc.take() {
                Some(mut s) => {
                    s.fisher_backbone.add_scaled(&f.backbone, 1.0)?;
                    s.fisher_head.add_scaled(&f.head, 1.0)?;
                    (s.fisher_backbone, s.fisher_head)
                }
                None => (f.backbone, f.head),
            };
            ego.ewc = Some(EwcState {
                fisher_backbone: fb,
                fisher_head: fh,
                anchor_backbone: net.backbone.clone(),
                anchor_head: net.head.clone(),
            });
        }
        EgoVariant::Clear => {
            ego.rehearsal.push(out.xp.iter().cloned().collect());
            let share = arena.learner.buffer_capacity / ego.rehearsal.len();
            for mem in &mut ego.rehearsal {
                if mem.len() > share {
                    mem.drain(..mem.len() - share);
                }
            }
        }
        _ => {}
    }
    ego.backbone = net.backbone;
    ego.heads = vec![net.head];
    ego.snapshots = vec![ego.backbone.clone()];
    ego.head_meta = vec![HeadMeta {
        group_id: Some(group_id),
        r_new: Some(r_new),
        r_best_existing: None,
    }];
    Ok(ContinualReport {
        group_id,
        kept: true,
        r_new,
        r_existing: Vec::new(),
        steps: out.steps,
        head_count: 1,
    })
}

/// Single-head best response to a set of partners drawn uniformly per
/// episode (no self-play data, no penalty).
pub fn train_best_response<R: Rng + ?Sized>(
    ego: &mut EgoPolicy,
    partners: &[NetRef<'_>],
    budget: usize,
    arena: &Arena,
    rng: &mut R,
) -> Result<usize> {
    let head = match ego.heads.first() {
        Some(h) => h.clone(),
        None => ego.spec.head_layout().init(rng),
    };
    let mut net = QNet::from_params(ego.spec.clone(), ego.backbone.clone(), head, arena.learner.lr);
    let out = train_ego_net(&mut net, partners, false, budget, &Penalty::None, &[], arena, rng)?;
    ego.backbone = net.backbone;
    ego.heads = vec![net.head];
    ego.snapshots = vec![ego.backbone.clone()];
    ego.head_meta = vec![HeadMeta {
        group_id: None,
        r_new: None,
        r_best_existing: None,
    }];
    Ok(out.steps)
}
