//! Achievement distillation: next-achievement prediction within episodes,
//! achievement matching across episodes, and the regularized auxiliary
//! phase that optimizes both.

use ndauto::{adam_step, AdamState, Categorical, Graph, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{achievement_repr, observation_batch, AgentNet};
use crate::ot::{solve_partial_ot, threshold_match, CostMatrix, HardMatching, OtConfig};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub beta_policy: f64,
    pub beta_value: f64,
    /// Entropic regularization of the matching transport problem.
    pub alpha: f64,
    /// Policy phases between auxiliary phases.
    pub policy_phases: usize,
    pub aux_epochs: usize,
    /// Contrastive temperature.
    pub temperature: f64,
    pub negatives: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Trajectories are grouped into minibatches of at least this many steps.
    pub minibatch_steps: usize,
    pub ot_max_iters: usize,
    pub ot_tol: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta_policy: 1.0,
            beta_value: 1.0,
            alpha: 0.05,
            policy_phases: 8,
            aux_epochs: 6,
            temperature: 0.1,
            negatives: 1,
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
            minibatch_steps: 1024,
            ot_max_iters: 1000,
            ot_tol: 1e-6,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.alpha,
            self.temperature,
            self.learning_rate,
            self.max_grad_norm,
            self.ot_tol,
        ];
        if positive.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Config(
                "alpha, temperature, learning_rate, max_grad_norm and ot_tol must be positive".into(),
            ));
        }
        if self.beta_policy < 0.0 || self.beta_value < 0.0 {
            return Err(Error::Config("regularizer weights must be nonnegative".into()));
        }
        if self.policy_phases == 0 || self.negatives == 0 || self.minibatch_steps == 0 || self.ot_max_iters == 0 {
            return Err(Error::Config(
                "policy_phases, negatives, minibatch_steps and ot_max_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn ot(&self) -> OtConfig {
        OtConfig {
            alpha: self.alpha,
            max_iters: self.ot_max_iters,
            tol: self.ot_tol,
            ..Default::default()
        }
    }
}

/// Which auxiliary terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxTerms {
    pub prediction: bool,
    pub matching: bool,
    /// Feed achievement representations to the heads and `psi`; otherwise
    /// the memory stays at the zero sentinel.
    pub memory: bool,
}

impl AuxTerms {
    pub const ALL: Self = Self {
        prediction: true,
        matching: true,
        memory: true,
    };
}

/// Position of each step relative to the episode's achievements.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AchievementIndex {
    /// Step `t_i` of each achievement transition, increasing.
    pub steps: Vec<usize>,
    /// Per step, the first achievement at or after it.
    pub next: Vec<Option<usize>>,
    /// Per step, the last achievement strictly before it.
    pub prev: Vec<Option<usize>>,
}

impl AchievementIndex {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Achievement transitions are the steps that paid a reward.
pub fn index_achievements(traj: &Trajectory) -> AchievementIndex {
    let steps = traj.achievement_steps();
    let n = traj.len();
    let mut next = vec![None; n];
    let mut prev = vec![None; n];
    let mut i = 0;
    for t in 0..n {
        while i < steps.len() && steps[i] < t {
            i += 1;
        }
        next[t] = (i < steps.len()).then_some(i);
        prev[t] = i.checked_sub(1);
    }
    AchievementIndex { steps, next, prev }
}

/// Forward pass over a group of trajectories in one graph.
///
/// Rows of `latents` are every observation of every trajectory, in order.
/// Steps and achievements are numbered globally across the group.
pub struct EncodedBatch<'g> {
    pub latents: Var<'g>,
    /// `[achievements, latent]` unit representations (zero rows when
    /// degenerate).
    pub achievements: Var<'g>,
    /// `[steps, latent]` representation of the previous achievement.
    pub memory: Var<'g>,
    /// Latent row of the state before each step.
    pub step_rows: Vec<usize>,
    pub actions: Vec<usize>,
    /// Global step range and achievement range of each trajectory.
    pub spans: Vec<(std::ops::Range<usize>, std::ops::Range<usize>)>,
    pub indices: Vec<AchievementIndex>,
}

impl<'g> EncodedBatch<'g> {
    pub fn num_steps(&self) -> usize {
        self.step_rows.len()
    }

    /// Latents of the states before each step.
    pub fn step_latents(&self) -> Result<Var<'g>> {
        Ok(self.latents.index_rows(&self.step_rows)?)
    }
}

pub fn encode_batch<'g>(
    g: &'g Graph,
    net: &AgentNet,
    params: &ParamStore,
    trajs: &[&Trajectory],
    memory: bool,
) -> Result<EncodedBatch<'g>> {
    let obs = observation_batch(trajs.iter().flat_map(|t| t.observations.iter().map(|o| o.as_slice())));
    let latents = net.encode(g, params, g.constant(obs))?;
    let indices: Vec<AchievementIndex> = trajs.iter().map(|t| index_achievements(t)).collect();
    let (mut before, mut after, mut step_rows, mut actions, mut spans) = (vec![], vec![], vec![], vec![], vec![]);
    let mut prev_global = Vec::new();
    let mut row = 0;
    for (t, idx) in trajs.iter().zip(&indices) {
        let (s0, a0) = (step_rows.len(), before.len());
        step_rows.extend(row..row + t.len());
        actions.extend_from_slice(&t.actions);
        before.extend(idx.steps.iter().map(|&s| row + s));
        after.extend(idx.steps.iter().map(|&s| row + s + 1));
        prev_global.extend(idx.prev.iter().map(|p| p.map(|i| a0 + i)));
        spans.push((s0..step_rows.len(), a0..before.len()));
        row += t.observations.len();
    }
    let h = net.latent_size();
    let achievements = if before.is_empty() {
        g.constant(Tensor::zeros(&[0, h]))
    } else {
        achievement_repr(latents.index_rows(&before)?, latents.index_rows(&after)?)?
    };
    let memory = if memory && !before.is_empty() {
        let mut sel = vec![0.0; step_rows.len() * before.len()];
        for (k, p) in prev_global.iter().enumerate() {
            if let Some(i) = p {
                sel[k * before.len() + i] = 1.0;
            }
        }
        g.constant(Tensor::from_rows(step_rows.len(), before.len(), sel))
            .matmul(achievements)?
    } else {
        g.constant(Tensor::zeros(&[step_rows.len(), h]))
    };
    Ok(EncodedBatch {
        latents,
        achievements,
        memory,
        step_rows,
        actions,
        spans,
        indices,
    })
}

/// `-log(exp(p / tau) / (exp(p / tau) + sum_j exp(n_j / tau)))` averaged
/// over rows; `pos` is `[k, 1]`, `neg` is `[k, negatives]`.
pub fn info_nce<'g>(pos: Var<'g>, neg: Var<'g>, temperature: f64) -> Result<Var<'g>> {
    let logits = pos.concat_cols(neg)?.scale(1.0 / temperature as Real);
    let k = logits.rows();
    Ok(logits.log_softmax().gather_cols(&vec![0; k])?.mean().neg())
}

fn row_is_zero(t: &Tensor, r: usize) -> bool {
    t.row_slice(r).iter().all(|&x| x == 0.0)
}

/// Draws, for every step with a following achievement, one anchor and
/// `negatives` other steps of the same episode. Entries are global indices
/// `(step, achievement, negative steps)`.
pub fn sample_prediction_pairs(
    enc: &EncodedBatch,
    negatives: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, Vec<usize>)> {
    let ach = enc.achievements.value();
    let mut out = Vec::new();
    for ((steps, achs), idx) in enc.spans.iter().zip(&enc.indices) {
        let n = steps.len();
        if n < 2 {
            continue;
        }
        for t in 0..n {
            let Some(u) = idx.next[t] else { continue };
            if row_is_zero(&ach, achs.start + u) {
                continue;
            }
            let negs = (0..negatives)
                .map(|_| {
                    let mut j = rng.gen_range(0..n - 1);
                    if j >= t {
                        j += 1;
                    }
                    steps.start + j
                })
                .collect();
            out.push((steps.start + t, achs.start + u, negs));
        }
    }
    out
}

/// Contrastive next-achievement prediction loss, or `None` without anchors.
pub fn prediction_loss<'g>(
    g: &'g Graph,
    net: &AgentNet,
    params: &ParamStore,
    enc: &EncodedBatch<'g>,
    pairs: &[(usize, usize, Vec<usize>)],
    temperature: f64,
) -> Result<Option<Var<'g>>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let negatives = pairs[0].2.len();
    let mut steps: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    for j in 0..negatives {
        steps.extend(pairs.iter().map(|p| p.2[j]));
    }
    let rows: Vec<usize> = steps.iter().map(|&s| enc.step_rows[s]).collect();
    let actions: Vec<usize> = steps.iter().map(|&s| enc.actions[s]).collect();
    let psi = net.state_action_repr(
        g,
        params,
        enc.latents.index_rows(&rows)?,
        &actions,
        enc.memory.index_rows(&steps)?,
    )?;
    let k = pairs.len();
    let anchors = enc
        .achievements
        .index_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let pos = psi.index_rows(&(0..k).collect::<Vec<_>>())?.row_dot(anchors)?;
    let mut neg = psi.index_rows(&(k..2 * k).collect::<Vec<_>>())?.row_dot(anchors)?;
    for j in 1..negatives {
        let more = psi
            .index_rows(&((j + 1) * k..(j + 2) * k).collect::<Vec<_>>())?
            .row_dot(anchors)?;
        neg = neg.concat_cols(more)?;
    }
    Ok(Some(info_nce(pos, neg, temperature)?))
}

/// Outcome of matching two achievement sequences.
#[derive(Clone, Debug)]
pub struct PairMatch {
    pub source: usize,
    pub target: usize,
    pub matching: HardMatching,
    pub ot_residual: f64,
    pub ot_converged: bool,
}

fn rows_of(t: &Tensor, r: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    r.map(|i| t.row_slice(i).iter().map(|&x| x as f64).collect()).collect()
}

/// Hard matching between the achievements of trajectories `a` and `b` of
/// the batch, from the current representations (no gradient).
pub fn match_trajectories(enc: &EncodedBatch, a: usize, b: usize, ot: &OtConfig) -> PairMatch {
    let ach = enc.achievements.value();
    let (ra, rb) = (
        rows_of(&ach, enc.spans[a].1.clone()),
        rows_of(&ach, enc.spans[b].1.clone()),
    );
    let cost = CostMatrix::cosine_costs(&ra, &rb);
    let sol = solve_partial_ot(&cost, ot);
    PairMatch {
        source: a,
        target: b,
        matching: threshold_match(&sol.plan),
        ot_residual: sol.residual,
        ot_converged: sol.converged,
    }
}

/// Anchor, positive and negatives (global achievement indices) for matched
/// pairs in both directions. Pairs without a usable negative or with a
/// degenerate representation are skipped.
pub fn sample_match_triples(
    enc: &EncodedBatch,
    matches: &[PairMatch],
    negatives: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, Vec<usize>)> {
    let ach = enc.achievements.value();
    let mut out = Vec::new();
    let mut push = |anchor: usize, pos: usize, target: &std::ops::Range<usize>, rng: &mut dyn rand::RngCore| {
        let n = target.len();
        if n < 2 || row_is_zero(&ach, anchor) || row_is_zero(&ach, pos) {
            return;
        }
        let k = pos - target.start;
        let negs = (0..negatives)
            .map(|_| {
                let mut j = rng.gen_range(0..n - 1);
                if j >= k {
                    j += 1;
                }
                target.start + j
            })
            .collect();
        out.push((anchor, pos, negs));
    };
    for m in matches {
        let (sa, sb) = (enc.spans[m.source].1.clone(), enc.spans[m.target].1.clone());
        for &(i, k) in &m.matching.pairs {
            push(sa.start + i, sb.start + k, &sb, rng);
            push(sb.start + k, sa.start + i, &sa, rng);
        }
    }
    out
}

/// Contrastive matching loss over `(anchor, positive, negatives)` triples.
pub fn matching_loss<'g>(
    enc: &EncodedBatch<'g>,
    triples: &[(usize, usize, Vec<usize>)],
    temperature: f64,
) -> Result<Option<Var<'g>>> {
    if triples.is_empty() {
        return Ok(None);
    }
    let a = &enc.achievements;
    let anchors = a.index_rows(&triples.iter().map(|t| t.0).collect::<Vec<_>>())?;
    let pos = a
        .index_rows(&triples.iter().map(|t| t.1).collect::<Vec<_>>())?
        .row_dot(anchors)?;
    let mut neg: Option<Var> = None;
    for j in 0..triples[0].2.len() {
        let n = a
            .index_rows(&triples.iter().map(|t| t.2[j]).collect::<Vec<_>>())?
            .row_dot(anchors)?;
        neg = Some(match neg {
            Some(prev) => prev.concat_cols(n)?,
            None => n,
        });
    }
    Ok(Some(info_nce(pos, neg.expect("at least one negative"), temperature)?))
}

/// Policy log-probabilities and values of the frozen network, per step.
#[derive(Clone, Debug)]
pub struct OldOutputs {
    pub log_probs: Tensor,
    pub values: Tensor,
}

/// Evaluates the snapshot on every step of `trajs`, with memory computed
/// from the snapshot's own representations.
pub fn old_outputs(net: &AgentNet, snapshot: &ParamStore, trajs: &[&Trajectory], memory: bool) -> Result<OldOutputs> {
    let g = Graph::new();
    let enc = encode_batch(&g, net, snapshot, trajs, memory)?;
    let out = net.heads(&g, snapshot, enc.step_latents()?, enc.memory)?;
    Ok(OldOutputs {
        log_probs: out.dist.log_probs().to_tensor(),
        values: out.value.to_tensor(),
    })
}

/// `(mean KL(old || new), mean 0.5 (V - V_old)^2)` over the batch steps.
pub fn regularizers<'g>(
    g: &'g Graph,
    net: &AgentNet,
    params: &ParamStore,
    enc: &EncodedBatch<'g>,
    old: &OldOutputs,
) -> Result<(Var<'g>, Var<'g>)> {
    let out = net.heads(g, params, enc.step_latents()?, enc.memory)?;
    let old_dist = Categorical::new(g.constant(old.log_probs.clone()))?;
    let kl = old_dist.kl_to(&out.dist)?.mean();
    let dv = out
        .value
        .sub(g.constant(old.values.clone()))?
        .square()
        .mean()
        .scale(0.5);
    Ok((kl, dv))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AuxStats {
    pub epochs: usize,
    pub pred_loss: f64,
    pub match_loss: f64,
    pub policy_reg: f64,
    pub value_reg: f64,
    pub optimizer_steps: usize,
    pub matched_pairs: usize,
    pub ot_max_residual: f64,
    pub ot_unconverged: usize,
}

fn minibatches(order: &[usize], sizes: &[usize], target: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut steps = 0;
    for &i in order {
        cur.push(i);
        steps += sizes[i];
        if steps >= target {
            out.push(std::mem::take(&mut cur));
            steps = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }
    fn get(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Optimizes the contrastive objectives plus the output-preserving
/// regularizers over the buffered episodes. The snapshot for the
/// regularizers is the parameter state on entry.
#[allow(clippy::too_many_arguments)]
pub fn auxiliary_phase(
    net: &AgentNet,
    params: &mut ParamStore,
    adam: &mut AdamState,
    buffer: &[Trajectory],
    cfg: &DistillConfig,
    terms: AuxTerms,
    rng: &mut impl Rng,
) -> Result<AuxStats> {
    let mut stats = AuxStats::default();
    let buffer: Vec<&Trajectory> = buffer.iter().filter(|t| !t.is_empty()).collect();
    if buffer.is_empty() || !(terms.prediction || terms.matching) {
        return Ok(stats);
    }
    let snapshot = params.clone();
    let old: Vec<OldOutputs> = buffer
        .iter()
        .map(|t| old_outputs(net, &snapshot, &[t], terms.memory))
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = buffer.iter().map(|t| t.len()).collect();
    let with_achievements: Vec<usize> = (0..buffer.len()).filter(|&i| buffer[i].total_reward() > 0.0).collect();
    let (mut lp, mut lm, mut rp, mut rv) = (
        Mean { sum: 0.0, n: 0 },
        Mean { sum: 0.0, n: 0 },
        Mean { sum: 0.0, n: 0 },
        Mean { sum: 0.0, n: 0 },
    );
    let ot = cfg.ot();
    for _ in 0..cfg.aux_epochs {
        if terms.prediction {
            let mut order: Vec<usize> = (0..buffer.len()).collect();
            order.shuffle(rng);
            for group in minibatches(&order, &sizes, cfg.minibatch_steps) {
                let trajs: Vec<&Trajectory> = group.iter().map(|&i| buffer[i]).collect();
                let g = Graph::new();
                let enc = encode_batch(&g, net, params, &trajs, terms.memory)?;
                let pairs = sample_prediction_pairs(&enc, cfg.negatives, rng);
                let Some(loss) = prediction_loss(&g, net, params, &enc, &pairs, cfg.temperature)? else {
                    continue;
                };
                let old = stack_old(&group, &old)?;
                let (kl, dv) = regularizers(&g, net, params, &enc, &old)?;
                lp.add(loss.item() as f64);
                rp.add(kl.item() as f64);
                rv.add(dv.item() as f64);
                step(&g, params, adam, cfg, loss, kl, dv)?;
                stats.optimizer_steps += 1;
            }
        }
        if terms.matching && with_achievements.len() >= 2 {
            let mut order = with_achievements.clone();
            order.shuffle(rng);
            let pairs: Vec<[usize; 2]> = order.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            let pair_sizes: Vec<usize> = pairs.iter().map(|p| sizes[p[0]] + sizes[p[1]]).collect();
            let pair_order: Vec<usize> = (0..pairs.len()).collect();
            for group in minibatches(&pair_order, &pair_sizes, cfg.minibatch_steps) {
                let members: Vec<usize> = group.iter().flat_map(|&p| pairs[p]).collect();
                let trajs: Vec<&Trajectory> = members.iter().map(|&i| buffer[i]).collect();
                let g = Graph::new();
                let enc = encode_batch(&g, net, params, &trajs, terms.memory)?;
                let matches: Vec<PairMatch> = (0..group.len())
                    .map(|k| match_trajectories(&enc, 2 * k, 2 * k + 1, &ot))
                    .collect();
                for m in &matches {
                    stats.matched_pairs += m.matching.len();
                    stats.ot_max_residual = stats.ot_max_residual.max(m.ot_residual);
                    stats.ot_unconverged += usize::from(!m.ot_converged);
                }
                let triples = sample_match_triples(&enc, &matches, cfg.negatives, rng);
                let Some(loss) = matching_loss(&enc, &triples, cfg.temperature)? else {
                    continue;
                };
                let old = stack_old(&members, &old)?;
                let (kl, dv) = regularizers(&g, net, params, &enc, &old)?;
                lm.add(loss.item() as f64);
                rp.add(kl.item() as f64);
                rv.add(dv.item() as f64);
                step(&g, params, adam, cfg, loss, kl, dv)?;
                stats.optimizer_steps += 1;
            }
        }
        stats.epochs += 1;
    }
    stats.pred_loss = lp.get();
    stats.match_loss = lm.get();
    stats.policy_reg = rp.get();
    stats.value_reg = rv.get();
    Ok(stats)
}

fn stack_old(members: &[usize], old: &[OldOutputs]) -> Result<OldOutputs> {
    let lp = Tensor::stack_rows(members.iter().flat_map(|&i| {
        let t = &old[i].log_probs;
        (0..t.rows()).map(move |r| t.row_slice(r))
    }))?;
    let v = Tensor::stack_rows(members.iter().flat_map(|&i| {
        let t = &old[i].values;
        (0..t.rows()).map(move |r| t.row_slice(r))
    }))?;
    Ok(OldOutputs {
        log_probs: lp,
        values: v,
    })
}

fn step<'g>(
    g: &'g Graph,
    params: &mut ParamStore,
    adam: &mut AdamState,
    cfg: &DistillConfig,
    loss: Var<'g>,
    kl: Var<'g>,
    dv: Var<'g>,
) -> Result<()> {
    let total = loss
        .add(kl.scale(cfg.beta_policy as Real))?
        .add(dv.scale(cfg.beta_value as Real))?;
    if !total.item().is_finite() {
        return Err(Error::NonFinite {
            what: format!(
                "auxiliary loss (contrastive {}, policy reg {}, value reg {})",
                loss.item(),
                kl.item(),
                dv.item()
            ),
        });
    }
    let grads = g.backward(total)?.for_store(params);
    adam_step(params, grads, adam, Some(cfg.max_grad_norm as Real))?;
    Ok(())
}
