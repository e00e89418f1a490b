//! Learned footstep planner. A diagonal-Gaussian policy over patch cells
//! reads the simulator's observation vector; its tanh-squashed mean and a
//! state-independent log-std define the action distribution, and log
//! probabilities are taken of the raw (unclamped) sample. Safety masking
//! happens outside the policy: the world remaps unsafe picks to the
//! nearest safe cell, and the policy only feels it through the remap
//! penalty. Training is clipped-surrogate policy optimization with GAE and
//! Adam, all gradients hand-derived.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PolicyConfig, RunConfig};
use crate::error::{Error, Result};
use crate::learner::ClassifierNet;
use crate::mpc::UserCommand;
use crate::sim::{
    observation_dim, run_episode, EpisodeDeps, EpisodeMetrics, EpisodeSetup, FootstepPlanner,
    GaitSchedule, MaskSource, PolicyQuery, QueryOutcome, TerminationCause,
};
use crate::terrain::TerrainKind;

/// Row and column picks for the two swing legs of a trot pair.
pub const ACTION_DIM: usize = 4;

const LN_TAU: f64 = 1.837877066409345;

/// Two tanh trunk layers shared by a squashed-mean action head and a
/// value head, plus a free per-dimension log standard deviation.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub obs_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_mu: Vec<f64>,
    pub b_mu: Vec<f64>,
    pub w_v: Vec<f64>,
    pub b_v: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Activations of one forward pass.
pub struct PolicyForward {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// Squashed action mean in (-1,1)^4.
    pub mean: [f64; ACTION_DIM],
    pub value: f64,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, cfg: &PolicyConfig, seed: u64) -> Self {
        let hidden = cfg.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
        };
        Self {
            obs_dim,
            hidden,
            w1: init(obs_dim, hidden, hidden * obs_dim),
            b1: vec![0.0; hidden],
            w2: init(hidden, hidden, hidden * hidden),
            b2: vec![0.0; hidden],
            w_mu: init(hidden, ACTION_DIM, ACTION_DIM * hidden),
            b_mu: vec![0.0; ACTION_DIM],
            w_v: init(hidden, 1, hidden),
            b_v: vec![0.0; 1],
            log_std: vec![cfg.init_log_std; ACTION_DIM],
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 9] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w_mu, &self.b_mu, &self.w_v, &self.b_v,
            &self.log_std,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.log_std,
        ]
    }

    pub fn forward(&self, obs: &[f64]) -> PolicyForward {
        assert_eq!(obs.len(), self.obs_dim, "observation length");
        let h = self.hidden;
        let mut h1 = vec![0.0; h];
        for u in 0..h {
            let mut acc = self.b1[u];
            let row = &self.w1[u * self.obs_dim..(u + 1) * self.obs_dim];
            for (w, x) in row.iter().zip(obs) {
                acc += w * x;
            }
            h1[u] = acc.tanh();
        }
        let mut h2 = vec![0.0; h];
        for u in 0..h {
            let mut acc = self.b2[u];
            let row = &self.w2[u * h..(u + 1) * h];
            for (w, x) in row.iter().zip(&h1) {
                acc += w * x;
            }
            h2[u] = acc.tanh();
        }
        let mut mean = [0.0; ACTION_DIM];
        for (o, m) in mean.iter_mut().enumerate() {
            let mut acc = self.b_mu[o];
            let row = &self.w_mu[o * h..(o + 1) * h];
            for (w, x) in row.iter().zip(&h2) {
                acc += w * x;
            }
            *m = acc.tanh();
        }
        let mut value = self.b_v[0];
        for (w, x) in self.w_v.iter().zip(&h2) {
            value += w * x;
        }
        PolicyForward {
            h1,
            h2,
            mean,
            value,
        }
    }
}

/// Log density of the raw action under the diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64; ACTION_DIM], log_std: &[f64], a: &[f64; ACTION_DIM]) -> f64 {
    let mut lp = 0.0;
    for i in 0..ACTION_DIM {
        let z = (a[i] - mean[i]) / log_std[i].exp();
        lp += -0.5 * z * z - log_std[i] - 0.5 * LN_TAU;
    }
    lp
}

/// Differential entropy of the diagonal Gaussian (state-independent).
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_TAU + 1.0)).sum()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Saturating tracking reward: 1 at zero error, ~0.5 at 0.2 error, with
/// the normalizer growing alongside the error so large errors still give
/// gradient instead of flatlining at zero.
pub fn tracking_reward(err: f64) -> f64 {
    let s = err / (0.2 * (1.0 + err.abs()));
    (-s * s).exp()
}

/// Per-query reward from its delayed outcome.
pub fn outcome_reward(cfg: &PolicyConfig, naive: bool, out: &QueryOutcome) -> f64 {
    let track: f64 = out.track_err.iter().map(|&e| tracking_reward(e)).sum::<f64>() / 3.0;
    let mut r =
        cfg.w_track * track - cfg.w_reg * out.reg_distance - cfg.w_unsafe * out.remapped as f64;
    if naive {
        // unmasked training only sees safety through these shaping terms
        for a in &out.audits {
            if !a.reach_ok {
                r -= cfg.naive_kf_penalty;
            }
            if !a.clearance_ok {
                r -= cfg.naive_lc_penalty;
            }
            let prox = (1.0 - a.edge_distance / cfg.naive_edge_radius).clamp(0.0, 1.0);
            r -= cfg.naive_edge_penalty * prox;
        }
    }
    r
}

/// One recorded decision.
#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

/// Recorded experience plus episode boundaries (end indices, exclusive).
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub episode_ends: Vec<usize>,
}

/// Generalized advantage estimation per episode, bootstrapping zero past
/// each boundary. Returns (advantages, value targets).
pub fn compute_gae(
    rollout: &Rollout,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rollout.transitions.len();
    let mut adv = vec![0.0; n];
    let mut ret = vec![0.0; n];
    let mut start = 0;
    for &end in &rollout.episode_ends {
        let mut acc = 0.0;
        for t in (start..end).rev() {
            let v_next = if t + 1 < end {
                rollout.transitions[t + 1].value
            } else {
                0.0
            };
            let delta = rollout.transitions[t].reward + gamma * v_next
                - rollout.transitions[t].value;
            acc = delta + gamma * lambda * acc;
            adv[t] = acc;
            ret[t] = acc + rollout.transitions[t].value;
        }
        start = end;
    }
    (adv, ret)
}

/// `FootstepPlanner` adapter around the policy network: splits the 4-dim
/// action across the queried pair, records transitions when collecting,
/// and turns query outcomes into rewards.
pub struct PolicyPlanner {
    pub net: PolicyNet,
    pub cfg: PolicyConfig,
    /// Applies the unmasked shaping penalties.
    pub naive: bool,
    /// Act with the distribution mean instead of sampling.
    pub deterministic: bool,
    /// Record transitions for training.
    pub collect: bool,
    rng: ChaCha8Rng,
    rollout: Rollout,
    by_query: HashMap<u64, usize>,
    episode_start: usize,
}

impl PolicyPlanner {
    pub fn training(net: PolicyNet, cfg: PolicyConfig, naive: bool, seed: u64) -> Self {
        Self {
            net,
            cfg,
            naive,
            deterministic: false,
            collect: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rollout: Rollout::default(),
            by_query: HashMap::new(),
            episode_start: 0,
        }
    }

    pub fn frozen(net: PolicyNet, cfg: PolicyConfig, naive: bool) -> Self {
        Self {
            net,
            cfg,
            naive,
            deterministic: true,
            collect: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            rollout: Rollout::default(),
            by_query: HashMap::new(),
            episode_start: 0,
        }
    }

    /// Hands over the collected experience and starts a fresh buffer.
    pub fn take_rollout(&mut self) -> Rollout {
        self.by_query.clear();
        self.episode_start = 0;
        std::mem::take(&mut self.rollout)
    }
}

impl FootstepPlanner for PolicyPlanner {
    fn plan(&mut self, query: &PolicyQuery) -> Vec<[f64; 2]> {
        let fwd = self.net.forward(&query.observation);
        let mut action = fwd.mean;
        if !self.deterministic {
            for (i, a) in action.iter_mut().enumerate() {
                *a = fwd.mean[i] + self.net.log_std[i].exp() * standard_normal(&mut self.rng);
            }
        }
        if self.collect {
            let log_prob = gaussian_log_prob(&fwd.mean, &self.net.log_std, &action);
            self.by_query.insert(query.id, self.rollout.transitions.len());
            self.rollout.transitions.push(Transition {
                observation: query.observation.clone(),
                action,
                log_prob,
                value: fwd.value,
                reward: 0.0,
            });
        }
        query
            .legs
            .iter()
            .enumerate()
            .map(|(k, _)| {
                if k < 2 {
                    [action[2 * k], action[2 * k + 1]]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect()
    }

    fn observe(&mut self, outcome: &QueryOutcome) {
        if let Some(&idx) = self.by_query.get(&outcome.id) {
            self.rollout.transitions[idx].reward = outcome_reward(&self.cfg, self.naive, outcome);
        }
    }

    fn episode_end(&mut self, metrics: &EpisodeMetrics) {
        if !self.collect {
            return;
        }
        let end = self.rollout.transitions.len();
        if end == self.episode_start {
            return;
        }
        let fell = matches!(
            metrics.cause,
            TerminationCause::RollPitchLimit
                | TerminationCause::TrunkClearance
                | TerminationCause::NumericalFault
        );
        if fell {
            self.rollout.transitions[end - 1].reward += self.cfg.r_terminal;
        }
        self.rollout.episode_ends.push(end);
        self.episode_start = end;
        self.by_query.clear();
    }
}

/// Flattened minibatch for the clipped-surrogate update.
#[derive(Debug, Clone, Default)]
pub struct PpoBatch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn select(&self, idx: &[usize]) -> PpoBatch {
        PpoBatch {
            observations: idx.iter().map(|&i| self.observations[i].clone()).collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl PolicyGrads {
    fn zeros_like(net: &PolicyNet) -> Self {
        Self {
            tensors: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Clipped-surrogate loss on a batch:
/// mean(-min(rho A, clip(rho) A) + value_coeff (V - R)^2) - entropy_coeff H.
pub fn ppo_loss(net: &PolicyNet, batch: &PpoBatch, cfg: &PolicyConfig) -> f64 {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let fwd = net.forward(&batch.observations[i]);
        let lp = gaussian_log_prob(&fwd.mean, &net.log_std, &batch.actions[i]);
        let rho = (lp - batch.old_log_probs[i]).exp();
        let a = batch.advantages[i];
        let clipped = rho.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a;
        let surr = (rho * a).min(clipped);
        let dv = fwd.value - batch.returns[i];
        loss += -surr + cfg.value_coeff * dv * dv;
    }
    loss / n - cfg.entropy_coeff * gaussian_entropy(&net.log_std)
}

/// Loss plus analytic gradients; also reports the fraction of samples on
/// the clipped branch (which receive exactly zero policy gradient).
pub fn ppo_backward(
    net: &PolicyNet,
    batch: &PpoBatch,
    cfg: &PolicyConfig,
) -> (f64, PolicyGrads, f64) {
    let n = batch.len() as f64;
    let h = net.hidden;
    let mut g = PolicyGrads::zeros_like(net);
    let mut loss = 0.0;
    let mut clipped_count = 0.0;
    for i in 0..batch.len() {
        let obs = &batch.observations[i];
        let fwd = net.forward(obs);
        let lp = gaussian_log_prob(&fwd.mean, &net.log_std, &batch.actions[i]);
        let rho = (lp - batch.old_log_probs[i]).exp();
        let a = batch.advantages[i];
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a;
        let on_clip = clipped < unclipped;
        let surr = unclipped.min(clipped);
        if on_clip {
            clipped_count += 1.0;
        }
        let dv = fwd.value - batch.returns[i];
        loss += -surr + cfg.value_coeff * dv * dv;

        // d loss / d log pi; zero when the clipped branch is active
        let g_lp = if on_clip { 0.0 } else { -unclipped / n };
        let mut g_mu = [0.0; ACTION_DIM];
        for k in 0..ACTION_DIM {
            let s = net.log_std[k].exp();
            let z = (batch.actions[i][k] - fwd.mean[k]) / s;
            g_mu[k] = g_lp * z / s;
            g.tensors[8][k] += g_lp * (z * z - 1.0);
        }
        let g_v = 2.0 * cfg.value_coeff * dv / n;

        // heads back into the shared trunk
        let mut g_h2 = vec![0.0; h];
        for k in 0..ACTION_DIM {
            let g_raw = g_mu[k] * (1.0 - fwd.mean[k] * fwd.mean[k]);
            g.tensors[5][k] += g_raw;
            for u in 0..h {
                g.tensors[4][k * h + u] += g_raw * fwd.h2[u];
                g_h2[u] += net.w_mu[k * h + u] * g_raw;
            }
        }
        g.tensors[7][0] += g_v;
        for u in 0..h {
            g.tensors[6][u] += g_v * fwd.h2[u];
            g_h2[u] += net.w_v[u] * g_v;
        }
        let mut g_h1 = vec![0.0; h];
        for u in 0..h {
            let gz = g_h2[u] * (1.0 - fwd.h2[u] * fwd.h2[u]);
            g.tensors[3][u] += gz;
            for x in 0..h {
                g.tensors[2][u * h + x] += gz * fwd.h1[x];
                g_h1[x] += net.w2[u * h + x] * gz;
            }
        }
        for u in 0..h {
            let gz = g_h1[u] * (1.0 - fwd.h1[u] * fwd.h1[u]);
            g.tensors[1][u] += gz;
            for (x, &xv) in obs.iter().enumerate() {
                g.tensors[0][u * net.obs_dim + x] += gz * xv;
            }
        }
    }
    for k in 0..ACTION_DIM {
        g.tensors[8][k] -= cfg.entropy_coeff;
    }
    let loss = loss / n - cfg.entropy_coeff * gaussian_entropy(&net.log_std);
    (loss, g, clipped_count / n)
}

/// Adam with bias correction, one slot per parameter tensor.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &PolicyNet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut PolicyNet, grads: &PolicyGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, tensor) in net.tensors_mut().into_iter().enumerate() {
            for (j, p) in tensor.iter_mut().enumerate() {
                let g = grads.tensors[k][j];
                self.m[k][j] = self.beta1 * self.m[k][j] + (1.0 - self.beta1) * g;
                self.v[k][j] = self.beta2 * self.v[k][j] + (1.0 - self.beta2) * g * g;
                let mh = self.m[k][j] / bc1;
                let vh = self.v[k][j] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub loss: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

/// Runs the configured epochs of minibatched clipped-surrogate updates on
/// one rollout. Advantages are normalized across the batch first.
pub fn ppo_update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    rollout: &Rollout,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<UpdateStats> {
    if rollout.transitions.is_empty() {
        return Err(Error::config("empty rollout"));
    }
    let mut batch = PpoBatch::default();
    let (adv, ret) = compute_gae(rollout, cfg.gamma, cfg.gae_lambda);
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for (t, (a, r)) in rollout.transitions.iter().zip(adv.iter().zip(&ret)) {
        batch.observations.push(t.observation.clone());
        batch.actions.push(t.action);
        batch.old_log_probs.push(t.log_prob);
        batch.advantages.push((a - mean) * scale);
        batch.returns.push(*r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = UpdateStats::default();
    let mut updates = 0.0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.minibatch) {
            let mb = batch.select(chunk);
            let (loss, grads, clip_frac) = ppo_backward(net, &mb, cfg);
            if !loss.is_finite() {
                return Err(Error::numerical("policy loss diverged"));
            }
            opt.step(net, &grads);
            stats.loss += loss;
            stats.clip_fraction += clip_frac;
            updates += 1.0;
        }
    }
    stats.loss /= updates;
    stats.clip_fraction /= updates;
    stats.entropy = gaussian_entropy(&net.log_std);
    Ok(stats)
}

/// Stepped difficulty ladder: advance one level once the recent success
/// rate clears the threshold over a full window.
#[derive(Debug, Clone)]
pub struct Curriculum {
    pub levels: Vec<f64>,
    pub level: usize,
    pub window: usize,
    pub threshold: f64,
    recent: Vec<bool>,
}

impl Curriculum {
    pub fn new(levels: Vec<f64>, window: usize, threshold: f64) -> Self {
        Self {
            levels,
            level: 0,
            window,
            threshold,
            recent: Vec::new(),
        }
    }

    pub fn difficulty(&self) -> f64 {
        self.levels[self.level]
    }

    /// Records an episode outcome; returns true when the ladder advances.
    pub fn record(&mut self, success: bool) -> bool {
        self.recent.push(success);
        if self.recent.len() > self.window {
            self.recent.remove(0);
        }
        if self.recent.len() < self.window || self.level + 1 >= self.levels.len() {
            return false;
        }
        let rate =
            self.recent.iter().filter(|s| **s).count() as f64 / self.recent.len() as f64;
        if rate > self.threshold {
            self.level += 1;
            self.recent.clear();
            return true;
        }
        false
    }
}

/// Knobs of one training run (the optimization hyperparameters live in
/// `PolicyConfig`).
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub footsteps_per_episode: usize,
    pub kinds: Vec<TerrainKind>,
    pub curriculum: Vec<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 40,
            episodes_per_iter: 8,
            footsteps_per_episode: 60,
            kinds: vec![TerrainKind::RandomRough, TerrainKind::Steps],
            curriculum: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterationStats {
    pub iteration: usize,
    pub difficulty: f64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub footsteps: usize,
    /// Audited violation percentages over the iteration's footsteps.
    pub tr_rate: f64,
    pub lc_rate: f64,
    pub kf_rate: f64,
    /// Mean |commanded - realized| body x velocity (m/s).
    pub mean_track_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PolicyTrainReport {
    pub iterations: Vec<IterationStats>,
}

/// On-policy training loop: collect episodes at the current curriculum
/// difficulty, update, repeat. `latent_net` fills the observation's mask
/// latents (the naive variant passes an autoencoder here) and, when the
/// mask source is `Learned`, also provides the mask itself.
pub fn train_policy(
    cfg: &RunConfig,
    latent_net: Option<&ClassifierNet>,
    mask_source: MaskSource,
    naive: bool,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(PolicyNet, PolicyTrainReport)> {
    if schedule.kinds.is_empty() || schedule.curriculum.is_empty() {
        return Err(Error::config("training schedule needs kinds and difficulties"));
    }
    let net = PolicyNet::new(observation_dim(cfg), &cfg.policy, seed);
    let mut planner = PolicyPlanner::training(net, cfg.policy.clone(), naive, seed ^ 0x5eed);
    let mut opt = Adam::new(&planner.net, cfg.policy.learning_rate);
    let mut curriculum = Curriculum::new(schedule.curriculum.clone(), 20, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_11ec);
    let mut report = PolicyTrainReport::default();
    let deps = EpisodeDeps::new(
        cfg,
        GaitSchedule::trot(&cfg.gait),
        mask_source,
        latent_net,
    )?;
    for iteration in 0..schedule.iterations {
        let mut successes = 0.0;
        let mut footsteps = 0;
        let mut tr = 0;
        let mut lc = 0;
        let mut kf = 0;
        let mut err_sum = 0.0;
        let mut err_count = 0usize;
        for _ in 0..schedule.episodes_per_iter {
            let kind = schedule.kinds[rng.gen_range(0..schedule.kinds.len())];
            let command = UserCommand {
                v_body: nalgebra::Vector3::new(
                    rng.gen_range(0.1..0.35),
                    rng.gen_range(-0.08..0.08),
                    0.0,
                ),
                yaw_rate: rng.gen_range(-0.25..0.25),
                height: cfg.robot.stand_height,
            };
            let setup = EpisodeSetup::walk(
                kind,
                curriculum.difficulty(),
                command,
                schedule.footsteps_per_episode,
                rng.gen(),
            );
            let metrics = run_episode(&deps, &setup, &mut planner)?;
            successes += if metrics.success { 1.0 } else { 0.0 };
            curriculum.record(metrics.success);
            footsteps += metrics.footsteps;
            tr += metrics.tr_violations;
            lc += metrics.lc_violations;
            kf += metrics.kf_violations;
            err_sum += metrics.err_vx.iter().sum::<f64>();
            err_count += metrics.err_vx.len();
        }
        let rollout = planner.take_rollout();
        let mean_reward = if rollout.transitions.is_empty() {
            0.0
        } else {
            rollout.transitions.iter().map(|t| t.reward).sum::<f64>()
                / rollout.transitions.len() as f64
        };
        let stats = ppo_update(
            &mut planner.net,
            &mut opt,
            &rollout,
            &cfg.policy,
            seed ^ iteration as u64,
        )?;
        let pct = |v: usize| 100.0 * v as f64 / footsteps.max(1) as f64;
        report.iterations.push(IterationStats {
            iteration,
            difficulty: curriculum.difficulty(),
            mean_reward,
            success_rate: successes / schedule.episodes_per_iter as f64,
            loss: stats.loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            footsteps,
            tr_rate: pct(tr),
            lc_rate: pct(lc),
            kf_rate: pct(kf),
            mean_track_err: err_sum / err_count.max(1) as f64,
        });
    }
    Ok((planner.net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn small_net(seed: u64) -> PolicyNet {
        let cfg = PolicyConfig {
            hidden: 5,
            ..PolicyConfig::default()
        };
        PolicyNet::new(6, &cfg, seed)
    }

    fn random_obs(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn log_prob_normalizes_per_dimension() {
        // each marginal integrates to one, so the joint does too
        let mean = [0.3, -0.2, 0.0, 0.7];
        let log_std: Vec<f64> = vec![-0.7, 0.1, -1.2, 0.0];
        for dim in 0..ACTION_DIM {
            let s = log_std[dim].exp();
            let mut integral = 0.0;
            let steps = 4000;
            let lo = mean[dim] - 8.0 * s;
            let hi = mean[dim] + 8.0 * s;
            let da = (hi - lo) / steps as f64;
            for k in 0..steps {
                let a = lo + (k as f64 + 0.5) * da;
                let z = (a - mean[dim]) / s;
                let lp = -0.5 * z * z - log_std[dim] - 0.5 * LN_TAU;
                integral += lp.exp() * da;
            }
            assert_relative_eq!(integral, 1.0, epsilon = 1e-4);
        }
        // joint log-prob is the sum of the marginals
        let a = [0.1, 0.2, -0.4, 0.9];
        let total = gaussian_log_prob(&mean, &log_std, &a);
        let by_dim: f64 = (0..ACTION_DIM)
            .map(|i| {
                let z = (a[i] - mean[i]) / log_std[i].exp();
                -0.5 * z * z - log_std[i] - 0.5 * LN_TAU
            })
            .sum();
        assert_relative_eq!(total, by_dim, epsilon = 1e-12);
    }

    #[test]
    fn samples_match_distribution_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn tracking_reward_identities() {
        assert_relative_eq!(tracking_reward(0.0), 1.0);
        assert_relative_eq!(tracking_reward(0.2), 0.499352, epsilon = 1e-5);
        assert!(tracking_reward(1.0) > 0.0);
        assert!(tracking_reward(0.1) > tracking_reward(0.3));
    }

    #[test]
    fn gae_matches_hand_computation() {
        let mk = |value, reward| Transition {
            observation: vec![],
            action: [0.0; 4],
            log_prob: 0.0,
            value,
            reward,
        };
        let rollout = Rollout {
            transitions: vec![mk(0.5, 1.0), mk(1.5, 2.0), mk(0.3, 0.7)],
            episode_ends: vec![2, 3],
        };
        let (adv, ret) = compute_gae(&rollout, 0.9, 0.8);
        // episode 1: d1 = 2 - 1.5 = 0.5; d0 = 1 + .9*1.5 - .5 = 1.85
        assert_relative_eq!(adv[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(adv[0], 1.85 + 0.9 * 0.8 * 0.5, epsilon = 1e-12);
        assert_relative_eq!(ret[0], adv[0] + 0.5, epsilon = 1e-12);
        // episode 2 must not leak into episode 1
        assert_relative_eq!(adv[2], 0.7 - 0.3, epsilon = 1e-12);
    }

    fn random_batch(net: &PolicyNet, n: usize, seed: u64) -> PpoBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = PpoBatch::default();
        for _ in 0..n {
            let obs = random_obs(&mut rng, net.obs_dim);
            let fwd = net.forward(&obs);
            let action = std::array::from_fn(|i| {
                fwd.mean[i] + net.log_std[i].exp() * standard_normal(&mut rng)
            });
            // old log-probs near but not equal to current, so ratios vary
            batch
                .old_log_probs
                .push(gaussian_log_prob(&fwd.mean, &net.log_std, &action) + rng.gen_range(-0.2..0.2));
            batch.observations.push(obs);
            batch.actions.push(action);
            batch.advantages.push(rng.gen_range(-1.0..1.0));
            batch.returns.push(rng.gen_range(-1.0..1.0));
        }
        batch
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = small_net(9);
        let batch = random_batch(&net, 6, 10);
        let cfg = PolicyConfig {
            hidden: 5,
            ..PolicyConfig::default()
        };
        let (_, grads, _) = ppo_backward(&net, &batch, &cfg);
        let h = 1e-6;
        for k in 0..9 {
            let len = net.tensors()[k].len();
            let step = (len / 5).max(1);
            for j in (0..len).step_by(step) {
                let orig = net.tensors()[k][j];
                net.tensors_mut()[k][j] = orig + h;
                let up = ppo_loss(&net, &batch, &cfg);
                net.tensors_mut()[k][j] = orig - h;
                let down = ppo_loss(&net, &batch, &cfg);
                net.tensors_mut()[k][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.tensors[k][j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "tensor {k} idx {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn clipped_samples_get_zero_policy_gradient() {
        let net = small_net(3);
        let cfg = PolicyConfig {
            hidden: 5,
            entropy_coeff: 0.0,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = random_obs(&mut rng, net.obs_dim);
        let fwd = net.forward(&obs);
        let action = fwd.mean;
        let lp = gaussian_log_prob(&fwd.mean, &net.log_std, &action);
        // rho = exp(lp - old) = e^1, far above 1 + eps, with positive
        // advantage: the clipped branch is active
        let batch = PpoBatch {
            observations: vec![obs],
            actions: vec![action],
            old_log_probs: vec![lp - 1.0],
            advantages: vec![2.0],
            returns: vec![fwd.value],
        };
        let (_, grads, clip_frac) = ppo_backward(&net, &batch, &cfg);
        assert_relative_eq!(clip_frac, 1.0);
        // mean head, log_std and (through the value residual being zero)
        // every other tensor carry exactly zero gradient
        for (k, t) in grads.tensors.iter().enumerate() {
            for &g in t {
                assert_eq!(g, 0.0, "tensor {k} expected exact zero");
            }
        }
    }

    #[test]
    fn unclipped_ratio_one_recovers_policy_gradient() {
        // with old = new log-prob (rho = 1) the surrogate gradient reduces
        // to -A grad(log pi)
        let net = small_net(5);
        let cfg = PolicyConfig {
            hidden: 5,
            value_coeff: 0.0,
            entropy_coeff: 0.0,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = random_obs(&mut rng, net.obs_dim);
        let fwd = net.forward(&obs);
        let action = [0.2, -0.1, 0.4, 0.0];
        let lp = gaussian_log_prob(&fwd.mean, &net.log_std, &action);
        let batch = PpoBatch {
            observations: vec![obs],
            actions: vec![action],
            old_log_probs: vec![lp],
            advantages: vec![1.5],
            returns: vec![fwd.value],
        };
        let (_, grads, _) = ppo_backward(&net, &batch, &cfg);
        for k in 0..ACTION_DIM {
            let s = net.log_std[k].exp();
            let z = (action[k] - fwd.mean[k]) / s;
            let expected = -1.5 * (z * z - 1.0) - 0.0;
            assert_relative_eq!(grads.tensors[8][k], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_matches_reference_step() {
        let cfg = PolicyConfig {
            hidden: 5,
            ..PolicyConfig::default()
        };
        let mut net = small_net(1);
        let before = net.b_v[0];
        let mut opt = Adam::new(&net, 1e-2);
        let mut grads = PolicyGrads::zeros_like(&net);
        grads.tensors[7][0] = 0.5;
        opt.step(&mut net, &grads);
        // first step: m_hat = g, v_hat = g^2 -> update = lr * sign(g)
        let expected = before - 1e-2 * 0.5 / (0.5 + 1e-8);
        assert_relative_eq!(net.b_v[0], expected, epsilon = 1e-12);
        let _ = cfg;
    }

    #[test]
    fn curriculum_advances_after_window_of_successes() {
        let mut c = Curriculum::new(vec![0.2, 0.5, 1.0], 20, 0.8);
        for k in 0..19 {
            assert!(!c.record(true), "no advance before a full window ({k})");
        }
        assert!(c.record(true));
        assert_relative_eq!(c.difficulty(), 0.5);
        // a failing window keeps the level
        for _ in 0..20 {
            c.record(false);
        }
        assert_relative_eq!(c.difficulty(), 0.5);
        // cannot advance past the last level
        let mut top = Curriculum::new(vec![0.3], 2, 0.5);
        top.record(true);
        assert!(!top.record(true));
        assert_relative_eq!(top.difficulty(), 0.3);
    }

    #[test]
    fn planner_splits_action_across_pair() {
        use crate::safety::{FootholdQuery, HipPose};
        use crate::terrain::Heightmap;
        use nalgebra::DMatrix;

        let cfg = PolicyConfig {
            hidden: 5,
            ..PolicyConfig::default()
        };
        let net = PolicyNet::new(6, &cfg, 11);
        let mut planner = PolicyPlanner::frozen(net, cfg, false);
        let map = Heightmap {
            values: DMatrix::zeros(3, 3),
            center_world: Vector3::zeros(),
            center_cell: (5, 5),
            cell_size: 0.02,
            hip_height: 0.4,
        };
        let mk_leg = |leg| crate::sim::LegQuery {
            leg,
            query: FootholdQuery {
                map: map.clone(),
                phase: 0.0,
                v_body: Vector3::zeros(),
                yaw_rate: 0.0,
                leg,
                hip_pose: HipPose {
                    pos: Vector3::new(0.0, 0.0, 0.4),
                    yaw: 0.0,
                },
            },
            mask: None,
            latent: vec![],
            nominal_cell: (1, 1),
        };
        let query = PolicyQuery {
            id: 0,
            t: 0.0,
            legs: vec![mk_leg(0), mk_leg(3)],
            observation: vec![0.1; 6],
        };
        let acts = planner.plan(&query);
        assert_eq!(acts.len(), 2);
        let again = planner.plan(&query);
        for (a, b) in acts.iter().zip(&again) {
            assert_eq!(a[0].to_bits(), b[0].to_bits(), "frozen planner is deterministic");
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
        let fwd = planner.net.forward(&query.observation);
        assert_eq!(acts[0], [fwd.mean[0], fwd.mean[1]]);
        assert_eq!(acts[1], [fwd.mean[2], fwd.mean[3]]);
        assert!(acts.iter().flatten().all(|a| a.abs() < 1.0));
    }

    #[test]
    fn fall_applies_terminal_penalty_to_last_transition() {
        let cfg = PolicyConfig {
            hidden: 5,
            ..PolicyConfig::default()
        };
        let net = PolicyNet::new(6, &cfg.clone(), 2);
        let mut planner = PolicyPlanner::training(net, cfg.clone(), false, 3);
        planner.rollout.transitions.push(Transition {
            observation: vec![0.0; 6],
            action: [0.0; 4],
            log_prob: 0.0,
            value: 0.0,
            reward: 1.0,
        });
        let metrics = EpisodeMetrics {
            footsteps: 1,
            queries: 1,
            remaps: 0,
            no_safe_cells: 0,
            tr_violations: 0,
            lc_violations: 0,
            kf_violations: 0,
            slips: 0,
            mpc_failures: 0,
            success: false,
            cause: TerminationCause::RollPitchLimit,
            sim_time: 1.0,
            err_vx: vec![],
            err_vy: vec![],
            err_wz: vec![],
            height_err_max: 0.0,
            roll_pitch_max: 0.7,
        };
        planner.episode_end(&metrics);
        assert_relative_eq!(
            planner.rollout.transitions[0].reward,
            1.0 + cfg.r_terminal
        );
        assert_eq!(planner.rollout.episode_ends, vec![1]);
    }

    #[test]
    fn naive_reward_subtracts_shaping_penalties() {
        use crate::sim::CellAudit;
        let cfg = PolicyConfig::default();
        let base = QueryOutcome {
            id: 0,
            t: 0.0,
            track_err: [0.0, 0.0, 0.0],
            reg_distance: 0.0,
            remapped: 0,
            audits: vec![],
            terminal: false,
        };
        let masked = outcome_reward(&cfg, false, &base);
        assert_relative_eq!(masked, cfg.w_track);
        let mut bad = base.clone();
        bad.audits.push(CellAudit {
            leg: 0,
            edge_ok: true,
            clearance_ok: false,
            reach_ok: false,
            edge_distance: 0.0,
        });
        // masked mode ignores audits entirely
        assert_relative_eq!(outcome_reward(&cfg, false, &bad), masked);
        let naive = outcome_reward(&cfg, true, &bad);
        assert_relative_eq!(
            naive,
            masked - cfg.naive_kf_penalty - cfg.naive_lc_penalty - cfg.naive_edge_penalty
        );
        // far from any edge the proximity term vanishes
        bad.audits[0].edge_distance = f64::INFINITY;
        bad.audits[0].clearance_ok = true;
        bad.audits[0].reach_ok = true;
        assert_relative_eq!(outcome_reward(&cfg, true, &bad), masked);
    }

    #[test]
    fn ppo_update_improves_surrogate_on_fixed_batch() {
        let cfg = PolicyConfig {
            hidden: 5,
            epochs: 30,
            minibatch: 8,
            learning_rate: 1e-2,
            entropy_coeff: 0.0,
            ..PolicyConfig::default()
        };
        let mut net = small_net(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut rollout = Rollout::default();
        for _ in 0..8 {
            let obs = random_obs(&mut rng, net.obs_dim);
            let fwd = net.forward(&obs);
            let action = std::array::from_fn(|i| {
                fwd.mean[i] + net.log_std[i].exp() * standard_normal(&mut rng)
            });
            rollout.transitions.push(Transition {
                observation: obs,
                action,
                log_prob: gaussian_log_prob(&fwd.mean, &net.log_std, &action),
                value: fwd.value,
                reward: rng.gen_range(-1.0..1.0),
            });
        }
        rollout.episode_ends.push(8);
        let eval_batch = |net: &PolicyNet| {
            let (adv, ret) = compute_gae(&rollout, cfg.gamma, cfg.gae_lambda);
            let mut b = PpoBatch::default();
            for (t, (a, r)) in rollout.transitions.iter().zip(adv.iter().zip(&ret)) {
                b.observations.push(t.observation.clone());
                b.actions.push(t.action);
                b.old_log_probs.push(t.log_prob);
                b.advantages.push(*a);
                b.returns.push(*r);
            }
            ppo_loss(net, &b, &cfg)
        };
        let before = eval_batch(&net);
        let mut opt = Adam::new(&net, cfg.learning_rate);
        ppo_update(&mut net, &mut opt, &rollout, &cfg, 5).unwrap();
        let after = eval_batch(&net);
        assert!(after < before, "loss should drop: {before} -> {after}");
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let mut cfg = RunConfig::default();
        cfg.terrain.width = 700;
        cfg.terrain.depth = 150;
        cfg.policy.hidden = 16;
        let schedule = TrainSchedule {
            iterations: 2,
            episodes_per_iter: 2,
            footsteps_per_episode: 6,
            kinds: vec![TerrainKind::Flat],
            curriculum: vec![0.0],
        };
        let run = || {
            let (net, report) =
                train_policy(&cfg, None, MaskSource::Oracle, false, &schedule, 77).unwrap();
            (net, report)
        };
        let (net_a, report_a) = run();
        let (net_b, _) = run();
        assert_eq!(report_a.iterations.len(), 2);
        assert!(report_a.iterations.iter().all(|s| s.loss.is_finite()));
        for (ta, tb) in net_a.tensors().iter().zip(net_b.tensors().iter()) {
            let same = ta.iter().zip(tb.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "training must be reproducible");
        }
    }
}
