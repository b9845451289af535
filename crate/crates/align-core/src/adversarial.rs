//! Adversarial divergence minimization: tabular discriminators and critics,
//! reverse-KL / Jensen-Shannon / f-divergence policy objectives, and the
//! alternating minimax training loop.
//!
//! Expectations under the policy are computed exactly by enumerating the
//! prefix tree (the default), so policy gradients are oracle-grade: the
//! score-function identity is applied analytically per logit with the value
//! baseline, including the normalization term for state-action occupancy
//! expectations. A sampled estimator mode exists for scale studies.
//!
//! Occupancy measures and trajectory distributions are normalized to
//! probability distributions before any adversarial quantity is computed,
//! which is what makes the closed-form discriminator and divergence
//! identities hold exactly.
//!
//! The training loop is sequential and deterministic; per-key gradient
//! accumulation within a step is parallelized with deterministic reduction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::fdiv::FDivFamily;
use crate::mdp::{enumerate_trajectories, PromptDist, Trajectory};
use crate::objectives::{GradTable, LossReport};
use crate::occupancy::{
    divergence, empirical_occupancy, empirical_traj_dist, exact_occupancy, normalize,
    trajectory_distribution, DivergenceKind, Table,
};
use crate::policy::{softmax, TabularPolicy};

/// Absolute bound on discriminator logits. Keeps log D and log(1-D) finite
/// without moving optima at test tolerances.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Chunk size for parallel accumulation; fixed so reductions are
/// order-stable across execution modes.
const GRAD_CHUNK: usize = 64;

/// Whether tables and keys live at state-action or whole-trajectory level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    StateAction,
    Trajectory,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::StateAction => write!(f, "state_action"),
            Granularity::Trajectory => write!(f, "trajectory"),
        }
    }
}

/// Tabular discriminator: one logit per key, output sigmoid(logit).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    granularity: Granularity,
    logits: Table,
}

impl Discriminator {
    /// Logit-zero (output 0.5) discriminator over the given keys.
    pub fn zeros_over<I: IntoIterator<Item = String>>(granularity: Granularity, keys: I) -> Self {
        let logits = keys.into_iter().map(|k| (k, 0.0)).collect();
        Discriminator { granularity, logits }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn set_logit(&mut self, key: &str, logit: f64) {
        self.logits.insert(key.to_string(), logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
    }

    pub fn ensure_keys<'a, I: IntoIterator<Item = &'a String>>(&mut self, keys: I) {
        for key in keys {
            self.logits.entry(key.clone()).or_insert(0.0);
        }
    }

    pub fn logit(&self, key: &str) -> Result<f64> {
        self.logits
            .get(key)
            .copied()
            .ok_or_else(|| Error::key(format!("discriminator has no key {key:?}")))
    }

    /// D(key) = sigmoid(logit), always strictly inside (0, 1).
    pub fn output(&self, key: &str) -> Result<f64> {
        Ok(sigmoid(self.logit(key)?))
    }

    /// Largest |D - D'| over the union of the two key sets (missing keys
    /// read as logit 0).
    pub fn sup_norm_gap(&self, other: &Discriminator) -> f64 {
        let mut keys: Vec<&String> = self.logits.keys().chain(other.logits.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                let a = sigmoid(self.logits.get(k).copied().unwrap_or(0.0));
                let b = sigmoid(other.logits.get(k).copied().unwrap_or(0.0));
                (a - b).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Text serialization in the same shape as policies.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# tabular discriminator v1\n");
        out.push_str(&format!("granularity = {}\n", self.granularity));
        for (key, logit) in &self.logits {
            out.push_str(&format!("{key}\t{logit:.16e}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().unwrap_or_default().trim() != "# tabular discriminator v1" {
            return Err(Error::domain("not a discriminator file"));
        }
        let mut granularity = None;
        let mut logits = Table::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once(" = ") {
                if k.trim() == "granularity" {
                    granularity = Some(match v.trim() {
                        "state_action" => Granularity::StateAction,
                        "trajectory" => Granularity::Trajectory,
                        other => return Err(Error::domain(format!("bad granularity {other:?}"))),
                    });
                }
            } else if let Some((key, val)) = line.split_once('\t') {
                let logit =
                    val.parse::<f64>().map_err(|_| Error::domain("bad logit value"))?;
                logits.insert(key.to_string(), logit);
            }
        }
        Ok(Discriminator {
            granularity: granularity.ok_or_else(|| Error::domain("missing granularity"))?,
            logits,
        })
    }
}

/// Tabular critic for the f-divergence variational bound: one value per key,
/// clamped into the conjugate domain of its family.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    granularity: Granularity,
    family: FDivFamily,
    values: Table,
}

impl Critic {
    /// Critic initialized at f'(1), the optimal value at density ratio one;
    /// always interior to the conjugate domain.
    pub fn uniform_over<I: IntoIterator<Item = String>>(
        granularity: Granularity,
        family: FDivFamily,
        keys: I,
    ) -> Result<Self> {
        let init = family.f_prime(1.0)?;
        let values = keys.into_iter().map(|k| (k, init)).collect();
        Ok(Critic { granularity, family, values })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn family(&self) -> FDivFamily {
        self.family
    }

    pub fn values(&self) -> &Table {
        &self.values
    }

    pub fn set_value(&mut self, key: &str, value: f64) {
        self.values.insert(key.to_string(), self.family.clamp_to_domain(value));
    }

    pub fn ensure_keys<'a, I: IntoIterator<Item = &'a String>>(&mut self, keys: I) -> Result<()> {
        let init = self.family.f_prime(1.0)?;
        for key in keys {
            self.values.entry(key.clone()).or_insert(init);
        }
        Ok(())
    }

    /// Value at `key`, clamped into the conjugate domain. The boolean says
    /// whether clamping changed it.
    pub fn value_clamped(&self, key: &str) -> Result<(f64, bool)> {
        let raw = self
            .values
            .get(key)
            .copied()
            .ok_or_else(|| Error::key(format!("critic has no key {key:?}")))?;
        let clamped = self.family.clamp_to_domain(raw);
        Ok((clamped, clamped != raw))
    }
}

/// Closed-form optimal discriminator `D*(key) = e / (e + p)` from two mass
/// tables over the same key space (union, zeros filled in). Keys where both
/// masses vanish are omitted.
pub fn optimal_discriminator(
    rho_exp: &Table,
    rho_pi: &Table,
    granularity: Granularity,
) -> Discriminator {
    let e_hat = normalize(rho_exp);
    let p_hat = normalize(rho_pi);
    let mut disc = Discriminator::zeros_over(granularity, std::iter::empty());
    let mut keys: Vec<&String> = e_hat.keys().chain(p_hat.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let e = e_hat.get(key).copied().unwrap_or(0.0);
        let p = p_hat.get(key).copied().unwrap_or(0.0);
        if e == 0.0 && p == 0.0 {
            continue;
        }
        let logit = if e == 0.0 {
            -LOGIT_CLAMP
        } else if p == 0.0 {
            LOGIT_CLAMP
        } else {
            (e / p).ln()
        };
        disc.set_logit(key, logit);
    }
    disc
}

/// Closed-form optimal critic `T*(key) = f'(e / p)` for the variational
/// f-divergence bound.
pub fn optimal_critic(
    rho_exp: &Table,
    rho_pi: &Table,
    granularity: Granularity,
    family: FDivFamily,
) -> Result<Critic> {
    let e_hat = normalize(rho_exp);
    let p_hat = normalize(rho_pi);
    let mut critic = Critic::uniform_over(granularity, family, std::iter::empty())?;
    for (key, &p) in &p_hat {
        if p == 0.0 {
            continue;
        }
        let e = e_hat.get(key).copied().unwrap_or(0.0);
        if e == 0.0 {
            // Ratio 0: push toward the lower end of the domain.
            let t = family.f_prime(1e-12)?;
            critic.set_value(key, t);
        } else {
            critic.set_value(key, family.f_prime(e / p)?);
        }
    }
    Ok(critic)
}

/// Loss report for adversaries whose parameters are one scalar per key.
#[derive(Debug, Clone)]
pub struct AdvLossReport {
    pub value: f64,
    pub gradient: Table,
    pub clamp_warnings: usize,
}

/// Binary-classification loss of a discriminator against normalized expert
/// and policy tables: the negative of
/// `E_exp[log D] + E_pi[log(1 - D)]`, so minimizing it trains D.
pub fn discriminator_loss(
    disc: &Discriminator,
    d_exp: &Table,
    d_pi: &Table,
) -> Result<AdvLossReport> {
    let mut value = 0.0;
    let mut gradient = Table::new();
    let mut keys: Vec<&String> = d_exp.keys().chain(d_pi.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let e = d_exp.get(key).copied().unwrap_or(0.0);
        let p = d_pi.get(key).copied().unwrap_or(0.0);
        if e == 0.0 && p == 0.0 {
            continue;
        }
        let logit = self_logit(disc, key, e, p)?;
        let d = sigmoid(logit);
        value -= e * log_sigmoid(logit) + p * log_sigmoid(-logit);
        gradient.insert(key.clone(), p * d - e * (1.0 - d));
    }
    Ok(AdvLossReport { value, gradient, clamp_warnings: 0 })
}

fn self_logit(disc: &Discriminator, key: &str, e: f64, p: f64) -> Result<f64> {
    disc.logits.get(key).copied().ok_or_else(|| {
        Error::SupportMismatch(format!(
            "discriminator missing key {key:?} carrying mass (exp {e}, pi {p})"
        ))
    })
}

/// Critic loss for the f-divergence variational bound: the negative of
/// `E_exp[T] - E_pi[f*(T)]`. Out-of-domain critic values are clamped and
/// counted in the report.
pub fn fgan_critic_loss(critic: &Critic, d_exp: &Table, d_pi: &Table) -> Result<AdvLossReport> {
    let family = critic.family;
    let mut value = 0.0;
    let mut gradient = Table::new();
    let mut clamp_warnings = 0;
    let mut keys: Vec<&String> = d_exp.keys().chain(d_pi.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let e = d_exp.get(key).copied().unwrap_or(0.0);
        let p = d_pi.get(key).copied().unwrap_or(0.0);
        if e == 0.0 && p == 0.0 {
            continue;
        }
        let (t, was_clamped) = critic.value_clamped(key)?;
        if was_clamped {
            clamp_warnings += 1;
        }
        value -= e * t - p * family.conjugate(t)?;
        gradient.insert(key.clone(), p * family.conjugate_prime(t)? - e);
    }
    Ok(AdvLossReport { value, gradient, clamp_warnings })
}

/// A trajectory with its weight and per-step context bookkeeping.
struct WeightedPath {
    traj: Trajectory,
    weight: f64,
    steps: Vec<PathStep>,
}

struct PathStep {
    ctx_key: String,
    action_idx: usize,
    sa_key: String,
}

fn build_path(policy: &TabularPolicy, traj: Trajectory, weight: f64) -> Result<WeightedPath> {
    let capacity = policy.capacity();
    let mut steps = Vec::with_capacity(traj.response().len());
    for (state, action) in traj.steps(capacity) {
        steps.push(PathStep {
            ctx_key: policy.context_key(&state),
            action_idx: policy.vocab().action_index(action)?,
            sa_key: crate::mdp::keys::sa_key(state.prompt(), state.generated(), action),
        });
    }
    Ok(WeightedPath { traj, weight, steps })
}

/// Exact path set: every reachable trajectory weighted by its joint
/// probability under the policy and prompt distribution.
fn exact_paths(
    policy: &TabularPolicy,
    prompt_dist: &PromptDist,
    budget: usize,
) -> Result<Vec<WeightedPath>> {
    let mut paths = Vec::new();
    for (prompt, px) in prompt_dist.iter() {
        let trajs = enumerate_trajectories(policy.vocab(), prompt, policy.capacity(), budget)?;
        let weights: Vec<Result<f64>> =
            exec::ordered_map(&trajs, |t| Ok(px * policy.log_prob_trajectory(t)?.exp()));
        for (traj, w) in trajs.into_iter().zip(weights) {
            paths.push(build_path(policy, traj, w?)?);
        }
    }
    Ok(paths)
}

/// Monte Carlo path set: `n` sampled trajectories, each weighted 1/n.
fn sampled_paths(
    policy: &TabularPolicy,
    prompt_dist: &PromptDist,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WeightedPath>> {
    use rand::Rng;
    let mut paths = Vec::with_capacity(n);
    let w = 1.0 / n as f64;
    for _ in 0..n {
        let u: f64 = rng.gen();
        let prompt = &prompt_dist.prompts()[prompt_dist.sample_index(u)];
        let traj = policy.sample_response_with(prompt, rng)?;
        paths.push(build_path(policy, traj, w)?);
    }
    Ok(paths)
}

/// Normalized-expectation machinery shared by every policy-side objective.
///
/// Computes `V = sum_tau w G(tau) / sum_tau w L(tau)` and its exact gradient
/// `sum_tau w (G - V L) grad log P(tau) / sum_tau w L`, where per-path
/// scores G and length weights L come from `score`. With `L = 1` this is a
/// plain expectation with the variance-reducing value baseline.
fn expectation_with_grad(
    policy: &TabularPolicy,
    paths: &[WeightedPath],
    score: &(dyn Fn(&WeightedPath) -> Result<(f64, f64)> + Sync),
) -> Result<(f64, GradTable)> {
    let scored: Vec<Result<(f64, f64)>> = exec::ordered_map(paths, |p| score(p));
    let mut numerator = 0.0;
    let mut mass = 0.0;
    let mut scores = Vec::with_capacity(paths.len());
    for (path, gl) in paths.iter().zip(scored) {
        let (g, l) = gl?;
        numerator += path.weight * g;
        mass += path.weight * l;
        scores.push((g, l));
    }
    if mass == 0.0 {
        return Err(Error::domain("zero total mass in expectation"));
    }
    let value = numerator / mass;

    let indexed: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &(g, l))| (i, paths[i].weight * (g - value * l) / mass))
        .collect();
    let partials = exec::ordered_chunk_map(&indexed, GRAD_CHUNK, |chunk| {
        let mut grad: GradTable = BTreeMap::new();
        for &(i, coeff) in chunk {
            for step in &paths[i].steps {
                let logits = policy
                    .logits()
                    .get(&step.ctx_key)
                    .ok_or_else(|| Error::key(format!("no logits for {:?}", step.ctx_key)))?;
                let probs = softmax(logits);
                let entry =
                    grad.entry(step.ctx_key.clone()).or_insert_with(|| vec![0.0; logits.len()]);
                for (j, g) in entry.iter_mut().enumerate() {
                    let indicator = if j == step.action_idx { 1.0 } else { 0.0 };
                    *g += coeff * (indicator - probs[j]);
                }
            }
        }
        Ok::<GradTable, Error>(grad)
    });
    let mut grad: GradTable = BTreeMap::new();
    for partial in partials {
        for (key, values) in partial? {
            match grad.get_mut(&key) {
                Some(entry) => {
                    for (a, b) in entry.iter_mut().zip(values) {
                        *a += b;
                    }
                }
                None => {
                    grad.insert(key, values);
                }
            }
        }
    }
    Ok((value, grad))
}

fn gamma_weights(path: &WeightedPath, gamma: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
    path.steps.iter().enumerate().map(move |(k, _)| (k, gamma.powi(k as i32)))
}

/// Reverse-KL surrogate: the policy-expectation of
/// `log(1 - D) - log D`, which at the optimal discriminator equals
/// `KL(rho_pi_hat || rho_exp_hat)` (state-action) or
/// `KL(d_pi || d_exp)` (trajectory). Gradient is exact via enumeration.
pub fn policy_rkl_loss(
    policy: &TabularPolicy,
    disc: &Discriminator,
    granularity: Granularity,
    prompt_dist: &PromptDist,
    gamma: f64,
    budget: usize,
) -> Result<LossReport> {
    let paths = exact_paths(policy, prompt_dist, budget)?;
    policy_rkl_loss_on(policy, disc, granularity, gamma, &paths)
}

fn policy_rkl_loss_on(
    policy: &TabularPolicy,
    disc: &Discriminator,
    granularity: Granularity,
    gamma: f64,
    paths: &[WeightedPath],
) -> Result<LossReport> {
    let g = |key: &str| -> Result<f64> {
        let logit = disc.logit(key)?;
        Ok(log_sigmoid(-logit) - log_sigmoid(logit))
    };
    let score = move |path: &WeightedPath| -> Result<(f64, f64)> {
        match granularity {
            Granularity::Trajectory => Ok((g(&path.traj.key())?, 1.0)),
            Granularity::StateAction => {
                let mut total = 0.0;
                let mut length = 0.0;
                for (k, w) in gamma_weights(path, gamma) {
                    total += w * g(&path.steps[k].sa_key)?;
                    length += w;
                }
                Ok((total, length))
            }
        }
    };
    let (value, gradient) = expectation_with_grad(policy, paths, &score)?;
    Ok(LossReport::new(value, gradient))
}

/// The Jensen-Shannon saddle objective
/// `E_exp[log D] + E_pi[log(1 - D)]` as a policy loss: the first term is
/// constant in the policy, the second carries the exact gradient.
pub fn policy_js_loss(
    policy: &TabularPolicy,
    disc: &Discriminator,
    granularity: Granularity,
    expert_target: &Table,
    prompt_dist: &PromptDist,
    gamma: f64,
    budget: usize,
) -> Result<LossReport> {
    let paths = exact_paths(policy, prompt_dist, budget)?;
    policy_js_loss_on(policy, disc, granularity, expert_target, gamma, &paths)
}

fn policy_js_loss_on(
    policy: &TabularPolicy,
    disc: &Discriminator,
    granularity: Granularity,
    expert_target: &Table,
    gamma: f64,
    paths: &[WeightedPath],
) -> Result<LossReport> {
    let mut constant = 0.0;
    for (key, &e) in expert_target {
        if e > 0.0 {
            constant += e * log_sigmoid(disc.logit(key)?);
        }
    }
    let g = |key: &str| -> Result<f64> { Ok(log_sigmoid(-disc.logit(key)?)) };
    let score = move |path: &WeightedPath| -> Result<(f64, f64)> {
        match granularity {
            Granularity::Trajectory => Ok((g(&path.traj.key())?, 1.0)),
            Granularity::StateAction => {
                let mut total = 0.0;
                let mut length = 0.0;
                for (k, w) in gamma_weights(path, gamma) {
                    total += w * g(&path.steps[k].sa_key)?;
                    length += w;
                }
                Ok((total, length))
            }
        }
    };
    let (value, gradient) = expectation_with_grad(policy, paths, &score)?;
    Ok(LossReport::new(constant + value, gradient))
}

/// Value of the minimax objective at the given (policy, discriminator):
/// `E_exp[log D] + E_pi[log(1 - D)]`. Maximized over D it equals
/// `2 JS - ln 4`.
pub fn js_minimax_value(
    policy: &TabularPolicy,
    disc: &Discriminator,
    granularity: Granularity,
    expert_target: &Table,
    prompt_dist: &PromptDist,
    gamma: f64,
    budget: usize,
) -> Result<f64> {
    Ok(policy_js_loss(policy, disc, granularity, expert_target, prompt_dist, gamma, budget)?.value)
}

/// The f-divergence policy objective: the negative of
/// `E_tau[ sum_t f*(T(s_t, a_t)) ]` (state-action) or
/// `E_tau[ f*(T(x, y)) ]` (trajectory), with exact gradient.
pub fn fgan_policy_loss(
    policy: &TabularPolicy,
    critic: &Critic,
    prompt_dist: &PromptDist,
    budget: usize,
) -> Result<LossReport> {
    let paths = exact_paths(policy, prompt_dist, budget)?;
    fgan_policy_loss_on(policy, critic, &paths)
}

fn fgan_policy_loss_on(
    policy: &TabularPolicy,
    critic: &Critic,
    paths: &[WeightedPath],
) -> Result<LossReport> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let clamps = AtomicUsize::new(0);
    let family = critic.family;
    let conj = |key: &str| -> Result<f64> {
        let (t, was_clamped) = critic.value_clamped(key)?;
        if was_clamped {
            clamps.fetch_add(1, Ordering::Relaxed);
        }
        family.conjugate(t)
    };
    let score = |path: &WeightedPath| -> Result<(f64, f64)> {
        let g = match critic.granularity {
            Granularity::Trajectory => conj(&path.traj.key())?,
            Granularity::StateAction => {
                let mut total = 0.0;
                for step in &path.steps {
                    total += conj(&step.sa_key)?;
                }
                total
            }
        };
        Ok((-g, 1.0))
    };
    let (value, gradient) = expectation_with_grad(policy, paths, &score)?;
    let mut report = LossReport::new(value, gradient);
    report.clamp_warnings = clamps.load(Ordering::Relaxed);
    Ok(report)
}

/// Which saddle objective drives the adversary and the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdversarialObjective {
    ReverseKl,
    JensenShannon,
    FGan(FDivFamily),
}

/// How policy expectations are estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Full enumeration (oracle gradients).
    Exact,
    /// Monte Carlo with `n` rollouts per evaluation.
    Sampled { n: usize },
}

/// Alternating minimax schedule. Defaults follow the convention of keeping
/// the adversary near-optimal: 50 adversary steps per policy step.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub rounds: usize,
    pub disc_steps: usize,
    pub policy_steps: usize,
    pub disc_step_size: f64,
    pub policy_step_size: f64,
    /// Adam for the adversary (plain gradient steps when false).
    pub disc_adam: bool,
    pub estimator: Estimator,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            rounds: 100,
            disc_steps: 50,
            policy_steps: 1,
            disc_step_size: 1.0,
            policy_step_size: 0.5,
            disc_adam: false,
            estimator: Estimator::Exact,
            seed: 0,
        }
    }
}

impl Schedule {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::domain("rounds must be positive"));
        }
        if self.disc_step_size <= 0.0 || self.policy_step_size <= 0.0 {
            return Err(Error::domain("step sizes must be positive"));
        }
        Ok(())
    }
}

/// Inputs that stay fixed across the whole alternating run.
pub struct AdversarialSetup<'a> {
    pub prompt_dist: &'a PromptDist,
    pub granularity: Granularity,
    pub objective: AdversarialObjective,
    /// Normalized expert table at the chosen granularity (the target the
    /// adversary discriminates against).
    pub expert_target: &'a Table,
    /// Exact expert joint trajectory distribution, for metric rows.
    pub metrics_expert: &'a Table,
    pub gamma: f64,
    pub budget: usize,
}

/// One row of training history.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub policy_loss: f64,
    pub adversary_loss: f64,
    pub fkl: f64,
    pub rkl: f64,
    pub js: f64,
}

/// Full history plus the final adversary.
pub struct TrainingHistory {
    pub rounds: Vec<RoundRecord>,
    pub discriminator: Option<Discriminator>,
    pub critic: Option<Critic>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,policy_loss,adversary_loss,fkl,rkl,js\n");
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.round, r.policy_loss, r.adversary_loss, r.fkl, r.rkl, r.js
            ));
        }
        out
    }
}

struct AdamState {
    m: Table,
    v: Table,
    t: i32,
}

impl AdamState {
    fn new() -> Self {
        AdamState { m: Table::new(), v: Table::new(), t: 0 }
    }

    fn step(&mut self, grad: &Table, lr: f64) -> Table {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let mut deltas = Table::new();
        for (key, &g) in grad {
            let m = self.m.entry(key.clone()).or_insert(0.0);
            let v = self.v.entry(key.clone()).or_insert(0.0);
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let m_hat = *m / (1.0 - B1.powi(self.t));
            let v_hat = *v / (1.0 - B2.powi(self.t));
            deltas.insert(key.clone(), -lr * m_hat / (v_hat.sqrt() + EPS));
        }
        deltas
    }
}

/// Alternating minimax training.
///
/// Each round runs `disc_steps` adversary updates against the frozen
/// policy's tables, then `policy_steps` plain gradient updates of the
/// policy against the frozen adversary, then records the saddle losses and
/// the exact forward KL / reverse KL / JS between the current policy's
/// trajectory distribution and the expert's. Deterministic given the seed;
/// aborts with the round index if any metric goes non-finite.
pub fn alternating_train(
    policy: &mut TabularPolicy,
    setup: &AdversarialSetup,
    schedule: &Schedule,
) -> Result<TrainingHistory> {
    alternating_train_observed(policy, setup, schedule, &mut |_, _| Ok(()))
}

/// As [`alternating_train`], invoking `observer` with each round record and
/// the policy as of that round.
pub fn alternating_train_observed(
    policy: &mut TabularPolicy,
    setup: &AdversarialSetup,
    schedule: &Schedule,
    observer: &mut dyn FnMut(&RoundRecord, &TabularPolicy) -> Result<()>,
) -> Result<TrainingHistory> {
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);

    // Materialize the adversary over the union of expert support and the
    // reachable set so every later lookup succeeds.
    let reachable = reachable_keys(policy, setup)?;
    let mut disc = Discriminator::zeros_over(setup.granularity, reachable.iter().cloned());
    disc.ensure_keys(setup.expert_target.keys());
    let mut critic = match setup.objective {
        AdversarialObjective::FGan(family) => {
            let mut c =
                Critic::uniform_over(setup.granularity, family, reachable.iter().cloned())?;
            c.ensure_keys(setup.expert_target.keys())?;
            Some(c)
        }
        _ => None,
    };

    let mut adam = AdamState::new();
    let mut rounds = Vec::with_capacity(schedule.rounds);

    for round in 1..=schedule.rounds {
        // Adversary phase against the frozen policy.
        let policy_table = policy_side_table(policy, setup, schedule, &mut rng)?;
        let mut adversary_loss = f64::NAN;
        for _ in 0..schedule.disc_steps {
            let report = match (&setup.objective, critic.as_mut()) {
                (AdversarialObjective::FGan(_), Some(c)) => {
                    let report = fgan_critic_loss(c, setup.expert_target, &policy_table)?;
                    let deltas = if schedule.disc_adam {
                        adam.step(&report.gradient, schedule.disc_step_size)
                    } else {
                        gd_deltas(&report.gradient, schedule.disc_step_size)
                    };
                    for (key, delta) in deltas {
                        let current = c.values()[&key];
                        c.set_value(&key, current + delta);
                    }
                    report
                }
                _ => {
                    let report =
                        discriminator_loss(&disc, setup.expert_target, &policy_table)?;
                    let deltas = if schedule.disc_adam {
                        adam.step(&report.gradient, schedule.disc_step_size)
                    } else {
                        gd_deltas(&report.gradient, schedule.disc_step_size)
                    };
                    for (key, delta) in deltas {
                        let current = disc.logits()[&key];
                        disc.set_logit(&key, current + delta);
                    }
                    report
                }
            };
            adversary_loss = report.value;
        }
        if schedule.disc_steps == 0 {
            adversary_loss = match (&setup.objective, critic.as_ref()) {
                (AdversarialObjective::FGan(_), Some(c)) => {
                    fgan_critic_loss(c, setup.expert_target, &policy_table)?.value
                }
                _ => discriminator_loss(&disc, setup.expert_target, &policy_table)?.value,
            };
        }

        // Policy phase against the frozen adversary.
        let mut policy_loss = f64::NAN;
        for _ in 0..schedule.policy_steps {
            let report = policy_objective(policy, setup, schedule, &disc, &critic, &mut rng)?;
            policy_loss = report.value;
            for (key, grads) in &report.gradient {
                let logits = policy
                    .logits_mut()
                    .get_mut(key)
                    .ok_or_else(|| Error::key(format!("gradient for unknown context {key:?}")))?;
                for (l, g) in logits.iter_mut().zip(grads) {
                    *l -= schedule.policy_step_size * g;
                }
            }
        }
        if schedule.policy_steps == 0 {
            policy_loss =
                policy_objective(policy, setup, schedule, &disc, &critic, &mut rng)?.value;
        }

        // Exact divergences to the expert, regardless of estimator mode.
        let dist = trajectory_distribution(policy, setup.prompt_dist, setup.budget)?;
        let joint = dist.joint();
        let fkl = divergence(setup.metrics_expert, &joint, DivergenceKind::ForwardKl)?;
        let rkl = divergence(&joint, setup.metrics_expert, DivergenceKind::ForwardKl)?;
        let js = divergence(&joint, setup.metrics_expert, DivergenceKind::JensenShannon)?;
        for (name, v) in
            [("policy", policy_loss), ("adversary", adversary_loss), ("fkl", fkl), ("rkl", rkl), ("js", js)]
        {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    iteration: round,
                    context: format!("{name} loss became non-finite"),
                });
            }
        }
        let record = RoundRecord { round, policy_loss, adversary_loss, fkl, rkl, js };
        observer(&record, policy)?;
        rounds.push(record);
    }

    Ok(TrainingHistory {
        rounds,
        discriminator: if critic.is_none() { Some(disc) } else { None },
        critic,
    })
}

fn gd_deltas(grad: &Table, lr: f64) -> Table {
    grad.iter().map(|(k, &g)| (k.clone(), -lr * g)).collect()
}

fn reachable_keys(policy: &TabularPolicy, setup: &AdversarialSetup) -> Result<Vec<String>> {
    let mut keys = Vec::new();
    for (prompt, _) in setup.prompt_dist.iter() {
        let trajs =
            enumerate_trajectories(policy.vocab(), prompt, policy.capacity(), setup.budget)?;
        for traj in trajs {
            match setup.granularity {
                Granularity::Trajectory => keys.push(traj.key()),
                Granularity::StateAction => {
                    let response = traj.response();
                    for k in 0..response.len() {
                        keys.push(crate::mdp::keys::sa_key(
                            traj.prompt(),
                            &response[..k],
                            response[k],
                        ));
                    }
                }
            }
        }
    }
    keys.sort();
    keys.dedup();
    Ok(keys)
}

/// The policy's normalized table at the setup granularity, exact or sampled.
fn policy_side_table(
    policy: &TabularPolicy,
    setup: &AdversarialSetup,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Table> {
    match schedule.estimator {
        Estimator::Exact => match setup.granularity {
            Granularity::StateAction => {
                let occ = exact_occupancy(policy, setup.prompt_dist, setup.gamma, setup.budget)?;
                Ok(occ.normalized())
            }
            Granularity::Trajectory => {
                Ok(trajectory_distribution(policy, setup.prompt_dist, setup.budget)?.joint())
            }
        },
        Estimator::Sampled { n } => {
            use rand::Rng;
            let mut trajs = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.gen();
                let prompt = &setup.prompt_dist.prompts()[setup.prompt_dist.sample_index(u)];
                trajs.push(policy.sample_response_with(prompt, rng)?);
            }
            match setup.granularity {
                Granularity::StateAction => {
                    Ok(empirical_occupancy(&trajs, setup.gamma)?.normalized())
                }
                Granularity::Trajectory => Ok(empirical_traj_dist(&trajs)?.joint()),
            }
        }
    }
}

fn policy_objective(
    policy: &TabularPolicy,
    setup: &AdversarialSetup,
    schedule: &Schedule,
    disc: &Discriminator,
    critic: &Option<Critic>,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let paths = match schedule.estimator {
        Estimator::Exact => exact_paths(policy, setup.prompt_dist, setup.budget)?,
        Estimator::Sampled { n } => sampled_paths(policy, setup.prompt_dist, n, rng)?,
    };
    match (&setup.objective, critic) {
        (AdversarialObjective::ReverseKl, _) => {
            policy_rkl_loss_on(policy, disc, setup.granularity, setup.gamma, &paths)
        }
        (AdversarialObjective::JensenShannon, _) => policy_js_loss_on(
            policy,
            disc,
            setup.granularity,
            setup.expert_target,
            setup.gamma,
            &paths,
        ),
        (AdversarialObjective::FGan(_), Some(c)) => fgan_policy_loss_on(policy, c, &paths),
        (AdversarialObjective::FGan(_), None) => {
            Err(Error::domain("f-divergence objective without a critic"))
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// log sigmoid(x), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{PromptDist, TerminalReward, Vocab};
    use crate::objectives::{finite_diff_gradient, grad_rel_error};
    use crate::policy::{boltzmann_expert, ContextOrder, ExpertSpec};
    use approx::assert_abs_diff_eq;

    const BUDGET: usize = 100_000;

    fn vocab_abe() -> Vocab {
        Vocab::with_auto_mask(&["a", "b", "</s>"], "</s>").unwrap()
    }

    fn materialized(vocab: &Vocab, order: ContextOrder, cap: usize) -> TabularPolicy {
        let mut p = TabularPolicy::new_uniform(vocab.clone(), order, cap).unwrap();
        p.materialize_reachable(&PromptDist::single(vec![]), BUDGET).unwrap();
        p
    }

    fn tilt(policy: &mut TabularPolicy, scale: f64, phase: usize) {
        for (i, (_, l)) in policy.logits_mut().iter_mut().enumerate() {
            for (j, x) in l.iter_mut().enumerate() {
                *x = scale * ((i * 11 + j * 7 + phase) as f64 * 0.23).sin();
            }
        }
    }

    fn setup_tables(
        cap: usize,
        granularity: Granularity,
        expert_scale: f64,
    ) -> (TabularPolicy, TabularPolicy, Table, Table, PromptDist) {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let mut expert = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut expert, expert_scale, 3);
        let mut student = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut student, 0.5, 11);
        let (e_table, p_table) = match granularity {
            Granularity::StateAction => (
                exact_occupancy(&expert, &pd, 1.0, BUDGET).unwrap().normalized(),
                exact_occupancy(&student, &pd, 1.0, BUDGET).unwrap().normalized(),
            ),
            Granularity::Trajectory => (
                trajectory_distribution(&expert, &pd, BUDGET).unwrap().joint(),
                trajectory_distribution(&student, &pd, BUDGET).unwrap().joint(),
            ),
        };
        (expert, student, e_table, p_table, pd)
    }

    #[test]
    fn optimal_discriminator_closed_form() {
        let mut e = Table::new();
        let mut p = Table::new();
        e.insert("k1".into(), 0.5);
        p.insert("k1".into(), 0.5);
        e.insert("k2".into(), 0.375);
        p.insert("k2".into(), 0.125);
        e.insert("k3".into(), 0.125);
        p.insert("k3".into(), 0.375);
        let d = optimal_discriminator(&e, &p, Granularity::StateAction);
        // Equal masses: 0.5. Expert 3x policy: 0.75. Boundary handled below.
        assert_abs_diff_eq!(d.output("k1").unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.output("k2").unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(d.output("k3").unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn optimal_discriminator_boundaries() {
        let mut e = Table::new();
        let mut p = Table::new();
        e.insert("both".into(), 1.0);
        p.insert("both".into(), 0.5);
        p.insert("pi_only".into(), 0.5);
        let d = optimal_discriminator(&e, &p, Granularity::StateAction);
        // Expert zero: D* = 0 (within clamp tolerance).
        assert!(d.output("pi_only").unwrap() <= 1e-12);
        assert!(!d.logits().contains_key("neither"));
    }

    #[test]
    fn disc_loss_at_half_is_ln4() {
        let (_, _, e, p, _) = setup_tables(3, Granularity::StateAction, 1.0);
        let mut keys: Vec<String> = e.keys().chain(p.keys()).cloned().collect();
        keys.sort();
        keys.dedup();
        let disc = Discriminator::zeros_over(Granularity::StateAction, keys);
        let report = discriminator_loss(&disc, &e, &p).unwrap();
        assert_abs_diff_eq!(report.value, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn disc_loss_at_optimum_equals_neg_two_js_plus_ln4() {
        for granularity in [Granularity::StateAction, Granularity::Trajectory] {
            let (_, _, e, p, _) = setup_tables(3, granularity, 1.2);
            let d_star = optimal_discriminator(&e, &p, granularity);
            let report = discriminator_loss(&d_star, &e, &p).unwrap();
            let js = divergence(&e, &p, DivergenceKind::JensenShannon).unwrap();
            assert_abs_diff_eq!(report.value, -(2.0 * js - 4f64.ln()), epsilon = 1e-6);
        }
    }

    #[test]
    fn disc_gradient_matches_finite_differences() {
        let (_, _, e, p, _) = setup_tables(3, Granularity::StateAction, 0.9);
        let mut keys: Vec<String> = e.keys().chain(p.keys()).cloned().collect();
        keys.sort();
        keys.dedup();
        let mut disc = Discriminator::zeros_over(Granularity::StateAction, keys);
        for (i, key) in disc.logits().keys().cloned().collect::<Vec<_>>().iter().enumerate() {
            disc.set_logit(key, 0.4 * ((i * 3) as f64 * 0.7).sin());
        }
        let analytic = discriminator_loss(&disc, &e, &p).unwrap();
        let h = 1e-6;
        for (key, &g) in &analytic.gradient {
            let base = disc.logits()[key];
            let mut plus = disc.clone();
            plus.set_logit(key, base + h);
            let mut minus = disc.clone();
            minus.set_logit(key, base - h);
            let fd = (discriminator_loss(&plus, &e, &p).unwrap().value
                - discriminator_loss(&minus, &e, &p).unwrap().value)
                / (2.0 * h);
            assert!((g - fd).abs() / fd.abs().max(1e-8) <= 1e-5, "key {key}: {g} vs {fd}");
        }
    }

    #[test]
    fn rkl_identity_at_optimal_discriminator() {
        for granularity in [Granularity::StateAction, Granularity::Trajectory] {
            let (_, student, e, p, pd) = setup_tables(3, granularity, 1.1);
            let d_star = optimal_discriminator(&e, &p, granularity);
            let report =
                policy_rkl_loss(&student, &d_star, granularity, &pd, 1.0, BUDGET).unwrap();
            let rkl = divergence(&p, &e, DivergenceKind::ForwardKl).unwrap();
            assert_abs_diff_eq!(report.value, rkl, epsilon = 1e-6);
        }
    }

    #[test]
    fn rkl_zero_at_matched_distributions() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let mut policy = materialized(&v, ContextOrder::Full, 3);
        tilt(&mut policy, 0.8, 5);
        let table = exact_occupancy(&policy, &pd, 1.0, BUDGET).unwrap().normalized();
        let d_star = optimal_discriminator(&table, &table, Granularity::StateAction);
        let report =
            policy_rkl_loss(&policy, &d_star, Granularity::StateAction, &pd, 1.0, BUDGET)
                .unwrap();
        assert!(report.value.abs() <= 1e-9);
    }

    #[test]
    fn policy_rkl_gradient_matches_finite_differences() {
        for granularity in [Granularity::StateAction, Granularity::Trajectory] {
            let (_, mut student, e, _, pd) = setup_tables(3, granularity, 1.0);
            tilt(&mut student, 0.6, 17);
            let p = match granularity {
                Granularity::StateAction => {
                    exact_occupancy(&student, &pd, 1.0, BUDGET).unwrap().normalized()
                }
                Granularity::Trajectory => {
                    trajectory_distribution(&student, &pd, BUDGET).unwrap().joint()
                }
            };
            let disc = optimal_discriminator(&e, &p, granularity);
            let report =
                policy_rkl_loss(&student, &disc, granularity, &pd, 1.0, BUDGET).unwrap();
            let fd = finite_diff_gradient(
                &|q| Ok(policy_rkl_loss(q, &disc, granularity, &pd, 1.0, BUDGET)?.value),
                &student,
                1e-6,
            )
            .unwrap();
            let err = grad_rel_error(&report.gradient, &fd);
            assert!(err <= 1e-5, "{granularity}: rel err {err}");
        }
    }

    #[test]
    fn js_value_at_optimum_is_two_js_minus_ln4() {
        for granularity in [Granularity::StateAction, Granularity::Trajectory] {
            let (_, student, e, p, pd) = setup_tables(3, granularity, 1.3);
            let d_star = optimal_discriminator(&e, &p, granularity);
            let value =
                js_minimax_value(&student, &d_star, granularity, &e, &pd, 1.0, BUDGET).unwrap();
            let js = divergence(&e, &p, DivergenceKind::JensenShannon).unwrap();
            assert_abs_diff_eq!(value, 2.0 * js - 4f64.ln(), epsilon = 1e-6);
        }
    }

    #[test]
    fn js_value_monotone_along_mixture_path() {
        // Moving the policy table away from the expert along a mixture path
        // increases the inner-max value.
        let (_, _, e, p, _) = setup_tables(3, Granularity::Trajectory, 1.4);
        let mut last = f64::NEG_INFINITY;
        for i in 0..11 {
            let w = i as f64 / 10.0;
            let mixed: Table = e
                .iter()
                .map(|(k, &ev)| (k.clone(), (1.0 - w) * ev + w * p[k]))
                .collect();
            let d_star = optimal_discriminator(&e, &mixed, Granularity::Trajectory);
            // Inner max value at D*: E_e[log D*] + E_mixed[log(1-D*)].
            let mut value = 0.0;
            for (k, &ev) in &e {
                value += ev * log_sigmoid(d_star.logit(k).unwrap());
            }
            for (k, &mv) in &mixed {
                value += mv * log_sigmoid(-d_star.logit(k).unwrap());
            }
            assert!(value >= last - 1e-12, "w={w}: {value} < {last}");
            last = value;
        }
    }

    #[test]
    fn fgan_critic_optimum_attains_divergence() {
        // Variational tightness at the closed-form optimal critic.
        for family in
            [FDivFamily::Airl, FDivFamily::Gail, FDivFamily::Fairl, FDivFamily::Alpha(0.5)]
        {
            let (_, _, e, p, _) = setup_tables(3, Granularity::StateAction, 1.0);
            let critic =
                optimal_critic(&e, &p, Granularity::StateAction, family).unwrap();
            let report = fgan_critic_loss(&critic, &e, &p).unwrap();
            let direct = divergence(&e, &p, DivergenceKind::F(family)).unwrap();
            assert_abs_diff_eq!(-report.value, direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn fgan_critic_zero_at_equal_distributions() {
        for family in
            [FDivFamily::Airl, FDivFamily::Gail, FDivFamily::Fairl, FDivFamily::Alpha(0.5)]
        {
            let (_, _, e, _, _) = setup_tables(3, Granularity::StateAction, 0.9);
            let critic = optimal_critic(&e, &e, Granularity::StateAction, family).unwrap();
            let report = fgan_critic_loss(&critic, &e, &e).unwrap();
            assert!(report.value.abs() <= 1e-10, "{}: {}", family.name(), report.value);
        }
    }

    #[test]
    fn fgan_critic_gradient_matches_finite_differences() {
        let (_, _, e, p, _) = setup_tables(3, Granularity::StateAction, 1.0);
        let family = FDivFamily::Gail;
        let mut critic = optimal_critic(&e, &p, Granularity::StateAction, family).unwrap();
        // Move off the optimum so the gradient is non-trivial.
        let keys: Vec<String> = critic.values().keys().cloned().collect();
        for (i, key) in keys.iter().enumerate() {
            let v = critic.values()[key];
            critic.set_value(key, v - 0.2 - 0.05 * (i as f64 * 0.9).sin());
        }
        let analytic = fgan_critic_loss(&critic, &e, &p).unwrap();
        let h = 1e-6;
        for (key, &g) in &analytic.gradient {
            let base = critic.values()[key];
            let mut plus = critic.clone();
            plus.set_value(key, base + h);
            let mut minus = critic.clone();
            minus.set_value(key, base - h);
            let fd = (fgan_critic_loss(&plus, &e, &p).unwrap().value
                - fgan_critic_loss(&minus, &e, &p).unwrap().value)
                / (2.0 * h);
            assert!((g - fd).abs() / fd.abs().max(1e-8) <= 1e-5, "{key}: {g} vs {fd}");
        }
    }

    #[test]
    fn fgan_policy_constant_critic_value() {
        // Constant critic c: loss = -f*(c) * E[length].
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let mut policy = materialized(&v, ContextOrder::Full, 3);
        tilt(&mut policy, 0.7, 2);
        let family = FDivFamily::Fairl;
        let keys: Vec<String> = exact_occupancy(&policy, &pd, 1.0, BUDGET)
            .unwrap()
            .entries()
            .keys()
            .cloned()
            .collect();
        let mut critic =
            Critic::uniform_over(Granularity::StateAction, family, keys).unwrap();
        let c = 0.4;
        for key in critic.values().keys().cloned().collect::<Vec<_>>() {
            critic.set_value(&key, c);
        }
        let report = fgan_policy_loss(&policy, &critic, &pd, BUDGET).unwrap();
        let expected_len = exact_occupancy(&policy, &pd, 1.0, BUDGET).unwrap().total_mass();
        assert_abs_diff_eq!(
            report.value,
            -family.conjugate(c).unwrap() * expected_len,
            epsilon = 1e-10
        );
    }

    #[test]
    fn fgan_policy_gradient_matches_finite_differences() {
        for family in [FDivFamily::Airl, FDivFamily::Gail, FDivFamily::Alpha(0.5)] {
            let (_, mut student, e, _, pd) = setup_tables(3, Granularity::StateAction, 1.0);
            tilt(&mut student, 0.5, 23);
            let p = exact_occupancy(&student, &pd, 1.0, BUDGET).unwrap().normalized();
            let critic = optimal_critic(&e, &p, Granularity::StateAction, family).unwrap();
            let report = fgan_policy_loss(&student, &critic, &pd, BUDGET).unwrap();
            let fd = finite_diff_gradient(
                &|q| Ok(fgan_policy_loss(q, &critic, &pd, BUDGET)?.value),
                &student,
                1e-6,
            )
            .unwrap();
            let err = grad_rel_error(&report.gradient, &fd);
            assert!(err <= 1e-5, "{}: rel err {err}", family.name());
        }
    }

    #[test]
    fn fgan_policy_descent_step_reduces_loss() {
        let (_, mut student, e, _, pd) = setup_tables(3, Granularity::StateAction, 1.1);
        tilt(&mut student, 0.4, 29);
        let p = exact_occupancy(&student, &pd, 1.0, BUDGET).unwrap().normalized();
        let critic =
            optimal_critic(&e, &p, Granularity::StateAction, FDivFamily::Gail).unwrap();
        let before = fgan_policy_loss(&student, &critic, &pd, BUDGET).unwrap();
        for (key, grads) in &before.gradient {
            let logits = student.logits_mut().get_mut(key).unwrap();
            for (l, g) in logits.iter_mut().zip(grads) {
                *l -= 0.05 * g;
            }
        }
        let after = fgan_policy_loss(&student, &critic, &pd, BUDGET).unwrap();
        assert!(after.value < before.value);
    }

    #[test]
    fn frozen_policy_discriminator_converges_to_closed_form() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 4;
        let reward = TerminalReward::from_fn(&v, &pd, cap, BUDGET, |t| {
            0.6 * t.response().len() as f64 + 0.4 * (t.response()[0] as f64)
        })
        .unwrap();
        let expert =
            boltzmann_expert(&ExpertSpec::new(reward, 1.0).unwrap(), &v, &pd, cap, BUDGET)
                .unwrap();
        let e_table = exact_occupancy(&expert, &pd, 1.0, BUDGET).unwrap().normalized();
        let expert_joint = trajectory_distribution(&expert, &pd, BUDGET).unwrap().joint();

        let mut student = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut student, 0.5, 7);
        let p_table = exact_occupancy(&student, &pd, 1.0, BUDGET).unwrap().normalized();

        let setup = AdversarialSetup {
            prompt_dist: &pd,
            granularity: Granularity::StateAction,
            objective: AdversarialObjective::ReverseKl,
            expert_target: &e_table,
            metrics_expert: &expert_joint,
            gamma: 1.0,
            budget: BUDGET,
        };
        let schedule = Schedule {
            rounds: 1,
            disc_steps: 5000,
            policy_steps: 0,
            disc_step_size: 0.05,
            policy_step_size: 0.1,
            disc_adam: true,
            estimator: Estimator::Exact,
            seed: 0,
        };
        let history = alternating_train(&mut student, &setup, &schedule).unwrap();
        let trained = history.discriminator.unwrap();
        let d_star = optimal_discriminator(&e_table, &p_table, Granularity::StateAction);
        let gap = trained.sup_norm_gap(&d_star);
        assert!(gap <= 1e-3, "sup-norm gap {gap}");
    }

    #[test]
    fn equilibrium_when_expert_equals_initial_policy() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let mut policy = materialized(&v, ContextOrder::Full, 3);
        tilt(&mut policy, 0.9, 13);
        let e_table = exact_occupancy(&policy, &pd, 1.0, BUDGET).unwrap().normalized();
        let expert_joint = trajectory_distribution(&policy, &pd, BUDGET).unwrap().joint();
        let setup = AdversarialSetup {
            prompt_dist: &pd,
            granularity: Granularity::StateAction,
            objective: AdversarialObjective::ReverseKl,
            expert_target: &e_table,
            metrics_expert: &expert_joint,
            gamma: 1.0,
            budget: BUDGET,
        };
        let schedule = Schedule {
            rounds: 5,
            disc_steps: 20,
            policy_steps: 1,
            disc_step_size: 0.5,
            policy_step_size: 0.2,
            disc_adam: false,
            estimator: Estimator::Exact,
            seed: 0,
        };
        let history = alternating_train(&mut policy, &setup, &schedule).unwrap();
        for record in &history.rounds {
            // Discriminator stays at ln 4, policy loss at 0, divergences 0.
            assert!((record.adversary_loss - 4f64.ln()).abs() <= 1e-6);
            assert!(record.policy_loss.abs() <= 1e-6);
            assert!(record.fkl.abs() <= 1e-6);
            assert!(record.rkl.abs() <= 1e-6);
            assert!(record.js.abs() <= 1e-6);
        }
    }

    #[test]
    fn sampled_estimator_smoke() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 3;
        let reward = TerminalReward::from_fn(&v, &pd, cap, BUDGET, |t| {
            if t.response() == [0, 0, 2] {
                2.0
            } else {
                0.0
            }
        })
        .unwrap();
        let expert =
            boltzmann_expert(&ExpertSpec::new(reward, 1.0).unwrap(), &v, &pd, cap, BUDGET)
                .unwrap();
        let e_table = trajectory_distribution(&expert, &pd, BUDGET).unwrap().joint();
        let mut student = materialized(&v, ContextOrder::Full, cap);
        let setup = AdversarialSetup {
            prompt_dist: &pd,
            granularity: Granularity::Trajectory,
            objective: AdversarialObjective::JensenShannon,
            expert_target: &e_table,
            metrics_expert: &e_table,
            gamma: 1.0,
            budget: BUDGET,
        };
        let schedule = Schedule {
            rounds: 10,
            disc_steps: 30,
            policy_steps: 1,
            disc_step_size: 0.3,
            policy_step_size: 0.3,
            disc_adam: true,
            estimator: Estimator::Sampled { n: 512 },
            seed: 9,
        };
        let before_js = {
            let joint = trajectory_distribution(&student, &pd, BUDGET).unwrap().joint();
            divergence(&joint, &e_table, DivergenceKind::JensenShannon).unwrap()
        };
        let history = alternating_train(&mut student, &setup, &schedule).unwrap();
        let after_js = history.rounds.last().unwrap().js;
        assert!(after_js < before_js, "js {after_js} !< {before_js}");
        // Determinism: same seed reproduces the identical history.
        let mut student2 = materialized(&v, ContextOrder::Full, cap);
        let history2 = alternating_train(&mut student2, &setup, &schedule).unwrap();
        assert_eq!(history.rounds.len(), history2.rounds.len());
        for (a, b) in history.rounds.iter().zip(&history2.rounds) {
            assert_eq!(a.js.to_bits(), b.js.to_bits());
        }
    }

    #[test]
    fn history_csv_shape() {
        let history = TrainingHistory {
            rounds: vec![RoundRecord {
                round: 1,
                policy_loss: 0.5,
                adversary_loss: 1.25,
                fkl: 0.1,
                rkl: 0.2,
                js: 0.05,
            }],
            discriminator: None,
            critic: None,
        };
        let csv = history.to_csv();
        assert!(csv.starts_with("round,policy_loss,adversary_loss,fkl,rkl,js\n1,"));
    }

    #[test]
    fn discriminator_text_roundtrip() {
        let mut d = Discriminator::zeros_over(
            Granularity::Trajectory,
            ["|0.2".to_string(), "|1.2".to_string()],
        );
        d.set_logit("|0.2", 1.75);
        let text = d.to_text();
        let back = Discriminator::from_text(&text).unwrap();
        assert_eq!(d, back);
    }
}
