//! Occupancy measures, trajectory distributions, and divergences.
//!
//! The exact computations walk the full prefix tree, so they serve as the
//! ground-truth oracle for every training method. Empirical variants count
//! dataset trajectories. Tables are keyed by canonical token-id strings
//! (see [`crate::mdp::keys`]) and accumulate in deterministic enumeration
//! order, which keeps every metric bit-reproducible.
//!
//! All operations are pure; tables are immutable after construction.
//! Tree walks are parallelized over first-token subtrees with a
//! deterministic merge order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec;
use crate::fdiv::FDivFamily;
use crate::mdp::{
    enumerate_trajectories, keys, transition, PromptDist, State, TokenId, Trajectory, Vocab,
};
use crate::policy::TabularPolicy;

/// A mass table keyed by canonical token-id strings.
pub type Table = BTreeMap<String, f64>;

/// State-action occupancy: the mass of reaching a prefix and emitting a
/// given next token, discounted by `gamma` per generation step.
///
/// Mass is accumulated up to and including the first terminal step; the
/// absorbing self-loop contributes nothing, so with `gamma = 1` the total
/// mass equals the expected response length.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    entries: Table,
    gamma: f64,
}

impl OccupancyTable {
    pub fn new(entries: Table, gamma: f64) -> Result<Self> {
        if !(0.0 < gamma && gamma <= 1.0) {
            return Err(Error::domain("gamma must lie in (0, 1]"));
        }
        if entries.values().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("occupancy masses must be finite and >= 0"));
        }
        Ok(OccupancyTable { entries, gamma })
    }

    pub fn entries(&self) -> &Table {
        &self.entries
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Total mass at generation step `k` (states with `k` emitted tokens).
    pub fn level_mass(&self, k: usize) -> f64 {
        self.entries
            .iter()
            .filter(|(key, _)| {
                keys::parse_sa_key(key).map(|(_, g, _)| g.len() == k).unwrap_or(false)
            })
            .map(|(_, &m)| m)
            .sum()
    }

    /// The table rescaled to a probability distribution.
    pub fn normalized(&self) -> Table {
        normalize(&self.entries)
    }

    pub fn to_csv(&self) -> String {
        table_to_csv(&self.entries)
    }
}

/// Distribution over complete responses, per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajDist {
    /// Conditional probability d(y|x) keyed by the full trajectory key.
    entries: Table,
    /// Prompt weight p(x) keyed by the prompt part of the trajectory key.
    prompt_probs: Table,
    support: Vec<Trajectory>,
}

impl TrajDist {
    fn build(entries: Table, prompt_probs: Table, support: Vec<Trajectory>) -> Result<Self> {
        // Per prompt, conditional masses must sum to one.
        let mut sums: Table = BTreeMap::new();
        for (key, &mass) in &entries {
            if mass < 0.0 || !mass.is_finite() {
                return Err(Error::domain("trajectory masses must be finite and >= 0"));
            }
            let (prompt, _) = key
                .split_once('|')
                .ok_or_else(|| Error::key(format!("malformed trajectory key {key:?}")))?;
            *sums.entry(prompt.to_string()).or_insert(0.0) += mass;
        }
        for (prompt, sum) in &sums {
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::domain(format!(
                    "conditional masses for prompt {prompt:?} sum to {sum}"
                )));
            }
        }
        Ok(TrajDist { entries, prompt_probs, support })
    }

    /// Conditional probabilities d(y|x), keyed by full trajectory key.
    pub fn conditionals(&self) -> &Table {
        &self.entries
    }

    /// Prompt marginals p(x), keyed by the prompt id string.
    pub fn prompt_probs(&self) -> &Table {
        &self.prompt_probs
    }

    pub fn support(&self) -> &[Trajectory] {
        &self.support
    }

    pub fn conditional_of(&self, traj: &Trajectory) -> Option<f64> {
        self.entries.get(&traj.key()).copied()
    }

    /// Joint distribution p(x) d(y|x) over trajectory keys; sums to one.
    pub fn joint(&self) -> Table {
        self.entries
            .iter()
            .map(|(key, &mass)| {
                let prompt = key.split_once('|').map(|(p, _)| p).unwrap_or_default();
                let px = self.prompt_probs.get(prompt).copied().unwrap_or(0.0);
                (key.clone(), px * mass)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        table_to_csv(&self.entries)
    }
}

/// Exact state-action occupancy of a policy under a prompt distribution.
///
/// Each entry is `p(x) * gamma^k * prod_{t<=k} pi(a_t|s_t)`.
pub fn exact_occupancy(
    policy: &TabularPolicy,
    prompt_dist: &PromptDist,
    gamma: f64,
    budget: usize,
) -> Result<OccupancyTable> {
    if !(0.0 < gamma && gamma <= 1.0) {
        return Err(Error::domain("gamma must lie in (0, 1]"));
    }
    let vocab = policy.vocab().clone();
    let mut entries: Table = BTreeMap::new();
    for (prompt, px) in prompt_dist.iter() {
        enumerate_trajectories(&vocab, prompt, policy.capacity(), budget)?;
        let root = State::initial(&vocab, prompt, policy.capacity())?;
        let root_probs = policy.action_distribution(&root)?;
        let actions = vocab.actions();
        let subtrees: Vec<Result<Vec<(String, f64)>>> = exec::ordered_map(&actions, |&a| {
            let idx = vocab.action_index(a)?;
            let mut out = Vec::new();
            let mass = px * root_probs[idx];
            out.push((keys::sa_key(prompt, &[], a), mass));
            let next = transition(&vocab, &root, a)?;
            occupancy_walk(policy, &vocab, &next, mass, gamma, &mut out)?;
            Ok(out)
        });
        for sub in subtrees {
            for (key, mass) in sub? {
                entries.insert(key, mass);
            }
        }
    }
    OccupancyTable::new(entries, gamma)
}

/// Recursive walk: `reach` is the undiscounted probability of arriving at
/// `state` times p(x); emitted entries carry the gamma^depth discount.
fn occupancy_walk(
    policy: &TabularPolicy,
    vocab: &Vocab,
    state: &State,
    reach: f64,
    gamma: f64,
    out: &mut Vec<(String, f64)>,
) -> Result<()> {
    if state.is_terminal(vocab) {
        return Ok(());
    }
    let probs = policy.action_distribution(state)?;
    let discount = gamma.powi(state.depth() as i32);
    for a in vocab.actions() {
        let idx = vocab.action_index(a)?;
        let mass = reach * probs[idx];
        out.push((keys::sa_key(state.prompt(), state.generated(), a), discount * mass));
        let next = transition(vocab, state, a)?;
        occupancy_walk(policy, vocab, &next, mass, gamma, out)?;
    }
    Ok(())
}

/// Exact distribution over complete responses: `d(y|x) = prod_t pi(a_t|s_t)`.
pub fn trajectory_distribution(
    policy: &TabularPolicy,
    prompt_dist: &PromptDist,
    budget: usize,
) -> Result<TrajDist> {
    let vocab = policy.vocab();
    let mut entries: Table = BTreeMap::new();
    let mut prompt_probs: Table = BTreeMap::new();
    let mut support = Vec::new();
    for (prompt, px) in prompt_dist.iter() {
        let trajs = enumerate_trajectories(vocab, prompt, policy.capacity(), budget)?;
        let masses: Vec<Result<f64>> =
            exec::ordered_map(&trajs, |t| Ok(policy.log_prob_trajectory(t)?.exp()));
        prompt_probs.insert(prompt_part(prompt), px);
        for (traj, mass) in trajs.into_iter().zip(masses) {
            entries.insert(traj.key(), mass?);
            support.push(traj);
        }
    }
    TrajDist::build(entries, prompt_probs, support)
}

fn prompt_part(prompt: &[TokenId]) -> String {
    let key = keys::state_key(prompt, &[]);
    key.trim_end_matches('|').to_string()
}

/// Per-prompt relative frequencies of a demonstration set.
pub fn empirical_traj_dist(dataset: &[Trajectory]) -> Result<TrajDist> {
    if dataset.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let mut counts: Table = BTreeMap::new();
    let mut prompt_counts: Table = BTreeMap::new();
    for traj in dataset {
        *counts.entry(traj.key()).or_insert(0.0) += 1.0;
        let prompt_key = traj.key().split_once('|').unwrap().0.to_string();
        *prompt_counts.entry(prompt_key).or_insert(0.0) += 1.0;
    }
    let n = dataset.len() as f64;
    let entries: Table = counts
        .iter()
        .map(|(key, &c)| {
            let prompt = key.split_once('|').unwrap().0;
            (key.clone(), c / prompt_counts[prompt])
        })
        .collect();
    let prompt_probs: Table = prompt_counts.iter().map(|(k, &c)| (k.clone(), c / n)).collect();
    let mut support = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for traj in dataset {
        if seen.insert(traj.key()) {
            support.push(traj.clone());
        }
    }
    TrajDist::build(entries, prompt_probs, support)
}

/// Empirical occupancy: counts of (prefix, next-token) pairs across the
/// dataset, each weighted `gamma^k / |D|`.
pub fn empirical_occupancy(dataset: &[Trajectory], gamma: f64) -> Result<OccupancyTable> {
    if dataset.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    if !(0.0 < gamma && gamma <= 1.0) {
        return Err(Error::domain("gamma must lie in (0, 1]"));
    }
    let n = dataset.len() as f64;
    let mut entries: Table = BTreeMap::new();
    for traj in dataset {
        let response = traj.response();
        for k in 0..response.len() {
            let key = keys::sa_key(traj.prompt(), &response[..k], response[k]);
            *entries.entry(key).or_insert(0.0) += gamma.powi(k as i32) / n;
        }
    }
    OccupancyTable::new(entries, gamma)
}

/// Divergences between distribution tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    /// KL(p || q).
    ForwardKl,
    /// KL(q || p).
    ReverseKl,
    /// Jensen-Shannon divergence (natural log, max value ln 2).
    JensenShannon,
    /// Half the L1 distance.
    TotalVariation,
    /// General f-divergence `sum_x q(x) f(p(x)/q(x))`.
    F(FDivFamily),
}

/// Scalar divergence between two distributions over the same key space.
///
/// Keys absent from a table count as zero mass. `0 log 0 := 0`; mass in `p`
/// where `q` is zero (or vice versa, where the kind requires it) is a
/// support-mismatch error unless [`divergence_smoothed`] is used instead.
pub fn divergence(p: &Table, q: &Table, kind: DivergenceKind) -> Result<f64> {
    let union: Vec<&String> = union_keys(p, q);
    let mut total = 0.0;
    match kind {
        DivergenceKind::ForwardKl => {
            for key in union {
                let pv = p.get(key).copied().unwrap_or(0.0);
                let qv = q.get(key).copied().unwrap_or(0.0);
                total += kl_term(pv, qv, key)?;
            }
        }
        DivergenceKind::ReverseKl => {
            for key in union {
                let pv = p.get(key).copied().unwrap_or(0.0);
                let qv = q.get(key).copied().unwrap_or(0.0);
                total += kl_term(qv, pv, key)?;
            }
        }
        DivergenceKind::JensenShannon => {
            for key in union {
                let pv = p.get(key).copied().unwrap_or(0.0);
                let qv = q.get(key).copied().unwrap_or(0.0);
                let m = 0.5 * (pv + qv);
                if pv > 0.0 {
                    total += 0.5 * pv * (pv / m).ln();
                }
                if qv > 0.0 {
                    total += 0.5 * qv * (qv / m).ln();
                }
            }
        }
        DivergenceKind::TotalVariation => {
            for key in union {
                let pv = p.get(key).copied().unwrap_or(0.0);
                let qv = q.get(key).copied().unwrap_or(0.0);
                total += 0.5 * (pv - qv).abs();
            }
        }
        DivergenceKind::F(family) => {
            for key in union {
                let pv = p.get(key).copied().unwrap_or(0.0);
                let qv = q.get(key).copied().unwrap_or(0.0);
                total += family.weighted_f(pv, qv)?;
            }
        }
    }
    Ok(total)
}

/// As [`divergence`], after adding `eps` to every key in the union support
/// of both tables and renormalizing. This is the explicit, visible policy
/// for comparing tables with mismatched empirical supports.
pub fn divergence_smoothed(p: &Table, q: &Table, kind: DivergenceKind, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::domain("smoothing epsilon must be positive"));
    }
    let union: Vec<String> = union_keys(p, q).into_iter().cloned().collect();
    let smooth = |t: &Table| -> Table {
        let raw: Table =
            union.iter().map(|k| (k.clone(), t.get(k).copied().unwrap_or(0.0) + eps)).collect();
        normalize(&raw)
    };
    divergence(&smooth(p), &smooth(q), kind)
}

fn kl_term(pv: f64, qv: f64, key: &str) -> Result<f64> {
    if pv == 0.0 {
        return Ok(0.0);
    }
    if qv == 0.0 {
        return Err(Error::SupportMismatch(format!(
            "mass {pv} at {key:?} where the reference is zero"
        )));
    }
    Ok(pv * (pv / qv).ln())
}

fn union_keys<'a>(p: &'a Table, q: &'a Table) -> Vec<&'a String> {
    let mut keys: Vec<&String> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    keys
}

/// Rescale a nonnegative table to unit total mass.
pub fn normalize(table: &Table) -> Table {
    let total: f64 = table.values().sum();
    table.iter().map(|(k, &v)| (k.clone(), v / total)).collect()
}

/// CSV export: `key,mass` rows sorted by key, 17-significant-digit decimals.
pub fn table_to_csv(table: &Table) -> String {
    let mut out = String::from("key,mass\n");
    for (key, mass) in table {
        out.push_str(&format!("{key},{mass:.16e}\n"));
    }
    out
}

/// The conditional probability a trajectory distribution places on each
/// designated (prompt, response) pair.
pub fn mode_masses(dist: &TrajDist, modes: &[(Vec<TokenId>, Vec<TokenId>)]) -> Vec<f64> {
    modes
        .iter()
        .map(|(prompt, response)| {
            let key = keys::state_key(prompt, response);
            dist.conditionals().get(&key).copied().unwrap_or(0.0)
        })
        .collect()
}
