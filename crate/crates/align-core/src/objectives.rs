//! Forward-KL-family training objectives with analytic gradients.
//!
//! All losses are differentiable in the policy's logits and return a
//! [`LossReport`] carrying the value and the full sparse gradient. Losses
//! are means over their natural unit — steps for the per-step and
//! position-reweighted objectives, trajectories for the trajectory-level
//! one — so step sizes stay comparable across dataset sizes; the
//! constant-factor relation between them is asserted in tests.
//!
//! Each empirical loss has an exact-weighted twin that replaces dataset
//! counts with exact expert trajectory masses, which is what experiments in
//! exact-feedback mode optimize.
//!
//! Loss evaluation is pure given (policy, data); gradient accumulation is
//! parallelized over fixed chunks of trajectories with a deterministic
//! reduction order.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::mdp::{keys, PromptDist, State, TokenId, Trajectory};
use crate::occupancy::{exact_occupancy, normalize, OccupancyTable, TrajDist};
use crate::policy::{softmax, TabularPolicy};

/// Chunk size for parallel gradient accumulation. Fixed so the reduction
/// order (and therefore every bit of the result) is independent of the
/// execution mode.
const GRAD_CHUNK: usize = 64;

/// A gradient keyed like policy logits: context key -> per-action entries.
pub type GradTable = BTreeMap<String, Vec<f64>>;

/// Loss value plus analytic gradient.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub gradient: GradTable,
    /// Number of values that had to be clamped into a conjugate domain
    /// during evaluation (f-divergence critics only; zero elsewhere).
    pub clamp_warnings: usize,
}

impl LossReport {
    pub fn new(value: f64, gradient: GradTable) -> Self {
        LossReport { value, gradient, clamp_warnings: 0 }
    }

    pub fn grad_norm(&self) -> f64 {
        grad_norm(&self.gradient)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("loss report serialization")
    }
}

/// L2 norm over all gradient entries.
pub fn grad_norm(grad: &GradTable) -> f64 {
    grad.values().flat_map(|v| v.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Relative L2 error between two gradients over the union of their keys.
pub fn grad_rel_error(a: &GradTable, b: &GradTable) -> f64 {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for key in keys {
        let empty = Vec::new();
        let va = a.get(key).unwrap_or(&empty);
        let vb = b.get(key).unwrap_or(&empty);
        let len = va.len().max(vb.len());
        for i in 0..len {
            let x = va.get(i).copied().unwrap_or(0.0);
            let y = vb.get(i).copied().unwrap_or(0.0);
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

/// Cosine similarity between two gradients (1 means parallel).
pub fn grad_cosine(a: &GradTable, b: &GradTable) -> f64 {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for key in keys {
        let empty = Vec::new();
        let va = a.get(key).unwrap_or(&empty);
        let vb = b.get(key).unwrap_or(&empty);
        let len = va.len().max(vb.len());
        for i in 0..len {
            let x = va.get(i).copied().unwrap_or(0.0);
            let y = vb.get(i).copied().unwrap_or(0.0);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-300)
}

/// One supervised record: predict `action` in `state`, at step `step` of a
/// trajectory whose terminal index is `horizon`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub pair: usize,
    pub step: usize,
    pub horizon: usize,
    pub state: State,
    pub action: TokenId,
}

/// A demonstration dataset: (prompt, response) pairs reorganized into
/// per-step (state, action) records.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    pairs: Vec<Trajectory>,
    records: Vec<StepRecord>,
    capacity: usize,
}

impl DemoDataset {
    pub fn new(pairs: Vec<Trajectory>, capacity: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::domain("empty demonstration dataset"));
        }
        let mut records = Vec::new();
        for (i, traj) in pairs.iter().enumerate() {
            let horizon = traj.horizon();
            for (step, (state, action)) in traj.steps(capacity).into_iter().enumerate() {
                records.push(StepRecord { pair: i, step, horizon, state, action });
            }
        }
        Ok(DemoDataset { pairs, records, capacity })
    }

    /// Sample `n` (prompt, response) pairs from a policy. One RNG stream
    /// drives both prompt and response draws, so the dataset is a pure
    /// function of the seed.
    pub fn sample(
        policy: &TabularPolicy,
        prompt_dist: &PromptDist,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        if n == 0 {
            return Err(Error::domain("dataset size must be at least 1"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let prompt = &prompt_dist.prompts()[prompt_dist.sample_index(u)];
            pairs.push(policy.sample_response_with(prompt, &mut rng)?);
        }
        DemoDataset::new(pairs, policy.capacity())
    }

    pub fn pairs(&self) -> &[Trajectory] {
        &self.pairs
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_steps(&self) -> usize {
        self.records.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// All states visited by the dataset (for policy materialization).
    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.records.iter().map(|r| &r.state)
    }
}

/// How per-step negative log-likelihoods are weighted and averaged.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Weighting {
    /// Mean over steps, unit weights.
    PerStep,
    /// Mean over steps, step k of a horizon-K trajectory weighted (K-k)/K.
    /// Single-token responses (K = 0) keep weight 1 (0/0 := 1).
    PositionReweighted,
    /// Mean over trajectories of per-trajectory log-likelihood sums.
    PerTrajectory,
}

/// Core weighted negative log-likelihood over (trajectory, weight) pairs.
fn demo_nll(
    policy: &TabularPolicy,
    weighted: &[(Trajectory, f64)],
    capacity: usize,
    weighting: Weighting,
) -> Result<LossReport> {
    if weighted.is_empty() {
        return Err(Error::domain("empty demonstration dataset"));
    }
    let denominator: f64 = match weighting {
        Weighting::PerStep | Weighting::PositionReweighted => {
            weighted.iter().map(|(t, w)| w * t.response().len() as f64).sum()
        }
        Weighting::PerTrajectory => weighted.iter().map(|(_, w)| w).sum(),
    };

    let partials = exec::ordered_chunk_map(weighted, GRAD_CHUNK, |chunk| {
        let mut value = 0.0;
        let mut grad: GradTable = BTreeMap::new();
        for (traj, weight) in chunk {
            let horizon = traj.horizon();
            for (step, (state, action)) in traj.steps(capacity).into_iter().enumerate() {
                let step_weight = match weighting {
                    Weighting::PerStep | Weighting::PerTrajectory => 1.0,
                    Weighting::PositionReweighted => {
                        if horizon == 0 {
                            1.0
                        } else {
                            (horizon - step) as f64 / horizon as f64
                        }
                    }
                };
                let key = policy.context_key(&state);
                let logits = policy
                    .logits()
                    .get(&key)
                    .ok_or_else(|| Error::key(format!("no logits for context {key:?}")))?;
                let probs = softmax(logits);
                let idx = policy.vocab().action_index(action)?;
                value -= weight * step_weight * probs[idx].ln();
                let entry = grad.entry(key).or_insert_with(|| vec![0.0; logits.len()]);
                let coeff = weight * step_weight;
                for (j, g) in entry.iter_mut().enumerate() {
                    let indicator = if j == idx { 1.0 } else { 0.0 };
                    *g += coeff * (probs[j] - indicator);
                }
            }
        }
        Ok::<(f64, GradTable), Error>((value, grad))
    });

    let mut value = 0.0;
    let mut grad: GradTable = BTreeMap::new();
    for partial in partials {
        let (v, g) = partial?;
        value += v;
        merge_grad(&mut grad, g);
    }
    value /= denominator;
    for entries in grad.values_mut() {
        for g in entries.iter_mut() {
            *g /= denominator;
        }
    }
    Ok(LossReport::new(value, grad))
}

fn merge_grad(into: &mut GradTable, from: GradTable) {
    for (key, values) in from {
        match into.get_mut(&key) {
            Some(entry) => {
                for (a, b) in entry.iter_mut().zip(values) {
                    *a += b;
                }
            }
            None => {
                into.insert(key, values);
            }
        }
    }
}

fn unit_weights(data: &DemoDataset) -> Vec<(Trajectory, f64)> {
    data.pairs().iter().map(|t| (t.clone(), 1.0)).collect()
}

/// Joint-mass weights from an exact trajectory distribution.
fn exact_weights(target: &TrajDist) -> Vec<(Trajectory, f64)> {
    let joint = target.joint();
    target.support().iter().map(|t| (t.clone(), joint[&t.key()])).collect()
}

/// Supervised fine-tuning: mean negative log-likelihood over per-step
/// records, with the analytic softmax cross-entropy gradient.
pub fn sft_loss(policy: &TabularPolicy, data: &DemoDataset) -> Result<LossReport> {
    demo_nll(policy, &unit_weights(data), data.capacity(), Weighting::PerStep)
}

/// SFT against exact expert trajectory masses instead of dataset counts.
pub fn sft_loss_exact(policy: &TabularPolicy, target: &TrajDist) -> Result<LossReport> {
    demo_nll(policy, &exact_weights(target), policy.capacity(), Weighting::PerStep)
}

/// Position-reweighted forward KL: step k of a horizon-K trajectory is
/// weighted (K-k)/K, so early tokens count fully and the terminal token not
/// at all (K = 0 responses keep weight 1).
pub fn weighted_fkl_loss(policy: &TabularPolicy, data: &DemoDataset) -> Result<LossReport> {
    demo_nll(policy, &unit_weights(data), data.capacity(), Weighting::PositionReweighted)
}

/// Exact-feedback twin of [`weighted_fkl_loss`].
pub fn weighted_fkl_loss_exact(policy: &TabularPolicy, target: &TrajDist) -> Result<LossReport> {
    demo_nll(policy, &exact_weights(target), policy.capacity(), Weighting::PositionReweighted)
}

/// Trajectory-level forward KL: mean over trajectories of the full response
/// negative log-likelihood. Shares every summand with [`sft_loss`], so the
/// two gradients are parallel with ratio steps-per-trajectory.
pub fn traj_fkl_loss(policy: &TabularPolicy, data: &DemoDataset) -> Result<LossReport> {
    demo_nll(policy, &unit_weights(data), data.capacity(), Weighting::PerTrajectory)
}

/// Exact-feedback twin of [`traj_fkl_loss`].
pub fn traj_fkl_loss_exact(policy: &TabularPolicy, target: &TrajDist) -> Result<LossReport> {
    demo_nll(policy, &exact_weights(target), policy.capacity(), Weighting::PerTrajectory)
}

/// Exact forward KL between normalized occupancy measures,
/// `KL(rho_exp_hat || rho_pi_hat)`, computed over the full reachable tree.
///
/// The gradient differentiates each `log rho_pi` product term along its
/// prefix path plus the normalization term, so it is exact:
/// `sum_key (rho_pi_hat - rho_exp_hat) * grad log rho_pi`.
pub fn exact_fkl_occupancy_loss(
    policy: &TabularPolicy,
    rho_exp: &OccupancyTable,
    prompt_dist: &PromptDist,
    budget: usize,
) -> Result<LossReport> {
    let expert = rho_exp.normalized();
    let rho_pi = exact_occupancy(policy, prompt_dist, rho_exp.gamma(), budget)?;
    let pi_hat = normalize(rho_pi.entries());

    let mut value = 0.0;
    for (key, &e) in &expert {
        if e == 0.0 {
            continue;
        }
        let p = pi_hat.get(key).copied().ok_or_else(|| {
            Error::SupportMismatch(format!("expert occupancy at unreachable key {key:?}"))
        })?;
        value += e * (e / p).ln();
    }

    // Differentiate through every reachable key: weight (pi_hat - expert).
    let items: Vec<(String, f64)> = pi_hat
        .iter()
        .map(|(key, &p)| (key.clone(), p - expert.get(key).copied().unwrap_or(0.0)))
        .collect();
    let vocab = policy.vocab().clone();
    let capacity = policy.capacity();
    let partials = exec::ordered_chunk_map(&items, GRAD_CHUNK, |chunk| {
        let mut grad: GradTable = BTreeMap::new();
        for (key, weight) in chunk {
            let (prompt, generated, action) = keys::parse_sa_key(key)?;
            for t in 0..=generated.len() {
                let state = State::with_generated(&vocab, &prompt, &generated[..t], capacity)?;
                let action_t = if t < generated.len() { generated[t] } else { action };
                let ctx = policy.context_key(&state);
                let logits = policy
                    .logits()
                    .get(&ctx)
                    .ok_or_else(|| Error::key(format!("no logits for context {ctx:?}")))?;
                let probs = softmax(logits);
                let idx = vocab.action_index(action_t)?;
                let entry = grad.entry(ctx).or_insert_with(|| vec![0.0; logits.len()]);
                // d log rho_pi / d logits = indicator - softmax at each step.
                for (j, g) in entry.iter_mut().enumerate() {
                    let indicator = if j == idx { 1.0 } else { 0.0 };
                    *g += weight * (indicator - probs[j]);
                }
            }
        }
        Ok::<GradTable, Error>(grad)
    });
    let mut grad: GradTable = BTreeMap::new();
    for partial in partials {
        merge_grad(&mut grad, partial?);
    }
    Ok(LossReport::new(value, grad))
}

/// Central finite differences of an arbitrary scalar objective over every
/// logit coordinate of the policy. Oracle for the analytic gradients; h
/// must lie in [1e-8, 1e-3].
pub fn finite_diff_gradient(
    loss_fn: &dyn Fn(&TabularPolicy) -> Result<f64>,
    policy: &TabularPolicy,
    h: f64,
) -> Result<GradTable> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::domain("finite-difference step must lie in [1e-8, 1e-3]"));
    }
    let mut probe = policy.clone();
    let keys: Vec<String> = policy.logits().keys().cloned().collect();
    let mut grad: GradTable = BTreeMap::new();
    for key in keys {
        let len = policy.logits()[&key].len();
        let mut row = Vec::with_capacity(len);
        for i in 0..len {
            let original = probe.logits()[&key][i];
            probe.logits_mut().get_mut(&key).unwrap()[i] = original + h;
            let plus = loss_fn(&probe)?;
            probe.logits_mut().get_mut(&key).unwrap()[i] = original - h;
            let minus = loss_fn(&probe)?;
            probe.logits_mut().get_mut(&key).unwrap()[i] = original;
            row.push((plus - minus) / (2.0 * h));
        }
        grad.insert(key, row);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{PromptDist, TerminalReward, Vocab};
    use crate::occupancy::trajectory_distribution;
    use crate::policy::{boltzmann_expert, ContextOrder, ExpertSpec};
    use approx::assert_abs_diff_eq;

    const BUDGET: usize = 100_000;

    fn vocab_ae() -> Vocab {
        Vocab::with_auto_mask(&["a", "</s>"], "</s>").unwrap()
    }

    fn vocab_abe() -> Vocab {
        Vocab::with_auto_mask(&["a", "b", "</s>"], "</s>").unwrap()
    }

    fn materialized(vocab: &Vocab, order: ContextOrder, cap: usize) -> TabularPolicy {
        let mut p = TabularPolicy::new_uniform(vocab.clone(), order, cap).unwrap();
        p.materialize_reachable(&PromptDist::single(vec![]), BUDGET).unwrap();
        p
    }

    fn tilt(policy: &mut TabularPolicy, scale: f64) {
        for (i, (_, l)) in policy.logits_mut().iter_mut().enumerate() {
            for (j, x) in l.iter_mut().enumerate() {
                *x = scale * ((i * 13 + j * 5) as f64 * 0.29).sin();
            }
        }
    }

    fn demo_dataset(vocab: &Vocab, cap: usize) -> DemoDataset {
        let responses: Vec<Vec<TokenId>> =
            vec![vec![0, 0, 2], vec![1, 2], vec![2], vec![0, 1, 0], vec![1, 1, 2]];
        let pairs = responses
            .into_iter()
            .map(|r| Trajectory::new(vocab, &[], &r, cap).unwrap())
            .collect();
        DemoDataset::new(pairs, cap).unwrap()
    }

    #[test]
    fn sft_uniform_policy_mean_log2() {
        // 2 effective actions, one 3-step response: loss = ln 2.
        let v = vocab_ae();
        let p = materialized(&v, ContextOrder::Full, 3);
        let traj = Trajectory::new(&v, &[], &[0, 0, 1], 3).unwrap();
        let data = DemoDataset::new(vec![traj], 3).unwrap();
        let report = sft_loss(&p, &data).unwrap();
        assert_abs_diff_eq!(report.value, 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn sft_perfect_policy_loss_zero() {
        let v = vocab_abe();
        let mut p = materialized(&v, ContextOrder::Full, 3);
        let traj = Trajectory::new(&v, &[], &[0, 1, 2], 3).unwrap();
        // Drive each demo action's logit far up.
        for (state, action) in traj.steps(3) {
            let key = p.context_key(&state);
            let idx = v.action_index(action).unwrap();
            p.logits_mut().get_mut(&key).unwrap()[idx] = 80.0;
        }
        let data = DemoDataset::new(vec![traj], 3).unwrap();
        assert!(sft_loss(&p, &data).unwrap().value < 1e-12);
    }

    #[test]
    fn missing_context_is_key_error() {
        let v = vocab_abe();
        let p = TabularPolicy::new_uniform(v.clone(), ContextOrder::Full, 3).unwrap();
        let data = demo_dataset(&v, 3);
        assert!(matches!(sft_loss(&p, &data), Err(Error::Key(_))));
    }

    #[test]
    fn position_weights() {
        // Weight 1 at k=0, 0 at k=K, 0.5 at K=4, k=2; K=0 keeps weight 1.
        let v = vocab_abe();
        let mut p = materialized(&v, ContextOrder::Full, 5);
        tilt(&mut p, 0.7);

        // Single-token response: weighted loss equals plain SFT loss.
        let single = DemoDataset::new(vec![Trajectory::new(&v, &[], &[2], 5).unwrap()], 5).unwrap();
        assert_abs_diff_eq!(
            weighted_fkl_loss(&p, &single).unwrap().value,
            sft_loss(&p, &single).unwrap().value,
            epsilon = 1e-15
        );

        // Horizon 4: manual weights (1, 0.75, 0.5, 0.25, 0).
        let traj = Trajectory::new(&v, &[], &[0, 1, 0, 1, 2], 5).unwrap();
        let data = DemoDataset::new(vec![traj.clone()], 5).unwrap();
        let report = weighted_fkl_loss(&p, &data).unwrap();
        let mut expected = 0.0;
        for (step, (state, action)) in traj.steps(5).into_iter().enumerate() {
            let w = (4 - step) as f64 / 4.0;
            expected -= w * p.action_distribution(&state).unwrap()
                [v.action_index(action).unwrap()]
            .ln();
        }
        expected /= 5.0;
        assert_abs_diff_eq!(report.value, expected, epsilon = 1e-14);
    }

    #[test]
    fn weighted_loss_zero_on_weighted_tokens() {
        // Perfect on all weighted (non-terminal) tokens: loss 0 even though
        // the terminal token stays uniform.
        let v = vocab_abe();
        let mut p = materialized(&v, ContextOrder::Full, 3);
        let traj = Trajectory::new(&v, &[], &[0, 1, 2], 3).unwrap();
        for (step, (state, action)) in traj.steps(3).into_iter().enumerate() {
            if step == 2 {
                continue;
            }
            let key = p.context_key(&state);
            let idx = v.action_index(action).unwrap();
            p.logits_mut().get_mut(&key).unwrap()[idx] = 80.0;
        }
        let data = DemoDataset::new(vec![traj], 3).unwrap();
        assert!(weighted_fkl_loss(&p, &data).unwrap().value < 1e-12);
    }

    #[test]
    fn traj_fkl_is_scaled_sft() {
        let v = vocab_abe();
        let mut p = materialized(&v, ContextOrder::Full, 3);
        tilt(&mut p, 1.1);
        let data = demo_dataset(&v, 3);
        let sft = sft_loss(&p, &data).unwrap();
        let traj = traj_fkl_loss(&p, &data).unwrap();
        let scale = data.num_steps() as f64 / data.num_pairs() as f64;
        assert_abs_diff_eq!(traj.value, scale * sft.value, epsilon = 1e-12);
        // Gradients are parallel.
        assert!((grad_cosine(&sft.gradient, &traj.gradient) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn traj_fkl_single_step_equals_neg_log_prob() {
        let v = vocab_abe();
        let mut p = materialized(&v, ContextOrder::Full, 3);
        tilt(&mut p, 0.9);
        let traj = Trajectory::new(&v, &[], &[2], 3).unwrap();
        let data = DemoDataset::new(vec![traj.clone()], 3).unwrap();
        assert_abs_diff_eq!(
            traj_fkl_loss(&p, &data).unwrap().value,
            -p.log_prob_trajectory(&traj).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn finite_diff_on_quadratic_is_exact() {
        // Quadratic in the logits: central differences are exact to O(h^2),
        // which at h=1e-4 scale means machine-precision agreement here.
        let v = vocab_ae();
        let mut p = materialized(&v, ContextOrder::Full, 2);
        tilt(&mut p, 0.5);
        let f = |policy: &TabularPolicy| -> Result<f64> {
            Ok(policy
                .logits()
                .values()
                .flat_map(|v| v.iter())
                .map(|x| 1.5 * x * x + 0.3 * x)
                .sum())
        };
        let fd = finite_diff_gradient(&f, &p, 1e-4).unwrap();
        for (key, row) in &fd {
            for (i, g) in row.iter().enumerate() {
                let x = p.logits()[key][i];
                assert_abs_diff_eq!(*g, 3.0 * x + 0.3, epsilon = 1e-8);
            }
        }
        assert!(finite_diff_gradient(&f, &p, 1e-2).is_err());
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let v = vocab_abe();
        let mut p = materialized(&v, ContextOrder::Full, 3);
        tilt(&mut p, 1.3);
        let data = demo_dataset(&v, 3);
        let report = sft_loss(&p, &data).unwrap();
        let fd = finite_diff_gradient(&|q| Ok(sft_loss(q, &data)?.value), &p, 1e-6).unwrap();
        assert!(grad_rel_error(&report.gradient, &fd) <= 1e-6);
    }

    #[test]
    fn weighted_and_traj_gradients_match_finite_differences() {
        let v = vocab_abe();
        for order in [ContextOrder::Full, ContextOrder::Markov(1)] {
            let mut p = materialized(&v, order, 3);
            tilt(&mut p, 0.8);
            let data = demo_dataset(&v, 3);
            let wf = weighted_fkl_loss(&p, &data).unwrap();
            let fd =
                finite_diff_gradient(&|q| Ok(weighted_fkl_loss(q, &data)?.value), &p, 1e-6)
                    .unwrap();
            assert!(grad_rel_error(&wf.gradient, &fd) <= 1e-6);

            let tf = traj_fkl_loss(&p, &data).unwrap();
            let fd2 =
                finite_diff_gradient(&|q| Ok(traj_fkl_loss(q, &data)?.value), &p, 1e-6).unwrap();
            assert!(grad_rel_error(&tf.gradient, &fd2) <= 1e-6);
        }
    }

    #[test]
    fn exact_fkl_zero_at_expert() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 3;
        let reward = TerminalReward::from_fn(&v, &pd, cap, BUDGET, |t| {
            0.4 * t.response().len() as f64
        })
        .unwrap();
        let expert =
            boltzmann_expert(&ExpertSpec::new(reward, 1.0).unwrap(), &v, &pd, cap, BUDGET)
                .unwrap();
        let rho_exp = exact_occupancy(&expert, &pd, 1.0, BUDGET).unwrap();
        let report = exact_fkl_occupancy_loss(&expert, &rho_exp, &pd, BUDGET).unwrap();
        assert!(report.value.abs() <= 1e-12);
        assert!(report.grad_norm() <= 1e-12);
    }

    #[test]
    fn exact_fkl_gradient_matches_finite_differences() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 3;
        let mut expert_like = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut expert_like, 1.0);
        let rho_exp = exact_occupancy(&expert_like, &pd, 1.0, BUDGET).unwrap();

        for order in [ContextOrder::Full, ContextOrder::Markov(1)] {
            let mut p = materialized(&v, order, cap);
            tilt(&mut p, 0.6);
            let report = exact_fkl_occupancy_loss(&p, &rho_exp, &pd, BUDGET).unwrap();
            assert!(report.value >= 0.0);
            let fd = finite_diff_gradient(
                &|q| Ok(exact_fkl_occupancy_loss(q, &rho_exp, &pd, BUDGET)?.value),
                &p,
                1e-6,
            )
            .unwrap();
            let err = grad_rel_error(&report.gradient, &fd);
            assert!(err <= 1e-5, "order {order:?}: rel err {err}");
        }
    }

    #[test]
    fn exact_fkl_descends_under_small_steps() {
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 3;
        let mut target = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut target, 1.0);
        let rho_exp = exact_occupancy(&target, &pd, 1.0, BUDGET).unwrap();
        let mut p = materialized(&v, ContextOrder::Full, cap);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let report = exact_fkl_occupancy_loss(&p, &rho_exp, &pd, BUDGET).unwrap();
            assert!(report.value <= last + 1e-12, "{} > {last}", report.value);
            last = report.value;
            for (key, grads) in &report.gradient {
                let logits = p.logits_mut().get_mut(key).unwrap();
                for (l, g) in logits.iter_mut().zip(grads) {
                    *l -= 0.2 * g;
                }
            }
        }
        assert!(last < 0.05);
    }

    #[test]
    fn exact_weighted_losses_agree_with_large_sample_counts() {
        // Sampling the expert heavily and averaging the empirical loss must
        // approach the exact-weighted loss.
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 3;
        let mut expert = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut expert, 0.9);
        let target = trajectory_distribution(&expert, &pd, BUDGET).unwrap();

        let mut student = materialized(&v, ContextOrder::Markov(1), cap);
        tilt(&mut student, 0.4);

        let data = DemoDataset::sample(&expert, &pd, 40_000, 5).unwrap();
        let exact = sft_loss_exact(&student, &target).unwrap();
        let empirical = sft_loss(&student, &data).unwrap();
        assert!((exact.value - empirical.value).abs() < 0.02);
    }

    #[test]
    fn convergence_drives_forward_kl_to_zero() {
        // Full-order policy fit by SFT on exact weights reproduces the
        // expert trajectory distribution entrywise.
        use crate::occupancy::{divergence, DivergenceKind};
        let v = vocab_abe();
        let pd = PromptDist::single(vec![]);
        let cap = 3;
        let mut expert = materialized(&v, ContextOrder::Full, cap);
        tilt(&mut expert, 1.2);
        let target = trajectory_distribution(&expert, &pd, BUDGET).unwrap();
        let mut student = materialized(&v, ContextOrder::Full, cap);
        for _ in 0..50_000 {
            let report = sft_loss_exact(&student, &target).unwrap();
            if report.grad_norm() <= 1e-13 {
                break;
            }
            for (key, grads) in &report.gradient {
                let logits = student.logits_mut().get_mut(key).unwrap();
                for (l, g) in logits.iter_mut().zip(grads) {
                    *l -= 2.0 * g;
                }
            }
        }
        let fitted = trajectory_distribution(&student, &pd, BUDGET).unwrap();
        let fkl =
            divergence(&target.joint(), &fitted.joint(), DivergenceKind::ForwardKl).unwrap();
        assert!(fkl <= 1e-6, "fkl = {fkl}");
        let max_abs = target
            .conditionals()
            .iter()
            .map(|(key, &t)| (t - fitted.conditionals()[key]).abs())
            .fold(0.0, f64::max);
        assert!(max_abs <= 1e-8, "max abs entry error {max_abs:.3e}");
    }

    #[test]
    fn loss_report_serializes_to_json() {
        let v = vocab_abe();
        let p = materialized(&v, ContextOrder::Full, 2);
        let traj = Trajectory::new(&v, &[], &[0, 2], 2).unwrap();
        let data = DemoDataset::new(vec![traj], 2).unwrap();
        let report = sft_loss(&p, &data).unwrap();
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert!(json["value"].as_f64().unwrap().is_finite());
        assert!(json["gradient"].as_object().unwrap().len() >= 2);
    }
}
