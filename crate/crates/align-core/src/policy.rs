//! Tabular autoregressive softmax policies over the prefix tree.
//!
//! A policy maps a context key to a logit vector over the legal actions
//! (MASK excluded, EOS included). The context key is either the full
//! prompt-plus-prefix (`ContextOrder::Full`) or the trailing `k` tokens of
//! it (`ContextOrder::Markov(k)`), which realizes a capacity-restricted
//! policy class: distinct states that share a suffix share parameters.
//!
//! Softmax parameterization keeps every action probability strictly
//! positive, so trajectory log-likelihoods and forward KL are always finite.
//!
//! Policies are immutable value objects during evaluation; training code
//! mutates logits through [`TabularPolicy::logits_mut`] under exclusive
//! access.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{
    enumerate_trajectories, transition, PromptDist, State, TerminalReward, TokenId, Trajectory,
    Vocab,
};

/// How much trailing context conditions the next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContextOrder {
    /// Condition on the entire prompt and generated prefix.
    Full,
    /// Condition on the last `k` tokens of prompt-plus-prefix.
    Markov(usize),
}

impl std::fmt::Display for ContextOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContextOrder::Full => write!(f, "full"),
            ContextOrder::Markov(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for ContextOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(ContextOrder::Full);
        }
        s.parse::<usize>()
            .map(ContextOrder::Markov)
            .map_err(|_| Error::config(format!("bad context order {s:?}")))
    }
}

/// Context key for a state under the given order.
///
/// `Full` returns the state's full prefix key. `Markov(k)` returns the last
/// `min(k, available)` tokens of prompt‖generated prefixed with a `~`
/// marker; the marker says the key is position-independent (a pure suffix),
/// so restricted keys can never collide with full-prefix keys.
pub fn project_context(order: ContextOrder, state: &State) -> String {
    match order {
        ContextOrder::Full => state.key(),
        ContextOrder::Markov(k) => {
            let mut all: Vec<TokenId> =
                Vec::with_capacity(state.prompt().len() + state.generated().len());
            all.extend_from_slice(state.prompt());
            all.extend_from_slice(state.generated());
            let start = all.len().saturating_sub(k);
            let mut key = String::from("~");
            for (i, t) in all[start..].iter().enumerate() {
                if i > 0 {
                    key.push('.');
                }
                key.push_str(&t.to_string());
            }
            key
        }
    }
}

/// Specification of a ground-truth expert: Boltzmann-optimal with respect to
/// a hidden terminal reward at temperature `tau`.
#[derive(Debug, Clone)]
pub struct ExpertSpec {
    pub hidden_reward: TerminalReward,
    pub temperature: f64,
}

impl ExpertSpec {
    pub fn new(hidden_reward: TerminalReward, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::domain("temperature must be positive"));
        }
        Ok(ExpertSpec { hidden_reward, temperature })
    }
}

/// A tabular softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    order: ContextOrder,
    capacity: usize,
    logits: BTreeMap<String, Vec<f64>>,
}

impl TabularPolicy {
    /// Empty policy; contexts are added by materialization. Every context
    /// starts at zero logits, i.e. the uniform distribution.
    pub fn new_uniform(vocab: Vocab, order: ContextOrder, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::domain("capacity must be at least 1"));
        }
        Ok(TabularPolicy { vocab, order, capacity, logits: BTreeMap::new() })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> ContextOrder {
        self.order
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn logits(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut BTreeMap<String, Vec<f64>> {
        &mut self.logits
    }

    pub fn context_key(&self, state: &State) -> String {
        project_context(self.order, state)
    }

    /// Insert a zero logit vector for `key` if absent.
    pub fn ensure_context(&mut self, key: &str) {
        let n = self.vocab.num_actions();
        self.logits.entry(key.to_string()).or_insert_with(|| vec![0.0; n]);
    }

    /// Materialize every context reachable from the prompt distribution.
    pub fn materialize_reachable(&mut self, prompt_dist: &PromptDist, budget: usize) -> Result<()> {
        for (prompt, _) in prompt_dist.iter() {
            // The budget check piggybacks on trajectory enumeration.
            enumerate_trajectories(&self.vocab, prompt, self.capacity, budget)?;
            let root = State::initial(&self.vocab, prompt, self.capacity)?;
            self.materialize_subtree(&root);
        }
        Ok(())
    }

    fn materialize_subtree(&mut self, state: &State) {
        if state.is_terminal(&self.vocab) {
            return;
        }
        let key = self.context_key(state);
        self.ensure_context(&key);
        for a in self.vocab.actions() {
            let next = transition(&self.vocab, state, a).expect("legal action");
            self.materialize_subtree(&next);
        }
    }

    /// Materialize the contexts visited by the given states.
    pub fn ensure_states<'a>(&mut self, states: impl IntoIterator<Item = &'a State>) {
        for s in states {
            let key = self.context_key(s);
            self.ensure_context(&key);
        }
    }

    /// Probabilities over the legal actions at a non-terminal state.
    pub fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        if state.is_terminal(&self.vocab) {
            return Err(Error::domain("action distribution of a terminal state"));
        }
        let key = self.context_key(state);
        let logits = self
            .logits
            .get(&key)
            .ok_or_else(|| Error::key(format!("no logits for context {key:?}")))?;
        Ok(softmax(logits))
    }

    /// log pi(action | state) for a single step.
    pub fn log_prob_step(&self, state: &State, action: TokenId) -> Result<f64> {
        let idx = self.vocab.action_index(action)?;
        if state.is_terminal(&self.vocab) {
            return Err(Error::domain("log-prob of an action at a terminal state"));
        }
        let key = self.context_key(state);
        let logits = self
            .logits
            .get(&key)
            .ok_or_else(|| Error::key(format!("no logits for context {key:?}")))?;
        Ok(log_softmax_at(logits, idx))
    }

    /// Sum of per-step log-probabilities along a complete trajectory.
    pub fn log_prob_trajectory(&self, traj: &Trajectory) -> Result<f64> {
        if traj.response().len() > self.capacity {
            return Err(Error::domain("trajectory exceeds policy capacity"));
        }
        let mut total = 0.0;
        for (state, action) in traj.steps(self.capacity) {
            total += self.log_prob_step(&state, action)?;
        }
        Ok(total)
    }

    /// Ancestral sampling until a terminal state. Deterministic per seed.
    ///
    /// Contexts missing from the table sample uniformly (the zero-logit
    /// default) without mutating the policy.
    pub fn sample_response(&self, prompt: &[TokenId], rng_seed: u64) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_response_with(prompt, &mut rng)
    }

    /// As [`TabularPolicy::sample_response`], but drawing from a caller
    /// -owned RNG stream.
    pub fn sample_response_with(
        &self,
        prompt: &[TokenId],
        rng: &mut impl Rng,
    ) -> Result<Trajectory> {
        let mut state = State::initial(&self.vocab, prompt, self.capacity)?;
        while !state.is_terminal(&self.vocab) {
            let key = self.context_key(&state);
            let probs = match self.logits.get(&key) {
                Some(logits) => softmax(logits),
                None => vec![1.0 / self.vocab.num_actions() as f64; self.vocab.num_actions()],
            };
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = self.vocab.num_actions() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            let action = self.vocab.action_token(chosen)?;
            state = transition(&self.vocab, &state, action)?;
        }
        Trajectory::new(&self.vocab, prompt, state.generated(), self.capacity)
    }

    /// Serialize to the text format: a header binding the policy to its
    /// vocabulary, then one `key<TAB>logits` row per context with
    /// 17-significant-digit decimals, sorted by key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# tabular policy v1\n");
        out.push_str(&format!("vocab_hash = {}\n", self.vocab.hash()));
        out.push_str(&format!("context_order = {}\n", self.order));
        out.push_str(&format!("capacity = {}\n", self.capacity));
        for (key, logits) in &self.logits {
            out.push_str(key);
            for l in logits {
                out.push('\t');
                out.push_str(&format!("{l:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the text format. The vocabulary must hash to the header value.
    pub fn from_text(text: &str, vocab: Vocab) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic.trim() != "# tabular policy v1" {
            return Err(Error::domain("not a tabular policy file"));
        }
        let mut header = BTreeMap::new();
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once(" = ") {
                header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                rows.push(line);
            }
        }
        let hash = header
            .get("vocab_hash")
            .ok_or_else(|| Error::domain("missing vocab_hash header"))?;
        if *hash != vocab.hash() {
            return Err(Error::domain("vocab hash mismatch"));
        }
        let order: ContextOrder = header
            .get("context_order")
            .ok_or_else(|| Error::domain("missing context_order header"))?
            .parse()?;
        let capacity: usize = header
            .get("capacity")
            .ok_or_else(|| Error::domain("missing capacity header"))?
            .parse()
            .map_err(|_| Error::domain("bad capacity header"))?;
        let mut policy = TabularPolicy::new_uniform(vocab, order, capacity)?;
        let n = policy.vocab.num_actions();
        for row in rows {
            let mut parts = row.split('\t');
            let key = parts.next().unwrap_or_default().to_string();
            let logits: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| Error::domain("bad logit value")))
                .collect::<Result<_>>()?;
            if logits.len() != n {
                return Err(Error::domain(format!(
                    "row for {key:?} has {} logits, expected {n}",
                    logits.len()
                )));
            }
            policy.logits.insert(key, logits);
        }
        Ok(policy)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// `log softmax(logits)[idx]`, stable for widely spread logits.
pub fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[idx] - lse
}

/// Construct the ground-truth expert: the full-context policy whose
/// trajectory distribution is `d(y|x) proportional to exp(r(x,y)/tau)`.
///
/// Built by backward induction over the prefix tree: each node's conditional
/// is the softmax of its children's log partition functions, computed in log
/// space so extreme temperatures stay finite.
pub fn boltzmann_expert(
    spec: &ExpertSpec,
    vocab: &Vocab,
    prompt_dist: &PromptDist,
    capacity: usize,
    budget: usize,
) -> Result<TabularPolicy> {
    let mut policy = TabularPolicy::new_uniform(vocab.clone(), ContextOrder::Full, capacity)?;
    for (prompt, _) in prompt_dist.iter() {
        // Budget guard for the walk.
        enumerate_trajectories(vocab, prompt, capacity, budget)?;
        let root = State::initial(vocab, prompt, capacity)?;
        log_partition(&mut policy, spec, &root)?;
    }
    Ok(policy)
}

/// Returns log Z(state); fills in logits for non-terminal nodes.
fn log_partition(policy: &mut TabularPolicy, spec: &ExpertSpec, state: &State) -> Result<f64> {
    let vocab = policy.vocab.clone();
    if state.is_terminal(&vocab) {
        let traj = Trajectory::new(&vocab, state.prompt(), state.generated(), state.capacity())?;
        return Ok(spec.hidden_reward.get(&traj)? / spec.temperature);
    }
    let mut child_logz = vec![0.0; vocab.num_actions()];
    for a in vocab.actions() {
        let next = transition(&vocab, state, a)?;
        let idx = vocab.action_index(a)?;
        child_logz[idx] = log_partition(policy, spec, &next)?;
    }
    let max = child_logz.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logz = child_logz.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    policy.logits.insert(state.key(), child_logz);
    Ok(logz)
}
