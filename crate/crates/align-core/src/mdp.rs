//! The deterministic token-generation MDP.
//!
//! States are (prompt, generated-prefix) pairs, actions are vocabulary
//! tokens, the transition appends the chosen token, and any state whose
//! generated part contains EOS — or has reached the generation capacity —
//! is absorbing. Rewards are terminal-only, keyed by complete trajectories.
//!
//! Everything here is a pure function on immutable values, so all operations
//! are safe for concurrent read-only use. Trajectory enumeration is
//! parallelized over first-token subtrees with a deterministic merge order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec;

/// Index into a [`Vocab`]'s token list.
pub type TokenId = u32;

/// Default cap on the number of trajectories an enumeration may produce.
pub const DEFAULT_ENUM_BUDGET: usize = 1_000_000;

/// An ordered token vocabulary with designated EOS and MASK tokens.
///
/// MASK is a padding convention only: it is never a legal action and never
/// appears in states. The action space is every other token, EOS included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: TokenId,
    mask_id: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: TokenId, mask_id: TokenId) -> Result<Self> {
        let n = tokens.len() as u32;
        if eos_id >= n || mask_id >= n {
            return Err(Error::domain("eos/mask id out of range"));
        }
        if eos_id == mask_id {
            return Err(Error::domain("eos and mask must be distinct tokens"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::domain(format!("duplicate token symbol {t:?}")));
            }
        }
        Ok(Vocab { tokens, eos_id, mask_id })
    }

    /// Convenience constructor: the given symbols plus an appended
    /// `<mask>` token; `eos` names the EOS symbol among `symbols`.
    pub fn with_auto_mask(symbols: &[&str], eos: &str) -> Result<Self> {
        let mut tokens: Vec<String> = symbols.iter().map(|s| s.to_string()).collect();
        let eos_id = tokens
            .iter()
            .position(|t| t == eos)
            .ok_or_else(|| Error::domain(format!("eos symbol {eos:?} not in vocab")))?
            as TokenId;
        let mask_id = tokens.len() as TokenId;
        tokens.push("<mask>".to_string());
        Vocab::new(tokens, eos_id, mask_id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol).map(|i| i as TokenId)
    }

    /// All legal action ids in ascending order (every token except MASK).
    pub fn actions(&self) -> Vec<TokenId> {
        (0..self.tokens.len() as TokenId).filter(|&t| t != self.mask_id).collect()
    }

    /// Number of legal actions (`|vocab| - 1`).
    pub fn num_actions(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Dense index of a token within the action list, skipping MASK.
    pub fn action_index(&self, token: TokenId) -> Result<usize> {
        if token == self.mask_id {
            return Err(Error::domain("mask token is not a legal action"));
        }
        if token as usize >= self.tokens.len() {
            return Err(Error::domain(format!("token id {token} out of range")));
        }
        let idx = if token > self.mask_id { token - 1 } else { token };
        Ok(idx as usize)
    }

    /// Inverse of [`Vocab::action_index`].
    pub fn action_token(&self, index: usize) -> Result<TokenId> {
        if index >= self.num_actions() {
            return Err(Error::domain(format!("action index {index} out of range")));
        }
        let idx = index as TokenId;
        Ok(if idx >= self.mask_id { idx + 1 } else { idx })
    }

    /// Short hex digest of the token list and special ids, used to pair
    /// serialized policies with the vocabulary they were built against.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update(self.eos_id.to_le_bytes());
        hasher.update(self.mask_id.to_le_bytes());
        let digest = hasher.finalize();
        hex_prefix(&digest, 16)
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.tokens.len() {
            return Err(Error::domain(format!("token id {token} out of range")));
        }
        Ok(())
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// A prompt plus a generated response prefix, capped at `capacity` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    prompt: Vec<TokenId>,
    generated: Vec<TokenId>,
    capacity: usize,
}

impl State {
    /// Initial state for a prompt: empty generation.
    pub fn initial(vocab: &Vocab, prompt: &[TokenId], capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::domain("capacity must be at least 1"));
        }
        for &t in prompt {
            vocab.check_token(t)?;
            if t == vocab.mask_id {
                return Err(Error::domain("mask token may not appear in a prompt"));
            }
            if t == vocab.eos_id {
                return Err(Error::domain("eos token may not appear in a prompt"));
            }
        }
        Ok(State { prompt: prompt.to_vec(), generated: Vec::new(), capacity })
    }

    /// Rebuild an intermediate state; validates the generated prefix.
    pub fn with_generated(
        vocab: &Vocab,
        prompt: &[TokenId],
        generated: &[TokenId],
        capacity: usize,
    ) -> Result<Self> {
        let mut state = State::initial(vocab, prompt, capacity)?;
        if generated.len() > capacity {
            return Err(Error::domain("generated prefix exceeds capacity"));
        }
        for (i, &t) in generated.iter().enumerate() {
            vocab.check_token(t)?;
            if t == vocab.mask_id {
                return Err(Error::domain("mask token may not appear in a state"));
            }
            if t == vocab.eos_id && i + 1 != generated.len() {
                return Err(Error::domain("token after eos in generated prefix"));
            }
        }
        state.generated = generated.to_vec();
        Ok(state)
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Generation step index: how many tokens have been emitted so far.
    pub fn depth(&self) -> usize {
        self.generated.len()
    }

    /// Terminal iff the generated prefix contains EOS or has filled the
    /// capacity.
    pub fn is_terminal(&self, vocab: &Vocab) -> bool {
        self.generated.len() == self.capacity || self.generated.contains(&vocab.eos_id)
    }

    /// Canonical table key for this state.
    pub fn key(&self) -> String {
        keys::state_key(&self.prompt, &self.generated)
    }
}

/// Deterministic transition: append `action` to the generated prefix.
///
/// Terminal states are absorbing: the state is returned unchanged for every
/// action. MASK and out-of-range tokens are rejected.
pub fn transition(vocab: &Vocab, state: &State, action: TokenId) -> Result<State> {
    vocab.check_token(action)?;
    if action == vocab.mask_id {
        return Err(Error::domain("mask token is not a legal action"));
    }
    if state.is_terminal(vocab) {
        return Ok(state.clone());
    }
    let mut next = state.clone();
    next.generated.push(action);
    Ok(next)
}

/// A complete generation: the response either ends in EOS or was truncated
/// at capacity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    prompt: Vec<TokenId>,
    response: Vec<TokenId>,
}

impl Trajectory {
    pub fn new(
        vocab: &Vocab,
        prompt: &[TokenId],
        response: &[TokenId],
        capacity: usize,
    ) -> Result<Self> {
        if response.is_empty() || response.len() > capacity {
            return Err(Error::domain(format!(
                "response length {} outside 1..={capacity}",
                response.len()
            )));
        }
        for (i, &t) in response.iter().enumerate() {
            vocab.check_token(t)?;
            if t == vocab.mask_id {
                return Err(Error::domain("mask token may not appear in a response"));
            }
            if t == vocab.eos_id && i + 1 != response.len() {
                return Err(Error::domain("eos may only appear at the final position"));
            }
        }
        let last = *response.last().unwrap();
        if last != vocab.eos_id && response.len() < capacity {
            return Err(Error::domain("response without eos must fill the capacity"));
        }
        // Reuse prompt validation.
        State::initial(vocab, prompt, capacity)?;
        Ok(Trajectory { prompt: prompt.to_vec(), response: response.to_vec() })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn response(&self) -> &[TokenId] {
        &self.response
    }

    /// Terminal step index K (response length minus one).
    pub fn horizon(&self) -> usize {
        self.response.len() - 1
    }

    /// Canonical table key: same shape as a state key over the full response.
    pub fn key(&self) -> String {
        keys::state_key(&self.prompt, &self.response)
    }

    /// The per-step (state, action) decomposition of this trajectory.
    pub fn steps(&self, capacity: usize) -> Vec<(State, TokenId)> {
        (0..self.response.len())
            .map(|t| {
                let state = State {
                    prompt: self.prompt.clone(),
                    generated: self.response[..t].to_vec(),
                    capacity,
                };
                (state, self.response[t])
            })
            .collect()
    }
}

/// A finite distribution over prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDist {
    prompts: Vec<Vec<TokenId>>,
    probs: Vec<f64>,
}

impl PromptDist {
    pub fn new(prompts: Vec<Vec<TokenId>>, probs: Vec<f64>) -> Result<Self> {
        if prompts.is_empty() || prompts.len() != probs.len() {
            return Err(Error::domain("prompts and probs must be non-empty and parallel"));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::domain("prompt probabilities must be finite and >= 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("prompt probabilities sum to {total}, not 1")));
        }
        Ok(PromptDist { prompts, probs })
    }

    /// Single prompt with probability one.
    pub fn single(prompt: Vec<TokenId>) -> Self {
        PromptDist { prompts: vec![prompt], probs: vec![1.0] }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], f64)> {
        self.prompts.iter().map(|p| p.as_slice()).zip(self.probs.iter().copied())
    }

    pub fn prompts(&self) -> &[Vec<TokenId>] {
        &self.prompts
    }

    pub fn prob_of(&self, prompt: &[TokenId]) -> Option<f64> {
        self.prompts.iter().position(|p| p == prompt).map(|i| self.probs[i])
    }

    /// Inverse-CDF sample of a prompt index.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Terminal-only reward: a score for every complete trajectory, zero
/// elsewhere by construction (the table only keys complete trajectories).
#[derive(Debug, Clone, Default)]
pub struct TerminalReward {
    table: BTreeMap<String, f64>,
}

impl TerminalReward {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, traj: &Trajectory, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::domain("reward scores must be finite"));
        }
        self.table.insert(traj.key(), score);
        Ok(())
    }

    /// Build a table over every enumerable trajectory by evaluating `f`.
    pub fn from_fn(
        vocab: &Vocab,
        prompt_dist: &PromptDist,
        capacity: usize,
        budget: usize,
        mut f: impl FnMut(&Trajectory) -> f64,
    ) -> Result<Self> {
        let mut reward = TerminalReward::new();
        for (prompt, _) in prompt_dist.iter() {
            for traj in enumerate_trajectories(vocab, prompt, capacity, budget)? {
                let score = f(&traj);
                reward.insert(&traj, score)?;
            }
        }
        Ok(reward)
    }

    /// Indicator reward: `score` on the target response, zero elsewhere.
    pub fn indicator(
        vocab: &Vocab,
        prompt_dist: &PromptDist,
        capacity: usize,
        budget: usize,
        target: &[TokenId],
        score: f64,
    ) -> Result<Self> {
        Self::from_fn(vocab, prompt_dist, capacity, budget, |traj| {
            if traj.response() == target {
                score
            } else {
                0.0
            }
        })
    }

    pub fn get(&self, traj: &Trajectory) -> Result<f64> {
        self.table
            .get(&traj.key())
            .copied()
            .ok_or_else(|| Error::key(format!("no reward entry for trajectory {}", traj.key())))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, f64)> {
        self.table.iter().map(|(k, &v)| (k, v))
    }

    /// Largest score in the table.
    pub fn max_score(&self) -> Option<f64> {
        self.table.values().copied().fold(None, |acc, v| match acc {
            None => Some(v),
            Some(m) => Some(m.max(v)),
        })
    }
}

/// Number of trajectories `enumerate_trajectories` will produce, in exact
/// integer arithmetic: responses of length `k <= capacity` ending in EOS
/// contribute `(A-1)^(k-1)` each (A legal actions incl. EOS), plus
/// `(A-1)^capacity` truncated ones.
pub fn predicted_trajectory_count(num_actions: usize, capacity: usize) -> u128 {
    let non_eos = num_actions.saturating_sub(1) as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1; // non_eos^(k-1)
    for _ in 1..=capacity {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(non_eos);
    }
    total.saturating_add(pow) // pow = non_eos^capacity
}

/// Every trajectory reachable from `prompt`, in depth-first order with
/// actions visited in ascending token id.
///
/// Fails with a budget error before doing any work if the predicted
/// trajectory count exceeds `budget`.
pub fn enumerate_trajectories(
    vocab: &Vocab,
    prompt: &[TokenId],
    capacity: usize,
    budget: usize,
) -> Result<Vec<Trajectory>> {
    if vocab.is_empty() {
        return Err(Error::domain("vocab must be non-empty"));
    }
    if capacity == 0 {
        return Err(Error::domain("capacity must be at least 1"));
    }
    let predicted = predicted_trajectory_count(vocab.num_actions(), capacity);
    if predicted > budget as u128 {
        return Err(Error::Budget { predicted, budget: budget as u128 });
    }
    let root = State::initial(vocab, prompt, capacity)?;

    // First-token subtrees are independent; merge in action order keeps the
    // overall depth-first order.
    let actions = vocab.actions();
    let subtrees = exec::ordered_map(&actions, |&a| {
        let mut out = Vec::new();
        let state = transition(vocab, &root, a).expect("legal action");
        collect_from(vocab, &state, &mut out);
        out
    });
    let mut result = Vec::with_capacity(predicted as usize);
    for sub in subtrees {
        result.extend(sub);
    }
    Ok(result)
}

fn collect_from(vocab: &Vocab, state: &State, out: &mut Vec<Trajectory>) {
    if state.is_terminal(vocab) {
        out.push(Trajectory {
            prompt: state.prompt.clone(),
            response: state.generated.clone(),
        });
        return;
    }
    for a in vocab.actions() {
        let next = transition(vocab, state, a).expect("legal action");
        collect_from(vocab, &next, out);
    }
}

/// Canonical string keys for states, state-action pairs, and trajectories.
///
/// Token ids are dot-separated; `|` separates prompt from generated part;
/// `#` introduces the action of a state-action key. None of the characters
/// can appear inside a token id, so keys parse unambiguously and sort
/// deterministically.
pub mod keys {
    use super::TokenId;
    use crate::error::{Error, Result};

    fn join(tokens: &[TokenId]) -> String {
        let mut s = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                s.push('.');
            }
            s.push_str(&t.to_string());
        }
        s
    }

    fn split(part: &str) -> Result<Vec<TokenId>> {
        if part.is_empty() {
            return Ok(Vec::new());
        }
        part.split('.')
            .map(|p| p.parse::<TokenId>().map_err(|_| Error::key(format!("bad token id {p:?}"))))
            .collect()
    }

    /// `prompt|generated`, e.g. `0.1|2.3`.
    pub fn state_key(prompt: &[TokenId], generated: &[TokenId]) -> String {
        format!("{}|{}", join(prompt), join(generated))
    }

    /// `prompt|generated#action`.
    pub fn sa_key(prompt: &[TokenId], generated: &[TokenId], action: TokenId) -> String {
        format!("{}|{}#{action}", join(prompt), join(generated))
    }

    /// Parse a state/trajectory key back into (prompt, generated) ids.
    pub fn parse_state_key(key: &str) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        let (p, g) = key
            .split_once('|')
            .ok_or_else(|| Error::key(format!("malformed state key {key:?}")))?;
        Ok((split(p)?, split(g)?))
    }

    /// Parse a state-action key into (prompt, generated, action).
    pub fn parse_sa_key(key: &str) -> Result<(Vec<TokenId>, Vec<TokenId>, TokenId)> {
        let (state, action) = key
            .rsplit_once('#')
            .ok_or_else(|| Error::key(format!("malformed state-action key {key:?}")))?;
        let (prompt, generated) = parse_state_key(state)?;
        let action = action
            .parse::<TokenId>()
            .map_err(|_| Error::key(format!("bad action id in key {key:?}")))?;
        Ok((prompt, generated, action))
    }
}
