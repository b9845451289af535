//! Experiment configuration: flat TOML with one section per concern.
//!
//! The file format is `key = value` entries grouped into the sections
//! `[vocab]`, `[mdp]`, `[prompts]`, `[expert]`, `[policy]`, `[data]`,
//! `[train]`, `[optimizer]`, `[adversarial]`. Tokens are written as their
//! symbols; ids are assigned by position in `vocab.tokens`. See the README
//! for the full schema.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adversarial::{AdversarialObjective, Estimator, Granularity, Schedule};
use crate::error::{Error, Result};
use crate::fdiv::FDivFamily;
use crate::harness::optimize::{OptMethod, OptimizerConfig};
use crate::mdp::{TerminalReward, TokenId, PromptDist, Vocab, DEFAULT_ENUM_BUDGET};
use crate::policy::{ContextOrder, ExpertSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub vocab: VocabSection,
    pub mdp: MdpSection,
    pub prompts: PromptsSection,
    pub expert: ExpertSection,
    pub policy: PolicySection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub adversarial: AdversarialSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabSection {
    pub tokens: Vec<String>,
    pub eos: String,
    /// Padding marker; appended automatically when omitted.
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpSection {
    pub capacity: usize,
    #[serde(default)]
    pub enum_budget: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptsSection {
    pub prompts: Vec<Vec<String>>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertSection {
    pub temperature: f64,
    #[serde(default)]
    pub default_reward: f64,
    #[serde(default)]
    pub rewards: Vec<RewardEntry>,
    /// Designated expert modes for the mode-mass metric; defaults to the
    /// highest-scoring reward entries.
    #[serde(default)]
    pub modes: Option<Vec<ModeEntry>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardEntry {
    /// Restrict to one prompt; applies to every prompt when omitted.
    #[serde(default)]
    pub prompt: Option<Vec<String>>,
    pub response: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeEntry {
    #[serde(default)]
    pub prompt: Option<Vec<String>>,
    pub response: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySection {
    pub context_order: OrderSpec,
}

/// Context order: an integer or the string "full".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Markov(usize),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    /// "exact" for enumeration-based expert feedback, "sampled" for a
    /// finite demonstration dataset.
    pub mode: String,
    #[serde(default)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    /// One of sft, wfkl, traj_fkl, exact_fkl, rkl_adv, js_adv, fgan.
    pub objective: String,
    #[serde(default)]
    pub granularity: Option<String>,
    #[serde(default)]
    pub fgan_family: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Record metric rows every this many optimizer iterations (gradient
    /// objectives only; 0 records initial and final rows).
    #[serde(default)]
    pub metrics_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSection {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_method() -> String {
    "gd".to_string()
}
fn default_step_size() -> f64 {
    0.5
}
fn default_max_iters() -> usize {
    2000
}
fn default_grad_tol() -> f64 {
    1e-8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            method: default_method(),
            step_size: default_step_size(),
            max_iters: default_max_iters(),
            grad_tol: default_grad_tol(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialSection {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_disc_steps")]
    pub disc_steps: usize,
    #[serde(default = "default_policy_steps")]
    pub policy_steps: usize,
    #[serde(default = "default_disc_step_size")]
    pub disc_step_size: f64,
    #[serde(default = "default_policy_step_size")]
    pub policy_step_size: f64,
    /// "gd" (plain gradient steps, the default) or "adam".
    #[serde(default = "default_method")]
    pub disc_method: String,
    /// "exact" or "sampled".
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default = "default_sample_n")]
    pub sample_n: usize,
}

fn default_rounds() -> usize {
    150
}
fn default_disc_steps() -> usize {
    50
}
fn default_policy_steps() -> usize {
    1
}
fn default_disc_step_size() -> f64 {
    1.0
}
fn default_policy_step_size() -> f64 {
    0.5
}
fn default_estimator() -> String {
    "exact".to_string()
}
fn default_sample_n() -> usize {
    1024
}

impl Default for AdversarialSection {
    fn default() -> Self {
        AdversarialSection {
            rounds: default_rounds(),
            disc_steps: default_disc_steps(),
            policy_steps: default_policy_steps(),
            disc_step_size: default_disc_step_size(),
            policy_step_size: default_policy_step_size(),
            disc_method: default_method(),
            estimator: default_estimator(),
            sample_n: default_sample_n(),
        }
    }
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    Sft,
    Wfkl,
    TrajFkl,
    ExactFkl,
    RklAdv,
    JsAdv,
    FGan(FDivFamily),
}

impl ObjectiveKind {
    pub fn name(&self) -> String {
        match self {
            ObjectiveKind::Sft => "sft".into(),
            ObjectiveKind::Wfkl => "wfkl".into(),
            ObjectiveKind::TrajFkl => "traj_fkl".into(),
            ObjectiveKind::ExactFkl => "exact_fkl".into(),
            ObjectiveKind::RklAdv => "rkl_adv".into(),
            ObjectiveKind::JsAdv => "js_adv".into(),
            ObjectiveKind::FGan(f) => format!("fgan_{}", f.name()),
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, ObjectiveKind::RklAdv | ObjectiveKind::JsAdv | ObjectiveKind::FGan(_))
    }

    pub fn adversarial_objective(&self) -> Option<AdversarialObjective> {
        match self {
            ObjectiveKind::RklAdv => Some(AdversarialObjective::ReverseKl),
            ObjectiveKind::JsAdv => Some(AdversarialObjective::JensenShannon),
            ObjectiveKind::FGan(f) => Some(AdversarialObjective::FGan(*f)),
            _ => None,
        }
    }
}

/// How expert feedback enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Exact,
    Sampled(usize),
}

/// Everything resolved into runtime objects.
pub struct ResolvedExperiment {
    pub vocab: Vocab,
    pub capacity: usize,
    pub budget: usize,
    pub gamma: f64,
    pub prompt_dist: PromptDist,
    pub expert_spec: ExpertSpec,
    pub order: ContextOrder,
    pub data_mode: DataMode,
    pub objective: ObjectiveKind,
    pub granularity: Granularity,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub metrics_every: usize,
    /// Designated (prompt, response) expert modes.
    pub modes: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub config_hash: String,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    /// Hash of every semantic field (sha256 of the canonical JSON dump).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serialization");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    fn token_ids(&self, vocab: &Vocab, symbols: &[String]) -> Result<Vec<TokenId>> {
        symbols
            .iter()
            .map(|s| {
                vocab
                    .id_of(s)
                    .ok_or_else(|| Error::config(format!("unknown token symbol {s:?}")))
            })
            .collect()
    }

    /// Resolve into runtime objects, applying an optional seed override
    /// before hashing (the hash covers the effective seed).
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<ResolvedExperiment> {
        let mut effective = self.clone();
        if let Some(seed) = seed_override {
            effective.train.seed = seed;
        }
        let config_hash = effective.hash();
        let this = &effective;

        // Vocabulary.
        let refs: Vec<&str> = this.vocab.tokens.iter().map(|s| s.as_str()).collect();
        let vocab = match &this.vocab.mask {
            None => Vocab::with_auto_mask(&refs, &this.vocab.eos)
                .map_err(|e| Error::config(e.to_string()))?,
            Some(mask) => {
                let eos_id = this
                    .vocab
                    .tokens
                    .iter()
                    .position(|t| t == &this.vocab.eos)
                    .ok_or_else(|| Error::config("eos symbol not in vocab"))?;
                let mask_id = this
                    .vocab
                    .tokens
                    .iter()
                    .position(|t| t == mask)
                    .ok_or_else(|| Error::config("mask symbol not in vocab"))?;
                Vocab::new(this.vocab.tokens.clone(), eos_id as TokenId, mask_id as TokenId)
                    .map_err(|e| Error::config(e.to_string()))?
            }
        };

        let capacity = this.mdp.capacity;
        if capacity == 0 {
            return Err(Error::config("capacity must be at least 1"));
        }
        let budget = this.mdp.enum_budget.unwrap_or(DEFAULT_ENUM_BUDGET);
        let gamma = this.mdp.gamma.unwrap_or(1.0);
        if !(0.0 < gamma && gamma <= 1.0) {
            return Err(Error::config("gamma must lie in (0, 1]"));
        }

        // Prompts.
        let prompts: Vec<Vec<TokenId>> = this
            .prompts
            .prompts
            .iter()
            .map(|p| this.token_ids(&vocab, p))
            .collect::<Result<_>>()?;
        let prompt_dist = PromptDist::new(prompts.clone(), this.prompts.probs.clone())
            .map_err(|e| Error::config(e.to_string()))?;

        // Hidden reward over every enumerable trajectory.
        if this.expert.temperature <= 0.0 {
            return Err(Error::config("expert temperature must be positive"));
        }
        let mut entries: Vec<(Option<Vec<TokenId>>, Vec<TokenId>, f64)> = Vec::new();
        for entry in &this.expert.rewards {
            let prompt = match &entry.prompt {
                None => None,
                Some(p) => Some(this.token_ids(&vocab, p)?),
            };
            entries.push((prompt, this.token_ids(&vocab, &entry.response)?, entry.score));
        }
        let default_reward = this.expert.default_reward;
        let reward =
            TerminalReward::from_fn(&vocab, &prompt_dist, capacity, budget, |traj| {
                for (prompt, response, score) in &entries {
                    let prompt_ok = prompt.as_ref().is_none_or(|p| p == traj.prompt());
                    if prompt_ok && response == traj.response() {
                        return *score;
                    }
                }
                default_reward
            })
            .map_err(|e| Error::config(e.to_string()))?;
        let expert_spec = ExpertSpec::new(reward, this.expert.temperature)
            .map_err(|e| Error::config(e.to_string()))?;

        // Designated modes: explicit list, or the argmax reward entries.
        let mut modes: Vec<(Vec<TokenId>, Vec<TokenId>)> = Vec::new();
        let expand_prompt = |prompt: &Option<Vec<TokenId>>,
                             response: &Vec<TokenId>,
                             out: &mut Vec<(Vec<TokenId>, Vec<TokenId>)>| {
            match prompt {
                Some(p) => out.push((p.clone(), response.clone())),
                None => {
                    for p in &prompts {
                        out.push((p.clone(), response.clone()));
                    }
                }
            }
        };
        match &this.expert.modes {
            Some(list) => {
                for mode in list {
                    let prompt = match &mode.prompt {
                        None => None,
                        Some(p) => Some(this.token_ids(&vocab, p)?),
                    };
                    let response = this.token_ids(&vocab, &mode.response)?;
                    expand_prompt(&prompt, &response, &mut modes);
                }
            }
            None => {
                let best = entries
                    .iter()
                    .map(|(_, _, s)| *s)
                    .fold(f64::NEG_INFINITY, f64::max);
                for (prompt, response, score) in &entries {
                    if *score == best {
                        expand_prompt(prompt, response, &mut modes);
                    }
                }
            }
        }

        // Policy class.
        let order = match &this.policy.context_order {
            OrderSpec::Markov(k) => ContextOrder::Markov(*k),
            OrderSpec::Named(s) => s.parse::<ContextOrder>()?,
        };

        // Data mode.
        let data_mode = match this.data.mode.to_lowercase().as_str() {
            "exact" => DataMode::Exact,
            "sampled" => {
                let n = this
                    .data
                    .n
                    .ok_or_else(|| Error::config("sampled data mode requires data.n"))?;
                if n == 0 {
                    return Err(Error::config("data.n must be at least 1"));
                }
                DataMode::Sampled(n)
            }
            other => return Err(Error::config(format!("unknown data mode {other:?}"))),
        };

        // Objective.
        let objective = match this.train.objective.to_lowercase().as_str() {
            "sft" => ObjectiveKind::Sft,
            "wfkl" => ObjectiveKind::Wfkl,
            "traj_fkl" => ObjectiveKind::TrajFkl,
            "exact_fkl" => ObjectiveKind::ExactFkl,
            "rkl_adv" => ObjectiveKind::RklAdv,
            "js_adv" => ObjectiveKind::JsAdv,
            "fgan" => {
                let family = match this
                    .train
                    .fgan_family
                    .as_deref()
                    .unwrap_or("gail")
                    .to_lowercase()
                    .as_str()
                {
                    "airl" => FDivFamily::Airl,
                    "gail" => FDivFamily::Gail,
                    "fairl" => FDivFamily::Fairl,
                    "alpha" => FDivFamily::alpha(this.train.alpha.unwrap_or(0.5))
                        .map_err(|e| Error::config(e.to_string()))?,
                    other => {
                        return Err(Error::config(format!("unknown fgan family {other:?}")))
                    }
                };
                ObjectiveKind::FGan(family)
            }
            other => return Err(Error::config(format!("unknown objective {other:?}"))),
        };

        let granularity = match this
            .train
            .granularity
            .as_deref()
            .unwrap_or("state_action")
            .to_lowercase()
            .as_str()
        {
            "state_action" => Granularity::StateAction,
            "trajectory" => Granularity::Trajectory,
            other => return Err(Error::config(format!("unknown granularity {other:?}"))),
        };

        let optimizer = OptimizerConfig {
            method: match this.optimizer.method.to_lowercase().as_str() {
                "gd" => OptMethod::Gd,
                "adam" => OptMethod::Adam,
                other => return Err(Error::config(format!("unknown optimizer {other:?}"))),
            },
            step_size: this.optimizer.step_size,
            max_iters: this.optimizer.max_iters,
            grad_tol: this.optimizer.grad_tol,
            beta1: this.optimizer.beta1,
            beta2: this.optimizer.beta2,
            epsilon: this.optimizer.epsilon,
        };
        optimizer.validate()?;

        let estimator = match this.adversarial.estimator.to_lowercase().as_str() {
            "exact" => Estimator::Exact,
            "sampled" => Estimator::Sampled { n: this.adversarial.sample_n },
            other => return Err(Error::config(format!("unknown estimator {other:?}"))),
        };
        let schedule = Schedule {
            rounds: this.adversarial.rounds,
            disc_steps: this.adversarial.disc_steps,
            policy_steps: this.adversarial.policy_steps,
            disc_step_size: this.adversarial.disc_step_size,
            policy_step_size: this.adversarial.policy_step_size,
            disc_adam: match this.adversarial.disc_method.to_lowercase().as_str() {
                "gd" => false,
                "adam" => true,
                other => return Err(Error::config(format!("unknown disc method {other:?}"))),
            },
            estimator,
            seed: this.train.seed,
        };

        Ok(ResolvedExperiment {
            vocab,
            capacity,
            budget,
            gamma,
            prompt_dist,
            expert_spec,
            order,
            data_mode,
            objective,
            granularity,
            seed: this.train.seed,
            optimizer,
            schedule,
            metrics_every: this.train.metrics_every,
            modes,
            config_hash,
        })
    }
}

/// Set one dotted-path key in a parsed TOML document to a scalar parsed
/// from `raw` (number and bool literals are detected; anything else is a
/// string). Used by sweep axes.
pub fn set_config_key(doc: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    };
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("axis path {path:?} does not name a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// A sweep axis: dotted config path plus the values to try, in order.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parse `path=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (path, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("axis {spec:?} must look like key=v1,v2")))?;
        let values: Vec<String> =
            values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(format!("axis {spec:?} has no values")));
        }
        Ok(SweepAxis { path: path.trim().to_string(), values })
    }
}

/// Cross product of axis assignments applied to a base TOML document, in
/// axis-major order. Returns (assignments, config) pairs.
pub fn expand_sweep(
    base_toml: &str,
    axes: &[SweepAxis],
) -> Result<Vec<(BTreeMap<String, String>, ExperimentConfig)>> {
    let base: toml::Value =
        toml::from_str(base_toml).map_err(|e| Error::config(format!("bad config: {e}")))?;
    let mut combos: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
    for axis in axes {
        let mut next = Vec::new();
        for combo in &combos {
            for value in &axis.values {
                let mut c = combo.clone();
                c.insert(axis.path.clone(), value.clone());
                next.push(c);
            }
        }
        combos = next;
    }
    let mut out = Vec::with_capacity(combos.len());
    for combo in combos {
        let mut doc = base.clone();
        for (path, value) in &combo {
            set_config_key(&mut doc, path, value)?;
        }
        let config: ExperimentConfig = doc
            .try_into()
            .map_err(|e| Error::config(format!("bad config after axis application: {e}")))?;
        out.push((combo, config));
    }
    Ok(out)
}
