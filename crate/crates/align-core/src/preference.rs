//! Bradley-Terry reward modeling from pairwise preferences.
//!
//! Ground-truth win probabilities follow the Gaussian-performance story
//! (erf form) or its logistic stand-in (tanh form); synthetic datasets are
//! drawn from the tanh form by default so fitting error is isolated from
//! model mismatch, with the erf form available for mismatch experiments.
//!
//! Two cross-entropy fits are provided: the variance-aware loss, which
//! normalizes each margin by the comparison's evaluation noise, and the
//! simplified loss that pins every variance to one. The loss only
//! identifies normalized score gaps, so fitted scores are centered per
//! domain and (in the variance-aware fit) the geometric mean of the
//! variation table is rescaled to one after fitting.
//!
//! Fitting is sequential; loss evaluation aggregates duplicate comparisons
//! into counts first, so cost scales with distinct pairs, not dataset size.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::occupancy::Table;

/// Table key for a (prompt, response) pair.
pub fn pref_key(prompt: &str, response: &str) -> String {
    format!("{prompt}|{response}")
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains(',') || label.contains('\n') || label.contains('|') {
        return Err(Error::domain(format!(
            "label {label:?} must be non-empty and free of ',', '|' and newlines"
        )));
    }
    Ok(())
}

/// Win probability under Gaussian performance: performances are normal
/// around the scores with the given variances, and A wins when its draw is
/// higher.
pub fn bt_win_prob_gauss(s_a: f64, s_b: f64, var_a: f64, var_b: f64) -> Result<f64> {
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(Error::domain("variances must be positive"));
    }
    Ok(0.5 + 0.5 * erf((s_a - s_b) / (2.0 * (var_a + var_b)).sqrt()))
}

/// Win probability under the logistic performance assumption.
pub fn bt_win_prob_tanh(r_a: f64, r_b: f64, v2_a: f64, v2_b: f64) -> Result<f64> {
    if v2_a <= 0.0 || v2_b <= 0.0 {
        return Err(Error::domain("variances must be positive"));
    }
    Ok(0.5 + 0.5 * ((r_a - r_b) / (2.0 * (v2_a + v2_b)).sqrt()).tanh())
}

/// Ground truth for synthetic preference experiments: latent scores,
/// evaluation variances, and optional domain labels per (prompt, response).
#[derive(Debug, Clone, Default)]
pub struct BtGroundTruth {
    scores: Table,
    variances: Table,
    domains: BTreeMap<String, String>,
}

impl BtGroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        prompt: &str,
        response: &str,
        score: f64,
        variance: f64,
        domain: &str,
    ) -> Result<()> {
        check_label(prompt)?;
        check_label(response)?;
        if variance <= 0.0 || !variance.is_finite() || !score.is_finite() {
            return Err(Error::domain("scores must be finite and variances positive"));
        }
        let key = pref_key(prompt, response);
        self.scores.insert(key.clone(), score);
        self.variances.insert(key.clone(), variance);
        self.domains.insert(key, domain.to_string());
        Ok(())
    }

    pub fn score(&self, key: &str) -> Result<f64> {
        self.scores.get(key).copied().ok_or_else(|| Error::key(format!("no score for {key:?}")))
    }

    pub fn variance(&self, key: &str) -> Result<f64> {
        self.variances
            .get(key)
            .copied()
            .ok_or_else(|| Error::key(format!("no variance for {key:?}")))
    }

    pub fn domains(&self) -> &BTreeMap<String, String> {
        &self.domains
    }
}

/// Which link generates synthetic winners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WinModel {
    Tanh,
    Gauss,
}

/// A pairwise preference dataset. Items are interned so large datasets
/// stay compact; triples are (winner item, loser item) index pairs sharing
/// a prompt.
#[derive(Debug, Clone, Default)]
pub struct PrefDataset {
    items: Vec<(String, String)>,
    index: BTreeMap<String, u32>,
    triples: Vec<(u32, u32)>,
}

impl PrefDataset {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern(&mut self, prompt: &str, response: &str) -> u32 {
        let key = pref_key(prompt, response);
        if let Some(&idx) = self.index.get(&key) {
            return idx;
        }
        let idx = self.items.len() as u32;
        self.items.push((prompt.to_string(), response.to_string()));
        self.index.insert(key, idx);
        idx
    }

    pub fn push(&mut self, prompt: &str, winner: &str, loser: &str) -> Result<()> {
        check_label(prompt)?;
        check_label(winner)?;
        check_label(loser)?;
        if winner == loser {
            return Err(Error::domain("winner and loser must differ"));
        }
        let w = self.intern(prompt, winner);
        let l = self.intern(prompt, loser);
        self.triples.push((w, l));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct (prompt, response) item keys in the dataset.
    pub fn item_keys(&self) -> Vec<String> {
        self.items.iter().map(|(p, r)| pref_key(p, r)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.triples.iter().map(|&(w, l)| {
            (self.items[w as usize].0.as_str(), self.items[w as usize].1.as_str(), self.items[l as usize].1.as_str())
        })
    }

    /// Counts per ordered (winner, loser) item pair for the given triple
    /// indices.
    fn aggregate(&self, subset: &[usize]) -> Vec<(u32, u32, f64)> {
        let mut counts: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for &i in subset {
            *counts.entry(self.triples[i]).or_insert(0.0) += 1.0;
        }
        counts.into_iter().map(|((w, l), c)| (w, l, c)).collect()
    }

    fn key_of(&self, item: u32) -> String {
        let (p, r) = &self.items[item as usize];
        pref_key(p, r)
    }

    /// CSV export with columns prompt,winner,loser (one row per triple).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt,winner,loser\n");
        for (prompt, winner, loser) in self.iter() {
            out.push_str(&format!("{prompt},{winner},{loser}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut data = PrefDataset::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.trim() == "prompt,winner,loser" {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::domain(format!("bad preference row {line:?}")));
            }
            data.push(fields[0].trim(), fields[1].trim(), fields[2].trim())?;
        }
        if data.is_empty() {
            return Err(Error::domain("empty preference dataset"));
        }
        Ok(data)
    }
}

/// Draw a synthetic preference dataset: for each (prompt, a, b) pairing and
/// each of `n_per_pair` draws, the winner is `a` with the ground-truth win
/// probability. Deterministic per seed.
pub fn sample_pref_dataset(
    truth: &BtGroundTruth,
    pairings: &[(String, String, String)],
    n_per_pair: usize,
    seed: u64,
) -> Result<PrefDataset> {
    sample_pref_dataset_with(truth, pairings, n_per_pair, seed, WinModel::Tanh)
}

/// As [`sample_pref_dataset`] with an explicit win-probability link; the
/// erf link is the generate-with-Gauss mismatch experiment.
pub fn sample_pref_dataset_with(
    truth: &BtGroundTruth,
    pairings: &[(String, String, String)],
    n_per_pair: usize,
    seed: u64,
    model: WinModel,
) -> Result<PrefDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = PrefDataset::new();
    for (prompt, a, b) in pairings {
        let key_a = pref_key(prompt, a);
        let key_b = pref_key(prompt, b);
        let (ra, rb) = (truth.score(&key_a)?, truth.score(&key_b)?);
        let (va, vb) = (truth.variance(&key_a)?, truth.variance(&key_b)?);
        let p_a_wins = match model {
            WinModel::Tanh => bt_win_prob_tanh(ra, rb, va, vb)?,
            WinModel::Gauss => bt_win_prob_gauss(ra, rb, va, vb)?,
        };
        for _ in 0..n_per_pair {
            let u: f64 = rng.gen();
            if u < p_a_wins {
                data.push(prompt, a, b)?;
            } else {
                data.push(prompt, b, a)?;
            }
        }
    }
    Ok(data)
}

/// Fitted reward model: a score and a variation per (prompt, response).
/// The simplified variant pins every variation to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BtRewardModel {
    r_table: Table,
    v_table: Table,
    simplified: bool,
    v_min: f64,
}

impl BtRewardModel {
    /// Model with zero scores and unit variations over the given keys.
    pub fn zeros_over<I: IntoIterator<Item = String>>(
        keys: I,
        simplified: bool,
        v_min: f64,
    ) -> Result<Self> {
        if v_min <= 0.0 || v_min >= 1.0 {
            return Err(Error::domain("v_min must lie in (0, 1)"));
        }
        let mut r_table = Table::new();
        let mut v_table = Table::new();
        for key in keys {
            r_table.insert(key.clone(), 0.0);
            v_table.insert(key, 1.0);
        }
        Ok(BtRewardModel { r_table, v_table, simplified, v_min })
    }

    pub fn scores(&self) -> &Table {
        &self.r_table
    }

    pub fn variations(&self) -> &Table {
        &self.v_table
    }

    pub fn simplified(&self) -> bool {
        self.simplified
    }

    pub fn score(&self, key: &str) -> Result<f64> {
        self.r_table.get(key).copied().ok_or_else(|| Error::key(format!("no score for {key:?}")))
    }

    pub fn variation(&self, key: &str) -> Result<f64> {
        if self.simplified {
            return Ok(1.0);
        }
        self.v_table
            .get(key)
            .copied()
            .ok_or_else(|| Error::key(format!("no variation for {key:?}")))
    }

    pub fn set_score(&mut self, key: &str, r: f64) {
        self.r_table.insert(key.to_string(), r);
    }

    pub fn set_variation(&mut self, key: &str, v: f64) {
        self.v_table.insert(key.to_string(), v.max(self.v_min));
    }

    /// CSV export: key,score,variation rows sorted by key.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,score,variation\n");
        for (key, r) in &self.r_table {
            let v = if self.simplified { 1.0 } else { self.v_table[key] };
            out.push_str(&format!("{key},{r:.16e},{v:.16e}\n"));
        }
        out
    }
}

/// Cross-entropy loss report: value plus gradients for both tables.
#[derive(Debug, Clone, Serialize)]
pub struct BtLossReport {
    pub value: f64,
    pub grad_r: Table,
    pub grad_v: Table,
}

impl BtLossReport {
    pub fn grad_norm(&self) -> f64 {
        self.grad_r
            .values()
            .chain(self.grad_v.values())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bt loss serialization")
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Variance-aware cross-entropy: mean negative log-sigmoid of the margin
/// `(R+ - R-) / sqrt((V+^2 + V-^2)/2)`, with analytic gradients for both
/// the score and variation tables.
pub fn ce_loss_full(model: &BtRewardModel, data: &PrefDataset) -> Result<BtLossReport> {
    let subset: Vec<usize> = (0..data.len()).collect();
    ce_loss_subset(model, data, &subset, false)
}

/// Simplified cross-entropy: every variation pinned to one, so the margin
/// is the raw score difference; gradients flow to scores only.
pub fn ce_loss_simplified(model: &BtRewardModel, data: &PrefDataset) -> Result<BtLossReport> {
    let subset: Vec<usize> = (0..data.len()).collect();
    ce_loss_subset(model, data, &subset, true)
}

fn ce_loss_subset(
    model: &BtRewardModel,
    data: &PrefDataset,
    subset: &[usize],
    force_unit_variance: bool,
) -> Result<BtLossReport> {
    if subset.is_empty() {
        return Err(Error::domain("empty preference dataset"));
    }
    let unit_variance = force_unit_variance || model.simplified;
    let n: f64 = subset.len() as f64;
    let mut value = 0.0;
    let mut grad_r = Table::new();
    let mut grad_v = Table::new();
    for (w, l, count) in data.aggregate(subset) {
        let key_w = data.key_of(w);
        let key_l = data.key_of(l);
        let r_w = model.score(&key_w)?;
        let r_l = model.score(&key_l)?;
        let delta = r_w - r_l;
        let (scale, v_w, v_l) = if unit_variance {
            (1.0, 1.0, 1.0)
        } else {
            let v_w = model.variation(&key_w)?;
            let v_l = model.variation(&key_l)?;
            (((v_w * v_w + v_l * v_l) / 2.0).sqrt(), v_w, v_l)
        };
        let margin = delta / scale;
        value += count * -log_sigmoid(margin);
        // d/dm of -log sigmoid(m) = sigmoid(m) - 1.
        let dm = count * (sigmoid(margin) - 1.0);
        *grad_r.entry(key_w.clone()).or_insert(0.0) += dm / scale;
        *grad_r.entry(key_l.clone()).or_insert(0.0) -= dm / scale;
        if !unit_variance {
            let s3 = scale * scale * scale;
            *grad_v.entry(key_w).or_insert(0.0) += dm * (-delta * v_w / (2.0 * s3));
            *grad_v.entry(key_l).or_insert(0.0) += dm * (-delta * v_l / (2.0 * s3));
        }
    }
    value /= n;
    for g in grad_r.values_mut() {
        *g /= n;
    }
    for g in grad_v.values_mut() {
        *g /= n;
    }
    Ok(BtLossReport { value, grad_r, grad_v })
}

/// Which loss a fit optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtVariant {
    Full,
    Simplified,
}

/// Fitting configuration.
#[derive(Debug, Clone)]
pub struct BtFitConfig {
    pub variant: BtVariant,
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Fraction of triples held out for evaluation (0 disables).
    pub heldout_fraction: f64,
    pub seed: u64,
    pub v_min: f64,
    /// Domain label per item key, for per-domain centering of scores.
    pub domains: Option<BTreeMap<String, String>>,
    /// Online mode: one gradient step per observed comparison, in dataset
    /// order, instead of batch optimization.
    pub online: bool,
}

impl Default for BtFitConfig {
    fn default() -> Self {
        BtFitConfig {
            variant: BtVariant::Full,
            step_size: 0.05,
            max_iters: 2000,
            grad_tol: 1e-7,
            heldout_fraction: 0.0,
            seed: 0,
            v_min: 1e-3,
            domains: None,
            online: false,
        }
    }
}

/// Fit outcome. Non-convergence within the iteration budget is reported,
/// not raised.
#[derive(Debug, Clone, Serialize)]
pub struct BtFitReport {
    pub train_ce: f64,
    pub heldout_ce: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fit a reward model to a preference dataset by gradient descent (Adam).
///
/// Positivity of variations is kept by the `V = v_min + softplus(w)`
/// parameterization during fitting. After fitting, scores are centered to
/// mean zero per domain and, in the variance-aware variant, all scores and
/// variations are jointly rescaled so the geometric mean variation is one;
/// both transformations leave every margin unchanged.
pub fn fit_reward_model(
    data: &PrefDataset,
    config: &BtFitConfig,
) -> Result<(BtRewardModel, BtFitReport)> {
    if data.is_empty() {
        return Err(Error::domain("empty preference dataset"));
    }
    let every_response_compared = {
        let mut seen = vec![false; data.items.len()];
        for &(w, l) in &data.triples {
            seen[w as usize] = true;
            seen[l as usize] = true;
        }
        seen.iter().all(|&s| s)
    };
    if !every_response_compared {
        return Err(Error::domain("every response must appear in at least one triple"));
    }

    // Deterministic held-out split.
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_heldout = ((data.len() as f64) * config.heldout_fraction).floor() as usize;
    let (heldout_idx, train_idx) = order.split_at(n_heldout);
    if train_idx.is_empty() {
        return Err(Error::domain("held-out fraction leaves no training data"));
    }

    let simplified = config.variant == BtVariant::Simplified;
    let mut model = BtRewardModel::zeros_over(data.item_keys(), simplified, config.v_min)?;
    // w such that v_min + softplus(w) = 1.
    let w_init = ((1.0 - config.v_min).exp() - 1.0).ln();
    let mut w_table: Table = model.v_table.keys().map(|k| (k.clone(), w_init)).collect();

    let mut iterations = 0;
    let mut converged = false;
    if config.online {
        for (step, &i) in train_idx.iter().enumerate() {
            let report = ce_loss_subset(&model, data, &[i], simplified)?;
            apply_bt_step(&mut model, &mut w_table, &report, config.step_size, simplified)?;
            iterations = step + 1;
        }
        converged = true;
    } else {
        let mut adam_r = BtAdam::new();
        let mut adam_w = BtAdam::new();
        for iter in 0..config.max_iters {
            let report = ce_loss_subset(&model, data, train_idx, simplified)?;
            if !report.value.is_finite() {
                return Err(Error::Numeric {
                    iteration: iter,
                    context: "preference loss became non-finite".to_string(),
                });
            }
            iterations = iter + 1;
            if report.grad_norm() <= config.grad_tol {
                converged = true;
                break;
            }
            for (key, delta) in adam_r.step(&report.grad_r, config.step_size) {
                let r = model.score(&key)?;
                model.set_score(&key, r + delta);
            }
            if !simplified {
                // Chain rule through V = v_min + softplus(w).
                let grad_w: Table = report
                    .grad_v
                    .iter()
                    .map(|(k, &g)| (k.clone(), g * sigmoid(w_table[k])))
                    .collect();
                for (key, delta) in adam_w.step(&grad_w, config.step_size) {
                    let w = w_table.get_mut(&key).unwrap();
                    *w += delta;
                    let v = config.v_min + softplus(*w);
                    model.set_variation(&key, v);
                }
            }
        }
    }

    normalize_model(&mut model, config.domains.as_ref());
    let train_ce = ce_loss_subset(&model, data, train_idx, simplified)?.value;
    let heldout_ce = if heldout_idx.is_empty() {
        None
    } else {
        Some(ce_loss_subset(&model, data, heldout_idx, simplified)?.value)
    };
    Ok((model, BtFitReport { train_ce, heldout_ce, iterations, converged }))
}

fn apply_bt_step(
    model: &mut BtRewardModel,
    w_table: &mut Table,
    report: &BtLossReport,
    step_size: f64,
    simplified: bool,
) -> Result<()> {
    for (key, &g) in &report.grad_r {
        let r = model.score(key)?;
        model.set_score(key, r - step_size * g);
    }
    if !simplified {
        for (key, &g) in &report.grad_v {
            let w = w_table.get_mut(key).unwrap();
            *w -= step_size * g * sigmoid(*w);
            let v = model.v_min + softplus(*w);
            model.set_variation(key, v);
        }
    }
    Ok(())
}

/// Center scores per domain; in the variance-aware variant also rescale
/// (R, V) jointly so the geometric mean variation is one.
fn normalize_model(model: &mut BtRewardModel, domains: Option<&BTreeMap<String, String>>) {
    if !model.simplified {
        let logs: f64 = model.v_table.values().map(|v| v.ln()).sum();
        let lambda = (-logs / model.v_table.len() as f64).exp();
        for v in model.v_table.values_mut() {
            *v = (*v * lambda).max(model.v_min);
        }
        for r in model.r_table.values_mut() {
            *r *= lambda;
        }
    }
    let default = "default".to_string();
    let mut groups: BTreeMap<&String, Vec<String>> = BTreeMap::new();
    for key in model.r_table.keys() {
        let domain = domains.and_then(|d| d.get(key)).unwrap_or(&default);
        groups.entry(domain).or_default().push(key.clone());
    }
    for keys in groups.values() {
        let mean: f64 = keys.iter().map(|k| model.r_table[k]).sum::<f64>() / keys.len() as f64;
        for key in keys {
            *model.r_table.get_mut(key).unwrap() -= mean;
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct BtAdam {
    m: Table,
    v: Table,
    t: i32,
}

impl BtAdam {
    fn new() -> Self {
        BtAdam { m: Table::new(), v: Table::new(), t: 0 }
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
