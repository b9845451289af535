//! Deterministic first-order optimizers over keyed parameter tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{grad_norm, GradTable, LossReport};
use crate::policy::TabularPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptMethod {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: OptMethod,
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: OptMethod::Gd,
            step_size: 0.5,
            max_iters: 2000,
            grad_tol: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 {
            return Err(Error::config("step_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.grad_tol <= 0.0 {
            return Err(Error::config("grad_tol must be positive"));
        }
        Ok(())
    }
}

/// Optimization trace: loss and gradient norm per iteration.
#[derive(Debug, Clone, Default)]
pub struct OptTrace {
    pub iterations: usize,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
    pub values: Vec<f64>,
}

/// GD/Adam update state shared by policy and keyed-table optimization.
pub(crate) struct Stepper {
    config: OptimizerConfig,
    m: GradTable,
    v: GradTable,
    t: i32,
}

impl Stepper {
    pub(crate) fn new(config: OptimizerConfig) -> Self {
        Stepper { config, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// Parameter deltas for one step given the current gradient.
    pub(crate) fn deltas(&mut self, grad: &GradTable) -> GradTable {
        match self.config.method {
            OptMethod::Gd => grad
                .iter()
                .map(|(k, g)| (k.clone(), g.iter().map(|x| -self.config.step_size * x).collect()))
                .collect(),
            OptMethod::Adam => {
                self.t += 1;
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let bias1 = 1.0 - b1.powi(self.t);
                let bias2 = 1.0 - b2.powi(self.t);
                let mut out: GradTable = BTreeMap::new();
                for (key, g) in grad {
                    let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let mut deltas = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        deltas[i] =
                            -self.config.step_size * m_hat / (v_hat.sqrt() + self.config.epsilon);
                    }
                    out.insert(key.clone(), deltas);
                }
                out
            }
        }
    }
}

/// Iterate a loss over arbitrary keyed parameters until the gradient norm
/// drops under `grad_tol` or `max_iters` is reached. Deterministic.
pub fn optimize_keyed(
    params: &mut GradTable,
    eval: &mut dyn FnMut(&GradTable) -> Result<(f64, GradTable)>,
    config: &OptimizerConfig,
) -> Result<OptTrace> {
    config.validate()?;
    let mut stepper = Stepper::new(config.clone());
    let mut trace = OptTrace::default();
    for iter in 0..config.max_iters {
        let (value, grad) = eval(params)?;
        if !value.is_finite() {
            return Err(Error::Numeric { iteration: iter, context: "loss non-finite".into() });
        }
        let gnorm = grad_norm(&grad);
        trace.iterations = iter + 1;
        trace.final_value = value;
        trace.final_grad_norm = gnorm;
        trace.values.push(value);
        if gnorm <= config.grad_tol {
            trace.converged = true;
            return Ok(trace);
        }
        for (key, delta) in stepper.deltas(&grad) {
            let entry = params
                .get_mut(&key)
                .ok_or_else(|| Error::key(format!("gradient for unknown parameter {key:?}")))?;
            for (p, d) in entry.iter_mut().zip(delta) {
                *p += d;
            }
        }
    }
    Ok(trace)
}

/// As [`optimize_keyed`], updating a policy's logits in place.
pub fn optimize_policy(
    policy: &mut TabularPolicy,
    objective: &dyn Fn(&TabularPolicy) -> Result<LossReport>,
    config: &OptimizerConfig,
) -> Result<OptTrace> {
    config.validate()?;
    let mut stepper = Stepper::new(config.clone());
    let mut trace = OptTrace::default();
    for iter in 0..config.max_iters {
        let report = objective(policy)?;
        if !report.value.is_finite() {
            return Err(Error::Numeric { iteration: iter, context: "loss non-finite".into() });
        }
        let gnorm = report.grad_norm();
        trace.iterations = iter + 1;
        trace.final_value = report.value;
        trace.final_grad_norm = gnorm;
        trace.values.push(report.value);
        if gnorm <= config.grad_tol {
            trace.converged = true;
            return Ok(trace);
        }
        for (key, delta) in stepper.deltas(&report.gradient) {
            let logits = policy
                .logits_mut()
                .get_mut(&key)
                .ok_or_else(|| Error::key(format!("gradient for unknown context {key:?}")))?;
            for (l, d) in logits.iter_mut().zip(delta) {
                *l += d;
            }
        }
    }
    Ok(trace)
}
