//! Experiment execution: dataset generation, training per objective kind,
//! metric evaluation, and sweeps.
//!
//! Every experiment is a pure function of (config, seed): data generation,
//! training, and metrics all run off one seeded RNG lineage, and reports
//! serialize identically across runs except for the wall-clock field.
//! Sweeps may run experiments in parallel; each experiment is internally
//! deterministic and rows are emitted in config order.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversarial::{
    alternating_train_observed, optimal_discriminator, AdversarialSetup, Granularity,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::harness::config::{
    DataMode, ExperimentConfig, ObjectiveKind, ResolvedExperiment, SweepAxis,
};
use crate::harness::optimize::{optimize_policy, OptimizerConfig};
use crate::mdp::Trajectory;
use crate::objectives::{
    exact_fkl_occupancy_loss, sft_loss, sft_loss_exact, weighted_fkl_loss,
    weighted_fkl_loss_exact, DemoDataset, LossReport,
};
use crate::occupancy::{
    divergence, empirical_occupancy, empirical_traj_dist, exact_occupancy, mode_masses,
    trajectory_distribution, DivergenceKind, OccupancyTable, Table, TrajDist,
};
use crate::policy::{boltzmann_expert, TabularPolicy};

/// One metrics snapshot. For gradient objectives `round` counts optimizer
/// iterations; for adversarial objectives it counts alternating rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub fkl: f64,
    pub rkl: f64,
    pub js: f64,
    pub mode_masses: Vec<f64>,
    pub expected_hidden_reward: f64,
}

/// Full experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub objective: String,
    pub rounds: Vec<MetricsRow>,
    pub final_metrics: MetricsRow,
    /// Sup-norm distance of the trained discriminator from the closed-form
    /// optimum against the final policy (discriminator objectives only).
    pub discriminator_gap: Option<f64>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Single CSV row (plus header) with the final metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "config_hash,seed,objective,fkl,rkl,js,mode_masses,expected_hidden_reward,discriminator_gap,wall_clock_secs\n",
        );
        out.push_str(&self.csv_row());
        out
    }

    pub fn csv_row(&self) -> String {
        let f = &self.final_metrics;
        let masses =
            f.mode_masses.iter().map(|m| format!("{m:.16e}")).collect::<Vec<_>>().join(";");
        let gap = self.discriminator_gap.map(|g| format!("{g:.16e}")).unwrap_or_default();
        format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{},{:.16e},{},{:.6}\n",
            self.config_hash,
            self.seed,
            self.objective,
            f.fkl,
            f.rkl,
            f.js,
            masses,
            f.expected_hidden_reward,
            gap,
            self.wall_clock_secs
        )
    }
}

/// Report plus the trained policy, for callers that inspect the result.
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub policy: TabularPolicy,
}

struct Lab {
    resolved: ResolvedExperiment,
    expert: TabularPolicy,
    expert_dist: TrajDist,
    expert_joint: Table,
}

impl Lab {
    fn build(resolved: ResolvedExperiment) -> Result<Self> {
        let expert = boltzmann_expert(
            &resolved.expert_spec,
            &resolved.vocab,
            &resolved.prompt_dist,
            resolved.capacity,
            resolved.budget,
        )?;
        let expert_dist =
            trajectory_distribution(&expert, &resolved.prompt_dist, resolved.budget)?;
        let expert_joint = expert_dist.joint();
        Ok(Lab { resolved, expert, expert_dist, expert_joint })
    }

    fn metrics_row(&self, policy: &TabularPolicy, round: usize) -> Result<MetricsRow> {
        let r = &self.resolved;
        let dist = trajectory_distribution(policy, &r.prompt_dist, r.budget)?;
        let joint = dist.joint();
        let fkl = divergence(&self.expert_joint, &joint, DivergenceKind::ForwardKl)?;
        let rkl = divergence(&joint, &self.expert_joint, DivergenceKind::ForwardKl)?;
        let js = divergence(&joint, &self.expert_joint, DivergenceKind::JensenShannon)?;
        let masses = mode_masses(&dist, &r.modes);
        let mut expected_reward = 0.0;
        for traj in dist.support() {
            expected_reward +=
                joint[&traj.key()] * r.expert_spec.hidden_reward.get(traj)?;
        }
        for (name, v) in [("fkl", fkl), ("rkl", rkl), ("js", js)] {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    iteration: round,
                    context: format!("{name} became non-finite"),
                });
            }
        }
        Ok(MetricsRow {
            round,
            fkl,
            rkl,
            js,
            mode_masses: masses,
            expected_hidden_reward: expected_reward,
        })
    }
}

/// Run one experiment: build the expert, generate feedback (exact tables or
/// a sampled demonstration set), train the configured objective, and report
/// divergences, mode masses, and the expected hidden reward per round.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let lab = Lab::build(config.resolve(seed_override)?)?;
    let r = &lab.resolved;

    let mut student =
        TabularPolicy::new_uniform(r.vocab.clone(), r.order, r.capacity)?;
    student.materialize_reachable(&r.prompt_dist, r.budget)?;

    let demo: Option<DemoDataset> = match r.data_mode {
        DataMode::Exact => None,
        DataMode::Sampled(n) => {
            let data = DemoDataset::sample(&lab.expert, &r.prompt_dist, n, r.seed)?;
            student.ensure_states(data.states());
            Some(data)
        }
    };

    let mut rows = vec![lab.metrics_row(&student, 0)?];
    let mut discriminator_gap = None;

    if r.objective.is_adversarial() {
        let expert_target = adversarial_target(&lab, demo.as_ref())?;
        let setup = AdversarialSetup {
            prompt_dist: &r.prompt_dist,
            granularity: r.granularity,
            objective: r.objective.adversarial_objective().expect("adversarial kind"),
            expert_target: &expert_target,
            metrics_expert: &lab.expert_joint,
            gamma: r.gamma,
            budget: r.budget,
        };
        let history = alternating_train_observed(
            &mut student,
            &setup,
            &r.schedule,
            &mut |record, policy| {
                let mut row = lab.metrics_row(policy, record.round)?;
                row.fkl = record.fkl;
                row.rkl = record.rkl;
                row.js = record.js;
                rows.push(row);
                Ok(())
            },
        )?;
        if let Some(trained) = &history.discriminator {
            let final_table = policy_table_at(&student, r, r.granularity)?;
            let d_star = optimal_discriminator(&expert_target, &final_table, r.granularity);
            discriminator_gap = Some(trained.sup_norm_gap(&d_star));
        }
    } else {
        train_gradient_objective(&lab, &mut student, demo.as_ref(), &mut rows)?;
    }

    let final_metrics = rows.last().expect("at least the initial row").clone();
    let report = MetricsReport {
        config_hash: r.config_hash.clone(),
        seed: r.seed,
        objective: r.objective.name(),
        rounds: rows,
        final_metrics,
        discriminator_gap,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutcome { report, policy: student })
}

/// Normalized expert table at the training granularity.
fn adversarial_target(lab: &Lab, demo: Option<&DemoDataset>) -> Result<Table> {
    let r = &lab.resolved;
    Ok(match (r.granularity, demo) {
        (Granularity::StateAction, None) => {
            exact_occupancy(&lab.expert, &r.prompt_dist, r.gamma, r.budget)?.normalized()
        }
        (Granularity::StateAction, Some(data)) => {
            empirical_occupancy(data.pairs(), r.gamma)?.normalized()
        }
        (Granularity::Trajectory, None) => lab.expert_joint.clone(),
        (Granularity::Trajectory, Some(data)) => empirical_traj_dist(data.pairs())?.joint(),
    })
}

fn policy_table_at(
    policy: &TabularPolicy,
    r: &ResolvedExperiment,
    granularity: Granularity,
) -> Result<Table> {
    Ok(match granularity {
        Granularity::StateAction => {
            exact_occupancy(policy, &r.prompt_dist, r.gamma, r.budget)?.normalized()
        }
        Granularity::Trajectory => {
            trajectory_distribution(policy, &r.prompt_dist, r.budget)?.joint()
        }
    })
}

/// Gradient-descent objectives, with metric rows every `metrics_every`
/// iterations (0 = initial and final rows only).
///
/// The trajectory-level forward KL shares every gradient summand with SFT,
/// so both objectives are driven through the same per-step-mean update
/// path; with matched data and seed their runs are bit-identical.
fn train_gradient_objective(
    lab: &Lab,
    student: &mut TabularPolicy,
    demo: Option<&DemoDataset>,
    rows: &mut Vec<MetricsRow>,
) -> Result<()> {
    let r = &lab.resolved;
    let rho_exp: Option<OccupancyTable> = match r.objective {
        ObjectiveKind::ExactFkl => Some(match demo {
            None => exact_occupancy(&lab.expert, &r.prompt_dist, r.gamma, r.budget)?,
            Some(data) => empirical_occupancy(data.pairs(), r.gamma)?,
        }),
        _ => None,
    };

    let objective = |policy: &TabularPolicy| -> Result<LossReport> {
        match (&r.objective, demo, &rho_exp) {
            (ObjectiveKind::Sft | ObjectiveKind::TrajFkl, Some(data), _) => {
                sft_loss(policy, data)
            }
            (ObjectiveKind::Sft | ObjectiveKind::TrajFkl, None, _) => {
                sft_loss_exact(policy, &lab.expert_dist)
            }
            (ObjectiveKind::Wfkl, Some(data), _) => weighted_fkl_loss(policy, data),
            (ObjectiveKind::Wfkl, None, _) => weighted_fkl_loss_exact(policy, &lab.expert_dist),
            (ObjectiveKind::ExactFkl, _, Some(rho)) => {
                exact_fkl_occupancy_loss(policy, rho, &r.prompt_dist, r.budget)
            }
            _ => Err(Error::config("objective is not a gradient objective")),
        }
    };

    let segment = if r.metrics_every > 0 { r.metrics_every } else { r.optimizer.max_iters };
    let mut done = 0;
    while done < r.optimizer.max_iters {
        let step = segment.min(r.optimizer.max_iters - done);
        let cfg = OptimizerConfig { max_iters: step, ..r.optimizer.clone() };
        let trace = optimize_policy(student, &objective, &cfg)?;
        done += trace.iterations;
        rows.push(lab.metrics_row(student, done)?);
        if trace.converged {
            break;
        }
    }
    Ok(())
}

/// One sweep result row.
pub struct SweepRow {
    pub assignments: BTreeMap<String, String>,
    pub report: MetricsReport,
}

/// Run the cross product of axis assignments over a base config. Rows come
/// back in config order regardless of parallel execution order.
pub fn run_sweep(
    base_toml: &str,
    axes: &[SweepAxis],
    seed_override: Option<u64>,
) -> Result<Vec<SweepRow>> {
    let combos = crate::harness::config::expand_sweep(base_toml, axes)?;
    let results: Vec<Result<SweepRow>> = exec::ordered_map(&combos, |(assignments, config)| {
        let outcome = run_experiment(config, seed_override)?;
        Ok(SweepRow { assignments: assignments.clone(), report: outcome.report })
    });
    results.into_iter().collect()
}

/// CSV for a sweep: one column per axis, then the final metrics columns.
pub fn sweep_to_csv(rows: &[SweepRow], axes: &[SweepAxis]) -> String {
    let mut out = String::new();
    for axis in axes {
        out.push_str(&axis.path);
        out.push(',');
    }
    out.push_str(
        "config_hash,seed,objective,fkl,rkl,js,mode_masses,expected_hidden_reward,discriminator_gap,wall_clock_secs\n",
    );
    for row in rows {
        for axis in axes {
            out.push_str(row.assignments.get(&axis.path).map(|s| s.as_str()).unwrap_or(""));
            out.push(',');
        }
        out.push_str(&row.report.csv_row());
    }
    out
}

/// Expected hidden reward of a policy-induced trajectory distribution,
/// exposed for tests and the check suite.
pub fn expected_hidden_reward(
    dist: &TrajDist,
    reward: &crate::mdp::TerminalReward,
) -> Result<f64> {
    let joint = dist.joint();
    let mut total = 0.0;
    for traj in dist.support() {
        total += joint[&traj.key()] * reward.get(traj)?;
    }
    Ok(total)
}

/// Convenience for tests: trajectories of a dataset.
pub fn demo_trajectories(data: &DemoDataset) -> &[Trajectory] {
    data.pairs()
}
