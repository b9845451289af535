//! Canonical experiment scenarios.

use crate::harness::config::{
    AdversarialSection, DataSection, ExpertSection, ExperimentConfig, MdpSection, ModeEntry,
    OptimizerSection, OrderSpec, PolicySection, PromptsSection, RewardEntry, TrainSection,
    VocabSection,
};
use crate::policy::ContextOrder;

/// The bimodal contrast scenario: vocabulary {a, b, EOS}, generation
/// capacity 3, a single empty prompt, and a hidden reward that puts
/// `separation` on the two symmetric responses `a,a,EOS` and `b,b,EOS` and
/// zero on the other thirteen trajectories of the tree.
///
/// With an order-1 policy class, continuing after one `a` and stopping
/// after two `a`s contend for the same context key, so no policy in the
/// class can match the expert and the forward/reverse-KL optima separate.
/// The objective defaults to SFT with exact feedback; callers override the
/// training section for the comparison runs.
pub fn build_bimodal_scenario(
    separation: f64,
    tau: f64,
    order: ContextOrder,
) -> ExperimentConfig {
    let sym = |s: &str| s.to_string();
    let mode_a = vec![sym("a"), sym("a"), sym("</s>")];
    let mode_b = vec![sym("b"), sym("b"), sym("</s>")];
    ExperimentConfig {
        vocab: VocabSection {
            tokens: vec![sym("a"), sym("b"), sym("</s>")],
            eos: sym("</s>"),
            mask: None,
        },
        mdp: MdpSection { capacity: 3, enum_budget: None, gamma: None },
        prompts: PromptsSection { prompts: vec![vec![]], probs: vec![1.0] },
        expert: ExpertSection {
            temperature: tau,
            default_reward: 0.0,
            rewards: vec![
                RewardEntry { prompt: None, response: mode_a.clone(), score: separation },
                RewardEntry { prompt: None, response: mode_b.clone(), score: separation },
            ],
            modes: Some(vec![
                ModeEntry { prompt: None, response: mode_a },
                ModeEntry { prompt: None, response: mode_b },
            ]),
        },
        policy: PolicySection {
            context_order: match order {
                ContextOrder::Full => OrderSpec::Named("full".to_string()),
                ContextOrder::Markov(k) => OrderSpec::Markov(k),
            },
        },
        data: DataSection { mode: "exact".to_string(), n: None },
        train: TrainSection {
            objective: "sft".to_string(),
            granularity: Some("trajectory".to_string()),
            fgan_family: None,
            alpha: None,
            seed: 0,
            metrics_every: 0,
        },
        optimizer: OptimizerSection {
            method: "adam".to_string(),
            step_size: 0.05,
            max_iters: 6000,
            grad_tol: 1e-10,
            ..Default::default()
        },
        adversarial: AdversarialSection {
            rounds: 600,
            disc_steps: 40,
            policy_steps: 1,
            disc_step_size: 0.05,
            policy_step_size: 0.25,
            disc_method: "adam".to_string(),
            ..Default::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::enumerate_trajectories;
    use crate::occupancy::{mode_masses, trajectory_distribution};
    use crate::policy::boltzmann_expert;

    #[test]
    fn bimodal_expert_has_two_equal_modes() {
        let config = build_bimodal_scenario(3.0, 1.0, ContextOrder::Markov(1));
        let r = config.resolve(None).unwrap();
        let expert = boltzmann_expert(
            &r.expert_spec,
            &r.vocab,
            &r.prompt_dist,
            r.capacity,
            r.budget,
        )
        .unwrap();
        let dist = trajectory_distribution(&expert, &r.prompt_dist, r.budget).unwrap();
        let masses = mode_masses(&dist, &r.modes);
        assert_eq!(masses.len(), 2);
        assert!((masses[0] - masses[1]).abs() <= 1e-12);

        // Enumeration oracle: the tree has 15 leaves (responses of length
        // 1..=2 ending in EOS, length-3 responses with or without EOS), so
        // each mode carries exp(3)/(2 exp(3) + 13).
        let trajs = enumerate_trajectories(&r.vocab, &[], r.capacity, r.budget).unwrap();
        assert_eq!(trajs.len(), 15);
        let e3 = 3f64.exp();
        let expected = e3 / (2.0 * e3 + 13.0);
        assert!((masses[0] - expected).abs() <= 1e-12, "{} vs {expected}", masses[0]);
        // Modes dominate every other trajectory.
        for traj in dist.support() {
            let mass = dist.conditional_of(traj).unwrap();
            if traj.response() != [0, 0, 2] && traj.response() != [1, 1, 2] {
                assert!(mass < expected);
            }
        }
    }

    #[test]
    fn full_order_class_represents_expert() {
        use crate::occupancy::{divergence, DivergenceKind};
        // With full context the scenario is realizable: SFT on exact
        // feedback recovers both modes.
        let mut config = build_bimodal_scenario(3.0, 1.0, ContextOrder::Full);
        config.optimizer.max_iters = 4000;
        config.optimizer.step_size = 0.1;
        let outcome = crate::harness::experiment::run_experiment(&config, None).unwrap();
        let r = config.resolve(None).unwrap();
        let expert = boltzmann_expert(
            &r.expert_spec,
            &r.vocab,
            &r.prompt_dist,
            r.capacity,
            r.budget,
        )
        .unwrap();
        let expert_joint =
            trajectory_distribution(&expert, &r.prompt_dist, r.budget).unwrap().joint();
        let fitted =
            trajectory_distribution(&outcome.policy, &r.prompt_dist, r.budget).unwrap().joint();
        let fkl = divergence(&expert_joint, &fitted, DivergenceKind::ForwardKl).unwrap();
        assert!(fkl <= 1e-6, "fkl {fkl}");
        let e3 = 3f64.exp();
        let expected = e3 / (2.0 * e3 + 13.0);
        for mass in &outcome.report.final_metrics.mode_masses {
            assert!((mass - expected).abs() <= 1e-6);
        }
    }
}
