use swaprank::data::SyntheticConfig;
use swaprank::experiment::ablation::{run_ablation, AblationPreset, AblationRow};
use swaprank::experiment::{run_eval, run_train, DataSource, Environment, ExperimentConfig, TrainLogRow};
use swaprank::needs::NeedKind;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data = DataSource::Synthetic(SyntheticConfig {
        n_users: 300,
        n_items: 80,
        ..Default::default()
    });
    c.trainer.steps = 20;
    c.trainer.eval_every = 5;
    c
}

#[test]
fn training_improves_on_the_initial_policy() {
    let cfg = small();
    let env = Environment::build(&cfg).unwrap();
    let run = run_train(&env, &cfg, None).unwrap();
    let first = run.log.first().unwrap().val_ndcg5.unwrap();
    let (last, _) = run.final_validation();
    assert!(last > first, "{first} -> {last}");
    let eval = run_eval(&run.params, &env.test, cfg.seed).unwrap();
    let policy = eval.get("policy", "ndcg5").unwrap().mean;
    let random = eval.get("random", "ndcg5").unwrap().mean;
    assert!(policy > random, "policy {policy} random {random}");
}

#[test]
fn every_need_builds_an_environment() {
    for need in [
        NeedKind::MaxInterest,
        NeedKind::NicheDiscovery { alpha_bonus: 0.5 },
        NeedKind::TrendPromotion {
            alpha_blend: 0.7,
            window_seconds: 86_400,
        },
    ] {
        let mut cfg = small();
        cfg.need = need;
        let env = Environment::build(&cfg).unwrap();
        assert!(env.train.iter().all(|e| e.eval_relevance.covers(&e.ctx)));
    }
}

#[test]
fn ablation_csv_is_reproducible() {
    let mut cfg = small();
    cfg.trainer.steps = 5;
    cfg.ablation.seeds = vec![0, 1];
    let csv = || {
        let rows = run_ablation(&cfg, AblationPreset::RewardVariant).unwrap();
        let mut buf = Vec::new();
        AblationRow::write_csv(&rows, &mut buf).unwrap();
        buf
    };
    let a = csv();
    assert_eq!(a, csv());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 3 * 2);
}

#[test]
fn train_log_has_one_row_per_step_after_the_initial_one() {
    let cfg = small();
    let env = Environment::build(&cfg).unwrap();
    let run = run_train(&env, &cfg, None).unwrap();
    let mut buf = Vec::new();
    TrainLogRow::write_csv(&run.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2 + cfg.trainer.steps);
    assert!(text.lines().nth(1).unwrap().starts_with("0,,"));
}
