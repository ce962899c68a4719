use critgen_core::ablation::{self, AblationSetup, Terms};
use critgen_core::config::RunConfig;
use critgen_core::data::Dataset;
use critgen_core::diffusion::DiffusionModel;
use critgen_core::gradcheck;
use critgen_core::metrics::{self, PropertySamples};
use critgen_core::pipeline;
use critgen_core::simulate::{self, GuidedPlanner, SimLog};

const TINY: &str = r#"
[data]
episodes = 9

[diffusion]
steps = 8
embed_dim = 8
hidden = [24, 24]

[diffusion.train]
steps = 40
batch_size = 8

[simulation]
steps = 30
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

#[test]
fn corpus_to_metrics() {
    let cfg = tiny();
    let ds = pipeline::generate_corpus(&cfg, 2).unwrap();
    assert_eq!(ds.episodes.len() + ds.skipped, 9);

    let dir = tempfile::tempdir().unwrap();
    ds.save(&dir.path().join("data")).unwrap();
    let ds = Dataset::load(&dir.path().join("data")).unwrap();

    let (model, report) = pipeline::train_model(&cfg, &ds, 2).unwrap();
    assert_eq!(report.losses.len(), 40);
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let ckpt = dir.path().join("model.json");
    model.save(&ckpt).unwrap();
    let model = DiffusionModel::load(&ckpt).unwrap();

    let battery = simulate::scenario_battery(3, 1);
    let planner = GuidedPlanner {
        model: &model,
        guidance: cfg.guidance.clone(),
    };
    let logs = simulate::run_battery(&battery, &[0, 1], &planner, &cfg.sim_config()).unwrap();
    assert_eq!(logs.len(), 6);
    assert!(logs.iter().all(|l| l.summary.valid));
    for l in &logs {
        assert_eq!(&SimLog::from_jsonl(&l.to_jsonl().unwrap()).unwrap(), l);
    }
    let again = simulate::run_battery(&battery, &[0, 1], &planner, &cfg.sim_config()).unwrap();
    assert_eq!(logs, again);

    let reference = PropertySamples::from_dataset(&ds);
    let m = metrics::evaluate(&logs, &reference, &cfg.metrics).unwrap();
    assert!((0.0..=1.0).contains(&m.cr) && (0.0..=1.0).contains(&m.ir));
    assert!(m.rd >= 0.0 && m.ss <= 1.0);
    assert_eq!(m.episodes, 6);

    let sim = cfg.sim_config();
    let setup = AblationSetup {
        model: &model,
        scenarios: &battery[..1],
        seeds: &[0],
        guidance: &cfg.guidance,
        sim: &sim,
        metrics: &cfg.metrics,
        reference: &reference,
    };
    let mut seen = Vec::new();
    let table = ablation::run_ablation(&setup, &[Terms::NONE, Terms::ALL], &mut |row, logs| {
        seen.push((row.label.clone(), logs.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [("none".to_string(), 1), ("AB+DV+AS".to_string(), 1)]);
    assert_eq!(table.to_csv().lines().count(), 3);
}

#[test]
fn gradcheck_passes_on_a_few_cases() {
    let r = gradcheck::run_gradcheck(3, 5).unwrap();
    assert!(r.passed, "{}", r.to_text());
    assert_eq!(r.components.len(), 3);
}

#[test]
fn config_round_trip_keeps_overrides() {
    let cfg = tiny();
    let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.diffusion.hidden, vec![24, 24]);
    assert!(RunConfig::from_toml("[diffusion]\nunknown = 1\n").is_err());
}
