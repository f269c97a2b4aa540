use std::path::Path;

use advseg::eval::{ConditionReport, ReportRow};
use advseg::experiment::{desk_train_config, median_rows, DeskScale, RunSummary};
use advseg::scenegen::GenerationPlan;
use advseg::training::{AblationMode, TrainConfig};
use serde_json::Value;

#[test]
fn shipped_desk_config_matches_the_library() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_ablation.json");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let scale = DeskScale::default();
    for (key, plan) in ["real", "synth", "eval_standard", "eval_adverse"].iter().zip(scale.plans()) {
        let parsed: GenerationPlan = serde_json::from_value(v["plans"][key].clone()).unwrap();
        assert_eq!(parsed, plan, "{key}");
    }
    let mut train: TrainConfig = serde_json::from_value(v["train"].clone()).unwrap();
    train.checkpoint_every = 0;
    assert_eq!(train, desk_train_config(&scale, AblationMode::AlternatingWeatherTimeAware, 0));
}

fn summary(mode: AblationMode, seed: u64, adverse: f64, standard: f64) -> RunSummary {
    RunSummary {
        mode,
        seed,
        adverse_miou: adverse,
        standard_miou: standard,
        adverse: ConditionReport::default(),
        standard: ConditionReport::default(),
        final_l_seg: 0.0,
    }
}

#[test]
fn median_rows_keep_mode_order() {
    let runs = vec![
        summary(AblationMode::ScratchRealOnly, 0, 0.3, 0.8),
        summary(AblationMode::AlternatingWeatherTimeAware, 0, 0.5, 0.7),
        summary(AblationMode::ScratchRealOnly, 1, 0.1, 0.6),
        summary(AblationMode::ScratchRealOnly, 2, 0.2, 0.7),
    ];
    let rows = median_rows(&runs);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, AblationMode::ScratchRealOnly);
    let ReportRow { name, cells } = &rows[0].1;
    assert_eq!(name, "ScratchRealOnly");
    assert_eq!(cells[4], Some(0.2));
    assert_eq!(cells[5], Some(0.7));
    assert_eq!(cells[0], None);
    assert_eq!(rows[1].1.cells[4], Some(0.5));
}
