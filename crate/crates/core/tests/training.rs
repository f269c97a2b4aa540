mod common;

use advseg::model::{Checkpoint, ModelError, Partition};
use advseg::schema::DomainTag;
use advseg::training::{fine_tune, train, AblationMode, RunDir, StepLog, TrainError};
use common::*;

fn parameters(model: &advseg::model::Model<f32>) -> Vec<(String, Vec<f32>)> {
    Partition::ALL.iter().flat_map(|&p| model.parameters_of(p)).collect()
}

fn read_log(dir: &RunDir) -> Vec<StepLog> {
    let mut r = csv::Reader::from_path(dir.metrics()).unwrap();
    r.deserialize().map(Result::unwrap).collect()
}

#[test]
fn logged_totals_follow_the_weighted_sum() {
    let config = toy_train_config(AblationMode::AlternatingWeatherTimeAware, 1);
    assert_eq!((config.alpha, config.beta), (1e-5, 1e-5));
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let outcome = train(&config, &real_set(4, 1), &synth_set(4, 2), Some(&run), false).unwrap();
    let logged = read_log(&run);
    assert_eq!(logged, outcome.log);
    assert_eq!(logged.len(), 10);
    for row in &logged {
        let expected = row.l_seg + config.alpha * row.l_was + config.beta * row.l_tas;
        assert!((row.l_total - expected).abs() <= 1e-12 * expected.abs(), "{row:?}");
        assert!(row.l_was > 0.0 && row.l_tas > 0.0);
    }
    let domains: Vec<DomainTag> = logged.iter().map(|r| r.domain).collect();
    assert_eq!(domains[..2], [DomainTag::StandardReal, DomainTag::AdverseSynthetic]);
}

#[test]
fn inactive_supervisors_contribute_nothing() {
    let config = toy_train_config(AblationMode::AlternatingWeatherAware, 1);
    let outcome = train(&config, &real_set(4, 1), &synth_set(4, 2), None, false).unwrap();
    for row in &outcome.log {
        assert_eq!(row.l_tas, 0.0);
        assert!(row.l_was > 0.0);
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let (real, synth) = (real_set(4, 1), synth_set(4, 2));
    let config = toy_train_config(AblationMode::AlternatingWeatherTimeAware, 9);
    let a = train(&config, &real, &synth, None, false).unwrap();
    let b = train(&config, &real, &synth, None, false).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(parameters(&a.model), parameters(&b.model));
    assert_eq!(a.model.buffers(), b.model.buffers());

    let other = toy_train_config(AblationMode::AlternatingWeatherTimeAware, 10);
    let c = train(&other, &real, &synth, None, false).unwrap();
    assert_ne!(parameters(&a.model), parameters(&c.model));
}

#[test]
fn interrupted_runs_resume_exactly() {
    let (real, synth) = (real_set(4, 1), synth_set(4, 2));
    let mut config = toy_train_config(AblationMode::AlternatingWeatherTimeAware, 4);
    config.checkpoint_every = 5;

    let a = tempfile::tempdir().unwrap();
    let run_a = RunDir::new(a.path());
    let full = train(&config, &real, &synth, Some(&run_a), false).unwrap();
    assert!(run_a.checkpoint(5).is_file());
    assert!(run_a.checkpoint(10).is_file());
    assert!(run_a.final_checkpoint().is_file());
    assert_eq!(run_a.latest_checkpoint().unwrap().0, 10);

    // Same run killed somewhere after step 5.
    let b = tempfile::tempdir().unwrap();
    let run_b = RunDir::new(b.path());
    train(&config, &real, &synth, Some(&run_b), false).unwrap();
    std::fs::remove_file(run_b.final_checkpoint()).unwrap();
    std::fs::remove_file(run_b.checkpoint(10)).unwrap();
    let resumed = train(&config, &real, &synth, Some(&run_b), true).unwrap();
    assert_eq!(resumed.resumed_from, Some(5));
    assert_eq!(resumed.log, full.log);
    assert_eq!(parameters(&resumed.model), parameters(&full.model));
    assert_eq!(resumed.model.buffers(), full.model.buffers());
    assert_eq!(std::fs::read(run_b.final_checkpoint()).unwrap(), std::fs::read(run_a.final_checkpoint()).unwrap());

    // A finished run resumes at its end without further steps.
    let again = train(&config, &real, &synth, Some(&run_a), true).unwrap();
    assert_eq!(again.resumed_from, Some(10));
    assert_eq!(parameters(&again.model), parameters(&full.model));

    // Checkpoints of a different configuration are ignored.
    let mut changed = config.clone();
    changed.seed = 99;
    let fresh = train(&changed, &real, &synth, Some(&run_a), true).unwrap();
    assert_eq!(fresh.resumed_from, None);
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let config = toy_train_config(AblationMode::ScratchRealOnly, 2);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let outcome = train(&config, &real_set(3, 5), &[], Some(&run), false).unwrap();
    let ckpt = Checkpoint::load(&run.final_checkpoint()).unwrap();
    assert_eq!(ckpt.iteration, 10);
    let restored = advseg::model::Model::<f32>::from_checkpoint(&ckpt).unwrap();
    assert_eq!(parameters(&restored), parameters(&outcome.model));
    assert_eq!(restored.buffers(), outcome.model.buffers());
}

#[test]
fn single_source_modes_need_only_their_source() {
    let real = real_set(3, 5);
    let synth = synth_set(3, 6);
    let real_only = train(&toy_train_config(AblationMode::ScratchRealOnly, 1), &real, &[], None, false).unwrap();
    assert!(real_only.log.iter().all(|r| r.domain == DomainTag::StandardReal && r.l_was == 0.0));
    let synth_only = train(&toy_train_config(AblationMode::ScratchSynthOnly, 1), &[], &synth, None, false).unwrap();
    assert!(synth_only.log.iter().all(|r| r.domain == DomainTag::AdverseSynthetic));

    let err = train(&toy_train_config(AblationMode::ScratchSynthOnly, 1), &real, &[], None, false).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset(ref s) if s == "synth"), "{err}");
    let err =
        train(&toy_train_config(AblationMode::AlternatingNoSupervisors, 1), &[], &synth, None, false).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset(ref s) if s == "real"), "{err}");
}

#[test]
fn sequential_mode_pretrains_then_fine_tunes() {
    let mut config = toy_train_config(AblationMode::ScratchRealThenFinetuneSynth, 1);
    config.iterations = 8;
    let outcome = train(&config, &real_set(3, 5), &synth_set(3, 6), None, false).unwrap();
    let domains: Vec<DomainTag> = outcome.log.iter().map(|r| r.domain).collect();
    assert_eq!(domains, [[DomainTag::StandardReal; 6].as_slice(), &[DomainTag::AdverseSynthetic; 2]].concat());
    assert_eq!(outcome.log[6].lr, config.optimizer.base_lr);
    assert!(outcome.log[5].lr < outcome.log[4].lr);
}

#[test]
fn fine_tuning_continues_from_a_checkpoint() {
    let config = toy_train_config(AblationMode::ScratchRealOnly, 2);
    let base = train(&config, &real_set(3, 5), &[], None, false).unwrap();
    let ckpt = base.model.to_checkpoint(10);
    let synth = synth_set(3, 6);

    let zero = fine_tune(&ckpt, &synth, &advseg::training::TrainConfig { iterations: 0, ..config.clone() }).unwrap();
    assert_eq!(parameters(&zero.model), parameters(&base.model));
    assert!(zero.log.is_empty());

    let tuned = fine_tune(&ckpt, &synth, &config).unwrap();
    assert_eq!(tuned.log.len(), 10);
    assert!(tuned.log.iter().all(|r| r.domain == DomainTag::AdverseSynthetic && r.l_was == 0.0));
    assert_eq!(tuned.log[0].lr, config.optimizer.base_lr);
    for p in [Partition::Dcnn, Partition::EncoderRest, Partition::Decoder] {
        assert_ne!(tuned.model.parameters_of(p), base.model.parameters_of(p), "{p}");
    }

    let mut other = config.clone();
    other.model.aspp_channels += 4;
    let err = fine_tune(&ckpt, &synth, &other).unwrap_err();
    assert!(matches!(err, TrainError::Model(ModelError::CheckpointMismatch { .. })), "{err}");
    assert!(matches!(fine_tune(&ckpt, &[], &config), Err(TrainError::EmptyDataset(_))));
}
