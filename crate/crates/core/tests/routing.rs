mod common;

use advseg::model::{build_model, Head, Model, Partition};
use advseg::nn::Pass;
use advseg::schema::DomainTag;
use advseg::training::{accumulate_gradients, AblationMode, Routing};
use common::*;

#[test]
fn segmentation_loss_never_reaches_the_heads() {
    for k in 0..10u64 {
        check_segmentation_routing(100 + k, 200 + k).unwrap_or_else(|e| panic!("model {k}: {e}"));
    }
}

#[test]
fn supervisor_losses_reach_only_their_head_and_the_dcnn() {
    for k in 0..10u64 {
        for head in [Head::Weather, Head::Time] {
            check_supervisor_routing(head, 300 + k, 400 + k).unwrap_or_else(|e| panic!("model {k}: {e}"));
        }
    }
}

#[test]
fn backprop_matches_central_differences() {
    for k in 0..2u64 {
        let checks = finite_difference_check(500 + k, 600 + k, 5, 0.7, 1.3);
        for p in Partition::ALL {
            assert!(checks.iter().filter(|c| c.partition == p).count() >= 5);
        }
        for c in &checks {
            assert!(c.rel_error() <= 1e-3, "{c:?} rel {}", c.rel_error());
        }
    }
}

#[test]
fn frozen_steps_leave_dcnn_gradients_empty() {
    let mut model: Model<f64> = build_model(&toy_config(32), 7).unwrap();
    let samples = real_set(2, 8);
    let b = batch(&samples);
    let routing = Routing::for_step(AblationMode::AlternatingWeatherTimeAware, DomainTag::StandardReal);
    assert!(routing.freeze_dcnn);
    let losses = accumulate_gradients(&mut model, &b, routing, 0.1, 0.1, Pass::Probe).unwrap();
    assert!(losses.l_was > 0.0 && losses.l_tas > 0.0);
    assert!(grads(&model, Partition::Dcnn).iter().all(|&g| g == 0.0));
    for p in [Partition::EncoderRest, Partition::Decoder, Partition::WasHead, Partition::TasHead] {
        assert!(grads(&model, p).iter().any(|&g| g != 0.0), "{p}");
    }

    let routing = Routing::for_step(AblationMode::AlternatingWeatherAware, DomainTag::AdverseSynthetic);
    accumulate_gradients(&mut model, &b, routing, 0.1, 0.1, Pass::Probe).unwrap();
    assert!(grads(&model, Partition::Dcnn).iter().any(|&g| g != 0.0));
    assert!(grads(&model, Partition::TasHead).iter().all(|&g| g == 0.0));
}

#[test]
fn freeze_contract_over_alternating_steps() {
    let s = freeze_stats(20, 3);
    assert_eq!((s.real_steps, s.synth_steps), (10, 10));
    assert_eq!(s.real_dcnn_changed, 0);
    assert!(s.synth_dcnn_changed * 10 >= s.synth_steps * 9, "{s:?}");
    assert_eq!(s.real_heads_changed, s.real_steps);
    assert_eq!(s.synth_heads_changed, s.synth_steps);
}
