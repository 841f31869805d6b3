mod common;

use arig_core::engine::{run_full_prefix, DecodeMode, Session};
use arig_core::EngineConfig;

fn config() -> EngineConfig {
    let mut cfg = EngineConfig::small();
    cfg.context = 12;
    cfg
}

#[test]
fn incremental_matches_full_prefix() {
    let cfg = config();
    let model = common::model(&cfg, 11);
    let (init, inputs) = common::stream(&cfg, 120, 3);
    let mut s = Session::new(model.clone(), init.clone()).unwrap();
    let fast = s.run_stream(&inputs).unwrap();
    let slow = run_full_prefix(&model, &init, &inputs).unwrap();
    assert_eq!(fast.len(), slow.len());
    for (a, b) in fast.iter().zip(&slow) {
        assert_eq!(a, b, "frame {}", a.frame_index);
    }
}

#[test]
fn equivalence_survives_context_eviction_and_overrides() {
    let mut cfg = config();
    cfg.context = 3;
    let model = common::model(&cfg, 5);
    let (init, mut inputs) = common::stream(&cfg, 60, 9);
    for t in [4usize, 19, 33] {
        inputs[t].agent_motion = Some(vec![0.25; cfg.motion_dim]);
    }
    inputs[21].agent_vad = Some(true);
    inputs[22].user_vad = Some(false);
    let mut s = Session::new(model.clone(), init.clone()).unwrap();
    let fast = s.run_stream(&inputs).unwrap();
    let slow = run_full_prefix(&model, &init, &inputs).unwrap();
    assert_eq!(fast, slow);
}

#[test]
fn full_decode_mode_is_bit_identical() {
    let cfg = config();
    let model = common::model(&cfg, 2);
    let (init, inputs) = common::stream(&cfg, 80, 4);
    let mut a = Session::new(model.clone(), init.clone()).unwrap();
    let mut b = Session::new(model, init).unwrap();
    b.decode_mode = DecodeMode::Full;
    assert_eq!(
        a.run_stream(&inputs).unwrap(),
        b.run_stream(&inputs).unwrap()
    );
}
