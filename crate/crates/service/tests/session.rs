use ommbrl::config::{EnvStream, StreamConfig};
use ommbrl::drivesim::{Controls, SimState};
use ommbrl::online::drive::{round_env, round_profile, warm_start};
use ommbrl_service::session::{Advance, Session};
use ommbrl_service::{Frame, Phase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> StreamConfig {
    let mut cfg = StreamConfig::default();
    cfg.seed = seed;
    cfg.rollouts = 2;
    cfg.hyper.hidden = vec![8];
    cfg.hyper.n_meta_updates = 2;
    cfg.hyper.batch = 4;
    cfg.hyper.rounds_per_update = 1;
    cfg.hyper.warm_updates = 5;
    cfg.plan.horizon = 1;
    if let EnvStream::Drive(d) = &mut cfg.env {
        d.offline_rounds = 1;
        d.offline_rollouts = 1;
    }
    cfg
}

fn session(seed: u64) -> (StreamConfig, Session) {
    let cfg = tiny(seed);
    let warm = warm_start(&cfg).unwrap();
    (cfg.clone(), Session::new("test", cfg, warm).unwrap())
}

fn scripted(rng: &mut ChaCha8Rng) -> Controls {
    Controls { steer: rng.random_range(-0.3..0.3), throttle: rng.random_range(0.0..0.6), brake: rng.random_range(0.0..0.3), reverse: false }
}

fn tick_state(frame: Frame) -> SimState {
    let Frame::Tick { state, .. } = frame else { panic!("expected a tick") };
    SimState::from_slice(&state).unwrap()
}

/// Drives until the episode ends; returns the states shown and the advance that ended it.
fn drive_episode(s: &mut Session, rng: &mut ChaCha8Rng, inputs: &mut Vec<Controls>) -> (Vec<SimState>, Advance) {
    let mut states = Vec::new();
    loop {
        states.push(tick_state(s.tick_frame().unwrap().expect("episode running")));
        let c = scripted(rng);
        inputs.push(c);
        s.set_input(s.tick_index(), c).unwrap();
        let adv = s.advance().unwrap();
        if !adv.frames.is_empty() {
            return (states, adv);
        }
    }
}

#[test]
fn replayed_inputs_reproduce_the_offline_simulator() {
    let (cfg, mut s) = session(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let profile = round_profile(&cfg, 1).unwrap();
    for slot in 0..=cfg.rollouts {
        assert_eq!(s.slot(), slot);
        let mut inputs = Vec::new();
        let (states, adv) = drive_episode(&mut s, &mut rng, &mut inputs);
        let mut env = round_env(&cfg, &profile, 1, slot).unwrap();
        let mut offline = vec![*env.state()];
        for c in &inputs[..inputs.len() - 1] {
            offline.push(env.step_manual(*c).state);
        }
        assert_eq!(states.len(), offline.len());
        for (a, b) in states.iter().zip(&offline) {
            assert_eq!(a.to_vec().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.to_vec().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(env.step_manual(*inputs.last().unwrap()).done);
        let Frame::EpisodeEnd { costs, .. } = &adv.frames[0] else { panic!("episode end first") };
        assert_eq!(costs.len(), inputs.len());
        if let Some(job) = adv.job {
            s.install(job.run().unwrap()).unwrap();
        }
    }
    assert_eq!(s.round(), 2);
    assert_eq!(s.records().len(), 1);
    assert_eq!(s.records()[0].data.len(), cfg.rollouts);
}

#[test]
fn phases_change_only_at_episode_boundaries() {
    let (cfg, mut s) = session(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(s.phase(), Phase::Exploring);
    let (_, adv) = drive_episode(&mut s, &mut rng, &mut Vec::new());
    assert_eq!(s.phase(), Phase::BetweenEpisodes);
    assert!(s.tick_frame().unwrap().is_none());
    let job = adv.job.expect("τ triggers adaptation");
    s.install(job.run().unwrap()).unwrap();
    assert_eq!(s.phase(), Phase::Driving);
    assert!(s.install(ommbrl_service::session::TrainResult::Planner(None)).is_err());
    for _ in 1..cfg.rollouts {
        let (_, adv) = drive_episode(&mut s, &mut rng, &mut Vec::new());
        assert!(adv.job.is_none());
        assert_eq!(s.phase(), Phase::Driving);
    }
    let (_, adv) = drive_episode(&mut s, &mut rng, &mut Vec::new());
    assert_eq!(adv.frames[1], Frame::RoundEnd { kl_estimate_unavailable: true, regret_gap_if_available: None });
    s.install(adv.job.expect("round end triggers the meta update").run().unwrap()).unwrap();
    assert_eq!((s.round(), s.slot(), s.phase()), (2, 0, Phase::Exploring));
}

#[test]
fn coasting_without_inputs_survives_ten_thousand_ticks() {
    let (_, mut s) = session(3);
    let (mut episodes, mut ticks) = (0, 0u64);
    s.set_input(0, Controls { steer: 0.1, throttle: 0.2, brake: 0.0, reverse: false }).unwrap();
    while ticks < 10_000 {
        let frame = s.tick_frame().unwrap().expect("running");
        let Frame::Tick { t, .. } = frame else { unreachable!() };
        assert_eq!(t, ticks);
        let adv = s.advance().unwrap();
        ticks += 1;
        if !adv.frames.is_empty() {
            episodes += 1;
        }
        if let Some(job) = adv.job {
            s.install(job.run().unwrap()).unwrap();
        }
        assert!(s.state().is_none_or(|st| st.to_vec().iter().all(|x| x.is_finite())));
    }
    assert!(episodes > 10, "{episodes}");
    assert!(s.round() > 2);
}

#[test]
fn inputs_from_the_future_are_refused() {
    let (_, mut s) = session(0);
    assert!(s.set_input(1, Controls::default()).is_err());
    assert!(s.set_input(0, Controls::default()).is_ok());
}

#[test]
fn repeated_tick_frames_are_identical() {
    let (_, mut s) = session(0);
    let a = s.tick_frame().unwrap();
    assert_eq!(a, s.tick_frame().unwrap());
    s.advance().unwrap();
    let Some(Frame::Tick { t, .. }) = s.tick_frame().unwrap() else { panic!() };
    assert_eq!(t, 1);
}

#[test]
fn restart_discards_a_partial_episode() {
    let (_, mut s) = session(4);
    let start = s.tick_frame().unwrap();
    for _ in 0..3 {
        s.set_input(s.tick_index(), Controls { steer: 0.5, throttle: 1.0, brake: 0.0, reverse: false }).unwrap();
        s.advance().unwrap();
    }
    s.restart_episode().unwrap();
    let Some(Frame::Tick { t, state, .. }) = s.tick_frame().unwrap() else { panic!() };
    let Some(Frame::Tick { state: first, .. }) = start else { panic!() };
    assert_eq!(t, 3);
    assert_eq!(state, first);
}

#[test]
fn checkpoint_resumes_at_the_round_start() {
    let (cfg, mut s) = session(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    while s.round() == 1 {
        let (_, adv) = drive_episode(&mut s, &mut rng, &mut Vec::new());
        if let Some(job) = adv.job {
            s.install(job.run().unwrap()).unwrap();
        }
    }
    let dir = tempfile::tempdir().unwrap();
    s.checkpoint(dir.path()).unwrap();
    let back = Session::resume(dir.path(), "test", cfg.clone()).unwrap().expect("checkpoint written");
    assert_eq!(back.round(), 2);
    assert_eq!(back.meta(), s.meta());
    assert_eq!(back.phase(), Phase::Exploring);
    assert!(Session::resume(dir.path(), "other", cfg).unwrap().is_none());
}

#[test]
fn tabular_configs_are_refused() {
    let cfg = tiny(0);
    let warm = warm_start(&cfg).unwrap();
    assert!(Session::new("x", StreamConfig::tabular(), warm.clone()).is_err());
    let mut wide = cfg;
    wide.hyper.hidden = vec![9];
    assert!(Session::new("x", wide, warm).is_err());
}
