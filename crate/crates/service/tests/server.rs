use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use ommbrl::config::{EnvStream, StreamConfig};
use ommbrl::drivesim::{Controls, SimState};
use ommbrl::online::drive::{round_env, round_profile, warm_start};
use ommbrl_service::protocol::BUSY;
use ommbrl_service::{Frame, ServeOptions, Server, ServerHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

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

fn start(cfg: &StreamConfig, opts: ServeOptions) -> ServerHandle {
    let warm = warm_start(cfg).unwrap();
    Server::bind("127.0.0.1:0", cfg.clone(), warm, opts).unwrap().spawn().unwrap()
}

fn connect(addr: SocketAddr) -> Client {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        s.set_nodelay(true).unwrap();
    }
    ws
}

fn send(ws: &mut Client, f: &Frame) {
    ws.send(Message::text(f.encode())).unwrap();
}

fn recv(ws: &mut Client) -> Frame {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return Frame::decode(t.as_str()).unwrap(),
            Message::Close(_) => panic!("server closed the connection"),
            _ => {}
        }
    }
}

fn hello(ws: &mut Client, session: &str) -> (String, Frame) {
    send(ws, &Frame::Hello { session: session.into() });
    let Frame::Hello { session } = recv(ws) else { panic!("expected hello") };
    (session, recv(ws))
}

fn state_of(f: &Frame) -> SimState {
    let Frame::Tick { state, .. } = f else { panic!("expected a tick, got {f:?}") };
    SimState::from_slice(state).unwrap()
}

fn tick_index(f: &Frame) -> u64 {
    let Frame::Tick { t, .. } = f else { panic!("expected a tick, got {f:?}") };
    *t
}

#[test]
fn second_client_is_turned_away_busy() {
    let server = start(&tiny(0), ServeOptions::default());
    let mut first = connect(server.addr);
    let (id, _) = hello(&mut first, "");
    assert_eq!(id, "s1");
    let mut second = connect(server.addr);
    assert_eq!(recv(&mut second), Frame::error(BUSY));
    send(&mut first, &Frame::input(0, Controls::default()));
    assert_eq!(tick_index(&recv(&mut first)), 1);
    server.shutdown().unwrap();
}

#[test]
fn scripted_client_replays_the_offline_trajectory_within_budget() {
    let cfg = tiny(7);
    let server = start(&cfg, ServeOptions::default());
    let mut ws = connect(server.addr);
    let (_, mut frame) = hello(&mut ws, "");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut states, mut inputs, mut latencies) = (Vec::new(), Vec::new(), Vec::new());
    let end = loop {
        states.push(state_of(&frame));
        let c = Controls { steer: rng.random_range(-0.4..0.4), throttle: rng.random_range(0.0..0.5), brake: 0.0, reverse: false };
        inputs.push(c);
        let sent = Instant::now();
        send(&mut ws, &Frame::input(tick_index(&frame), c));
        frame = recv(&mut ws);
        latencies.push(sent.elapsed());
        if !matches!(frame, Frame::Tick { .. }) {
            break frame;
        }
    };
    let Frame::EpisodeEnd { costs, .. } = end else { panic!("expected the episode end") };
    assert_eq!(costs.len(), inputs.len());
    let mut env = round_env(&cfg, &round_profile(&cfg, 1).unwrap(), 1, 0).unwrap();
    let mut offline = vec![*env.state()];
    let mut offline_costs = Vec::new();
    for c in &inputs {
        let out = env.step_manual(*c);
        offline.push(out.state);
        offline_costs.push(out.cost);
    }
    offline.pop();
    let bits = |v: &[SimState]| v.iter().flat_map(|s| s.to_vec()).map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(&states), bits(&offline));
    assert_eq!(costs.iter().map(|c| c.to_bits()).collect::<Vec<_>>(), offline_costs.iter().map(|c| c.to_bits()).collect::<Vec<_>>());
    latencies.pop();
    let worst = latencies.iter().max().unwrap();
    assert!(*worst < Duration::from_millis(50), "{worst:?}");
    assert_eq!(tick_index(&recv(&mut ws)), inputs.len() as u64);
    server.shutdown().unwrap();
}

#[test]
fn fuzzed_frames_get_error_replies_and_the_session_survives() {
    let server = start(&tiny(1), ServeOptions::default());
    let mut ws = connect(server.addr);
    send(&mut ws, &Frame::input(0, Controls::default()));
    assert!(matches!(recv(&mut ws), Frame::Error { .. }));
    let (_, first) = hello(&mut ws, "");
    let templates = [
        Frame::input(0, Controls { steer: 0.1, throttle: 0.2, brake: 0.3, reverse: false }).encode(),
        Frame::Hello { session: "x".into() }.encode(),
        Frame::EpisodeEnd { costs: vec![1.0], collisions: 0, missed_turns: 0 }.encode(),
        first.encode(),
    ];
    let sentinel = Frame::input(1 << 40, Controls::default());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sent = 0;
    let mut ticks = 0;
    while sent < 10_000 {
        for _ in 0..200 {
            let mut bytes = templates[rng.random_range(0..templates.len())].clone().into_bytes();
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..bytes.len());
                bytes[i] = rng.random();
            }
            let text = String::from_utf8_lossy(&bytes).into_owned();
            ws.send(Message::text(text)).unwrap();
            sent += 1;
        }
        if rng.random::<bool>() {
            ws.send(Message::binary(vec![1u8, 2, 3])).unwrap();
        }
        send(&mut ws, &sentinel);
        loop {
            match recv(&mut ws) {
                Frame::Error { msg } if msg.contains("1099511627776") => break,
                Frame::Tick { .. } => ticks += 1,
                _ => {}
            }
        }
    }
    let mut next = Frame::Hello { session: String::new() };
    let mut t = 0;
    while !matches!(next, Frame::Tick { .. }) {
        t += 1;
        send(&mut ws, &Frame::input(ticks + t - 1, Controls::default()));
        send(&mut ws, &sentinel);
        loop {
            match recv(&mut ws) {
                Frame::Error { msg } if msg.contains("1099511627776") => break,
                f @ Frame::Tick { .. } => next = f,
                _ => {}
            }
        }
        assert!(t < 5, "session stopped ticking");
    }
    server.shutdown().unwrap();
}

#[test]
fn realtime_ticks_coast_without_input() {
    let server = start(&tiny(2), ServeOptions { realtime_divisor: Some(1e4), checkpoint_dir: None });
    let mut ws = connect(server.addr);
    let (_, first) = hello(&mut ws, "");
    let mut last = tick_index(&first);
    let (mut ticks, mut episodes, mut rounds) = (1u64, 0, 0);
    let started = Instant::now();
    while ticks < 10_000 {
        match recv(&mut ws) {
            Frame::Tick { t, .. } => {
                assert_eq!(t, last + 1);
                last = t;
                ticks += 1;
            }
            Frame::EpisodeEnd { .. } => episodes += 1,
            Frame::RoundEnd { kl_estimate_unavailable, regret_gap_if_available } => {
                assert!(kl_estimate_unavailable && regret_gap_if_available.is_none());
                rounds += 1;
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(started.elapsed() < Duration::from_secs(300));
    }
    assert!(episodes > 10 && rounds > 2, "{episodes} episodes, {rounds} rounds");
    server.shutdown().unwrap();
}

#[test]
fn reconnect_resumes_the_session_at_the_episode_start() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ServeOptions { realtime_divisor: None, checkpoint_dir: Some(dir.path().to_path_buf()) };
    let server = start(&tiny(3), opts);
    let mut ws = connect(server.addr);
    let (id, first) = hello(&mut ws, "");
    let mut frame = first.clone();
    for _ in 0..4 {
        send(&mut ws, &Frame::input(tick_index(&frame), Controls { steer: 0.3, throttle: 0.8, brake: 0.0, reverse: false }));
        frame = recv(&mut ws);
    }
    ws.close(None).unwrap();
    while ws.read().is_ok() {}
    let mut again = connect(server.addr);
    let mut resumed = None;
    for _ in 0..50 {
        send(&mut again, &Frame::Hello { session: id.clone() });
        match recv(&mut again) {
            Frame::Hello { session } => {
                assert_eq!(session, id);
                resumed = Some(recv(&mut again));
                break;
            }
            Frame::Error { msg } if msg == BUSY => {
                std::thread::sleep(Duration::from_millis(20));
                again = connect(server.addr);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    let resumed = resumed.expect("session resumed");
    assert_eq!(tick_index(&resumed), 4);
    assert_eq!(state_of(&resumed), state_of(&first));
    assert!(dir.path().join(format!("{id}.ckpt")).exists());
    server.shutdown().unwrap();
}
