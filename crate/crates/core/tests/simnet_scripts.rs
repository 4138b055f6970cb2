use proptest::prelude::*;
use unr::simnet::{parse_script, sim_run, SimConfig, SimError, TraceKind};

fn stream(iters: u32, frags: u64, bytes: u64) -> String {
    format!(
        "rank 0 node 0\nrank 1 node 1\nsignal 1 inbox 1\nsignal 0 ack 1\n\
         program 0\n  loop {iters}\n    put 1 {bytes} recv=inbox frags={frags} nics=0,1\n    wait ack\n    reset ack\n  end\nend\n\
         program 1\n  loop {iters}\n    wait inbox\n    reset inbox\n    mark got\n    put 0 0 recv=ack\n  end\nend\n"
    )
}

#[test]
fn striping_over_two_nics_halves_transmission() {
    let cfg = SimConfig::uniform(2, 1.0, 1e-3);
    let one = sim_run(&cfg, &parse_script(&stream(10, 1, 1 << 20)).unwrap()).unwrap();
    let two = sim_run(&cfg, &parse_script(&stream(10, 2, 1 << 20)).unwrap()).unwrap();
    assert_eq!(one.mark_times("got").len(), 10);
    assert_eq!(two.frames, 10 * 2 + 10);
    // per iteration: transmit, latency, then the ack's latency
    let per = |tx: f64| 10.0 * (tx + 2.0);
    assert!((one.end_time - per(1048.576)).abs() < 1e-6, "{}", one.end_time);
    assert!((two.end_time - per(524.288)).abs() < 1e-6, "{}", two.end_time);
    assert_eq!(one.early_arrivals + two.early_arrivals, 0);
}

#[test]
fn unmatched_wait_is_a_deadlock() {
    let w = parse_script("rank 0 node 0\nsignal 0 s 1\nprogram 0\n  wait s\nend\n").unwrap();
    match sim_run(&SimConfig::uniform(1, 1.0, 0.0), &w) {
        Err(SimError::Deadlock { blocked, .. }) => assert_eq!(blocked.len(), 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn script_errors_carry_line_numbers() {
    match parse_script("rank 0 node 0\nprogram 0\n  fly 3\nend\n") {
        Err(SimError::Script { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reordered_fragments_trigger_once_per_message(seed: u64, frags in 1u64..8, iters in 1u32..20) {
        let mut cfg = SimConfig::uniform(2, 1.0, 1e-4);
        cfg.reorder = true;
        cfg.jitter = 5.0;
        cfg.seed = seed;
        let w = parse_script(&stream(iters, frags, 64 << 10)).unwrap();
        let t = sim_run(&cfg, &w).unwrap();
        let inbox = w.signal_id(1, "inbox").unwrap();
        prop_assert_eq!(t.trigger_times(1, inbox).len(), iters as usize);
        prop_assert_eq!(t.of_kind(TraceKind::Deliver).count() as u64, t.frames);
        prop_assert_eq!(t.early_arrivals, 0);
        prop_assert_eq!(t.overflows, 0);
    }
}
