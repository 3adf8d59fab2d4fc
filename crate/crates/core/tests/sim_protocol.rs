use bytes::Bytes;
use relaystore::node::{ClientReply, ClientRequest, Ticket};
use relaystore::reduce::{encode, DType, ReduceOp, ReduceOpSpec};
use relaystore::replay;
use relaystore::sim::Sim;
use relaystore::trace::TraceEvent;
use relaystore::{ClusterConfig, Error, NetworkProfile, NodeId, ObjectId};

fn cluster(n: u32, block: u64) -> ClusterConfig {
    let mut c = ClusterConfig::default().with_node_count(n);
    c.network = NetworkProfile::new(0.001, 1e9).unwrap();
    c.block_size = block;
    c.detection_interval_s = 0.01;
    c
}

fn payload(len: usize, salt: u8) -> Bytes {
    Bytes::from((0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect::<Vec<_>>())
}

fn assert_invariants(sim: &Sim) {
    let r = replay::check(sim.trace(), true);
    assert!(r.is_clean(), "{:#?}", r.violations);
}

fn object(sim: &Sim, t: Ticket) -> Vec<u8> {
    match &sim.reply(t).expect("replied").1 {
        ClientReply::Object(o) => o.as_slice().to_vec(),
        other => panic!("expected object, got {other:?}"),
    }
}

#[test]
fn receivers_pull_from_partial_copies() {
    let mut sim = Sim::new(cluster(3, 1_000_000)).unwrap();
    let id = ObjectId::from_name("fig4");
    let data = payload(4_000_000, 1);
    let put = sim.submit(NodeId(0), ClientRequest::Put { id, payload: data.clone() });
    let g1 = sim.submit_at(0.01, NodeId(1), ClientRequest::Get { id, read_only: true });
    let g2 = sim.submit_at(0.0105, NodeId(2), ClientRequest::Get { id, read_only: true });
    assert!(sim.run_until_replied(&[put, g1, g2]));
    assert_eq!(object(&sim, g1), data);
    assert_eq!(object(&sim, g2), data);
    let grants: Vec<(NodeId, NodeId)> = sim
        .trace()
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Grant { sender, receiver, .. } => Some((*sender, *receiver)),
            _ => None,
        })
        .collect();
    assert_invariants(&sim);
    assert_eq!(grants, vec![(NodeId(0), NodeId(1)), (NodeId(1), NodeId(2))]);
}

#[test]
fn broadcast_reaches_every_node() {
    let mut sim = Sim::new(cluster(8, 250_000)).unwrap();
    let id = ObjectId::from_name("bcast");
    let data = payload(2_000_000, 7);
    let put = sim.submit(NodeId(0), ClientRequest::Put { id, payload: data.clone() });
    sim.run_until_replied(&[put]);
    let gets: Vec<Ticket> =
        (1..8).map(|n| sim.submit(NodeId(n), ClientRequest::Get { id, read_only: true })).collect();
    assert!(sim.run_until_replied(&gets));
    for g in gets {
        assert_eq!(object(&sim, g), data);
    }
}

#[test]
fn broadcast_survives_a_sender_failure() {
    let mut sim = Sim::new(cluster(6, 250_000)).unwrap();
    let id = ObjectId::from_name("fault");
    let data = payload(2_000_000, 3);
    let put = sim.submit(NodeId(0), ClientRequest::Put { id, payload: data.clone() });
    sim.run_until_replied(&[put]);
    sim.kill_when(NodeId(3), id, 750_000);
    let gets: Vec<(u32, Ticket)> =
        (1..6).map(|n| (n, sim.submit(NodeId(n), ClientRequest::Get { id, read_only: true }))).collect();
    sim.run();
    assert!(!sim.is_alive(NodeId(3)));
    for (n, g) in gets {
    assert_invariants(&sim);
        if n != 3 {
            assert_eq!(object(&sim, g), data, "node {n}");
        }
    }
}

#[test]
fn delete_aborts_in_flight_gets() {
    let mut sim = Sim::new(cluster(3, 100_000)).unwrap();
    let id = ObjectId::from_name("doomed");
    let put = sim.submit(NodeId(1), ClientRequest::Put { id, payload: payload(5_000_000, 0) });
    sim.run_until_replied(&[put]);
    let get = sim.submit(NodeId(2), ClientRequest::Get { id, read_only: true });
    let del = sim.submit_at(sim.now() + 0.002, NodeId(1), ClientRequest::Delete { id });
    sim.run();
    assert!(matches!(sim.reply(del).unwrap().1, ClientReply::Done));
    assert!(matches!(sim.reply(get).unwrap().1, ClientReply::Failed(Error::Deleted(_))));
    let late = sim.submit(NodeId(0), ClientRequest::Get { id, read_only: true });
    sim.run();
    assert!(matches!(sim.reply(late).unwrap().1, ClientReply::Failed(Error::Deleted(_))));
}

#[test]
fn small_objects_skip_the_transfer_protocol() {
    let mut sim = Sim::new(cluster(4, 1_000_000)).unwrap();
    let id = ObjectId::from_name("tiny");
    let put = sim.submit(NodeId(2), ClientRequest::Put { id, payload: payload(1000, 9) });
    sim.run_until_replied(&[put]);
    let gets: Vec<Ticket> =
        [0, 1, 3].iter().map(|n| sim.submit(NodeId(*n), ClientRequest::Get { id, read_only: true })).collect();
    sim.run();
    for g in gets {
        assert_eq!(object(&sim, g), payload(1000, 9));
    }
    assert_eq!(sim.stats().store_transfer_frames(), 0);
}

fn i32_reduce(sim: &mut Sim, sources: &[(u32, Vec<i32>)], n: u32, d: u32) -> (ObjectId, Ticket) {
    let len = sources[0].1.len() as u64;
    let mut ids = Vec::new();
    for (k, (node, vals)) in sources.iter().enumerate() {
        let id = ObjectId::from_name(&format!("src{k}"));
        ids.push(id);
        sim.submit(NodeId(*node), ClientRequest::Put { id, payload: Bytes::from(encode::i32s(vals)) });
    }
    let target = ObjectId::from_name("sum");
    let op = ReduceOpSpec::new(ReduceOp::Sum, DType::I32, len);
    let t = sim.submit(NodeId(0), ClientRequest::Reduce { target, sources: ids, n, op, degree: Some(d) });
    (target, t)
}

#[test]
fn reduce_sums_elementwise() {
    for d in [1, 2, 4] {
        let mut sim = Sim::new(cluster(4, 1_000_000)).unwrap();
        let srcs = vec![
            (0, vec![1, 2, 3]),
            (1, vec![10, 20, 30]),
            (2, vec![100, 200, 300]),
            (3, vec![1000, 2000, 3000]),
        ];
        let (target, t) = i32_reduce(&mut sim, &srcs, 4, d);
        assert!(sim.run_until_replied(&[t]));
        match &sim.reply(t).unwrap().1 {
            ClientReply::Reduced { included, d: got, .. } => {
                assert_eq!(included.len(), 4);
                assert_eq!(*got, d);
            }
            other => panic!("{other:?}"),
        }
        let g = sim.submit(NodeId(3), ClientRequest::Get { id: target, read_only: true });
        sim.run_until_replied(&[g]);
        assert_eq!(encode::to_i32s(&object(&sim, g)), vec![1111, 2222, 3333], "d = {d}");
    }
}

#[test]
fn reduce_repairs_around_a_failed_host() {
    let elements = 400_000u64;
    let mut sim = Sim::new(cluster(6, 200_000)).unwrap();
    let srcs: Vec<(u32, Vec<i32>)> =
        (0..6).map(|k| (k, (0..elements as i32).map(|i| i % 97 + k as i32 * 1000).collect())).collect();
    let (target, t) = i32_reduce(&mut sim, &srcs, 5, 2);
    sim.kill_at(0.003, NodeId(2));
    assert!(sim.run_until_replied(&[t]));
    let included = match &sim.reply(t).unwrap().1 {
        ClientReply::Reduced { included, .. } => included.clone(),
        other => panic!("{other:?}"),
    };
    assert_eq!(included.len(), 5);
    let lost = ObjectId::from_name("src2");
    let g = sim.submit(NodeId(1), ClientRequest::Get { id: target, read_only: true });
    sim.run_until_replied(&[g]);
    let got = encode::to_i32s(&object(&sim, g));
    let expected: Vec<i32> = (0..elements as usize)
        .map(|i| {
            srcs.iter()
                .enumerate()
                .filter(|(k, _)| included.contains(&ObjectId::from_name(&format!("src{k}"))))
                .map(|(_, (_, v))| v[i])
                .sum()
        })
        .collect();
    assert_invariants(&sim);
    assert!(!included.contains(&lost));
    assert!(sim.trace().iter().any(|r| matches!(r.event, TraceEvent::Invalidate { .. })));
    assert_eq!(got, expected);
}

#[test]
fn simulation_is_deterministic() {
    let run = || {
        let mut sim = Sim::new(cluster(5, 250_000)).unwrap();
        let id = ObjectId::from_name("det");
        sim.submit(NodeId(0), ClientRequest::Put { id, payload: payload(1_000_000, 5) });
        for n in 1..5 {
            sim.submit_at(0.001 * f64::from(n), NodeId(n), ClientRequest::Get { id, read_only: true });
        }
        sim.kill_when(NodeId(2), id, 500_000);
        sim.run();
        (sim.trace().to_vec(), sim.stats().clone())
    };
    assert_eq!(run(), run());
}

