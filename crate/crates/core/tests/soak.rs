//! Randomized fault schedules checked against the trace invariants and a
//! byte-level oracle.

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relaystore::node::{ClientReply, ClientRequest};
use relaystore::reduce::{encode, DType, ReduceOp, ReduceOpSpec};
use relaystore::replay;
use relaystore::sim::Sim;
use relaystore::{ClusterConfig, Error, NetworkProfile, NodeId, ObjectId};

fn run_seed(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: u32 = rng.gen_range(3..9);
    let mut cfg = ClusterConfig::default().with_node_count(n);
    cfg.network = NetworkProfile::new(rng.gen_range(0.0001..0.002), 1e9).unwrap();
    cfg.block_size = 50_000;
    cfg.small_object_threshold = 10_000;
    cfg.detection_interval_s = 0.005;
    let exclusive = rng.gen_bool(0.7);
    if !exclusive {
        cfg.sender_policy = "creator_only".into();
    }
    let mut sim = Sim::new(cfg).unwrap();

    // Broadcast of one object from a random creator.
    let creator = NodeId(rng.gen_range(1..n));
    let id = ObjectId::from_name("blob");
    let size = rng.gen_range(1..600_000usize);
    let data = Bytes::from((0..size).map(|_| rng.gen::<u8>()).collect::<Vec<_>>());
    sim.submit(creator, ClientRequest::Put { id, payload: data.clone() });
    let mut gets = Vec::new();
    for k in 1..n {
        if NodeId(k) != creator {
            let t = rng.gen_range(0.0..0.01);
            gets.push((NodeId(k), sim.submit_at(t, NodeId(k), ClientRequest::Get { id, read_only: true })));
        }
    }

    // A reduce over one source per node.
    let elems = rng.gen_range(1..40_000u64);
    let vals: Vec<Vec<i64>> = (0..n).map(|_| (0..elems).map(|_| rng.gen_range(-1000..1000)).collect()).collect();
    let srcs: Vec<ObjectId> = (0..n).map(|k| ObjectId::from_name(&format!("s{k}"))).collect();
    for k in 0..n {
        let at = rng.gen_range(0.0..0.01);
        sim.submit_at(at, NodeId(k), ClientRequest::Put { id: srcs[k as usize], payload: Bytes::from(encode::i64s(&vals[k as usize])) });
    }
    let need = rng.gen_range(2..=n);
    let target = ObjectId::from_name("out");
    let op = ReduceOpSpec::new(ReduceOp::Sum, DType::I64, elems);
    let degree = [None, Some(1), Some(2), Some(need)][rng.gen_range(0..4)];
    let red = sim.submit(NodeId(0), ClientRequest::Reduce { target, sources: srcs.clone(), n: need, op, degree });

    // Node 0 hosts the directory and coordinates; everyone else may die.
    let mut victims = Vec::new();
    for _ in 0..rng.gen_range(0..3) {
        let v = NodeId(rng.gen_range(1..n));
        if v == creator || victims.contains(&v) {
            continue;
        }
        victims.push(v);
        if rng.gen_bool(0.5) {
            sim.kill_at(rng.gen_range(0.0..0.02), v);
        } else {
            sim.kill_when(v, id, rng.gen_range(0..size as u64 + 1));
        }
        if rng.gen_bool(0.3) {
            let at = rng.gen_range(0.02..0.05);
            sim.revive_at(at, v);
            let k = v.0 as usize;
            sim.submit_at(at + 0.02, v, ClientRequest::Put { id: srcs[k], payload: Bytes::from(encode::i64s(&vals[k])) });
        }
    }
    let deleted = rng.gen_bool(0.1);
    if deleted {
        let k = rng.gen_range(0..n) as usize;
        sim.submit_at(rng.gen_range(0.0..0.01), NodeId(0), ClientRequest::Delete { id: srcs[k] });
    }
    sim.run();
    if std::env::var("SOAK_DUMP").is_ok() {
        for r in sim.trace() {
            println!("{} {} {}", r.t, r.node, serde_json::to_string(&r.event).unwrap());
        }
        println!("{:#?}", sim.node(NodeId(0)).unwrap().shard(0).unwrap().view(&id));
        println!("target {:?}", sim.node(NodeId(0)).unwrap().shard(0).unwrap().view(&ObjectId::from_name("out")));
        for k in 0..n {
            if let Some(node) = sim.node(NodeId(k)) {
                println!("n{k} fetches {} info {:?}", node.active_fetches(), node.store().info(&id));
            }
        }
    }

    let report = replay::check(sim.trace(), exclusive);
    assert!(report.is_clean(), "seed {seed}: {:#?}", report.violations);
    for (node, t) in gets {
        match sim.reply(t).map(|r| &r.1) {
            Some(ClientReply::Object(o)) => assert_eq!(o.as_slice(), &data[..], "seed {seed} {node}"),
            Some(ClientReply::Failed(Error::PeerDown(_))) | None if victims.contains(&node) => {}
            other => panic!("seed {seed}: get on {node} ended with {other:?}"),
        }
    }
    match sim.reply(red).map(|r| &r.1) {
        Some(ClientReply::Reduced { included, .. }) => {
            assert_eq!(included.len(), need as usize, "seed {seed}");
            let expected: Vec<i64> = (0..elems as usize)
                .map(|i| included.iter().map(|s| vals[srcs.iter().position(|x| x == s).unwrap()][i]).sum())
                .collect();
            let g = sim.submit(NodeId(0), ClientRequest::Get { id: target, read_only: true });
            sim.run();
            match sim.reply(g).map(|r| &r.1) {
                Some(ClientReply::Object(o)) => {
                    let got = encode::to_i64s(o.as_slice());
                    let bad = got.iter().zip(&expected).position(|(a, b)| a != b);
                    assert!(got.len() == expected.len() && bad.is_none(), "seed {seed}: target differs at element {bad:?}");
                }
                // The only copy lived on a node that was killed afterwards.
                None => {
                    let dir = sim.node(NodeId(0)).unwrap().shard(0).unwrap();
                    assert!(dir.view(&target).unwrap().locations.is_empty(), "seed {seed}: target read stalled");
                }
                other => panic!("seed {seed}: target read ended with {other:?}"),
            }
        }
        // Without revival, killed hosts may leave fewer than `need` sources.
        None => {
            let alive = (0..n).filter(|k| sim.is_alive(NodeId(*k))).count() as u32;
            assert!(alive < need + victims.len() as u32, "seed {seed}: reduce stalled with {alive} live nodes");
        }
        Some(ClientReply::Failed(Error::Unsatisfiable(_))) if deleted => {}
        other => panic!("seed {seed}: reduce ended with {other:?}"),
    }
}

#[test]
fn random_fault_schedules() {
    let seeds: u64 = std::env::var("SOAK_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
    let first: u64 = std::env::var("SOAK_FIRST").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in first..first + seeds {
        run_seed(seed);
    }
}
