//! Single experiments on the simulator. Each returns what was measured plus
//! the raw material the caller needs to check it.

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relaystore::node::{ClientReply, ClientRequest, Ticket};
use relaystore::reduce::{encode, DType, LatencyModel, ReduceOp, ReduceOpSpec};
use relaystore::sim::{ns_to_secs, Sim};
use relaystore::trace::TraceRecord;
use relaystore::{ClusterConfig, NodeId, ObjectId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_bytes(len: u64, seed: u64) -> Bytes {
    let mut buf = vec![0u8; len as usize];
    rng(seed).fill_bytes(&mut buf);
    Bytes::from(buf)
}

/// Random reduce input. Integers stay far from overflow; floats stay in
/// [1, 2) so sums never cancel.
pub fn random_values(dtype: DType, elements: u64, seed: u64) -> Bytes {
    let mut r = rng(seed);
    let data = match dtype {
        DType::I64 => encode::i64s(&(0..elements).map(|_| r.gen_range(-(1i64 << 40)..(1i64 << 40))).collect::<Vec<_>>()),
        DType::F32 => encode::f32s(&(0..elements).map(|_| r.gen_range(1.0f32..2.0)).collect::<Vec<_>>()),
        other => panic!("no generator for {other:?}"),
    };
    Bytes::from(data)
}

pub fn object_of(sim: &Sim, t: Ticket) -> Option<&[u8]> {
    match sim.reply(t) {
        Some((_, ClientReply::Object(o))) => Some(o.as_slice()),
        _ => None,
    }
}

fn replied_at(sim: &Sim, t: Ticket) -> Option<f64> {
    sim.reply(t).map(|(at, _)| ns_to_secs(*at))
}

fn get(id: ObjectId) -> ClientRequest {
    ClientRequest::Get { id, read_only: true }
}

#[derive(Clone, Debug)]
pub struct BroadcastRun {
    pub completed: bool,
    /// From the last receiver's arrival to the last completion.
    pub latency_s: f64,
    pub bytes_on_wire: u64,
    /// Live receivers that ended with the exact payload.
    pub exact: usize,
    pub survivors: usize,
    /// Most CHUNK payload bytes any survivor received beyond one copy.
    pub max_rereceived: u64,
    pub trace: Vec<TraceRecord>,
}

/// Node 0 puts `bytes`; nodes `1..n` call `get`, the k-th one
/// `(k - 1) * interval` after the put finishes. `kill` names a receiver to
/// kill once it holds the given number of bytes.
pub fn broadcast(
    cfg: &ClusterConfig,
    n: u32,
    bytes: u64,
    interval: f64,
    kill: Option<(NodeId, u64)>,
    seed: u64,
) -> BroadcastRun {
    let mut sim = Sim::new(cfg.with_node_count(n)).expect("valid config");
    let id = ObjectId::from_name("broadcast");
    let data = random_bytes(bytes, seed);
    let put = sim.submit(NodeId(0), ClientRequest::Put { id, payload: data.clone() });
    sim.run_until_replied(&[put]);
    let start = sim.now();
    if let Some((victim, watermark)) = kill {
        sim.kill_when(victim, id, watermark);
    }
    let gets: Vec<(NodeId, Ticket)> = (1..n)
        .map(|k| (NodeId(k), sim.submit_at(start + interval * f64::from(k - 1), NodeId(k), get(id))))
        .collect();
    let last_arrival = start + interval * f64::from(n.saturating_sub(2));
    sim.run();
    let mut run = BroadcastRun {
        completed: true,
        latency_s: 0.0,
        bytes_on_wire: sim.stats().bytes_on_wire,
        exact: 0,
        survivors: 0,
        max_rereceived: 0,
        trace: Vec::new(),
    };
    let mut last = last_arrival;
    for (node, t) in gets {
        if !sim.is_alive(node) {
            continue;
        }
        run.survivors += 1;
        match (object_of(&sim, t), replied_at(&sim, t)) {
            (Some(got), Some(at)) => {
                last = last.max(at);
                run.exact += usize::from(got == &data[..]);
            }
            _ => run.completed = false,
        }
        let received = sim.stats().chunk_bytes_received.get(&(node, id)).copied().unwrap_or(0);
        run.max_rereceived = run.max_rereceived.max(received.saturating_sub(bytes));
    }
    run.latency_s = last - last_arrival;
    run.trace = sim.trace().to_vec();
    run
}

#[derive(Clone, Debug)]
pub struct GatherRun {
    pub completed: bool,
    pub latency_s: f64,
    pub bytes_on_wire: u64,
    pub exact: bool,
    pub trace: Vec<TraceRecord>,
}

/// Nodes `1..n` each put one object; node 0 gets all of them at once.
pub fn gather(cfg: &ClusterConfig, n: u32, bytes: u64, seed: u64) -> GatherRun {
    let mut sim = Sim::new(cfg.with_node_count(n)).expect("valid config");
    let objects: Vec<(ObjectId, Bytes)> =
        (1..n).map(|k| (ObjectId::from_name(&format!("gather-{k}")), random_bytes(bytes, seed ^ u64::from(k)))).collect();
    let puts: Vec<Ticket> = objects
        .iter()
        .zip(1..)
        .map(|((id, data), k)| sim.submit(NodeId(k), ClientRequest::Put { id: *id, payload: data.clone() }))
        .collect();
    sim.run_until_replied(&puts);
    let start = sim.now();
    let gets: Vec<Ticket> = objects.iter().map(|(id, _)| sim.submit(NodeId(0), get(*id))).collect();
    let completed = sim.run_until_replied(&gets);
    let exact = objects.iter().zip(&gets).all(|((_, data), t)| object_of(&sim, *t) == Some(&data[..]));
    GatherRun {
        completed,
        latency_s: sim.now() - start,
        bytes_on_wire: sim.stats().bytes_on_wire,
        exact,
        trace: sim.trace().to_vec(),
    }
}

#[derive(Clone, Debug)]
pub struct SmallGetRun {
    pub latency_s: f64,
    pub exact: bool,
    pub bytes_on_wire: u64,
    pub store_transfer_frames: u64,
}

/// Node 1 puts, node 2 gets; the directory lives on node 0.
pub fn remote_get(cfg: &ClusterConfig, bytes: u64, seed: u64) -> SmallGetRun {
    let mut sim = Sim::new(cfg.with_node_count(3)).expect("valid config");
    let id = ObjectId::from_name("rtt");
    let data = random_bytes(bytes, seed);
    let put = sim.submit(NodeId(1), ClientRequest::Put { id, payload: data.clone() });
    sim.run_until_replied(&[put]);
    let start = sim.now();
    let g = sim.submit(NodeId(2), get(id));
    sim.run_until_replied(&[g]);
    SmallGetRun {
        latency_s: replied_at(&sim, g).map_or(f64::INFINITY, |at| at - start),
        exact: object_of(&sim, g) == Some(&data[..]),
        bytes_on_wire: sim.stats().bytes_on_wire,
        store_transfer_frames: sim.stats().store_transfer_frames(),
    }
}

pub fn source_id(k: u32) -> ObjectId {
    ObjectId::from_name(&format!("source-{k}"))
}

#[derive(Clone, Debug)]
pub struct ReduceSetup {
    /// Participants (`n` of the reduce). Source `k` lives on node `k`.
    pub n: u32,
    pub m: u32,
    pub bytes: u64,
    pub dtype: DType,
    pub degree: Option<u32>,
    /// Source `k` becomes ready at `arrivals[k]`; all at 0 when empty.
    pub arrivals: Vec<f64>,
    /// Nodes killed at given simulated times, unless the reduce has
    /// already finished by then.
    pub kills: Vec<(f64, NodeId)>,
    /// Read the target back after completion.
    pub read_back: bool,
}

impl ReduceSetup {
    pub fn simultaneous(n: u32, bytes: u64, degree: Option<u32>) -> Self {
        Self {
            n,
            m: n,
            bytes,
            dtype: DType::I64,
            degree,
            arrivals: Vec::new(),
            kills: Vec::new(),
            read_back: false,
        }
    }

    pub fn staggered(n: u32, bytes: u64, interval: f64) -> Self {
        Self { arrivals: (0..n).map(|k| interval * f64::from(k)).collect(), ..Self::simultaneous(n, bytes, None) }
    }

    fn arrival(&self, k: u32) -> f64 {
        self.arrivals.get(k as usize).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct ReduceRun {
    pub completed: bool,
    pub d: u32,
    /// From the `n`-th source arrival to the coordinator's reply.
    pub latency_s: f64,
    pub predicted_s: f64,
    pub bytes_on_wire: u64,
    pub kills_applied: usize,
    pub included: Vec<ObjectId>,
    pub inputs: Vec<(ObjectId, Bytes)>,
    /// The target as read back, when requested and still reachable.
    pub output: Option<Vec<u8>>,
    pub trace: Vec<TraceRecord>,
}

/// Sum-reduces sources into a target; the request comes from node 0.
pub fn reduce(cfg: &ClusterConfig, setup: &ReduceSetup, seed: u64) -> ReduceRun {
    let nodes = setup.m.max(setup.n);
    let mut sim = Sim::new(cfg.with_node_count(nodes)).expect("valid config");
    let elements = (setup.bytes / setup.dtype.width() as u64).max(1);
    let inputs: Vec<(ObjectId, Bytes)> = (0..setup.m)
        .map(|k| (source_id(k), random_values(setup.dtype, elements, seed ^ (u64::from(k) << 32))))
        .collect();
    for (k, (id, payload)) in (0..).zip(&inputs) {
        sim.submit_at(setup.arrival(k), NodeId(k), ClientRequest::Put { id: *id, payload: payload.clone() });
    }
    let target = ObjectId::from_name("reduce-target");
    let op = ReduceOpSpec::new(ReduceOp::Sum, setup.dtype, elements);
    let sources = inputs.iter().map(|(id, _)| *id).collect();
    let t = sim.submit(NodeId(0), ClientRequest::Reduce { target, sources, n: setup.n, op, degree: setup.degree });
    let mut kills = setup.kills.clone();
    kills.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kills_applied = 0;
    for (at, node) in kills {
        if sim.run_until_replied_by(&[t], at) {
            break;
        }
        sim.kill_at(at, node);
        kills_applied += 1;
    }
    let completed = sim.run_until_replied(&[t]);
    let mut arrivals: Vec<f64> = (0..setup.m).map(|k| setup.arrival(k)).collect();
    arrivals.sort_by(f64::total_cmp);
    let nth_arrival = arrivals[(setup.n as usize).min(arrivals.len()) - 1];
    let mut run = ReduceRun {
        completed: false,
        d: setup.degree.unwrap_or(0),
        latency_s: f64::NAN,
        predicted_s: f64::NAN,
        bytes_on_wire: 0,
        kills_applied,
        included: Vec::new(),
        inputs,
        output: None,
        trace: Vec::new(),
    };
    if let (true, Some((at, ClientReply::Reduced { included, d, .. }))) = (completed, sim.reply(t)) {
        run.completed = true;
        run.d = *d;
        run.latency_s = ns_to_secs(*at) - nth_arrival;
        run.included = included.clone();
    }
    run.bytes_on_wire = sim.stats().bytes_on_wire;
    run.predicted_s = LatencyModel::new(cfg.network, setup.bytes, setup.n).predict(run.d.max(1));
    if run.completed && setup.read_back {
        if let Some(reader) = (0..nodes).map(NodeId).find(|n| sim.is_alive(*n)) {
            let g = sim.submit(reader, get(target));
            if sim.run_until_replied(&[g]) {
                run.output = object_of(&sim, g).map(<[u8]>::to_vec);
            }
        }
    }
    run.trace = sim.trace().to_vec();
    run
}

/// Folds the included inputs in the order given.
pub fn fold_oracle(dtype: DType, included: &[ObjectId], inputs: &[(ObjectId, Bytes)]) -> Vec<u8> {
    let mut chosen = included.iter().map(|id| &inputs.iter().find(|(i, _)| i == id).expect("known source").1);
    let first = chosen.next().expect("at least one source");
    match dtype {
        DType::I64 => {
            let mut acc = encode::to_i64s(first);
            for b in chosen {
                acc.iter_mut().zip(encode::to_i64s(b)).for_each(|(a, x)| *a += x);
            }
            encode::i64s(&acc)
        }
        DType::F32 => {
            let mut acc = encode::to_f32s(first);
            for b in chosen {
                acc.iter_mut().zip(encode::to_f32s(b)).for_each(|(a, x)| *a += x);
            }
            encode::f32s(&acc)
        }
        other => panic!("no oracle for {other:?}"),
    }
}

/// Bit-exact for integers, within `1e-6` relative error for floats.
pub fn matches_oracle(dtype: DType, got: &[u8], expected: &[u8]) -> bool {
    match dtype {
        DType::F32 => {
            let (g, e) = (encode::to_f32s(got), encode::to_f32s(expected));
            g.len() == e.len() && g.iter().zip(&e).all(|(a, b)| ((a - b) / b).abs() <= 1e-6)
        }
        _ => got == expected,
    }
}

#[derive(Clone, Debug)]
pub struct AllreduceRun {
    pub completed: bool,
    pub d: u32,
    pub latency_s: f64,
    pub bytes_on_wire: u64,
    pub exact: bool,
    pub trace: Vec<TraceRecord>,
}

/// Reduce over nodes `0..n`, then every node gets the result.
pub fn allreduce(cfg: &ClusterConfig, n: u32, bytes: u64, seed: u64) -> AllreduceRun {
    let mut sim = Sim::new(cfg.with_node_count(n)).expect("valid config");
    let elements = (bytes / 8).max(1);
    let inputs: Vec<(ObjectId, Bytes)> =
        (0..n).map(|k| (source_id(k), random_values(DType::I64, elements, seed ^ (u64::from(k) << 32)))).collect();
    for (k, (id, payload)) in (0..).zip(&inputs) {
        sim.submit(NodeId(k), ClientRequest::Put { id: *id, payload: payload.clone() });
    }
    let target = ObjectId::from_name("allreduce-target");
    let op = ReduceOpSpec::new(ReduceOp::Sum, DType::I64, elements);
    let sources = inputs.iter().map(|(id, _)| *id).collect();
    let r = sim.submit(NodeId(0), ClientRequest::Reduce { target, sources, n, op, degree: None });
    let gets: Vec<Ticket> = (0..n).map(|k| sim.submit(NodeId(k), get(target))).collect();
    let mut all = gets.clone();
    all.push(r);
    let completed = sim.run_until_replied(&all);
    let (d, included) = match sim.reply(r) {
        Some((_, ClientReply::Reduced { d, included, .. })) => (*d, included.clone()),
        _ => (0, Vec::new()),
    };
    let expected = (!included.is_empty()).then(|| fold_oracle(DType::I64, &included, &inputs));
    let exact = expected.is_some_and(|e| gets.iter().all(|g| object_of(&sim, *g) == Some(&e[..])));
    AllreduceRun {
        completed,
        d,
        latency_s: sim.now(),
        bytes_on_wire: sim.stats().bytes_on_wire,
        exact,
        trace: sim.trace().to_vec(),
    }
}

/// One fetch in a chaos schedule.
#[derive(Clone, Copy, Debug)]
struct Fetch {
    node: NodeId,
    object: usize,
    at: f64,
}

#[derive(Clone, Debug)]
struct Schedule {
    n: u32,
    objects: Vec<(NodeId, Bytes)>,
    fetches: Vec<Fetch>,
    /// (victim, kill time, rejoin time)
    faults: Vec<(NodeId, f64, Option<f64>)>,
}

impl Schedule {
    /// Two objects from different creators, most other nodes fetching each
    /// at random times, and up to two victims that may come back and fetch
    /// again. Creators and the directory host are never killed.
    fn generate(seed: u64, detection: f64) -> Self {
        let mut r = rng(seed);
        let n = r.gen_range(4..=10u32);
        let mut others: Vec<u32> = (1..n).collect();
        others.shuffle(&mut r);
        let creators = [NodeId(others[0]), NodeId(others[1])];
        let objects: Vec<(NodeId, Bytes)> = creators
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, random_bytes(r.gen_range(1..=4u64) * 1_000_000, seed ^ (i as u64 + 1))))
            .collect();
        let mut fetches = Vec::new();
        for node in 0..n {
            for (object, (creator, _)) in objects.iter().enumerate() {
                if NodeId(node) != *creator && r.gen_bool(0.8) {
                    fetches.push(Fetch { node: NodeId(node), object, at: r.gen_range(0.0..0.02) });
                }
            }
        }
        let mut faults = Vec::new();
        let candidates = &others[2..];
        let count = r.gen_range(0..=2usize.min(candidates.len()));
        let victims: Vec<u32> = candidates.choose_multiple(&mut r, count).copied().collect();
        for victim in victims {
            let killed = r.gen_range(0.0..0.03);
            let rejoin = r.gen_bool(0.5).then(|| killed + detection + r.gen_range(0.0..0.03));
            if let Some(at) = rejoin {
                for object in 0..objects.len() {
                    fetches.push(Fetch { node: NodeId(victim), object, at });
                }
            }
            faults.push((NodeId(victim), killed, rejoin));
        }
        Self { n, objects, fetches, faults }
    }
}

#[derive(Clone, Debug)]
pub struct ChaosRun {
    pub n: u32,
    pub faults: usize,
    /// Longest fetch in the failure-free run of the same arrivals.
    pub failure_free_s: f64,
    /// Longest fetch by a node that stayed up, in the faulty run.
    pub worst_s: f64,
    /// Fetches by nodes that stayed up that never finished or got wrong bytes.
    pub stuck: usize,
    pub trace: Vec<TraceRecord>,
}

fn run_schedule(cfg: &ClusterConfig, s: &Schedule, faults: bool) -> (Sim, Vec<(Fetch, Ticket)>) {
    let mut sim = Sim::new(cfg.with_node_count(s.n)).expect("valid config");
    let ids: Vec<ObjectId> = (0..s.objects.len()).map(|i| ObjectId::from_name(&format!("chaos-{i}"))).collect();
    for ((creator, data), id) in s.objects.iter().zip(&ids) {
        sim.submit(*creator, ClientRequest::Put { id: *id, payload: data.clone() });
    }
    if faults {
        for (victim, killed, rejoin) in &s.faults {
            sim.kill_at(*killed, *victim);
            if let Some(at) = rejoin {
                sim.revive_at(*at, *victim);
            }
        }
    }
    let tickets = s
        .fetches
        .iter()
        .filter(|f| faults || !s.faults.iter().any(|(v, k, _)| *v == f.node && f.at > *k))
        .map(|f| (*f, sim.submit_at(f.at, f.node, get(ids[f.object]))))
        .collect();
    sim.run();
    (sim, tickets)
}

/// A random schedule of arrivals, failures and rejoins, checked against the
/// same arrivals without failures.
pub fn chaos(cfg: &ClusterConfig, seed: u64) -> ChaosRun {
    let s = Schedule::generate(seed, cfg.detection_interval_s);
    let (clean, clean_tickets) = run_schedule(cfg, &s, false);
    let failure_free_s = clean_tickets
        .iter()
        .map(|(f, t)| replied_at(&clean, *t).map_or(f64::INFINITY, |at| at - f.at))
        .fold(0.0, f64::max);
    let (sim, tickets) = run_schedule(cfg, &s, true);
    let mut run = ChaosRun { n: s.n, faults: s.faults.len(), failure_free_s, worst_s: 0.0, stuck: 0, trace: Vec::new() };
    for (f, t) in tickets {
        // A victim's fetches before its failure die with it.
        let interrupted =
            s.faults.iter().any(|(v, _, rejoin)| *v == f.node && !rejoin.is_some_and(|r| f.at >= r));
        if interrupted {
            continue;
        }
        match (object_of(&sim, t), replied_at(&sim, t)) {
            (Some(got), Some(at)) if got == &s.objects[f.object].1[..] => run.worst_s = run.worst_s.max(at - f.at),
            _ => run.stuck += 1,
        }
    }
    run.trace = sim.trace().to_vec();
    run
}
