use anyhow::{anyhow, Result};
use relaystore::cluster::BackendRegistry;
use relaystore::node::{ClientReply, ClientRequest};
use relaystore::{ClusterConfig, NodeId, ObjectId};

use super::{xfer, KB, MB};
use crate::runs::{self, random_bytes};
use crate::{Ctx, Outcome, Row, Scenario};

const TCP_TIMEOUT_S: f64 = 60.0;

/// Puts one object on the last node and gets it on nodes `1..` (just node 1
/// when `only_one`) over whatever backend the config names. Latency is the
/// backend's clock: simulated or wall time.
fn over_backend(cfg: &ClusterConfig, bytes: u64, seed: u64, only_one: bool) -> Result<(f64, usize, usize)> {
    let n = cfg.num_nodes() as u32;
    if n < 2 {
        return Err(anyhow!("configuration error: need at least two nodes"));
    }
    let mut c = BackendRegistry::builtin().open(cfg.clone())?;
    let id = ObjectId::from_name("smoke");
    let data = random_bytes(bytes, seed);
    let put = c.submit(NodeId(0), ClientRequest::Put { id, payload: data.clone() });
    if !c.wait(&[put], TCP_TIMEOUT_S) {
        return Err(anyhow!("put did not finish"));
    }
    let start = c.now();
    let readers = if only_one { 1..2 } else { 1..n };
    let gets: Vec<_> = readers.map(|k| c.submit(NodeId(k), ClientRequest::Get { id, read_only: true })).collect();
    let done = c.wait(&gets, TCP_TIMEOUT_S);
    let latency = c.now() - start;
    let exact = gets
        .iter()
        .filter(|g| matches!(c.reply(**g), Some(ClientReply::Object(o)) if o.as_slice() == &data[..]))
        .count();
    Ok((if done { latency } else { f64::NAN }, exact, gets.len()))
}

fn smoke(ctx: &Ctx, scenario: &str, only_one: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let bytes = 8 * MB;
    let (latency, exact, total) = over_backend(&ctx.cfg, bytes, ctx.seed, only_one)?;
    let mut row = Row::new(format!("{scenario}/{}", ctx.cfg.backend), ctx.cfg.num_nodes() as u32, bytes);
    row.completed = !latency.is_nan();
    row.latency_s = latency;
    out.rows.push(row);
    out.check("bit-exact", exact == total, format!("{exact} of {total} receivers got the payload"));
    Ok(out)
}

/// Remote get of one object across sizes. Below the small-object threshold
/// the directory returns the bytes itself.
pub struct Rtt;

impl Scenario for Rtt {
    fn name(&self) -> &'static str {
        "rtt"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        if ctx.cfg.backend != "sim" {
            return smoke(ctx, "rtt", true);
        }
        let cfg = &ctx.cfg;
        let mut out = Outcome::default();
        for (trial, bytes) in (0..).zip([KB, 64 * KB, MB, 8 * MB]) {
            let r = runs::remote_get(cfg, bytes, ctx.seed + u64::from(trial));
            let mut row = Row::new("rtt", 3, bytes);
            row.trial = trial;
            row.latency_s = r.latency_s;
            row.completed = r.exact;
            row.bytes_on_wire = Some(r.bytes_on_wire);
            out.rows.push(row);
            out.check("bit-exact", r.exact, format!("{bytes} B"));
            if cfg.is_small(bytes) {
                let bound = 2.0 * cfg.network.latency_s;
                out.check(
                    "small-object-latency",
                    r.latency_s <= bound + 1e-9,
                    format!("{bytes} B get took {:.6} s, bound {bound:.6} s", r.latency_s),
                );
                out.check(
                    "small-object-no-transfer",
                    r.store_transfer_frames == 0,
                    format!("{} store-to-store frames", r.store_transfer_frames),
                );
            }
        }
        Ok(out)
    }
}

/// One creator, every other node gets the object at once. Also runs the
/// naive star where every receiver pulls from the creator.
pub struct Broadcast;

impl Scenario for Broadcast {
    fn name(&self) -> &'static str {
        "broadcast"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        if ctx.cfg.backend != "sim" {
            return smoke(ctx, "broadcast", false);
        }
        let cfg = &ctx.cfg;
        let n = cfg.num_nodes() as u32;
        let bytes = 64 * MB;
        let receivers = f64::from(n - 1);
        let mut out = Outcome::default();

        let fast = runs::broadcast(cfg, n, bytes, 0.0, None, ctx.seed);
        let mut star_cfg = cfg.clone();
        star_cfg.sender_policy = "creator_only".into();
        let star = runs::broadcast(&star_cfg, n, bytes, 0.0, None, ctx.seed);
        for (label, r) in [("broadcast", &fast), ("broadcast/creator_only", &star)] {
            let mut row = Row::new(label, n, bytes);
            row.completed = r.completed;
            row.latency_s = r.latency_s;
            row.bytes_on_wire = Some(r.bytes_on_wire);
            out.rows.push(row);
            out.check("bit-exact", r.completed && r.exact == r.survivors, format!("{label}: {} of {}", r.exact, r.survivors));
        }
        let block = cfg.block_size.min(bytes);
        let bound = 2.0 * xfer(cfg, bytes) + receivers * (cfg.network.latency_s + xfer(cfg, block));
        out.check(
            "amplification-bound",
            fast.latency_s <= bound,
            format!("last receiver after {:.4} s, bound {bound:.4} s", fast.latency_s),
        );
        out.check(
            "beats-naive-star",
            star.latency_s >= 4.0 * fast.latency_s,
            format!("star {:.4} s vs {:.4} s ({:.1}x)", star.latency_s, fast.latency_s, star.latency_s / fast.latency_s),
        );
        out.replay("broadcast", &fast.trace, true);
        out.replay("broadcast/creator_only", &star.trace, false);
        out.trace = fast.trace;
        Ok(out)
    }
}

/// Every node but one puts an object; the remaining node gets them all.
pub struct Gather;

impl Scenario for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("gather")?;
        let cfg = &ctx.cfg;
        let bytes = 8 * MB;
        let mut out = Outcome::default();
        for (trial, n) in (0..).zip([4u32, 8, 16]) {
            let r = runs::gather(cfg, n, bytes, ctx.seed + u64::from(trial));
            let mut row = Row::new("gather", n, bytes);
            row.trial = trial;
            row.completed = r.completed;
            row.latency_s = r.latency_s;
            row.bytes_on_wire = Some(r.bytes_on_wire);
            out.rows.push(row);
            out.check("bit-exact", r.completed && r.exact, format!("n={n}"));
            // The receiver's ingress carries every object once.
            let floor = f64::from(n - 1) * xfer(cfg, bytes);
            let ceiling = 1.2 * floor + f64::from(n) * cfg.network.latency_s;
            out.check(
                "ingress-bound",
                (floor..=ceiling).contains(&r.latency_s),
                format!("n={n}: {:.4} s, expected {floor:.4}..{ceiling:.4}", r.latency_s),
            );
            out.replay(&format!("gather n={n}"), &r.trace, true);
            if trial == 0 {
                out.trace = r.trace;
            }
        }
        Ok(out)
    }
}
