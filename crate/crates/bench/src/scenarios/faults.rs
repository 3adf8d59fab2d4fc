use anyhow::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use relaystore::reduce::DType;
use relaystore::trace::TraceEvent;
use relaystore::NodeId;

use super::MB;
use crate::runs::{self, fold_oracle, matches_oracle, ReduceSetup};
use crate::{Ctx, Outcome, Row, Scenario};

/// Broadcast to every node while one random receiver dies at a random
/// block boundary.
pub struct FaultBroadcast;

impl Scenario for FaultBroadcast {
    fn name(&self) -> &'static str {
        "fault_broadcast"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("fault_broadcast")?;
        let cfg = &ctx.cfg;
        let n = cfg.num_nodes() as u32;
        let bytes = 16 * MB;
        let block = cfg.block_size.min(bytes);
        let blocks = bytes.div_ceil(block);
        let mut out = Outcome::default();

        let baseline = runs::broadcast(cfg, n, bytes, 0.0, None, ctx.seed);
        let mut row = Row::new("fault_broadcast/failure_free", n, bytes);
        row.latency_s = baseline.latency_s;
        row.completed = baseline.completed;
        row.bytes_on_wire = Some(baseline.bytes_on_wire);
        out.rows.push(row);

        for trial in 0..ctx.trials_or(200) {
            let seed = ctx.seed.wrapping_add(u64::from(trial) + 1);
            let mut rng = runs::rng(seed);
            let victim = NodeId(rng.gen_range(1..n));
            let watermark = rng.gen_range(1..blocks) * block;
            let r = runs::broadcast(cfg, n, bytes, 0.0, Some((victim, watermark)), seed);
            let mut row = Row::new("fault_broadcast", n, bytes);
            row.trial = trial;
            row.completed = r.completed;
            row.latency_s = r.latency_s;
            row.bytes_on_wire = Some(r.bytes_on_wire);
            out.rows.push(row);
            let what = format!("trial {trial}: kill {victim} at {watermark} B");
            out.check("victim-killed", r.survivors as u32 == n - 2, what.clone());
            out.check("survivors-bit-exact", r.completed && r.exact == r.survivors, what.clone());
            out.check(
                "rereceive-at-most-one-block",
                r.max_rereceived <= block,
                format!("{what}: a survivor re-received {} B", r.max_rereceived),
            );
            out.check(
                "within-2x-failure-free",
                r.latency_s <= 2.0 * baseline.latency_s,
                format!("{what}: {:.4} s vs failure-free {:.4} s", r.latency_s, baseline.latency_s),
            );
            out.replay(&what, &r.trace, true);
            if trial == 0 {
                out.trace = r.trace;
            }
        }
        Ok(out)
    }
}

/// n-of-m reduce while up to four source hosts die at random times.
pub struct FaultReduce;

pub const FAULT_REDUCE_M: u32 = 10;
pub const FAULT_REDUCE_N: u32 = 6;

impl Scenario for FaultReduce {
    fn name(&self) -> &'static str {
        "fault_reduce"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("fault_reduce")?;
        let (m, n) = (FAULT_REDUCE_M, FAULT_REDUCE_N);
        let bytes = 2 * MB;
        let mut out = Outcome::default();
        let mut with_repairs = false;
        for trial in 0..ctx.trials_or(60) {
            let seed = ctx.seed.wrapping_add(u64::from(trial));
            let mut rng = runs::rng(seed);
            let dtype = if trial % 2 == 0 { DType::I64 } else { DType::F32 };
            let degree = *[None, Some(1), Some(2), Some(n)].choose(&mut rng).unwrap();
            // Node 0 hosts the directory and the coordinator.
            let hosts: Vec<u32> = (1..m).collect();
            let count = rng.gen_range(0..=4);
            let victims: Vec<u32> = hosts.choose_multiple(&mut rng, count).copied().collect();
            let kills: Vec<(f64, NodeId)> = victims.into_iter().map(|h| (rng.gen_range(0.0..0.02), NodeId(h))).collect();
            let setup = ReduceSetup {
                n,
                m,
                bytes,
                dtype,
                degree,
                arrivals: (0..m).map(|_| rng.gen_range(0.0..0.01)).collect(),
                kills,
                read_back: true,
            };
            let r = runs::reduce(&ctx.cfg, &setup, seed);
            let mut row = Row::new("fault_reduce", m, bytes);
            row.trial = trial;
            row.d = Some(r.d);
            row.completed = r.completed;
            row.latency_s = r.latency_s;
            row.bytes_on_wire = Some(r.bytes_on_wire);
            row.predicted_t_d = Some(r.predicted_s);
            out.rows.push(row);
            let what = format!("trial {trial} ({dtype:?}, d={}, {} kills)", r.d, r.kills_applied);
            out.check("completed", r.completed, what.clone());
            out.check("n-included", r.included.len() == n as usize, format!("{what}: {} included", r.included.len()));
            let verdict = match &r.output {
                None => Err("target unreadable".to_string()),
                Some(_) if r.included.len() != n as usize => Err("wrong inclusion count".to_string()),
                Some(got) => {
                    let expected = fold_oracle(dtype, &r.included, &r.inputs);
                    if matches_oracle(dtype, got, &expected) {
                        Ok(())
                    } else {
                        Err(format!("differs from the fold ({} vs {} bytes)", got.len(), expected.len()))
                    }
                }
            };
            out.check("oracle", verdict.is_ok(), format!("{what}: {}", verdict.err().unwrap_or_else(|| "matches".into())));
            out.replay(&what, &r.trace, true);
            let repaired = r.trace.iter().any(|t| matches!(t.event, TraceEvent::Invalidate { .. }));
            if trial == 0 || (repaired && !with_repairs) {
                out.trace = r.trace;
                with_repairs |= repaired;
            }
        }
        Ok(out)
    }
}
