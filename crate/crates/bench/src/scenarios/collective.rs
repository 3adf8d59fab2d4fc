use anyhow::Result;
use relaystore::reduce::{candidate_degrees, choose_degree};

use super::{spread, KB, MB};
use crate::runs::{self, ReduceSetup};
use crate::{Ctx, Outcome, Row, Scenario};

fn reduce_row(scenario: &str, n: u32, bytes: u64, interval: f64, r: &runs::ReduceRun) -> Row {
    let mut row = Row::new(scenario, n, bytes);
    row.d = Some(r.d);
    row.arrival_interval_s = interval;
    row.completed = r.completed;
    row.latency_s = r.latency_s;
    row.bytes_on_wire = Some(r.bytes_on_wire);
    row.predicted_t_d = Some(r.predicted_s);
    row
}

/// Simultaneous reduce at each degree in {1, 2, n} and the model's own pick,
/// compared against the latency model.
pub struct Reduce;

impl Scenario for Reduce {
    fn name(&self) -> &'static str {
        "reduce"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("reduce")?;
        let cfg = &ctx.cfg;
        let n = cfg.num_nodes() as u32;
        let bytes = 64 * MB;
        let mut out = Outcome::default();
        let mut degrees: Vec<Option<u32>> = candidate_degrees(n).into_iter().map(Some).collect();
        degrees.push(None);
        for (trial, degree) in (0..).zip(degrees) {
            let r = runs::reduce(cfg, &ReduceSetup::simultaneous(n, bytes, degree), ctx.seed);
            let mut row = reduce_row("reduce", n, bytes, 0.0, &r);
            row.trial = trial;
            out.rows.push(row);
            let label = degree.map_or(format!("auto (d={})", r.d), |d| format!("d={d}"));
            let err = r.latency_s / r.predicted_s - 1.0;
            out.check(
                "model-band",
                r.completed && err.abs() <= 0.2,
                format!("{label}: {:.4} s vs model {:.4} s ({:+.1}%)", r.latency_s, r.predicted_s, 100.0 * err),
            );
            if degree.is_none() {
                out.check(
                    "auto-degree",
                    r.d == choose_degree(bytes, n, &cfg.network),
                    format!("auto reduce used d={}", r.d),
                );
            }
            out.replay(&label, &r.trace, true);
            if trial == 0 {
                out.trace = r.trace;
            }
        }
        Ok(out)
    }
}

/// Reduce followed by every participant reading the result.
pub struct Allreduce;

impl Scenario for Allreduce {
    fn name(&self) -> &'static str {
        "allreduce"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("allreduce")?;
        let bytes = 8 * MB;
        let mut out = Outcome::default();
        for (trial, n) in (0..).zip([4u32, 8, 16]) {
            let r = runs::allreduce(&ctx.cfg, n, bytes, ctx.seed + u64::from(trial));
            let mut row = Row::new("allreduce", n, bytes);
            row.trial = trial;
            row.d = Some(r.d);
            row.completed = r.completed;
            row.latency_s = r.latency_s;
            row.bytes_on_wire = Some(r.bytes_on_wire);
            out.rows.push(row);
            out.check("oracle", r.completed && r.exact, format!("n={n}"));
            out.replay(&format!("allreduce n={n}"), &r.trace, true);
            if trial == 0 {
                out.trace = r.trace;
            }
        }
        Ok(out)
    }
}

/// Broadcast receivers and reduce sources arriving at a fixed interval. The
/// time left after the last arrival should not grow with the cluster.
pub struct Staggered;

pub const STAGGER_INTERVAL_S: f64 = 0.05;

impl Scenario for Staggered {
    fn name(&self) -> &'static str {
        "staggered"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("staggered")?;
        let cfg = &ctx.cfg;
        let bytes = 64 * MB;
        let interval = STAGGER_INTERVAL_S;
        let mut out = Outcome::default();
        let (mut bcast, mut red) = (Vec::new(), Vec::new());
        for (trial, n) in (0..).zip([4u32, 8, 16]) {
            let b = runs::broadcast(cfg, n, bytes, interval, None, ctx.seed + u64::from(trial));
            let mut row = Row::new("staggered/broadcast", n, bytes);
            row.trial = trial;
            row.arrival_interval_s = interval;
            row.completed = b.completed;
            row.latency_s = b.latency_s;
            row.bytes_on_wire = Some(b.bytes_on_wire);
            out.rows.push(row);
            out.check("bit-exact", b.completed && b.exact == b.survivors, format!("broadcast n={n}"));
            out.replay(&format!("staggered broadcast n={n}"), &b.trace, true);
            bcast.push(b.latency_s);

            let r = runs::reduce(cfg, &ReduceSetup::staggered(n, bytes, interval), ctx.seed + u64::from(trial));
            let mut row = reduce_row("staggered/reduce", n, bytes, interval, &r);
            row.trial = trial;
            out.rows.push(row);
            out.check("completed", r.completed, format!("reduce n={n}"));
            out.replay(&format!("staggered reduce n={n}"), &r.trace, true);
            red.push(r.latency_s);
            if trial == 0 {
                out.trace = r.trace;
            }
        }
        for (label, v) in [("broadcast", &bcast), ("reduce", &red)] {
            let s = spread(v);
            out.check(
                "flat-in-n",
                s < 0.25,
                format!("{label}: after-last-arrival {v:.4?} s, spread {:.1}%", 100.0 * s),
            );
        }
        Ok(out)
    }
}

/// Sweeps object size and cluster size at every degree in {1, 2, n}.
pub struct AblationD;

pub const ABLATION_SIZES: [u64; 5] = [KB, 64 * KB, MB, 8 * MB, 64 * MB];
pub const ABLATION_NODES: [u32; 3] = [4, 8, 16];

impl Scenario for AblationD {
    fn name(&self) -> &'static str {
        "ablation_d"
    }

    fn run(&self, ctx: &Ctx) -> Result<Outcome> {
        ctx.require_sim("ablation_d")?;
        let cfg = &ctx.cfg;
        let mut out = Outcome::default();
        let (mut cells, mut good) = (0, 0);
        let mut trial = 0;
        for n in ABLATION_NODES {
            for bytes in ABLATION_SIZES {
                let mut measured = Vec::new();
                for d in candidate_degrees(n) {
                    let r = runs::reduce(cfg, &ReduceSetup::simultaneous(n, bytes, Some(d)), ctx.seed + u64::from(trial));
                    let mut row = reduce_row("ablation_d", n, bytes, 0.0, &r);
                    row.trial = trial;
                    trial += 1;
                    out.rows.push(row);
                    out.check("completed", r.completed, format!("n={n} S={bytes} d={d}"));
                    out.replay(&format!("ablation n={n} S={bytes} d={d}"), &r.trace, true);
                    measured.push((d, r.latency_s));
                }
                let best = measured.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
                let fastest: Vec<u32> = measured.iter().filter(|m| m.1 <= best * (1.0 + 1e-3)).map(|m| m.0).collect();
                let chosen = choose_degree(bytes, n, &cfg.network);
                cells += 1;
                good += usize::from(fastest.contains(&chosen));
                if bytes == ABLATION_SIZES[0] {
                    out.check("small-favors-star", fastest.contains(&n), format!("n={n} S={bytes}: fastest {fastest:?}"));
                }
                if bytes == ABLATION_SIZES[4] {
                    out.check("large-favors-chain", fastest.contains(&1), format!("n={n} S={bytes}: fastest {fastest:?}"));
                }
            }
        }
        out.check(
            "chosen-degree-fastest",
            good * 10 >= cells * 9,
            format!("model's pick was fastest in {good} of {cells} cells"),
        );
        Ok(out)
    }
}
