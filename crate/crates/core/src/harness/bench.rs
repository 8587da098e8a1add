//! Single-step scoring latency.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorers::{Scorer, ScorerKind};
use crate::trajkit::Trajectory;

pub const MIN_ITERATIONS: usize = 1000;
const WARMUP: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kind: ScorerKind,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub hz: f64,
}

/// Times `iterations` (at least `MIN_ITERATIONS`) single-step scores, cycling
/// through the steps of `traj`. World-model scorers are timed with a full
/// history, so every timed call runs a prediction.
pub fn bench_scorer(scorer: &Scorer, traj: &Trajectory, iterations: usize) -> Result<BenchReport> {
    let warm = scorer.warmup();
    if traj.len() <= warm {
        return Err(Error::InsufficientData(format!("bench trajectory needs more than {warm} steps")));
    }
    let iterations = iterations.max(MIN_ITERATIONS);
    let mut stream = scorer.stream(traj.seed);
    for k in 0..warm {
        stream.push(&traj.states[k], &traj.actions[k])?;
    }
    let cycle = warm..traj.len();
    let mut times = Vec::with_capacity(iterations);
    for i in 0..WARMUP + iterations {
        let k = cycle.start + i % cycle.len();
        let start = Instant::now();
        let v = stream.push(&traj.states[k], &traj.actions[k])?;
        let dt = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(v);
        if i >= WARMUP {
            times.push(dt);
        }
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let p95_ms = times[((times.len() as f64 * 0.95).ceil() as usize).min(times.len()) - 1];
    Ok(BenchReport { kind: scorer.kind(), iterations, mean_ms, p95_ms, hz: 1000.0 / mean_ms })
}

/// Latency tiers expected to be ordered fastest first.
pub const LATENCY_TIERS: [&[ScorerKind]; 4] = [
    &[ScorerKind::Sparc, ScorerKind::PcaKmeans],
    &[ScorerKind::AeSim],
    &[ScorerKind::AeRecon],
    &[ScorerKind::WmUncertainty, ScorerKind::WmPredError],
];

/// Whether every scorer of each tier is faster than every scorer of the next.
pub fn tiers_ordered(reports: &[BenchReport]) -> bool {
    let hz = |k: ScorerKind| reports.iter().find(|r| r.kind == k).map(|r| r.hz);
    LATENCY_TIERS.windows(2).all(|w| {
        let slowest = w[0].iter().filter_map(|&k| hz(k)).fold(f64::INFINITY, f64::min);
        let fastest = w[1].iter().filter_map(|&k| hz(k)).fold(0.0, f64::max);
        slowest > fastest
    })
}

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut s = String::from("scorer,iterations,mean_ms,p95_ms,hz\n");
    for r in reports {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.1}\n", r.kind, r.iterations, r.mean_ms, r.p95_ms, r.hz));
    }
    s
}
