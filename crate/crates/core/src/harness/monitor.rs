//! Online monitoring: scores each incoming step, smooths, and latches an
//! alarm once the smoothed score exceeds the calibrated threshold.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::Serialize;

use crate::conformal::ConformalThreshold;
use crate::error::{Error, Result};
use crate::scorers::{ScoreStream, Scorer};
use crate::trajkit::{Action, State, StreamReader, Trajectory};

/// One JSON line of monitor output.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Event {
    Step {
        #[serde(skip_serializing_if = "Option::is_none")]
        traj: Option<String>,
        t: usize,
        score: f64,
        smoothed: f64,
        alarm: bool,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        traj: Option<String>,
        index: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        t: Option<usize>,
        error: String,
    },
}

pub struct Monitor<'a> {
    stream: ScoreStream<'a>,
    threshold: f64,
    window: usize,
    recent: VecDeque<f64>,
    pending: Vec<usize>,
    alarm: bool,
    traj: Option<String>,
}

impl<'a> Monitor<'a> {
    pub fn new(scorer: &'a Scorer, threshold: &ConformalThreshold, traj_seed: u64) -> Self {
        Monitor {
            stream: scorer.stream(traj_seed),
            threshold: threshold.threshold,
            window: threshold.window.max(1),
            recent: VecDeque::new(),
            pending: Vec::new(),
            alarm: false,
            traj: None,
        }
    }

    pub fn with_traj(mut self, id: &str) -> Self {
        self.traj = Some(id.to_string());
        self
    }

    pub fn alarmed(&self) -> bool {
        self.alarm
    }

    fn emit(&mut self, t: usize, score: f64) -> Event {
        self.recent.push_back(score);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let n = self.recent.len();
        let num: f64 = self.recent.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
        let smoothed = num / (n * (n + 1) / 2) as f64;
        // the running max exceeds the threshold iff some smoothed value does
        self.alarm |= smoothed > self.threshold;
        Event::Step { traj: self.traj.clone(), t, score, smoothed, alarm: self.alarm }
    }

    /// Events released by this step: none while a world-model scorer warms
    /// up, then the backfilled warm-up steps followed by the current one.
    pub fn push(&mut self, state: &State, action: &Action) -> Result<Vec<Event>> {
        match self.stream.push(state, action)? {
            None => {
                self.pending.push(state.t);
                Ok(vec![])
            }
            Some(score) => {
                if !score.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score at t={}", state.t)));
                }
                let mut out: Vec<Event> = std::mem::take(&mut self.pending)
                    .into_iter()
                    .map(|t| self.emit(t, score))
                    .collect();
                out.push(self.emit(state.t, score));
                Ok(out)
            }
        }
    }
}

fn write_event<W: Write>(out: &mut W, e: &Event) -> Result<()> {
    serde_json::to_writer(&mut *out, e)?;
    out.write_all(b"\n").map_err(|e| Error::io("<output>", e))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonitorSummary {
    pub steps: usize,
    pub errors: usize,
    pub alarm: bool,
}

/// Monitors a framed record stream. Malformed records and per-step scoring
/// errors become error events; the stream continues.
pub fn monitor_stream<R: Read, W: Write>(
    scorer: &Scorer,
    threshold: &ConformalThreshold,
    input: R,
    out: &mut W,
) -> Result<MonitorSummary> {
    let reader = StreamReader::new(input)?;
    let mut m = Monitor::new(scorer, threshold, 0);
    let mut summary = MonitorSummary::default();
    for (index, rec) in reader.enumerate() {
        let events = match rec {
            Ok((s, a)) => m.push(&s, &a).unwrap_or_else(|e| {
                vec![Event::Error { traj: None, index, t: Some(s.t), error: e.to_string() }]
            }),
            Err(fe) => vec![Event::Error { traj: None, index: fe.index, t: fe.t, error: fe.reason }],
        };
        for e in &events {
            match e {
                Event::Step { .. } => summary.steps += 1,
                Event::Error { .. } => summary.errors += 1,
            }
            write_event(out, e)?;
        }
    }
    summary.alarm = m.alarmed();
    out.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(summary)
}

/// Monitors each trajectory independently; returns whether each one alarmed.
pub fn monitor_trajectories<W: Write>(
    scorer: &Scorer,
    threshold: &ConformalThreshold,
    trajs: &[Trajectory],
    out: &mut W,
) -> Result<Vec<bool>> {
    let mut alarms = Vec::with_capacity(trajs.len());
    for tr in trajs {
        let mut m = Monitor::new(scorer, threshold, tr.seed).with_traj(&tr.id);
        for (index, (s, a)) in tr.states.iter().zip(&tr.actions).enumerate() {
            let events = m.push(s, a).unwrap_or_else(|e| {
                vec![Event::Error { traj: Some(tr.id.clone()), index, t: Some(s.t), error: e.to_string() }]
            });
            for e in &events {
                write_event(out, e)?;
            }
        }
        alarms.push(m.alarmed());
    }
    out.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(alarms)
}
