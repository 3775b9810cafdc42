//! Intention congruence between the human's and the robot's classified
//! intentions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::net::ObserverNet;
use crate::deliberation::{Position, TickRecord};
use crate::error::Result;

pub const CONGRUENCE_HEADER: &str = "t,event,c,P";

/// 1 where both labels exist and agree, 0 where both exist and differ.
pub fn congruence_flags(human: &[Option<usize>], robot: &[Option<usize>]) -> Vec<Option<u8>> {
    human
        .iter()
        .zip(robot)
        .map(|(h, r)| match (h, r) {
            (Some(h), Some(r)) => Some(u8::from(h == r)),
            _ => None,
        })
        .collect()
}

/// Mean of the trailing `y` values of `c` (all of them when fewer).
pub fn congruence_probability(c: &[u8], y: usize) -> Option<f64> {
    if c.is_empty() || y == 0 {
        return None;
    }
    let tail = &c[c.len().saturating_sub(y)..];
    Some(tail.iter().map(|&v| f64::from(v)).sum::<f64>() / tail.len() as f64)
}

/// Event ids for every tick: contiguous runs of activity, where a run of
/// at least `gap` inactive ticks closes the current event.
pub fn segment_events(active: &[bool], gap: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(active.len());
    let mut event = 0;
    let mut idle = usize::MAX;
    for &a in active {
        if a {
            if idle >= gap {
                event += 1;
            }
            idle = 0;
            out.push(Some(event));
        } else {
            idle = idle.saturating_add(1);
            out.push(None);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongruenceRow {
    pub t: usize,
    pub event: usize,
    pub c: u8,
    pub p: f64,
}

/// Labels and congruence for one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickIntents {
    pub human: Option<usize>,
    pub robot: Option<usize>,
    pub congruence: Option<CongruenceRow>,
}

/// Incremental congruence over a stream of ticks. The human stream is the
/// pointer position, the robot stream the robot's intention; both are
/// classified over the same trailing buffer.
#[derive(Debug, Clone)]
pub struct CongruenceTracker {
    y: usize,
    gap: usize,
    steps: usize,
    human: Vec<Option<Position>>,
    robot: Vec<Position>,
    idle: usize,
    event: usize,
    history: Vec<u8>,
}

impl CongruenceTracker {
    pub fn new(net: &ObserverNet, y: usize, gap: usize) -> Self {
        Self {
            y,
            gap,
            steps: net.inputs() / 2,
            human: Vec::new(),
            robot: Vec::new(),
            idle: usize::MAX,
            event: 0,
            history: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: &TickRecord, net: &ObserverNet) -> TickIntents {
        self.human.push(rec.human);
        self.robot.push(rec.robot);
        if self.robot.len() > self.steps {
            self.human.remove(0);
            self.robot.remove(0);
        }
        let robot = net.classify(&self.robot).map(|l| l.index);
        let human_buf: Option<Vec<Position>> = self.human.iter().copied().collect();
        let human = human_buf.and_then(|h| net.classify(&h)).map(|l| l.index);

        if !rec.human_active {
            self.idle = self.idle.saturating_add(1);
            return TickIntents { human, robot, congruence: None };
        }
        if self.idle >= self.gap {
            self.event += 1;
            self.history.clear();
        }
        self.idle = 0;
        let congruence = congruence_flags(&[human], &[robot])[0].and_then(|c| {
            self.history.push(c);
            congruence_probability(&self.history, self.y).map(|p| CongruenceRow {
                t: rec.t,
                event: self.event,
                c,
                p,
            })
        });
        TickIntents { human, robot, congruence }
    }
}

/// Per-event congruence series over a session log.
pub fn congruence_series(log: &[TickRecord], net: &ObserverNet, y: usize, gap: usize) -> Vec<CongruenceRow> {
    let mut tracker = CongruenceTracker::new(net, y, gap);
    log.iter().filter_map(|r| tracker.push(r, net).congruence).collect()
}

pub fn write_congruence_csv<W: Write>(rows: &[CongruenceRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CONGRUENCE_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.t.to_string(), r.event.to_string(), r.c.to_string(), r.p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean P per event, in event order.
pub fn event_means(rows: &[CongruenceRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.event => {
                *sum += r.p;
                *n += 1;
            }
            _ => out.push((r.event, r.p, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}
