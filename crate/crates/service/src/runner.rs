//! The per-session tick loop, its log writer, and offline replay.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use vcbot_core::deliberation::{EpochBudget, HumanInput, SessionLogWriter, TickRecord};
use vcbot_core::io::{write_meta, ArtifactMeta};
use vcbot_core::observer::{event_means, segment_events, CongruenceRow, CongruenceTracker};
use vcbot_core::CoreError;

use crate::artifacts::Artifacts;
use crate::error::{Result, ServiceError};
use crate::wire::{
    Body, Bye, ErrorBody, Event, EventSummary, Hello, Input, IntentLabels, Phase, SessionSummary, State, WireMessage,
    SCHEMA_VERSION,
};

/// What a transport's reader hands the tick loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Message(Box<WireMessage>),
    Malformed(String),
    Closed,
}

#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    /// Directory for the session log and summary; `None` writes nothing.
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub id: String,
    pub records: Vec<TickRecord>,
    pub congruence: Vec<CongruenceRow>,
    pub summary: SessionSummary,
    pub log_path: Option<PathBuf>,
    /// Instant each state message was handed to the transport.
    pub emitted: Vec<Instant>,
    /// From the first tick's deadline to the end of the last tick period.
    pub duration: Option<Duration>,
    pub reason: String,
}

pub const SUMMARY_HEADER: &str = "event,start_t,end_t,active_ticks,mean_p";

/// Session log file name for a session id.
pub fn log_file_name(id: &str) -> String {
    format!("session-{id}.csv")
}

pub fn summary_file_name(id: &str) -> String {
    format!("session-{id}-summary.csv")
}

struct LogWorker {
    tx: Sender<TickRecord>,
    handle: JoinHandle<Result<()>>,
}

fn spawn_log_writer(path: &Path) -> Result<LogWorker> {
    let file = File::create(path)?;
    let (tx, rx) = mpsc::channel::<TickRecord>();
    let handle = thread::Builder::new().name("session-log".into()).spawn(move || {
        let mut w = SessionLogWriter::new(BufWriter::new(file))?;
        for r in rx {
            w.write(&r)?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(LogWorker { tx, handle })
}

/// Events of a finished session with their mean congruence.
pub fn summarize_events(records: &[TickRecord], rows: &[CongruenceRow], gap: usize) -> Vec<EventSummary> {
    let active: Vec<bool> = records.iter().map(|r| r.human_active).collect();
    let ids = segment_events(&active, gap);
    let means = event_means(rows);
    let mut out: Vec<EventSummary> = Vec::new();
    for (r, id) in records.iter().zip(ids) {
        let Some(event) = id else { continue };
        match out.last_mut() {
            Some(e) if e.event == event => {
                e.end_t = r.t;
                e.active_ticks += 1;
            }
            _ => out.push(EventSummary {
                event,
                start_t: r.t,
                end_t: r.t,
                active_ticks: 1,
                mean_p: means.iter().find(|(e, _)| *e == event).map(|(_, p)| *p),
            }),
        }
    }
    out
}

pub fn write_summary_csv(path: &Path, events: &[EventSummary]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SUMMARY_HEADER.split(','))?;
    for e in events {
        w.write_record([
            e.event.to_string(),
            e.start_t.to_string(),
            e.end_t.to_string(),
            e.active_ticks.to_string(),
            e.mean_p.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

/// Clamps a client position into the workspace; `None` when not finite.
fn sanitize(input: &Input) -> Option<HumanInput> {
    if !input.x.is_finite() || !input.y.is_finite() {
        return None;
    }
    Some(HumanInput {
        x: input.x.clamp(-1.0, 1.0),
        y: input.y.clamp(-1.0, 1.0),
        active: input.active,
    })
}

struct Link<'a> {
    id: &'a str,
    out: &'a Sender<WireMessage>,
}

impl Link<'_> {
    /// A vanished client is detected by the reader; send failures are moot.
    fn send(&self, tick: usize, body: Body) {
        let _ = self.out.send(WireMessage::new(self.id, tick as u64, body));
    }

    fn event(&self, tick: usize, name: &str, detail: String, seqs: Vec<u64>) {
        self.send(
            tick,
            Body::Event(Event {
                name: name.into(),
                detail,
                seqs,
            }),
        );
    }

    fn error(&self, tick: usize, message: String) {
        self.send(tick, Body::Error(ErrorBody { message }));
    }

    fn bye(&self, tick: usize, reason: &str, summary: Option<SessionSummary>) {
        self.send(
            tick,
            Body::Bye(Bye {
                reason: reason.into(),
                summary,
            }),
        );
    }
}

/// Runs one client session: greets, waits for the client's hello, then
/// ticks on absolute deadlines until the tick budget is spent or the client
/// leaves. The model and window state stay on this thread.
pub fn run_session(
    art: &Artifacts,
    id: &str,
    inbound: &Receiver<Inbound>,
    outbound: &Sender<WireMessage>,
    opts: &SessionOptions,
) -> Result<SessionOutcome> {
    let link = Link { id, out: outbound };
    let mut outcome = SessionOutcome {
        id: id.to_string(),
        records: Vec::new(),
        congruence: Vec::new(),
        summary: SessionSummary {
            ticks: 0,
            log: None,
            events: Vec::new(),
        },
        log_path: None,
        emitted: Vec::new(),
        duration: None,
        reason: String::new(),
    };
    link.send(
        0,
        Body::Hello(Hello {
            schema: SCHEMA_VERSION,
            phase: Some(Phase::Idle),
            config: Some(art.summary()),
            watermark: art.watermark(),
            client: None,
        }),
    );

    // Idle until the client says hello.
    loop {
        match inbound.recv() {
            Ok(Inbound::Message(m)) => match m.body {
                Body::Hello(h) if h.schema == SCHEMA_VERSION => break,
                Body::Hello(h) => {
                    link.error(0, format!("schema {} not supported, server speaks {SCHEMA_VERSION}", h.schema));
                    link.bye(0, "schema_mismatch", None);
                    outcome.reason = "schema_mismatch".into();
                    return Ok(outcome);
                }
                Body::Bye(_) => {
                    outcome.reason = "client_bye".into();
                    return Ok(outcome);
                }
                Body::Input(i) => link.event(0, "input_rejected", "session not running".into(), vec![i.seq]),
                _ => link.error(0, format!("unexpected {} message", m.kind())),
            },
            Ok(Inbound::Malformed(e)) => link.error(0, e),
            Ok(Inbound::Closed) | Err(_) => {
                outcome.reason = "disconnected".into();
                return Ok(outcome);
            }
        }
    }

    let mut session = art.session()?;
    let net = &art.observer.net;
    let ocfg = &art.observer.config;
    let mut tracker = CongruenceTracker::new(net, ocfg.congruence_window, ocfg.event_gap);
    let labels = art.labels();
    let ticks = art.config.session.ticks;
    let period = Duration::from_millis(art.config.session.tick_ms);
    let budget = Duration::from_secs_f64(art.config.deliberation.budget_ms / 1e3);

    let log = match &opts.log_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(log_file_name(id));
            Some((spawn_log_writer(&path)?, path))
        }
        None => None,
    };
    link.event(0, "session_started", format!("{ticks} ticks of {} ms", period.as_millis()), vec![]);
    info!("session {id} running");

    let mut current: Option<HumanInput> = None;
    let mut reason = "finished";
    let mut failure: Option<ServiceError> = None;
    let start = Instant::now();
    for k in 0..ticks {
        let deadline = start + period * k as u32;
        sleep_until(deadline);

        let mut pending: Option<Input> = None;
        let mut superseded = Vec::new();
        let mut leaving = None;
        while let Ok(msg) = inbound.try_recv() {
            match msg {
                Inbound::Message(m) => match m.body {
                    Body::Input(i) if m.session != id => {
                        link.event(k, "input_rejected", format!("input for session {}", m.session), vec![i.seq])
                    }
                    Body::Input(i) if sanitize(&i).is_none() => {
                        link.event(k, "input_rejected", "non-finite position".into(), vec![i.seq])
                    }
                    Body::Input(i) => {
                        if let Some(old) = pending.replace(i) {
                            superseded.push(old.seq);
                        }
                    }
                    Body::Bye(_) => leaving = Some("client_bye"),
                    _ => link.error(k, format!("unexpected {} message while running", m.kind())),
                },
                Inbound::Malformed(e) => link.error(k, e),
                Inbound::Closed => leaving = Some("disconnected"),
            }
        }
        if !superseded.is_empty() {
            link.event(k, "input_superseded", "a later input arrived in the same tick".into(), superseded);
        }
        if let Some(r) = leaving {
            if let Some(p) = pending {
                link.event(k, "input_dropped", "session ending".into(), vec![p.seq]);
            }
            reason = r;
            break;
        }
        let ack = pending.map(|p| p.seq);
        if let Some(p) = pending.as_ref().and_then(sanitize) {
            current = Some(p);
        }

        let record = match session.tick(current, EpochBudget::Deadline(deadline + budget)) {
            Ok(r) => r,
            Err(e) => {
                link.error(k, e.to_string());
                failure = Some(e.into());
                reason = "error";
                break;
            }
        };
        let intents = tracker.push(&record, net);
        let name = |i: Option<usize>| i.and_then(|i| labels.get(i).cloned());
        link.send(
            k,
            Body::State(State {
                phase: Phase::Running,
                record: record.clone(),
                labels: IntentLabels {
                    human: name(intents.human),
                    robot: name(intents.robot),
                },
                congruence: intents.congruence.clone(),
                ack,
            }),
        );
        outcome.emitted.push(Instant::now());
        if let Some((w, _)) = &log {
            if w.tx.send(record.clone()).is_err() {
                failure = Some(ServiceError::Worker("session log writer stopped".into()));
                reason = "error";
                break;
            }
        }
        outcome.records.push(record);
        if let Some(c) = intents.congruence {
            outcome.congruence.push(c);
        }
    }
    if outcome.records.len() == ticks {
        sleep_until(start + period * ticks as u32);
        outcome.duration = Some(start.elapsed());
    }

    let events = summarize_events(&outcome.records, &outcome.congruence, ocfg.event_gap);
    if let Some((w, path)) = log {
        drop(w.tx);
        let written = w
            .handle
            .join()
            .map_err(|_| ServiceError::Worker("session log writer panicked".into()))?;
        if let Err(e) = written {
            warn!("session {id}: log incomplete: {e}");
            failure.get_or_insert(e);
        }
        write_meta(&path, &ArtifactMeta::new("session", &art.config_hash))?;
        let summary_path = path.with_file_name(summary_file_name(id));
        write_summary_csv(&summary_path, &events)?;
        write_meta(&summary_path, &ArtifactMeta::new("session-summary", &art.config_hash))?;
        outcome.log_path = Some(path);
    }
    outcome.summary = SessionSummary {
        ticks: outcome.records.len(),
        log: outcome.log_path.as_ref().map(|p| p.display().to_string()),
        events,
    };
    outcome.reason = reason.to_string();
    link.bye(outcome.records.len(), reason, Some(outcome.summary.clone()));
    info!("session {id} ended ({reason}) after {} ticks", outcome.records.len());
    match failure {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

/// Re-runs a recorded session offline: the same human inputs, and exactly
/// the number of inference epochs each recorded tick ran. Wall times are
/// copied from the recording so identical inputs give identical logs.
pub fn replay_records(art: &Artifacts, recorded: &[TickRecord]) -> Result<Vec<TickRecord>> {
    let mut session = art.session()?;
    let mut out = Vec::with_capacity(recorded.len());
    for (k, r) in recorded.iter().enumerate() {
        if r.t != k {
            return Err(CoreError::Replay(format!("row {} has t = {}, expected {k}", k + 2, r.t)).into());
        }
        let input = r.human.map(|[x, y]| HumanInput {
            x,
            y,
            active: r.human_active,
        });
        let mut rec = session.tick(input, EpochBudget::Exact(r.epochs))?;
        rec.wall_ms = r.wall_ms;
        out.push(rec);
    }
    Ok(out)
}

/// Writes a session log CSV with its metadata sidecar.
pub fn write_session_log(path: &Path, records: &[TickRecord], config_hash: &str) -> Result<()> {
    let mut w = SessionLogWriter::new(BufWriter::new(File::create(path)?))?;
    for r in records {
        w.write(r)?;
    }
    w.flush()?;
    write_meta(path, &ArtifactMeta::new("session", config_hash))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, active: bool) -> TickRecord {
        TickRecord {
            t,
            robot: [0.0, 0.0],
            human: Some([0.0, 0.0]),
            human_active: active,
            mixed: [0.0, 0.0],
            nelbo: 0.0,
            epochs: 0,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn events_follow_activity_runs() {
        let mut records = Vec::new();
        let pattern = [vec![true; 5], vec![false; 12], vec![true; 3]].concat();
        for (t, a) in pattern.into_iter().enumerate() {
            records.push(rec(t, a));
        }
        let rows = vec![
            CongruenceRow { t: 4, event: 1, c: 1, p: 1.0 },
            CongruenceRow { t: 19, event: 2, c: 0, p: 0.0 },
        ];
        let ev = summarize_events(&records, &rows, 10);
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].start_t, ev[0].end_t, ev[0].active_ticks), (0, 4, 5));
        assert_eq!((ev[1].start_t, ev[1].end_t, ev[1].mean_p), (17, 19, Some(0.0)));
    }

    #[test]
    fn sanitize_clamps_and_rejects() {
        let i = Input {
            seq: 1,
            x: 1.7,
            y: -0.2,
            active: true,
        };
        assert_eq!(sanitize(&i).unwrap().x, 1.0);
        assert!(sanitize(&Input { x: f64::NAN, ..i }).is_none());
    }
}
