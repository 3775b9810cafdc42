//! Network front end: one session per client over length-prefixed TCP
//! frames or WebSocket text messages.

use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use tungstenite::{Message, WebSocket};

use crate::artifacts::Artifacts;
use crate::error::{Result, ServiceError};
use crate::runner::{run_session, Inbound, SessionOptions, SessionOutcome};
use crate::wire::{read_frame_text, write_frame, Body, Bye, ErrorBody, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// 4-byte big-endian length prefix, then UTF-8 JSON.
    Framed,
    /// One JSON text message per WebSocket message.
    WebSocket,
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Allow concurrent sessions; otherwise later clients are turned away
    /// while one is running.
    pub multi: bool,
    /// Stop after this many sessions have been accepted.
    pub max_sessions: Option<usize>,
    pub session: SessionOptions,
}

fn parse(text: &str) -> Inbound {
    match WireMessage::from_json(text) {
        Ok(m) => Inbound::Message(Box::new(m)),
        Err(e) => Inbound::Malformed(format!("malformed message: {e}")),
    }
}

struct Io {
    inbound: Receiver<Inbound>,
    outbound: Sender<WireMessage>,
    workers: Vec<JoinHandle<()>>,
}

fn spawn_framed(stream: TcpStream) -> Result<Io> {
    stream.set_nodelay(true)?;
    let (in_tx, in_rx) = mpsc::channel();
    let (out_tx, out_rx) = mpsc::channel::<WireMessage>();
    let read_half = stream.try_clone()?;
    let reader = thread::Builder::new().name("wire-reader".into()).spawn(move || {
        let mut r = BufReader::new(read_half);
        loop {
            match read_frame_text(&mut r) {
                Ok(Some(text)) => {
                    if in_tx.send(parse(&text)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(ServiceError::Protocol(e)) => {
                    let _ = in_tx.send(Inbound::Malformed(e));
                }
                Err(_) => break,
            }
        }
        let _ = in_tx.send(Inbound::Closed);
    })?;
    let writer = thread::Builder::new().name("wire-writer".into()).spawn(move || {
        let mut w = BufWriter::new(&stream);
        for msg in out_rx {
            if let Err(e) = write_frame(&mut w, &msg) {
                warn!("dropping client connection: {e}");
                break;
            }
        }
        let _ = stream.shutdown(Shutdown::Both);
    })?;
    Ok(Io {
        inbound: in_rx,
        outbound: out_tx,
        workers: vec![reader, writer],
    })
}

fn spawn_websocket(stream: TcpStream) -> Result<Io> {
    stream.set_nodelay(true)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| ServiceError::WebSocket(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
    let (in_tx, in_rx) = mpsc::channel();
    let (out_tx, out_rx) = mpsc::channel::<WireMessage>();
    let worker = thread::Builder::new().name("ws-io".into()).spawn(move || {
        let mut open = true;
        loop {
            if open {
                match ws.read() {
                    Ok(Message::Text(t)) => {
                        let _ = in_tx.send(parse(t.as_str()));
                    }
                    Ok(Message::Binary(_)) => {
                        let _ = in_tx.send(Inbound::Malformed("binary messages are not part of the schema".into()));
                    }
                    Ok(Message::Close(_)) => {
                        open = false;
                        let _ = in_tx.send(Inbound::Closed);
                    }
                    Ok(_) => {}
                    Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                    Err(_) => {
                        open = false;
                        let _ = in_tx.send(Inbound::Closed);
                    }
                }
            } else {
                thread::sleep(Duration::from_millis(2));
            }
            loop {
                match out_rx.try_recv() {
                    Ok(msg) => {
                        if open {
                            let sent = msg
                                .to_json()
                                .map_err(|e| e.to_string())
                                .and_then(|j| ws.send(Message::text(j)).map_err(|e| e.to_string()));
                            if let Err(e) = sent {
                                warn!("dropping websocket client: {e}");
                                open = false;
                                let _ = in_tx.send(Inbound::Closed);
                            }
                        }
                    }
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => {
                        if open {
                            let _ = ws.close(None);
                            let _ = ws.flush();
                        }
                        return;
                    }
                }
            }
        }
    })?;
    Ok(Io {
        inbound: in_rx,
        outbound: out_tx,
        workers: vec![worker],
    })
}

fn session_id(n: usize) -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("{secs}-{n}")
}

/// Runs one session on an accepted connection and waits for its workers.
pub fn handle_client(stream: TcpStream, transport: Transport, art: &Artifacts, id: &str, opts: &SessionOptions) -> Result<SessionOutcome> {
    let io = match transport {
        Transport::Framed => spawn_framed(stream)?,
        Transport::WebSocket => spawn_websocket(stream)?,
    };
    let result = run_session(art, id, &io.inbound, &io.outbound, opts);
    drop(io.outbound);
    for w in io.workers {
        let _ = w.join();
    }
    result
}

fn refuse(stream: TcpStream, transport: Transport, id: &str) {
    let msgs = [
        WireMessage::new(
            id,
            0,
            Body::Error(ErrorBody {
                message: "another session is running".into(),
            }),
        ),
        WireMessage::new(
            id,
            0,
            Body::Bye(Bye {
                reason: "busy".into(),
                summary: None,
            }),
        ),
    ];
    match transport {
        Transport::Framed => {
            let mut s = &stream;
            for m in &msgs {
                let _ = write_frame(&mut s, m);
            }
        }
        Transport::WebSocket => {
            if let Ok(mut ws) = tungstenite::accept(stream) {
                for m in &msgs {
                    if let Ok(j) = m.to_json() {
                        let _ = ws.send(Message::text(j));
                    }
                }
                let _ = ws.close(None);
                let _ = ws.flush();
            }
            return;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// Accept loop. Returns the outcomes of all sessions once `max_sessions`
/// have been accepted; runs forever otherwise.
pub fn serve(listener: TcpListener, transport: Transport, art: Arc<Artifacts>, opts: ServeOptions) -> Result<Vec<SessionOutcome>> {
    let active = Arc::new(AtomicUsize::new(0));
    let mut handles: Vec<JoinHandle<Result<SessionOutcome>>> = Vec::new();
    let mut accepted = 0;
    info!("listening on {} ({transport:?})", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        accepted += 1;
        let id = session_id(accepted);
        if !opts.multi && active.load(Ordering::SeqCst) > 0 {
            info!("turning away client {id}: busy");
            refuse(stream, transport, &id);
            accepted -= 1;
            continue;
        }
        active.fetch_add(1, Ordering::SeqCst);
        let art = Arc::clone(&art);
        let active = Arc::clone(&active);
        let session_opts = opts.session.clone();
        handles.push(thread::Builder::new().name(format!("session-{id}")).spawn(move || {
            let r = handle_client(stream, transport, &art, &id, &session_opts);
            active.fetch_sub(1, Ordering::SeqCst);
            if let Err(e) = &r {
                warn!("session {id} failed: {e}");
            }
            r
        })?);
        if opts.max_sessions.is_some_and(|m| accepted >= m) {
            break;
        }
    }
    handles
        .into_iter()
        .map(|h| h.join().map_err(|_| ServiceError::Worker("session thread panicked".into()))?)
        .collect()
}
