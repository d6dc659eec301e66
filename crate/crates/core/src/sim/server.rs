//! Real-time loop and network front ends for a [`Session`].
//!
//! The loop owns the session. Clients talk to it through a [`Mailbox`]
//! (latest command wins, control messages queue) and receive telemetry
//! through per-client bounded queues that drop the oldest frame when full.
//! One port serves both protocols: a connection whose first bytes are an
//! HTTP `GET` is upgraded to WebSocket, anything else is line-delimited
//! JSON.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::Message;

use super::{Session, SimError, WireMessage};

/// Client-to-loop channel. Commands overwrite each other; resets and filter
/// toggles are kept in order so none is lost between ticks.
#[derive(Debug, Default)]
pub struct Mailbox {
    command: Mutex<Option<WireMessage>>,
    control: Mutex<VecDeque<WireMessage>>,
}

impl Mailbox {
    pub fn post(&self, msg: WireMessage) {
        match msg {
            WireMessage::Command(_) => *self.command.lock().expect("mailbox lock") = Some(msg),
            _ => self.control.lock().expect("mailbox lock").push_back(msg),
        }
    }

    fn drain(&self) -> Vec<WireMessage> {
        let mut out: Vec<WireMessage> = self
            .control
            .lock()
            .expect("mailbox lock")
            .drain(..)
            .collect();
        if let Some(c) = self.command.lock().expect("mailbox lock").take() {
            out.push(c);
        }
        out
    }
}

/// One client's bounded telemetry queue.
#[derive(Debug)]
pub struct Subscriber {
    queue: Mutex<VecDeque<String>>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
    closed: AtomicBool,
}

impl Subscriber {
    fn push(&self, line: &str) {
        let mut q = self.queue.lock().expect("queue lock");
        if q.len() == self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(line.to_string());
        self.ready.notify_one();
    }

    /// Next line, waiting up to `timeout`.
    pub fn pop(&self, timeout: Duration) -> Option<String> {
        let q = self.queue.lock().expect("queue lock");
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| q.is_empty())
            .expect("queue lock");
        q.pop_front()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Relaxed);
    }
}

/// Fan-out of telemetry lines to every live subscriber.
#[derive(Debug, Default)]
pub struct Broadcast {
    subscribers: Mutex<Vec<Arc<Subscriber>>>,
}

impl Broadcast {
    pub fn subscribe(&self, capacity: usize) -> Arc<Subscriber> {
        let sub = Arc::new(Subscriber {
            queue: Mutex::new(VecDeque::with_capacity(capacity)),
            ready: Condvar::new(),
            capacity: capacity.max(1),
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        });
        self.subscribers
            .lock()
            .expect("broadcast lock")
            .push(sub.clone());
        sub
    }

    pub fn publish(&self, line: &str) {
        let mut subs = self.subscribers.lock().expect("broadcast lock");
        subs.retain(|s| !s.closed.load(Ordering::Relaxed));
        for s in subs.iter() {
            s.push(line);
        }
    }
}

/// Per-tick compute times and deadline accounting of a running loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopStats {
    pub ticks: u64,
    pub missed: u64,
    pub compute_times: Vec<f64>,
}

pub struct SessionHandle {
    pub mailbox: Arc<Mailbox>,
    pub telemetry: Arc<Broadcast>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<(Session, LoopStats)>>,
}

impl SessionHandle {
    /// Stop the loop and hand back the session and its statistics.
    pub fn stop(mut self) -> (Session, LoopStats) {
        self.stop.store(true, Ordering::Relaxed);
        self.thread
            .take()
            .expect("joined once")
            .join()
            .expect("session loop panicked")
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Run `session` on its own thread at its tick rate until stopped.
pub fn spawn_session(session: Session) -> SessionHandle {
    let mailbox = Arc::new(Mailbox::default());
    let telemetry = Arc::new(Broadcast::default());
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let (mailbox, telemetry, stop) = (mailbox.clone(), telemetry.clone(), stop.clone());
        std::thread::spawn(move || run_session(session, &mailbox, &telemetry, &stop))
    };
    SessionHandle {
        mailbox,
        telemetry,
        stop,
        thread: Some(thread),
    }
}

fn run_session(
    mut session: Session,
    mailbox: &Mailbox,
    telemetry: &Broadcast,
    stop: &AtomicBool,
) -> (Session, LoopStats) {
    let period = Duration::from_secs_f64(session.tick_period());
    let mut stats = LoopStats::default();
    let mut deadline = Instant::now() + period;
    while !stop.load(Ordering::Relaxed) {
        let start = Instant::now();
        for msg in mailbox.drain() {
            if let Err(e) = session.handle(&msg) {
                telemetry.publish(
                    &WireMessage::Error {
                        message: e.to_string(),
                    }
                    .to_line(),
                );
            }
        }
        let msgs = session.tick().unwrap_or_else(|e| {
            vec![WireMessage::Error {
                message: e.to_string(),
            }]
        });
        for m in &msgs {
            telemetry.publish(&m.to_line());
        }
        let now = Instant::now();
        stats.ticks += 1;
        stats.compute_times.push((now - start).as_secs_f64());
        if now > deadline {
            // skip the periods we overran instead of bursting to catch up
            let behind = ((now - deadline).as_secs_f64() / period.as_secs_f64()).floor() as u64 + 1;
            stats.missed += behind;
            session.record_missed(behind);
            deadline += period * behind as u32;
        } else {
            std::thread::sleep(deadline - now);
        }
        deadline += period;
    }
    let _ = session.flush_log();
    (session, stats)
}

/// Accept clients on `listener` until `stop` is set. Every client attaches
/// to the same session.
pub fn serve(
    listener: TcpListener,
    handle: &SessionHandle,
    stop: &AtomicBool,
    queue_capacity: usize,
) -> Result<(), SimError> {
    listener.set_nonblocking(true)?;
    std::thread::scope(|scope| -> Result<(), SimError> {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let mailbox = handle.mailbox.clone();
                    let telemetry = handle.telemetry.clone();
                    scope.spawn(move || {
                        let _ = handle_client(stream, &mailbox, &telemetry, stop, queue_capacity);
                    });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    })
}

fn handle_client(
    stream: TcpStream,
    mailbox: &Mailbox,
    telemetry: &Broadcast,
    stop: &AtomicBool,
    capacity: usize,
) -> Result<(), SimError> {
    stream.set_nodelay(true)?;
    // poll so a silent client cannot hold up shutdown
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut first = [0u8; 4];
    let n = loop {
        if stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        match stream.peek(&mut first) {
            Ok(n) if n >= 4 || n == 0 => break n,
            // wait for the rest of the first packet
            Ok(_) => std::thread::sleep(Duration::from_millis(1)),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_read_timeout(None)?;
    if n == 0 {
        return Ok(());
    }
    if &first == b"GET " {
        websocket_client(stream, mailbox, telemetry, stop, capacity)
    } else {
        line_client(stream, mailbox, telemetry, stop, capacity)
    }
}

fn client_message(mailbox: &Mailbox, text: &str) -> Option<WireMessage> {
    if text.trim().is_empty() {
        return None;
    }
    match WireMessage::from_line(text) {
        Ok(msg) => {
            mailbox.post(msg);
            None
        }
        Err(e) => Some(WireMessage::Error {
            message: format!("bad message: {e}"),
        }),
    }
}

fn line_client(
    stream: TcpStream,
    mailbox: &Mailbox,
    telemetry: &Broadcast,
    stop: &AtomicBool,
    capacity: usize,
) -> Result<(), SimError> {
    let sub = telemetry.subscribe(capacity);
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    std::thread::scope(|scope| {
        let sub_w = sub.clone();
        scope.spawn(move || {
            while !sub_w.closed.load(Ordering::Relaxed) && !stop.load(Ordering::Relaxed) {
                if let Some(line) = sub_w.pop(Duration::from_millis(50)) {
                    if writeln!(writer, "{line}").is_err() {
                        break;
                    }
                }
            }
            sub_w.close();
            let _ = writer.shutdown(std::net::Shutdown::Both);
        });
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if let Some(err) = client_message(mailbox, &line) {
                sub.push(&err.to_line());
            }
            if sub.closed.load(Ordering::Relaxed) {
                break;
            }
        }
        sub.close();
    });
    Ok(())
}

fn websocket_client(
    stream: TcpStream,
    mailbox: &Mailbox,
    telemetry: &Broadcast,
    stop: &AtomicBool,
    capacity: usize,
) -> Result<(), SimError> {
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => SimError::WebSocket(e),
        tungstenite::HandshakeError::Interrupted(_) => {
            SimError::Config("websocket handshake interrupted".into())
        }
    })?;
    ws.get_ref()
        .set_read_timeout(Some(Duration::from_millis(2)))?;
    let sub = telemetry.subscribe(capacity);
    let result = (|| -> Result<(), SimError> {
        while !stop.load(Ordering::Relaxed) {
            match ws.read() {
                Ok(Message::Text(text)) => {
                    if let Some(err) = client_message(mailbox, &text) {
                        ws.send(Message::Text(err.to_line()))?;
                    }
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Ok(())
                }
                Err(e) => return Err(e.into()),
            }
            while let Some(line) = sub.pop(Duration::ZERO) {
                ws.send(Message::Text(line))?;
            }
        }
        let _ = ws.close(None);
        Ok(())
    })();
    sub.close();
    result
}
