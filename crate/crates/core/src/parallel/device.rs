//! Virtual devices: worker-side message endpoints with event logging.
//!
//! A device is one isolated execution unit (one thread in practice). All
//! cross-device data moves by value through tagged messages, every send,
//! receive, compute span and sync is logged with nanosecond ticks from a
//! shared epoch, and a bounded receive wait turns scheduling bugs into
//! errors instead of hangs.

use crate::autograd::GradientSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Compute,
    Send,
    Recv,
    Sync,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::Send => "send",
            EventKind::Recv => "recv",
            EventKind::Sync => "sync",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub device: usize,
    pub kind: EventKind,
    pub task: String,
    pub start: u64,
    pub end: u64,
    pub bytes: u64,
}

/// Timestamped record of everything every device did during one run.
#[derive(Debug, Clone, Default)]
pub struct ExecTrace {
    pub events: Vec<Event>,
}

impl ExecTrace {
    /// CSV export: `device,kind,task,start,end,bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("device,kind,task,start,end,bytes\n");
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.device,
                e.kind.as_str(),
                e.task,
                e.start,
                e.end,
                e.bytes
            ));
        }
        out
    }

    pub fn compute_events(&self) -> impl Iterator<Item = &Event> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Compute)
    }

    pub fn find_compute(&self, task: &str) -> Option<&Event> {
        self.compute_events().find(|e| e.task == task)
    }

    /// Per-device events must not overlap in tick time.
    pub fn check_device_seriality(&self) -> Result<()> {
        let mut by_device: std::collections::BTreeMap<usize, Vec<&Event>> = Default::default();
        for e in &self.events {
            by_device.entry(e.device).or_default().push(e);
        }
        for (dev, mut evs) in by_device {
            evs.sort_by_key(|e| e.start);
            for w in evs.windows(2) {
                if w[1].start < w[0].end {
                    return Err(Error::Scheduling(format!(
                        "device {dev}: `{}` [{}..{}] overlaps `{}` [{}..{}]",
                        w[0].task, w[0].start, w[0].end, w[1].task, w[1].start, w[1].end
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every recv must be matched by a send with the same tag.
    pub fn check_recv_matched(&self) -> Result<()> {
        let mut sends: std::collections::BTreeMap<&str, usize> = Default::default();
        for e in &self.events {
            if e.kind == EventKind::Send {
                *sends.entry(e.task.as_str()).or_default() += 1;
            }
        }
        for e in &self.events {
            if e.kind == EventKind::Recv {
                match sends.get_mut(e.task.as_str()) {
                    Some(n) if *n > 0 => *n -= 1,
                    _ => {
                        return Err(Error::Scheduling(format!(
                            "recv of `{}` on device {} has no matching send",
                            e.task, e.device
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Message payloads; everything crossing devices is one of these.
#[derive(Debug, Clone)]
pub enum Payload<S: Scalar> {
    Tensor(Tensor<S>),
    TensorList(Vec<Tensor<S>>),
    Grads(GradientSet<S>),
    Scalars(Vec<f64>),
}

impl<S: Scalar> Payload<S> {
    pub fn bytes(&self) -> u64 {
        match self {
            Payload::Tensor(t) => t.bytes(),
            Payload::TensorList(ts) => ts.iter().map(|t| t.bytes()).sum(),
            Payload::Grads(g) => g.iter().map(|(_, t)| t.bytes()).sum(),
            Payload::Scalars(v) => (v.len() * 8) as u64,
        }
    }

    pub fn into_tensor(self) -> Result<Tensor<S>> {
        match self {
            Payload::Tensor(t) => Ok(t),
            _ => Err(Error::Scheduling("expected tensor payload".into())),
        }
    }

    pub fn into_tensor_list(self) -> Result<Vec<Tensor<S>>> {
        match self {
            Payload::TensorList(t) => Ok(t),
            _ => Err(Error::Scheduling("expected tensor-list payload".into())),
        }
    }

    pub fn into_grads(self) -> Result<GradientSet<S>> {
        match self {
            Payload::Grads(g) => Ok(g),
            _ => Err(Error::Scheduling("expected gradient payload".into())),
        }
    }

    pub fn into_scalars(self) -> Result<Vec<f64>> {
        match self {
            Payload::Scalars(v) => Ok(v),
            _ => Err(Error::Scheduling("expected scalar payload".into())),
        }
    }
}

pub struct Msg<S: Scalar> {
    pub from: usize,
    pub tag: String,
    pub payload: Payload<S>,
}

pub struct Device<S: Scalar> {
    pub id: usize,
    inbox: Receiver<Msg<S>>,
    outboxes: Vec<Sender<Msg<S>>>,
    pending: Vec<Msg<S>>,
    pub events: Vec<Event>,
    epoch: Instant,
    timeout: Duration,
}

impl<S: Scalar> Device<S> {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    pub fn send(&mut self, to: usize, tag: &str, payload: Payload<S>) -> Result<()> {
        let bytes = payload.bytes();
        let start = self.now();
        self.outboxes[to]
            .send(Msg {
                from: self.id,
                tag: tag.to_string(),
                payload,
            })
            .map_err(|_| {
                Error::Scheduling(format!(
                    "device {} -> {to}: channel closed sending `{tag}`",
                    self.id
                ))
            })?;
        self.events.push(Event {
            device: self.id,
            kind: EventKind::Send,
            task: tag.to_string(),
            start,
            end: self.now(),
            bytes,
        });
        Ok(())
    }

    /// Receives the message with the given tag, buffering out-of-order
    /// arrivals. Times out with a scheduling error naming the wait.
    pub fn recv(&mut self, tag: &str) -> Result<Payload<S>> {
        let start = self.now();
        if let Some(pos) = self.pending.iter().position(|m| m.tag == tag) {
            let msg = self.pending.remove(pos);
            self.log_recv(tag, start, msg.payload.bytes());
            return Ok(msg.payload);
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(Error::Scheduling(format!(
                    "device {} timed out waiting for `{tag}`",
                    self.id
                )));
            }
            match self.inbox.recv_timeout(remaining) {
                Ok(msg) if msg.tag == tag => {
                    self.log_recv(tag, start, msg.payload.bytes());
                    return Ok(msg.payload);
                }
                Ok(msg) => self.pending.push(msg),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Scheduling(format!(
                        "device {} timed out waiting for `{tag}`",
                        self.id
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Scheduling(format!(
                        "device {}: all peers gone while waiting for `{tag}`",
                        self.id
                    )));
                }
            }
        }
    }

    fn log_recv(&mut self, tag: &str, start: u64, bytes: u64) {
        self.events.push(Event {
            device: self.id,
            kind: EventKind::Recv,
            task: tag.to_string(),
            start,
            end: self.now(),
            bytes,
        });
    }

    /// Runs `f` as one logged compute span.
    pub fn compute<T>(&mut self, task: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = self.now();
        let out = f()?;
        self.events.push(Event {
            device: self.id,
            kind: EventKind::Compute,
            task: task.to_string(),
            start,
            end: self.now(),
            bytes: 0,
        });
        Ok(out)
    }

    /// Logs a synchronization (gradient reduction) span.
    pub fn log_sync(&mut self, task: &str, start: u64, bytes: u64) {
        self.events.push(Event {
            device: self.id,
            kind: EventKind::Sync,
            task: task.to_string(),
            start,
            end: self.now(),
            bytes,
        });
    }

    pub fn tick(&self) -> u64 {
        self.now()
    }
}

/// Builds a fully-connected mesh of `n` devices sharing one tick epoch.
pub fn make_mesh<S: Scalar>(n: usize, timeout: Duration) -> Vec<Device<S>> {
    let epoch = Instant::now();
    let mut senders = Vec::with_capacity(n);
    let mut receivers = Vec::with_capacity(n);
    for _ in 0..n {
        let (tx, rx) = channel();
        senders.push(tx);
        receivers.push(rx);
    }
    receivers
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| Device {
            id,
            inbox,
            outboxes: senders.clone(),
            pending: Vec::new(),
            events: Vec::new(),
            epoch,
            timeout,
        })
        .collect()
}
