//! Per-message forwarding traces.
//!
//! A cascade holds one original post followed by the forwards it received,
//! each forward pointing at the event it was forwarded from. Events are kept
//! in canonical `(time, event_id)` order with the original post first.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::graph::UserId;

/// One post or forward of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ForwardEvent {
    pub event_id: u64,
    pub user: UserId,
    /// Epoch seconds.
    pub time: i64,
    /// `None` for the original post.
    pub parent: Option<u64>,
}

impl ForwardEvent {
    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    /// Canonical ordering key.
    pub fn key(&self) -> (i64, u64) {
        (self.time, self.event_id)
    }
}

/// Reasons a cascade fails validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CascadeError {
    #[error("cascade has no events")]
    Empty,
    #[error("no original post (every event has a parent)")]
    NoRoot,
    #[error("multiple roots: events {0} and {1} have no parent")]
    MultipleRoots(u64, u64),
    #[error("duplicate event id {0}")]
    DuplicateEventId(u64),
    #[error("dangling parent: event {event} cites nonexistent event {parent}")]
    DanglingParent { event: u64, parent: u64 },
    #[error("event {event} is not later than its parent {parent}")]
    ParentNotEarlier { event: u64, parent: u64 },
    #[error("duplicate user {user}: repeat event {event} is cited as a parent")]
    DuplicateUser { user: UserId, event: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    message_id: u64,
    has_url: bool,
    is_hot_event: bool,
    events: Vec<ForwardEvent>,
    index: HashMap<u64, usize>,
}

impl Cascade {
    /// Validates and canonicalizes a cascade. Each user may appear at most
    /// once; use [`Cascade::from_raw`] to collapse repeat forwards first.
    pub fn new(
        message_id: u64,
        has_url: bool,
        is_hot_event: bool,
        mut events: Vec<ForwardEvent>,
    ) -> Result<Self, CascadeError> {
        if events.is_empty() {
            return Err(CascadeError::Empty);
        }
        events.sort_unstable_by_key(ForwardEvent::key);

        let mut index = HashMap::with_capacity(events.len());
        for (pos, e) in events.iter().enumerate() {
            if index.insert(e.event_id, pos).is_some() {
                return Err(CascadeError::DuplicateEventId(e.event_id));
            }
        }

        let mut root: Option<u64> = None;
        for e in &events {
            match e.parent {
                None => {
                    if let Some(first) = root {
                        return Err(CascadeError::MultipleRoots(first, e.event_id));
                    }
                    root = Some(e.event_id);
                }
                Some(p) => {
                    let Some(&ppos) = index.get(&p) else {
                        return Err(CascadeError::DanglingParent {
                            event: e.event_id,
                            parent: p,
                        });
                    };
                    if ppos >= index[&e.event_id] {
                        return Err(CascadeError::ParentNotEarlier {
                            event: e.event_id,
                            parent: p,
                        });
                    }
                }
            }
        }
        if root.is_none() {
            return Err(CascadeError::NoRoot);
        }
        // every parent precedes its child, so the root is events[0]
        debug_assert!(events[0].is_root());

        let mut seen = HashSet::with_capacity(events.len());
        for e in &events {
            if !seen.insert(e.user) {
                return Err(CascadeError::DuplicateUser {
                    user: e.user,
                    event: e.event_id,
                });
            }
        }

        Ok(Cascade {
            message_id,
            has_url,
            is_hot_event,
            events,
            index,
        })
    }

    /// Builds a cascade from its wire form. Repeat events by the same user
    /// keep only the earliest; the number dropped is returned alongside.
    pub fn from_raw(raw: RawCascade) -> Result<(Self, usize), CascadeError> {
        let mut events: Vec<ForwardEvent> = raw
            .events
            .iter()
            .map(|e| ForwardEvent {
                event_id: e.event_id,
                user: e.user_id,
                time: e.time,
                parent: e.parent_event_id,
            })
            .collect();
        events.sort_unstable_by_key(ForwardEvent::key);

        let mut seen_users: HashSet<UserId> = HashSet::new();
        let mut dropped: HashSet<u64> = HashSet::new();
        for e in &events {
            if !seen_users.insert(e.user) {
                dropped.insert(e.event_id);
            }
        }
        if !dropped.is_empty() {
            // a cited repeat cannot be removed without rewriting the tree
            if let Some(e) = events.iter().find(|e| {
                e.parent.is_some_and(|p| dropped.contains(&p)) && !dropped.contains(&e.event_id)
            }) {
                let p = e.parent.unwrap_or_default();
                let user = events
                    .iter()
                    .find(|x| x.event_id == p)
                    .map(|x| x.user)
                    .unwrap_or_default();
                return Err(CascadeError::DuplicateUser { user, event: p });
            }
            events.retain(|e| !dropped.contains(&e.event_id));
        }
        let n = dropped.len();
        Cascade::new(raw.message_id, raw.has_url, raw.is_hot_event, events).map(|c| (c, n))
    }

    pub fn to_raw(&self) -> RawCascade {
        RawCascade {
            message_id: self.message_id,
            has_url: self.has_url,
            is_hot_event: self.is_hot_event,
            events: self
                .events
                .iter()
                .map(|e| RawEvent {
                    event_id: e.event_id,
                    user_id: e.user,
                    time: e.time,
                    parent_event_id: e.parent,
                })
                .collect(),
        }
    }

    pub fn message_id(&self) -> u64 {
        self.message_id
    }

    pub fn has_url(&self) -> bool {
        self.has_url
    }

    pub fn is_hot_event(&self) -> bool {
        self.is_hot_event
    }

    /// Events in canonical order; `events()[0]` is the original post.
    pub fn events(&self) -> &[ForwardEvent] {
        &self.events
    }

    pub fn root(&self) -> &ForwardEvent {
        &self.events[0]
    }

    pub fn author(&self) -> UserId {
        self.events[0].user
    }

    pub fn root_time(&self) -> i64 {
        self.events[0].time
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn forward_count(&self) -> usize {
        self.events.len() - 1
    }

    pub fn event(&self, event_id: u64) -> Option<&ForwardEvent> {
        self.index.get(&event_id).map(|&i| &self.events[i])
    }

    /// The event posted by `user`, if any.
    pub fn event_of(&self, user: UserId) -> Option<&ForwardEvent> {
        self.events.iter().find(|e| e.user == user)
    }

    /// Number of parent hops from `event_id` to the original post.
    pub fn depth(&self, event_id: u64) -> Option<usize> {
        let mut e = self.event(event_id)?;
        let mut depth = 0;
        while let Some(p) = e.parent {
            e = self.event(p)?;
            depth += 1;
        }
        Some(depth)
    }

    /// Number of forwards (not counting the original post) strictly before
    /// `t`.
    pub fn popularity_at(&self, t: i64) -> usize {
        let before = self.events.partition_point(|e| e.time < t);
        // the root is the earliest event, so it is inside `before` whenever
        // anything is
        before.saturating_sub(1)
    }
}

/// Wire form of one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCascade {
    pub message_id: u64,
    #[serde(serialize_with = "ser_flag", deserialize_with = "de_flag")]
    pub has_url: bool,
    #[serde(serialize_with = "ser_flag", deserialize_with = "de_flag")]
    pub is_hot_event: bool,
    pub events: Vec<RawEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub event_id: u64,
    pub user_id: UserId,
    pub time: i64,
    pub parent_event_id: Option<u64>,
}

fn ser_flag<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

fn de_flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Int(u64),
        Bool(bool),
    }
    match Flag::deserialize(d)? {
        Flag::Int(0) | Flag::Bool(false) => Ok(false),
        Flag::Int(1) | Flag::Bool(true) => Ok(true),
        Flag::Int(n) => Err(serde::de::Error::custom(format!(
            "flag must be 0 or 1, got {n}"
        ))),
    }
}

/// A cascade line that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub message_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct CascadeLoad {
    pub cascades: Vec<Cascade>,
    pub rejected: Vec<Rejection>,
    pub repeat_forwards_dropped: usize,
}

/// Reads cascade JSONL. Malformed JSON aborts with the line number; cascades
/// that parse but break an invariant are skipped and reported.
pub fn read_cascades<R: Read>(reader: R) -> Result<CascadeLoad> {
    let mut out = CascadeLoad::default();
    let mut seen_messages = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCascade =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let message_id = raw.message_id;
        if !seen_messages.insert(message_id) {
            out.rejected.push(Rejection {
                line: lineno,
                message_id,
                reason: format!("duplicate message_id {message_id}"),
            });
            continue;
        }
        match Cascade::from_raw(raw) {
            Ok((c, dropped)) => {
                out.repeat_forwards_dropped += dropped;
                out.cascades.push(c);
            }
            Err(e) => out.rejected.push(Rejection {
                line: lineno,
                message_id,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn load_cascades(path: impl AsRef<Path>) -> Result<CascadeLoad> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let load = read_cascades(file).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    for r in &load.rejected {
        log::warn!(
            "{}:{}: message {} rejected: {}",
            path.display(),
            r.line,
            r.message_id,
            r.reason
        );
    }
    log::info!(
        "{}: {} cascades loaded, {} rejected",
        path.display(),
        load.cascades.len(),
        load.rejected.len()
    );
    Ok(load)
}

pub fn write_cascades<W: Write>(writer: W, cascades: &[Cascade]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for c in cascades {
        serde_json::to_writer(&mut w, &c.to_raw())?;
        w.write_all(b"\n").map_err(|e| Error::io("<cascades>", e))?;
    }
    w.flush().map_err(|e| Error::io("<cascades>", e))
}

pub fn save_cascades(path: impl AsRef<Path>, cascades: &[Cascade]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cascades(file, cascades)
}
