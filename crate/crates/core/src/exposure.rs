//! Exposure reconstruction and two-exposure choice instances.
//!
//! Every event of a cascade, the original post included, exposes the
//! message once to each follower of the posting user. Exposures are counted
//! up to (strictly before) the user's own forward; later ones are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::cascade::{Cascade, ForwardEvent};
use crate::error::{Error, Result};
use crate::graph::{FollowGraph, UserId};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposureRecord {
    pub user: UserId,
    pub message_id: u64,
    /// Events by followees of `user`, canonical order, truncated strictly
    /// before `forwarded_at.time`.
    pub exposures: Vec<ForwardEvent>,
    pub forwarded_at: Option<ForwardEvent>,
}

impl ExposureRecord {
    pub fn count(&self) -> usize {
        self.exposures.len()
    }
}

/// Exposure records for one cascade, sorted by user. Users with no
/// exposure left after truncation are omitted.
pub fn compute_exposures(g: &FollowGraph, c: &Cascade) -> Vec<ExposureRecord> {
    let own: HashMap<UserId, &ForwardEvent> = c.events().iter().map(|e| (e.user, e)).collect();
    let mut by_user: BTreeMap<UserId, Vec<ForwardEvent>> = BTreeMap::new();
    for e in c.events() {
        for &f in g.followers(e.user) {
            if own.get(&f).is_some_and(|o| e.time >= o.time) {
                continue;
            }
            by_user.entry(f).or_default().push(*e);
        }
    }
    by_user
        .into_iter()
        .map(|(user, exposures)| ExposureRecord {
            user,
            message_id: c.message_id(),
            exposures,
            forwarded_at: own.get(&user).map(|e| **e),
        })
        .collect()
}

/// `compute_exposures` over many cascades, in input order.
pub fn compute_exposures_batch(g: &FollowGraph, cascades: &[Cascade]) -> Vec<Vec<ExposureRecord>> {
    par::map(cascades, |c| compute_exposures(g, c))
}

/// `W(k)`: number of `(user, message)` pairs with exactly `k` exposures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExposureDistribution {
    pub counts: BTreeMap<usize, u64>,
}

impl ExposureDistribution {
    pub fn from_records<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a ExposureRecord>,
    {
        let mut dist = Self::default();
        for r in records {
            if r.count() > 0 {
                *dist.counts.entry(r.count()).or_default() += 1;
            }
        }
        dist
    }

    pub fn for_cascades(g: &FollowGraph, cascades: &[Cascade]) -> Self {
        let partial = par::map(cascades, |c| {
            ExposureDistribution::from_records(&compute_exposures(g, c))
        });
        let mut dist = Self::default();
        for p in partial {
            dist.merge(&p);
        }
        dist
    }

    pub fn merge(&mut self, other: &Self) {
        for (&k, &n) in &other.counts {
            *self.counts.entry(k).or_default() += n;
        }
    }

    pub fn get(&self, k: usize) -> u64 {
        self.counts.get(&k).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Writes `k<TAB>W(k)` lines, ascending `k`, under a `k\tW(k)` header.
    pub fn write_tsv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(writer);
        writeln!(w, "k\tW(k)")?;
        for (k, n) in &self.counts {
            writeln!(w, "{k}\t{n}")?;
        }
        w.flush()
    }
}

pub fn exposure_distribution(records: &[ExposureRecord]) -> ExposureDistribution {
    ExposureDistribution::from_records(records)
}

/// A user exposed exactly twice who forwarded one of the two sources.
///
/// Bob is the earlier exposure, Jim the later; `label` is 1 when Allen
/// forwarded Jim's event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChoiceInstance {
    pub message_id: u64,
    /// Original post time of the cascade, used for temporal splitting.
    pub root_time: i64,
    pub allen: UserId,
    pub bob_event: ForwardEvent,
    pub jim_event: ForwardEvent,
    pub allen_event: ForwardEvent,
    pub label: u8,
    /// Bob and Jim posted at the same second; roles fell back to event id.
    pub tied: bool,
}

impl ChoiceInstance {
    pub fn bob(&self) -> UserId {
        self.bob_event.user
    }

    pub fn jim(&self) -> UserId {
        self.jim_event.user
    }
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub instances: Vec<ChoiceInstance>,
    /// Two-exposure forwarders whose parent was neither exposure.
    pub parent_mismatch: usize,
}

/// Choice instances contained in one cascade's exposure records.
pub fn instances_from_records(
    c: &Cascade,
    records: &[ExposureRecord],
) -> (Vec<ChoiceInstance>, usize) {
    let mut out = Vec::new();
    let mut mismatch = 0;
    for r in records {
        let (Some(own), [bob, jim]) = (r.forwarded_at, r.exposures.as_slice()) else {
            continue;
        };
        let label = match own.parent {
            Some(p) if p == jim.event_id => 1,
            Some(p) if p == bob.event_id => 0,
            _ => {
                mismatch += 1;
                continue;
            }
        };
        out.push(ChoiceInstance {
            message_id: c.message_id(),
            root_time: c.root_time(),
            allen: r.user,
            bob_event: *bob,
            jim_event: *jim,
            allen_event: own,
            label,
            tied: bob.time == jim.time,
        });
    }
    (out, mismatch)
}

/// Extracts every two-exposure choice instance, sorted by
/// `(message_id, allen)`.
pub fn extract_instances(g: &FollowGraph, cascades: &[Cascade]) -> Extraction {
    let per_cascade = par::map(cascades, |c| {
        instances_from_records(c, &compute_exposures(g, c))
    });
    let mut ex = Extraction::default();
    for (inst, mismatch) in per_cascade {
        ex.instances.extend(inst);
        ex.parent_mismatch += mismatch;
    }
    ex.instances.sort_by_key(|i| (i.message_id, i.allen));
    ex
}

const INSTANCE_HEADER: &str =
    "message_id\tallen\tbob_event_id\tjim_event_id\tallen_event_id\tlabel";

pub fn write_instances<W: Write>(writer: W, instances: &[ChoiceInstance]) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{INSTANCE_HEADER}")?;
    for i in instances {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            i.message_id,
            i.allen,
            i.bob_event.event_id,
            i.jim_event.event_id,
            i.allen_event.event_id,
            i.label
        )?;
    }
    w.flush()
}

pub fn save_instances(path: impl AsRef<Path>, instances: &[ChoiceInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_instances(file, instances).map_err(|e| Error::io(path, e))
}

/// One parsed row of the instances file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceRow {
    pub message_id: u64,
    pub allen: UserId,
    pub bob_event_id: u64,
    pub jim_event_id: u64,
    pub allen_event_id: u64,
    pub label: u8,
}

pub fn read_instances<R: Read>(reader: R) -> Result<Vec<InstanceRow>> {
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with("message_id") || line.starts_with('#') {
            continue;
        }
        let fields: Vec<u64> = line
            .split('\t')
            .map(|f| {
                f.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::parse(lineno, format!("invalid field {f:?}")))
            })
            .collect::<Result<_>>()?;
        let [message_id, allen, bob, jim, own, label] = fields[..] else {
            return Err(Error::parse(
                lineno,
                format!("expected 6 columns, got {}", fields.len()),
            ));
        };
        if label > 1 {
            return Err(Error::parse(
                lineno,
                format!("label must be 0 or 1, got {label}"),
            ));
        }
        rows.push(InstanceRow {
            message_id,
            allen: UserId(allen),
            bob_event_id: bob,
            jim_event_id: jim,
            allen_event_id: own,
            label: label as u8,
        });
    }
    Ok(rows)
}

/// Re-attaches instance rows to their cascades.
pub fn resolve_instances(
    rows: &[InstanceRow],
    cascades: &[Cascade],
) -> Result<Vec<ChoiceInstance>> {
    let by_id: HashMap<u64, &Cascade> = cascades.iter().map(|c| (c.message_id(), c)).collect();
    rows.iter()
        .map(|r| {
            let c = by_id.get(&r.message_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "instance references unknown message {}",
                    r.message_id
                ))
            })?;
            let get = |id: u64| {
                c.event(id).copied().ok_or_else(|| {
                    Error::Integrity(format!("message {}: unknown event {id}", r.message_id))
                })
            };
            let (bob, jim, own) = (
                get(r.bob_event_id)?,
                get(r.jim_event_id)?,
                get(r.allen_event_id)?,
            );
            if own.user != r.allen {
                return Err(Error::Integrity(format!(
                    "message {}: event {} belongs to {}, not {}",
                    r.message_id, own.event_id, own.user, r.allen
                )));
            }
            Ok(ChoiceInstance {
                message_id: r.message_id,
                root_time: c.root_time(),
                allen: r.allen,
                bob_event: bob,
                jim_event: jim,
                allen_event: own,
                label: r.label,
                tied: bob.time == jim.time,
            })
        })
        .collect()
}
