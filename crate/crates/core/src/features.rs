//! The 16 choice features.
//!
//! | # | feature | group (table) |
//! |---|---------|---------------|
//! | 1 | message carries a URL | content |
//! | 2 | message relates to a hot event | content |
//! | 3 | popularity bucket before Jim's forward | content |
//! | 4 | Bob follows Jim | structural |
//! | 5 | Jim follows Bob | structural |
//! | 6 | Bob follows Allen | structural |
//! | 7 | Jim follows Allen | structural |
//! | 8 | in-degree Jim > Bob | structural |
//! | 9 | in-degree Jim > Allen | structural |
//! | 10 | in-degree Bob > Allen | structural |
//! | 11 | Bob is the original poster | temporal |
//! | 12 | hours between Bob and Jim | temporal |
//! | 13 | mean hours between consecutive events up to Jim | temporal |
//! | 14 | original post in local 10:00-22:00 | history |
//! | 15 | Allen has forwarded Bob before | history |
//! | 16 | Allen has forwarded Jim before | history |

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, ForwardEvent};
use crate::error::{Error, Result};
use crate::exposure::ChoiceInstance;
use crate::graph::{FollowGraph, UserId};
use crate::par;

pub const N_FEATURES: usize = 16;

/// Feature indices that are real-valued (hours); everything else is binary
/// or the popularity bucket.
pub const CONTINUOUS: [usize; 2] = [12, 13];

/// Default local-time offset of the original post, in hours.
pub const DEFAULT_TZ_OFFSET_HOURS: f64 = 8.0;

/// Values `x_1..x_16`, addressed with 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector([f64; N_FEATURES]);

impl FeatureVector {
    pub fn new(values: [f64; N_FEATURES]) -> Self {
        FeatureVector(values)
    }

    /// Value of feature `index` (1-based).
    pub fn get(&self, index: usize) -> f64 {
        self.0[index - 1]
    }

    pub fn set(&mut self, index: usize, value: f64) {
        self.0[index - 1] = value;
    }

    pub fn values(&self) -> &[f64; N_FEATURES] {
        &self.0
    }

    /// Values of the given 1-based feature indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledVector {
    pub x: FeatureVector,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Content,
    Structural,
    Temporal,
    History,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [
        FeatureGroup::Content,
        FeatureGroup::Structural,
        FeatureGroup::Temporal,
        FeatureGroup::History,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Content => "Content",
            FeatureGroup::Structural => "Structural",
            FeatureGroup::Temporal => "Temporal",
            FeatureGroup::History => "History",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "content" => Ok(FeatureGroup::Content),
            "structural" => Ok(FeatureGroup::Structural),
            "temporal" => Ok(FeatureGroup::Temporal),
            "history" => Ok(FeatureGroup::History),
            _ => Err(Error::Config(format!("unknown feature group {name:?}"))),
        }
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Assignment of the 16 features to the four groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grouping {
    pub content: Vec<usize>,
    pub structural: Vec<usize>,
    pub temporal: Vec<usize>,
    pub history: Vec<usize>,
}

impl Grouping {
    /// Grouping of the feature table: original-poster flag under temporal,
    /// posting hour under history.
    pub fn table() -> Self {
        Grouping {
            content: vec![1, 2, 3],
            structural: (4..=10).collect(),
            temporal: vec![11, 12, 13],
            history: vec![14, 15, 16],
        }
    }

    /// Alternate reading: original-poster flag is structural and posting
    /// hour is temporal.
    pub fn prose() -> Self {
        Grouping {
            content: vec![1, 2, 3],
            structural: (4..=11).collect(),
            temporal: vec![12, 13, 14],
            history: vec![15, 16],
        }
    }

    /// `"table"`, `"prose"`, or a path to a JSON grouping file.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "table" => Ok(Self::table()),
            "prose" => Ok(Self::prose()),
            path => {
                let text = std::fs::read_to_string(path).map_err(|_| {
                    Error::Config(format!(
                        "grouping must be \"table\", \"prose\" or a JSON file, got {path:?}"
                    ))
                })?;
                Self::from_json(&text)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Grouping =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("grouping: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Every feature 1..=16 must sit in exactly one group. Groups may be
    /// empty.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; N_FEATURES];
        for g in FeatureGroup::ALL {
            for &i in self.members(g) {
                if !(1..=N_FEATURES).contains(&i) {
                    return Err(Error::Config(format!("feature index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i - 1], true) {
                    return Err(Error::Config(format!("feature {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("feature {} has no group", i + 1)));
        }
        Ok(())
    }

    pub fn members(&self, group: FeatureGroup) -> &[usize] {
        match group {
            FeatureGroup::Content => &self.content,
            FeatureGroup::Structural => &self.structural,
            FeatureGroup::Temporal => &self.temporal,
            FeatureGroup::History => &self.history,
        }
    }

    pub fn group_of(&self, index: usize) -> Option<FeatureGroup> {
        FeatureGroup::ALL
            .into_iter()
            .find(|&g| self.members(g).contains(&index))
    }

    /// Ascending feature indices outside the excluded groups.
    pub fn features_without(&self, excluded: &[FeatureGroup]) -> Vec<usize> {
        let mut out: Vec<usize> = FeatureGroup::ALL
            .into_iter()
            .filter(|g| !excluded.contains(g))
            .flat_map(|g| self.members(g).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

impl Default for Grouping {
    fn default() -> Self {
        Self::table()
    }
}

/// Who has forwarded whom. A pair `(forwarder, source)` is recorded when
/// `forwarder`'s event has a parent event posted by `source`, keyed by the
/// earliest original-post time of a cascade where that happened.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryIndex {
    first_seen: HashMap<(UserId, UserId), i64>,
}

impl HistoryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index over the cascades whose original post is strictly before
    /// `before`.
    pub fn build(cascades: &[Cascade], before: i64) -> Self {
        let mut idx = Self::new();
        for c in cascades.iter().filter(|c| c.root_time() < before) {
            idx.add_cascade(c);
        }
        idx
    }

    pub fn add_cascade(&mut self, c: &Cascade) {
        self.add_events(c.root_time(), c.events());
    }

    /// Records the parent links among `events` (canonical order, root
    /// first) for a cascade rooted at `root_time`.
    pub fn add_events(&mut self, root_time: i64, events: &[ForwardEvent]) {
        let by_id: HashMap<u64, UserId> = events.iter().map(|e| (e.event_id, e.user)).collect();
        for e in events {
            let Some(source) = e.parent.and_then(|p| by_id.get(&p)) else {
                continue;
            };
            self.first_seen
                .entry((e.user, *source))
                .and_modify(|t| *t = (*t).min(root_time))
                .or_insert(root_time);
        }
    }

    pub fn has_forwarded(&self, forwarder: UserId, source: UserId) -> bool {
        self.first_seen.contains_key(&(forwarder, source))
    }

    /// Whether the pair occurred in a cascade rooted strictly before `t`.
    pub fn has_forwarded_before(&self, forwarder: UserId, source: UserId, t: i64) -> bool {
        self.first_seen
            .get(&(forwarder, source))
            .is_some_and(|&first| first < t)
    }

    pub fn pairs(&self) -> BTreeSet<(UserId, UserId)> {
        self.first_seen.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.first_seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_seen.is_empty()
    }
}

pub fn build_history_index(cascades: &[Cascade], before: i64) -> HistoryIndex {
    HistoryIndex::build(cascades, before)
}

/// The message-level inputs a feature vector depends on. `events` must be
/// canonical and contain at least everything up to Jim's event.
#[derive(Debug, Clone, Copy)]
pub struct MessageView<'a> {
    pub has_url: bool,
    pub is_hot_event: bool,
    pub events: &'a [ForwardEvent],
}

impl<'a> From<&'a Cascade> for MessageView<'a> {
    fn from(c: &'a Cascade) -> Self {
        MessageView {
            has_url: c.has_url(),
            is_hot_event: c.is_hot_event(),
            events: c.events(),
        }
    }
}

/// Popularity bucket: `[0,10)`, `[10,100)`, `[100,1000)`, `[1000,10000)`,
/// `[10000,∞)` map to 0..=4.
pub fn popularity_bucket(popularity: usize) -> u8 {
    match popularity {
        0..=9 => 0,
        10..=99 => 1,
        100..=999 => 2,
        1000..=9999 => 3,
        _ => 4,
    }
}

/// Local hour-of-day is in the 10:00-22:00 active window.
pub fn in_active_window(epoch_secs: i64, tz_offset_hours: f64) -> bool {
    let offset = (tz_offset_hours * 3600.0).round() as i64;
    let secs_of_day = (epoch_secs + offset).rem_euclid(86_400);
    (10 * 3600..22 * 3600).contains(&secs_of_day)
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Computes the feature vector without integrity checks.
pub fn compute_features(
    msg: MessageView<'_>,
    bob: &ForwardEvent,
    jim: &ForwardEvent,
    allen: UserId,
    g: &FollowGraph,
    history: &HistoryIndex,
    tz_offset_hours: f64,
) -> FeatureVector {
    let (b, j, a) = (bob.user, jim.user, allen);
    let t1 = bob.time;
    let t2 = jim.time;
    let root = &msg.events[0];
    let (deg_b, deg_j, deg_a) = (g.in_degree(b), g.in_degree(j), g.in_degree(a));

    let before_t2 = msg.events.partition_point(|e| e.time < t2);
    let popularity = before_t2.saturating_sub(1);
    let upto_t2 = msg.events.partition_point(|e| e.time <= t2);
    // consecutive gaps telescope: mean = span / (count - 1)
    let mean_gap_hours = if upto_t2 >= 2 {
        (msg.events[upto_t2 - 1].time - root.time) as f64 / 3600.0 / (upto_t2 - 1) as f64
    } else {
        0.0
    };

    let mut x = [0.0; N_FEATURES];
    x[0] = flag(msg.has_url);
    x[1] = flag(msg.is_hot_event);
    x[2] = f64::from(popularity_bucket(popularity));
    x[3] = flag(g.follows(b, j));
    x[4] = flag(g.follows(j, b));
    x[5] = flag(g.follows(b, a));
    x[6] = flag(g.follows(j, a));
    x[7] = flag(deg_j > deg_b);
    x[8] = flag(deg_j > deg_a);
    x[9] = flag(deg_b > deg_a);
    x[10] = flag(bob.is_root());
    x[11] = (t2 - t1) as f64 / 3600.0;
    x[12] = mean_gap_hours;
    x[13] = flag(in_active_window(root.time, tz_offset_hours));
    x[14] = flag(history.has_forwarded_before(a, b, root.time));
    x[15] = flag(history.has_forwarded_before(a, j, root.time));
    FeatureVector(x)
}

/// Feature vector of one extracted instance.
///
/// `history` may contain pairs from any cascade; only those rooted strictly
/// before `c` are consulted.
pub fn featurize(
    inst: &ChoiceInstance,
    g: &FollowGraph,
    c: &Cascade,
    history: &HistoryIndex,
    tz_offset_hours: f64,
) -> Result<FeatureVector> {
    if inst.message_id != c.message_id() {
        return Err(Error::Integrity(format!(
            "instance for message {} paired with cascade {}",
            inst.message_id,
            c.message_id()
        )));
    }
    for (role, e) in [
        ("bob", &inst.bob_event),
        ("jim", &inst.jim_event),
        ("allen", &inst.allen_event),
    ] {
        if c.event(e.event_id) != Some(e) {
            return Err(Error::Integrity(format!(
                "message {}: {role} event {} not in cascade",
                inst.message_id, e.event_id
            )));
        }
    }
    if inst.bob_event.key() > inst.jim_event.key() {
        return Err(Error::Integrity(format!(
            "message {}: bob event {} is after jim event {}",
            inst.message_id, inst.bob_event.event_id, inst.jim_event.event_id
        )));
    }
    for source in [inst.bob(), inst.jim()] {
        if !g.follows(inst.allen, source) {
            return Err(Error::Integrity(format!(
                "message {}: user {} does not follow exposure source {source}",
                inst.message_id, inst.allen
            )));
        }
    }
    Ok(compute_features(
        c.into(),
        &inst.bob_event,
        &inst.jim_event,
        inst.allen,
        g,
        history,
        tz_offset_hours,
    ))
}

/// Featurizes every instance, looking cascades up by message id. Output
/// order follows `instances`.
pub fn featurize_all(
    instances: &[ChoiceInstance],
    g: &FollowGraph,
    cascades: &[Cascade],
    history: &HistoryIndex,
    tz_offset_hours: f64,
) -> Result<Vec<LabeledVector>> {
    let by_id: HashMap<u64, &Cascade> = cascades.iter().map(|c| (c.message_id(), c)).collect();
    par::map(instances, |inst| {
        let c = by_id.get(&inst.message_id).ok_or_else(|| {
            Error::Integrity(format!("no cascade for message {}", inst.message_id))
        })?;
        let x = featurize(inst, g, c, history, tz_offset_hours)?;
        Ok(LabeledVector {
            x,
            label: inst.label,
        })
    })
    .into_iter()
    .collect()
}

pub fn feature_header() -> String {
    let mut h = String::from("label");
    for i in 1..=N_FEATURES {
        h.push_str(&format!("\tf{i}"));
    }
    h
}

/// The value a feature file stores for `v` (6 decimals).
pub fn as_written(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

impl LabeledVector {
    /// This vector as it reads back from a feature file.
    pub fn as_written(&self) -> Self {
        let mut x = self.x;
        for i in 1..=N_FEATURES {
            x.set(i, as_written(x.get(i)));
        }
        LabeledVector {
            x,
            label: self.label,
        }
    }
}

pub fn write_features<W: Write>(writer: W, data: &[LabeledVector]) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{}", feature_header())?;
    for row in data {
        write!(w, "{}", row.label)?;
        for v in row.x.values() {
            write!(w, "\t{v:.6}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn save_features(path: impl AsRef<Path>, data: &[LabeledVector]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(file, data).map_err(|e| Error::io(path, e))
}

pub fn read_features<R: Read>(reader: R) -> Result<Vec<LabeledVector>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with("label") || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != N_FEATURES + 1 {
            return Err(Error::parse(
                lineno,
                format!("expected {} columns, got {}", N_FEATURES + 1, fields.len()),
            ));
        }
        let label = match fields[0].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::parse(
                    lineno,
                    format!("label must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let mut x = [0.0; N_FEATURES];
        for (slot, f) in x.iter_mut().zip(&fields[1..]) {
            *slot = f
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(lineno, format!("invalid value {f:?}")))?;
        }
        out.push(LabeledVector {
            x: FeatureVector(x),
            label,
        });
    }
    Ok(out)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<LabeledVector>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(file)
}
