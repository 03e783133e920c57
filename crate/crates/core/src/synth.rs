//! Seeded synthetic data: follow graphs, cascades with a planted logistic
//! choice rule, and directly sampled labeled feature vectors.
//!
//! Every generator is a pure function of its [`SynthConfig`]. Independent
//! pieces draw from their own ChaCha stream (`seed`, stream id), so output
//! does not depend on thread count.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, ForwardEvent};
use crate::error::{Error, Result};
use crate::features::{
    compute_features, FeatureVector, HistoryIndex, LabeledVector, MessageView, N_FEATURES,
};
use crate::graph::{FollowGraph, UserId};
use crate::model::sigmoid;
use crate::par;

const GRAPH_STREAM: u64 = 0;
const ROOT_TIME_STREAM: u64 = 1;
const CASCADE_STREAM_BASE: u64 = 1 << 20;
const INSTANCE_STREAM_BASE: u64 = 1 << 40;
const INSTANCE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GraphModel {
    /// Each ordered pair is an edge independently with probability
    /// `edge_prob`.
    Uniform { edge_prob: f64 },
    /// Users arrive in id order; each follows `out_degree` earlier users
    /// chosen with probability proportional to in-degree + 1. Every such
    /// edge is reciprocated with probability `reciprocity`.
    PreferentialAttachment { out_degree: usize, reciprocity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub graph: GraphModel,
    pub n_cascades: usize,
    /// Probability that a user forwards once they react.
    pub forward_prob: f64,
    /// Rate (per hour) of the exponential reaction delay after a user's
    /// first exposure.
    pub delay_rate: f64,
    /// Reactions stop once a cascade reaches this many events.
    pub max_events: usize,
    /// Original posts are spread uniformly over `[start_time, start_time +
    /// span_days)`.
    pub start_time: i64,
    pub span_days: f64,
    /// `[β₀, β₁, …, β₁₆]` on raw feature values.
    pub planted_beta: [f64; N_FEATURES + 1],
    pub url_prob: f64,
    pub hot_prob: f64,
    /// Marginal of the binary features in [`sample_instances`].
    pub binary_prob: f64,
    pub tz_offset_hours: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_users: 5000,
            graph: GraphModel::PreferentialAttachment {
                out_degree: 10,
                reciprocity: 0.3,
            },
            n_cascades: 2000,
            forward_prob: 0.1,
            delay_rate: 1.0,
            max_events: 400,
            start_time: 1_309_478_400, // 2011-07-01T00:00:00Z
            span_days: 62.0,
            planted_beta: structural_beta(),
            url_prob: 0.3,
            hot_prob: 0.2,
            binary_prob: 0.5,
            tz_offset_hours: crate::features::DEFAULT_TZ_OFFSET_HOURS,
        }
    }
}

/// Planted weights dominated by the structural features, with weaker
/// content signal and little else.
pub fn structural_beta() -> [f64; N_FEATURES + 1] {
    [
        0.0, // intercept
        0.4, -0.3, 0.3, // content
        1.2, -1.2, -1.5, 1.5, 2.0, 1.0, -1.0, // structural
        -0.2, 0.02, 0.0, // temporal
        0.1, -0.2, 0.2, // history
    ]
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("forward_prob", self.forward_prob)?;
        prob("url_prob", self.url_prob)?;
        prob("hot_prob", self.hot_prob)?;
        prob("binary_prob", self.binary_prob)?;
        match self.graph {
            GraphModel::Uniform { edge_prob } => prob("edge_prob", edge_prob)?,
            GraphModel::PreferentialAttachment {
                out_degree,
                reciprocity,
            } => {
                prob("reciprocity", reciprocity)?;
                if out_degree == 0 {
                    return Err(Error::Config("out_degree must be at least 1".into()));
                }
            }
        }
        if self.n_users == 0 {
            return Err(Error::Config("n_users must be at least 1".into()));
        }
        if !(self.delay_rate > 0.0 && self.delay_rate.is_finite()) {
            return Err(Error::Config(format!(
                "delay_rate must be positive, got {}",
                self.delay_rate
            )));
        }
        if !(self.span_days >= 0.0 && self.span_days.is_finite()) {
            return Err(Error::Config(format!(
                "span_days must be non-negative, got {}",
                self.span_days
            )));
        }
        if self.planted_beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("planted_beta must be finite".into()));
        }
        if self.max_events == 0 {
            return Err(Error::Config("max_events must be at least 1".into()));
        }
        Ok(())
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    fn planted_eta(&self, x: &FeatureVector) -> f64 {
        let b = &self.planted_beta;
        (1..=N_FEATURES).fold(b[0], |acc, i| acc + b[i] * x.get(i))
    }
}

/// Follow graph over users `0..n_users`.
pub fn generate_graph(cfg: &SynthConfig) -> Result<FollowGraph> {
    cfg.validate()?;
    let mut rng = cfg.stream(GRAPH_STREAM);
    let n = cfg.n_users as u64;
    let mut edges: Vec<(UserId, UserId)> = Vec::new();
    match cfg.graph {
        GraphModel::Uniform { edge_prob } => {
            // geometric skipping over the n(n-1) ordered non-self pairs
            let total = n * n.saturating_sub(1);
            if edge_prob > 0.0 && total > 0 {
                let log_q = (1.0 - edge_prob).ln();
                let mut k: u64 = 0;
                loop {
                    if edge_prob < 1.0 {
                        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
                        let skip = (u.ln() / log_q).floor();
                        if skip >= (total - k) as f64 {
                            break;
                        }
                        k += skip as u64;
                    }
                    if k >= total {
                        break;
                    }
                    let a = k / (n - 1);
                    let r = k % (n - 1);
                    let b = if r >= a { r + 1 } else { r };
                    edges.push((UserId(a), UserId(b)));
                    k += 1;
                }
            }
        }
        GraphModel::PreferentialAttachment {
            out_degree,
            reciprocity,
        } => {
            // each user appears once, plus once per follower gained
            let mut pool: Vec<u64> = Vec::with_capacity(cfg.n_users * (out_degree + 1));
            let mut chosen = HashSet::with_capacity(out_degree);
            for v in 0..n {
                chosen.clear();
                if (v as usize) <= out_degree {
                    chosen.extend(0..v);
                } else {
                    while chosen.len() < out_degree {
                        chosen.insert(pool[rng.random_range(0..pool.len())]);
                    }
                }
                let mut targets: Vec<u64> = chosen.iter().copied().collect();
                targets.sort_unstable();
                for t in targets {
                    edges.push((UserId(v), UserId(t)));
                    pool.push(t);
                    if rng.random_bool(reciprocity) {
                        edges.push((UserId(t), UserId(v)));
                    }
                }
                pool.push(v);
            }
        }
    }
    Ok(FollowGraph::from_edges(edges).0)
}

fn delay_secs(rng: &mut ChaCha8Rng, delay: &Exp<f64>) -> i64 {
    let hours: f64 = delay.sample(rng);
    ((hours * 3600.0).ceil() as i64).max(1)
}

/// Simulates one cascade. Followers of each poster are exposed at the
/// posting time; a user reacts once, an exponential delay after their
/// first exposure or no later than their third exposure, and
/// forwards with probability `forward_prob`. With one
/// prior exposure the forward cites it; with two or more it cites Jim (the
/// second) with the planted logistic probability, Bob (the first)
/// otherwise.
#[allow(clippy::too_many_arguments)]
fn simulate_one(
    g: &FollowGraph,
    cfg: &SynthConfig,
    history: &HistoryIndex,
    message_id: u64,
    root_time: i64,
    author: UserId,
    rng: &mut ChaCha8Rng,
) -> Cascade {
    let delay = Exp::new(cfg.delay_rate).expect("validated delay rate");
    let has_url = rng.random_bool(cfg.url_prob);
    let is_hot_event = rng.random_bool(cfg.hot_prob);

    let mut events = vec![ForwardEvent {
        event_id: 0,
        user: author,
        time: root_time,
        parent: None,
    }];
    let mut exposures: HashMap<UserId, Vec<ForwardEvent>> = HashMap::new();
    // scheduled reaction time of each exposed, undecided user
    let mut pending: HashMap<UserId, i64> = HashMap::new();
    let mut decided: HashSet<UserId> = HashSet::from([author]);
    let mut queue: BinaryHeap<Reverse<(i64, u64, UserId)>> = BinaryHeap::new();
    let mut seq = 0u64;

    // A third exposure pulls the reaction forward to its own time, so the
    // decision never sees more than two exposures.
    let mut expose = |e: ForwardEvent,
                      exposures: &mut HashMap<UserId, Vec<ForwardEvent>>,
                      pending: &mut HashMap<UserId, i64>,
                      decided: &HashSet<UserId>,
                      queue: &mut BinaryHeap<Reverse<(i64, u64, UserId)>>,
                      rng: &mut ChaCha8Rng| {
        for &f in g.followers(e.user) {
            if decided.contains(&f) {
                continue;
            }
            let list = exposures.entry(f).or_default();
            list.push(e);
            let at = match list.len() {
                1 => e.time + delay_secs(rng, &delay),
                3 if pending[&f] > e.time => e.time,
                _ => continue,
            };
            pending.insert(f, at);
            queue.push(Reverse((at, seq, f)));
            seq += 1;
        }
    };
    expose(
        events[0],
        &mut exposures,
        &mut pending,
        &decided,
        &mut queue,
        rng,
    );

    while let Some(Reverse((t, _, user))) = queue.pop() {
        if pending.get(&user) != Some(&t) || decided.contains(&user) {
            continue; // superseded
        }
        if events.len() >= cfg.max_events {
            break;
        }
        decided.insert(user);
        if !rng.random_bool(cfg.forward_prob) {
            continue;
        }
        let seen = &exposures[&user];
        let visible = seen.partition_point(|e| e.time < t);
        let parent = match &seen[..visible] {
            [] => continue,
            [only] => *only,
            [bob, jim, ..] => {
                let msg = MessageView {
                    has_url,
                    is_hot_event,
                    events: &events,
                };
                let x = compute_features(msg, bob, jim, user, g, history, cfg.tz_offset_hours);
                if rng.random_bool(sigmoid(cfg.planted_eta(&x))) {
                    *jim
                } else {
                    *bob
                }
            }
        };
        let e = ForwardEvent {
            event_id: events.len() as u64,
            user,
            time: t,
            parent: Some(parent.event_id),
        };
        events.push(e);
        expose(e, &mut exposures, &mut pending, &decided, &mut queue, rng);
    }

    Cascade::new(message_id, has_url, is_hot_event, events).expect("simulator emits valid cascades")
}

/// Simulates `n_cascades` cascades on `g`, ordered by original-post time
/// with `message_id` equal to that rank.
///
/// Cascades are generated in time order so each one sees the forwarding
/// history of all earlier ones, which the planted rule needs for the
/// history features. Each cascade still draws from its own stream.
pub fn simulate_cascades(g: &FollowGraph, cfg: &SynthConfig) -> Result<Vec<Cascade>> {
    cfg.validate()?;
    let users = g.users();
    if users.is_empty() {
        return Err(Error::Config(
            "cannot simulate cascades on an empty graph".into(),
        ));
    }
    let mut rng = cfg.stream(ROOT_TIME_STREAM);
    let span = (cfg.span_days * 86_400.0) as i64;
    let mut root_times: Vec<i64> = (0..cfg.n_cascades)
        .map(|_| {
            cfg.start_time
                + if span > 0 {
                    rng.random_range(0..span)
                } else {
                    0
                }
        })
        .collect();
    root_times.sort_unstable();

    let mut history = HistoryIndex::new();
    let mut cascades = Vec::with_capacity(cfg.n_cascades);
    for (k, &root_time) in root_times.iter().enumerate() {
        let mut rng = cfg.stream(CASCADE_STREAM_BASE + k as u64);
        let author = users[rng.random_range(0..users.len())];
        let c = simulate_one(g, cfg, &history, k as u64, root_time, author, &mut rng);
        history.add_cascade(&c);
        cascades.push(c);
    }
    Ok(cascades)
}

const POPULARITY_WEIGHTS: [f64; 5] = [0.5, 0.25, 0.15, 0.07, 0.03];

fn sample_vector(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> LabeledVector {
    let gap = Exp::new(cfg.delay_rate).expect("validated delay rate");
    let mean_gap = Exp::new(2.0 * cfg.delay_rate).expect("validated delay rate");
    let bern = |rng: &mut ChaCha8Rng, p: f64| f64::from(u8::from(rng.random_bool(p)));

    let mut x = FeatureVector::default();
    x.set(1, bern(rng, cfg.url_prob));
    x.set(2, bern(rng, cfg.hot_prob));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut bucket = POPULARITY_WEIGHTS.len() - 1;
    for (b, w) in POPULARITY_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            bucket = b;
            break;
        }
    }
    x.set(3, bucket as f64);
    for i in 4..=11 {
        x.set(i, bern(rng, cfg.binary_prob));
    }
    x.set(12, gap.sample(rng));
    x.set(13, mean_gap.sample(rng));
    for i in 14..=16 {
        x.set(i, bern(rng, cfg.binary_prob));
    }
    let label = u8::from(rng.random_bool(sigmoid(cfg.planted_eta(&x))));
    LabeledVector { x, label }
}

/// `n` i.i.d. labeled vectors: features from fixed marginals, label drawn
/// from the planted logistic model.
pub fn sample_instances(cfg: &SynthConfig, n: usize) -> Result<Vec<LabeledVector>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Contract("sample_instances needs n >= 1".into()));
    }
    let chunks = n.div_ceil(INSTANCE_CHUNK);
    let parts = par::map_range(chunks, |k| {
        let mut rng = cfg.stream(INSTANCE_STREAM_BASE + k as u64);
        let len = INSTANCE_CHUNK.min(n - k * INSTANCE_CHUNK);
        (0..len)
            .map(|_| sample_vector(cfg, &mut rng))
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}
