//! Static directed follow network.
//!
//! An edge `(follower, followee)` means `follower` sees everything
//! `followee` posts or forwards. The graph is built once and is read-only
//! afterwards.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque user identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for UserId {
    fn from(id: u64) -> Self {
        UserId(id)
    }
}

/// Counters reported while building a graph from raw edges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub lines: usize,
    pub edges: usize,
    pub users: usize,
    pub duplicates: usize,
    pub self_loops: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FollowGraph {
    // Adjacency lists are kept sorted and duplicate-free.
    out_adj: HashMap<UserId, Vec<UserId>>,
    in_adj: HashMap<UserId, Vec<UserId>>,
    edge_count: usize,
}

impl FollowGraph {
    /// Builds a graph from `(follower, followee)` pairs. Duplicates are
    /// stored once and self-loops are dropped; both are counted.
    pub fn from_edges<I>(edges: I) -> (Self, LoadStats)
    where
        I: IntoIterator<Item = (UserId, UserId)>,
    {
        let mut stats = LoadStats::default();
        let mut out_adj: HashMap<UserId, Vec<UserId>> = HashMap::new();
        let mut in_adj: HashMap<UserId, Vec<UserId>> = HashMap::new();
        for (a, b) in edges {
            stats.lines += 1;
            if a == b {
                stats.self_loops += 1;
                continue;
            }
            out_adj.entry(a).or_default().push(b);
            in_adj.entry(b).or_default().push(a);
        }
        let mut raw = 0;
        for list in out_adj.values_mut() {
            raw += list.len();
            list.sort_unstable();
            list.dedup();
        }
        for list in in_adj.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        let edge_count: usize = out_adj.values().map(Vec::len).sum();
        stats.duplicates = raw - edge_count;
        stats.edges = edge_count;
        let graph = FollowGraph {
            out_adj,
            in_adj,
            edge_count,
        };
        stats.users = graph.user_count();
        (graph, stats)
    }

    /// Reads an edge list: one `follower<TAB>followee` pair per line, `#`
    /// comments and blank lines ignored.
    pub fn read_edges<R: Read>(reader: R) -> Result<(Self, LoadStats)> {
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split_whitespace();
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::parse(
                    lineno,
                    format!("expected two ids, got {trimmed:?}"),
                ));
            };
            let parse = |s: &str| {
                s.parse::<u64>()
                    .map(UserId)
                    .map_err(|_| Error::parse(lineno, format!("invalid user id {s:?}")))
            };
            pairs.push((parse(a)?, parse(b)?));
        }
        Ok(Self::from_edges(pairs))
    }

    pub fn load_edges(path: impl AsRef<Path>) -> Result<(Self, LoadStats)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (graph, stats) = Self::read_edges(file).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        if stats.self_loops > 0 {
            log::warn!(
                "{}: dropped {} self-loop(s)",
                path.display(),
                stats.self_loops
            );
        }
        log::info!(
            "{}: {} users, {} edges ({} duplicates dropped)",
            path.display(),
            stats.users,
            stats.edges,
            stats.duplicates
        );
        Ok((graph, stats))
    }

    /// Writes the edge list sorted by `(follower, followee)`.
    pub fn write_edges<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(writer);
        for (a, b) in self.edges() {
            writeln!(w, "{a}\t{b}")?;
        }
        w.flush()
    }

    pub fn save_edges(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_edges(file).map_err(|e| Error::io(path, e))
    }

    /// True iff `a` follows `b`. Unknown users follow nobody.
    pub fn follows(&self, a: UserId, b: UserId) -> bool {
        self.out_adj
            .get(&a)
            .is_some_and(|list| list.binary_search(&b).is_ok())
    }

    pub fn in_degree(&self, u: UserId) -> usize {
        self.in_adj.get(&u).map_or(0, Vec::len)
    }

    pub fn out_degree(&self, u: UserId) -> usize {
        self.out_adj.get(&u).map_or(0, Vec::len)
    }

    /// Users following `u`, ascending.
    pub fn followers(&self, u: UserId) -> &[UserId] {
        self.in_adj.get(&u).map_or(&[], Vec::as_slice)
    }

    /// Users `u` follows, ascending.
    pub fn followees(&self, u: UserId) -> &[UserId] {
        self.out_adj.get(&u).map_or(&[], Vec::as_slice)
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Every user incident to at least one edge, ascending.
    pub fn users(&self) -> Vec<UserId> {
        let set: BTreeSet<UserId> = self
            .out_adj
            .keys()
            .chain(self.in_adj.keys())
            .copied()
            .collect();
        set.into_iter().collect()
    }

    pub fn user_count(&self) -> usize {
        self.out_adj.len()
            + self
                .in_adj
                .keys()
                .filter(|u| !self.out_adj.contains_key(u))
                .count()
    }

    pub fn contains_user(&self, u: UserId) -> bool {
        self.out_adj.contains_key(&u) || self.in_adj.contains_key(&u)
    }

    /// All edges sorted by `(follower, followee)`.
    pub fn edges(&self) -> Vec<(UserId, UserId)> {
        let mut followers: Vec<&UserId> = self.out_adj.keys().collect();
        followers.sort_unstable();
        followers
            .into_iter()
            .flat_map(|a| self.out_adj[a].iter().map(move |b| (*a, *b)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, HashSet};

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn u(id: u64) -> UserId {
        UserId(id)
    }

    fn read(text: &str) -> (FollowGraph, LoadStats) {
        FollowGraph::read_edges(text.as_bytes()).unwrap()
    }

    #[test]
    fn empty_input() {
        let (g, stats) = read("");
        assert_eq!(g.user_count(), 0);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(stats.lines, 0);
    }

    #[test]
    fn duplicate_and_self_loop_dropped() {
        let (g, stats) = read("1 2\n1 2\n3 3\n");
        assert_eq!(g.edge_count(), 1);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(stats.self_loops, 1);
        assert!(g.follows(u(1), u(2)));
        assert!(!g.follows(u(2), u(1)));
        assert!(!g.follows(u(3), u(3)));
        // user 3 only appeared in a dropped self-loop
        assert!(!g.contains_user(u(3)));
    }

    #[test]
    fn comments_and_tabs() {
        let (g, _) = read("# follower\tfollowee\n10\t20\n\n20\t10\n");
        assert!(g.follows(u(10), u(20)));
        assert!(g.follows(u(20), u(10)));
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = FollowGraph::read_edges("1\t2\n3\tx\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = FollowGraph::read_edges("1\t2\t3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = FollowGraph::read_edges("-1\t2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = FollowGraph::load_edges("/nonexistent/edges.tsv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn hand_enumerated_in_degrees() {
        // 1->2, 3->2, 4->2, 2->5, 1->5
        // followers: 2 <- {1,3,4}; 5 <- {1,2}; 1,3,4 <- {}
        let (g, _) = read("1\t2\n3\t2\n4\t2\n2\t5\n1\t5\n");
        assert_eq!(g.in_degree(u(2)), 3);
        assert_eq!(g.in_degree(u(5)), 2);
        assert_eq!(g.in_degree(u(1)), 0);
        assert_eq!(g.in_degree(u(3)), 0);
        assert_eq!(g.in_degree(u(4)), 0);
        assert_eq!(g.out_degree(u(1)), 2);
        assert_eq!(g.followers(u(2)), &[u(1), u(3), u(4)]);
        assert_eq!(g.user_count(), 5);
    }

    #[test]
    fn unknown_user_has_zero_degree() {
        let (g, _) = read("1\t2\n");
        assert_eq!(g.in_degree(u(999)), 0);
        assert!(!g.follows(u(999), u(1)));
    }

    #[test]
    fn star_graph() {
        let (g, _) = read("1\t9\n2\t9\n3\t9\n4\t9\n");
        assert_eq!(g.in_degree(u(9)), 4);
    }

    fn random_pairs(seed: u64, n_edges: usize, n_users: u64) -> Vec<(UserId, UserId)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_edges)
            .map(|_| {
                (
                    u(rng.random_range(0..n_users)),
                    u(rng.random_range(0..n_users)),
                )
            })
            .collect()
    }

    #[test]
    fn follows_matches_raw_pair_set_on_all_pairs() {
        let raw = random_pairs(7, 50, 50);
        let (g, _) = FollowGraph::from_edges(raw.iter().copied());
        let set: HashSet<(UserId, UserId)> = raw.iter().copied().filter(|(a, b)| a != b).collect();
        for a in 0..50 {
            for b in 0..50 {
                assert_eq!(
                    g.follows(u(a), u(b)),
                    set.contains(&(u(a), u(b))),
                    "{a}->{b}"
                );
            }
        }
    }

    #[test]
    fn in_degree_matches_linear_scan() {
        let raw = random_pairs(11, 200, 40);
        let (g, _) = FollowGraph::from_edges(raw.iter().copied());
        for v in 0..40 {
            let mut seen = HashSet::new();
            for (a, b) in &raw {
                if *b == u(v) && *a != *b {
                    seen.insert(*a);
                }
            }
            assert_eq!(g.in_degree(u(v)), seen.len(), "user {v}");
        }
    }

    #[test]
    fn load_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsv");
        std::fs::write(&path, "1\t2\n2\t3\n3\t1\n1\t2\n").unwrap();
        let (a, _) = FollowGraph::load_edges(&path).unwrap();
        let (b, _) = FollowGraph::load_edges(&path).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn degree_sums_equal_edge_count(raw in prop::collection::vec((0u64..30, 0u64..30), 0..200)) {
            let (g, stats) = FollowGraph::from_edges(raw.iter().map(|&(a, b)| (u(a), u(b))));
            let users = g.users();
            let ins: usize = users.iter().map(|&v| g.in_degree(v)).sum();
            let outs: usize = users.iter().map(|&v| g.out_degree(v)).sum();
            prop_assert_eq!(ins, g.edge_count());
            prop_assert_eq!(outs, g.edge_count());
            prop_assert_eq!(stats.edges + stats.duplicates + stats.self_loops, raw.len());
            // adjacency symmetry
            let mut by_followee: HashMap<UserId, usize> = HashMap::new();
            for (a, b) in g.edges() {
                prop_assert!(g.followers(b).contains(&a));
                prop_assert!(g.followees(a).contains(&b));
                *by_followee.entry(b).or_default() += 1;
            }
            for v in users {
                prop_assert_eq!(g.in_degree(v), by_followee.get(&v).copied().unwrap_or(0));
            }
        }

        #[test]
        fn write_then_read_is_identity(raw in prop::collection::vec((0u64..20, 0u64..20), 0..80)) {
            let (g, _) = FollowGraph::from_edges(raw.iter().map(|&(a, b)| (u(a), u(b))));
            let mut buf = Vec::new();
            g.write_edges(&mut buf).unwrap();
            let (back, _) = FollowGraph::read_edges(buf.as_slice()).unwrap();
            prop_assert_eq!(g, back);
        }
    }
}
