//! Coalition games: players, coalitions and memoized characteristic functions.
//!
//! Everything in here is independent of images so the estimators in
//! [`crate::shapley`] can be exercised on small synthetic games.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;

/// Index of a player, dense in `[0, player_count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlayerId(pub usize);

impl PlayerId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl From<usize> for PlayerId {
    fn from(i: usize) -> Self {
        PlayerId(i)
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A set of players stored as a bitset.
///
/// Trailing zero words are trimmed so equal sets always compare and hash equal.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Coalition {
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty() -> Self {
        Self::default()
    }

    /// All players `0..n`.
    pub fn full(n: usize) -> Self {
        let mut words = vec![u64::MAX; n / 64];
        if n % 64 != 0 {
            words.push((1u64 << (n % 64)) - 1);
        }
        Self { words }
    }

    pub fn from_mask(mask: u64) -> Self {
        let mut c = Self { words: vec![mask] };
        c.trim();
        c
    }

    pub fn singleton(i: usize) -> Self {
        let mut c = Self::empty();
        c.insert(i);
        c
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words
            .get(i / 64)
            .is_some_and(|w| w & (1u64 << (i % 64)) != 0)
    }

    pub fn insert(&mut self, i: usize) {
        let word = i / 64;
        if word >= self.words.len() {
            self.words.resize(word + 1, 0);
        }
        self.words[word] |= 1u64 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        if let Some(w) = self.words.get_mut(i / 64) {
            *w &= !(1u64 << (i % 64));
            self.trim();
        }
    }

    pub fn with(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.insert(i);
        c
    }

    pub fn without(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.remove(i);
        c
    }

    pub fn union(&self, other: &Coalition) -> Self {
        let (long, short) = if self.words.len() >= other.words.len() {
            (self, other)
        } else {
            (other, self)
        };
        let mut words = long.words.clone();
        for (w, o) in words.iter_mut().zip(&short.words) {
            *w |= o;
        }
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Members in ascending order.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * 64 + bit)
            })
        })
    }

    pub fn max_member(&self) -> Option<usize> {
        let last = self.words.last()?;
        Some((self.words.len() - 1) * 64 + 63 - last.leading_zeros() as usize)
    }

    fn trim(&mut self) {
        while self.words.last() == Some(&0) {
            self.words.pop();
        }
    }

    /// Cache key for a game with `player_count` players.
    pub fn key(&self, player_count: usize) -> CoalitionKey {
        if player_count <= 64 {
            CoalitionKey::Bits(self.words.first().copied().unwrap_or(0))
        } else {
            CoalitionKey::Sorted(self.members().map(|m| m as u32).collect())
        }
    }
}

impl FromIterator<usize> for Coalition {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        let mut c = Self::empty();
        for i in iter {
            c.insert(i);
        }
        c
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.members()).finish()
    }
}

/// Memo-table key: a 64-bit set encoding for small games, a sorted member list otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CoalitionKey {
    Bits(u64),
    Sorted(Box<[u32]>),
}

/// A characteristic function `v: 2^N -> R`. Must be deterministic.
pub trait ValueFunction: Send + Sync {
    fn player_count(&self) -> usize;

    fn value(&self, coalition: &Coalition) -> Result<f64>;
}

type Slot = Arc<Mutex<Option<f64>>>;

/// A coalition game with a memoized characteristic function.
///
/// The memo table is shared between threads. Each coalition owns a slot that is
/// filled at most once, so `evals()` counts distinct underlying evaluations even
/// when several workers ask for the same coalition at the same time.
pub struct Game {
    player_count: usize,
    value_fn: Box<dyn ValueFunction>,
    cache: Mutex<HashMap<CoalitionKey, Slot>>,
    evals: AtomicUsize,
}

impl Game {
    pub fn new(value_fn: impl ValueFunction + 'static) -> Self {
        Self::from_boxed(Box::new(value_fn))
    }

    pub fn from_boxed(value_fn: Box<dyn ValueFunction>) -> Self {
        Self {
            player_count: value_fn.player_count(),
            value_fn,
            cache: Mutex::new(HashMap::new()),
            evals: AtomicUsize::new(0),
        }
    }

    /// Game backed by an infallible closure.
    pub fn from_fn<F>(player_count: usize, f: F) -> Self
    where
        F: Fn(&Coalition) -> f64 + Send + Sync + 'static,
    {
        Self::new(FnGame { player_count, f })
    }

    pub fn player_count(&self) -> usize {
        self.player_count
    }

    pub fn grand_coalition(&self) -> Coalition {
        Coalition::full(self.player_count)
    }

    /// Number of distinct underlying value-function calls so far.
    pub fn evals(&self) -> usize {
        self.evals.load(Ordering::SeqCst)
    }

    /// Drops the memo table and resets the evaluation counter.
    pub fn clear_cache(&self) {
        self.cache.lock().unwrap().clear();
        self.evals.store(0, Ordering::SeqCst);
    }

    fn check(&self, s: &Coalition) -> Result<()> {
        match s.max_member() {
            Some(m) if m >= self.player_count => Err(Error::domain(format!(
                "player {m} out of range for a {}-player game",
                self.player_count
            ))),
            _ => Ok(()),
        }
    }

    /// Cached `v(s)`.
    pub fn evaluate(&self, s: &Coalition) -> Result<f64> {
        self.check(s)?;
        let slot = {
            let mut cache = self.cache.lock().unwrap();
            cache.entry(s.key(self.player_count)).or_default().clone()
        };
        let mut slot = slot.lock().unwrap();
        if let Some(v) = *slot {
            return Ok(v);
        }
        let v = self.value_fn.value(s)?;
        self.evals.fetch_add(1, Ordering::SeqCst);
        *slot = Some(v);
        Ok(v)
    }

    /// `v(s)` straight from the value function; touches neither cache nor counter.
    pub fn evaluate_uncached(&self, s: &Coalition) -> Result<f64> {
        self.check(s)?;
        self.value_fn.value(s)
    }

    /// `v(s) - v(s \ {i})` for `i` in `s`.
    pub fn marginal_contribution(&self, i: PlayerId, s: &Coalition) -> Result<f64> {
        if !s.contains(i.0) {
            return Err(Error::Precondition(format!(
                "player {i} is not a member of coalition {s:?}"
            )));
        }
        Ok(self.evaluate(s)? - self.evaluate(&s.without(i.0))?)
    }
}

impl fmt::Debug for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Game")
            .field("player_count", &self.player_count)
            .field("evals", &self.evals())
            .finish_non_exhaustive()
    }
}

struct FnGame<F> {
    player_count: usize,
    f: F,
}

impl<F> ValueFunction for FnGame<F>
where
    F: Fn(&Coalition) -> f64 + Send + Sync,
{
    fn player_count(&self) -> usize {
        self.player_count
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        Ok((self.f)(coalition))
    }
}

/// `v(S) = sum of w_i over S`.
#[derive(Clone, Debug)]
pub struct AdditiveGame {
    pub weights: Vec<f64>,
}

impl ValueFunction for AdditiveGame {
    fn player_count(&self) -> usize {
        self.weights.len()
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        Ok(coalition.members().map(|i| self.weights[i]).sum())
    }
}

/// `v(S) = total weight of edges with both endpoints in S`.
#[derive(Clone, Debug)]
pub struct EdgeGame {
    pub player_count: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl EdgeGame {
    pub fn unit(player_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            player_count,
            edges: edges.into_iter().map(|(a, b)| (a, b, 1.0)).collect(),
        }
    }

    /// Edge game whose edges are exactly the graph's edges.
    pub fn from_graph(graph: &NeighborGraph) -> Self {
        Self::unit(graph.player_count(), graph.edges().map(|(a, b, _)| (a, b)))
    }
}

impl ValueFunction for EdgeGame {
    fn player_count(&self) -> usize {
        self.player_count
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        Ok(self
            .edges
            .iter()
            .filter(|(a, b, _)| coalition.contains(*a) && coalition.contains(*b))
            .map(|(_, _, w)| w)
            .sum())
    }
}

/// Explicit lookup table; coalitions missing from the table are worth 0.
#[derive(Clone, Debug)]
pub struct TableGame {
    pub player_count: usize,
    pub table: HashMap<Coalition, f64>,
}

impl ValueFunction for TableGame {
    fn player_count(&self) -> usize {
        self.player_count
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        Ok(self.table.get(coalition).copied().unwrap_or(0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Additive,
    Edges,
    Table,
}

/// On-disk definition of a synthetic game.
///
/// `edges` doubles as the neighbor graph for the estimators. For `kind = "edges"`
/// the game value counts edges inside the coalition, weighted by `weights` when
/// one weight per edge is given. Table keys are comma-separated member lists
/// (`""` is the empty coalition).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGameSpec {
    pub n: usize,
    pub kind: SyntheticKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub table: BTreeMap<String, f64>,
}

impl SyntheticGameSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn ring(n: usize) -> Self {
        Self {
            n,
            kind: SyntheticKind::Edges,
            weights: Vec::new(),
            edges: (0..n).map(|i| [i, (i + 1) % n]).collect(),
            table: BTreeMap::new(),
        }
    }

    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push([i, i + 1]);
                }
                if r + 1 < rows {
                    edges.push([i, i + cols]);
                }
            }
        }
        Self {
            n: rows * cols,
            kind: SyntheticKind::Edges,
            weights: Vec::new(),
            edges,
            table: BTreeMap::new(),
        }
    }

    pub fn additive(weights: Vec<f64>) -> Self {
        Self {
            n: weights.len(),
            kind: SyntheticKind::Additive,
            weights,
            edges: Vec::new(),
            table: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        for &[a, b] in &self.edges {
            if a >= self.n || b >= self.n {
                return Err(Error::format(format!(
                    "edge [{a},{b}] out of range for n = {}",
                    self.n
                )));
            }
            if a == b {
                return Err(Error::format(format!("self-loop on player {a}")));
            }
        }
        Ok(())
    }

    pub fn neighbor_graph(&self) -> Result<NeighborGraph> {
        self.validate()?;
        let mut g = NeighborGraph::new(self.n);
        for &[a, b] in &self.edges {
            g.add_edge(a, b, crate::graph::EdgeKind::Physical);
        }
        Ok(g)
    }

    pub fn build(&self) -> Result<Game> {
        self.validate()?;
        let game = match self.kind {
            SyntheticKind::Additive => {
                if self.weights.len() != self.n {
                    return Err(Error::format(format!(
                        "additive game needs {} weights, got {}",
                        self.n,
                        self.weights.len()
                    )));
                }
                Game::new(AdditiveGame {
                    weights: self.weights.clone(),
                })
            }
            SyntheticKind::Edges => {
                let weighted = self.weights.len() == self.edges.len() && !self.weights.is_empty();
                let edges = self
                    .edges
                    .iter()
                    .enumerate()
                    .map(|(e, &[a, b])| (a, b, if weighted { self.weights[e] } else { 1.0 }))
                    .collect();
                Game::new(EdgeGame {
                    player_count: self.n,
                    edges,
                })
            }
            SyntheticKind::Table => {
                let mut table = HashMap::new();
                for (key, &value) in &self.table {
                    let mut c = Coalition::empty();
                    for part in key.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                        let i: usize = part
                            .parse()
                            .map_err(|_| Error::format(format!("bad table key {key:?}")))?;
                        if i >= self.n {
                            return Err(Error::format(format!(
                                "table key {key:?} names player {i} >= n = {}",
                                self.n
                            )));
                        }
                        c.insert(i);
                    }
                    table.insert(c, value);
                }
                Game::new(TableGame {
                    player_count: self.n,
                    table,
                })
            }
        };
        Ok(game)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn additive() -> Game {
        Game::new(AdditiveGame {
            weights: vec![0.3, -0.2, 0.5],
        })
    }

    fn two_player() -> Game {
        let spec: SyntheticGameSpec = serde_json::from_str(
            r#"{"n": 2, "kind": "table", "table": {"": 0, "0": 1, "1": 0, "0,1": 2}}"#,
        )
        .unwrap();
        spec.build().unwrap()
    }

    #[test]
    fn evaluate_additive() {
        let g = additive();
        let v = g.evaluate(&Coalition::from_iter([0, 2])).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn empty_coalition_cached_once() {
        let g = additive();
        let before = g.evals();
        g.evaluate(&Coalition::empty()).unwrap();
        g.evaluate(&Coalition::empty()).unwrap();
        assert_eq!(g.evals() - before, 1);
    }

    #[test]
    fn squared_size_game() {
        let g = Game::from_fn(4, |s| (s.len() * s.len()) as f64);
        assert_eq!(g.evaluate(&Coalition::from_iter([1, 2, 3])).unwrap(), 9.0);
    }

    #[test]
    fn out_of_range_member_is_domain_error() {
        let g = additive();
        let err = g.evaluate(&Coalition::singleton(3)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert_eq!(g.evals(), 0);
    }

    #[test]
    fn marginal_contributions() {
        let g = additive();
        let m = g
            .marginal_contribution(PlayerId(1), &Coalition::from_iter([0, 1]))
            .unwrap();
        assert!((m + 0.2).abs() < 1e-12);

        let sq = Game::from_fn(3, |s| (s.len() * s.len()) as f64);
        let m = sq
            .marginal_contribution(PlayerId(0), &Coalition::from_iter([0, 1]))
            .unwrap();
        assert_eq!(m, 3.0);

        let m = two_player()
            .marginal_contribution(PlayerId(0), &Coalition::from_iter([0, 1]))
            .unwrap();
        assert_eq!(m, 2.0);
    }

    #[test]
    fn marginal_requires_membership() {
        let err = additive()
            .marginal_contribution(PlayerId(2), &Coalition::from_iter([0, 1]))
            .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn coalition_set_semantics() {
        let a = Coalition::from_iter([5, 1, 5, 70]);
        assert_eq!(a.len(), 3);
        assert_eq!(a.members().collect::<Vec<_>>(), vec![1, 5, 70]);
        assert_eq!(a.max_member(), Some(70));
        assert_eq!(a.without(70), Coalition::from_iter([1, 5]));
        assert_eq!(Coalition::full(3), Coalition::from_mask(0b111));
        assert_eq!(Coalition::full(64).len(), 64);
        assert_eq!(Coalition::full(65).len(), 65);
        assert!(Coalition::singleton(3).without(3).is_empty());
        assert_eq!(Coalition::full(0), Coalition::empty());
    }

    #[test]
    fn large_games_use_sorted_keys() {
        let c = Coalition::from_iter([3, 99]);
        assert_eq!(c.key(128), CoalitionKey::Sorted(vec![3, 99].into()));
        assert_eq!(Coalition::from_iter([0, 2]).key(10), CoalitionKey::Bits(0b101));
        let g = Game::from_fn(100, |s| s.len() as f64);
        assert_eq!(g.evaluate(&c).unwrap(), 2.0);
        assert_eq!(g.evaluate(&Coalition::from_iter([99, 3])).unwrap(), 2.0);
        assert_eq!(g.evals(), 1);
    }

    #[test]
    fn synthetic_spec_parses_all_kinds() {
        let ring = SyntheticGameSpec::ring(4).build().unwrap();
        assert_eq!(ring.evaluate(&Coalition::full(4)).unwrap(), 4.0);
        assert_eq!(ring.evaluate(&Coalition::from_iter([0, 2])).unwrap(), 0.0);

        let spec: SyntheticGameSpec =
            serde_json::from_str(r#"{"n": 3, "kind": "additive", "weights": [0.3, -0.2, 0.5]}"#)
                .unwrap();
        assert_eq!(spec, SyntheticGameSpec::additive(vec![0.3, -0.2, 0.5]));

        let bad: SyntheticGameSpec =
            serde_json::from_str(r#"{"n": 2, "kind": "table", "table": {"0,7": 1.0}}"#).unwrap();
        assert!(matches!(bad.build(), Err(Error::Format(_))));
    }
}
