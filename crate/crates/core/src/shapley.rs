//! Shapley estimators: the exact value, the neighbor-restricted value, the
//! sampled CONE-SHAP estimator, and two baselines (permutation Monte Carlo and
//! single-player occlusion).
//!
//! All estimators query the game through [`Game::evaluate`], so the game's
//! evaluation counter measures what each one costs.
//!
//! Randomness: every random draw uses a ChaCha8 generator seeded with the
//! run seed and switched to stream `(player << 32) | draw` (CONE-SHAP) or
//! stream `permutation` (Monte Carlo). Results therefore do not depend on how
//! players or permutations are scheduled across threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Coalition, Game, PlayerId};
use crate::graph::NeighborGraph;

/// Largest player count [`exact_shapley`] will enumerate.
pub const EXACT_PLAYER_LIMIT: usize = 20;
/// Largest neighborhood [`neighbor_shapley`] will enumerate.
pub const NEIGHBOR_LIMIT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Neighbor,
    ConeShap,
    Mc,
    Occlusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub values: Vec<f64>,
    pub method: Method,
    pub seed: Option<u64>,
    /// Distinct value-function evaluations issued while computing this vector.
    pub evals_used: usize,
}

/// How players outside the enumerated lattice are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutsidePlayers {
    /// Non-lattice players are absent from every coalition.
    #[default]
    Absent,
    /// Non-lattice players are held at their grand-coalition state (present).
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Neighbors sampled per draw.
    pub k: usize,
    /// Number of draws averaged.
    #[serde(rename = "M")]
    pub draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub outside: OutsidePlayers,
}

impl SamplerConfig {
    pub fn new(k: usize, draws: usize, seed: u64) -> Self {
        Self {
            k,
            draws,
            seed,
            outside: OutsidePlayers::Absent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Precondition("sampler k must be >= 1".into()));
        }
        if self.draws == 0 {
            return Err(Error::Precondition("sampler M must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::new(5, 1, 0)
    }
}

/// Upper bound on distinct evaluations of one [`cone_shap`] call.
pub fn cone_shap_eval_bound(k: usize, draws: usize) -> usize {
    draws << (k + 1)
}

/// `1 / (p * C(p-1, t))` for t = 0..p-1: the Shapley weight of a coalition of
/// `t` other players in a `p`-player lattice.
fn shapley_weights(p: usize) -> Vec<f64> {
    let mut binom = 1.0f64;
    let mut weights = Vec::with_capacity(p);
    for t in 0..p {
        weights.push(1.0 / (p as f64 * binom));
        binom = binom * (p - 1 - t) as f64 / (t + 1) as f64;
    }
    weights
}

fn check_player(game: &Game, i: usize) -> Result<()> {
    if i >= game.player_count() {
        return Err(Error::domain(format!(
            "player {i} out of range for a {}-player game",
            game.player_count()
        )));
    }
    Ok(())
}

fn check_graph(game: &Game, graph: &NeighborGraph) -> Result<()> {
    if graph.player_count() != game.player_count() {
        return Err(Error::domain(format!(
            "graph has {} players, game has {}",
            graph.player_count(),
            game.player_count()
        )));
    }
    Ok(())
}

/// Shapley value of `i` in the sub-lattice spanned by `i` and `others`.
///
/// Sums `w(|T|) * (v(T + i + B) - v(T + B))` over every `T` drawn from `others`,
/// where `B` is the fixed background coalition.
fn lattice_shapley(game: &Game, i: usize, others: &[usize], background: &Coalition) -> Result<f64> {
    let weights = shapley_weights(others.len() + 1);
    let mut total = 0.0;
    for mask in 0u64..(1u64 << others.len()) {
        let mut without = background.clone();
        for (bit, &j) in others.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                without.insert(j);
            }
        }
        let with = without.with(i);
        let delta = game.evaluate(&with)? - game.evaluate(&without)?;
        total += weights[mask.count_ones() as usize] * delta;
    }
    Ok(total)
}

fn background(game: &Game, i: usize, lattice: &[usize], outside: OutsidePlayers) -> Coalition {
    match outside {
        OutsidePlayers::Absent => Coalition::empty(),
        OutsidePlayers::Conditional => {
            let mut b = game.grand_coalition();
            b.remove(i);
            for &j in lattice {
                b.remove(j);
            }
            b
        }
    }
}

/// Exact Shapley values by enumerating all `2^N` coalitions.
pub fn exact_shapley(game: &Game) -> Result<AttributionVector> {
    let n = game.player_count();
    if n > EXACT_PLAYER_LIMIT {
        return Err(Error::Capacity {
            what: "player count",
            got: n,
            limit: EXACT_PLAYER_LIMIT,
        });
    }
    let before = game.evals();
    let values_by_mask = (0u64..(1u64 << n))
        .map(|mask| game.evaluate(&Coalition::from_mask(mask)))
        .collect::<Result<Vec<_>>>()?;
    let weights = shapley_weights(n.max(1));
    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for mask in 0u64..(1u64 << n) {
            if mask & bit == 0 {
                let delta = values_by_mask[(mask | bit) as usize] - values_by_mask[mask as usize];
                *phi_i += weights[mask.count_ones() as usize] * delta;
            }
        }
    }
    Ok(AttributionVector {
        values: phi,
        method: Method::Exact,
        seed: None,
        evals_used: game.evals() - before,
    })
}

/// Shapley value of `i` restricted to the lattice of its neighborhood plus itself.
pub fn neighbor_shapley(game: &Game, graph: &NeighborGraph, i: PlayerId) -> Result<f64> {
    neighbor_shapley_with(game, graph, i, OutsidePlayers::Absent)
}

pub fn neighbor_shapley_with(
    game: &Game,
    graph: &NeighborGraph,
    i: PlayerId,
    outside: OutsidePlayers,
) -> Result<f64> {
    check_graph(game, graph)?;
    check_player(game, i.0)?;
    let neighbors = graph.neighbor_list(i.0);
    if neighbors.len() > NEIGHBOR_LIMIT {
        return Err(Error::Capacity {
            what: "neighborhood size",
            got: neighbors.len(),
            limit: NEIGHBOR_LIMIT,
        });
    }
    let bg = background(game, i.0, &neighbors, outside);
    lattice_shapley(game, i.0, &neighbors, &bg)
}

/// The sampled neighbor Shapley estimator for one player.
///
/// Each of the `M` draws samples `min(k, |N(i)|)` neighbors uniformly without
/// replacement and takes the Shapley value of `i` inside the sampled set plus
/// `i`; the draws are averaged. An isolated player gets `v({i}) - v(empty)`.
pub fn cone_shap(game: &Game, graph: &NeighborGraph, i: PlayerId, cfg: &SamplerConfig) -> Result<f64> {
    cfg.validate()?;
    check_graph(game, graph)?;
    check_player(game, i.0)?;
    let neighbors = graph.neighbor_list(i.0);
    if neighbors.len() <= cfg.k {
        // Every draw is the whole neighborhood, so all draws agree.
        let bg = background(game, i.0, &neighbors, cfg.outside);
        return lattice_shapley(game, i.0, &neighbors, &bg);
    }
    let mut total = 0.0;
    for draw in 0..cfg.draws {
        let sample = sample_neighbors(&neighbors, cfg.k, cfg.seed, i.0, draw);
        let bg = background(game, i.0, &sample, cfg.outside);
        total += lattice_shapley(game, i.0, &sample, &bg)?;
    }
    Ok(total / cfg.draws as f64)
}

/// The neighbors used by draw `draw` of player `player`, sorted ascending.
pub fn sample_neighbors(neighbors: &[usize], k: usize, seed: u64, player: usize, draw: usize) -> Vec<usize> {
    if neighbors.len() <= k {
        return neighbors.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((player as u64) << 32) | draw as u64);
    let mut pool = neighbors.to_vec();
    let (chosen, _) = pool.partial_shuffle(&mut rng, k);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen
}

/// [`cone_shap`] for every player, in parallel on the current rayon pool.
pub fn cone_shap_all(game: &Game, graph: &NeighborGraph, cfg: &SamplerConfig) -> Result<AttributionVector> {
    cfg.validate()?;
    check_graph(game, graph)?;
    let before = game.evals();
    let values = (0..game.player_count())
        .into_par_iter()
        .map(|i| cone_shap(game, graph, PlayerId(i), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionVector {
        values,
        method: Method::ConeShap,
        seed: Some(cfg.seed),
        evals_used: game.evals() - before,
    })
}

/// [`neighbor_shapley`] for every player.
pub fn neighbor_shapley_all(game: &Game, graph: &NeighborGraph) -> Result<AttributionVector> {
    check_graph(game, graph)?;
    let before = game.evals();
    let values = (0..game.player_count())
        .into_par_iter()
        .map(|i| neighbor_shapley(game, graph, PlayerId(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionVector {
        values,
        method: Method::Neighbor,
        seed: None,
        evals_used: game.evals() - before,
    })
}

const MC_BLOCK: usize = 64;

/// Permutation-sampling Monte Carlo Shapley estimate.
pub fn mc_shapley(game: &Game, permutations: usize, seed: u64) -> Result<AttributionVector> {
    if permutations == 0 {
        return Err(Error::Precondition("permutations must be >= 1".into()));
    }
    let n = game.player_count();
    let before = game.evals();
    // Fixed-size blocks summed in order keep the floating-point reduction
    // independent of the thread count.
    let blocks = (0..permutations.div_ceil(MC_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut sums = vec![0.0; n];
            for t in b * MC_BLOCK..((b + 1) * MC_BLOCK).min(permutations) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let mut s = Coalition::empty();
                let mut prev = game.evaluate(&s)?;
                for &p in &order {
                    s.insert(p);
                    let cur = game.evaluate(&s)?;
                    sums[p] += cur - prev;
                    prev = cur;
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; n];
    for block in blocks {
        for (v, s) in values.iter_mut().zip(block) {
            *v += s;
        }
    }
    for v in &mut values {
        *v /= permutations as f64;
    }
    Ok(AttributionVector {
        values,
        method: Method::Mc,
        seed: Some(seed),
        evals_used: game.evals() - before,
    })
}

/// `v(all) - v(all \ {i})`.
pub fn occlusion(game: &Game, i: PlayerId) -> Result<f64> {
    check_player(game, i.0)?;
    let full = game.grand_coalition();
    game.marginal_contribution(i, &full)
}

pub fn occlusion_all(game: &Game) -> Result<AttributionVector> {
    let before = game.evals();
    let values = (0..game.player_count())
        .map(|i| occlusion(game, PlayerId(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionVector {
        values,
        method: Method::Occlusion,
        seed: None,
        evals_used: game.evals() - before,
    })
}
