//! Side-by-side comparison of every estimator on a synthetic game.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::game::{PlayerId, SyntheticGameSpec, SyntheticKind};
use crate::shapley::{
    cone_shap, cone_shap_eval_bound, exact_shapley, mc_shapley, neighbor_shapley_all, occlusion_all,
    SamplerConfig,
};

pub const LOCALITY_TOLERANCE: f64 = 1e-9;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub k: usize,
    #[serde(rename = "M")]
    pub draws: usize,
    pub seed: u64,
    pub mc_permutations: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            k: 5,
            draws: 1,
            seed: 0,
            mc_permutations: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePlayerRow {
    pub player: usize,
    pub degree: usize,
    pub exact: f64,
    pub neighbor: f64,
    pub cone_shap: f64,
    pub mc: f64,
    pub occlusion: f64,
    /// Distinct evaluations CONE-SHAP needed for this player on a cold cache.
    pub cone_shap_evals: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodFigures {
    pub neighbor: f64,
    pub cone_shap: f64,
    pub mc: f64,
    pub occlusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEvals {
    pub exact: usize,
    pub neighbor: usize,
    pub cone_shap: usize,
    pub mc: usize,
    pub occlusion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n: usize,
    pub kind: SyntheticKind,
    pub settings: OracleSettings,
    pub players: Vec<OraclePlayerRow>,
    /// Largest absolute deviation from the exact value, per method.
    pub max_abs_error: MethodFigures,
    /// Distinct evaluations per method, each on a cold cache.
    pub evals: MethodEvals,
    pub cone_shap_eval_bound_per_player: usize,
    pub checks: Vec<OracleCheck>,
    pub verdict: String,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn max_err(rows: &[OraclePlayerRow], f: impl Fn(&OraclePlayerRow) -> f64) -> f64 {
    rows.iter().map(|r| (f(r) - r.exact).abs()).fold(0.0, f64::max)
}

/// Runs exact, neighbor, CONE-SHAP, Monte Carlo and occlusion on the game
/// described by `spec`, with `spec.edges` as the neighbor graph.
pub fn run_oracle(spec: &SyntheticGameSpec, settings: &OracleSettings) -> Result<OracleReport> {
    let game = spec.build()?;
    let graph = spec.neighbor_graph()?;
    let sampler = SamplerConfig::new(settings.k, settings.draws, settings.seed);
    sampler.validate()?;

    let exact = exact_shapley(&game)?;
    let exact_evals = game.evals();
    game.clear_cache();
    let neighbor = neighbor_shapley_all(&game, &graph)?;
    game.clear_cache();
    let mut cone = Vec::with_capacity(spec.n);
    let mut cone_evals = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        game.clear_cache();
        cone.push(cone_shap(&game, &graph, PlayerId(i), &sampler)?);
        cone_evals.push(game.evals());
    }
    game.clear_cache();
    let cone_total = {
        for i in 0..spec.n {
            cone_shap(&game, &graph, PlayerId(i), &sampler)?;
        }
        game.evals()
    };
    game.clear_cache();
    let mc = mc_shapley(&game, settings.mc_permutations, settings.seed)?;
    game.clear_cache();
    let occ = occlusion_all(&game)?;

    let players: Vec<OraclePlayerRow> = (0..spec.n)
        .map(|i| OraclePlayerRow {
            player: i,
            degree: graph.degree(i),
            exact: exact.values[i],
            neighbor: neighbor.values[i],
            cone_shap: cone[i],
            mc: mc.values[i],
            occlusion: occ.values[i],
            cone_shap_evals: cone_evals[i],
        })
        .collect();
    let max_abs_error = MethodFigures {
        neighbor: max_err(&players, |r| r.neighbor),
        cone_shap: max_err(&players, |r| r.cone_shap),
        mc: max_err(&players, |r| r.mc),
        occlusion: max_err(&players, |r| r.occlusion),
    };
    let bound = cone_shap_eval_bound(settings.k, settings.draws);

    let mut checks = Vec::new();
    let worst_evals = cone_evals.iter().copied().max().unwrap_or(0);
    checks.push(OracleCheck {
        name: "cone_shap_eval_budget".into(),
        passed: worst_evals <= bound,
        detail: format!("max {worst_evals} evaluations per player, bound M*2^(k+1) = {bound}"),
    });
    let identity_err = players
        .iter()
        .filter(|r| r.degree <= settings.k)
        .map(|r| (r.cone_shap - r.neighbor).abs())
        .fold(0.0, f64::max);
    checks.push(OracleCheck {
        name: "cone_shap_equals_neighbor_when_k_covers_neighborhood".into(),
        passed: identity_err <= IDENTITY_TOLERANCE,
        detail: format!("max |cone_shap - neighbor| = {identity_err:e} over players with degree <= k"),
    });
    // Additive and edge-counting games only couple players along their edges,
    // so the neighbor-restricted value is exact for them.
    if matches!(spec.kind, SyntheticKind::Additive | SyntheticKind::Edges) {
        checks.push(OracleCheck {
            name: "neighbor_equals_exact".into(),
            passed: max_abs_error.neighbor <= LOCALITY_TOLERANCE,
            detail: format!("max |neighbor - exact| = {:e}", max_abs_error.neighbor),
        });
    }
    if spec.kind == SyntheticKind::Additive {
        let worst = [
            max_abs_error.neighbor,
            max_abs_error.cone_shap,
            max_abs_error.mc,
            max_abs_error.occlusion,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        checks.push(OracleCheck {
            name: "all_methods_agree_on_additive_game".into(),
            passed: worst <= LOCALITY_TOLERANCE,
            detail: format!("max deviation from exact over all methods = {worst:e}"),
        });
    }
    let verdict = if checks.iter().all(|c| c.passed) { "PASS" } else { "FAIL" }.to_string();
    Ok(OracleReport {
        n: spec.n,
        kind: spec.kind,
        settings: settings.clone(),
        players,
        max_abs_error,
        evals: MethodEvals {
            exact: exact_evals,
            neighbor: neighbor.evals_used,
            cone_shap: cone_total,
            mc: mc.evals_used,
            occlusion: occ.evals_used,
        },
        cone_shap_eval_bound_per_player: bound,
        checks,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_game_passes() {
        let spec = SyntheticGameSpec::additive(vec![0.5, -1.0, 2.0, 0.25]);
        let r = run_oracle(&spec, &OracleSettings::default()).unwrap();
        assert_eq!(r.verdict, "PASS", "{:?}", r.checks);
        assert!(r.max_abs_error.mc <= 1e-9);
    }

    #[test]
    fn ring_twelve_locality_and_budget() {
        let r = run_oracle(&SyntheticGameSpec::ring(12), &OracleSettings::default()).unwrap();
        assert_eq!(r.verdict, "PASS", "{:?}", r.checks);
        assert!(r.max_abs_error.neighbor <= 1e-9);
        assert!(r.players.iter().all(|p| p.cone_shap_evals <= 64));
        // occlusion over-counts shared edges
        assert!((r.players[0].occlusion - 2.0).abs() < 1e-12);
    }
}
