//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs without the libtest harness so the lines
//! show up in plain `cargo test` output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hint::black_box;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cone_shap::concepts::SegmentRef;
use cone_shap::explain::SegmentScoreTable;
use cone_shap::game::{SyntheticGameSpec, TableGame};
use cone_shap::metrics::{self, ConceptRegion, CurveMode, CurvePoint};
use cone_shap::models::{build_game, Classifier, MaskingPolicy};
use cone_shap::pipeline::{self, Context, RunConfig};
use cone_shap::segmentation::{adjacency, Granularity, LabelMap, SegmentationSet};
use cone_shap::shapley::{
    cone_shap, cone_shap_all, cone_shap_eval_bound, exact_shapley, neighbor_shapley, neighbor_shapley_all,
    sample_neighbors,
};
use cone_shap::toy::{self, ToyConfig};
use cone_shap::{Coalition, EdgeKind, Game, ImageTensor, NeighborGraph, PlayerId, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: cone_shap::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// shared toy pipeline (criteria 6 and 8)

struct MlpRun {
    _dir: TempDir,
    ctx: Context,
}

#[derive(Default)]
struct Shared {
    mlp: Option<MlpRun>,
}

impl Shared {
    fn mlp(&mut self) -> Result<&MlpRun, String> {
        if self.mlp.is_none() {
            let dir = TempDir::new().map_err(|e| e.to_string())?;
            let cfg = prepare_toy(dir.path(), "config.json", 1)?;
            let ctx = lib(Context::open(&cfg))?;
            lib(pipeline::cmd_discover(&ctx))?;
            self.mlp = Some(MlpRun { _dir: dir, ctx });
        }
        Ok(self.mlp.as_ref().unwrap())
    }
}

/// Generates the default toy dataset under `dir`, loads the named config and
/// segments every image.
fn prepare_toy(dir: &Path, config: &str, jobs: usize) -> Result<RunConfig, String> {
    lib(pipeline::cmd_generate(dir, &ToyConfig::default()))?;
    let mut cfg = lib(RunConfig::load(&dir.join(config)))?;
    cfg.jobs = jobs;
    lib(pipeline::cmd_segment(&cfg))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// 1. axioms of the exact value

fn random_table(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t[0] = 0.0;
    t
}

fn table_game(n: usize, t: &[f64]) -> Game {
    let table = t
        .iter()
        .enumerate()
        .map(|(m, &v)| (Coalition::from_mask(m as u64), v))
        .collect();
    Game::new(TableGame { player_count: n, table })
}

fn swap_bits(m: usize, a: usize, b: usize) -> usize {
    let (ba, bb) = ((m >> a) & 1, (m >> b) & 1);
    (m & !(1 << a) & !(1 << b)) | (ba << b) | (bb << a)
}

/// Average marginal contribution over all orderings, by enumeration.
fn permutation_shapley(n: usize, t: &[f64]) -> Vec<f64> {
    fn visit(order: &mut Vec<usize>, used: usize, n: usize, t: &[f64], acc: &mut [f64], count: &mut usize) {
        if order.len() == n {
            let mut mask = 0usize;
            for &p in order.iter() {
                acc[p] += t[mask | (1 << p)] - t[mask];
                mask |= 1 << p;
            }
            *count += 1;
            return;
        }
        for p in 0..n {
            if used & (1 << p) == 0 {
                order.push(p);
                visit(order, used | (1 << p), n, t, acc, count);
                order.pop();
            }
        }
    }
    let mut acc = vec![0.0; n];
    let mut count = 0;
    visit(&mut Vec::new(), 0, n, t, &mut acc, &mut count);
    acc.iter().map(|a| a / count as f64).collect()
}

fn criterion_axioms(_: &mut Shared) -> Verdict {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut eff, mut sym, mut dummy, mut add, mut brute) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for g in 0..200 {
        let n = 2 + g % 9;
        let full = (1usize << n) - 1;
        let u = random_table(n, &mut rng);
        let w = random_table(n, &mut rng);
        let phi_u = lib(exact_shapley(&table_game(n, &u)))?.values;
        let phi_w = lib(exact_shapley(&table_game(n, &w)))?.values;

        eff = eff.max((phi_u.iter().sum::<f64>() - (u[full] - u[0])).abs());

        let a = rng.random_range(0..n);
        let b = (a + 1 + rng.random_range(0..n - 1)) % n;
        let s: Vec<f64> = (0..=full).map(|m| 0.5 * (u[m] + u[swap_bits(m, a, b)])).collect();
        let phi_s = lib(exact_shapley(&table_game(n, &s)))?.values;
        sym = sym.max((phi_s[a] - phi_s[b]).abs());

        let d = rng.random_range(0..n);
        let dm: Vec<f64> = (0..=full).map(|m| u[m & !(1 << d)]).collect();
        dummy = dummy.max(lib(exact_shapley(&table_game(n, &dm)))?.values[d].abs());

        let sum: Vec<f64> = u.iter().zip(&w).map(|(x, y)| x + y).collect();
        let phi_sum = lib(exact_shapley(&table_game(n, &sum)))?.values;
        for i in 0..n {
            add = add.max((phi_sum[i] - phi_u[i] - phi_w[i]).abs());
        }

        if n <= 6 {
            for (x, y) in phi_u.iter().zip(permutation_shapley(n, &u)) {
                brute = brute.max((x - y).abs());
            }
        }
    }
    let detail = format!(
        "200 games, N in 2..=10; max errors: efficiency {eff:.1e}, symmetry {sym:.1e}, dummy {dummy:.1e}, \
         additivity {add:.1e}, vs permutation enumeration (N<=6) {brute:.1e}"
    );
    ensure(eff.max(sym).max(dummy).max(add).max(brute) <= TOL, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 2. locality exactness on edge-counting games

fn criterion_locality(_: &mut Shared) -> Verdict {
    const TOL: f64 = 1e-9;
    let mut specs: Vec<(String, SyntheticGameSpec)> =
        (3..=12).map(|n| (format!("ring{n}"), SyntheticGameSpec::ring(n))).collect();
    specs.push(("grid3x4".into(), SyntheticGameSpec::grid(3, 4)));
    let mut worst = 0f64;
    for (name, spec) in &specs {
        let game = lib(spec.build())?;
        let graph = lib(spec.neighbor_graph())?;
        let exact = lib(exact_shapley(&game))?.values;
        let local = lib(neighbor_shapley_all(&game, &graph))?.values;
        for i in 0..spec.n {
            // each unit edge splits evenly between its endpoints
            let closed = graph.degree(i) as f64 / 2.0;
            let err = (local[i] - exact[i]).abs().max((exact[i] - closed).abs());
            ensure(err <= TOL, || format!("{name} player {i}: neighbor {} exact {} deg/2 {closed}", local[i], exact[i]))?;
            worst = worst.max(err);
        }
    }
    Ok(format!(
        "rings N=3..12 and 3x4 grid: max |neighbor - exact| and |exact - deg/2| = {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. sampling identity and convergence

fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> NeighborGraph {
    let mut g = NeighborGraph::new(n);
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                g.add_edge(a, b, EdgeKind::Physical);
            }
        }
    }
    g
}

/// Per-draw values for a one-neighbor sample: (1/2)(v({i}) - v(∅) + v({i,j}) - v({j})).
fn one_neighbor_draws(game: &Game, graph: &NeighborGraph, i: usize, draws: usize, seed: u64) -> Result<Vec<f64>, String> {
    let nbrs = graph.neighbor_list(i);
    let v = |members: &[usize]| lib(game.evaluate(&members.iter().copied().collect()));
    (0..draws)
        .map(|d| {
            let j = sample_neighbors(&nbrs, 1, seed, i, d)[0];
            Ok(0.5 * ((v(&[i])? - v(&[])?) + (v(&[i, j])? - v(&[j])?)))
        })
        .collect()
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_sampling(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases: Vec<(String, Game, NeighborGraph)> = Vec::new();
    for spec in [SyntheticGameSpec::ring(12), SyntheticGameSpec::grid(3, 4)] {
        cases.push((format!("{:?} n={}", spec.kind, spec.n), lib(spec.build())?, lib(spec.neighbor_graph())?));
    }
    for n in [7, 9] {
        let t = random_table(n, &mut rng);
        cases.push((format!("random table n={n}"), table_game(n, &t), random_graph(n, 0.45, &mut rng)));
    }
    let mut identity = 0f64;
    for (name, game, graph) in &cases {
        for i in 0..game.player_count() {
            let reference = lib(neighbor_shapley(game, graph, PlayerId(i)))?;
            for m in 1..=3 {
                let cfg = SamplerConfig::new(graph.degree(i).max(1), m, 5);
                let v = lib(cone_shap(game, graph, PlayerId(i), &cfg))?;
                let err = (v - reference).abs();
                ensure(err <= 1e-12, || format!("{name} player {i} M={m}: cone {v} vs neighbor {reference}"))?;
                identity = identity.max(err);
            }
        }
    }

    let draws = 10_000;
    let seed = 7;
    let ring4 = SyntheticGameSpec::ring(4);
    let weighted = SyntheticGameSpec {
        weights: vec![1.0, 3.0, 1.0, 3.0],
        ..SyntheticGameSpec::ring(4)
    };
    let mut limits = Vec::new();
    // unit ring: every draw gives 1/2; weighted ring: player 0 touches weights 1 and 3
    for (name, spec, limit) in [("4-ring", &ring4, 0.5), ("weighted 4-ring", &weighted, 1.0)] {
        let game = lib(spec.build())?;
        let graph = lib(spec.neighbor_graph())?;
        let cfg = SamplerConfig::new(1, draws, seed);
        let est = lib(cone_shap(&game, &graph, PlayerId(0), &cfg))?;
        let per_draw = one_neighbor_draws(&game, &graph, 0, draws, seed)?;
        let (mean, se) = mean_and_se(&per_draw);
        ensure((est - mean).abs() <= 1e-12, || format!("{name}: estimator {est} vs per-draw mean {mean}"))?;
        let band = (3.0 * se).max(1e-12);
        ensure((est - limit).abs() <= band, || format!("{name}: {est} not within 3 SE ({se:.2e}) of {limit}"))?;
        limits.push(format!("{name} {est:.4} (limit {limit}, SE {se:.1e})"));
    }
    Ok(format!(
        "k=|N(i)| identity max error {identity:.1e} over M=1..3; k=1, M={draws}: {}",
        limits.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 4. evaluation budget and its growth in k

fn criterion_budget(_: &mut Shared) -> Verdict {
    let n = 12;
    let graph = NeighborGraph::complete(n);
    let cheap = Game::from_fn(n, |s: &Coalition| s.members().map(|p| (p * p) as f64).sum::<f64>().sqrt());
    let mut worst_ratio = 0f64;
    for k in 1..=5 {
        for m in 1..=3 {
            let bound = cone_shap_eval_bound(k, m);
            for i in 0..n {
                cheap.clear_cache();
                lib(cone_shap(&cheap, &graph, PlayerId(i), &SamplerConfig::new(k, m, 1)))?;
                let evals = cheap.evals();
                ensure(evals <= bound, || format!("k={k} M={m} player {i}: {evals} evaluations > {bound}"))?;
                if m > 1 {
                    // every draw shares v(∅) and v({i})
                    ensure(evals < bound, || format!("k={k} M={m}: caching saved nothing"))?;
                }
                worst_ratio = worst_ratio.max(evals as f64 / bound as f64);
            }
        }
    }

    const WORK: usize = 3000;
    let costly = Game::from_fn(n, |s: &Coalition| {
        let seed: usize = s.members().map(|p| p + 1).product();
        (0..WORK).map(|t| ((t + seed) as f64 * 1e-3).sin()).sum::<f64>()
    });
    let mut times = Vec::new();
    for k in 1..=5 {
        let mut best = Duration::MAX;
        for _ in 0..5 {
            let start = Instant::now();
            for i in 0..n {
                costly.clear_cache();
                black_box(lib(cone_shap(&costly, &graph, PlayerId(i), &SamplerConfig::new(k, 1, 1)))?);
            }
            best = best.min(start.elapsed());
        }
        times.push(best.as_secs_f64());
    }
    // least-squares slope of log2(time) against k
    let xs: Vec<f64> = (1..=5).map(|k| k as f64).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.log2()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let growth = slope.exp2();
    let detail = format!(
        "evals <= M*2^(k+1) for k=1..5, M=1..3 (max fill {worst_ratio:.2}); wall time per k {:?} ms, growth {growth:.2}x per unit k",
        times.iter().map(|t| (t * 1e4).round() / 10.0).collect::<Vec<_>>()
    );
    ensure((1.5..=2.7).contains(&growth), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 5. additive end-to-end oracle

fn mean_fill(image: &ImageTensor) -> [u8; 3] {
    let mut sums = [0u64; 3];
    for px in image.pixels() {
        for c in 0..3 {
            sums[c] += px[c] as u64;
        }
    }
    sums.map(|s| (s as f64 / image.pixel_count() as f64).round() as u8)
}

/// Logit drop of a hue-projection scorer when `pixels` are set to `fill`.
fn linear_removal(image: &ImageTensor, pixels: &[usize], fill: [u8; 3], class_k: usize, classes: usize) -> f64 {
    let dir = toy::class_direction(class_k, classes);
    pixels
        .iter()
        .map(|&p| {
            let px = image.pixel_at(p);
            (0..3).map(|c| 0.01 * dir[c] * (px[c] as f64 - fill[c] as f64) / 255.0).sum::<f64>()
        })
        .sum()
}

fn read_table(path: &Path) -> Result<SegmentScoreTable, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_additive(_: &mut Shared) -> Verdict {
    const TOL: f64 = 1e-9;
    let classes = ToyConfig::default().classes;
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let base = prepare_toy(dir.path(), "config_linear.json", 1)?;
    lib(pipeline::cmd_discover(&lib(Context::open(&base))?))?;

    let mut rankings: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut checked = 0usize;
    let mut worst = 0f64;
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let ctx = lib(Context::open(&cfg))?;
        let reports = lib(pipeline::cmd_explain_class(&ctx))?;
        rankings.push(reports.iter().map(|r| r.scores.iter().map(|s| s.concept).collect()).collect());
        for item in &ctx.data.items {
            let table = read_table(&cfg.attributions_dir(item.label).join(format!("{}.json", item.id)))?;
            let set = lib(pipeline::load_segmentation(&cfg, &item.id))?;
            let fill = mean_fill(&item.image);
            for level in Granularity::ALL {
                let pixels = set.level(level).map.segment_pixels();
                for (s, px) in pixels.iter().enumerate() {
                    let r = SegmentRef {
                        image_id: item.id.clone(),
                        level,
                        segment_id: s,
                    };
                    let got = table.value(&r).ok_or_else(|| format!("missing value for {r:?}"))?;
                    let want = linear_removal(&item.image, px, fill, item.label, classes);
                    let err = (got - want).abs();
                    ensure(err <= TOL, || format!("seed {seed} {r:?}: {got} vs closed form {want}"))?;
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
    }
    ensure(rankings.windows(2).all(|w| w[0] == w[1]), || "concept ranking changed with the seed".into())?;
    Ok(format!(
        "{checked} segment values over seeds {seeds:?} match the closed form (max error {worst:.1e}); \
         concept rankings identical across seeds"
    ))
}

// ---------------------------------------------------------------------------
// 6. add/remove curves on the detector MLP

fn accuracies(curves: &[CurvePoint], mode: CurveMode) -> Vec<f64> {
    let mut pts: Vec<&CurvePoint> = curves.iter().filter(|p| p.mode == mode).collect();
    pts.sort_by_key(|p| p.top_k);
    pts.iter().map(|p| p.accuracy).collect()
}

fn monotone(xs: &[f64], increasing: bool, tol: f64) -> bool {
    xs.windows(2).all(|w| if increasing { w[1] >= w[0] - tol } else { w[1] <= w[0] + tol })
}

/// Pixels of each concept in one image: union of member segments over levels.
fn concept_regions(
    set: &SegmentationSet,
    assignment: &HashMap<(Granularity, usize), usize>,
) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for level in Granularity::ALL {
        for (s, px) in set.level(level).map.segment_pixels().into_iter().enumerate() {
            if let Some(&c) = assignment.get(&(level, s)) {
                out.entry(c).or_default().extend(px);
            }
        }
    }
    out
}

fn criterion_curves(shared: &mut Shared) -> Verdict {
    let run = shared.mlp()?;
    let ctx = &run.ctx;
    let report = lib(pipeline::cmd_evaluate(ctx))?;
    let ssc = accuracies(&report.curves, CurveMode::SscAdd);
    let sdc = accuracies(&report.curves, CurveMode::SdcRemove);
    let least_remove = accuracies(&report.curves, CurveMode::LeastRemove);
    let full = report.full_accuracy;
    let classes = ToyConfig::default().classes;
    let chance = 1.0 / classes as f64;

    // Locate each class's blob concept from the generator's ground truth and
    // remove it independently of the pipeline's curve code.
    let blobs: HashMap<String, BTreeSet<usize>> = lib(toy::generate(&ToyConfig::default()))?
        .into_iter()
        .map(|t| (t.id, t.blob.into_iter().collect()))
        .collect();
    let class_reports = lib(pipeline::cmd_explain_class(ctx))?;
    let mut removed_correct = 0usize;
    let mut blob_ranks = Vec::new();
    for report in &class_reports {
        let c = report.class_id;
        let model = lib(ctx.load_concept_model(c))?;
        let items = ctx.data.of_class(c);
        let mut per_image = Vec::new();
        for item in &items {
            let assignment: HashMap<(Granularity, usize), usize> = model
                .assignments
                .iter()
                .filter(|a| a.segment.image_id == item.id)
                .filter_map(|a| a.concept.map(|k| ((a.segment.level, a.segment.segment_id), k)))
                .collect();
            let set = lib(pipeline::load_segmentation(&ctx.cfg, &item.id))?;
            per_image.push(concept_regions(&set, &assignment));
        }
        let blob_concept = model
            .active_concepts()
            .into_iter()
            .map(|k| {
                let score: f64 = items
                    .iter()
                    .zip(&per_image)
                    .map(|(item, regions)| regions.get(&k).map_or(0.0, |r| jaccard(r, &blobs[&item.id])))
                    .sum();
                (k, score / items.len() as f64)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .ok_or_else(|| format!("class {c} has no concepts"))?;
        let rank = report
            .scores
            .iter()
            .find(|s| s.concept == blob_concept)
            .map_or(usize::MAX, |s| s.rank);
        blob_ranks.push(rank);
        for (item, regions) in items.iter().zip(&per_image) {
            let mut image = item.image.clone();
            let fill = mean_fill(&image);
            for &p in regions.get(&blob_concept).into_iter().flatten() {
                image.set_pixel_at(p, fill);
            }
            if lib(ctx.model.predict(&image))?.argmax() == item.label {
                removed_correct += 1;
            }
        }
    }
    let removed_acc = removed_correct as f64 / ctx.data.items.len() as f64;

    let detail = format!(
        "full {full:.3}; SSC_add {ssc:.3?}; SDC_remove {sdc:.3?}; blob concept ranks {blob_ranks:?}; \
         blob removed {removed_acc:.3} (drop {:.3}); least_remove top-1 {:.3}",
        full - removed_acc,
        least_remove[0]
    );
    ensure(monotone(&ssc, true, 0.02), || format!("SSC not non-decreasing: {detail}"))?;
    ensure(monotone(&sdc, false, 0.02), || format!("SDC not non-increasing: {detail}"))?;
    ensure(full - removed_acc >= 0.5, || format!("blob removal drop < 0.5: {detail}"))?;
    ensure(full - sdc[0] >= 0.5, || format!("SDC top-1 drop < 0.5: {detail}"))?;
    ensure(blob_ranks.iter().all(|&r| r == 1), || format!("blob concept not ranked first: {detail}"))?;
    ensure(sdc[0] <= chance + 0.1, || format!("SDC top-1 above chance + 0.1: {detail}"))?;
    ensure(ssc[0] >= 0.9, || format!("SSC top-1 below 0.9: {detail}"))?;
    ensure(full - least_remove[0] <= 0.05, || format!("removing the bottom concept costs > 0.05: {detail}"))?;
    Ok(detail)
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// 7. criteria metrics

fn tiles(side: usize, per_side: usize) -> LabelMap {
    let step = side / per_side;
    let labels = (0..side * side)
        .map(|p| ((p / side / step) * per_side + (p % side) / step) as u32)
        .collect();
    LabelMap::new(side, side, labels).unwrap()
}

fn criterion_metrics(_: &mut Shared) -> Verdict {
    let uniform = lib(metrics::complexity(&[0.7; 5]))?;
    let ln5 = 5f64.ln();
    ensure((uniform - ln5).abs() <= 1e-9, || format!("uniform complexity {uniform} vs ln 5"))?;

    // Additive scorer, one segmentation level, concepts = tile position mod 6.
    let classes = 5;
    let class_k = 2;
    let model = toy::hue_linear(classes);
    let images: Vec<ImageTensor> = lib(toy::generate(&ToyConfig {
        per_class: 3,
        ..ToyConfig::default()
    }))?
    .into_iter()
    .filter(|t| t.label == class_k)
    .map(|t| t.image)
    .collect();
    let map = tiles(40, 4);
    let concept_of = |s: usize| s % 6;
    let pixels = map.segment_pixels();
    let mut graph = adjacency(&map);
    for a in 0..16 {
        for b in a + 1..16 {
            if concept_of(a) == concept_of(b) {
                graph.add_edge(a, b, EdgeKind::Semantic);
            }
        }
    }
    let shared_model: std::sync::Arc<dyn Classifier> = std::sync::Arc::new(model.clone());
    let mut sums = [0.0; 6];
    let mut counts = [0usize; 6];
    for image in &images {
        let game = lib(build_game(shared_model.clone(), image, &map, class_k, MaskingPolicy::MeanColor))?;
        let values = lib(cone_shap_all(&game, &graph, &SamplerConfig::default()))?.values;
        for (s, v) in values.iter().enumerate() {
            sums[concept_of(s)] += v;
            counts[concept_of(s)] += 1;
        }
    }
    let mut scored: Vec<(f64, f64)> = (0..6)
        .map(|c| {
            let sc = sums[c] / counts[c] as f64;
            let regions: Vec<ConceptRegion> = images
                .iter()
                .map(|image| ConceptRegion {
                    image,
                    pixels: (0..16).filter(|&s| concept_of(s) == c).flat_map(|s| pixels[s].clone()).collect(),
                })
                .collect();
            let d = metrics::concept_degradation(&model, &regions, counts[c], class_k, MaskingPolicy::MeanColor)
                .unwrap();
            (sc, d.phi_normalized)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (sc, phi): (Vec<f64>, Vec<f64>) = scored.into_iter().take(5).unzip();
    let faithful = lib(metrics::faithfulness_score(&sc, &phi))?;
    ensure((faithful - 1.0).abs() <= 1e-6, || format!("faithfulness on the additive model {faithful}"))?;

    // Every member embedding a positive multiple of its image's embedding.
    let image_emb: HashMap<String, Vec<f64>> =
        [("a".to_string(), vec![0.3, -1.2, 2.0]), ("b".to_string(), vec![-0.5, 0.1, 0.9])].into();
    let mut seg_emb = HashMap::new();
    let mut members = Vec::new();
    for (i, img) in ["a", "a", "b", "b", "b"].iter().enumerate() {
        let r = SegmentRef {
            image_id: img.to_string(),
            level: Granularity::Medium,
            segment_id: i,
        };
        seg_emb.insert(r.clone(), image_emb[*img].iter().map(|v| v * (1.0 + i as f64)).collect::<Vec<f64>>());
        members.push(r);
    }
    let concept = cone_shap::concepts::Concept {
        id: 0,
        exemplars: members.clone(),
        members,
    };
    let eta = lib(metrics::concept_coherency(&concept, &seg_emb, &image_emb))?;
    ensure((eta - 1.0).abs() <= 1e-9, || format!("perfect-embedding coherency {eta}"))?;
    Ok(format!(
        "complexity of uniform top-5 {uniform:.12} (ln 5 = {ln5:.12}); additive faithfulness {faithful:.9}; \
         perfect-embedding coherency {eta:.12}"
    ))
}

// ---------------------------------------------------------------------------
// 8. hyperparameter sweep

fn criterion_sweep(shared: &mut Shared) -> Verdict {
    let run = shared.mlp()?;
    let ctx = &run.ctx;
    let report = lib(pipeline::cmd_sweep(ctx))?;
    let k_rows: Vec<_> = report.rows.iter().filter(|r| r.grid == "k").collect();
    let m_rows: Vec<_> = report.rows.iter().filter(|r| r.grid == "M").collect();
    ensure(
        k_rows.iter().map(|r| (r.k, r.draws)).eq((1..=5).map(|k| (k, 1))),
        || format!("k grid rows {:?}", k_rows.iter().map(|r| (r.k, r.draws)).collect::<Vec<_>>()),
    )?;
    ensure(
        m_rows.iter().map(|r| (r.k, r.draws)).eq((1..=3).map(|m| (ctx.cfg.k, m))),
        || format!("M grid rows {:?}", m_rows.iter().map(|r| (r.k, r.draws)).collect::<Vec<_>>()),
    )?;
    for r in &report.rows {
        for mode in CurveMode::ALL {
            ensure(accuracies(&r.curves, mode).len() == 5, || format!("row k={} M={} lacks {mode:?}", r.k, r.draws))?;
        }
    }
    let dir = ctx.cfg.output.join("reports");
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    ensure(dir.join("sweep.json").is_file() && csv.lines().count() == 1 + report.rows.len(), || {
        "sweep.json / sweep.csv missing or incomplete".into()
    })?;
    let ssc_most: Vec<f64> = k_rows.iter().map(|r| r.ssc_most).collect();
    let fmt = |rows: &[&pipeline::SweepRow]| {
        rows.iter()
            .map(|r| format!("{:.3}/{:.3}/{:.3}/{:.3}", r.ssc_most, r.sdc_most, r.ssc_least, r.sdc_least))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let detail = format!(
        "k=1..5 (SSC/SDC most, SSC/SDC least): {}; M=1..3 at k={}: {}",
        fmt(&k_rows),
        ctx.cfg.k,
        fmt(&m_rows)
    );
    ensure(monotone(&ssc_most, true, 0.05), || format!("SSC-most not monotone in k: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. determinism across worker counts

fn output_files(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("json" | "csv" | "png")) {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn criterion_determinism(_: &mut Shared) -> Verdict {
    let mut trees = Vec::new();
    for jobs in [1, 2] {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let cfg = prepare_toy(dir.path(), "config.json", jobs)?;
        let ctx = lib(Context::open(&cfg))?;
        lib(pipeline::cmd_discover(&ctx))?;
        lib(pipeline::cmd_evaluate(&ctx))?;
        trees.push(output_files(&cfg.output)?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "--jobs 1 and --jobs 2 wrote different file sets".into())?;
    let differing: Vec<_> = a.iter().filter(|(p, bytes)| b[*p] != **bytes).map(|(p, _)| p.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("files differ: {}", differing.join(", ")))?;
    let count = |ext: &str| a.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    Ok(format!(
        "{} files byte-identical for jobs 1 vs 2 ({} json, {} csv, {} png)",
        a.len(),
        count("json"),
        count("csv"),
        count("png")
    ))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    run: fn(&mut Shared) -> Verdict,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "Shapley axioms", limit: Duration::from_secs(10), run: criterion_axioms },
        Criterion { id: 2, name: "locality exactness", limit: Duration::from_secs(5), run: criterion_locality },
        Criterion { id: 3, name: "sampling identity and convergence", limit: Duration::from_secs(5), run: criterion_sampling },
        Criterion { id: 4, name: "evaluation budget", limit: Duration::from_secs(30), run: criterion_budget },
        Criterion { id: 5, name: "additive end-to-end oracle", limit: Duration::from_secs(60), run: criterion_additive },
        Criterion { id: 6, name: "add/remove curves", limit: Duration::from_secs(300), run: criterion_curves },
        Criterion { id: 7, name: "criteria metrics", limit: Duration::from_secs(30), run: criterion_metrics },
        Criterion { id: 8, name: "hyperparameter sweep", limit: Duration::from_secs(600), run: criterion_sweep },
        Criterion { id: 9, name: "determinism across --jobs", limit: Duration::from_secs(300), run: criterion_determinism },
    ];
    let only: Vec<u8> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut shared = Shared::default();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.limit => Err(format!("{d}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), c.limit.as_secs())),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
