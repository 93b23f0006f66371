//! Acceptance checks. Each returns a [`CriterionOutcome`] with measured
//! values in `detail`; nothing here adjusts thresholds to pass.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::buffering::{coverage_score_factor, Buffer, BufferPolicy, CoverageLevel, DecisionKind, Strategy};
use crate::error::Result;
use crate::harness::{default_profile, render_reports, run_experiment_with, ExperimentConfig, RunOptions, RunRecord};
use crate::hierarchy::LabelHierarchy;
use crate::metrics::{average_accuracy, buffer_coverage, AccuracyMatrix};
use crate::replay::{bounded_beta, cross_entropy, replay_loss_img, LossBreakdown};
use crate::rng::RngHandle;
use crate::scenegen::{generate_scene, DwellRegion, Scene, SceneSpec, Trajectory};
use crate::types::{Instance, PointId, Pose, SceneId};

#[derive(Clone, Debug)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CriterionOutcome {
    /// The property held and the run stayed within its time budget.
    pub fn ok(&self) -> bool {
        self.passed && self.elapsed <= self.budget
    }

    pub fn line(&self) -> String {
        format!(
            "{} [{:>2}] {} ({:.1}s of {}s): {}",
            if self.ok() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        )
    }
}

fn outcome(
    id: u32,
    name: &'static str,
    budget_s: u64,
    start: Instant,
    res: Result<(bool, String)>,
) -> CriterionOutcome {
    let (passed, detail) = res.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionOutcome {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_s),
    }
}

/// A one-point scene whose instances carry `frame_index` as item identity.
fn token_scene(scene: SceneId) -> Result<LabelHierarchy> {
    let mut rng = RngHandle::new(0, "token");
    LabelHierarchy::build(scene, &[[0.0, 0.0, 0.0]], 1, 2, &mut rng)
}

fn token(h: &LabelHierarchy, frame: usize) -> Result<Instance> {
    Instance::new(h.scene(), frame, Pose::from_yaw([0.0; 3], 0.0), vec![PointId(0)], h)
}

pub const RESERVOIR_ITEMS: usize = 10_000;
pub const RESERVOIR_CAPACITY: usize = 100;
pub const RESERVOIR_SEEDS: u64 = 2_000;

/// Inclusion χ² p-value at α = 0.01 and per-slot victim counts within 3σ.
pub fn reservoir_exactness(seeds: u64) -> CriterionOutcome {
    let start = Instant::now();
    let res = (|| {
        let h = token_scene(SceneId(0))?;
        let items: Vec<Instance> = (0..RESERVOIR_ITEMS).map(|i| token(&h, i)).collect::<Result<_>>()?;
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let mut inclusion = vec![0u64; RESERVOIR_ITEMS];
        let mut victims = vec![0u64; RESERVOIR_CAPACITY];
        for seed in 0..seeds {
            let mut buf = Buffer::new(RESERVOIR_CAPACITY);
            let mut rng = RngHandle::new(seed, "reservoir-check");
            for it in &items {
                if let DecisionKind::Replaced { victim_index, .. } = buf.observe(&policy, it, None, &mut rng)?.kind {
                    victims[victim_index] += 1;
                }
            }
            for e in buf.entries() {
                inclusion[e.instance.frame_index] += 1;
            }
        }
        let expected = seeds as f64 * RESERVOIR_CAPACITY as f64 / RESERVOIR_ITEMS as f64;
        let chi2: f64 = inclusion
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((RESERVOIR_ITEMS - 1) as f64).expect("positive dof");
        let p = 1.0 - dist.cdf(chi2);

        let total: u64 = victims.iter().sum();
        let q = 1.0 / RESERVOIR_CAPACITY as f64;
        let mu = total as f64 * q;
        let sd = (total as f64 * q * (1.0 - q)).sqrt();
        let worst = victims.iter().map(|&v| (v as f64 - mu).abs() / sd).fold(0.0, f64::max);
        let outside = victims.iter().filter(|&&v| (v as f64 - mu).abs() > 3.0 * sd).count();
        Ok((
            p > 0.01 && outside == 0,
            format!(
                "chi2={chi2:.1} dof={} p={p:.4}; victims={total} worst slot {worst:.2} sigma, {outside} outside 3 sigma",
                RESERVOIR_ITEMS - 1
            ),
        ))
    })();
    outcome(1, "reservoir exactness", 60, start, res)
}

/// Final max-min per-class count of Class-balance over `seeds` seeds.
pub fn class_balance_balancedness(seeds: u64) -> CriterionOutcome {
    let start = Instant::now();
    let res = (|| {
        let hs: Vec<LabelHierarchy> = (0..7).map(|c| token_scene(SceneId(c))).collect::<Result<_>>()?;
        let stream: Vec<Instance> = hs
            .iter()
            .flat_map(|h| (0..1000).map(move |i| token(h, i)))
            .collect::<Result<_>>()?;
        let policy = BufferPolicy::new(Strategy::ClassBalance);
        let mut good = 0;
        let mut worst = 0usize;
        let sizes = [128usize, 256, 512, 1024];
        for seed in 0..seeds {
            let mut all = true;
            for &b in &sizes {
                let mut buf = Buffer::new(b);
                let mut rng = RngHandle::new(seed, format!("balance-check/{b}"));
                for it in &stream {
                    buf.observe(&policy, it, None, &mut rng)?;
                }
                let counts: Vec<usize> = (0..7).map(|c| buf.class_count(SceneId(c))).collect();
                let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
                worst = worst.max(spread);
                all &= spread <= 1;
            }
            good += all as u64;
        }
        Ok((
            good == seeds,
            format!("{good}/{seeds} seeds balanced across B in {sizes:?}; worst spread {worst}"),
        ))
    })();
    outcome(2, "class-balance balancedness", 30, start, res)
}

/// Grid run shared by the coverage, forgetting and accuracy-trend checks:
/// default profile, all four strategies, B in {128, 256}.
pub fn default_profile_run(seeds: u64, jobs: Option<usize>) -> Result<RunRecord> {
    let cfg = ExperimentConfig {
        strategies: Strategy::ALL.to_vec(),
        buffer_sizes: vec![128, 256],
        seeds: (0..seeds).collect(),
        trace_losses: false,
        ..ExperimentConfig::default()
    };
    run_experiment_with(
        &cfg,
        &RunOptions {
            jobs,
            decision_log_dir: None,
        },
    )
}

fn by_seed(rec: &RunRecord, s: Strategy, b: usize) -> BTreeMap<u64, &crate::harness::CellResult> {
    rec.cells
        .iter()
        .filter(|c| c.strategy == s && c.buffer_size == b)
        .filter_map(|c| c.result().map(|r| (c.seed, r)))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Coverage ordering on the shared run. `setup` is the time already spent
/// producing `rec`.
pub fn coverage_dominance(rec: &RunRecord, setup: Duration) -> CriterionOutcome {
    let start = Instant::now() - setup;
    let res: Result<(bool, String)> = {
        let mut ok = true;
        let mut parts = Vec::new();
        for b in [128usize, 256] {
            let cov = |s| -> BTreeMap<u64, f64> {
                by_seed(rec, s, b)
                    .into_iter()
                    .filter_map(|(k, r)| r.final_coverage().map(|c| (k, c.average)))
                    .collect()
            };
            let (r, cb, bc) = (
                cov(Strategy::Reservoir),
                cov(Strategy::ClassBalance),
                cov(Strategy::BuffCs),
            );
            let seeds: Vec<u64> = bc
                .keys()
                .filter(|k| cb.contains_key(k) && r.contains_key(k))
                .copied()
                .collect();
            let m = |x: &BTreeMap<u64, f64>| mean(&seeds.iter().map(|k| x[k]).collect::<Vec<_>>());
            let (mr, mcb, mbc) = (m(&r), m(&cb), m(&bc));
            let wins = seeds.iter().filter(|k| bc[k] >= cb[k]).count();
            let need = (seeds.len() * 9).div_ceil(10);
            ok &= mbc > mcb && mcb > mr && wins >= need && seeds.len() == rec.config.seeds.len();
            if b == 256 {
                ok &= mbc - mcb >= 0.02;
            }
            parts.push(format!(
                "B={b}: R={mr:.4} CB={mcb:.4} BCS={mbc:.4} (+{:.2} pp), BCS>=CB in {wins}/{}",
                100.0 * (mbc - mcb),
                seeds.len()
            ));
        }
        Ok((ok, parts.join("; ")))
    };
    outcome(3, "buff-cs coverage dominance", 300, start, res)
}

pub const SMALL_SCENE_POINTS: usize = 150;
pub const SMALL_SCENE_BUFFER: usize = 64;

/// Small scenes for the point-level comparison.
pub fn small_scenes(seed: u64) -> Result<Vec<Scene>> {
    (0..3)
        .map(|i| {
            let spec = SceneSpec {
                name: format!("small{i}"),
                extent: [3.0, 3.0, 1.0],
                point_count: SMALL_SCENE_POINTS,
                trajectory: Trajectory::BiasedDwell {
                    dwell_fraction: 0.8,
                    dwell_region: DwellRegion::FrontHalf,
                },
                frames: 120,
                view_radius: 0.5,
                seed: format!("small{i}"),
                levels: 2,
                branching: 5,
            };
            generate_scene(&spec, SceneId(i), &RngHandle::new(seed, format!("small/{i}")))
        })
        .collect()
}

/// Point-level coverage after streaming `scenes` through Buff-CS using
/// `level` as the coverage factor.
pub fn point_coverage(scenes: &[Scene], level: CoverageLevel, capacity: usize, seed: u64) -> Result<f64> {
    let policy = BufferPolicy::new(Strategy::BuffCs).with_coverage(level);
    let mut buf = Buffer::new(capacity);
    for s in scenes {
        let mut rng = RngHandle::new(seed, format!("buffer/cs/{}", s.id));
        for f in &s.frames {
            buf.observe(&policy, f, Some(&s.hierarchy), &mut rng)?;
        }
    }
    let hs: BTreeMap<SceneId, &LabelHierarchy> = scenes.iter().map(|s| (s.id, &s.hierarchy)).collect();
    Ok(buffer_coverage(&buf, &hs, CoverageLevel::Exact3D)?.average)
}

pub fn exact3d_oracle(seeds: u64, cases: usize) -> CriterionOutcome {
    let start = Instant::now();
    let res = (|| {
        let mut dominated = 0;
        let mut gaps = Vec::new();
        for seed in 0..seeds {
            let scenes = small_scenes(seed)?;
            let c1 = point_coverage(&scenes, CoverageLevel::Cluster(1), SMALL_SCENE_BUFFER, seed)?;
            let c3 = point_coverage(&scenes, CoverageLevel::Exact3D, SMALL_SCENE_BUFFER, seed)?;
            dominated += (c3 >= c1) as u64;
            gaps.push(c3 - c1);
        }

        // implication on random (buffer, instance) pairs
        let scenes = small_scenes(seeds)?;
        let mut rng = RngHandle::new(seeds, "implication");
        let (mut novel1, mut violations) = (0usize, 0usize);
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let mut checked = 0;
        while checked < cases {
            let s = &scenes[rng.uniform_index(scenes.len())?];
            let mut buf = Buffer::new(1 + rng.uniform_index(12)?);
            for _ in 0..rng.uniform_index(16)? {
                let f = &s.frames[rng.uniform_index(s.frames.len())?];
                buf.observe(&policy, f, Some(&s.hierarchy), &mut rng)?;
            }
            for _ in 0..20 {
                let q = &s.frames[rng.uniform_index(s.frames.len())?];
                let cs1 = coverage_score_factor(&buf, q, &s.hierarchy, CoverageLevel::Cluster(1))?;
                if !cs1.is_empty() {
                    novel1 += 1;
                    let cs3 = coverage_score_factor(&buf, q, &s.hierarchy, CoverageLevel::Exact3D)?;
                    violations += cs3.is_empty() as usize;
                }
                checked += 1;
            }
        }
        Ok((
            dominated == seeds && violations == 0,
            format!(
                "Exact3D >= cs_1 point coverage in {dominated}/{seeds} seeds (mean gap {:+.4}); {violations} violations in {novel1} coarse-novel of {checked} cases",
                mean(&gaps)
            ),
        ))
    })();
    outcome(4, "cs_1 vs exact-3d oracle", 120, start, res)
}

/// Past-scene collapse without a buffer and survival with one.
pub fn forgetting_surrogate(rec: &RunRecord, setup: Duration) -> CriterionOutcome {
    let start = Instant::now() - setup;
    let res: Result<(bool, String)> = {
        let past = |m: &AccuracyMatrix| {
            m.entries()
                .filter(|(i, j, _)| j > i)
                .map(|(_, _, a)| a)
                .collect::<Vec<_>>()
        };
        let mut ok = true;
        let mut parts = Vec::new();
        let mut nonzero = 0;
        let mut count = 0;
        for b in &rec.config.buffer_sizes {
            for (_, r) in by_seed(rec, Strategy::WithoutBuffering, *b) {
                count += 1;
                nonzero += past(&r.accuracy).iter().filter(|&&a| a != 0.0).count();
            }
        }
        ok &= count > 0 && nonzero == 0;
        parts.push(format!(
            "without buffering: {nonzero} nonzero past entries over {count} cells"
        ));
        for b in rec.config.buffer_sizes.iter().filter(|&&b| b >= 128) {
            for s in [Strategy::Reservoir, Strategy::ClassBalance, Strategy::BuffCs] {
                let cells = by_seed(rec, s, *b);
                let good = cells
                    .values()
                    .filter(|r| past(&r.accuracy).iter().all(|&a| a > 0.0))
                    .count();
                let need = (rec.config.seeds.len() * 95).div_ceil(100);
                ok &= good >= need;
                parts.push(format!("{s}@{b}: {good}/{}", rec.config.seeds.len()));
            }
        }
        Ok((ok, parts.join("; ")))
    };
    outcome(5, "catastrophic-forgetting surrogate", 120, start, res)
}

/// Lower-triangular accuracy rows, `None` where a scene is not yet seen.
pub type MatrixRows = Vec<Vec<Option<f64>>>;

/// Matrices with hand-computed average accuracies.
pub fn average_accuracy_cases() -> Vec<(MatrixRows, Vec<f64>)> {
    let s = Some;
    vec![
        (
            vec![
                vec![s(0.9), s(0.6), s(0.3)],
                vec![None, s(1.0), s(0.5)],
                vec![None, None, s(0.7)],
            ],
            vec![0.6, 0.75, 0.7],
        ),
        (vec![vec![s(1.0)]], vec![1.0]),
        (vec![vec![s(0.0), s(0.0)], vec![None, s(0.0)]], vec![0.0, 0.0]),
        (vec![vec![s(0.5), s(0.25)], vec![None, s(0.75)]], vec![0.375, 0.75]),
        (
            vec![
                vec![s(0.8), s(0.4), s(0.2), s(0.2)],
                vec![None, s(0.9), s(0.3), s(0.0)],
                vec![None, None, s(1.0), s(0.5)],
                vec![None, None, None, s(0.6)],
            ],
            vec![0.4, 0.4, 0.75, 0.6],
        ),
    ]
}

pub fn average_accuracy_check() -> CriterionOutcome {
    let start = Instant::now();
    let res = (|| {
        let mut worst = 0.0f64;
        for (rows, want) in average_accuracy_cases() {
            let m = AccuracyMatrix::from_rows(&rows)?;
            for (i, w) in want.iter().enumerate() {
                worst = worst.max((average_accuracy(&m, i)? - w).abs());
            }
        }
        Ok((worst <= 1e-15, format!("max abs error {worst:e} over 5 matrices")))
    })();
    outcome(6, "average-accuracy metric", 1, start, res)
}

pub fn hierarchy_invariants(scenes: usize, profile_seeds: u64) -> CriterionOutcome {
    let start = Instant::now();
    let res = (|| {
        let mut rng = RngHandle::new(7, "random-scenes");
        let mut bad = Vec::new();
        for k in 0..scenes {
            let n = 1 + rng.uniform_index(400)?;
            let ext = [
                0.5 + 4.0 * rng.uniform(),
                0.5 + 4.0 * rng.uniform(),
                0.2 + 2.0 * rng.uniform(),
            ];
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [ext[0] * rng.uniform(), ext[1] * rng.uniform(), ext[2] * rng.uniform()])
                .collect();
            let levels = 1 + rng.uniform_index(3)?;
            let branching = 2 + rng.uniform_index(24)?;
            let mut hr = rng.substream(&format!("h{k}"));
            let h = LabelHierarchy::build(SceneId(k as u32), &pts, levels, branching, &mut hr)?;
            if let Err(e) = h.validate() {
                bad.push(format!("scene {k}: {e}"));
            }
        }
        let mut cards = Vec::new();
        let mut bound_ok = true;
        for seed in 0..profile_seeds {
            for (i, spec) in default_profile().iter().enumerate() {
                let rng = RngHandle::new(seed, format!("scene/{i}/{}", spec.seed));
                let s = generate_scene(spec, SceneId(i as u32), &rng)?;
                let (c1, c2) = (s.hierarchy.cardinality(1), s.hierarchy.cardinality(2));
                bound_ok &= c1 == 25 && c2 <= 625 && c2 > c1 && s.hierarchy.validate().is_ok();
                cards.push(c2);
            }
        }
        Ok((
            bad.is_empty() && bound_ok,
            format!(
                "{} of {scenes} random hierarchies invalid{}; default profile level-1 = 25, level-2 in [{}, {}] (bound 625): {}",
                bad.len(),
                bad.first().map(|b| format!(" ({b})")).unwrap_or_default(),
                cards.iter().min().unwrap_or(&0),
                cards.iter().max().unwrap_or(&0),
                if bound_ok { "ok" } else { "violated" }
            ),
        ))
    })();
    outcome(7, "hierarchy invariants", 60, start, res)
}

pub fn bounded_beta_grid() -> CriterionOutcome {
    let start = Instant::now();
    let beta = 1e5;
    let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let mut mismatches = 0;
    let mut ties = 0;
    for &p in &grid {
        for &s in &grid {
            let want = if p > s { beta } else { 0.0 };
            ties += (p == s) as usize;
            mismatches += (bounded_beta(p, s, beta) != want) as usize;
        }
    }
    let res = Ok((
        mismatches == 0 && ties == 100,
        format!("{mismatches} mismatches on 100x100 grid with {ties} ties"),
    ));
    outcome(8, "bounded-beta rule", 1, start, res)
}

pub fn loss_algebra() -> CriterionOutcome {
    let start = Instant::now();
    let res: Result<(bool, String)> = {
        let mut rng = RngHandle::new(9, "loss-algebra");
        let mut worst_reduce = 0.0f64;
        let mut worst_recompose = 0.0f64;
        for _ in 0..1000 {
            let cls = vec![5.0 * rng.uniform(), 5.0 * rng.uniform()];
            let alphas = [rng.uniform(), rng.uniform()];
            let beta = 1e5 * rng.uniform();
            let l = LossBreakdown::compose(cls.clone(), rng.uniform(), &alphas, beta);
            worst_reduce = worst_reduce.max((replay_loss_img(&l, &[]) - l.total).abs());
            let manual = alphas[0] * cls[0] + alphas[1] * cls[1] + beta * l.regression;
            worst_recompose = worst_recompose.max((l.recomposed_total() - manual).abs() / manual.abs().max(1.0));
        }
        let mut target = vec![0.0; 25];
        target[3] = 1.0;
        let ce_err = (cross_entropy(&target, &[0.0; 25]) - 25f64.ln()).abs();
        let ok = worst_reduce == 0.0 && worst_recompose <= 1e-12 && ce_err <= 1e-12;
        Ok((
            ok,
            format!("empty replay diff {worst_reduce:e}; recomposition rel err {worst_recompose:e}; |CE - ln 25| = {ce_err:e}"),
        ))
    };
    outcome(9, "loss algebra", 1, start, res)
}

/// Renders the reports of two independent runs of `cfg` and compares bytes.
pub fn determinism(cfg: &ExperimentConfig, jobs: Option<usize>) -> CriterionOutcome {
    let start = Instant::now();
    let res = (|| {
        let opts = RunOptions {
            jobs,
            decision_log_dir: None,
        };
        let a = render_reports(&run_experiment_with(cfg, &opts)?)?;
        let b = render_reports(&run_experiment_with(cfg, &opts)?)?;
        let differing: Vec<&str> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
        let bytes: usize = a.iter().map(|(_, t)| t.len()).sum();
        Ok((
            differing.is_empty() && a.len() == b.len(),
            format!("{} files, {bytes} bytes; differing: {differing:?}", a.len()),
        ))
    })();
    outcome(10, "determinism", 300, start, res)
}

/// Past-scene mean accuracy of the scene at task position `i`.
fn past_mean(m: &AccuracyMatrix, i: usize) -> Option<f64> {
    let v: Vec<f64> = (i + 1..m.n_scenes()).filter_map(|j| m.get(i, j)).collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn accuracy_trend(rec: &RunRecord, setup: Duration) -> CriterionOutcome {
    let start = Instant::now() - setup;
    let res: Result<(bool, String)> = {
        let b = 256;
        // two smallest streams, by configured frame count
        let mut by_len: Vec<(usize, usize)> = rec
            .config
            .scene_profile
            .iter()
            .enumerate()
            .map(|(i, s)| (s.frames, i))
            .collect();
        by_len.sort();
        let order = &rec.order.0;
        let mut ok = true;
        let mut parts = Vec::new();
        let (r, cb, bc) = (
            by_seed(rec, Strategy::Reservoir, b),
            by_seed(rec, Strategy::ClassBalance, b),
            by_seed(rec, Strategy::BuffCs, b),
        );
        for &(_, sid) in by_len.iter().take(2) {
            let pos = order.iter().position(|s| s.0 as usize == sid).expect("scene in order");
            if pos + 1 == order.len() {
                parts.push(format!("{}: last task, no past stages", rec.scene_names[sid]));
                ok = false;
                continue;
            }
            let (mut w1, mut w2, mut n) = (0, 0, 0);
            let (mut sr, mut scb, mut sbc) = (Vec::new(), Vec::new(), Vec::new());
            for (seed, rb) in &bc {
                let (Some(rc), Some(rr)) = (cb.get(seed), r.get(seed)) else {
                    continue;
                };
                let (Some(a_bc), Some(a_cb), Some(a_r)) = (
                    past_mean(&rb.accuracy, pos),
                    past_mean(&rc.accuracy, pos),
                    past_mean(&rr.accuracy, pos),
                ) else {
                    continue;
                };
                n += 1;
                w1 += (a_bc >= a_cb) as usize;
                w2 += (a_cb >= a_r) as usize;
                sbc.push(a_bc);
                scb.push(a_cb);
                sr.push(a_r);
            }
            let need = (rec.config.seeds.len() * 8).div_ceil(10);
            ok &= w1 >= need && w2 >= need && n == rec.config.seeds.len();
            parts.push(format!(
                "{}: mean R={:.4} CB={:.4} BCS={:.4}; BCS>=CB {w1}/{n}, CB>=R {w2}/{n}",
                rec.scene_names[sid],
                mean(&sr),
                mean(&scb),
                mean(&sbc)
            ));
        }
        Ok((ok, parts.join("; ")))
    };
    outcome(11, "accuracy-trend surrogate", 600, start, res)
}

/// Small configuration for the determinism check.
pub fn determinism_config() -> ExperimentConfig {
    ExperimentConfig {
        strategies: Strategy::ALL.to_vec(),
        buffer_sizes: vec![128, 256],
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Criterion ids to run; empty runs all.
    pub only: Vec<u32>,
    pub profile_seeds: u64,
    pub jobs: Option<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            only: Vec::new(),
            profile_seeds: 100,
            jobs: None,
        }
    }
}

/// Runs the selected criteria in id order.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CriterionOutcome> {
    let want = |id: u32| opts.only.is_empty() || opts.only.contains(&id);
    let mut out = Vec::new();
    if want(1) {
        out.push(reservoir_exactness(RESERVOIR_SEEDS));
    }
    if want(2) {
        out.push(class_balance_balancedness(100));
    }
    let shared = if want(3) || want(5) || want(11) {
        let t = Instant::now();
        Some((default_profile_run(opts.profile_seeds, opts.jobs), t.elapsed()))
    } else {
        None
    };
    let with_shared = |id: u32,
                       name: &'static str,
                       budget: u64,
                       f: &dyn Fn(&RunRecord, Duration) -> CriterionOutcome| {
        match &shared {
            Some((Ok(rec), t)) => f(rec, *t),
            Some((Err(e), t)) => CriterionOutcome {
                id,
                name,
                passed: false,
                detail: format!("grid run failed: {e}"),
                elapsed: *t,
                budget: Duration::from_secs(budget),
            },
            None => unreachable!(),
        }
    };
    if want(3) {
        out.push(with_shared(3, "buff-cs coverage dominance", 300, &coverage_dominance));
    }
    if want(4) {
        out.push(exact3d_oracle(50, 100_000));
    }
    if want(5) {
        out.push(with_shared(
            5,
            "catastrophic-forgetting surrogate",
            120,
            &forgetting_surrogate,
        ));
    }
    if want(6) {
        out.push(average_accuracy_check());
    }
    if want(7) {
        out.push(hierarchy_invariants(1000, 3));
    }
    if want(8) {
        out.push(bounded_beta_grid());
    }
    if want(9) {
        out.push(loss_algebra());
    }
    if want(10) {
        out.push(determinism(&determinism_config(), opts.jobs));
    }
    if want(11) {
        out.push(with_shared(11, "accuracy-trend surrogate", 600, &accuracy_trend));
    }
    out
}
