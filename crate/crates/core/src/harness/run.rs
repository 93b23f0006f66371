use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ReplayMode};
use crate::buffering::{Buffer, BufferPolicy, CoverageLevel, DecisionRecord, Strategy};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::localizer::{evaluate_scene, MemoryIndex};
use crate::metrics::{buffer_coverage, class_distribution, AccuracyMatrix, CoverageReport};
use crate::replay::{distill_loss, replay_loss_img, replay_loss_rep, sample_replay_batch, task_loss, LearnerOracle};
use crate::rng::RngHandle;
use crate::scenegen::{generate_scene, make_stream, Scene, StreamEvent, StreamOrder};
use crate::types::{Instance, SceneId};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` lets rayon decide.
    pub jobs: Option<usize>,
    /// Directory for one NDJSON decision log per cell.
    pub decision_log_dir: Option<PathBuf>,
}

/// Mean losses of one task's training pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    pub scene: SceneId,
    pub steps: usize,
    pub mean_task_loss: f64,
    pub mean_total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// Rows and columns follow the task order.
    pub accuracy: AccuracyMatrix,
    /// Buffer coverage over the seen scenes after each task.
    pub coverage_history: Vec<CoverageReport>,
    /// Stored entries per scene after each task.
    pub distributions: Vec<BTreeMap<SceneId, usize>>,
    pub loss_trace: Vec<TaskLoss>,
    pub buffer_bytes: usize,
}

impl CellResult {
    pub fn final_coverage(&self) -> Option<&CoverageReport> {
        self.coverage_history.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Done(Box<CellResult>),
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub strategy: Strategy,
    pub buffer_size: usize,
    pub outcome: CellOutcome,
}

impl CellRecord {
    pub fn result(&self) -> Option<&CellResult> {
        match &self.outcome {
            CellOutcome::Done(r) => Some(r),
            CellOutcome::Failed { .. } => None,
        }
    }

    pub fn failed(&self) -> bool {
        matches!(self.outcome, CellOutcome::Failed { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Indexed by scene id.
    pub scene_names: Vec<String>,
    pub order: StreamOrder,
    pub cells: Vec<CellRecord>,
}

impl RunRecord {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }

    pub fn scene_name(&self, id: SceneId) -> &str {
        self.scene_names.get(id.0 as usize).map_or("?", String::as_str)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Scenes of `cfg` under `seed`. Scene `i` gets id `i`.
pub fn generate_scenes(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Scene>> {
    cfg.scene_profile
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let rng = RngHandle::new(seed, format!("scene/{i}/{}", spec.seed));
            generate_scene(spec, SceneId(i as u32), &rng)
        })
        .collect()
}

/// Train/test split of one seed's scenes, shared by every cell of that seed.
struct Prepared {
    train: Vec<Scene>,
    test: Vec<Vec<Instance>>,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let scenes = generate_scenes(cfg, seed)?;
    let mut train = Vec::with_capacity(scenes.len());
    let mut test = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let mut rng = RngHandle::new(seed, format!("split/{}", s.id));
        let (tr, te) = s.split(&mut rng);
        train.push(s.with_frames(tr));
        test.push(te);
    }
    Ok(Prepared { train, test })
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Decision(&'a DecisionRecord),
    Loss(&'a TaskLoss),
}

struct Log(Option<(PathBuf, BufWriter<File>)>);

impl Log {
    fn open(dir: Option<&Path>, seed: u64, strategy: Strategy, b: usize) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Log(None)) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("decisions_{strategy}_B{b}_seed{seed}.ndjson"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Log(Some((path, BufWriter::new(file)))))
    }

    fn enabled(&self) -> bool {
        self.0.is_some()
    }

    fn write(&mut self, line: LogLine<'_>) -> Result<()> {
        if let Some((path, w)) = &mut self.0 {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((path, mut w)) = self.0 {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn run_prepared(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    order: &StreamOrder,
    seed: u64,
    strategy: Strategy,
    capacity: usize,
    opts: &RunOptions,
) -> Result<CellResult> {
    let n = prep.train.len();
    let policy = BufferPolicy::new(strategy)
        .with_coverage(cfg.coverage_level)
        .with_victim(cfg.victim_policy);
    let hierarchies: BTreeMap<SceneId, &LabelHierarchy> = prep.train.iter().map(|s| (s.id, &s.hierarchy)).collect();
    let points = |id: SceneId| prep.train[id.0 as usize].points.as_slice();

    let mut buf = Buffer::new(capacity);
    let mut accuracy = AccuracyMatrix::new(n);
    let mut coverage_history = Vec::with_capacity(n);
    let mut distributions = Vec::with_capacity(n);
    let mut loss_trace = Vec::new();
    let mut replay_rng = RngHandle::new(seed, format!("replay/{strategy}/B{capacity}"));
    let mut log = Log::open(opts.decision_log_dir.as_deref(), seed, strategy, capacity)?;

    let mut current: Vec<&Instance> = Vec::new();
    let mut step: u64 = 0;
    let mut loss_acc = (0usize, 0.0, 0.0);

    for event in make_stream(&prep.train, order)? {
        match event {
            StreamEvent::Frame { task, instance } => {
                current.push(instance);
                if cfg.trace_losses {
                    let (task_l, total) = training_step(cfg, &buf, instance, task, &points, &mut replay_rng)?;
                    loss_acc.0 += 1;
                    loss_acc.1 += task_l;
                    loss_acc.2 += total;
                }
            }
            StreamEvent::TaskEnd { task, scene } => {
                if cfg.trace_losses {
                    let steps = loss_acc.0.max(1) as f64;
                    let tl = TaskLoss {
                        task,
                        scene,
                        steps: loss_acc.0,
                        mean_task_loss: loss_acc.1 / steps,
                        mean_total_loss: loss_acc.2 / steps,
                    };
                    log.write(LogLine::Loss(&tl))?;
                    loss_trace.push(tl);
                    loss_acc = (0, 0.0, 0.0);
                }

                // buffering epoch over the finished task
                let h = hierarchies[&scene];
                let pts = points(scene);
                let mut rng = RngHandle::new(seed, format!("buffer/{strategy}/scene{scene}"));
                for inst in &current {
                    step += 1;
                    let decision = match cfg.replay_mode {
                        ReplayMode::Img => buf.observe(&policy, inst, Some(h), &mut rng)?,
                        ReplayMode::Rep => {
                            let learner = &cfg.learner;
                            let make = |i: &Instance| learner.predict(i, pts, task);
                            buf.observe_with(&policy, inst, Some(h), &mut rng, Some(make))?
                        }
                    };
                    if log.enabled() {
                        let cov = buf.class_union(h, CoverageLevel::Cluster(1))?.len() as f64
                            / h.cardinality_checked(1)? as f64;
                        log.write(LogLine::Decision(&DecisionRecord::new(
                            step, scene, strategy, &decision, cov,
                        )))?;
                    }
                }

                // evaluation with the buffer plus the task just learned
                let memory = MemoryIndex::new(buf.entries().iter().map(|e| &e.instance).chain(current.iter().copied()));
                for (i, sid) in order.0.iter().take(task + 1).enumerate() {
                    let acc = evaluate_scene(&prep.test[sid.0 as usize], &memory, &cfg.localizer)?;
                    accuracy.set(i, task, acc)?;
                }
                current.clear();

                let seen: BTreeMap<SceneId, &LabelHierarchy> =
                    order.0[..=task].iter().map(|s| (*s, hierarchies[s])).collect();
                coverage_history.push(buffer_coverage(&buf, &seen, CoverageLevel::Cluster(cfg.metric_level))?);
                distributions.push(class_distribution(&buf));
            }
        }
    }
    log.finish()?;
    Ok(CellResult {
        accuracy,
        coverage_history,
        distributions,
        loss_trace,
        buffer_bytes: buf.byte_size(),
    })
}

/// One training step's task loss and replay-augmented total.
fn training_step<'a>(
    cfg: &ExperimentConfig,
    buf: &Buffer,
    inst: &Instance,
    stage: usize,
    points: &impl Fn(SceneId) -> &'a [crate::types::Vec3],
    rng: &mut RngHandle,
) -> Result<(f64, f64)> {
    let learner = &cfg.learner;
    let w = &cfg.loss_weights;
    let pred = learner.predict(inst, points(inst.scene), stage)?;
    let cur = task_loss(inst, &pred, points(inst.scene), w)?;
    if buf.is_empty() || cfg.replay_batch == 0 {
        return Ok((cur.total, cur.total));
    }
    let batch = sample_replay_batch(buf, cfg.replay_batch, rng)?;
    let mut gt = Vec::with_capacity(batch.len());
    let mut distill = Vec::with_capacity(batch.len());
    for e in batch {
        let pts = points(e.instance.scene);
        let p = learner.predict(&e.instance, pts, stage)?;
        gt.push(task_loss(&e.instance, &p, pts, w)?);
        if let Some(stored) = &e.payload {
            distill.push(distill_loss(&e.instance, &p, stored, pts, w)?);
        }
    }
    let total = match cfg.replay_mode {
        ReplayMode::Img => replay_loss_img(&cur, &gt),
        ReplayMode::Rep => replay_loss_rep(&cur, &gt, &distill)?,
    };
    Ok((cur.total, total))
}

fn guarded(f: impl FnOnce() -> Result<CellResult>) -> CellOutcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => CellOutcome::Done(Box::new(r)),
        Ok(Err(e)) => CellOutcome::Failed { error: e.to_string() },
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            CellOutcome::Failed { error: msg }
        }
    }
}

/// Runs a single grid cell from scratch.
pub fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    strategy: Strategy,
    buffer_size: usize,
    opts: &RunOptions,
) -> Result<CellResult> {
    cfg.validate()?;
    let order = cfg.order.resolve(cfg.scene_profile.len())?;
    let prep = prepare(cfg, seed)?;
    run_prepared(cfg, &prep, &order, seed, strategy, buffer_size, opts)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_experiment_with(cfg, &RunOptions::default())
}

/// Runs every (seed, strategy, buffer size) cell. A failing cell is recorded
/// as failed and the rest continue. Configuration errors abort the run.
pub fn run_experiment_with(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let order = cfg.order.resolve(cfg.scene_profile.len())?;
    let keys: Vec<(u64, Strategy, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| {
            cfg.strategies
                .iter()
                .flat_map(move |&s| cfg.buffer_sizes.iter().map(move |&b| (seed, s, b)))
        })
        .collect();
    let cells = in_pool(opts, || run_keys(cfg, &order, &keys, opts))?;
    Ok(RunRecord {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        scene_names: cfg.scene_profile.iter().map(|s| s.name.clone()).collect(),
        order,
        cells,
    })
}

fn in_pool<T: Send>(opts: &RunOptions, f: impl FnOnce() -> T + Send) -> Result<T> {
    match opts.jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn run_keys(
    cfg: &ExperimentConfig,
    order: &StreamOrder,
    keys: &[(u64, Strategy, usize)],
    opts: &RunOptions,
) -> Vec<CellRecord> {
    let mut seeds: Vec<u64> = keys.iter().map(|k| k.0).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let prepared: BTreeMap<u64, std::result::Result<Prepared, String>> = seeds
        .par_iter()
        .map(|&s| (s, prepare(cfg, s).map_err(|e| e.to_string())))
        .collect();
    keys.par_iter()
        .map(|&(seed, strategy, buffer_size)| {
            let outcome = match &prepared[&seed] {
                Ok(prep) => guarded(|| run_prepared(cfg, prep, order, seed, strategy, buffer_size, opts)),
                Err(e) => CellOutcome::Failed { error: e.clone() },
            };
            CellRecord {
                seed,
                strategy,
                buffer_size,
                outcome,
            }
        })
        .collect()
}

/// Re-runs only the failed cells of `rec` in place. Returns how many still fail.
pub fn rerun_failed(rec: &mut RunRecord, opts: &RunOptions) -> Result<usize> {
    let cfg = rec.config.clone();
    cfg.validate()?;
    if cfg.hash() != rec.config_hash {
        return Err(Error::Config("record was produced by a different configuration".into()));
    }
    let idx: Vec<usize> = (0..rec.cells.len()).filter(|&i| rec.cells[i].failed()).collect();
    let keys: Vec<_> = idx
        .iter()
        .map(|&i| (rec.cells[i].seed, rec.cells[i].strategy, rec.cells[i].buffer_size))
        .collect();
    let order = rec.order.clone();
    let fresh = in_pool(opts, || run_keys(&cfg, &order, &keys, opts))?;
    for (i, cell) in idx.into_iter().zip(fresh) {
        rec.cells[i] = cell;
    }
    Ok(rec.failed_cells())
}
