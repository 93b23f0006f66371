//! Synthetic scenes: a uniform point cloud in a box, a camera trajectory, and
//! the frames it observes (every point within `view_radius` of the camera).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, DEFAULT_BRANCHING, DEFAULT_LEVELS};
use crate::rng::RngHandle;
use crate::types::{dist_sq, Instance, PointId, Pose, SceneId, Vec3};

/// Axis-aligned region the camera lingers in under [`Trajectory::BiasedDwell`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellRegion {
    /// `x` in the lower half of the box.
    FrontHalf,
    /// `x` in the upper half of the box.
    BackHalf,
    Box {
        min: Vec3,
        max: Vec3,
    },
}

impl DwellRegion {
    pub fn bounds(&self, extent: &Vec3) -> (Vec3, Vec3) {
        match *self {
            DwellRegion::FrontHalf => ([0.0; 3], [extent[0] / 2.0, extent[1], extent[2]]),
            DwellRegion::BackHalf => ([extent[0] / 2.0, 0.0, 0.0], *extent),
            DwellRegion::Box { min, max } => {
                let lo = [0, 1, 2].map(|d| min[d].clamp(0.0, extent[d]));
                let hi = [0, 1, 2].map(|d| max[d].clamp(lo[d], extent[d]));
                (lo, hi)
            }
        }
    }

    pub fn contains(&self, extent: &Vec3, p: &Vec3) -> bool {
        let (lo, hi) = self.bounds(extent);
        (0..3).all(|d| p[d] >= lo[d] && p[d] <= hi[d])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Lawnmower sweep across the box at mid height; new regions keep
    /// appearing until the end.
    SweepGrid,
    /// One loop around the box center, facing inward.
    RoomLoop,
    /// `dwell_fraction` of the frames wander inside `dwell_region` (far enough
    /// from its interior faces that nothing outside it is visible), then the
    /// camera sweeps the whole box.
    BiasedDwell {
        dwell_fraction: f64,
        dwell_region: DwellRegion,
    },
}

fn default_levels() -> usize {
    DEFAULT_LEVELS
}

fn default_branching() -> usize {
    DEFAULT_BRANCHING
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    /// Box dimensions in meters; the box spans `[0, extent]`.
    pub extent: Vec3,
    pub point_count: usize,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub view_radius: f64,
    /// Random sub-stream tag for this scene.
    pub seed: String,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config(format!("scene `{}`: extent must be positive", self.name)));
        }
        if !(self.view_radius.is_finite() && self.view_radius > 0.0) {
            return Err(Error::Config(format!(
                "scene `{}`: view_radius must be positive",
                self.name
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config(format!(
                "scene `{}`: frames must be at least 1",
                self.name
            )));
        }
        if self.levels == 0 || self.branching < 2 {
            return Err(Error::Config(format!(
                "scene `{}`: need levels >= 1 and branching >= 2",
                self.name
            )));
        }
        if let Trajectory::BiasedDwell { dwell_fraction, .. } = self.trajectory {
            if !(0.0..=1.0).contains(&dwell_fraction) {
                return Err(Error::Config(format!(
                    "scene `{}`: dwell_fraction must lie in [0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: SceneId,
    pub name: String,
    pub spec: SceneSpec,
    pub points: Vec<Vec3>,
    pub hierarchy: LabelHierarchy,
    /// Frames in trajectory order.
    pub frames: Vec<Instance>,
}

/// Points within `radius` of `center`, by exhaustive scan.
pub fn visible_points(points: &[Vec3], center: &Vec3, radius: f64) -> Vec<PointId> {
    let r2 = radius * radius;
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| dist_sq(p, center) <= r2)
        .map(|(i, _)| PointId(i as u32))
        .collect()
}

pub fn generate_scene(spec: &SceneSpec, id: SceneId, rng: &RngHandle) -> Result<Scene> {
    spec.validate()?;
    if spec.point_count == 0 {
        return Err(Error::EmptyScene);
    }
    let ext = spec.extent;
    let mut prng = rng.substream("points");
    let points: Vec<Vec3> = (0..spec.point_count)
        .map(|_| {
            [
                prng.uniform() * ext[0],
                prng.uniform() * ext[1],
                prng.uniform() * ext[2],
            ]
        })
        .collect();
    let hierarchy = LabelHierarchy::build(
        id,
        &points,
        spec.levels,
        spec.branching,
        &mut rng.substream("hierarchy"),
    )?;

    let poses = trajectory_poses(spec, &mut rng.substream("trajectory"));
    let mut frames = Vec::with_capacity(poses.len());
    for (i, mut pose) in poses.into_iter().enumerate() {
        let mut seen = visible_points(&points, &pose.position, spec.view_radius);
        if seen.is_empty() {
            pose.position = approach_nearest(&points, &pose.position, spec.view_radius);
            seen = visible_points(&points, &pose.position, spec.view_radius);
        }
        frames.push(Instance::new(id, i, pose, seen, &hierarchy)?);
    }
    Ok(Scene {
        id,
        name: if spec.name.is_empty() {
            format!("scene{}", id.0)
        } else {
            spec.name.clone()
        },
        spec: spec.clone(),
        points,
        hierarchy,
        frames,
    })
}

/// Moves the camera to half the view radius from the point nearest to it.
fn approach_nearest(points: &[Vec3], cam: &Vec3, radius: f64) -> Vec3 {
    let nearest = points
        .iter()
        .min_by(|a, b| dist_sq(a, cam).total_cmp(&dist_sq(b, cam)))
        .expect("scene has points");
    let d = dist_sq(nearest, cam).sqrt();
    if d == 0.0 {
        return *nearest;
    }
    let s = 0.5 * radius / d;
    [0, 1, 2].map(|k| nearest[k] + (cam[k] - nearest[k]) * s)
}

fn trajectory_poses(spec: &SceneSpec, rng: &mut RngHandle) -> Vec<Pose> {
    let ext = spec.extent;
    let r = spec.view_radius;
    match spec.trajectory {
        Trajectory::SweepGrid => sweep_poses(&ext, r, spec.frames, rng),
        Trajectory::RoomLoop => {
            let c = ext.map(|e| e / 2.0);
            (0..spec.frames)
                .map(|f| {
                    let t = std::f64::consts::TAU * f as f64 / spec.frames as f64;
                    let pos = clamp_box(
                        [
                            c[0] + 0.3 * ext[0] * t.cos() + 0.02 * rng.normal(),
                            c[1] + 0.3 * ext[1] * t.sin() + 0.02 * rng.normal(),
                            c[2] + 0.02 * rng.normal(),
                        ],
                        &ext,
                    );
                    Pose::from_yaw(pos, (c[1] - pos[1]).atan2(c[0] - pos[0]))
                })
                .collect()
        }
        Trajectory::BiasedDwell {
            dwell_fraction,
            dwell_region,
        } => {
            let n_dwell = ((dwell_fraction * spec.frames as f64).round() as usize).min(spec.frames);
            let (lo, hi) = dwell_bounds(&dwell_region, &ext, r);
            let mut pos = [0, 1, 2].map(|d| lo[d] + rng.uniform() * (hi[d] - lo[d]));
            let mut yaw = rng.uniform() * std::f64::consts::TAU;
            let mut poses = Vec::with_capacity(spec.frames);
            for _ in 0..n_dwell {
                for d in 0..3 {
                    pos[d] = reflect(pos[d] + 0.1 * rng.normal(), lo[d], hi[d]);
                }
                yaw += 0.1 * rng.normal();
                poses.push(Pose::from_yaw(pos, yaw));
            }
            poses.extend(sweep_poses(&ext, r, spec.frames - n_dwell, rng));
            poses
        }
    }
}

/// Camera bounds for dwelling: the region, pulled in by the view radius on
/// every face that is not also a face of the scene box.
fn dwell_bounds(region: &DwellRegion, ext: &Vec3, r: f64) -> (Vec3, Vec3) {
    let (lo, hi) = region.bounds(ext);
    let mut out_lo = lo;
    let mut out_hi = hi;
    for d in 0..3 {
        if lo[d] > 0.0 {
            out_lo[d] = lo[d] + r;
        }
        if hi[d] < ext[d] {
            out_hi[d] = hi[d] - r;
        }
        if out_lo[d] > out_hi[d] {
            let mid = 0.5 * (lo[d] + hi[d]);
            out_lo[d] = mid;
            out_hi[d] = mid;
        }
    }
    (out_lo, out_hi)
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let mut t = (v - lo).rem_euclid(2.0 * span);
    if t > span {
        t = 2.0 * span - t;
    }
    lo + t
}

fn clamp_box(p: Vec3, ext: &Vec3) -> Vec3 {
    [0, 1, 2].map(|d| p[d].clamp(0.0, ext[d]))
}

/// `frames` poses evenly spaced along a lawnmower path over the box: rows
/// along x, one view radius apart in y, at mid height.
fn sweep_poses(ext: &Vec3, r: f64, frames: usize, rng: &mut RngHandle) -> Vec<Pose> {
    if frames == 0 {
        return Vec::new();
    }
    let rows = ((ext[1] / r).ceil() as usize).max(1);
    let z = ext[2] / 2.0;
    let mut waypoints: Vec<Vec3> = Vec::with_capacity(2 * rows);
    for k in 0..rows {
        let y = (k as f64 + 0.5) * ext[1] / rows as f64;
        let (a, b) = if k % 2 == 0 { (0.0, ext[0]) } else { (ext[0], 0.0) };
        waypoints.push([a, y, z]);
        waypoints.push([b, y, z]);
    }
    let seg_len: Vec<f64> = waypoints.windows(2).map(|w| dist_sq(&w[0], &w[1]).sqrt()).collect();
    let total: f64 = seg_len.iter().sum();
    let mut poses = Vec::with_capacity(frames);
    for f in 0..frames {
        let s = if frames == 1 {
            0.0
        } else {
            total * f as f64 / (frames - 1) as f64
        };
        let mut acc = 0.0;
        let mut seg = seg_len.len().saturating_sub(1);
        for (i, &l) in seg_len.iter().enumerate() {
            if s <= acc + l || i + 1 == seg_len.len() {
                seg = i;
                break;
            }
            acc += l;
        }
        let (a, b) = if waypoints.len() >= 2 {
            (waypoints[seg], waypoints[seg + 1])
        } else {
            (waypoints[0], waypoints[0])
        };
        let l = seg_len.get(seg).copied().unwrap_or(0.0);
        let t = if l > 0.0 { ((s - acc) / l).clamp(0.0, 1.0) } else { 0.0 };
        let pos = clamp_box([0, 1, 2].map(|d| a[d] + t * (b[d] - a[d]) + 0.02 * rng.normal()), ext);
        poses.push(Pose::from_yaw(pos, (b[1] - a[1]).atan2(b[0] - a[0])));
    }
    poses
}

impl Scene {
    /// Stratified hold-out: one random frame out of every block of five
    /// consecutive frames goes to the test set (a trailing partial block
    /// contributes one with probability proportional to its length). Both
    /// sides are kept non-empty; a single-frame scene uses its frame for both.
    pub fn split(&self, rng: &mut RngHandle) -> (Vec<Instance>, Vec<Instance>) {
        const BLOCK: usize = 5;
        let n = self.frames.len();
        if n == 1 {
            return (self.frames.clone(), self.frames.clone());
        }
        let mut is_test = vec![false; n];
        for start in (0..n).step_by(BLOCK) {
            let len = BLOCK.min(n - start);
            let pick = rng.uniform_index(len).expect("block non-empty");
            if len == BLOCK || rng.uniform() < len as f64 / BLOCK as f64 {
                is_test[start + pick] = true;
            }
        }
        if !is_test.iter().any(|&t| t) {
            is_test[n - 1] = true;
        }
        let mut train = Vec::with_capacity(n);
        let mut test = Vec::with_capacity(n / BLOCK + 1);
        for (f, t) in self.frames.iter().zip(is_test) {
            if t {
                test.push(f.clone());
            } else {
                train.push(f.clone());
            }
        }
        (train, test)
    }

    /// The same scene restricted to `frames`.
    pub fn with_frames(&self, frames: Vec<Instance>) -> Scene {
        Scene { frames, ..self.clone() }
    }

    /// Writes `<name>.hierarchy.json` and `<name>.frames.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hpath = dir.join(format!("{}.hierarchy.json", self.name));
        let doc = serde_json::to_string(&self.hierarchy.to_doc())?;
        std::fs::write(&hpath, doc).map_err(|e| Error::io(&hpath, e))?;
        let fpath = dir.join(format!("{}.frames.csv", self.name));
        let file = std::fs::File::create(&fpath).map_err(|e| Error::io(&fpath, e))?;
        self.write_frames_csv(file).map_err(|e| Error::io(&fpath, e))?;
        Ok(vec![hpath, fpath])
    }

    pub fn write_frames_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "frame_index,cam_x,cam_y,cam_z,qw,qx,qy,qz,observed_point_ids")?;
        for f in &self.frames {
            let p = f.pose.position;
            let q = f.pose.orientation;
            let ids: Vec<String> = f.observed_points().iter().map(|p| p.0.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                f.frame_index,
                p[0],
                p[1],
                p[2],
                q[0],
                q[1],
                q[2],
                q[3],
                ids.join(";")
            )?;
        }
        w.flush()
    }
}

/// Task order: a permutation of the experiment's scene ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamOrder(pub Vec<SceneId>);

impl StreamOrder {
    pub fn identity(n: usize) -> Self {
        StreamOrder((0..n as u32).map(SceneId).collect())
    }

    /// Checks that the order lists each of `scenes` exactly once.
    pub fn validate(&self, scenes: &[SceneId]) -> Result<()> {
        let mut want: Vec<SceneId> = scenes.to_vec();
        want.sort();
        let mut got = self.0.clone();
        got.sort();
        if let Some(w) = got.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::BadPermutation(format!("scene {} appears twice", w[0])));
        }
        if got != want {
            return Err(Error::BadPermutation(format!(
                "order {:?} does not permute scenes {:?}",
                self.0, want
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StreamEvent<'a> {
    Frame {
        task: usize,
        instance: &'a Instance,
    },
    /// Emitted after the last frame of each task.
    TaskEnd {
        task: usize,
        scene: SceneId,
    },
}

/// Task-ordered stream over the frames of `scenes`.
pub fn make_stream<'a>(scenes: &'a [Scene], order: &StreamOrder) -> Result<TaskStream<'a>> {
    let ids: Vec<SceneId> = scenes.iter().map(|s| s.id).collect();
    order.validate(&ids)?;
    let ordered = order
        .0
        .iter()
        .map(|id| scenes.iter().find(|s| s.id == *id).expect("validated"))
        .collect();
    Ok(TaskStream {
        ordered,
        task: 0,
        frame: 0,
    })
}

pub struct TaskStream<'a> {
    ordered: Vec<&'a Scene>,
    task: usize,
    frame: usize,
}

impl<'a> Iterator for TaskStream<'a> {
    type Item = StreamEvent<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let scene = *self.ordered.get(self.task)?;
        if let Some(instance) = scene.frames.get(self.frame) {
            self.frame += 1;
            return Some(StreamEvent::Frame {
                task: self.task,
                instance,
            });
        }
        let ev = StreamEvent::TaskEnd {
            task: self.task,
            scene: scene.id,
        };
        self.task += 1;
        self.frame = 0;
        Some(ev)
    }
}
