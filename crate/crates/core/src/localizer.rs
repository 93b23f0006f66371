//! Label-overlap localization oracle.
//!
//! A query counts as localized when some memory frame's fine-level label set
//! overlaps the query's by at least the Jaccard threshold. Labels are
//! scene-scoped, so frames from different scenes always overlap 0.
//!
//! The default threshold 0.3 was calibrated on the default desk-scale
//! profile: with it, scenes without replay memory score exactly 0 while
//! full (joint) memory localizes more than 90% of held-out frames.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Instance, SceneId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    #[serde(default = "default_level")]
    pub overlap_level: usize,
    #[serde(default = "default_tau")]
    pub jaccard_threshold: f64,
    #[serde(default = "default_true")]
    pub require_scene_match: bool,
}

fn default_level() -> usize {
    2
}

fn default_tau() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            overlap_level: default_level(),
            jaccard_threshold: default_tau(),
            require_scene_match: true,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(Error::Config("jaccard_threshold must lie in (0, 1]".into()));
        }
        if self.overlap_level == 0 {
            return Err(Error::Config("overlap_level must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeResult {
    pub success: bool,
    /// `(scene, frame_index)` of the first memory frame reaching the best
    /// overlap; absent when nothing overlaps at all.
    pub best_match: Option<(SceneId, usize)>,
    pub best_overlap: f64,
}

/// Jaccard overlap of two frames' labels at `level`; 0 across scenes.
pub fn overlap(a: &Instance, b: &Instance, level: usize) -> Result<f64> {
    if a.scene != b.scene {
        return Ok(0.0);
    }
    Ok(a.labels(level)?.jaccard(b.labels(level)?))
}

pub fn localize(query: &Instance, memory: &[&Instance], cfg: &LocalizerConfig) -> Result<LocalizeResult> {
    let mut best_overlap = 0.0;
    let mut best: Option<&Instance> = None;
    for m in memory {
        let o = overlap(query, m, cfg.overlap_level)?;
        if o > best_overlap {
            best_overlap = o;
            best = Some(m);
        }
    }
    let scene_ok = match best {
        Some(m) => !cfg.require_scene_match || m.scene == query.scene,
        None => false,
    };
    Ok(LocalizeResult {
        success: scene_ok && best_overlap >= cfg.jaccard_threshold,
        best_match: best.map(|m| (m.scene, m.frame_index)),
        best_overlap,
    })
}

/// Memory grouped by scene. Cross-scene overlap is 0 and never wins, so
/// searching only the query's scene gives the same result as
/// [`localize`] over the whole memory.
pub struct MemoryIndex<'a> {
    by_scene: BTreeMap<SceneId, Vec<&'a Instance>>,
}

impl<'a> MemoryIndex<'a> {
    pub fn new(memory: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut by_scene: BTreeMap<SceneId, Vec<&'a Instance>> = BTreeMap::new();
        for m in memory {
            by_scene.entry(m.scene).or_default().push(m);
        }
        MemoryIndex { by_scene }
    }

    pub fn localize(&self, query: &Instance, cfg: &LocalizerConfig) -> Result<LocalizeResult> {
        let same = self.by_scene.get(&query.scene).map_or(&[][..], Vec::as_slice);
        localize(query, same, cfg)
    }

    pub fn len(&self) -> usize {
        self.by_scene.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fraction of `test_frames` localized against `memory`.
pub fn evaluate_scene(test_frames: &[Instance], memory: &MemoryIndex<'_>, cfg: &LocalizerConfig) -> Result<f64> {
    if test_frames.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut ok = 0usize;
    for q in test_frames {
        if memory.localize(q, cfg)?.success {
            ok += 1;
        }
    }
    Ok(ok as f64 / test_frames.len() as f64)
}

/// One row of the per-query results CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub scene: SceneId,
    pub frame_index: usize,
    pub result: LocalizeResult,
}

pub fn evaluate_queries(
    test_frames: &[Instance],
    memory: &MemoryIndex<'_>,
    cfg: &LocalizerConfig,
) -> Result<Vec<QueryResult>> {
    test_frames
        .iter()
        .map(|q| {
            Ok(QueryResult {
                scene: q.scene,
                frame_index: q.frame_index,
                result: memory.localize(q, cfg)?,
            })
        })
        .collect()
}

/// Writes `scene,frame_index,success,best_overlap,matched_scene`.
pub fn write_query_csv<W: Write>(rows: &[QueryResult], out: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "scene,frame_index,success,best_overlap,matched_scene")?;
    for r in rows {
        let matched = r.result.best_match.map(|(s, _)| s.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{:.6},{}",
            r.scene, r.frame_index, r.result.success, r.result.best_overlap, matched
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngHandle;
    use crate::scenegen::{generate_scene, SceneSpec, Trajectory};

    fn scene(id: u32, seed: u64) -> crate::scenegen::Scene {
        let spec = SceneSpec {
            name: format!("s{id}"),
            extent: [4.0, 4.0, 2.0],
            point_count: 1200,
            trajectory: Trajectory::SweepGrid,
            frames: 200,
            view_radius: 0.9,
            seed: "loc".into(),
            levels: 2,
            branching: 25,
        };
        generate_scene(&spec, SceneId(id), &RngHandle::new(seed, format!("scene{id}"))).unwrap()
    }

    #[test]
    fn self_match_and_empty_memory() {
        let s = scene(0, 1);
        let cfg = LocalizerConfig::default();
        let q = &s.frames[10];
        let r = localize(q, &[&s.frames[3], q], &cfg).unwrap();
        assert_eq!(r.best_overlap, 1.0);
        assert!(r.success);
        assert_eq!(r.best_match, Some((SceneId(0), 10)));

        let r = localize(q, &[], &cfg).unwrap();
        assert!(!r.success);
        assert_eq!(r.best_match, None);
    }

    #[test]
    fn all_test_frames_in_memory_gives_full_accuracy() {
        let s = scene(0, 2);
        let idx = MemoryIndex::new(s.frames.iter());
        let acc = evaluate_scene(&s.frames, &idx, &LocalizerConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
        assert!(matches!(
            evaluate_scene(&[], &idx, &LocalizerConfig::default()),
            Err(Error::EmptyTestSet)
        ));
    }

    #[test]
    fn other_scene_memory_scores_zero() {
        let a = scene(0, 3);
        let b = scene(1, 4);
        let idx = MemoryIndex::new(b.frames.iter());
        let acc = evaluate_scene(&a.frames, &idx, &LocalizerConfig::default()).unwrap();
        assert_eq!(acc, 0.0);
        let plain: Vec<&Instance> = b.frames.iter().collect();
        let r = localize(&a.frames[0], &plain, &LocalizerConfig::default()).unwrap();
        assert_eq!(r.best_overlap, 0.0);
    }

    #[test]
    fn random_split_matches_pairwise_scan() {
        let s = scene(0, 5);
        let mut rng = RngHandle::new(5, "half");
        let mut frames = s.frames.clone();
        rng.shuffle(&mut frames);
        let (mem, test) = frames.split_at(frames.len() / 2);
        let cfg = LocalizerConfig::default();
        let acc = evaluate_scene(test, &MemoryIndex::new(mem.iter()), &cfg).unwrap();
        // brute force: explicit intersection/union over label index lists
        let labels = |f: &Instance| -> Vec<usize> { f.labels(2).unwrap().iter().collect() };
        let mut hits = 0;
        for q in test {
            let ql = labels(q);
            let best = mem
                .iter()
                .map(|m| {
                    let ml = labels(m);
                    let inter = ql.iter().filter(|x| ml.contains(x)).count();
                    let union = ql.len() + ml.len() - inter;
                    inter as f64 / union as f64
                })
                .fold(0.0, f64::max);
            if best >= 0.3 {
                hits += 1;
            }
        }
        assert_eq!(acc, hits as f64 / test.len() as f64);
    }

    #[test]
    fn index_agrees_with_full_scan() {
        let a = scene(0, 6);
        let b = scene(1, 7);
        let memory: Vec<&Instance> = a.frames.iter().step_by(7).chain(b.frames.iter().step_by(5)).collect();
        let idx = MemoryIndex::new(memory.iter().copied());
        let cfg = LocalizerConfig::default();
        for q in a.frames.iter().chain(b.frames.iter()).step_by(3) {
            let full = localize(q, &memory, &cfg).unwrap();
            let fast = idx.localize(q, &cfg).unwrap();
            assert_eq!(full, fast);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = LocalizerConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.jaccard_threshold = 0.0;
        assert!(cfg.validate().is_err());
        cfg.jaccard_threshold = 1.0;
        assert!(cfg.validate().is_ok());
    }
}
