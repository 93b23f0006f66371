//! Identifiers, poses, label sets and the observed-frame record shared by
//! every other module.

use std::fmt;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;

/// Index of a scene (task) within an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct SceneId(pub u32);

// Also accepts numeric strings: JSON map keys are strings, and serde hands
// them over as such when the map sits inside an internally tagged enum.
impl<'de> Deserialize<'de> for SceneId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = SceneId;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a scene index")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<SceneId, E> {
                u32::try_from(v).map(SceneId).map_err(E::custom)
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<SceneId, E> {
                u32::try_from(v).map(SceneId).map_err(E::custom)
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<SceneId, E> {
                v.parse().map(SceneId).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ground-truth 3D point of a scene, dense in `[0, point_count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointId(pub u32);

impl PointId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn dist_sq(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Camera position (meters) and orientation as a unit quaternion `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: [f64; 4],
}

impl Pose {
    /// Builds a pose, normalizing the quaternion. A zero quaternion becomes identity.
    pub fn new(position: Vec3, orientation: [f64; 4]) -> Self {
        let n = orientation.iter().map(|q| q * q).sum::<f64>().sqrt();
        let orientation = if n > 0.0 && n.is_finite() {
            orientation.map(|q| q / n)
        } else {
            [1.0, 0.0, 0.0, 0.0]
        };
        Pose { position, orientation }
    }

    /// Camera rotated by `yaw` radians about +z.
    pub fn from_yaw(position: Vec3, yaw: f64) -> Self {
        let h = 0.5 * yaw;
        Pose::new(position, [h.cos(), 0.0, 0.0, h.sin()])
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|q| q * q).sum::<f64>().sqrt()
    }
}

/// A scene-scoped cluster label at one hierarchy level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterLabel {
    pub scene: SceneId,
    pub level: usize,
    pub index: u32,
}

/// Set of label (or point) indices over a fixed domain, stored as a bitset.
///
/// Sets from different scenes live in unrelated index spaces; callers compare
/// them only after checking the scene.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(FixedBitSet);

impl LabelSet {
    pub fn with_domain(domain: usize) -> Self {
        LabelSet(FixedBitSet::with_capacity(domain))
    }

    pub fn from_indices(domain: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::with_domain(domain);
        for i in indices {
            s.insert(i);
        }
        s
    }

    /// Inserts `i`, growing the domain when needed.
    pub fn insert(&mut self, i: usize) {
        self.0.grow(i + 1);
        self.0.insert(i);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(i)
    }

    pub fn len(&self) -> usize {
        self.0.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_clear()
    }

    pub fn domain(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.ones()
    }

    pub fn union_with(&mut self, other: &LabelSet) {
        self.0.union_with(&other.0);
    }

    /// `self \ other`.
    pub fn difference(&self, other: &LabelSet) -> LabelSet {
        let mut out = self.0.clone();
        out.difference_with(&other.0);
        LabelSet(out)
    }

    pub fn is_subset(&self, other: &LabelSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        self.0.intersection_count(&other.0)
    }

    pub fn union_len(&self, other: &LabelSet) -> usize {
        self.0.union_count(&other.0)
    }

    /// Jaccard index `|a ∩ b| / |a ∪ b|`; two empty sets score 0.
    pub fn jaccard(&self, other: &LabelSet) -> f64 {
        let u = self.union_len(other);
        if u == 0 {
            0.0
        } else {
            self.intersection_len(other) as f64 / u as f64
        }
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self::from_indices(0, iter)
    }
}

/// One observed frame: where the camera was, which points it saw, and the
/// per-level cluster labels of those points.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub scene: SceneId,
    pub frame_index: usize,
    pub pose: Pose,
    observed_points: Vec<PointId>,
    // labels[l - 1] holds level l.
    labels: Vec<LabelSet>,
}

impl Instance {
    /// Builds an instance and derives its labels from `hierarchy`.
    pub fn new(
        scene: SceneId,
        frame_index: usize,
        pose: Pose,
        mut observed_points: Vec<PointId>,
        hierarchy: &LabelHierarchy,
    ) -> Result<Self> {
        if hierarchy.scene() != scene {
            return Err(Error::NoHierarchy(scene));
        }
        observed_points.sort_unstable();
        observed_points.dedup();
        if observed_points.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "frame {frame_index} of scene {scene} observes no points"
            )));
        }
        let labels = (1..=hierarchy.levels())
            .map(|l| hierarchy.label_set(&observed_points, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Instance {
            scene,
            frame_index,
            pose,
            observed_points,
            labels,
        })
    }

    /// Observed point ids, sorted ascending and unique.
    pub fn observed_points(&self) -> &[PointId] {
        &self.observed_points
    }

    pub fn levels(&self) -> usize {
        self.labels.len()
    }

    /// Labels at cluster level `level` (1-based).
    pub fn labels(&self, level: usize) -> Result<&LabelSet> {
        if level == 0 || level > self.labels.len() {
            return Err(Error::BadLevel {
                level,
                levels: self.labels.len(),
            });
        }
        Ok(&self.labels[level - 1])
    }

    /// Observed points as a bitset over the scene's point domain.
    pub fn point_set(&self, point_count: usize) -> LabelSet {
        LabelSet::from_indices(point_count, self.observed_points.iter().map(|p| p.index()))
    }

    /// True when the stored labels are exactly the image of the observed
    /// points under `hierarchy`.
    pub fn labels_consistent_with(&self, hierarchy: &LabelHierarchy) -> bool {
        hierarchy.scene() == self.scene
            && hierarchy.levels() == self.labels.len()
            && (1..=hierarchy.levels()).all(|l| {
                hierarchy
                    .label_set(&self.observed_points, l)
                    .map(|s| s == self.labels[l - 1])
                    .unwrap_or(false)
            })
    }
}
