//! Coarse-to-fine clustering of a scene's 3D points.
//!
//! Level 1 clusters the whole cloud with k-means (k = branching); every level
//! below splits each parent cluster again. A parent with fewer points than the
//! branching factor is not split and its label repeats one level down, so two
//! points that share a label at level `l` always share it at every coarser
//! level. Indices at each level are dense and scene-local.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::types::{dist_sq, ClusterLabel, LabelSet, PointId, SceneId, Vec3};

pub const DEFAULT_LEVELS: usize = 2;
pub const DEFAULT_BRANCHING: usize = 25;

const KMEANS_MAX_ITER: usize = 25;
const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelHierarchy {
    scene: SceneId,
    levels: usize,
    branching: usize,
    // assignment[l - 1][p] is the level-l label of point p
    assignment: Vec<Vec<u32>>,
    centers: Vec<Vec<Vec3>>,
}

/// JSON exchange form: `assignment` is point-major (`[[l1, l2], ...]`) and
/// `centers` lists level 1's centroids first, then level 2's, and so on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyDoc {
    pub scene: SceneId,
    pub levels: usize,
    pub branching: usize,
    pub centers: Vec<Vec3>,
    pub assignment: Vec<Vec<u32>>,
}

impl LabelHierarchy {
    pub fn build(
        scene: SceneId,
        points: &[Vec3],
        levels: usize,
        branching: usize,
        rng: &mut RngHandle,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyScene);
        }
        if levels == 0 {
            return Err(Error::Config("hierarchy needs at least one level".into()));
        }
        if branching < 2 {
            return Err(Error::Config("branching factor must be at least 2".into()));
        }

        let mut assignment = Vec::with_capacity(levels);
        let mut centers = Vec::with_capacity(levels);

        // level 0: one cluster holding everything
        let mut parents: Vec<Vec<usize>> = vec![(0..points.len()).collect()];
        let mut parent_centers = vec![mean(points, &parents[0])];

        for _ in 0..levels {
            let mut level_assign = vec![0u32; points.len()];
            let mut level_centers = Vec::new();
            let mut children: Vec<Vec<usize>> = Vec::new();

            for (members, parent_center) in parents.iter().zip(&parent_centers) {
                if members.len() < branching {
                    push_cluster(
                        members.clone(),
                        *parent_center,
                        &mut level_assign,
                        &mut level_centers,
                        &mut children,
                    );
                    continue;
                }
                let (ks, clusters) = kmeans(points, members, branching, rng);
                for (center, cluster) in ks.into_iter().zip(clusters) {
                    push_cluster(cluster, center, &mut level_assign, &mut level_centers, &mut children);
                }
            }

            assignment.push(level_assign);
            centers.push(level_centers.clone());
            parents = children;
            parent_centers = level_centers;
        }

        Ok(LabelHierarchy {
            scene,
            levels,
            branching,
            assignment,
            centers,
        })
    }

    pub fn scene(&self) -> SceneId {
        self.scene
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn point_count(&self) -> usize {
        self.assignment[0].len()
    }

    /// Number of distinct labels at `level`.
    pub fn cardinality(&self, level: usize) -> usize {
        self.centers[level - 1].len()
    }

    pub fn cardinality_checked(&self, level: usize) -> Result<usize> {
        self.check_level(level)?;
        Ok(self.cardinality(level))
    }

    pub fn centers(&self, level: usize) -> &[Vec3] {
        &self.centers[level - 1]
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.levels {
            Err(Error::BadLevel {
                level,
                levels: self.levels,
            })
        } else {
            Ok(())
        }
    }

    /// Label of `point` at `level`.
    pub fn label(&self, point: PointId, level: usize) -> Result<ClusterLabel> {
        self.check_level(level)?;
        let index = *self.assignment[level - 1]
            .get(point.index())
            .ok_or(Error::UnknownPoint(point))?;
        Ok(ClusterLabel {
            scene: self.scene,
            level,
            index,
        })
    }

    /// The set of level-`level` labels touched by `points`.
    pub fn labels_of(&self, points: &[PointId], level: usize) -> Result<BTreeSet<ClusterLabel>> {
        let set = self.label_set(points, level)?;
        Ok(set
            .iter()
            .map(|index| ClusterLabel {
                scene: self.scene,
                level,
                index: index as u32,
            })
            .collect())
    }

    /// Bitset form of [`labels_of`](Self::labels_of).
    pub fn label_set(&self, points: &[PointId], level: usize) -> Result<LabelSet> {
        let mut lookups = 0;
        self.label_set_counted(points, level, &mut lookups)
    }

    /// As [`label_set`](Self::label_set), adding the number of assignment
    /// lookups performed to `lookups`.
    pub fn label_set_counted(&self, points: &[PointId], level: usize, lookups: &mut usize) -> Result<LabelSet> {
        self.check_level(level)?;
        let table = &self.assignment[level - 1];
        let mut set = LabelSet::with_domain(self.cardinality(level));
        for &p in points {
            *lookups += 1;
            let l = *table.get(p.index()).ok_or(Error::UnknownPoint(p))?;
            set.insert(l as usize);
        }
        Ok(set)
    }

    /// Every label at `level`.
    pub fn full_label_set(&self, level: usize) -> LabelSet {
        LabelSet::from_indices(self.cardinality(level), 0..self.cardinality(level))
    }

    /// Checks nesting, density of indices and per-level cardinality ordering.
    /// Ordering is strict when the scene has more than `branching^levels`
    /// points and non-strict otherwise.
    pub fn validate(&self) -> Result<()> {
        let n = self.point_count();
        for l in 0..self.levels {
            let card = self.centers[l].len();
            if self.assignment[l].len() != n {
                return Err(Error::InvalidHierarchy(format!("level {} length", l + 1)));
            }
            let mut used = vec![false; card];
            for &a in &self.assignment[l] {
                let a = a as usize;
                if a >= card {
                    return Err(Error::InvalidHierarchy(format!(
                        "label {a} out of range at level {}",
                        l + 1
                    )));
                }
                used[a] = true;
            }
            if used.iter().any(|u| !u) {
                return Err(Error::InvalidHierarchy(format!("hollow label at level {}", l + 1)));
            }
        }
        // nesting: each fine label has exactly one parent
        for l in 1..self.levels {
            let mut parent = vec![u32::MAX; self.centers[l].len()];
            for p in 0..n {
                let fine = self.assignment[l][p] as usize;
                let coarse = self.assignment[l - 1][p];
                if parent[fine] == u32::MAX {
                    parent[fine] = coarse;
                } else if parent[fine] != coarse {
                    return Err(Error::InvalidHierarchy(format!(
                        "label {fine} at level {} spans two parents",
                        l + 1
                    )));
                }
            }
        }
        let strict = (self.branching as f64).powi(self.levels as i32) < n as f64;
        let mut cards: Vec<usize> = self.centers.iter().map(Vec::len).collect();
        cards.push(n);
        for w in cards.windows(2) {
            let ok = if strict { w[0] < w[1] } else { w[0] <= w[1] };
            if !ok {
                return Err(Error::InvalidHierarchy(format!(
                    "cardinality ordering violated: {cards:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_doc(&self) -> HierarchyDoc {
        let n = self.point_count();
        HierarchyDoc {
            scene: self.scene,
            levels: self.levels,
            branching: self.branching,
            centers: self.centers.iter().flatten().copied().collect(),
            assignment: (0..n)
                .map(|p| self.assignment.iter().map(|lvl| lvl[p]).collect())
                .collect(),
        }
    }

    /// Rebuilds a hierarchy from its JSON form, checking every invariant.
    pub fn from_doc(doc: &HierarchyDoc) -> Result<Self> {
        if doc.assignment.is_empty() {
            return Err(Error::EmptyScene);
        }
        if doc.levels == 0 {
            return Err(Error::InvalidHierarchy("zero levels".into()));
        }
        let mut assignment = vec![Vec::with_capacity(doc.assignment.len()); doc.levels];
        for (p, row) in doc.assignment.iter().enumerate() {
            if row.len() != doc.levels {
                return Err(Error::InvalidHierarchy(format!(
                    "point {p} has {} labels, expected {}",
                    row.len(),
                    doc.levels
                )));
            }
            for (l, &a) in row.iter().enumerate() {
                assignment[l].push(a);
            }
        }
        let cards: Vec<usize> = assignment
            .iter()
            .map(|lvl| lvl.iter().max().map_or(0, |&m| m as usize + 1))
            .collect();
        if cards.iter().sum::<usize>() != doc.centers.len() {
            return Err(Error::InvalidHierarchy(format!(
                "{} centers for level cardinalities {cards:?}",
                doc.centers.len()
            )));
        }
        let mut rest = doc.centers.as_slice();
        let mut centers = Vec::with_capacity(doc.levels);
        for c in cards {
            let (head, tail) = rest.split_at(c);
            centers.push(head.to_vec());
            rest = tail;
        }
        let h = LabelHierarchy {
            scene: doc.scene,
            levels: doc.levels,
            branching: doc.branching,
            assignment,
            centers,
        };
        h.validate()?;
        Ok(h)
    }
}

fn push_cluster(
    members: Vec<usize>,
    center: Vec3,
    assign: &mut [u32],
    centers: &mut Vec<Vec3>,
    children: &mut Vec<Vec<usize>>,
) {
    let idx = centers.len() as u32;
    for &m in &members {
        assign[m] = idx;
    }
    centers.push(center);
    children.push(members);
}

fn mean(points: &[Vec3], members: &[usize]) -> Vec3 {
    let mut c = [0.0; 3];
    for &m in members {
        for d in 0..3 {
            c[d] += points[m][d];
        }
    }
    let n = members.len().max(1) as f64;
    c.map(|v| v / n)
}

/// Lloyd's k-means with k-means++ seeding over `points[members]`.
///
/// Returns the non-empty clusters in center order, each with the center its
/// members were last assigned to, so every member is nearest to its own
/// center among the returned ones.
fn kmeans(points: &[Vec3], members: &[usize], k: usize, rng: &mut RngHandle) -> (Vec<Vec3>, Vec<Vec<usize>>) {
    let mut centers = seed_plus_plus(points, members, k, rng);
    let mut assign = vec![0usize; members.len()];

    for _ in 0..KMEANS_MAX_ITER {
        assign_nearest(points, members, &centers, &mut assign);
        let mut sums = vec![[0.0f64; 3]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &m) in members.iter().enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for d in 0..3 {
                sums[c][d] += points[m][d];
            }
        }
        let mut moved = 0.0f64;
        for c in 0..centers.len() {
            if counts[c] == 0 {
                continue;
            }
            let next = sums[c].map(|s| s / counts[c] as f64);
            moved = moved.max(dist_sq(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if moved <= KMEANS_TOL {
            break;
        }
    }
    assign_nearest(points, members, &centers, &mut assign);

    let mut clusters = vec![Vec::new(); centers.len()];
    for (i, &m) in members.iter().enumerate() {
        clusters[assign[i]].push(m);
    }
    centers.into_iter().zip(clusters).filter(|(_, c)| !c.is_empty()).unzip()
}

fn assign_nearest(points: &[Vec3], members: &[usize], centers: &[Vec3], assign: &mut [usize]) {
    for (i, &m) in members.iter().enumerate() {
        let p = &points[m];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = dist_sq(p, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assign[i] = best;
    }
}

fn seed_plus_plus(points: &[Vec3], members: &[usize], k: usize, rng: &mut RngHandle) -> Vec<Vec3> {
    let first = members[rng.uniform_index(members.len()).expect("non-empty cluster")];
    let mut centers = vec![points[first]];
    let mut d2: Vec<f64> = members.iter().map(|&m| dist_sq(&points[m], &points[first])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // every remaining point coincides with a center
            break;
        }
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let chosen = points[members[pick.expect("positive mass")]];
        centers.push(chosen);
        for (i, &m) in members.iter().enumerate() {
            d2[i] = d2[i].min(dist_sq(&points[m], &chosen));
        }
    }
    centers
}
