//! Fixed-capacity replay buffer with reservoir, class-balance and
//! coverage-score (Buff-CS) replacement.
//!
//! Every [`Buffer::observe`] call counts the instance toward `n_c` and `N`
//! first, then either fills a free slot or hands the decision to the
//! configured strategy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::replay::RepresentationPayload;
use crate::rng::RngHandle;
use crate::types::{Instance, LabelSet, SceneId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Reservoir,
    ClassBalance,
    BuffCs,
    /// Never stores anything; the no-replay baseline.
    WithoutBuffering,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Reservoir,
        Strategy::ClassBalance,
        Strategy::BuffCs,
        Strategy::WithoutBuffering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Reservoir => "reservoir",
            Strategy::ClassBalance => "class_balance",
            Strategy::BuffCs => "buff_cs",
            Strategy::WithoutBuffering => "without_buffering",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match norm.as_str() {
            "reservoir" => Ok(Strategy::Reservoir),
            "class_balance" | "classbalance" => Ok(Strategy::ClassBalance),
            "buff_cs" | "buffcs" => Ok(Strategy::BuffCs),
            "without_buffering" | "withoutbuffering" | "none" => Ok(Strategy::WithoutBuffering),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Label space used by the coverage-score factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageLevel {
    /// Cluster labels at the given level (1 is the coarsest).
    Cluster(usize),
    /// Raw ground-truth point ids.
    #[serde(rename = "exact_3d", alias = "exact3d")]
    Exact3D,
}

impl Default for CoverageLevel {
    fn default() -> Self {
        CoverageLevel::Cluster(1)
    }
}

/// How a victim is picked inside the class chosen for eviction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimPolicy {
    #[default]
    Uniform,
    /// Extension: evict the entry contributing the fewest labels that no other
    /// same-class entry holds (ties broken uniformly).
    MinUniqueCoverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferPolicy {
    pub strategy: Strategy,
    #[serde(default)]
    pub coverage: CoverageLevel,
    #[serde(default)]
    pub victim: VictimPolicy,
}

impl BufferPolicy {
    pub fn new(strategy: Strategy) -> Self {
        BufferPolicy {
            strategy,
            coverage: CoverageLevel::default(),
            victim: VictimPolicy::default(),
        }
    }

    pub fn with_coverage(mut self, coverage: CoverageLevel) -> Self {
        self.coverage = coverage;
        self
    }

    pub fn with_victim(mut self, victim: VictimPolicy) -> Self {
        self.victim = victim;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Inserted,
    Replaced { victim_index: usize, victim_scene: SceneId },
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Fill,
    ReservoirHit,
    LargestClassEvicted,
    CoverageNovel,
    BalanceProbability,
    ProbabilityMiss,
    ReservoirMiss,
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDecision {
    pub kind: DecisionKind,
    pub reason: Reason,
}

impl BufferDecision {
    fn new(kind: DecisionKind, reason: Reason) -> Self {
        BufferDecision { kind, reason }
    }

    pub fn victim_index(&self) -> Option<usize> {
        match self.kind {
            DecisionKind::Replaced { victim_index, .. } => Some(victim_index),
            _ => None,
        }
    }

    pub fn stored(&self) -> bool {
        !matches!(self.kind, DecisionKind::Ignored)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub instance: Instance,
    pub payload: Option<RepresentationPayload>,
    pub insertion_step: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Buffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    per_class: BTreeMap<SceneId, usize>,
    observed: BTreeMap<SceneId, u64>,
    total_observed: u64,
    with_payload: Option<bool>,
}

impl Buffer {
    pub fn new(capacity: usize) -> Self {
        Buffer {
            capacity,
            ..Default::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// `m_c`: stored entries of `scene`.
    pub fn class_count(&self, scene: SceneId) -> usize {
        self.per_class.get(&scene).copied().unwrap_or(0)
    }

    /// `n_c`: instances of `scene` offered so far.
    pub fn observed_count(&self, scene: SceneId) -> u64 {
        self.observed.get(&scene).copied().unwrap_or(0)
    }

    /// `N`: instances offered so far.
    pub fn total_observed(&self) -> u64 {
        self.total_observed
    }

    pub fn class_counts(&self) -> &BTreeMap<SceneId, usize> {
        &self.per_class
    }

    pub fn observed_counts(&self) -> &BTreeMap<SceneId, u64> {
        &self.observed
    }

    pub fn class_entries(&self, scene: SceneId) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter().filter(move |e| e.instance.scene == scene)
    }

    /// Offers `inst` to the buffer (image-only storage).
    pub fn observe(
        &mut self,
        policy: &BufferPolicy,
        inst: &Instance,
        hierarchy: Option<&LabelHierarchy>,
        rng: &mut RngHandle,
    ) -> Result<BufferDecision> {
        self.observe_with(
            policy,
            inst,
            hierarchy,
            rng,
            None::<fn(&Instance) -> Result<RepresentationPayload>>,
        )
    }

    /// Offers `inst`; when `payload` is given it is invoked only if the
    /// instance is stored. All entries must agree on payload presence.
    pub fn observe_with<F>(
        &mut self,
        policy: &BufferPolicy,
        inst: &Instance,
        hierarchy: Option<&LabelHierarchy>,
        rng: &mut RngHandle,
        payload: Option<F>,
    ) -> Result<BufferDecision>
    where
        F: FnOnce(&Instance) -> Result<RepresentationPayload>,
    {
        if self.capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        if let Some(expected) = self.with_payload {
            if expected != payload.is_some() {
                return Err(Error::ShapeMismatch(
                    "payload presence must be uniform across the buffer".into(),
                ));
            }
        }
        if policy.strategy == Strategy::BuffCs {
            check_hierarchy(inst.scene, hierarchy)?;
        }

        *self.observed.entry(inst.scene).or_insert(0) += 1;
        self.total_observed += 1;

        let decision = if policy.strategy == Strategy::WithoutBuffering {
            BufferDecision::new(DecisionKind::Ignored, Reason::Disabled)
        } else if !self.is_full() {
            BufferDecision::new(DecisionKind::Inserted, Reason::Fill)
        } else {
            match policy.strategy {
                Strategy::Reservoir => self.reservoir_decide(rng)?,
                Strategy::ClassBalance => self.class_balance_decide(policy, inst, rng)?,
                Strategy::BuffCs => self.buff_cs_decide(policy, inst, hierarchy, rng)?,
                Strategy::WithoutBuffering => unreachable!(),
            }
        };

        if decision.stored() {
            let payload = payload.map(|f| f(inst)).transpose()?;
            self.with_payload = Some(payload.is_some());
            let entry = BufferEntry {
                instance: inst.clone(),
                payload,
                insertion_step: self.total_observed - 1,
            };
            match decision.kind {
                DecisionKind::Inserted => self.entries.push(entry),
                DecisionKind::Replaced {
                    victim_index,
                    victim_scene,
                } => {
                    *self.per_class.get_mut(&victim_scene).expect("victim class tracked") -= 1;
                    self.entries[victim_index] = entry;
                }
                DecisionKind::Ignored => unreachable!(),
            }
            *self.per_class.entry(inst.scene).or_insert(0) += 1;
        }
        Ok(decision)
    }

    /// Reservoir: keep the instance with probability `B / N`, replacing a
    /// uniformly random slot. Never looks at class identity.
    fn reservoir_decide(&self, rng: &mut RngHandle) -> Result<BufferDecision> {
        let s = rng.uniform() * self.total_observed as f64;
        if s < self.capacity as f64 {
            let victim_index = rng.uniform_index(self.entries.len())?;
            let victim_scene = self.entries[victim_index].instance.scene;
            Ok(BufferDecision::new(
                DecisionKind::Replaced {
                    victim_index,
                    victim_scene,
                },
                Reason::ReservoirHit,
            ))
        } else {
            Ok(BufferDecision::new(DecisionKind::Ignored, Reason::ReservoirMiss))
        }
    }

    fn class_balance_decide(
        &self,
        policy: &BufferPolicy,
        inst: &Instance,
        rng: &mut RngHandle,
    ) -> Result<BufferDecision> {
        if let Some(d) = self.evict_from_largest(policy, inst, rng)? {
            return Ok(d);
        }
        self.balance_probability(policy, inst, rng)
    }

    fn buff_cs_decide(
        &self,
        policy: &BufferPolicy,
        inst: &Instance,
        hierarchy: Option<&LabelHierarchy>,
        rng: &mut RngHandle,
    ) -> Result<BufferDecision> {
        if let Some(d) = self.evict_from_largest(policy, inst, rng)? {
            return Ok(d);
        }
        let h = check_hierarchy(inst.scene, hierarchy)?;
        let cs = coverage_score_factor(self, inst, h, policy.coverage)?;
        if !cs.is_empty() {
            let victim_index = self.pick_victim(policy, inst.scene, rng)?;
            return Ok(BufferDecision::new(
                DecisionKind::Replaced {
                    victim_index,
                    victim_scene: inst.scene,
                },
                Reason::CoverageNovel,
            ));
        }
        self.balance_probability(policy, inst, rng)
    }

    /// When `inst`'s class is not among the largest, evicts from a largest
    /// class (ties between largest classes broken uniformly). Returns `None`
    /// when the incoming class is itself largest.
    fn evict_from_largest(
        &self,
        policy: &BufferPolicy,
        inst: &Instance,
        rng: &mut RngHandle,
    ) -> Result<Option<BufferDecision>> {
        let max = self.per_class.values().copied().max().unwrap_or(0);
        if self.class_count(inst.scene) == max {
            return Ok(None);
        }
        let largest: Vec<SceneId> = self
            .per_class
            .iter()
            .filter(|(_, &m)| m == max)
            .map(|(&c, _)| c)
            .collect();
        let victim_scene = largest[rng.uniform_index(largest.len())?];
        let victim_index = self.pick_victim(policy, victim_scene, rng)?;
        Ok(Some(BufferDecision::new(
            DecisionKind::Replaced {
                victim_index,
                victim_scene,
            },
            Reason::LargestClassEvicted,
        )))
    }

    /// Replace a same-class entry with probability `m_c / n_c`.
    fn balance_probability(
        &self,
        policy: &BufferPolicy,
        inst: &Instance,
        rng: &mut RngHandle,
    ) -> Result<BufferDecision> {
        let m = self.class_count(inst.scene) as f64;
        let n = self.observed_count(inst.scene) as f64;
        let u = rng.uniform();
        if u < m / n {
            let victim_index = self.pick_victim(policy, inst.scene, rng)?;
            Ok(BufferDecision::new(
                DecisionKind::Replaced {
                    victim_index,
                    victim_scene: inst.scene,
                },
                Reason::BalanceProbability,
            ))
        } else {
            Ok(BufferDecision::new(DecisionKind::Ignored, Reason::ProbabilityMiss))
        }
    }

    fn pick_victim(&self, policy: &BufferPolicy, scene: SceneId, rng: &mut RngHandle) -> Result<usize> {
        let slots: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.instance.scene == scene)
            .map(|(i, _)| i)
            .collect();
        let candidates = match policy.victim {
            VictimPolicy::Uniform => slots,
            VictimPolicy::MinUniqueCoverage => self.least_unique(&slots),
        };
        Ok(candidates[rng.uniform_index(candidates.len())?])
    }

    /// Slots whose count of class-unique level-1 labels is minimal.
    fn least_unique(&self, slots: &[usize]) -> Vec<usize> {
        let sets: Vec<&LabelSet> = slots
            .iter()
            .map(|&i| self.entries[i].instance.labels(1).expect("level 1 always exists"))
            .collect();
        let domain = sets.iter().map(|s| s.domain()).max().unwrap_or(0);
        let mut multiplicity = vec![0u32; domain];
        for s in &sets {
            for l in s.iter() {
                multiplicity[l] += 1;
            }
        }
        let unique: Vec<usize> = sets
            .iter()
            .map(|s| s.iter().filter(|&l| multiplicity[l] == 1).count())
            .collect();
        let min = unique.iter().copied().min().unwrap_or(0);
        slots
            .iter()
            .zip(&unique)
            .filter(|(_, &u)| u == min)
            .map(|(&i, _)| i)
            .collect()
    }

    /// Union of the labels (or points, for [`CoverageLevel::Exact3D`]) held
    /// by the buffer's entries of `h`'s scene.
    pub fn class_union(&self, h: &LabelHierarchy, level: CoverageLevel) -> Result<LabelSet> {
        let scene = h.scene();
        match level {
            CoverageLevel::Cluster(l) => {
                let mut acc = LabelSet::with_domain(h.cardinality_checked(l)?);
                for e in self.class_entries(scene) {
                    acc.union_with(e.instance.labels(l)?);
                }
                Ok(acc)
            }
            CoverageLevel::Exact3D => {
                let mut acc = LabelSet::with_domain(h.point_count());
                for e in self.class_entries(scene) {
                    for p in e.instance.observed_points() {
                        acc.insert(p.index());
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            total_observed: self.total_observed,
            entries: self
                .entries
                .iter()
                .map(|e| SnapshotEntry {
                    scene: e.instance.scene,
                    frame_index: e.instance.frame_index,
                    insertion_step: e.insertion_step,
                    labels: (1..=e.instance.levels())
                        .map(|l| {
                            e.instance
                                .labels(l)
                                .map(|s| s.iter().map(|i| i as u32).collect())
                                .unwrap_or_default()
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Approximate bytes needed to serialize the stored records.
    pub fn byte_size(&self) -> usize {
        self.entries
            .iter()
            .map(|e| {
                64 + 4 * e.instance.observed_points().len()
                    + e.payload.as_ref().map_or(0, RepresentationPayload::byte_size)
            })
            .sum()
    }
}

fn check_hierarchy(scene: SceneId, hierarchy: Option<&LabelHierarchy>) -> Result<&LabelHierarchy> {
    match hierarchy {
        Some(h) if h.scene() == scene => Ok(h),
        _ => Err(Error::NoHierarchy(scene)),
    }
}

/// Labels of `inst` at `level` that no same-class buffer entry holds.
/// An empty result means the instance adds no coverage.
pub fn coverage_score_factor(
    buf: &Buffer,
    inst: &Instance,
    h: &LabelHierarchy,
    level: CoverageLevel,
) -> Result<LabelSet> {
    check_hierarchy(inst.scene, Some(h))?;
    let union = buf.class_union(h, level)?;
    let own = match level {
        CoverageLevel::Cluster(l) => inst.labels(l)?.clone(),
        CoverageLevel::Exact3D => inst.point_set(h.point_count()),
    };
    Ok(own.difference(&union))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub scene: SceneId,
    pub frame_index: usize,
    pub insertion_step: u64,
    /// Label indices per level, level 1 first.
    pub labels: Vec<Vec<u32>>,
}

/// JSON view of the buffer: entries and their label sets, no point clouds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub total_observed: u64,
    pub entries: Vec<SnapshotEntry>,
}

/// One line of the newline-delimited decision log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u64,
    pub scene: SceneId,
    pub strategy: Strategy,
    pub kind: String,
    pub reason: Reason,
    pub victim_index: Option<usize>,
    pub buffer_coverage_l1: f64,
}

impl DecisionRecord {
    pub fn new(
        step: u64,
        scene: SceneId,
        strategy: Strategy,
        decision: &BufferDecision,
        buffer_coverage_l1: f64,
    ) -> Self {
        let kind = match decision.kind {
            DecisionKind::Inserted => "inserted",
            DecisionKind::Replaced { .. } => "replaced",
            DecisionKind::Ignored => "ignored",
        };
        DecisionRecord {
            step,
            scene,
            strategy,
            kind: kind.to_string(),
            reason: decision.reason,
            victim_index: decision.victim_index(),
            buffer_coverage_l1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PointId, Pose};

    /// Points on a line, so level-1 clusters are contiguous runs.
    fn line(scene: u32, n: usize) -> LabelHierarchy {
        let pts: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        LabelHierarchy::build(SceneId(scene), &pts, 2, 5, &mut RngHandle::new(1, "line")).unwrap()
    }

    fn inst(h: &LabelHierarchy, frame: usize, points: &[u32]) -> Instance {
        Instance::new(
            h.scene(),
            frame,
            Pose::from_yaw([0.0; 3], 0.0),
            points.iter().map(|&p| PointId(p)).collect(),
            h,
        )
        .unwrap()
    }

    fn fill(buf: &mut Buffer, items: &[Instance], h: &[&LabelHierarchy]) {
        let mut rng = RngHandle::new(0, "fill");
        let policy = BufferPolicy::new(Strategy::ClassBalance);
        for it in items {
            let hh = h.iter().find(|x| x.scene() == it.scene).copied();
            buf.observe(&policy, it, hh, &mut rng).unwrap();
        }
    }

    fn three_sigma(trials: usize, p: f64) -> f64 {
        3.0 * (trials as f64 * p * (1.0 - p)).sqrt()
    }

    #[test]
    fn fill_phase_for_every_strategy() {
        let h = line(0, 50);
        for s in [Strategy::Reservoir, Strategy::ClassBalance, Strategy::BuffCs] {
            let policy = BufferPolicy::new(s);
            let mut buf = Buffer::new(4);
            let mut rng = RngHandle::new(3, "f");
            let d = buf.observe(&policy, &inst(&h, 0, &[0]), Some(&h), &mut rng).unwrap();
            assert_eq!((d.kind, d.reason), (DecisionKind::Inserted, Reason::Fill));
            assert_eq!(buf.len(), 1);
            for f in 1..3 {
                buf.observe(&policy, &inst(&h, f, &[f as u32]), Some(&h), &mut rng)
                    .unwrap();
            }
            let d = buf.observe(&policy, &inst(&h, 3, &[3]), Some(&h), &mut rng).unwrap();
            assert_eq!(d.reason, Reason::Fill);
            assert!(buf.is_full());
        }
    }

    #[test]
    fn zero_capacity_and_missing_hierarchy() {
        let h = line(0, 10);
        let other = line(1, 10);
        let mut rng = RngHandle::new(0, "e");
        let mut buf = Buffer::new(0);
        assert!(matches!(
            buf.observe(
                &BufferPolicy::new(Strategy::Reservoir),
                &inst(&h, 0, &[0]),
                None,
                &mut rng
            ),
            Err(Error::ZeroCapacity)
        ));
        let mut buf = Buffer::new(2);
        let cs = BufferPolicy::new(Strategy::BuffCs);
        assert!(matches!(
            buf.observe(&cs, &inst(&h, 0, &[0]), None, &mut rng),
            Err(Error::NoHierarchy(_))
        ));
        assert!(matches!(
            buf.observe(&cs, &inst(&h, 0, &[0]), Some(&other), &mut rng),
            Err(Error::NoHierarchy(_))
        ));
    }

    #[test]
    fn reservoir_replaces_with_probability_b_over_n() {
        let h = line(0, 200);
        let items: Vec<Instance> = (0..100).map(|i| inst(&h, i, &[i as u32])).collect();
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let mut base = Buffer::new(4);
        let mut rng = RngHandle::new(0, "base");
        for it in &items[..99] {
            base.observe(&policy, it, None, &mut rng).unwrap();
        }
        let trials = 50_000;
        let mut hits = 0;
        let mut rng = RngHandle::new(1, "trials");
        for _ in 0..trials {
            let mut b = base.clone();
            hits += b.observe(&policy, &items[99], None, &mut rng).unwrap().stored() as usize;
        }
        let expect = trials as f64 * 0.04;
        assert!((hits as f64 - expect).abs() <= three_sigma(trials, 0.04), "{hits}");
    }

    #[test]
    fn reservoir_certain_when_everything_fits() {
        let h = line(0, 10);
        let policy = BufferPolicy::new(Strategy::Reservoir);
        for seed in 0..200 {
            let mut buf = Buffer::new(4);
            let mut rng = RngHandle::new(seed, "bn");
            for i in 0..4 {
                buf.observe(&policy, &inst(&h, i, &[i as u32]), None, &mut rng).unwrap();
            }
            // pretend only three were seen so the incoming one makes N = B
            buf.total_observed = 3;
            let d = buf.observe(&policy, &inst(&h, 4, &[4]), None, &mut rng).unwrap();
            assert_eq!(d.reason, Reason::ReservoirHit);
        }
    }

    #[test]
    fn reservoir_victims_uniform() {
        let h = line(0, 10);
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let mut buf = Buffer::new(4);
        let mut rng = RngHandle::new(5, "v");
        for i in 0..4 {
            buf.observe(&policy, &inst(&h, i, &[0]), None, &mut rng).unwrap();
        }
        let probe = inst(&h, 9, &[1]);
        let mut slots = [0usize; 4];
        let mut hits = 0;
        while hits < 50_000 {
            buf.total_observed = 4; // keeps N = 5 so every draw is cheap to hit
            if let DecisionKind::Replaced { victim_index, .. } =
                buf.observe(&policy, &probe, None, &mut rng).unwrap().kind
            {
                slots[victim_index] += 1;
                hits += 1;
            }
        }
        for s in slots {
            assert!(
                (s as f64 - hits as f64 / 4.0).abs() <= three_sigma(hits, 0.25),
                "{slots:?}"
            );
        }
    }

    #[test]
    fn class_balance_evicts_from_largest_class() {
        let a = line(0, 10);
        let b = line(1, 10);
        let mut buf = Buffer::new(4);
        fill(
            &mut buf,
            &[
                inst(&a, 0, &[0]),
                inst(&a, 1, &[1]),
                inst(&a, 2, &[2]),
                inst(&b, 0, &[0]),
            ],
            &[&a, &b],
        );
        let policy = BufferPolicy::new(Strategy::ClassBalance);
        for seed in 0..50 {
            let mut bb = buf.clone();
            let d = bb
                .observe(&policy, &inst(&b, 1, &[1]), None, &mut RngHandle::new(seed, "cb"))
                .unwrap();
            assert_eq!(d.reason, Reason::LargestClassEvicted);
            assert!(matches!(
                d.kind,
                DecisionKind::Replaced {
                    victim_scene: SceneId(0),
                    ..
                }
            ));
            assert_eq!((bb.class_count(SceneId(0)), bb.class_count(SceneId(1))), (2, 2));
        }
    }

    #[test]
    fn class_balance_certain_when_all_stored() {
        let a = line(0, 10);
        let b = line(1, 10);
        let mut buf = Buffer::new(4);
        fill(
            &mut buf,
            &[inst(&a, 0, &[0]), inst(&b, 0, &[0]), inst(&b, 1, &[1])],
            &[&a, &b],
        );
        // fourth entry of A arrives via fill; m_A = 2
        fill(&mut buf, &[inst(&a, 1, &[1])], &[&a, &b]);
        buf.observed.insert(SceneId(0), 1); // incoming makes n_A = 2
        let policy = BufferPolicy::new(Strategy::ClassBalance);
        for seed in 0..100 {
            let mut bb = buf.clone();
            bb.observed.insert(SceneId(0), 1);
            let d = bb
                .observe(&policy, &inst(&a, 2, &[2]), None, &mut RngHandle::new(seed, "p1"))
                .unwrap();
            assert_eq!(d.reason, Reason::BalanceProbability);
            assert!(matches!(
                d.kind,
                DecisionKind::Replaced {
                    victim_scene: SceneId(0),
                    ..
                }
            ));
        }
    }

    #[test]
    fn tie_with_incoming_class_takes_probability_branch() {
        let a = line(0, 10);
        let b = line(1, 10);
        let mut buf = Buffer::new(4);
        fill(
            &mut buf,
            &[
                inst(&a, 0, &[0]),
                inst(&a, 1, &[1]),
                inst(&b, 0, &[0]),
                inst(&b, 1, &[1]),
            ],
            &[&a, &b],
        );
        let policy = BufferPolicy::new(Strategy::ClassBalance);
        let d = buf
            .observe(&policy, &inst(&a, 2, &[2]), None, &mut RngHandle::new(0, "t"))
            .unwrap();
        assert!(matches!(d.reason, Reason::BalanceProbability | Reason::ProbabilityMiss));
    }

    #[test]
    fn class_balance_seven_scenes_ends_balanced() {
        let hs: Vec<LabelHierarchy> = (0..7).map(|c| line(c, 3)).collect();
        let policy = BufferPolicy::new(Strategy::ClassBalance);
        for seed in 0..5 {
            let mut buf = Buffer::new(256);
            let mut rng = RngHandle::new(seed, "seven");
            for h in &hs {
                for f in 0..1000 {
                    buf.observe(&policy, &inst(h, f, &[0]), None, &mut rng).unwrap();
                }
            }
            for h in &hs {
                let m = buf.class_count(h.scene());
                assert!(m == 36 || m == 37, "{m}");
            }
        }
    }

    #[test]
    fn coverage_factor_cases() {
        let h = line(0, 100);
        let empty = Buffer::new(8);
        let q = inst(&h, 0, &[0, 50, 99]);
        assert_eq!(
            coverage_score_factor(&empty, &q, &h, CoverageLevel::Cluster(1)).unwrap(),
            *q.labels(1).unwrap()
        );
        let mut buf = Buffer::new(8);
        fill(&mut buf, &[inst(&h, 1, &[0, 50]), inst(&h, 2, &[99])], &[&h]);
        assert!(coverage_score_factor(&buf, &q, &h, CoverageLevel::Cluster(1))
            .unwrap()
            .is_empty());
        // a point sharing a covered cluster is still novel at point level
        let near = inst(&h, 3, &[1]);
        assert!(coverage_score_factor(&buf, &near, &h, CoverageLevel::Cluster(1))
            .unwrap()
            .is_empty());
        assert_eq!(
            coverage_score_factor(&buf, &near, &h, CoverageLevel::Exact3D)
                .unwrap()
                .iter()
                .collect::<Vec<_>>(),
            vec![1]
        );
        // other classes do not count
        let other = line(1, 100);
        let mut mixed = Buffer::new(8);
        fill(&mut mixed, &[inst(&other, 0, &[0, 50, 99])], &[&other]);
        assert_eq!(
            coverage_score_factor(&mixed, &q, &h, CoverageLevel::Cluster(1))
                .unwrap()
                .len(),
            q.labels(1).unwrap().len()
        );
    }

    #[test]
    fn exact3d_factor_matches_brute_force() {
        let h = line(0, 60);
        let mut rng = RngHandle::new(11, "bf");
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let mut buf = Buffer::new(6);
        for f in 0..300 {
            let start = rng.uniform_index(55).unwrap() as u32;
            let q = inst(&h, f, &[start, start + 1, start + 3]);
            let cs = coverage_score_factor(&buf, &q, &h, CoverageLevel::Exact3D).unwrap();
            let held: std::collections::BTreeSet<u32> = buf
                .entries()
                .iter()
                .flat_map(|e| e.instance.observed_points().iter().map(|p| p.0))
                .collect();
            let novel: Vec<usize> = q
                .observed_points()
                .iter()
                .filter(|p| !held.contains(&p.0))
                .map(|p| p.index())
                .collect();
            assert_eq!(cs.iter().collect::<Vec<_>>(), novel);
            buf.observe(&policy, &q, None, &mut rng).unwrap();
        }
    }

    /// Full buffer of class A (two entries covering `covered`) plus one B entry.
    fn buff_cs_state(a: &LabelHierarchy, b: &LabelHierarchy, covered: &[u32]) -> Buffer {
        let mut buf = Buffer::new(3);
        fill(
            &mut buf,
            &[inst(a, 0, covered), inst(a, 1, covered), inst(b, 0, &[0])],
            &[a, b],
        );
        buf
    }

    #[test]
    fn buff_cs_novel_label_forces_replacement() {
        let a = line(0, 100);
        let b = line(1, 10);
        let buf = buff_cs_state(&a, &b, &[0]);
        let novel = inst(&a, 5, &[99]);
        let policy = BufferPolicy::new(Strategy::BuffCs);
        for seed in 0..200 {
            let mut bb = buf.clone();
            bb.observed.insert(SceneId(0), 1_000_000); // m/n ~ 0 cannot matter
            let d = bb
                .observe(&policy, &novel, Some(&a), &mut RngHandle::new(seed, "n"))
                .unwrap();
            assert_eq!(d.reason, Reason::CoverageNovel);
            assert!(matches!(
                d.kind,
                DecisionKind::Replaced {
                    victim_scene: SceneId(0),
                    ..
                }
            ));
        }
    }

    #[test]
    fn buff_cs_falls_back_to_balance_probability() {
        let a = line(0, 100);
        let b = line(1, 10);
        let buf = buff_cs_state(&a, &b, &[0, 1, 2]);
        let covered = inst(&a, 5, &[1]);
        let policy = BufferPolicy::new(Strategy::BuffCs);
        let trials = 20_000;
        let mut rng = RngHandle::new(4, "half");
        let mut hits = 0;
        for _ in 0..trials {
            let mut bb = buf.clone();
            bb.observed.insert(SceneId(0), 3); // n_A = 4 with m_A = 2
            let d = bb.observe(&policy, &covered, Some(&a), &mut rng).unwrap();
            assert_ne!(d.reason, Reason::CoverageNovel);
            hits += d.stored() as usize;
        }
        assert!(
            (hits as f64 - trials as f64 / 2.0).abs() <= three_sigma(trials, 0.5),
            "{hits}"
        );
    }

    #[test]
    fn class_strategies_ignore_total_count() {
        let a = line(0, 100);
        let b = line(1, 10);
        let items: Vec<Instance> = (0..60)
            .map(|i| {
                if i % 3 == 0 {
                    inst(&b, i, &[(i % 10) as u32])
                } else {
                    inst(&a, i, &[(i % 100) as u32])
                }
            })
            .collect();
        for s in [Strategy::ClassBalance, Strategy::BuffCs] {
            let policy = BufferPolicy::new(s);
            let run = |tamper: bool| {
                let mut buf = Buffer::new(5);
                let mut rng = RngHandle::new(2, "purity");
                items
                    .iter()
                    .map(|it| {
                        if tamper {
                            buf.total_observed += 1000;
                        }
                        let h = if it.scene == SceneId(0) { &a } else { &b };
                        buf.observe(&policy, it, Some(h), &mut rng).unwrap()
                    })
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(false), run(true));
        }
    }

    #[test]
    fn reservoir_ignores_class_identity() {
        let a = line(0, 10);
        let b = line(1, 10);
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let run = |swap: bool| {
            let mut buf = Buffer::new(4);
            let mut rng = RngHandle::new(8, "r");
            (0..100)
                .map(|i| {
                    let h = if (i % 2 == 0) ^ swap { &a } else { &b };
                    let d = buf.observe(&policy, &inst(h, i, &[0]), None, &mut rng).unwrap();
                    (d.reason, d.victim_index())
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn without_buffering_ignores_everything() {
        let h = line(0, 10);
        let mut buf = Buffer::new(4);
        let mut rng = RngHandle::new(0, "w");
        for i in 0..10 {
            let d = buf
                .observe(
                    &BufferPolicy::new(Strategy::WithoutBuffering),
                    &inst(&h, i, &[0]),
                    None,
                    &mut rng,
                )
                .unwrap();
            assert_eq!((d.kind, d.reason), (DecisionKind::Ignored, Reason::Disabled));
        }
        assert!(buf.is_empty());
        assert_eq!(buf.observed_count(SceneId(0)), 10);
    }

    #[test]
    fn min_unique_victim_keeps_unique_coverage() {
        let a = line(0, 100);
        let b = line(1, 10);
        // two redundant entries and one holding a unique far cluster
        let mut buf = Buffer::new(4);
        fill(
            &mut buf,
            &[
                inst(&a, 0, &[0]),
                inst(&a, 1, &[0]),
                inst(&a, 2, &[99]),
                inst(&b, 0, &[0]),
            ],
            &[&a, &b],
        );
        let policy = BufferPolicy::new(Strategy::BuffCs).with_victim(VictimPolicy::MinUniqueCoverage);
        for seed in 0..100 {
            let mut bb = buf.clone();
            let d = bb
                .observe(&policy, &inst(&a, 3, &[50]), Some(&a), &mut RngHandle::new(seed, "mu"))
                .unwrap();
            assert_eq!(d.reason, Reason::CoverageNovel);
            assert!(matches!(d.victim_index(), Some(0) | Some(1)));
        }
    }

    #[test]
    fn payload_presence_must_be_uniform() {
        let h = line(0, 10);
        let mut buf = Buffer::new(4);
        let mut rng = RngHandle::new(0, "pl");
        let policy = BufferPolicy::new(Strategy::Reservoir);
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let make = |i: &Instance| RepresentationPayload::ground_truth(i, &pts);
        buf.observe_with(&policy, &inst(&h, 0, &[0]), None, &mut rng, Some(make))
            .unwrap();
        assert!(buf.entries()[0].payload.is_some());
        assert!(matches!(
            buf.observe(&policy, &inst(&h, 1, &[1]), None, &mut rng),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn snapshot_and_decision_record_json() {
        let h = line(0, 100);
        let mut buf = Buffer::new(2);
        fill(&mut buf, &[inst(&h, 4, &[0, 99])], &[&h]);
        let snap = serde_json::to_value(buf.snapshot()).unwrap();
        assert_eq!(snap["entries"][0]["frame_index"], 4);
        assert_eq!(snap["entries"][0]["labels"].as_array().unwrap().len(), 2);
        assert!(snap["entries"][0].get("observed_points").is_none());

        let d = BufferDecision::new(
            DecisionKind::Replaced {
                victim_index: 1,
                victim_scene: SceneId(0),
            },
            Reason::CoverageNovel,
        );
        let rec = DecisionRecord::new(7, SceneId(0), Strategy::BuffCs, &d, 0.5);
        let v = serde_json::to_value(&rec).unwrap();
        for k in [
            "step",
            "scene",
            "strategy",
            "kind",
            "reason",
            "victim_index",
            "buffer_coverage_l1",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: DecisionRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn coverage_level_json_names() {
        assert_eq!(serde_json::to_string(&CoverageLevel::Exact3D).unwrap(), "\"exact_3d\"");
        assert_eq!(
            serde_json::to_string(&CoverageLevel::Cluster(1)).unwrap(),
            "{\"cluster\":1}"
        );
        let alias: CoverageLevel = serde_json::from_str("\"exact3d\"").unwrap();
        assert_eq!(alias, CoverageLevel::Exact3D);
    }
}
