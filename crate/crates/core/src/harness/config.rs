use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::buffering::{CoverageLevel, Strategy, VictimPolicy};
use crate::error::{Error, Result};
use crate::localizer::LocalizerConfig;
use crate::replay::{LearnerStub, LossWeights};
use crate::rng::RngHandle;
use crate::scenegen::{DwellRegion, SceneSpec, StreamOrder, Trajectory};
use crate::types::SceneId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Store frames and their labels only.
    #[default]
    Img,
    /// Also store the learner's output for distillation.
    Rep,
}

impl std::str::FromStr for ReplayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "img" | "img-buff" => Ok(ReplayMode::Img),
            "rep" | "rep-buff" => Ok(ReplayMode::Rep),
            _ => Err(Error::Config(format!("unknown replay mode `{s}`"))),
        }
    }
}

/// Task order as written in a config: an explicit permutation, `"identity"`,
/// or `"random(N)"` / `"random:N"`, which shuffles every scene but the last
/// with seed `N`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum OrderSpec {
    #[default]
    Identity,
    Permutation(Vec<u32>),
    Random(u64),
}

impl OrderSpec {
    pub fn resolve(&self, n_scenes: usize) -> Result<StreamOrder> {
        let order = match self {
            OrderSpec::Identity => StreamOrder::identity(n_scenes),
            OrderSpec::Permutation(p) => StreamOrder(p.iter().map(|&i| SceneId(i)).collect()),
            OrderSpec::Random(seed) => {
                let mut ids: Vec<SceneId> = StreamOrder::identity(n_scenes).0;
                if n_scenes > 1 {
                    let mut rng = RngHandle::new(*seed, "order");
                    rng.shuffle(&mut ids[..n_scenes - 1]);
                }
                StreamOrder(ids)
            }
        };
        let ids: Vec<SceneId> = (0..n_scenes as u32).map(SceneId).collect();
        order.validate(&ids)?;
        Ok(order)
    }
}

impl std::str::FromStr for OrderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("identity") {
            return Ok(OrderSpec::Identity);
        }
        let lower = t.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("random") {
            let num = rest.trim_start_matches([':', '(']).trim_end_matches(')').trim();
            return num
                .parse()
                .map(OrderSpec::Random)
                .map_err(|_| Error::Config(format!("bad random order `{s}`")));
        }
        t.split(',')
            .map(|x| x.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(OrderSpec::Permutation)
            .map_err(|_| Error::Config(format!("bad order `{s}`")))
    }
}

impl fmt::Display for OrderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderSpec::Identity => f.write_str("identity"),
            OrderSpec::Random(n) => write!(f, "random({n})"),
            OrderSpec::Permutation(p) => {
                let parts: Vec<String> = p.iter().map(u32::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for OrderSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OrderSpec::Permutation(p) => p.serialize(s),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for OrderSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List(Vec<u32>),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::List(p) => Ok(OrderSpec::Permutation(p)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_buffer_sizes() -> Vec<usize> {
    vec![128, 256, 512, 1024]
}

fn default_metric_level() -> usize {
    1
}

fn default_replay_batch() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Missing fields take their [`Default`] values, so a config file only needs
/// what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene_profile: Vec<SceneSpec>,
    #[serde(default)]
    pub order: OrderSpec,
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_buffer_sizes")]
    pub buffer_sizes: Vec<usize>,
    #[serde(default)]
    pub replay_mode: ReplayMode,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub localizer: LocalizerConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Label space of Buff-CS's coverage-score factor.
    #[serde(default)]
    pub coverage_level: CoverageLevel,
    /// Cluster level of the reported buffer coverage.
    #[serde(default = "default_metric_level")]
    pub metric_level: usize,
    #[serde(default)]
    pub victim_policy: VictimPolicy,
    /// Replayed samples per current-task sample.
    #[serde(default = "default_replay_batch")]
    pub replay_batch: usize,
    /// Compute replay losses during each task's training pass.
    #[serde(default = "default_true")]
    pub trace_losses: bool,
    #[serde(default)]
    pub learner: LearnerStub,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene_profile: default_profile(),
            order: OrderSpec::Identity,
            strategies: vec![Strategy::Reservoir, Strategy::ClassBalance, Strategy::BuffCs],
            buffer_sizes: default_buffer_sizes(),
            replay_mode: ReplayMode::Img,
            seeds: vec![0, 1, 2, 3, 4],
            localizer: LocalizerConfig::default(),
            loss_weights: LossWeights::standard(),
            coverage_level: CoverageLevel::default(),
            metric_level: 1,
            victim_policy: VictimPolicy::Uniform,
            replay_batch: 1,
            trace_losses: true,
            learner: LearnerStub::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_profile.is_empty() {
            return Err(Error::Config("scene_profile is empty".into()));
        }
        for s in &self.scene_profile {
            s.validate()?;
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        if self.buffer_sizes.is_empty() || self.buffer_sizes.contains(&0) {
            return Err(Error::Config("buffer_sizes must be non-empty and positive".into()));
        }
        self.localizer.validate()?;
        let min_levels = self.scene_profile.iter().map(|s| s.levels).min().unwrap_or(0);
        if self.localizer.overlap_level > min_levels || self.metric_level == 0 || self.metric_level > min_levels {
            return Err(Error::Config(format!(
                "overlap_level/metric_level exceed the {min_levels} hierarchy levels"
            )));
        }
        if let CoverageLevel::Cluster(l) = self.coverage_level {
            if l == 0 || l > min_levels {
                return Err(Error::Config(format!("coverage level {l} out of range")));
            }
        }
        if self
            .scene_profile
            .iter()
            .any(|s| s.levels != self.loss_weights.alphas.len())
        {
            return Err(Error::Config(
                "loss_weights must hold one alpha per hierarchy level plus beta".into(),
            ));
        }
        self.order.resolve(self.scene_profile.len())?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seven room-sized scenes (about 125 m³ together) in the listing order of the
/// classic seven-scene benchmark, with stream lengths that differ the way its
/// training splits do. Every camera lingers in the front half of its box for
/// 90% of the frames, then sweeps the whole box.
pub fn default_profile() -> Vec<SceneSpec> {
    let scenes: [(&str, usize); 7] = [
        ("chess", 800),
        ("fire", 400),
        ("heads", 200),
        ("office", 1200),
        ("pumpkin", 800),
        ("redkitchen", 1400),
        ("stairs", 600),
    ];
    scenes
        .iter()
        .map(|&(name, frames)| SceneSpec {
            name: name.to_string(),
            extent: [3.5, 2.5, 2.0],
            point_count: 2000,
            trajectory: Trajectory::BiasedDwell {
                dwell_fraction: 0.9,
                dwell_region: DwellRegion::FrontHalf,
            },
            frames,
            view_radius: 0.7,
            seed: name.to_string(),
            levels: 2,
            branching: 25,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_spec_parsing() {
        assert_eq!("random:7".parse::<OrderSpec>().unwrap(), OrderSpec::Random(7));
        assert_eq!("random(3)".parse::<OrderSpec>().unwrap(), OrderSpec::Random(3));
        assert_eq!(
            "2,0,1".parse::<OrderSpec>().unwrap(),
            OrderSpec::Permutation(vec![2, 0, 1])
        );
        assert!("x,y".parse::<OrderSpec>().is_err());
        let json = serde_json::to_string(&OrderSpec::Random(5)).unwrap();
        assert_eq!(json, "\"random(5)\"");
        let back: OrderSpec = serde_json::from_str("[1,0]").unwrap();
        assert_eq!(back, OrderSpec::Permutation(vec![1, 0]));
    }

    #[test]
    fn random_order_keeps_last_scene() {
        for seed in 0..20 {
            let o = OrderSpec::Random(seed).resolve(7).unwrap();
            assert_eq!(o.0[6], SceneId(6));
        }
        assert_ne!(
            OrderSpec::Random(1).resolve(7).unwrap(),
            OrderSpec::Random(2).resolve(7).unwrap()
        );
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        for field in [
            "scene_profile",
            "order",
            "strategies",
            "buffer_sizes",
            "replay_mode",
            "seeds",
            "localizer",
            "loss_weights",
        ] {
            assert!(text.contains(&format!("\"{field}\"")), "{field}");
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seeds": [7], "order": [6, 5, 4, 3, 2, 1, 0]}"#).unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.buffer_sizes, vec![128, 256, 512, 1024]);
        assert_eq!(cfg.scene_profile.len(), 7);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let cfg = ExperimentConfig {
            buffer_sizes: vec![0],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            order: OrderSpec::Permutation(vec![0, 0, 1, 2, 3, 4, 5]),
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::BadPermutation(_))));
    }
}
