//! TOML experiment configs.
//!
//! Every section mirrors a `fal-core` config type. Missing keys take the
//! library defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fal_core::losses::ContrastConfig;
use fal_core::matching::CostWeights;
use fal_core::meta::{ProtoNetConfig, ProtoVariant, TaskGenConfig, TaskMode};
use fal_core::teachstudent::{AugmentConfig, MtdetrConfig, ProsecoConfig, PseudoLabelFlags, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::carbon::{CarbonInputs, AMT_INTENSITIES, AMT_SHARES};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Experiment {
    Protonet,
    MamlLinreg,
    Prop44,
    Proseco,
    Mtdetr,
    Carbon,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Protonet => "protonet",
            Experiment::MamlLinreg => "maml-linreg",
            Experiment::Prop44 => "prop44",
            Experiment::Proseco => "proseco",
            Experiment::Mtdetr => "mtdetr",
            Experiment::Carbon => "carbon",
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whole config file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub protonet: ProtoNetSection,
    #[serde(default, rename = "maml-linreg")]
    pub maml_linreg: MamlSection,
    #[serde(default)]
    pub prop44: Prop44Section,
    #[serde(default)]
    pub proseco: ProsecoSection,
    #[serde(default)]
    pub mtdetr: MtdetrSection,
    #[serde(default)]
    pub carbon: CarbonSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub d: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub class_spread: f64,
    pub noise_std: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskGenConfig::default();
        Self { d: t.d, n_way: t.n_way, k_shot: t.k_shot, q_queries: t.q_queries, class_spread: t.class_spread, noise_std: t.noise_std }
    }
}

impl From<TaskSection> for TaskGenConfig {
    fn from(s: TaskSection) -> Self {
        Self { d: s.d, n_way: s.n_way, k_shot: s.k_shot, q_queries: s.q_queries, class_spread: s.class_spread, noise_std: s.noise_std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    Vanilla,
    Normalized,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoNetSection {
    pub variant: VariantName,
    /// Only meaningful for the entropy variant.
    pub lambda1: Option<f64>,
    pub embed_dim: usize,
    pub steps: usize,
    pub batch_episodes: usize,
    pub lr: f64,
    pub init_std: f64,
    pub task: TaskSection,
}

pub const DEFAULT_LAMBDA1: f64 = 0.1;

impl Default for ProtoNetSection {
    fn default() -> Self {
        let c = ProtoNetConfig::default();
        Self {
            variant: VariantName::Vanilla,
            lambda1: None,
            embed_dim: c.embed_dim,
            steps: c.steps,
            batch_episodes: c.batch_episodes,
            lr: c.lr,
            init_std: c.init_std,
            task: TaskSection::default(),
        }
    }
}

impl ProtoNetSection {
    pub fn to_core(&self) -> Result<ProtoNetConfig, CliError> {
        let variant = match (self.variant, self.lambda1) {
            (VariantName::Vanilla, None) => ProtoVariant::Vanilla,
            (VariantName::Normalized, None) => ProtoVariant::Normalized,
            (VariantName::Entropy, l) => ProtoVariant::Entropy { lambda1: l.unwrap_or(DEFAULT_LAMBDA1) },
            (_, Some(_)) => return Err(CliError::Config("protonet.lambda1 only applies to variant = \"entropy\"".into())),
        };
        Ok(ProtoNetConfig {
            task: self.task.into(),
            embed_dim: self.embed_dim,
            steps: self.steps,
            batch_episodes: self.batch_episodes,
            lr: self.lr,
            init_std: self.init_std,
            variant,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Iid,
    Colinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlSection {
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub d: usize,
    pub mode: ModeName,
}

impl Default for MamlSection {
    fn default() -> Self {
        Self { iterations: 200, alpha: 0.025, beta: 1.0, d: 5, mode: ModeName::Colinear }
    }
}

impl MamlSection {
    pub fn task_mode(&self) -> TaskMode {
        match self.mode {
            ModeName::Iid => TaskMode::Iid,
            ModeName::Colinear => TaskMode::Colinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop44Section {
    pub epsilon: f64,
    pub d: usize,
    pub shift: f64,
    pub n_samples: usize,
}

impl Default for Prop44Section {
    fn default() -> Self {
        Self { epsilon: 0.02, d: 3, shift: 1.0, n_samples: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub n_classes: usize,
    pub token_dim: usize,
    pub n_tokens: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub class_spread: f64,
    pub feature_noise: f64,
    pub loc_noise: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub world_seed: u64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            n_classes: s.n_classes,
            token_dim: s.token_dim,
            n_tokens: s.n_tokens,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            class_spread: s.class_spread,
            feature_noise: s.feature_noise,
            loc_noise: s.loc_noise,
            min_size: s.min_size,
            max_size: s.max_size,
            world_seed: s.world_seed,
        }
    }
}

impl From<SceneSection> for SceneConfig {
    fn from(s: SceneSection) -> Self {
        Self {
            n_classes: s.n_classes,
            token_dim: s.token_dim,
            n_tokens: s.n_tokens,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            class_spread: s.class_spread,
            feature_noise: s.feature_noise,
            loc_noise: s.loc_noise,
            min_size: s.min_size,
            max_size: s.max_size,
            world_seed: s.world_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_prob: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        Self { weak_noise: a.weak_noise, strong_noise: a.strong_noise, mask_prob: a.mask_prob }
    }
}

impl From<AugmentSection> for AugmentConfig {
    fn from(s: AugmentSection) -> Self {
        Self { weak_noise: s.weak_noise, strong_noise: s.strong_noise, mask_prob: s.mask_prob }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub lambda_class: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_sim: f64,
    pub lambda_coord: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = CostWeights::default();
        Self { lambda_class: w.lambda_class, lambda_l1: w.lambda_l1, lambda_giou: w.lambda_giou, lambda_sim: w.lambda_sim, lambda_coord: w.lambda_coord }
    }
}

impl From<WeightsSection> for CostWeights {
    fn from(s: WeightsSection) -> Self {
        Self { lambda_class: s.lambda_class, lambda_l1: s.lambda_l1, lambda_giou: s.lambda_giou, lambda_sim: s.lambda_sim, lambda_coord: s.lambda_coord }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastSection {
    pub tau: f64,
    pub tau_t: f64,
    pub lambda_sce: f64,
    pub delta: f64,
}

impl Default for ContrastSection {
    fn default() -> Self {
        let c = ContrastConfig::default();
        Self { tau: c.tau, tau_t: c.tau_t, lambda_sce: c.lambda_sce, delta: c.delta }
    }
}

impl From<ContrastSection> for ContrastConfig {
    fn from(s: ContrastSection) -> Self {
        Self { tau: s.tau, tau_t: s.tau_t, lambda_sce: s.lambda_sce, delta: s.delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProsecoSection {
    pub embed_dim: usize,
    pub batch_scenes: usize,
    pub k_boxes: usize,
    pub jitter_std: f64,
    pub bg_ratio: f64,
    pub lambda_contrast: f64,
    pub keep_rate: f64,
    pub lr: f64,
    pub init_std: f64,
    pub steps: usize,
    pub scene: SceneSection,
    pub augment: AugmentSection,
    pub weights: WeightsSection,
    pub contrast: ContrastSection,
}

impl Default for ProsecoSection {
    fn default() -> Self {
        let c = ProsecoConfig::default();
        Self {
            embed_dim: c.embed_dim,
            batch_scenes: c.batch_scenes,
            k_boxes: c.k_boxes,
            jitter_std: c.jitter_std,
            bg_ratio: c.bg_ratio,
            lambda_contrast: c.lambda_contrast,
            keep_rate: c.keep_rate,
            lr: c.lr,
            init_std: c.init_std,
            steps: c.steps,
            scene: SceneSection::default(),
            augment: AugmentSection::default(),
            weights: WeightsSection::default(),
            contrast: ContrastSection::default(),
        }
    }
}

impl From<ProsecoSection> for ProsecoConfig {
    fn from(s: ProsecoSection) -> Self {
        Self {
            scene: s.scene.into(),
            embed_dim: s.embed_dim,
            batch_scenes: s.batch_scenes,
            k_boxes: s.k_boxes,
            jitter_std: s.jitter_std,
            bg_ratio: s.bg_ratio,
            augment: s.augment.into(),
            weights: s.weights.into(),
            contrast: s.contrast.into(),
            lambda_contrast: s.lambda_contrast,
            keep_rate: s.keep_rate,
            lr: s.lr,
            init_std: s.init_std,
            steps: s.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagsSection {
    pub use_nms: bool,
    pub nms_iou: f64,
    /// Absent means soft pseudo-labels with no filtering.
    pub confidence_threshold: Option<f64>,
    pub hard_labels: bool,
}

impl Default for FlagsSection {
    fn default() -> Self {
        let f = PseudoLabelFlags::default();
        Self { use_nms: f.use_nms, nms_iou: f.nms_iou, confidence_threshold: f.confidence_threshold, hard_labels: f.hard_labels }
    }
}

impl From<FlagsSection> for PseudoLabelFlags {
    fn from(s: FlagsSection) -> Self {
        Self { use_nms: s.use_nms, nms_iou: s.nms_iou, confidence_threshold: s.confidence_threshold, hard_labels: s.hard_labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtdetrSection {
    pub embed_dim: usize,
    pub n_train_scenes: usize,
    pub labeled_fraction: f64,
    pub n_test_scenes: usize,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub init_std: f64,
    pub lambda_u: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub eval_every: usize,
    pub scene: SceneSection,
    pub augment: AugmentSection,
    pub weights: WeightsSection,
    pub flags: FlagsSection,
}

impl Default for MtdetrSection {
    fn default() -> Self {
        let c = MtdetrConfig::default();
        Self {
            embed_dim: c.embed_dim,
            n_train_scenes: c.n_train_scenes,
            labeled_fraction: c.labeled_fraction,
            n_test_scenes: c.n_test_scenes,
            pretrain_steps: c.pretrain_steps,
            steps: c.steps,
            batch_labeled: c.batch_labeled,
            batch_unlabeled: c.batch_unlabeled,
            lr: c.lr,
            init_std: c.init_std,
            lambda_u: c.lambda_u,
            alpha_start: c.alpha_start,
            alpha_end: c.alpha_end,
            eval_every: c.eval_every,
            scene: SceneSection::default(),
            augment: AugmentSection::default(),
            weights: WeightsSection::default(),
            flags: FlagsSection::default(),
        }
    }
}

impl From<MtdetrSection> for MtdetrConfig {
    fn from(s: MtdetrSection) -> Self {
        Self {
            scene: s.scene.into(),
            embed_dim: s.embed_dim,
            n_train_scenes: s.n_train_scenes,
            labeled_fraction: s.labeled_fraction,
            n_test_scenes: s.n_test_scenes,
            pretrain_steps: s.pretrain_steps,
            steps: s.steps,
            batch_labeled: s.batch_labeled,
            batch_unlabeled: s.batch_unlabeled,
            lr: s.lr,
            init_std: s.init_std,
            weights: s.weights.into(),
            lambda_u: s.lambda_u,
            flags: s.flags.into(),
            alpha_start: s.alpha_start,
            alpha_end: s.alpha_end,
            augment: s.augment.into(),
            eval_every: s.eval_every,
        }
    }
}

/// Defaults are the ImageNet annotation of the appendix: 2000 worker hours
/// at 300 W over the AMT worker mix.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarbonSection {
    pub worker_hours: f64,
    pub watts_per_worker: f64,
    pub shares: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl Default for CarbonSection {
    fn default() -> Self {
        Self { worker_hours: 2000.0, watts_per_worker: 300.0, shares: AMT_SHARES.to_vec(), intensities: AMT_INTENSITIES.to_vec() }
    }
}

impl From<&CarbonSection> for CarbonInputs {
    fn from(s: &CarbonSection) -> Self {
        Self { worker_hours: s.worker_hours, watts_per_worker: s.watts_per_worker, shares: s.shares.clone(), intensities: s.intensities.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_library_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(MtdetrConfig::from(c.mtdetr), MtdetrConfig::default());
        assert_eq!(ProsecoConfig::from(c.proseco), ProsecoConfig::default());
        assert_eq!(c.protonet.to_core().unwrap(), ProtoNetConfig::default());
        assert!(c.seeds.is_empty() && c.experiment.is_none());
    }

    #[test]
    fn nested_sections_override_single_keys() {
        let c = ExperimentConfig::parse(
            "experiment = \"mtdetr\"\nseeds = [1, 2]\n[mtdetr]\nlambda_u = 0.0\n[mtdetr.flags]\nconfidence_threshold = 0.7\n[mtdetr.scene]\nn_classes = 4\n",
        )
        .unwrap();
        let m = MtdetrConfig::from(c.mtdetr);
        assert_eq!(c.experiment, Some(Experiment::Mtdetr));
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(m.lambda_u, 0.0);
        assert_eq!(m.flags.confidence_threshold, Some(0.7));
        assert_eq!(m.scene.n_classes, 4);
        assert_eq!(m.steps, MtdetrConfig::default().steps);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["lamda_u = 1.0", "[mtdetr]\nlamda_u = 1.0", "[proseco.contrast]\ndelt = 0.5", "experiment = \"resnet\""] {
            assert!(matches!(ExperimentConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn lambda1_needs_the_entropy_variant() {
        let c = ExperimentConfig::parse("[protonet]\nvariant = \"entropy\"\nlambda1 = 0.3").unwrap();
        assert_eq!(c.protonet.to_core().unwrap().variant, ProtoVariant::Entropy { lambda1: 0.3 });
        let c = ExperimentConfig::parse("[protonet]\nvariant = \"normalized\"\nlambda1 = 0.3").unwrap();
        assert!(c.protonet.to_core().is_err());
    }

    #[test]
    fn maml_section_uses_dashed_name() {
        let c = ExperimentConfig::parse("[maml-linreg]\nmode = \"iid\"\niterations = 7").unwrap();
        assert_eq!(c.maml_linreg.task_mode(), TaskMode::Iid);
        assert_eq!(c.maml_linreg.iterations, 7);
    }
}
