//! Experiment configuration: one JSON document per experiment.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! command-line flags. Dataset paths are relative to the data root
//! (`FUSIONFORGE_DATA`); checkpoint, architecture and plan paths are
//! relative to the working directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use fusionforge_core::data::LabelKind;
use fusionforge_core::nn::zoo;
use fusionforge_core::{Architecture, FeatureShape, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::FieldError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directories live under `<output_dir>/<name>/`.
    pub name: String,
    /// Every dataset is resized and channel-converted to this shape.
    pub input: FeatureShape,
    /// Built-in architecture id, architecture JSON file (`*.json`) or
    /// checkpoint file.
    pub model_a: String,
    pub model_b: String,
    /// Required when the model is an architecture rather than a checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_dataset_a: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_dataset_b: Option<DatasetSpec>,
    pub retrain_dataset: DatasetSpec,
    #[serde(default)]
    pub pretrain: TrainConfig,
    /// Shared by the transfer-learning baselines and the hybrid run.
    #[serde(default)]
    pub retrain: TrainConfig,
    /// Hidden widths of the fresh head in the transfer-learning baselines.
    #[serde(default = "default_head")]
    pub transfer_head: Vec<usize>,
    #[serde(default)]
    pub fusion: FusionSettings,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

fn default_head() -> Vec<usize> {
    vec![128]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub max_links: usize,
    pub head_sizes: Vec<usize>,
    /// Fixed plan file; auto-pairing when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings { max_links: 4, head_sizes: default_head(), plan: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// IDX files `train-images-idx3-ubyte` etc. in one directory.
    Mnist,
    /// The binary release: `train.bin`, `test.bin` and optional label-name files.
    Cifar100,
    /// One subdirectory per class; split 80/20 per class.
    ImageFolder,
    /// Generated horizontal-band patterns, no files needed.
    Bands,
}

impl DatasetKind {
    pub fn default_path(self) -> Option<&'static str> {
        match self {
            DatasetKind::Mnist => Some("mnist"),
            DatasetKind::Cifar100 => Some("cifar-100-binary"),
            DatasetKind::ImageFolder => Some("natural_images"),
            DatasetKind::Bands => None,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "MNIST",
            DatasetKind::Cifar100 => "CIFAR-100",
            DatasetKind::ImageFolder => "Image folder",
            DatasetKind::Bands => "Bands",
        }
    }

    /// Files that must exist under the dataset directory.
    pub fn required_files(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Mnist => &MNIST_FILES,
            DatasetKind::Cifar100 => &["train.bin", "test.bin"],
            DatasetKind::ImageFolder | DatasetKind::Bands => &[],
        }
    }
}

pub const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// Which classes to keep, relabelled `0..k` in the listed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassSelect {
    /// The first `k` classes.
    First(usize),
    Indices(Vec<usize>),
    Names(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Relative to the data root; defaults per kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Name shown in tables and recorded in checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub cifar_labels: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<ClassSelect>,
    /// `[start, end)` slice of the train side, applied after class selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_range: Option<[usize; 2]>,
    /// Seeded stratified subset of the train side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_range: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    /// Per-channel standardization with train-split statistics.
    #[serde(default)]
    pub standardize: bool,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        DatasetSpec {
            kind,
            path: None,
            label: None,
            cifar_labels: LabelKind::Fine,
            classes: None,
            train_range: None,
            train_per_class: None,
            test_range: None,
            test_per_class: None,
            standardize: false,
        }
    }

    pub fn display_name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.display_name().to_string())
    }

    pub fn resolved_path(&self, data_root: &Path) -> Option<PathBuf> {
        let rel = self.path.clone().or_else(|| self.kind.default_path().map(PathBuf::from))?;
        Some(if rel.is_absolute() { rel } else { data_root.join(rel) })
    }

    fn check(&self, field: &str, data_root: &Path, errors: &mut Vec<FieldError>) {
        let mut err = |sub: &str, msg: String| errors.push(FieldError::new(format!("{field}.{sub}"), msg));
        if let Some(dir) = self.resolved_path(data_root) {
            if !dir.exists() {
                err("path", format!("{} does not exist", dir.display()));
            } else {
                for f in self.kind.required_files() {
                    if !dir.join(f).is_file() {
                        err("path", format!("{} is missing {f}", dir.display()));
                    }
                }
            }
        }
        for (sub, range) in [("train_range", self.train_range), ("test_range", self.test_range)] {
            if let Some([a, b]) = range {
                if a >= b {
                    err(sub, format!("empty range [{a}, {b})"));
                }
            }
        }
        for (sub, n) in [("train_per_class", self.train_per_class), ("test_per_class", self.test_per_class)] {
            if n == Some(0) {
                err(sub, "must be positive".into());
            }
        }
        match (&self.classes, self.kind) {
            (Some(ClassSelect::First(0)), _) => err("classes", "must keep at least one class".into()),
            (Some(ClassSelect::Indices(v)), _) if v.is_empty() => err("classes", "empty list".into()),
            (Some(ClassSelect::Names(v)), _) if v.is_empty() => err("classes", "empty list".into()),
            (None, DatasetKind::Bands) => err("classes", "bands needs a class count".into()),
            (Some(ClassSelect::First(_)), DatasetKind::Bands) => {}
            (Some(_), DatasetKind::Bands) => err("classes", "bands takes a class count".into()),
            _ => {}
        }
        if self.kind == DatasetKind::Bands && (self.train_per_class.is_none() || self.test_per_class.is_none()) {
            err("train_per_class", "bands needs train_per_class and test_per_class".into());
        }
    }
}

/// Where a constituent model comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    Builtin(String),
    ArchitectureFile(PathBuf),
    Checkpoint(PathBuf),
}

impl ModelSource {
    pub fn parse(text: &str) -> Self {
        if [zoo::CUSTOM16, zoo::TINY_A, zoo::TINY_B].contains(&text) {
            ModelSource::Builtin(text.to_string())
        } else if text.ends_with(".json") {
            ModelSource::ArchitectureFile(PathBuf::from(text))
        } else {
            ModelSource::Checkpoint(PathBuf::from(text))
        }
    }

    pub fn needs_pretraining(&self) -> bool {
        !matches!(self, ModelSource::Checkpoint(_))
    }

    /// The architecture to pretrain, with the given input and class count.
    pub fn architecture(&self, input: FeatureShape, num_classes: usize) -> Result<Architecture, String> {
        match self {
            ModelSource::Builtin(id) => zoo::by_id(id, input, num_classes).map_err(|e| e.to_string()),
            ModelSource::ArchitectureFile(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let mut arch = Architecture::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                if arch.input != input {
                    return Err(format!("{} declares input {}, experiment uses {input}", path.display(), arch.input));
                }
                // The head is rebuilt for the dataset's class count.
                let sizes = hidden_head_sizes(&arch);
                arch = arch
                    .with_head(&sizes, num_classes)
                    .ok_or_else(|| format!("{} has no flatten layer", path.display()))?;
                Ok(arch)
            }
            ModelSource::Checkpoint(p) => Err(format!("{} is a checkpoint, not an architecture", p.display())),
        }
    }
}

fn hidden_head_sizes(arch: &Architecture) -> Vec<usize> {
    use fusionforge_core::nn::LayerKind;
    let after_flatten = arch.layers.iter().skip_while(|l| l.kind != LayerKind::Flatten);
    let mut dense: Vec<usize> = after_flatten
        .filter_map(|l| if let LayerKind::Dense { units } = l.kind { Some(units) } else { None })
        .collect();
    dense.pop();
    dense
}

/// Which parts of the config a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Pretrain,
    Retrain,
    Compare,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FieldError::new("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| FieldError::new("--config", format!("{}: {e}", path.display())))
    }

    pub fn model(&self, side: Side) -> ModelSource {
        ModelSource::parse(match side {
            Side::A => &self.model_a,
            Side::B => &self.model_b,
        })
    }

    pub fn pretrain_dataset(&self, side: Side) -> Option<&DatasetSpec> {
        match side {
            Side::A => self.pretrain_dataset_a.as_ref(),
            Side::B => self.pretrain_dataset_b.as_ref(),
        }
    }

    /// Every problem with the fields `needs` touches, one entry per field.
    pub fn validate(&self, data_root: &Path, needs: Needs) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let push = |errors: &mut Vec<FieldError>, field: &str, msg: String| errors.push(FieldError::new(field, msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            push(&mut errors, "name", format!("`{}` is not usable as a directory name", self.name));
        }
        if self.seeds.is_empty() {
            push(&mut errors, "seeds", "at least one seed is required".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            push(&mut errors, "seeds", format!("seed {dup} is listed twice"));
        }
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            push(&mut errors, "input", format!("all dimensions must be positive, got {}", self.input));
        }
        if needs == Needs::Compare {
            return errors;
        }
        for side in Side::BOTH {
            let field = side.model_field();
            let source = self.model(side);
            match &source {
                ModelSource::Checkpoint(p) | ModelSource::ArchitectureFile(p) if !p.is_file() => {
                    push(
                        &mut errors,
                        field,
                        format!("{} does not exist and is not a built-in architecture id", p.display()),
                    );
                }
                ModelSource::Builtin(id) if id == zoo::CUSTOM16 => {
                    if self.input.height.min(self.input.width) < zoo::CUSTOM16_MIN_INPUT {
                        let min = zoo::CUSTOM16_MIN_INPUT;
                        push(
                            &mut errors,
                            field,
                            format!("custom16 needs input of at least {min}×{min}, got {}", self.input),
                        );
                    }
                }
                _ => {}
            }
            if needs == Needs::Pretrain && source.needs_pretraining() {
                match self.pretrain_dataset(side) {
                    Some(spec) => spec.check(side.dataset_field(), data_root, &mut errors),
                    None => {
                        push(&mut errors, side.dataset_field(), format!("required because {field} is an architecture"))
                    }
                }
            }
        }
        let (phase, cfg) = match needs {
            Needs::Pretrain => ("pretrain", &self.pretrain),
            _ => ("retrain", &self.retrain),
        };
        if let Err(e) = cfg.validate() {
            push(&mut errors, phase, e.to_string());
        }
        if needs == Needs::Retrain {
            self.retrain_dataset.check("retrain_dataset", data_root, &mut errors);
            if self.transfer_head.contains(&0) {
                push(&mut errors, "transfer_head", "widths must be positive".into());
            }
            if self.fusion.head_sizes.contains(&0) {
                push(&mut errors, "fusion.head_sizes", "widths must be positive".into());
            }
            if self.fusion.max_links == 0 && self.fusion.plan.is_none() {
                push(&mut errors, "fusion.max_links", "must be at least 1".into());
            }
            if let Some(p) = &self.fusion.plan {
                if !p.is_file() {
                    push(&mut errors, "fusion.plan", format!("{} does not exist", p.display()));
                }
            }
        }
        errors
    }
}

/// One of the two constituent models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::A, Side::B];

    pub fn dir_name(self) -> &'static str {
        match self {
            Side::A => "a",
            Side::B => "b",
        }
    }

    fn model_field(self) -> &'static str {
        match self {
            Side::A => "model_a",
            Side::B => "model_b",
        }
    }

    fn dataset_field(self) -> &'static str {
        match self {
            Side::A => "pretrain_dataset_a",
            Side::B => "pretrain_dataset_b",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "model 1",
            Side::B => "model 2",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "name": "t",
            "input": {"height": 8, "width": 8, "channels": 1},
            "model_a": "tiny-a",
            "model_b": "tiny-b",
            "pretrain_dataset_a": {"kind": "bands", "classes": 3, "train_per_class": 4, "test_per_class": 2},
            "pretrain_dataset_b": {"kind": "bands", "classes": 2, "train_per_class": 4, "test_per_class": 2},
            "retrain_dataset": {"kind": "bands", "classes": 2, "train_per_class": 4, "test_per_class": 2},
            "seeds": [1]
        }"#
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(minimal()).unwrap();
        assert_eq!(cfg.retrain, TrainConfig::default());
        assert_eq!(cfg.fusion.max_links, 4);
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
        assert!(cfg.validate(Path::new("/nonexistent"), Needs::Pretrain).is_empty());
        assert!(cfg.validate(Path::new("/nonexistent"), Needs::Retrain).is_empty());
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = minimal().replace("\"seeds\"", "\"sedes\": [], \"seeds\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.seeds.clear();
        cfg.model_b = "missing.ckpt".into();
        cfg.retrain.learning_rate = 0.0;
        cfg.retrain_dataset = DatasetSpec::new(DatasetKind::Mnist);
        let fields: Vec<String> =
            cfg.validate(Path::new("/nonexistent"), Needs::Retrain).into_iter().map(|e| e.field).collect();
        assert_eq!(fields, ["seeds", "model_b", "retrain", "retrain_dataset.path"]);
    }

    #[test]
    fn model_sources() {
        assert_eq!(ModelSource::parse("custom16"), ModelSource::Builtin("custom16".into()));
        assert_eq!(ModelSource::parse("nets/a.json"), ModelSource::ArchitectureFile("nets/a.json".into()));
        assert_eq!(ModelSource::parse("runs/a.ckpt"), ModelSource::Checkpoint("runs/a.ckpt".into()));
    }

    #[test]
    fn class_select_forms() {
        let parse = |s: &str| serde_json::from_str::<ClassSelect>(s).unwrap();
        assert_eq!(parse("3"), ClassSelect::First(3));
        assert_eq!(parse("[4, 1]"), ClassSelect::Indices(vec![4, 1]));
        assert_eq!(parse(r#"["cat", "dog"]"#), ClassSelect::Names(vec!["cat".into(), "dog".into()]));
    }
}
