//! JSON run configurations and path resolution.

use std::path::{Path, PathBuf};

use avt::data::{load_cifar10, load_idx, synth_blobs, BlobSpec, Dataset};
use avt::groups::{top_level_split, ClusterTree, GroupPartition};
use avt::ndt::Variant;
use avt::network::{mlp, preset, LayerSpec};
use avt::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where a dataset comes from. Relative file paths are taken from the data
/// root when one is set, otherwise from the config file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetRef {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_classes: Option<usize>,
    },
    /// `train-*` or `t10k-*` IDX files under the data root (or its
    /// `fashion-mnist` subdirectory).
    FashionMnist { split: Split },
    Cifar10 { path: PathBuf },
    Blobs(BlobSpec),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchRef {
    Preset(String),
    Mlp { hidden: Vec<usize> },
    Layers(Vec<LayerSpec>),
}

/// Source of a group partition: the top-level split of a tree, or a
/// partition file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupsRef {
    Tree(PathBuf),
    Partition(PathBuf),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub dataset: DatasetRef,
    pub architecture: ArchRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsRef>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NdtRun {
    pub dataset: DatasetRef,
    /// Architecture of a binary node; output widths are adjusted per node.
    pub architecture: ArchRef,
    pub tree: PathBuf,
    pub variant: Variant,
    pub eps_table: Vec<f64>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_from: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub dataset: DatasetRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsRef>,
    #[serde(default)]
    pub eps: Vec<f64>,
    /// Radius for the intra-group metrics; defaults to each outer radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_inner: Option<f64>,
}

/// Base directories for relative paths.
pub struct Paths {
    pub config_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
}

impl Paths {
    pub fn local(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }

    pub fn data(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(d) if !p.is_absolute() => d.join(p),
            _ => self.local(p),
        }
    }
}

impl DatasetRef {
    /// Loads the dataset and returns it with the files that were read.
    pub fn load(&self, paths: &Paths) -> Result<(Dataset, Vec<PathBuf>), CliError> {
        match self {
            DatasetRef::Idx {
                images,
                labels,
                n_classes,
            } => {
                let (i, l) = (paths.data(images), paths.data(labels));
                let mut ds = load_idx(&i, &l).map_err(|e| CliError::at(&i, e))?;
                if let Some(n) = *n_classes {
                    if n < ds.n_classes {
                        return Err(CliError::schema(
                            "dataset.n_classes",
                            format!("{n} is below the largest label + 1 ({})", ds.n_classes),
                        ));
                    }
                    ds.n_classes = n;
                }
                Ok((ds, vec![i, l]))
            }
            DatasetRef::FashionMnist { split } => {
                let root = paths.data_dir.clone().ok_or_else(|| {
                    CliError::Usage("fashion_mnist datasets need --data-dir or AVT_DATA_DIR".into())
                })?;
                let prefix = match split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                let images = format!("{prefix}-images-idx3-ubyte");
                let dir = [root.join("fashion-mnist"), root.join("fashion_mnist"), root.clone()]
                    .into_iter()
                    .find(|d| d.join(&images).is_file())
                    .ok_or_else(|| CliError::Usage(format!("{images} not found under {}", root.display())))?;
                let (i, l) = (dir.join(images), dir.join(format!("{prefix}-labels-idx1-ubyte")));
                let mut ds = load_idx(&i, &l).map_err(|e| CliError::at(&i, e))?;
                ds.n_classes = 10;
                ds.name = format!("fashion-mnist-{prefix}");
                Ok((ds, vec![i, l]))
            }
            DatasetRef::Cifar10 { path } => {
                let p = paths.data(path);
                let ds = load_cifar10(&p).map_err(|e| CliError::at(&p, e))?;
                let files = if p.is_dir() { vec![] } else { vec![p] };
                Ok((ds, files))
            }
            DatasetRef::Blobs(spec) => Ok((synth_blobs(spec).map_err(|e| nest("dataset", e))?, vec![])),
        }
    }
}

impl ArchRef {
    pub fn layers(&self, input_shape: &[usize], n_classes: usize) -> Result<Vec<LayerSpec>, CliError> {
        match self {
            ArchRef::Preset(name) => preset(name, input_shape, n_classes).map_err(|e| nest("architecture", e)),
            ArchRef::Mlp { hidden } => Ok(mlp(input_shape.iter().product(), hidden, n_classes)),
            ArchRef::Layers(layers) => Ok(layers.clone()),
        }
    }
}

impl GroupsRef {
    pub fn path(&self) -> &Path {
        match self {
            GroupsRef::Tree(p) | GroupsRef::Partition(p) => p,
        }
    }

    pub fn load(&self, paths: &Paths) -> Result<(GroupPartition, PathBuf), CliError> {
        let p = paths.local(self.path());
        let text = read(&p)?;
        let partition = match self {
            GroupsRef::Tree(_) => top_level_split(&ClusterTree::from_json(&text).map_err(|e| CliError::at(&p, e))?),
            GroupsRef::Partition(_) => GroupPartition::from_json(&text).map_err(|e| CliError::at(&p, e))?,
        };
        Ok((partition, p))
    }
}

pub fn read(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| CliError::Io(p.to_path_buf(), e))
}

/// Prefixes the schema path of a nested document error.
pub fn nest(prefix: &str, e: avt::Error) -> CliError {
    match e {
        avt::Error::Schema { path, message } => {
            let path = if path.is_empty() || path == "." {
                prefix.to_string()
            } else {
                format!("{prefix}.{path}")
            };
            CliError::Core(avt::Error::Schema { path, message })
        }
        other => CliError::Core(other),
    }
}
