use std::path::{Path, PathBuf};

use paf_core::activations::{ActivationSpec, Family, Grid};
use paf_core::attacks::{AttackSpec, MinRadiusConfig};
use paf_core::data::{self, Dataset};
use paf_core::eval::{ReportConfig, SweepParam};
use paf_core::rng::{self, Stream};
use paf_core::training::TrainConfig;
use paf_core::{Error, Network, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds a sweep repeats each grid point over.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub activation: ActivationConfig,
    pub train: TrainConfig,
    pub attack: AttackSpec,
    pub radius: MinRadiusConfig,
    pub report: ReportSection,
    pub sweep: SweepSection,
    pub shapes: ShapesSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 12345,
            seeds: vec![12345],
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            activation: ActivationConfig::default(),
            train: TrainConfig::default(),
            attack: AttackSpec::pgd_linf(),
            radius: MinRadiusConfig::default(),
            report: ReportSection::default(),
            sweep: SweepSection::default(),
            shapes: ShapesSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub test_noise: Option<f64>,
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    /// Average-pooling factor applied to IDX images.
    pub pool: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            n_train: 400,
            n_test: 200,
            noise: 0.1,
            test_noise: None,
            centers: vec![vec![0.25, 0.5], vec![0.75, 0.5]],
            sigma: 0.05,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            limit_train: None,
            limit_test: None,
            pool: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden: Vec<usize>,
    pub channels: [usize; 2],
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            hidden: vec![32, 32],
            channels: [8, 16],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationConfig {
    pub family: Family,
    /// Defaults to the family's nonparametric shape.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub learn_alpha: bool,
    pub learn_beta: bool,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            family: Family::Relu,
            alpha: None,
            beta: None,
            learn_alpha: true,
            learn_beta: true,
        }
    }
}

impl ActivationConfig {
    pub fn spec(&self) -> Result<ActivationSpec> {
        let (_, a0, b0) = self.family.anchor();
        let n = self.family.param_count();
        ActivationSpec::with_flags(
            self.family,
            self.alpha.unwrap_or(a0),
            self.beta.unwrap_or(b0),
            self.learn_alpha && n >= 1,
            self.learn_beta && n >= 2,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub square_queries: usize,
    pub lipschitz: AttackSpec,
    pub grid: Grid,
    /// Evaluate on at most this many test samples.
    pub limit: Option<usize>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            square_queries: 1000,
            lipschitz: AttackSpec::pgd_linf(),
            grid: Grid::default(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Shape,
    Lambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub fixed_alpha: f64,
    pub fixed_beta: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: SweepKind::Shape,
            param: SweepParam::Alpha,
            values: vec![-0.3, 0.0, 0.3],
            fixed_alpha: 1.0,
            fixed_beta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub grid: Grid,
}

impl Default for ShapesSection {
    fn default() -> Self {
        Self {
            param: SweepParam::Alpha,
            values: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            grid: Grid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> std::result::Result<String, String> {
        toml::to_string(self).map_err(|e| format!("cannot serialize config: {e}"))
    }

    /// Applies command-line overrides and pushes the experiment seed into
    /// every component.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.train.seed = self.seed;
        self.attack.seed = self.seed;
        self.radius.seed = self.seed;
        self.report.lipschitz.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.spec()?;
        self.train.validate()?;
        self.attack.validate()?;
        self.report.lipschitz.validate()?;
        Ok(())
    }

    fn data_seed(&self) -> u64 {
        rng::stream_seed(self.seed, Stream::Data)
    }

    /// Train and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let seed = self.data_seed();
        let (train, test) = match d.kind {
            DatasetKind::TwoMoons => (
                data::two_moons(d.n_train, d.noise, seed)?,
                data::two_moons(d.n_test, d.test_noise.unwrap_or(d.noise), rng::mix(seed, 1))?,
            ),
            DatasetKind::Blobs => (
                data::gaussian_blobs(d.n_train, &d.centers, d.sigma, seed)?,
                data::gaussian_blobs(d.n_test, &d.centers, d.sigma, rng::mix(seed, 1))?,
            ),
            DatasetKind::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone()
                        .ok_or_else(|| Error::InvalidDataset(format!("dataset.{key} is required for idx data")))
                };
                let train = data::load_idx(&need(&d.train_images, "train_images")?, &need(&d.train_labels, "train_labels")?)?;
                let test = data::load_idx(&need(&d.test_images, "test_images")?, &need(&d.test_labels, "test_labels")?)?;
                let (train, test) = if d.pool > 1 {
                    (train.avg_pool(d.pool)?, test.avg_pool(d.pool)?)
                } else {
                    (train, test)
                };
                (train, test)
            }
        };
        let train = match d.limit_train {
            Some(n) => train.take(n),
            None => train,
        };
        let test = match d.limit_test {
            Some(n) => test.take(n),
            None => test,
        };
        Ok((train, test))
    }

    pub fn build_network(&self, act: ActivationSpec, sample_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
        match self.model.arch {
            Arch::Mlp => {
                let inputs: usize = sample_shape.iter().product();
                if sample_shape.len() != 1 {
                    return Err(Error::InvalidNetwork(format!(
                        "mlp needs flat inputs, dataset samples have shape {sample_shape:?}"
                    )));
                }
                let mut dims = vec![inputs];
                dims.extend(&self.model.hidden);
                dims.push(classes);
                Network::mlp(&dims, act, seed)
            }
            Arch::Cnn => {
                let s: [usize; 3] = sample_shape
                    .try_into()
                    .map_err(|_| Error::InvalidNetwork(format!("cnn needs [c, h, w] inputs, got {sample_shape:?}")))?;
                Network::cnn(s, self.model.channels, self.model.kernel, classes, act, seed)
            }
        }
    }

    pub fn report_config(&self) -> ReportConfig {
        let mut r = ReportConfig::with_seed(self.seed);
        r.pgd = self.attack.clone();
        r.ensemble = paf_core::attacks::Ensemble::new(self.attack.epsilon, self.report.square_queries, self.seed);
        r.radius = self.radius;
        r.lipschitz = self.report.lipschitz.clone();
        r.curvature_grid = self.report.grid;
        r
    }
}
