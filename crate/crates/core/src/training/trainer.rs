use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dataset, read_split, SceneConfig, Split, StereoSample};
use crate::disparity::{CameraRig, DisparityLevels};
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, LossWeights};
use crate::network::{Branch, Network, NetworkConfig};
use crate::tensor::io::Archive;
use crate::Scalar;

use super::augment::{augment, AugmentConfig, AugmentParams};
use super::optim::Adam;
use super::schedule::{StageSchedule, Step};
use super::steps::{update, Batch, Objective, StepReport};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "TIO_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Everything a training run needs, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub e1: usize,
    pub e2: usize,
    pub lr: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub revisit_factor: f64,
    pub batch: usize,
    /// Training crop size.
    pub height: usize,
    pub width: usize,
    /// Number of disparity levels `N`.
    pub levels: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub seed: u64,
    /// Directory holding a generated split; when absent, `train_count` scenes are generated
    /// in memory from `scene`.
    pub data_dir: Option<PathBuf>,
    pub train_count: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-epoch mean loss values; defaults to `checkpoint_dir/losses.csv`.
    pub log_csv: Option<PathBuf>,
    pub feature_seed: u64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub network: NetworkConfig,
    pub scene: SceneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            e1: 5,
            e2: 10,
            // ~300x fewer iterations than the full-scale schedule; halvings follow the stage boundaries
            lr: 1e-3,
            lr_halving_epochs: vec![5, 10, 13, 14],
            revisit_factor: 0.1,
            batch: 4,
            height: 64,
            width: 128,
            levels: 17,
            b_min: 1.0,
            b_max: 24.0,
            seed: 0,
            data_dir: None,
            train_count: 200,
            checkpoint_dir: None,
            log_csv: None,
            feature_seed: 0x5eed,
            loss: LossWeights::default(),
            // the crop equals the scene size, so resizing could only enlarge disparities
            augment: AugmentConfig { scale: [1.0, 1.0], ..AugmentConfig::default() },
            adam: AdamConfig::default(),
            network: NetworkConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{SEED_ENV}={v:?}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.loss.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config("crop size must be a positive multiple of 16".into()));
        }
        self.disparity_levels()?;
        Ok(())
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            e1: self.e1,
            e2: self.e2,
            total_epochs: self.epochs,
            lr_base: self.lr,
            lr_halving_epochs: self.lr_halving_epochs.clone(),
            revisit_factor: self.revisit_factor,
        }
    }

    pub fn disparity_levels(&self) -> Result<DisparityLevels> {
        DisparityLevels::exponential(self.b_min, self.b_max, self.levels)
            .map_err(|e| Error::Config(format!("disparity levels: {e}")))
    }

    /// FNV-1a of the serialized config, recorded in checkpoints.
    pub fn hash(&self) -> u64 {
        self.to_toml()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }

    /// The training samples: the split in `data_dir`, or freshly generated scenes.
    pub fn training_data<T: Scalar>(&self) -> Result<Vec<StereoSample<T>>> {
        match &self.data_dir {
            Some(dir) => Ok(read_split(dir)?.into_iter().map(|(_, s)| s).collect()),
            None => dataset(&self.scene, self.train_count, self.seed, Split::Train, (self.b_min, self.b_max))
                .map(|r| r.map(|(_, _, s)| s))
                .collect(),
        }
    }
}

/// CSV sink with rows `epoch,step,loss,value`.
pub struct LossLog {
    writer: csv::Writer<Box<dyn Write>>,
}

impl std::fmt::Debug for LossLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LossLog")
    }
}

impl LossLog {
    pub fn new(sink: Box<dyn Write>, header: bool) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(sink);
        if header {
            writer.write_record(["epoch", "step", "loss", "value"])?;
        }
        Ok(Self { writer })
    }

    /// Appends to `path`, writing the header only when the file is new.
    pub fn append(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Self::new(Box::new(file), fresh)
    }

    pub fn record(&mut self, epoch: usize, step: Step, name: &str, value: f64) -> Result<()> {
        self.writer
            .write_record([epoch.to_string(), step.id().to_string(), name.to_string(), format!("{value:e}")])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Mean of every logged loss over one epoch, keyed by step and loss name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub means: BTreeMap<(Step, &'static str), f64>,
}

impl EpochSummary {
    pub fn get(&self, step: Step, name: &str) -> Option<f64> {
        self.means.iter().find(|((s, n), _)| *s == step && *n == name).map(|(_, v)| *v)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The staged training loop with three optimizers.
#[derive(Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub net: Network<T>,
    objective: Objective<T>,
    optimizers: [Adam<T>; 3],
    data: Vec<StereoSample<T>>,
    epoch: usize,
    final_initialized: bool,
    log: Option<LossLog>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, data: Vec<StereoSample<T>>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let net = Network::new(cfg.network.clone(), cfg.disparity_levels()?, cfg.seed)?;
        let objective = Objective { weights: cfg.loss, features: FeatureExtractor::new(cfg.feature_seed) };
        let adam = || Adam::new(cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps);
        Ok(Self {
            optimizers: [adam(), adam(), adam()],
            cfg,
            net,
            objective,
            data,
            epoch: 0,
            final_initialized: false,
            log: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, data: Vec<StereoSample<T>>, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        let (net, archive) = Network::load(checkpoint)?;
        if net.config() != t.net.config() || net.levels() != t.net.levels() {
            return Err(Error::Config("checkpoint network does not match the config".into()));
        }
        t.net = net;
        for (k, opt) in t.optimizers.iter_mut().enumerate() {
            opt.load_from(&archive, &format!("adam{}", k + 1), t.net.params())?;
        }
        let meta = |k: &str| {
            archive
                .meta_value(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))
        };
        t.epoch = meta("epoch")?
            .parse()
            .map_err(|e| Error::Format(format!("bad epoch: {e}")))?;
        t.final_initialized = meta("final_initialized")? == "true";
        Ok(t)
    }

    /// Routes the per-epoch loss means to a CSV sink.
    pub fn set_log(&mut self, log: LossLog) {
        self.log = Some(log);
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn objective(&self) -> &Objective<T> {
        &self.objective
    }

    pub fn optimizer(&self, step: Step) -> &Adam<T> {
        &self.optimizers[step.index()]
    }

    /// Branch used for monocular inference: the distilled one once it has been trained.
    pub fn mono_branch(&self) -> Branch {
        if self.final_initialized && self.optimizers[Step::Distill.index()].steps() > 0 {
            Branch::Final
        } else {
            Branch::Auxiliary
        }
    }

    /// Runs the active steps, in order, on one batch at the given epoch.
    pub fn iteration(&mut self, epoch: usize, batch: &Batch<T>) -> Result<Vec<StepReport>> {
        let schedule = self.cfg.schedule();
        let steps = schedule.active_steps(epoch);
        if steps.contains(&Step::Distill) && !self.final_initialized {
            self.net.copy_auxiliary_to_final();
            self.final_initialized = true;
        }
        let mut reports = Vec::with_capacity(steps.len());
        for step in steps {
            let lr = |role| schedule.role_learning_rate(epoch, step, role);
            let r = update(step, &mut self.net, &mut self.optimizers[step.index()], batch, &self.objective, &lr)?;
            if !r.total().is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            reports.push(r);
        }
        Ok(reports)
    }

    /// Shuffled, augmented batches of one epoch; depends only on the seed and the epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Batch<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let crop = (self.cfg.height, self.cfg.width);
        order
            .chunks(self.cfg.batch)
            .map(|idx| {
                let samples = idx
                    .iter()
                    .map(|&i| {
                        let s = &self.data[i];
                        let (_, _, h, w) = s.left.dims4()?;
                        let p = AugmentParams::sample(&mut rng, &self.cfg.augment, (h, w), crop)?;
                        augment(s, &p, crop)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Batch::from_samples(&samples)
            })
            .collect()
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let mut sums: BTreeMap<(Step, &'static str), (f64, usize)> = BTreeMap::new();
        for batch in self.epoch_batches(epoch)? {
            for r in self.iteration(epoch, &batch)? {
                for &(name, v) in &r.terms {
                    let e = sums.entry((r.step, name)).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        let summary = EpochSummary {
            epoch,
            means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        };
        if let Some(log) = &mut self.log {
            for (&(step, name), &v) in &summary.means {
                log.record(epoch, step, name, v)?;
            }
            log.flush()?;
        }
        self.epoch += 1;
        Ok(summary)
    }

    /// Network, optimizer states and progress in one archive.
    pub fn checkpoint(&self) -> Archive<T> {
        let branch = match self.mono_branch() {
            Branch::Auxiliary => "auxiliary",
            Branch::Final => "final",
        };
        let meta = format!(
            "epoch={}\nconfig_hash={:016x}\nmono_branch={branch}\nfinal_initialized={}\nbaseline={:?}\nfocal_x={:?}\n",
            self.epoch,
            self.cfg.hash(),
            self.final_initialized,
            self.cfg.scene.baseline,
            self.cfg.scene.focal_x
        );
        let mut a = self.net.to_archive(&meta);
        for (k, opt) in self.optimizers.iter().enumerate() {
            opt.save_into(&mut a, &format!("adam{}", k + 1), self.net.params());
        }
        a
    }

    /// Runs the remaining epochs, writing `epoch_XXX.tioc` and `latest.tioc` after each one
    /// when a checkpoint directory is configured.
    pub fn train(&mut self, mut progress: impl FnMut(&EpochSummary)) -> Result<()> {
        let dir = self.cfg.checkpoint_dir.clone();
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        if self.log.is_none() {
            if let Some(path) = self.cfg.log_csv.clone().or_else(|| dir.as_ref().map(|d| d.join("losses.csv"))) {
                self.log = Some(LossLog::append(&path)?);
            }
        }
        while self.epoch < self.cfg.epochs {
            let summary = self.run_epoch()?;
            progress(&summary);
            if let Some(d) = &dir {
                let a = self.checkpoint();
                a.save(d.join(format!("epoch_{:03}.tioc", summary.epoch)))?;
                a.save(d.join("latest.tioc"))?;
            }
        }
        Ok(())
    }
}

/// Camera rig recorded in a checkpoint's metadata, if any.
pub fn checkpoint_rig<T: Scalar>(a: &Archive<T>) -> Option<CameraRig> {
    let num = |k: &str| a.meta_value(k)?.parse::<f64>().ok();
    CameraRig::new(num("baseline")?, num("focal_x")?).ok()
}

/// Monocular branch recorded in a checkpoint's metadata (auxiliary when absent).
pub fn checkpoint_mono_branch<T: Scalar>(a: &Archive<T>) -> Branch {
    match a.meta_value("mono_branch") {
        Some("final") => Branch::Final,
        _ => Branch::Auxiliary,
    }
}
