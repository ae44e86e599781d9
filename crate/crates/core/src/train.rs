//! Training loop, inference, data manifests and the synthetic toy task.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{augment_pair, derive_seed, AugmentError, DeformParams, NoiseParams};
use crate::config::{ConfigError, ConfigMap};
use crate::halfprec::{LossScaler, MasterWeights, PrecisionLevel, PrecisionPolicy, ScaleDecision};
use crate::losses::{loss, LossConfig, LossError, LossKind};
use crate::metrics::{evaluate, MetricsError};
use crate::network::{save_checkpoint, Network, NetworkConfig, NetworkError, NETWORK_KEYS};
use crate::optim::{OptimError, RAdam, RAdamConfig};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::volio::{load_intensity, load_labels, one_hot, zscore_normalize, LabelVolume, Volume, VolioError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("loading {path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: VolioError,
    },
    #[error(transparent)]
    Volume(#[from] VolioError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged: {0}")]
    Diverged(DivergenceReport),
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// Step at which divergence was declared.
    pub step: usize,
    /// First step of the final run of non-finite steps.
    pub first_bad_step: usize,
    pub last_finite_loss: Option<f32>,
    pub scale: f32,
    pub precision: PrecisionLevel,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision {} loss or gradients non-finite from step {} through step {} (last finite loss {}, scale {})",
            self.precision,
            self.first_bad_step,
            self.step,
            self.last_finite_loss.map_or("none".to_string(), |l| l.to_string()),
            self.scale
        )
    }
}

/// One volume and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Paths of one manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Whitespace-separated `image labels` pairs, one per line; `#` comments.
/// Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>, TrainError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [image, labels] = parts[..] else {
            return Err(TrainError::Config(format!(
                "manifest line {}: expected `image labels`, got `{raw}`",
                i + 1
            )));
        };
        out.push(ManifestEntry {
            image: base.join(image),
            labels: base.join(labels),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path, base: &Path) -> Result<Vec<ManifestEntry>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, base)
}

pub fn load_sample(entry: &ManifestEntry, num_classes: usize) -> Result<Sample, TrainError> {
    let image = load_intensity(&entry.image).map_err(|source| TrainError::Data {
        path: entry.image.clone(),
        source,
    })?;
    let labels = load_labels(&entry.labels)
        .and_then(|l| l.with_num_classes(num_classes))
        .map_err(|source| TrainError::Data {
            path: entry.labels.clone(),
            source,
        })?;
    if image.dims() != labels.dims() {
        return Err(TrainError::Config(format!(
            "{}: image dims {:?} differ from label dims {:?}",
            entry.image.display(),
            image.dims(),
            labels.dims()
        )));
    }
    Ok(Sample { image, labels })
}

/// Shuffle indices `0..n` with `seed` and deal them into `folds` subsets of
/// near-equal size.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF01D)));
    let mut out = vec![Vec::new(); folds.max(1)];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % folds.max(1)].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub steps: usize,
    pub precision: PrecisionLevel,
    pub loss: LossConfig,
    pub optimizer: RAdamConfig,
    /// `None` disables elastic deformation.
    pub deform: Option<DeformParams>,
    /// `None` disables noise.
    pub noise: Option<NoiseParams>,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
    pub initial_scale: f32,
    /// Consecutive steps with a non-finite loss or gradients that count as
    /// divergence.
    pub divergence_window: usize,
    /// Write measured wall-clock into the log; `false` writes 0.
    pub log_wallclock: bool,
    /// Stop when validation DSC has not improved for this many checks.
    pub patience: Option<usize>,
    /// Steps between validation checks when `patience` is set.
    pub validate_every: usize,
    pub data_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub folds: usize,
    /// Held-out fold; `None` trains on every manifest entry.
    pub fold: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            steps: 30_000,
            precision: PrecisionLevel::MixedSafe,
            loss: LossConfig::default(),
            optimizer: RAdamConfig::default(),
            deform: Some(DeformParams::default()),
            noise: Some(NoiseParams::default()),
            seed: 0,
            checkpoint_every: 1000,
            initial_scale: 65536.0,
            divergence_window: 100,
            log_wallclock: true,
            patience: None,
            validate_every: 1000,
            data_dir: None,
            manifest: None,
            folds: 4,
            fold: None,
            out_dir: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "precision",
    "loss",
    "dice_epsilon",
    "log_floor",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "checkpoint_every",
    "initial_scale",
    "divergence_window",
    "log_wallclock",
    "patience",
    "validate_every",
    "data_dir",
    "manifest",
    "folds",
    "fold",
    "out_dir",
    "elastic.enabled",
    "elastic.sigma_low",
    "elastic.sigma_high",
    "elastic.sigma_units",
    "elastic.alpha",
    "elastic.truncate",
    "elastic.out_of_bounds",
    "noise.enabled",
    "noise.sigma_low",
    "noise.sigma_high",
];

fn parse_with<T>(m: &ConfigMap, key: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<Option<T>, TrainError> {
    match m.get_str(key) {
        None => Ok(None),
        Some(v) => f(v).map(Some).map_err(|e| TrainError::Config(format!("key `{key}`: {e}"))),
    }
}

impl TrainConfig {
    /// Build from a flat config, defaulting missing keys. Unknown keys are
    /// rejected.
    pub fn from_config_map(m: &ConfigMap) -> Result<Self, TrainError> {
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(NETWORK_KEYS).copied().collect();
        m.check_known(&known)?;
        let d = TrainConfig::default();
        let mut loss_cfg = LossConfig {
            kind: parse_with(m, "loss", |s| s.parse::<LossKind>().map_err(|e| e.to_string()))?.unwrap_or(d.loss.kind),
            ..d.loss
        };
        loss_cfg.dice_epsilon = m.get_or("dice_epsilon", loss_cfg.dice_epsilon)?;
        loss_cfg.log_floor = m.get_or("log_floor", loss_cfg.log_floor)?;
        loss_cfg.validate()?;

        let dd = DeformParams::default();
        let deform = if m.get_or("elastic.enabled", true)? {
            let p = DeformParams {
                sigma_low: m.get_or("elastic.sigma_low", dd.sigma_low)?,
                sigma_high: m.get_or("elastic.sigma_high", dd.sigma_high)?,
                sigma_units: parse_with(m, "elastic.sigma_units", |s| s.parse().map_err(|e: AugmentError| e.to_string()))?
                    .unwrap_or(dd.sigma_units),
                alpha: m.get_or("elastic.alpha", dd.alpha)?,
                truncate: m.get_or("elastic.truncate", dd.truncate)?,
                out_of_bounds: parse_with(m, "elastic.out_of_bounds", |s| s.parse().map_err(|e: AugmentError| e.to_string()))?
                    .unwrap_or(dd.out_of_bounds),
            };
            p.validate()?;
            Some(p)
        } else {
            None
        };
        let nd = NoiseParams::default();
        let noise = if m.get_or("noise.enabled", true)? {
            let p = NoiseParams {
                sigma_low: m.get_or("noise.sigma_low", nd.sigma_low)?,
                sigma_high: m.get_or("noise.sigma_high", nd.sigma_high)?,
            };
            p.validate()?;
            Some(p)
        } else {
            None
        };

        let cfg = TrainConfig {
            network: NetworkConfig::from_config_map(m)?,
            steps: m.get_or("steps", d.steps)?,
            precision: parse_with(m, "precision", |s| s.parse::<PrecisionLevel>().map_err(|e| e.to_string()))?
                .unwrap_or(d.precision),
            loss: loss_cfg,
            optimizer: RAdamConfig {
                lr: m.get_or("lr", d.optimizer.lr)?,
                beta1: m.get_or("beta1", d.optimizer.beta1)?,
                beta2: m.get_or("beta2", d.optimizer.beta2)?,
                eps: m.get_or("eps", d.optimizer.eps)?,
            },
            deform,
            noise,
            seed: m.get_or("seed", d.seed)?,
            checkpoint_every: m.get_or("checkpoint_every", d.checkpoint_every)?,
            initial_scale: m.get_or("initial_scale", d.initial_scale)?,
            divergence_window: m.get_or("divergence_window", d.divergence_window)?,
            log_wallclock: m.get_or("log_wallclock", d.log_wallclock)?,
            patience: m.get("patience")?,
            validate_every: m.get_or("validate_every", d.validate_every)?,
            data_dir: m.get::<PathBuf>("data_dir")?,
            manifest: m.get::<PathBuf>("manifest")?,
            folds: m.get_or("folds", d.folds)?,
            fold: m.get("fold")?,
            out_dir: m.get::<PathBuf>("out_dir")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if LossScaler::new(self.initial_scale).is_none() {
            return bad(format!("initial_scale {} must be a power of two >= 1", self.initial_scale));
        }
        if self.divergence_window == 0 {
            return bad("divergence_window must be >= 1".into());
        }
        if self.folds == 0 {
            return bad("folds must be >= 1".into());
        }
        if let Some(k) = self.fold {
            if k >= self.folds {
                return bad(format!("fold {k} outside 0..{}", self.folds));
            }
        }
        if self.patience.is_some() && self.validate_every == 0 {
            return bad("validate_every must be >= 1 when patience is set".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("lr {} must be > 0", self.optimizer.lr));
        }
        self.loss.validate()?;
        self.network.validate()?;
        Ok(())
    }
}

/// One log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f32,
    pub scale: f32,
    pub skipped: bool,
    pub wallclock_ms: u64,
}

impl fmt::Display for LogRecord {
    /// `step loss scale skipped wallclock_ms`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:e} {} {} {}",
            self.step, self.loss, self.scale, self.skipped, self.wallclock_ms
        )
    }
}

impl LogRecord {
    pub fn parse(line: &str) -> Option<LogRecord> {
        let mut it = line.split_whitespace();
        let rec = LogRecord {
            step: it.next()?.parse().ok()?,
            loss: it.next()?.parse().ok()?,
            scale: it.next()?.parse().ok()?,
            skipped: it.next()?.parse().ok()?,
            wallclock_ms: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<LogRecord>,
    pub steps_run: usize,
    pub skipped_steps: usize,
    pub stopped_early: bool,
    pub best_validation_dsc: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Mean loss over the last `window` logged steps with finite loss.
    pub fn tail_loss(&self, window: usize) -> f32 {
        let tail: Vec<f32> = self
            .log
            .iter()
            .rev()
            .take(window)
            .map(|r| r.loss)
            .filter(|l| l.is_finite())
            .collect();
        if tail.is_empty() {
            f32::NAN
        } else {
            (tail.iter().map(|&l| l as f64).sum::<f64>() / tail.len() as f64) as f32
        }
    }
}

/// Z-scored image as a `(1, 1, D, H, W)` tensor plus one-hot target.
pub fn prepare(sample: &Sample, num_classes: usize) -> Result<(Tensor, Tensor), TrainError> {
    let labels = if sample.labels.num_classes() == num_classes {
        sample.labels.clone()
    } else {
        sample.labels.with_num_classes(num_classes)?
    };
    Ok((zscore_normalize(&sample.image)?.to_tensor(), one_hot(&labels)))
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<(), TrainError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in log {
        writeln!(f, "{r}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Per-step augmentation, forward, loss, scaled backward, scaler decision and
/// optimizer step on in-memory samples.
///
/// Checkpoints and `train.log` go to `cfg.out_dir` when set. A run of
/// `divergence_window` consecutive steps whose loss or gradients are
/// non-finite ends training with
/// [`TrainError::Diverged`] after the log has been written.
pub fn train_on(cfg: &TrainConfig, samples: &[Sample], validation: &[Sample]) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let probe = Network::build(&cfg.network, 0)?;
    for s in samples.iter().chain(validation) {
        probe.branch_dims(tensor_dims(&s.image))?;
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let policy = PrecisionPolicy::new(cfg.precision);
    let mut net = Network::build(&cfg.network, cfg.seed)?;
    let mut weights = MasterWeights::new(net.param_tensors(), policy);
    let sizes: Vec<usize> = weights.master().iter().map(Tensor::numel).collect();
    let mut opt = RAdam::<f32>::new(cfg.optimizer, &sizes).with_half_state(policy.half_storage());
    let mut scaler = LossScaler::new(cfg.initial_scale).expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut skipped_steps = 0;
    let mut bad_run = 0usize;
    let mut last_finite = None;
    let mut best_val: Option<f64> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let started = Instant::now();

    let finish = |log: &[LogRecord]| -> Result<(), TrainError> {
        if let Some(dir) = &cfg.out_dir {
            write_log(&dir.join("train.log"), log)?;
        }
        Ok(())
    };

    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        steps_run = step;
        let idx = rng.random_range(0..samples.len());
        let s = &samples[idx];
        let (image, labels) = augment_pair(
            &s.image,
            &s.labels,
            cfg.deform.as_ref(),
            cfg.noise.as_ref(),
            derive_seed(cfg.seed, step as u64),
        )?;
        let (x, y) = prepare(&Sample { image, labels }, cfg.network.num_classes)?;

        let tape = Tape::new(policy);
        let params = net.bind_values(&tape, weights.forward_values(), true);
        let x = tape.constant(x);
        let p = net.forward_on(&tape, &params, &x)?;
        let l = loss(&tape, &p, &y, &cfg.loss)?;
        let loss_value = l.value().data()[0];
        let scaled = tape.scale(&l, scaler.scale());
        tape.backward(&scaled)?;
        let mut grads: Vec<Vec<f32>> = params.iter().map(|v| tape.grad_or_zeros(v).into_data()).collect();
        drop(tape);
        let finite = scaler.unscale_grads(grads.iter_mut().map(Vec::as_mut_slice)) && loss_value.is_finite();
        let scale_used = scaler.scale();
        let skipped = match scaler.step(finite) {
            ScaleDecision::Apply => {
                let mut slices: Vec<&mut [f32]> = weights.master_mut().iter_mut().map(Tensor::data_mut).collect();
                opt.step(&mut slices, &grads)?;
                weights.refresh_working();
                false
            }
            ScaleDecision::Skip => {
                skipped_steps += 1;
                true
            }
        };
        log.push(LogRecord {
            step,
            loss: loss_value,
            scale: scale_used,
            skipped,
            wallclock_ms: if cfg.log_wallclock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });

        if loss_value.is_finite() {
            last_finite = Some(loss_value);
        }
        if finite {
            bad_run = 0;
        } else {
            bad_run += 1;
            if bad_run >= cfg.divergence_window {
                finish(&log)?;
                return Err(TrainError::Diverged(DivergenceReport {
                    step,
                    first_bad_step: step + 1 - bad_run,
                    last_finite_loss: last_finite,
                    scale: scaler.scale(),
                    precision: cfg.precision,
                }));
            }
        }

        let is_last = step == cfg.steps;
        if let Some(dir) = &cfg.out_dir {
            if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || is_last {
                net.set_param_tensors(weights.master().to_vec())?;
                let path = dir.join(format!("ckpt_{step:06}.vxck"));
                save_checkpoint(&net, &path)?;
                checkpoints.push(path);
            }
        }

        if let (Some(patience), false) = (cfg.patience, validation.is_empty()) {
            if step % cfg.validate_every == 0 {
                net.set_param_tensors(weights.master().to_vec())?;
                let dsc = validation_dsc(&net, validation)?;
                if best_val.is_none_or(|b| dsc > b) {
                    best_val = Some(dsc);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    net.set_param_tensors(weights.into_master())?;
    if let Some(dir) = &cfg.out_dir {
        let path = dir.join("final.vxck");
        save_checkpoint(&net, &path)?;
        checkpoints.push(path);
    }
    finish(&log)?;
    Ok(TrainOutcome {
        network: net,
        log,
        steps_run,
        skipped_steps,
        stopped_early,
        best_validation_dsc: best_val,
        checkpoints,
    })
}

fn validation_dsc(net: &Network, samples: &[Sample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let (pred, _) = infer(net, &s.image)?;
        total += evaluate(&s.labels, &pred, net.config().num_classes)?.mean_dsc;
    }
    Ok(total / samples.len() as f64)
}

/// Load the manifest, split folds, and train on all folds but `cfg.fold`.
/// With patience set, the fold after the held-out one is used for
/// validation and removed from training.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let base = cfg.data_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let manifest = cfg.manifest.clone().unwrap_or_else(|| base.join("manifest.txt"));
    let entries = load_manifest(&manifest, &base)?;
    if entries.is_empty() {
        return Err(TrainError::Config(format!("{}: manifest is empty", manifest.display())));
    }
    let (train_idx, val_idx) = split_for_training(entries.len(), cfg)?;
    let load = |idx: &[usize]| -> Result<Vec<Sample>, TrainError> {
        idx.iter().map(|&i| load_sample(&entries[i], cfg.network.num_classes)).collect()
    };
    train_on(cfg, &load(&train_idx)?, &load(&val_idx)?)
}

/// Training and validation indices for a manifest of `n` entries.
pub fn split_for_training(n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let Some(test) = cfg.fold else {
        return Ok(((0..n).collect(), Vec::new()));
    };
    let folds = fold_assignment(n, cfg.folds, cfg.seed);
    let val = if cfg.patience.is_some() && cfg.folds > 2 {
        Some((test + 1) % cfg.folds)
    } else {
        None
    };
    let train: Vec<usize> = (0..cfg.folds)
        .filter(|&k| k != test && Some(k) != val)
        .flat_map(|k| folds[k].iter().copied())
        .collect();
    if train.is_empty() {
        return Err(TrainError::Config(format!(
            "no training volumes left for fold {test} of {} over {n} entries",
            cfg.folds
        )));
    }
    let mut train = train;
    train.sort_unstable();
    Ok((train, val.map(|k| folds[k].clone()).unwrap_or_default()))
}

/// Spatial dims of a volume in tensor order `(D, H, W)`.
pub fn tensor_dims(v: &Volume) -> [usize; 3] {
    let [h, w, d] = v.dims();
    [d, h, w]
}

/// Z-score, forward, argmax. Returns the labels and the forward time.
pub fn infer(net: &Network, image: &Volume) -> Result<(LabelVolume, Duration), TrainError> {
    net.branch_dims(tensor_dims(image))?;
    let x = zscore_normalize(image)?.to_tensor();
    let t0 = Instant::now();
    let probs = net.forward(&x)?;
    let elapsed = t0.elapsed();
    Ok((LabelVolume::from_argmax(&probs, image.spacing())?, elapsed))
}

/// Concentric-box phantom: four classes nested around the centre, with
/// intensity equal to the label.
pub fn toy_sample(extent: usize) -> Sample {
    let c = (extent as f32 - 1.0) / 2.0;
    let r = extent as f32 / 2.0;
    let label = |h: usize, w: usize, d: usize| -> u32 {
        let cheb = [h, w, d].iter().map(|&i| (i as f32 - c).abs()).fold(0.0f32, f32::max);
        if cheb < 0.3 * r {
            3
        } else if cheb < 0.55 * r {
            2
        } else if cheb < 0.8 * r {
            1
        } else {
            0
        }
    };
    let dims = [extent; 3];
    let labels = LabelVolume::from_fn(dims, [1.0; 3], 4, label).expect("valid toy labels");
    let image = Volume::from_fn(dims, [1.0; 3], |h, w, d| label(h, w, d) as f32).expect("valid toy image");
    Sample { image, labels }
}

/// Training config for the toy task: tiny network, 4 classes, no
/// augmentation, no intermediate checkpoints.
pub fn toy_config(precision: PrecisionLevel, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig::tiny([4, 8, 16], 4),
        steps,
        precision,
        deform: None,
        noise: None,
        seed,
        checkpoint_every: 0,
        log_wallclock: false,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_round_trip() {
        let r = LogRecord {
            step: 12,
            loss: 0.375,
            scale: 65536.0,
            skipped: true,
            wallclock_ms: 40,
        };
        assert_eq!(r.to_string(), "12 3.75e-1 65536 true 40");
        assert_eq!(LogRecord::parse(&r.to_string()), Some(r));
    }

    #[test]
    fn folds_partition() {
        let f = fold_assignment(10, 4, 3);
        let mut all: Vec<usize> = f.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(f.iter().all(|k| k.len() == 2 || k.len() == 3));
    }

    #[test]
    fn config_from_map() {
        let m = ConfigMap::parse("steps = 5\nprecision = o2\nloss = dice\nelastic.enabled = false\nbranch_channels = 2,4,8").unwrap();
        let c = TrainConfig::from_config_map(&m).unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.precision, PrecisionLevel::MixedCast);
        assert_eq!(c.loss.kind, LossKind::Dice);
        assert!(c.deform.is_none());
        assert_eq!(c.network.branch_channels, vec![2, 4, 8]);
        assert!(TrainConfig::from_config_map(&ConfigMap::parse("bogus = 1").unwrap()).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# c\na.vvol a_lab.vvol\n\nb.vvol b_lab.vvol\n", Path::new("/d")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].labels, PathBuf::from("/d/b_lab.vvol"));
        assert!(parse_manifest("only_one", Path::new(".")).is_err());
    }

    #[test]
    fn toy_has_all_classes() {
        let s = toy_sample(24);
        for c in 0..4 {
            assert!(s.labels.data().contains(&c));
        }
    }
}
