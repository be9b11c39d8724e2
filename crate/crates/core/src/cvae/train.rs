use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{noise, Cvae, CvaeConfig, CvaeError};
use crate::datasets::CropSet;
use crate::nn::{accumulate, AdamW, AdamWConfig, Schedule, ScheduleConfig};
use crate::parallel;
use crate::rng::derive_seed;

/// Samples per gradient work unit. Fixed so that the summation order, and
/// hence the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

const SHUFFLE_TAG: u64 = 1;
const TRAIN_NOISE_TAG: u64 = 2;
const VAL_NOISE_TAG: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeTrainConfig {
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            schedule: ScheduleConfig::cvae(),
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Per-sample mean losses for one epoch. Training losses use the epoch's
/// sampling noise; validation uses fixed per-sample noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub val_recon: f64,
    pub val_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_recon,train_kl,val_recon,val_kl\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch, e.lr, e.train_recon, e.train_kl, e.val_recon, e.val_kl
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

fn check_split(set: &CropSet, name: &str, k: usize) -> Result<(), CvaeError> {
    if set.is_empty() {
        return Err(CvaeError::Data(format!("{name} split is empty")));
    }
    if !set.has_clean() {
        return Err(CvaeError::Data(format!("{name} split has no clean targets")));
    }
    if let Some(l) = set.labels.iter().find(|l| l.num_classes() != k) {
        return Err(CvaeError::Data(format!(
            "{name} labels have {} classes, model expects {k}",
            l.num_classes()
        )));
    }
    Ok(())
}

/// Mean per-sample `(recon, kl)` on `set` with fixed noise.
pub(crate) fn evaluate(model: &Cvae<f32>, set: &CropSet, seed: u64) -> Result<(f64, f64), CvaeError> {
    let n = model.config.latent_dim;
    let alpha = model.config.alpha;
    let losses = parallel::map_range(set.len(), |i| {
        let eps = noise(n, derive_seed(seed, &[VAL_NOISE_TAG, i as u64]));
        let target = set.clean(i).expect("checked");
        model.sample_loss(&set.image(i), &target, &set.labels[i], &eps, alpha)
    });
    let (mut recon, mut kl) = (0.0, 0.0);
    for l in losses {
        let l = l?;
        recon += l.recon;
        kl += l.kl;
    }
    Ok((recon / set.len() as f64, kl / set.len() as f64))
}

/// Trains with AdamW and the plateau schedule, keeping the weights with the
/// best validation loss.
pub fn train_cvae(
    train: &CropSet,
    val: &CropSet,
    config: &CvaeConfig,
    train_config: &CvaeTrainConfig,
) -> Result<(Cvae<f32>, TrainingLog), CvaeError> {
    config.validate()?;
    check_split(train, "train", config.num_classes)?;
    check_split(val, "val", config.num_classes)?;
    if train_config.batch_size == 0 {
        return Err(CvaeError::Config("batch_size must be positive".into()));
    }
    let seed = config.seed;
    let mut model = Cvae::<f32>::new(config.clone())?;
    let n_params = model.num_params();
    let mut opt = AdamW::new(train_config.optimizer, n_params);
    let mut schedule = Schedule::new(train_config.schedule);
    let mut best = model.params.clone();
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=train_config.schedule.max_epochs {
        let lr = schedule.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_TAG, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut recon, mut kl) = (0.0, 0.0);
        for batch in order.chunks(train_config.batch_size) {
            let model_ref = &model;
            let parts = parallel::map_chunks(batch, GRAD_CHUNK, |idx| {
                let mut g = vec![0f32; n_params];
                let (mut r, mut k) = (0.0, 0.0);
                for &i in idx {
                    let eps = noise(
                        config.latent_dim,
                        derive_seed(seed, &[TRAIN_NOISE_TAG, epoch as u64, i as u64]),
                    );
                    let target = train.clean(i).expect("checked");
                    let l = model_ref.accumulate_gradient(
                        &train.image(i),
                        &target,
                        &train.labels[i],
                        &eps,
                        config.alpha,
                        &mut g,
                    )?;
                    r += l.recon;
                    k += l.kl;
                }
                Ok::<_, CvaeError>((g, r, k))
            });
            let mut grads = vec![0f32; n_params];
            for part in parts {
                let (g, r, k) = part?;
                accumulate(&mut grads, &g);
                recon += r;
                kl += k;
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(CvaeError::NonFinite(epoch));
            }
            opt.step(&mut model.params, &grads, lr);
        }
        let (val_recon, val_kl) = evaluate(&model, val, seed)?;
        let val_total = val_recon + config.alpha * val_kl;
        if !val_total.is_finite() {
            return Err(CvaeError::NonFinite(epoch));
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_recon: recon / train.len() as f64,
            train_kl: kl / train.len() as f64,
            val_recon,
            val_kl,
        };
        log::info!(
            "cvae epoch {epoch}: lr {lr:.2e} train {:.3}/{:.3} val {:.3}/{:.3}",
            entry.train_recon,
            entry.train_kl,
            val_recon,
            val_kl
        );
        log.epochs.push(entry);
        let outcome = schedule.observe(val_total);
        if outcome.improved {
            best.clone_from(&model.params);
            log.best_epoch = epoch;
        }
        if outcome.stop {
            break;
        }
    }
    model.params = best;
    Ok((model, log))
}
