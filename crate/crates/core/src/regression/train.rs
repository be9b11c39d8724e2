use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{head_target, HeadBundle, HeadInput, HeadKind, Mlp, MlpConfig, RegressionError};
use crate::geometry::Pose;
use crate::nn::{AdamW, AdamWConfig, Schedule, ScheduleConfig};
use crate::parallel;
use crate::rng::derive_seed;

/// A head input with its ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample {
    pub input: HeadInput,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub use_labels: bool,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::heads(),
            optimizer: AdamWConfig::default(),
            use_labels: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLog {
    pub head: HeadKind,
    pub epochs: Vec<HeadEpoch>,
    pub best_epoch: usize,
}

impl HeadLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.train, e.val).expect("string write");
        }
        s
    }
}

/// Stacked design matrices for one head.
struct Batch {
    features: Vec<f64>,
    labels: Vec<f64>,
    targets: Vec<f64>,
    rows: usize,
}

impl Batch {
    fn new(samples: &[HeadSample], config: &MlpConfig, tz_scale: f64) -> Self {
        let mut b = Batch {
            features: Vec::new(),
            labels: Vec::new(),
            targets: Vec::new(),
            rows: samples.len(),
        };
        for s in samples {
            b.features.extend(s.input.features(config.head));
            if config.use_labels {
                b.labels.extend(s.input.label.one_hot::<f64>());
            }
            b.targets
                .extend(head_target(config.head, &s.pose, &s.input.intrinsics, tz_scale));
        }
        b
    }
}

fn check(samples: &[HeadSample], name: &str, n: usize, k: usize) -> Result<(), RegressionError> {
    if samples.is_empty() {
        return Err(RegressionError::Data(format!("{name} split is empty")));
    }
    for s in samples {
        if s.input.mu.len() != n {
            return Err(RegressionError::ShapeMismatch(format!(
                "{name} latent of {} entries, expected {n}",
                s.input.mu.len()
            )));
        }
        if s.input.label.num_classes() != k {
            return Err(RegressionError::Data(format!(
                "{name} label has {} classes, expected {k}",
                s.input.label.num_classes()
            )));
        }
    }
    Ok(())
}

fn train_one(
    config: MlpConfig,
    train: &Batch,
    val: &Batch,
    tc: &HeadTrainConfig,
) -> Result<(Mlp, HeadLog), RegressionError> {
    let mut mlp = Mlp::new(config, derive_seed(tc.seed, &[config.head.tag()]));
    let mut opt = AdamW::new(tc.optimizer, mlp.num_params());
    let mut schedule = Schedule::new(tc.schedule);
    let mut best = mlp.params.clone();
    let mut log = HeadLog {
        head: config.head,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    for epoch in 1..=tc.schedule.max_epochs {
        let lr = schedule.lr();
        let (train_loss, grads) = mlp.loss_and_gradient_at(
            &mlp.params,
            &train.features,
            &train.labels,
            &train.targets,
            train.rows,
        )?;
        if !train_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(RegressionError::NonFinite(config.head.name()));
        }
        opt.step(&mut mlp.params, &grads, lr);
        let val_loss = mlp.loss(&val.features, &val.labels, &val.targets, val.rows)?;
        if !val_loss.is_finite() {
            return Err(RegressionError::NonFinite(config.head.name()));
        }
        log.epochs.push(HeadEpoch {
            epoch,
            lr,
            train: train_loss,
            val: val_loss,
        });
        let outcome = schedule.observe(val_loss);
        if outcome.improved {
            best.clone_from(&mlp.params);
            log.best_epoch = epoch;
        }
        if outcome.stop {
            break;
        }
    }
    log::info!(
        "{} head: {} epochs, best {} (val {:.5})",
        config.head.name(),
        log.epochs.len(),
        log.best_epoch,
        schedule.best()
    );
    mlp.params = best;
    Ok((mlp, log))
}

/// Trains the rotation, centre and distance heads independently on frozen
/// encoder means with full-batch AdamW.
pub fn train_heads(
    train: &[HeadSample],
    val: &[HeadSample],
    num_classes: usize,
    config: &HeadTrainConfig,
    cvae_hash: &str,
) -> Result<(HeadBundle, Vec<HeadLog>), RegressionError> {
    let n = train.first().map(|s| s.input.mu.len()).unwrap_or(0);
    check(train, "train", n, num_classes)?;
    check(val, "val", n, num_classes)?;
    let tz_scale = train.iter().map(|s| s.pose.translation.z()).sum::<f64>() / train.len() as f64;
    let mlp_config = |head| MlpConfig {
        head,
        latent_dim: n,
        num_classes,
        use_labels: config.use_labels,
    };
    let run = |head| {
        let c = mlp_config(head);
        train_one(c, &Batch::new(train, &c, tz_scale), &Batch::new(val, &c, tz_scale), config)
    };
    let (rot, (centre, dist)) = parallel::join(
        || run(HeadKind::Rotation),
        || parallel::join(|| run(HeadKind::Centre), || run(HeadKind::Distance)),
    );
    let (rot, rot_log) = rot?;
    let (centre, centre_log) = centre?;
    let (dist, dist_log) = dist?;
    Ok((
        HeadBundle::new(rot, centre, dist, tz_scale, cvae_hash.to_string()),
        vec![rot_log, centre_log, dist_log],
    ))
}
