//! Stage functions shared by the command line, ablations and tests.

use std::collections::HashMap;

use thiserror::Error;

use crate::baseline_lut::{build_codebook, Codebook, LutError};
use crate::config::{ConfigError, LabelVariant, RunConfig};
use crate::cvae::{train_cvae, Cvae, CvaeConfig, CvaeError, TrainingLog};
use crate::datasets::{
    filter_by_visibility, CropOptions, CropSet, DatasetError, DatasetManifest, ObjectModel, Record,
    SceneSource, Split,
};
use crate::eval::{aggregate_report, EvalError, EvalRecord, Report, ResultRow};
use crate::regression::{
    encode_crops, train_heads, Estimator, HeadBundle, HeadLog, HeadSample, RegressionError,
};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Whether the failure is numerical (divergence) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PipelineError::Cvae(CvaeError::NonFinite(_))
                | PipelineError::Regression(RegressionError::NonFinite(_))
                | PipelineError::Regression(RegressionError::Cvae(CvaeError::NonFinite(_)))
        )
    }
}

const CROP_SEED_TAG: u64 = 21;

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Records of `split` that pass the visibility filter.
pub fn split_records(manifest: &DatasetManifest, split: Split, config: &RunConfig) -> Vec<Record> {
    filter_by_visibility(&manifest.split(split), config.crops.visibility_threshold)
}

/// Jittered crops for one split. The jitter of a record depends only on the
/// run seed, the split and the record's identity.
pub fn crop_split<S: SceneSource + ?Sized>(
    source: &S,
    manifest: &DatasetManifest,
    split: Split,
    config: &RunConfig,
    with_clean: bool,
) -> Result<CropSet, PipelineError> {
    let records = split_records(manifest, split, config);
    if records.is_empty() {
        return Err(DatasetError::Data(format!(
            "no {} records at visibility >= {}",
            split.file_name(),
            config.crops.visibility_threshold
        ))
        .into());
    }
    Ok(CropSet::build(
        source,
        manifest,
        &records,
        CropOptions {
            jitter: config.crops.jitter,
            seed: derive_seed(config.seed, &[CROP_SEED_TAG, split_tag(split)]),
            with_clean,
        },
    )?)
}

/// Autoencoder config for `manifest` with `variant`'s label mode.
pub fn cvae_config_for(config: &RunConfig, manifest: &DatasetManifest, variant: Option<LabelVariant>) -> CvaeConfig {
    let mut c = config.cvae_config(manifest.num_classes());
    if let Some(v) = variant {
        c.label_mode = v.label_mode();
    }
    c
}

pub fn fit_cvae(
    train: &CropSet,
    val: &CropSet,
    cvae_config: &CvaeConfig,
    config: &RunConfig,
) -> Result<(Cvae<f32>, TrainingLog), PipelineError> {
    Ok(train_cvae(train, val, cvae_config, &config.cvae_training)?)
}

/// Encoder means of `set` paired with ground-truth poses.
pub fn head_samples(cvae: &Cvae<f32>, set: &CropSet) -> Result<Vec<HeadSample>, PipelineError> {
    let inputs = encode_crops(cvae, set)?;
    Ok(inputs
        .into_iter()
        .zip(&set.records)
        .map(|(input, r)| HeadSample {
            input,
            pose: r.gt_pose,
        })
        .collect())
}

pub fn fit_heads(
    cvae: &Cvae<f32>,
    cvae_hash: &str,
    train: &CropSet,
    val: &CropSet,
    config: &RunConfig,
    use_labels: bool,
) -> Result<(HeadBundle, Vec<HeadLog>), PipelineError> {
    let tr = head_samples(cvae, train)?;
    let va = head_samples(cvae, val)?;
    fit_heads_on(&tr, &va, cvae.config.num_classes, cvae_hash, config, use_labels)
}

/// As [`fit_heads`], on precomputed encoder means.
pub fn fit_heads_on(
    train: &[HeadSample],
    val: &[HeadSample],
    num_classes: usize,
    cvae_hash: &str,
    config: &RunConfig,
    use_labels: bool,
) -> Result<(HeadBundle, Vec<HeadLog>), PipelineError> {
    Ok(train_heads(
        train,
        val,
        num_classes,
        &config.head_train_config(use_labels),
        cvae_hash,
    )?)
}

/// One result row per crop the estimator handles; instances it fails on
/// are left out and count as failures at evaluation.
pub fn infer(estimator: &Estimator, set: &CropSet) -> Result<(Vec<ResultRow>, usize), PipelineError> {
    let out = crate::parallel::map_range(set.len(), |i| {
        let r = &set.records[i];
        estimator
            .estimate(&set.image(i), &set.labels[i], set.bboxes[i], r.intrinsics)
            .map(|(pose, _)| pose)
    });
    let mut rows = Vec::with_capacity(out.len());
    let mut failures = 0;
    for (res, r) in out.into_iter().zip(&set.records) {
        match res {
            Ok(pose) => rows.push(ResultRow {
                scene_id: r.scene_id,
                image_id: r.image_id,
                object_id: r.object_id,
                score: 1.0,
                pose,
                time: -1.0,
            }),
            Err(RegressionError::Cvae(e)) => return Err(e.into()),
            Err(e @ RegressionError::ShapeMismatch(_)) => return Err(e.into()),
            Err(e) => {
                log::warn!(
                    "no estimate for {}/{}/{}: {e}",
                    r.scene_id,
                    r.image_id,
                    r.object_id
                );
                failures += 1;
            }
        }
    }
    Ok((rows, failures))
}

pub fn fit_codebook(cvae: &Cvae<f32>, cvae_hash: &str, train: &CropSet) -> Result<Codebook, PipelineError> {
    Ok(build_codebook(cvae, train, cvae_hash)?)
}

/// LUT estimates for every crop, with the index of the chosen entry.
pub fn lut_infer(
    cvae: &Cvae<f32>,
    codebook: &Codebook,
    set: &CropSet,
) -> Result<Vec<(ResultRow, usize)>, PipelineError> {
    let inputs = encode_crops(cvae, set)?;
    inputs
        .iter()
        .zip(&set.records)
        .map(|(input, r)| {
            let m = codebook.estimate(&input.mu, r.object_id, &input.bbox, &r.intrinsics)?;
            Ok((
                ResultRow {
                    scene_id: r.scene_id,
                    image_id: r.image_id,
                    object_id: r.object_id,
                    score: m.similarity,
                    pose: m.pose,
                    time: -1.0,
                },
                m.index,
            ))
        })
        .collect()
}

/// Pairs ground-truth records with estimates. Records without an estimate
/// are kept as failures; estimates without a record are ignored.
pub fn match_results(records: &[Record], rows: &[ResultRow]) -> Vec<EvalRecord> {
    let by_key: HashMap<(u32, u32, u32), &ResultRow> = rows
        .iter()
        .map(|r| ((r.scene_id, r.image_id, r.object_id), r))
        .collect();
    records
        .iter()
        .map(|r| EvalRecord {
            scene_id: r.scene_id,
            image_id: r.image_id,
            object_id: r.object_id,
            est_pose: by_key.get(&(r.scene_id, r.image_id, r.object_id)).map(|x| x.pose),
            gt_pose: r.gt_pose,
            intrinsics: r.intrinsics,
            visibility: r.visibility,
        })
        .collect()
}

/// Report over the test split of `manifest`.
pub fn evaluate(
    manifest: &DatasetManifest,
    rows: &[ResultRow],
    models: &[ObjectModel],
    config: &RunConfig,
) -> Result<Report, PipelineError> {
    let records = split_records(manifest, Split::Test, config);
    Ok(aggregate_report(&match_results(&records, rows), models, &config.eval)?)
}
