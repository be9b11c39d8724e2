//! Throughput of the data-parallel stages. Run once per build to compare:
//!
//! ```text
//! cargo bench --bench throughput
//! cargo bench --bench throughput --no-default-features
//! ```
//!
//! Group names carry the build mode, so both sets of results land side by
//! side under `target/criterion/`.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use posevae::baseline_lut::build_codebook;
use posevae::cvae::{Cvae, CvaeConfig, LabelMode};
use posevae::datasets::{
    generate_synthetic_dataset, CropOptions, CropSet, ObjectShape, Split, SyntheticConfig,
    SyntheticDataset,
};
use posevae::eval::{aggregate_report, EvalRecord, ThresholdGrid};
use posevae::geometry::{random_rotation, Pose, Translation};
use posevae::parallel::is_parallel;
use posevae::regression::encode_crops;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn dataset() -> SyntheticDataset {
    generate_synthetic_dataset(&SyntheticConfig {
        objects: vec![ObjectShape::SquarePrism, ObjectShape::Wedge],
        train_images: 24,
        test_images: 1,
        clutter: 6,
        model_samples: 200,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn crops(ds: &SyntheticDataset) -> CropSet {
    let opts = CropOptions {
        jitter: 0.05,
        seed: 0,
        with_clean: false,
    };
    CropSet::build(ds, &ds.manifest, &ds.manifest.split(Split::Train), opts).unwrap()
}

fn cvae() -> Cvae<f32> {
    Cvae::new(CvaeConfig {
        latent_dim: 32,
        num_classes: 2,
        alpha: 0.1,
        base_width: 8,
        blocks: [1, 1, 1, 1],
        decoder_width: 32,
        label_mode: LabelMode::Full,
        seed: 0,
    })
    .unwrap()
}

fn bench(c: &mut Criterion) {
    let ds = dataset();
    let set = crops(&ds);
    let model = cvae();
    let mut g = c.benchmark_group(mode());
    g.sample_size(10);

    g.bench_function("crop_set", |b| b.iter(|| crops(&ds)));
    g.bench_function("encode_crops", |b| b.iter(|| encode_crops(&model, &set).unwrap()));
    g.bench_function("build_codebook", |b| {
        b.iter(|| build_codebook(&model, &set, "bench").unwrap())
    });

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<EvalRecord> = (0..2000)
        .map(|i| {
            let r0 = &ds.manifest.records[i % ds.manifest.records.len()];
            let mut pose = r0.gt_pose;
            pose = Pose::new(
                pose.rotation.compose(&random_rotation(r.gen::<u64>() % 1000)),
                Translation::new(pose.translation.x() + r.gen_range(-0.01..0.01), pose.translation.y(), pose.translation.z())
                    .unwrap(),
            );
            EvalRecord {
                scene_id: r0.scene_id,
                image_id: i as u32,
                object_id: r0.object_id,
                est_pose: Some(pose),
                gt_pose: r0.gt_pose,
                intrinsics: r0.intrinsics,
                visibility: r0.visibility,
            }
        })
        .collect();
    let grid = ThresholdGrid::default();
    g.bench_function("aggregate_report", |b| {
        b.iter_batched(
            || records.clone(),
            |recs| aggregate_report(&recs, &ds.models, &grid).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
