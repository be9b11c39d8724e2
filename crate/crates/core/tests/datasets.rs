mod common;

use image::{Rgb, RgbImage};
use posevae::datasets::{
    assign_train_val, crop_and_resize, crop_square, filter_by_visibility, BoundingBox,
    DatasetError, DatasetInfo, DatasetManifest, Record, Split, CROP_SIZE,
};
use posevae::geometry::{random_rotation, Pose, Translation};
use proptest::prelude::*;
use rand::Rng;

fn record(r: &mut impl Rng, i: u32) -> Record {
    let bbox = BoundingBox::new(
        r.gen_range(0.0..600.0),
        r.gen_range(0.0..440.0),
        r.gen_range(1.0..120.0),
        r.gen_range(1.0..120.0),
    )
    .unwrap();
    Record {
        scene_id: r.gen_range(0..3),
        image_id: i,
        object_id: r.gen_range(1..4),
        bbox,
        bbox_obj: bbox,
        gt_pose: Pose::new(
            random_rotation(r.gen()),
            Translation::new(r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2), r.gen_range(0.5..1.5)).unwrap(),
        ),
        visibility: r.gen(),
        intrinsics: common::lm_intrinsics(),
        image: format!("images/{i:06}.png"),
        clean: r.gen_bool(0.5).then(|| format!("clean/{i:06}.png")),
        split: [Split::Train, Split::Val, Split::Test][r.gen_range(0..3)],
    }
}

fn records(seed: u64, n: usize) -> Vec<Record> {
    let mut r = common::rng(seed);
    (0..n as u32).map(|i| record(&mut r, i)).collect()
}

proptest! {
    #[test]
    fn crops_are_full_size_and_in_range(
        seed in any::<u64>(),
        w in 8u32..200,
        h in 8u32..200,
        x in -50.0f64..150.0,
        y in -50.0f64..150.0,
        bw in 1.0f64..300.0,
        bh in 1.0f64..300.0,
    ) {
        let mut r = common::rng(seed);
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([r.gen(), r.gen(), r.gen()]));
        let bbox = BoundingBox::new(x, y, bw, bh).unwrap();
        match crop_and_resize(&img, &bbox) {
            Ok(t) => {
                prop_assert_eq!((t.c, t.h, t.w), (3, CROP_SIZE, CROP_SIZE));
                prop_assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            Err(DatasetError::EmptyCrop) => {
                let (x0, y0, side) = crop_square(&bbox);
                prop_assert!(x0 + side <= 0.0 || y0 + side <= 0.0 || x0 >= w as f64 || y0 >= h as f64);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    /// Interpolation weights sum to one, so a flat region stays flat.
    #[test]
    fn flat_image_crops_flat(level in 0u8..=255, x in 4.0f64..40.0, y in 4.0f64..40.0, side in 4.0f64..50.0) {
        let img = RgbImage::from_pixel(100, 100, Rgb([level; 3]));
        let t = crop_and_resize(&img, &BoundingBox::new(x, y, side, side).unwrap()).unwrap();
        let want = level as f32 / 255.0;
        prop_assert!(t.data.iter().all(|v| (v - want).abs() < 1e-5));
    }

    #[test]
    fn visibility_filter_keeps_exactly_the_visible(seed in any::<u64>(), n in 0usize..60, threshold in 0.0f64..1.0) {
        let recs = records(seed, n);
        let kept = filter_by_visibility(&recs, threshold);
        let expected: Vec<&Record> = recs.iter().filter(|r| r.visibility >= threshold).collect();
        prop_assert_eq!(kept.iter().collect::<Vec<_>>(), expected);
        prop_assert_eq!(filter_by_visibility(&kept, threshold), kept);
    }

    #[test]
    fn train_val_assignment_is_seeded_and_proportional(seed in any::<u64>(), n in 1usize..80) {
        let mut a = records(1, n);
        let mut b = a.clone();
        assign_train_val(&mut a, seed);
        assign_train_val(&mut b, seed);
        prop_assert_eq!(&a, &b);
        let train = a.iter().filter(|r| r.split == Split::Train).count();
        prop_assert_eq!(train, (n as f64 * 0.9).round() as usize);
        prop_assert!(a.iter().all(|r| matches!(r.split, Split::Train | Split::Val)));
    }
}

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs = records(7, 50);
    // Loading groups records by split file.
    recs.sort_by_key(|r| r.split);
    let m = DatasetManifest {
        info: DatasetInfo {
            version: 1,
            source: "test".into(),
            object_ids: vec![1, 2, 3],
        },
        records: recs,
    };
    m.write(dir.path()).unwrap();
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
    // A record filed under the wrong split is rejected with its line number.
    let val = std::fs::read_to_string(dir.path().join("val.jsonl")).unwrap();
    let test = std::fs::read_to_string(dir.path().join("test.jsonl")).unwrap();
    std::fs::write(dir.path().join("test.jsonl"), format!("{test}{val}")).unwrap();
    match DatasetManifest::load(dir.path()) {
        Err(DatasetError::Parse { line, .. }) => assert_eq!(line, test.lines().count() + 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
