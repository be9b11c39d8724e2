mod common;

use posevae::baseline_lut::{build_codebook, Codebook, CodebookEntry, LutError};
use posevae::cvae::Cvae;
use posevae::datasets::{
    generate_synthetic_dataset, CropOptions, CropSet, ObjectShape, Split, SyntheticConfig,
};
use posevae::geometry::random_rotation;
use proptest::prelude::*;
use rand::Rng;

fn random_codebook(r: &mut impl Rng) -> Codebook {
    let n = r.gen_range(1..12);
    let count = r.gen_range(1..40);
    let mut entries: Vec<CodebookEntry> = (0..count)
        .map(|_| CodebookEntry {
            mu: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            object_id: r.gen_range(1..4),
            rotation: random_rotation(r.gen()),
            tz: r.gen_range(0.5..1.5),
        })
        .collect();
    // Exact duplicates exercise the tie rule.
    if count > 2 && r.gen_bool(0.5) {
        let dup = entries[0].clone();
        entries.push(dup);
    }
    Codebook::new(n, String::new(), entries).unwrap()
}

/// Exhaustive scan written independently of the library.
fn brute_nearest(cb: &Codebook, mu: &[f64], object_id: u32) -> Option<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nq = norm(mu);
    let mut best_i = None;
    let mut best_s = f64::NEG_INFINITY;
    for i in 0..cb.entries.len() {
        let e = &cb.entries[i];
        if e.object_id != object_id {
            continue;
        }
        let ne = norm(&e.mu);
        let s = if nq == 0.0 || ne == 0.0 {
            0.0
        } else {
            mu.iter().zip(&e.mu).map(|(a, b)| a * b).sum::<f64>() / (nq * ne)
        };
        if s > best_s {
            best_s = s;
            best_i = Some(i);
        }
    }
    best_i
}

#[test]
fn nearest_matches_brute_force_on_random_codebooks() {
    let mut r = common::rng(31);
    for _ in 0..1000 {
        let cb = random_codebook(&mut r);
        for _ in 0..5 {
            let object_id = r.gen_range(1..4);
            let mu: Vec<f64> = if r.gen_bool(0.2) {
                cb.entries[r.gen_range(0..cb.len())].mu.clone()
            } else {
                (0..cb.latent_dim).map(|_| r.gen_range(-1.0..1.0)).collect()
            };
            match (cb.nearest(&mu, object_id), brute_nearest(&cb, &mu, object_id)) {
                (Ok((i, _)), Some(j)) => assert_eq!(i, j),
                (Err(LutError::MissingClass(id)), None) => assert_eq!(id, object_id),
                (got, want) => panic!("library {got:?}, oracle {want:?}"),
            }
        }
    }
}

proptest! {
    #[test]
    fn cosine_choice_ignores_query_scale(seed in any::<u64>(), s in 1e-3f64..1e3) {
        let mut r = common::rng(seed);
        let cb = random_codebook(&mut r);
        let id = cb.entries[0].object_id;
        let mu: Vec<f64> = (0..cb.latent_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = mu.iter().map(|v| v * s).collect();
        let (a, sa) = cb.nearest(&mu, id).unwrap();
        let (b, sb) = cb.nearest(&scaled, id).unwrap();
        prop_assert!((sa - sb).abs() < 1e-12);
        if (sa - sb).abs() == 0.0 {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn codebook_partitions_match_training_records() {
    let cfg = SyntheticConfig {
        objects: vec![ObjectShape::SquarePrism, ObjectShape::Wedge, ObjectShape::Ell],
        train_images: 12,
        test_images: 2,
        clutter: 4,
        model_samples: 20,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg).unwrap();
    let records = ds.manifest.split(Split::Train);
    let crops = CropSet::build(
        &ds,
        &ds.manifest,
        &records,
        CropOptions {
            jitter: 0.0,
            seed: 0,
            with_clean: false,
        },
    )
    .unwrap();
    let mut cc = common::toy_cvae_config(3);
    cc.num_classes = 3;
    let cvae = Cvae::<f32>::new(cc).unwrap();
    let cb = build_codebook(&cvae, &crops, "abc").unwrap();
    assert_eq!(cb.len(), records.len());
    for id in &ds.manifest.info.object_ids {
        let expected = records.iter().filter(|r| r.object_id == *id).count();
        assert_eq!(cb.count_for(*id), expected);
    }
    assert_eq!(build_codebook(&cvae, &crops, "abc").unwrap(), cb);
    // Every LUT rotation is a training rotation, bit for bit.
    for e in &cb.entries {
        assert!(records.iter().any(|r| r.gt_pose.rotation == e.rotation));
    }
}
