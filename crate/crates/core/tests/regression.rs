mod common;

use posevae::datasets::{BoundingBox, ClassLabel};
use posevae::geometry::{
    random_rotation, rotation_to_6d, CameraIntrinsics, Pose, ProjectiveCentre, Rotation6D,
    Translation,
};
use posevae::nn::ScheduleConfig;
use posevae::regression::{
    assemble_pose, centre_from_target, centre_target, head_target, train_heads, HeadBundle,
    HeadInput, HeadKind, HeadSample, HeadTrainConfig, Mlp, MlpConfig, HIDDEN_WIDTHS,
};
use proptest::prelude::*;
use rand::Rng;

const K: usize = 3;

fn config(head: HeadKind, use_labels: bool) -> MlpConfig {
    MlpConfig {
        head,
        latent_dim: 4,
        num_classes: K,
        use_labels,
    }
}

fn batch(m: &Mlp, rows: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = common::rng(seed);
    let f = m.config.feature_dim();
    let features: Vec<f64> = (0..rows * f).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut labels = vec![0.0; rows * m.config.label_dim()];
    if m.config.use_labels {
        for row in 0..rows {
            labels[row * K + r.gen_range(0..K)] = 1.0;
        }
    }
    let targets: Vec<f64> = (0..rows * m.config.head.out_dim())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    (features, labels, targets)
}

#[test]
fn head_gradients_match_central_differences() {
    for head in HeadKind::ALL {
        let m = Mlp::new(config(head, true), 7 + head as u64);
        let rows = 5;
        let (x, y, t) = batch(&m, rows, 3);
        let (_, grads) = m.loss_and_gradient_at(&m.params, &x, &y, &t, rows).unwrap();
        let floor = 1e-3 * common::rms(&grads);
        let first = &m.layers()[0];
        let mut indices: Vec<usize> = first.weight.clone().collect();
        indices.extend(first.bias.clone());
        // Plus a sample of every later layer.
        for l in &m.layers()[1..] {
            indices.extend(l.weight.clone().step_by(97));
            indices.extend(l.bias.clone());
        }
        let h = 1e-5;
        let mut p = m.params.clone();
        let mut worst: f64 = 0.0;
        for &i in &indices {
            let orig = p[i];
            p[i] = orig + h;
            let up = m.loss_and_gradient_at(&p, &x, &y, &t, rows).unwrap().0;
            p[i] = orig - h;
            let down = m.loss_and_gradient_at(&p, &x, &y, &t, rows).unwrap().0;
            p[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(common::rel_error(grads[i], fd, floor));
        }
        assert!(worst < 1e-4, "{} head: worst relative error {worst}", head.name());
    }
}

/// Swapping two classes in the one-hot input and the matching label columns
/// of every layer's weights must leave outputs unchanged.
#[test]
fn label_permutation_is_a_symmetry() {
    for head in HeadKind::ALL {
        let m = Mlp::new(config(head, true), 21);
        let rows = 6;
        let (x, y, _) = batch(&m, rows, 4);
        let out = m.forward(&x, &y, rows).unwrap();

        let (a, b) = (0, 2);
        let mut p = m.params.clone();
        for l in m.layers() {
            let first_label = l.in_dim - K;
            for o in 0..l.out_dim {
                let row = l.weight.start + o * l.in_dim;
                p.swap(row + first_label + a, row + first_label + b);
            }
        }
        let permuted = Mlp::with_params(m.config, p).unwrap();
        let mut y2 = y.clone();
        for row in y2.chunks_exact_mut(K) {
            row.swap(a, b);
        }
        let out2 = permuted.forward(&x, &y2, rows).unwrap();
        for (u, v) in out.iter().zip(&out2) {
            assert!((u - v).abs() < 1e-12, "{} head: {u} vs {v}", head.name());
        }
        // And the labels do matter.
        let unpermuted = m.forward(&x, &y2, rows).unwrap();
        assert!(out.iter().zip(&unpermuted).any(|(u, v)| (u - v).abs() > 1e-9));
    }
}

#[test]
fn input_widths_follow_head_roles() {
    let n = 4;
    for (head, extra) in [(HeadKind::Rotation, 0), (HeadKind::Centre, 4), (HeadKind::Distance, 2)] {
        let m = Mlp::new(config(head, true), 1);
        assert_eq!(m.layers()[0].in_dim, n + extra + K);
        let outs: Vec<usize> = m.layers().iter().map(|l| l.out_dim).collect();
        assert_eq!(&outs[..5], &HIDDEN_WIDTHS);
        assert_eq!(outs[5], head.out_dim());
        let m = Mlp::new(config(head, false), 1);
        assert_eq!(m.layers()[0].in_dim, n + extra);
    }
}

fn k() -> CameraIntrinsics {
    common::lm_intrinsics()
}

fn random_pose(r: &mut impl Rng) -> Pose {
    Pose::new(
        random_rotation(r.gen()),
        Translation::new(r.gen_range(-0.2..0.2), r.gen_range(-0.15..0.15), r.gen_range(0.6..1.2)).unwrap(),
    )
}

proptest! {
    #[test]
    fn gt_decomposition_reassembles(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let pose = random_pose(&mut r);
        let k = k();
        let c = ProjectiveCentre::of_translation(&pose.translation, &k);
        let back = assemble_pose(pose.rotation, &c, pose.translation.z(), &k).unwrap();
        prop_assert!((back.translation.vector() - pose.translation.vector()).abs().max() < 1e-9);
        prop_assert_eq!(back.rotation, pose.rotation);
        let t = head_target(HeadKind::Centre, &pose, &k, 0.9);
        let c2 = centre_from_target([t[0], t[1]], &k);
        prop_assert!(c2.distance_to(&c) < 1e-9);
        prop_assert_eq!(centre_target(&c, &k).to_vec(), t);
    }

    #[test]
    fn rotation_head_always_lands_on_so3(seed in any::<u64>(), spread in 0.1f64..100.0) {
        let mut r = common::rng(seed);
        let mut m = Mlp::new(config(HeadKind::Rotation, true), seed);
        for p in m.params.iter_mut() {
            *p *= spread;
        }
        let mu: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        let y = ClassLabel::new(r.gen_range(0..K), K).unwrap().one_hot::<f64>();
        let out = m.forward(&mu, &y, 1).unwrap();
        let six: [f64; 6] = out.try_into().unwrap();
        if let Ok(rot) = posevae::geometry::gram_schmidt_6d(&Rotation6D(six)) {
            let (o, d) = rot.invariant_errors();
            prop_assert!(o < 1e-6 && d < 1e-6);
        }
    }
}

/// Samples whose latent encodes the rotation but not the object's size:
/// class 1 is class 0 scaled ×1.6 in size and distance, so box size and μ
/// are identical and only the label tells the distances apart.
fn twin_samples(n: usize, seed: u64) -> Vec<HeadSample> {
    let mut r = common::rng(seed);
    let k = k();
    (0..n)
        .map(|i| {
            let class = i % 2;
            let scale = if class == 0 { 1.0 } else { 1.6 };
            let rot = random_rotation(r.gen());
            let base = Translation::new(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), r.gen_range(0.7..1.1)).unwrap();
            let t = Translation::from_vector(base.vector() * scale).unwrap();
            let c = ProjectiveCentre::of_translation(&t, &k);
            let side = 60.0 / base.z();
            let six = rotation_to_6d(&rot).0;
            HeadSample {
                input: HeadInput {
                    mu: vec![six[0], six[1], six[2], six[3], six[4], six[5], r.gen_range(-0.01..0.01)],
                    label: ClassLabel::new(class, 2).unwrap(),
                    bbox: BoundingBox::new(c.cx - side / 2.0, c.cy - side / 2.0, side, side).unwrap(),
                    intrinsics: k,
                },
                pose: Pose::new(rot, t),
            }
        })
        .collect()
}

fn quick(use_labels: bool) -> HeadTrainConfig {
    HeadTrainConfig {
        schedule: ScheduleConfig {
            max_epochs: 300,
            plateau_patience: 50,
            stop_patience: 100,
            ..ScheduleConfig::heads()
        },
        use_labels,
        seed: 2,
        ..HeadTrainConfig::default()
    }
}

fn distance_mae(bundle: &HeadBundle, samples: &[HeadSample]) -> f64 {
    samples
        .iter()
        .map(|s| (bundle.predict_distance(&s.input).unwrap() - s.pose.translation.z()).abs())
        .sum::<f64>()
        / samples.len() as f64
}

#[test]
fn training_reduces_every_validation_loss_and_is_deterministic() {
    let train = twin_samples(240, 1);
    let val = twin_samples(60, 2);
    let (bundle, logs) = train_heads(&train, &val, 2, &quick(true), "h").unwrap();
    for log in &logs {
        let first = log.epochs[0].val;
        let best = log.epochs[log.best_epoch - 1].val;
        assert!(best < 0.5 * first, "{:?}: {first} -> {best}", log.head);
    }
    let untrained = HeadBundle::new(
        Mlp::new(config7(HeadKind::Rotation), 99),
        bundle.centre.clone(),
        bundle.distance.clone(),
        bundle.tz_scale,
        "h".into(),
    );
    let geo = |b: &HeadBundle| {
        val.iter()
            .map(|s| b.predict_rotation(&s.input).unwrap().angle_to(&s.pose.rotation))
            .sum::<f64>()
    };
    assert!(geo(&bundle) < geo(&untrained));
    let (again, logs2) = train_heads(&train, &val, 2, &quick(true), "h").unwrap();
    assert_eq!(again, bundle);
    assert_eq!(logs2, logs);
}

fn config7(head: HeadKind) -> MlpConfig {
    MlpConfig {
        head,
        latent_dim: 7,
        num_classes: 2,
        use_labels: true,
    }
}

#[test]
fn labels_resolve_scaled_twins() {
    let train = twin_samples(240, 3);
    let val = twin_samples(60, 4);
    let test = twin_samples(100, 5);
    let (with, _) = train_heads(&train, &val, 2, &quick(true), "h").unwrap();
    let (without, _) = train_heads(&train, &val, 2, &quick(false), "h").unwrap();
    let (a, b) = (distance_mae(&with, &test), distance_mae(&without, &test));
    assert!(a < 0.5 * b, "with labels {a}, without {b}");
}

#[test]
fn distance_responds_to_box_size() {
    let train = twin_samples(240, 6);
    let val = twin_samples(60, 7);
    let (bundle, _) = train_heads(&train, &val, 2, &quick(true), "h").unwrap();
    let mut s = val[0].input.clone();
    let d0 = bundle.predict_distance(&s).unwrap();
    s.bbox.w /= 2.0;
    s.bbox.h /= 2.0;
    let d1 = bundle.predict_distance(&s).unwrap();
    assert!(d1 > d0, "halving the box should push the object away: {d0} -> {d1}");
}
