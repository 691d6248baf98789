mod common;

use common::{random_mask, random_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcnet::augment::{apply, apply_chain, expand_dataset, plan_expansion, AugmentSpec, GeoTransform, TransformChain};
use rtcnet::datasets::is_binary;
use rtcnet::{Shape, Tensor};

fn pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_tensor(Shape::new(1, 3, h, w), &mut rng, 0.0, 1.0), random_mask(Shape::new(1, 1, h, w), &mut rng, 0.2))
}

fn positives(m: &Tensor<f64>) -> usize {
    m.data().iter().filter(|&&v| v > 0.0).count()
}

fn disc(h: usize, w: usize, r: f64) -> Tensor<f64> {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| {
        ((y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx) <= r) as u8 as f64
    })
}

fn transform() -> impl Strategy<Value = GeoTransform> {
    prop_oneof![
        Just(GeoTransform::HFlip),
        Just(GeoTransform::VFlip),
        (-12i64..12, -12i64..12).prop_map(|(dx, dy)| GeoTransform::Translate { dx, dy }),
        (0.5f64..1.6).prop_map(GeoTransform::Scale),
        (0usize..4, 0usize..4, 4usize..8, 4usize..8).prop_map(|(y, x, h, w)| GeoTransform::Crop { y, x, h, w }),
        (3usize..20, 3usize..20).prop_map(|(h, w)| GeoTransform::Resize { h, w }),
    ]
}

/// Shrinks a crop rectangle to fit an `h x w` frame.
fn fit_crop(op: GeoTransform, h: usize, w: usize) -> GeoTransform {
    match op {
        GeoTransform::Crop { y, x, h: ch, w: cw } => {
            let (ch, cw) = (ch.min(h), cw.min(w));
            GeoTransform::Crop { y: y.min(h - ch), x: x.min(w - cw), h: ch, w: cw }
        }
        op => op,
    }
}

#[test]
fn hflip_and_vflip_are_involutions() {
    for seed in 0..10 {
        let (x, m) = pair(seed, 9, 14);
        for op in [GeoTransform::HFlip, GeoTransform::VFlip] {
            let once = apply(&x, &m, op).unwrap();
            assert_ne!(once.0, x);
            let twice = apply(&once.0, &once.1, op).unwrap();
            assert_eq!(twice.0, x);
            assert_eq!(twice.1, m);
        }
    }
}

#[test]
fn flips_and_shifts_match_index_arithmetic() {
    let (x, m) = pair(1, 7, 10);
    let (fx, _) = apply(&x, &m, GeoTransform::HFlip).unwrap();
    let (vx, _) = apply(&x, &m, GeoTransform::VFlip).unwrap();
    let (tx, tm) = apply(&x, &m, GeoTransform::Translate { dx: 3, dy: -2 }).unwrap();
    for c in 0..3 {
        for y in 0..7 {
            for i in 0..10 {
                assert_eq!(fx.get([0, c, y, i]), x.get([0, c, y, 9 - i]));
                assert_eq!(vx.get([0, c, y, i]), x.get([0, c, 6 - y, i]));
                let (sy, sx) = (y as i64 + 2, i as i64 - 3);
                let want = if (0..7).contains(&sy) && (0..10).contains(&sx) { x.get([0, c, sy as usize, sx as usize]) } else { 0.0 };
                assert_eq!(tx.get([0, c, y, i]), want);
                if c == 0 {
                    let want = if (0..7).contains(&sy) && (0..10).contains(&sx) { m.get([0, 0, sy as usize, sx as usize]) } else { 0.0 };
                    assert_eq!(tm.get([0, 0, y, i]), want);
                }
            }
        }
    }
}

#[test]
fn scale_grows_disc_area_by_square_of_factor() {
    let m = disc(128, 128, 20.0);
    let x = Tensor::zeros(Shape::new(1, 3, 128, 128));
    let before = positives(&m) as f64;
    let (_, scaled) = apply(&x, &m, GeoTransform::Scale(1.25)).unwrap();
    let ratio = positives(&scaled) as f64 / (before * 1.25 * 1.25);
    assert!((ratio - 1.0).abs() <= 0.05, "area ratio {ratio}");
}

#[test]
fn expansion_hits_target_and_is_seeded() {
    let samples: Vec<_> = (0..60).map(|i| pair(i, 12, 12)).collect();
    let spec = AugmentSpec { seed: 3, ..AugmentSpec::default() };
    let out = expand_dataset(&samples, &spec).unwrap();
    assert_eq!(out.len(), 1960);
    for (i, p) in out.iter().enumerate() {
        assert_eq!(p.record.id, i);
        assert_eq!(p.record.source, i % 60);
        assert_eq!(p.record.chain.is_identity(), i < 60);
        assert!(is_binary(&p.mask));
    }
    let again = expand_dataset(&samples, &spec).unwrap();
    assert!(out.iter().zip(&again).all(|(a, b)| a.record == b.record && a.image == b.image && a.mask == b.mask));
    let other = plan_expansion(&vec![(12, 12); 60], &AugmentSpec { seed: 4, ..spec.clone() }).unwrap();
    assert!(other.iter().zip(&out).any(|(a, b)| a.chain != b.record.chain));

    // Any output regenerates from its record alone.
    let p = &out[1234];
    let chain: TransformChain = p.record.chain.to_string().parse().unwrap();
    let (x, m) = &samples[p.record.source];
    assert_eq!(apply_chain(x, m, &chain).unwrap(), (p.image.clone(), p.mask.clone()));
}

#[test]
fn expansion_rejects_impossible_targets() {
    let samples: Vec<_> = (0..3).map(|i| pair(i, 8, 8)).collect();
    assert!(expand_dataset(&samples, &AugmentSpec { target_count: 2, ..AugmentSpec::default() }).is_err());
    assert!(expand_dataset::<f64>(&[], &AugmentSpec::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masks_stay_binary_under_any_chain(seed in any::<u64>(), ops in prop::collection::vec(transform(), 1..6)) {
        let (mut x, mut m) = pair(seed, 10, 12);
        for op in ops {
            let op = fit_crop(op, x.shape().h(), x.shape().w());
            (x, m) = apply(&x, &m, op).unwrap();
            prop_assert!(is_binary(&m));
            prop_assert_eq!(x.shape().with_channels(1), m.shape());
        }
    }

    #[test]
    fn translation_never_adds_positives(seed in any::<u64>(), dx in -15i64..15, dy in -15i64..15) {
        let (x, m) = pair(seed, 11, 13);
        let (_, t) = apply(&x, &m, GeoTransform::Translate { dx, dy }).unwrap();
        prop_assert!(positives(&t) <= positives(&m));
    }

    #[test]
    fn sampled_chains_keep_frame_dims(seed in any::<u64>(), h in 8usize..24, w in 8usize..24) {
        let spec = AugmentSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = spec.sample_chain(&mut rng, h, w);
        prop_assert!(!chain.is_identity());
        let (x, m) = pair(seed, h, w);
        let (ax, am) = apply_chain(&x, &m, &chain).unwrap();
        prop_assert_eq!(ax.shape(), x.shape());
        prop_assert_eq!(am.shape(), m.shape());
    }

    #[test]
    fn chain_text_round_trips(ops in prop::collection::vec(transform(), 0..6)) {
        let chain = TransformChain(ops);
        let back: TransformChain = chain.to_string().parse().unwrap();
        prop_assert_eq!(back, chain);
    }
}
