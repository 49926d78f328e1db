use proptest::prelude::*;

use ulda::hca::{label_to_masks, masked_average_pool, LabelMap, IGNORE};
use ulda::pipeline::checkpoint::{Checkpoint, RectifierMode, RngSummary};
use ulda::pipeline::config::{RunConfig, Stage1Config};
use ulda::pipeline::objective::{stage1_total_loss, Stage1Components};
use ulda::segmentation::{accumulate_confusion, domain_metrics, ConfusionMatrix, SegHead};
use ulda::simulation::{
    channel_stats, pin, scene_alignment_loss, BankEntry, EntryStatus, StyleBank, StyleParams,
};
use ulda::tdr::{rectified_closed_form, rectify, RectifierParams};
use ulda::tensor::FeatureMap;

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (2usize..5, 2usize..5, 1usize..5).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(-10.0f64..10.0, h * w * d)
            .prop_map(move |data| FeatureMap::new(h, w, d, data).unwrap())
    })
}

/// Channels with at least a little spread, so the standardization is well posed.
fn spread_map() -> impl Strategy<Value = FeatureMap> {
    feature_map().prop_filter("degenerate channel", |f| {
        channel_stats(f, 0.0).unwrap().std.iter().all(|&s| s > 1e-3)
    })
}

fn style_for(d: usize) -> impl Strategy<Value = StyleParams> {
    (
        prop::collection::vec(-5.0f64..5.0, d),
        prop::collection::vec(0.1f64..4.0, d),
    )
        .prop_map(|(mu, sigma)| StyleParams {
            mu,
            sigma,
            domain_id: "p".into(),
        })
}

fn map_and_style() -> impl Strategy<Value = (FeatureMap, StyleParams)> {
    spread_map().prop_flat_map(|f| {
        let d = f.dim();
        (Just(f), style_for(d))
    })
}

fn labels(n: usize) -> impl Strategy<Value = LabelMap> {
    (1usize..6, 1usize..6).prop_flat_map(move |(h, w)| {
        prop::collection::vec(prop_oneof![4 => 0..n as u8, 1 => Just(IGNORE)], h * w)
            .prop_map(move |l| LabelMap::new(h, w, n, l).unwrap())
    })
}

proptest! {
    #[test]
    fn pin_output_has_requested_statistics((f, style) in map_and_style()) {
        let out = pin(&f, &style, 0.0).unwrap();
        let s = channel_stats(&out, 0.0).unwrap();
        for c in 0..f.dim() {
            prop_assert!((s.mean[c] - style.mu[c]).abs() < 1e-10);
            prop_assert!((s.std[c] - style.sigma[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn pin_with_own_statistics_is_identity(f in feature_map()) {
        let eps = 1e-5;
        let style = StyleParams::from_stats(&channel_stats(&f, eps).unwrap(), "self");
        let out = pin(&f, &style, eps).unwrap();
        for (a, b) in out.as_slice().iter().zip(f.as_slice()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pin_leaves_input_untouched((f, style) in map_and_style()) {
        let copy = f.clone();
        let _ = pin(&f, &style, 1e-5).unwrap();
        prop_assert_eq!(copy, f);
    }

    #[test]
    fn channel_stats_ignore_pixel_order(f in feature_map(), rot in 0usize..16) {
        let (h, w, d) = (f.height(), f.width(), f.dim());
        let n = h * w;
        let k = rot % n;
        let data: Vec<f64> = (0..n).flat_map(|p| f.pixel((p + k) % n).to_vec()).collect();
        let g = FeatureMap::new(h, w, d, data).unwrap();
        let (a, b) = (channel_stats(&f, 1e-5).unwrap(), channel_stats(&g, 1e-5).unwrap());
        for c in 0..d {
            prop_assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            prop_assert!((a.std[c] - b.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_loss_is_bounded(
        a in prop::collection::vec(-3.0f64..3.0, 4),
        b in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let l = scene_alignment_loss(&a, &b).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn masks_partition_the_labelled_pixels(y in labels(4)) {
        let m = label_to_masks(&y, 4).unwrap();
        for p in 0..y.len() {
            let owners = (0..4).filter(|&k| m.mask(k)[p]).count();
            prop_assert_eq!(owners, usize::from(y.as_slice()[p] != IGNORE));
        }
        for k in 0..4 {
            prop_assert_eq!(m.present()[k], m.count(k) > 0);
        }
    }

    #[test]
    fn prototypes_of_constant_map_are_that_constant(y in labels(3), v in prop::collection::vec(-4.0f64..4.0, 2)) {
        let (h, w) = (y.height(), y.width());
        let f = FeatureMap::new(h, w, 2, (0..h * w).flat_map(|_| v.clone()).collect()).unwrap();
        let protos = masked_average_pool(&f, &label_to_masks(&y, 3).unwrap()).unwrap();
        for k in (0..3).filter(|&k| protos.present[k]) {
            for c in 0..2 {
                prop_assert!((protos.row(k)[c] - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rectified_pin_matches_closed_form(
        (f, style) in map_and_style(),
        beta in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let d = f.dim();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mu_t: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma_t: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let composed = rectify(&pin(&f, &style, 0.0).unwrap(), &mu_t, &sigma_t, beta, 0.0).unwrap();
        let closed = rectified_closed_form(&f, &style, &mu_t, &sigma_t, beta).unwrap();
        for (a, b) in composed.as_slice().iter().zip(closed.as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_beta_rectifier_is_identity((f, _style) in map_and_style(), s in -3.0f64..3.0) {
        let d = f.dim();
        let out = rectify(&f, &vec![s; d], &vec![-s; d], 0.0, 1e-5).unwrap();
        prop_assert_eq!(out, f);
    }

    #[test]
    fn stage1_total_is_the_weighted_sum(
        l in prop::array::uniform3(0.0f64..3.0),
        c in prop::array::uniform3(0.0f64..10.0),
    ) {
        let cfg = Stage1Config { lambda_hc: l[0], lambda_dc: l[1], lambda_seg: l[2], ..Stage1Config::default() };
        let total = stage1_total_loss(Stage1Components { hc: c[0], dc: c[1], seg: c[2] }, &cfg).unwrap();
        prop_assert!((total - (l[0] * c[0] + l[1] * c[1] + l[2] * c[2])).abs() < 1e-12);
        prop_assert!(total >= 0.0);
    }

    #[test]
    fn metrics_stay_in_percent_range(truth in labels(3), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pred = LabelMap::new(
            truth.height(),
            truth.width(),
            3,
            (0..truth.len()).map(|_| rng.random_range(0..3u8)).collect(),
        ).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&pred, &truth, &mut cm).unwrap();
        prop_assume!(cm.total() > 0);
        let m = domain_metrics("x", &cm).unwrap();
        prop_assert!((0.0..=100.0).contains(&m.miou));
        prop_assert!((0.0..=100.0).contains(&m.macc));
    }

    #[test]
    fn confusion_merge_equals_joint_accumulation(a in labels(3), b in labels(3)) {
        let mut joint = ConfusionMatrix::new(3);
        accumulate_confusion(&a, &a, &mut joint).unwrap();
        accumulate_confusion(&b, &b, &mut joint).unwrap();
        let mut left = ConfusionMatrix::new(3);
        accumulate_confusion(&a, &a, &mut left).unwrap();
        let mut right = ConfusionMatrix::new(3);
        accumulate_confusion(&b, &b, &mut right).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(left, joint);
    }

    #[test]
    fn bank_round_trips_bit_exactly(
        styles in prop::collection::vec(style_for(3), 1..5),
        losses in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 5),
    ) {
        let entries: Vec<BankEntry> = styles
            .into_iter()
            .enumerate()
            .map(|(i, mut style)| {
                style.domain_id = if i % 2 == 0 { "night".into() } else { "fog".into() };
                BankEntry {
                    domain_id: style.domain_id.clone(),
                    source_image_id: format!("src-{i:04}"),
                    style,
                    initial_alignment_loss: losses[i].0,
                    final_alignment_loss: losses[i].1,
                    status: if i == 3 { EntryStatus::Failed } else { EntryStatus::Ok },
                }
            })
            .collect();
        let bank = StyleBank {
            entries,
            feature_dim: 3,
            config_digest: "abc123".into(),
            domains: vec!["night".into(), "fog".into()],
        };
        let bytes = bank.to_bytes().unwrap();
        let back = StyleBank::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &bank);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(seed in any::<u64>(), with_rect in any::<bool>(), iters in 0usize..5000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let head = SegHead::new_random(4, 3, 2, 2, &mut rng);
        let ckpt = Checkpoint {
            head,
            rectifier: with_rect.then(|| RectifierParams::new_random(4, &mut rng)),
            rectifier_mode: if with_rect { RectifierMode::Learned } else { RectifierMode::Off },
            config_digest: "feed".into(),
            iterations: iters,
            rng: RngSummary { seed_hex: format!("{seed:064x}"), word_pos: seed as u128 },
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn config_digest_tracks_semantic_fields(seed in any::<u64>(), lr in 0.01f64..5.0, iters in 1usize..4000) {
        let base = RunConfig::default();
        let mut a = base.clone();
        a.seed = seed;
        prop_assert_eq!(a.digest() == base.digest(), seed == base.seed);
        let mut b = base.clone();
        b.stage1.lr = lr;
        prop_assert_eq!(b.digest() == base.digest(), lr == base.stage1.lr);
        let mut c = base.clone();
        c.stage2.iterations = iters;
        prop_assert_eq!(c.digest() == base.digest(), iters == base.stage2.iterations);
        prop_assert_eq!(c.stage1_digest(), base.stage1_digest());
    }
}

#[test]
fn config_toml_round_trips() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
}

#[test]
fn rectifier_identity_blocks_are_finite() {
    assert!(RectifierParams::identity_blocks(5).is_finite());
    assert!(RectifierParams::zeros(5).is_finite());
}

#[test]
fn default_world_domains_are_separable() {
    use ulda::pipeline::run::Context;
    use ulda::toyworld::{check_domain_separability, generate_source, make_eval_split};
    let cfg = RunConfig::default();
    let ctx = Context::new(cfg.clone()).unwrap();
    let source = generate_source(&cfg.toy).unwrap();
    let split = make_eval_split(&cfg.toy).unwrap();
    let report = check_domain_separability(ctx.encoders.vision.as_ref(), &source, &split).unwrap();
    assert_eq!(report.pairs.len(), 6);
    assert!(report.worst_ratio() > 5.0);
}

#[test]
fn stages_touch_only_their_own_parameters() {
    use ulda::pipeline::run::{run_stage1, run_stage2, Context};
    use ulda::pipeline::selfcheck::small_config;
    use ulda::toyworld::generate_source;
    let ctx = Context::new(small_config(11)).unwrap();
    let source = generate_source(&ctx.cfg.toy).unwrap();
    let s1 = run_stage1(&ctx, &source).unwrap();
    assert_eq!(s1.head_digest_before, s1.head_digest_after);
    let bank_bytes = s1.bank.to_bytes().unwrap();
    let s2 = run_stage2(&ctx, &source, &s1.bank, RectifierMode::Learned).unwrap();
    assert_eq!(s1.bank.to_bytes().unwrap(), bank_bytes);
    assert_ne!(
        ulda::pipeline::run::param_digest(&s2.checkpoint.head.flat()),
        s1.head_digest_after
    );
}
