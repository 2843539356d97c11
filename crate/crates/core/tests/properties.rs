//! Property tests for the numeric primitives, fusion, the aggregator and the
//! file formats.

use proptest::prelude::*;
use tedkit::aggregator::{aggregate, AggregatorConfig, AggregatorParams, ContextEmbedding};
use tedkit::diffusion::{timestep_embedding, TrajectoryRow, WeightTrajectory};
use tedkit::evaluator::{derangement, score_instance};
use tedkit::fusion::{apply_schedule, fuse, FusionStrategy, FusionWeights, TokenSeq};
use tedkit::io::hidden::HiddenStates;
use tedkit::io::tedh;
use tedkit::numerics::{cosine, layer_norm, softmax, Tensor, LN_EPS};
use tedkit::stats::pearson;
use tedkit::trainer::info_nce_loss;

fn vec_f64(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

/// Hidden states with at least one valid token.
fn hidden() -> impl Strategy<Value = HiddenStates> {
    (1usize..6, 1usize..9, 1usize..7)
        .prop_flat_map(|(l, n, d)| {
            (
                Just((l, n, d)),
                prop::collection::vec(any::<bool>(), n),
                0..n,
                prop::collection::vec(-50.0f32..50.0, l * n * d),
                any::<u16>(),
                prop::collection::vec(("[a-z_]{1,8}", "[ -~]{0,12}"), 0..3),
            )
        })
        .prop_map(|((l, n, d), mut mask, keep, data, flags, meta)| {
            mask[keep] = true;
            let mut h = HiddenStates::new(l, n, d, mask, data).unwrap().with_flags(flags);
            for (k, v) in meta {
                h = h.with_meta(k, v).unwrap();
            }
            h
        })
}

fn embedding(dim: usize) -> impl Strategy<Value = ContextEmbedding> {
    prop::collection::vec(-5.0f64..5.0, dim)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
        .prop_map(|v| ContextEmbedding::new(v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(x in vec_f64(1..12), c in -100.0f64..100.0) {
        let p = softmax(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_and_scales(x in vec_f64(2..16), scale in 0.5f64..50.0) {
        prop_assume!(x.iter().any(|&v| (v - x[0]).abs() > 0.1));
        let y = layer_norm(&x, LN_EPS).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        for (a, b) in y.iter().zip(layer_norm(&scaled, LN_EPS).unwrap()) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in vec_f64(3..4), b in vec_f64(3..4)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine(&b, &a).unwrap());
    }

    #[test]
    fn zero_learnable_weights_equal_norm_avg(h in hidden()) {
        let a = fuse(&h, &FusionStrategy::Learnable(FusionWeights::zeros(h.layers()))).unwrap();
        let b = fuse(&h, &FusionStrategy::NormAvg).unwrap();
        prop_assert_eq!(a.mask, b.mask);
        for (x, y) in a.data.data().iter().zip(b.data.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn fused_rows_are_convex_mixtures(h in hidden(), w in vec_f64(5..6)) {
        let w = FusionWeights::from_values(w[..h.layers()].to_vec()).unwrap();
        let alphas = w.alphas();
        prop_assert!((alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let fused = fuse(&h, &FusionStrategy::Learnable(w)).unwrap();
        // Normalized rows are bounded by sqrt(D), so is any convex mixture.
        let bound = (h.dim() as f64).sqrt() + 1e-9;
        prop_assert!(fused.data.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn tedh_round_trip_is_bit_exact(h in hidden()) {
        let bytes = tedh::encode(&h).unwrap();
        prop_assert_eq!(bytes.len(), tedh::encoded_len(&h));
        let back = tedh::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &h);
        prop_assert_eq!(tedh::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn tedh_decoding_never_panics(h in hidden(), cut in any::<prop::sample::Index>(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..4)) {
        let mut bytes = tedh::encode(&h).unwrap();
        for (at, v) in flips {
            let i = at.index(bytes.len());
            bytes[i] = v;
        }
        bytes.truncate(cut.index(bytes.len() + 1));
        let _ = tedh::decode(&bytes);
    }

    #[test]
    fn freezing_is_monotone(w in vec_f64(1..6), steps in prop::collection::vec(0u64..50, 1..10), at in 0u64..50) {
        let mut cur = FusionWeights::from_values(w).unwrap();
        let mut was_frozen = false;
        for s in steps {
            let next = apply_schedule(&cur, s, Some(at));
            prop_assert_eq!(next.values(), cur.values());
            if was_frozen {
                prop_assert!(next.is_frozen());
                prop_assert_eq!(next.step_frozen_at(), cur.step_frozen_at());
            }
            prop_assert_eq!(next.is_frozen(), was_frozen || s >= at);
            was_frozen = next.is_frozen();
            cur = next;
        }
    }

    #[test]
    fn fusion_weight_records_round_trip(w in vec_f64(1..10), frozen in any::<bool>(), step in 0u64..1000) {
        let mut fw = FusionWeights::from_values(w).unwrap();
        if frozen {
            fw.freeze(step);
        }
        prop_assert_eq!(FusionWeights::parse_record(&fw.to_record()).unwrap(), fw);
    }

    #[test]
    fn derangements_move_every_index(n in 2usize..200, seed in any::<u64>()) {
        let p = derangement(n, seed);
        let mut seen = vec![false; n];
        for (i, &j) in p.iter().enumerate() {
            prop_assert_ne!(i, j);
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
    }

    #[test]
    fn pearson_is_bounded_symmetric_and_affine_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 3..20),
        ys in prop::collection::vec(-100.0f64..100.0, 20),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
    ) {
        let ys = &ys[..xs.len()];
        if let Ok(c) = pearson(&xs, ys) {
            prop_assert!((-1.0..=1.0).contains(&c.r));
            prop_assert!((0.0..=1.0).contains(&c.p));
            let swapped = pearson(ys, &xs).unwrap();
            prop_assert!((swapped.r - c.r).abs() < 1e-12);
            let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((pearson(&moved, ys).unwrap().r - c.r).abs() < 1e-9);
        }
    }

    #[test]
    fn info_nce_is_non_negative_and_symmetric(
        a in prop::collection::vec(embedding(4), 2..6),
        b in prop::collection::vec(embedding(4), 6),
        tau in 0.05f64..2.0,
    ) {
        let b = &b[..a.len()];
        let ab = info_nce_loss(&a, b, tau).unwrap();
        let ba = info_nce_loss(b, &a, tau).unwrap();
        prop_assert!(ab.loss >= 0.0);
        prop_assert!((ab.loss - ba.loss).abs() < 1e-12);
    }

    #[test]
    fn scoring_ignores_positive_scaling(cap in embedding(5), pos in embedding(5), negs in prop::collection::vec(embedding(5), 1..4), k in 0.01f64..100.0) {
        let scale = |e: &ContextEmbedding| ContextEmbedding::new(e.as_slice().iter().map(|v| v * k).collect()).unwrap();
        let (hit, _) = score_instance(&cap, &pos, &negs).unwrap();
        let scaled: Vec<_> = negs.iter().map(scale).collect();
        let (hit2, _) = score_instance(&scale(&cap), &scale(&pos), &scaled).unwrap();
        prop_assert_eq!(hit, hit2);
    }

    #[test]
    fn timestep_embeddings_are_bounded(t in 0usize..10_000, half in 1usize..32) {
        let e = timestep_embedding(t, 2 * half);
        prop_assert_eq!(e.len(), 2 * half);
        prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn trajectory_tsv_round_trips(rows in prop::collection::vec((vec_f64(3..4), any::<bool>()), 1..20)) {
        let traj = WeightTrajectory {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (alphas, frozen))| TrajectoryRow { step: i as u64, alphas, frozen })
                .collect(),
            freeze_step: None,
        };
        let back = WeightTrajectory::parse_tsv(&traj.to_tsv().unwrap()).unwrap();
        prop_assert_eq!(back.rows, traj.rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregator_ignores_padding(
        seed in any::<u64>(),
        valid in 1usize..5,
        pad in 1usize..4,
        rows in prop::collection::vec(-3.0f64..3.0, 8 * 8),
        junk in -1e3f64..1e3,
    ) {
        let params = AggregatorParams::init(seed, AggregatorConfig { init_std: 0.3, ..AggregatorConfig::new(8, 8, 2, 2) }).unwrap();
        let data = rows[..valid * 8].to_vec();
        let plain = TokenSeq::new(Tensor::matrix(valid, 8, data.clone()).unwrap(), vec![true; valid]).unwrap();
        let mut padded = data;
        padded.extend(std::iter::repeat_n(junk, pad * 8));
        let mask = (0..valid + pad).map(|i| i < valid).collect();
        let padded = TokenSeq::new(Tensor::matrix(valid + pad, 8, padded).unwrap(), mask).unwrap();
        prop_assert_eq!(aggregate(&plain, &params).unwrap(), aggregate(&padded, &params).unwrap());
    }
}
