//! Property tests of the kernels, conditioning, corpus and metrics.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, Axis, IxDyn};
use proptest::prelude::*;
use vcdistill::data::{generate_synthetic_corpus, Normalizer, SyntheticConfig};
use vcdistill::distill::{build_batch_conditioning, label_derangement, Checkpoint, SpeakerTable, TrainConfig};
use vcdistill::eval::{content_preservation_error, embedding_cosine};
use vcdistill::networks::SpeakerEmbedding;
use vcdistill::{make_schedule, ScheduleKind, SeededRng};

fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn schedule_params() -> impl Strategy<Value = (usize, f64, f64)> {
    (1usize..300, 1e-5f64..0.05, 0.0f64..0.5).prop_map(|(t, b0, span)| (t, b0, (b0 + span).min(0.9)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_is_a_decreasing_product_in_unit_interval((steps, b0, b1) in schedule_params()) {
        let s = make_schedule(steps, b0, b1, ScheduleKind::Linear).unwrap();
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = s.alpha_bar(t);
            prop_assert!(ab > 0.0 && ab < prev);
            prop_assert!((ab - prev * s.alpha(t)).abs() <= 1e-15);
            prev = ab;
        }
    }

    #[test]
    fn forward_then_reverse_at_step_one_is_identity(
        (steps, b0, b1) in schedule_params(),
        seed in any::<u64>(),
    ) {
        let s = make_schedule(steps, b0, b1, ScheduleKind::Linear).unwrap();
        let mut rng = SeededRng::new(seed);
        let x0 = rng.normal_array(&[2, 3]);
        let eps = rng.normal_array(&[2, 3]);
        let d = s.forward_diffuse(&x0, 1, &eps).unwrap();
        let back = s.reverse_step(&d.x_t, 1, &eps).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_diffusion_preserves_unit_variance_mixing(
        (steps, b0, b1) in schedule_params(),
        t_frac in 0.0f64..1.0,
    ) {
        let s = make_schedule(steps, b0, b1, ScheduleKind::Linear).unwrap();
        let t = 1 + ((steps - 1) as f64 * t_frac) as usize;
        let ab = s.alpha_bar(t);
        // x0 = 1, eps = 1: coefficients sum in quadrature to one.
        let one = arr(&[1], vec![1.0]);
        let x = s.forward_diffuse(&one, t, &arr(&[1], vec![0.0])).unwrap().x_t[0];
        let e = s.forward_diffuse(&arr(&[1], vec![0.0]), t, &one).unwrap().x_t[0];
        prop_assert!((x * x + e * e - 1.0).abs() < 1e-12);
        prop_assert!((x - ab.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn derangements_move_every_label(labels in prop::collection::vec(0usize..5, 2..24), seed in any::<u64>()) {
        let mut counts = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        let largest = *counts.values().max().unwrap();
        let mut rng = SeededRng::new(seed);
        match label_derangement(&labels, &mut rng) {
            Some(perm) => {
                prop_assert!(2 * largest <= labels.len());
                let set: BTreeSet<_> = perm.iter().copied().collect();
                prop_assert_eq!(set.len(), labels.len());
                for (i, &j) in perm.iter().enumerate() {
                    prop_assert_ne!(labels[i], labels[j]);
                }
            }
            None => prop_assert!(2 * largest > labels.len() || counts.len() < 2),
        }
    }

    #[test]
    fn batch_conditioning_rows_match_the_table(labels in prop::collection::vec(0usize..6, 2..20), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let table: SpeakerTable = (0..6)
            .map(|k| (k, SpeakerEmbedding::new(rng.normal_array(&[4]).into_raw_vec_and_offset().0).unwrap()))
            .collect();
        if let Ok(c) = build_batch_conditioning(&labels, &table, &mut rng, false) {
            prop_assert!(c.check().is_ok());
            for i in 0..labels.len() {
                prop_assert_eq!(&c.s_tgt.row(i)[..], table[&c.tgt[i]].as_slice());
                prop_assert_eq!(&c.s_src.row(i)[..], table[&labels[i]].as_slice());
                if !c.degraded {
                    prop_assert_ne!(c.s_tgt.row(i), c.s_src.row(i));
                    prop_assert_ne!(c.s_inv.row(i), c.s_tgt.row(i));
                    prop_assert_ne!(c.s_tgt2.row(i), c.s_tgt.row(i));
                }
            }
        }
    }

    #[test]
    fn normalizer_round_trips_and_hits_unit_range(data in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let x = arr(&[data.len()], data);
        prop_assume!(x.iter().any(|&v| v != x[0]));
        let n = Normalizer::fit([&x]).unwrap();
        let y = n.apply(&x);
        prop_assert!(y.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        for (a, b) in n.invert(&y).iter().zip(x.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        if let (Ok(ea), Ok(eb)) = (SpeakerEmbedding::new(a), SpeakerEmbedding::new(b)) {
            let c = embedding_cosine(&ea, &eb);
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert_eq!(c, embedding_cosine(&eb, &ea));
            prop_assert!((embedding_cosine(&ea, &ea) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..30), step in any::<u32>()) {
        let mut ck = Checkpoint::new("adcd", &TrainConfig::default(), step as u64, SeededRng::new(3).state(), None, SpeakerTable::new());
        let n = values.len();
        ck.push("block".into(), arr(&[n], values));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Removing per-bin time means from any rendered utterance leaves its
    /// content trajectory, whatever the speaker, jitter or band pattern.
    #[test]
    fn synthetic_utterances_centre_to_their_trajectory(
        seed in any::<u64>(),
        jitter in 0.0f64..0.5,
        band in 0usize..3,
        offset in -3.0f64..3.0,
    ) {
        let cfg = SyntheticConfig {
            n_speakers: 4,
            n_contents: 3,
            utterance_jitter: jitter,
            band_orders: band,
            ..Default::default()
        };
        let (corpus, reg) = generate_synthetic_corpus(&cfg, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(corpus.records.len(), 12);
        for r in &corpus.records {
            prop_assert!(r.mel.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            let e = content_preservation_error(&r.mel, r.content, &reg).unwrap();
            prop_assert!(e < 1e-9, "content error {e}");
            let shifted = r.mel.mapv(|v| v + offset);
            prop_assert!(content_preservation_error(&shifted, r.content, &reg).unwrap() < 1e-9);
            let centred = &r.mel - &r.mel.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
            prop_assert!(centred.iter().any(|v| v.abs() > 1e-3));
        }
    }
}
