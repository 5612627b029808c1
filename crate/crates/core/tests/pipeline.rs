use crh_core::feature::tanh_normalize;
use crh_core::format::{read_dataset, read_model, write_dataset, write_model};
use crh_core::hamming::collision_probability;
use crh_core::pseudo_labels::{affinity_propagation, build_similarity, ApConfig};
use crh_core::synth::{augment, generate, SynthSpec};
use crh_core::train::{encode, train, LossMode, TrainConfig, Variant};
use crh_core::Error;
use proptest::prelude::*;

fn small() -> SynthSpec {
    SynthSpec {
        n_coarse: 3,
        fines_per_coarse: 2,
        samples_per_fine: 5,
        channels: 6,
        positions: 4,
        seed: 11,
        ..SynthSpec::standard()
    }
}

#[test]
fn saved_models_encode_like_the_trainer() {
    let data = generate(&small()).unwrap();
    let mut buf = Vec::new();
    write_dataset(&data.samples, Some((&data.fine_labels, &data.coarse_labels)), &mut buf).unwrap();
    let file = read_dataset(&buf[..]).unwrap();
    for variant in [Variant::Sign, Variant::Codebook] {
        let cfg = TrainConfig {
            bits: 10,
            epochs: 4,
            variant,
            ..TrainConfig::default()
        };
        let out = train(&file.samples, Some(&file.labels.as_ref().unwrap().0), &cfg).unwrap();
        let mut model = Vec::new();
        write_model(&out.state, &mut model).unwrap();
        let loaded = read_model(&model[..]).unwrap();
        assert_eq!(loaded, out.state);
        assert_eq!(encode(&file.samples, &loaded).unwrap(), out.codes);
    }
}

#[test]
fn every_mode_logs_finite_metrics() {
    let data = generate(&small()).unwrap();
    for mode in [LossMode::NhdFull, LossMode::NhdOnly, LossMode::L2Baseline] {
        let cfg = TrainConfig {
            bits: 8,
            epochs: 3,
            loss_mode: mode,
            ..TrainConfig::default()
        };
        let out = train(&data.samples, Some(&data.fine_labels), &cfg).unwrap();
        for m in &out.metrics {
            assert!(m.loss.is_finite() && m.loss >= 0.0, "{mode:?} {m:?}");
            assert!((0.0..=1.0).contains(&m.map));
            assert!((0.0..=1.0).contains(&m.p_collision));
        }
        let last = out.metrics.last().unwrap();
        assert_eq!(last.p_collision, collision_probability(&out.codes).unwrap());
    }
}

#[test]
fn augmented_twins_stay_close_after_training() {
    let data = generate(&small()).unwrap();
    let cfg = TrainConfig {
        bits: 16,
        epochs: 5,
        ..TrainConfig::default()
    };
    let out = train(&data.samples, Some(&data.fine_labels), &cfg).unwrap();
    let twins: Vec<_> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| augment(s, 0.25, i as u64).unwrap())
        .collect();
    let twin_codes = encode(&twins, &out.state).unwrap();
    let mut total = 0.0;
    for i in 0..data.len() {
        let h: u32 = out
            .codes
            .row_words(i)
            .iter()
            .zip(twin_codes.row_words(i))
            .map(|(a, b)| (a ^ b).count_ones())
            .sum();
        total += 2.0 * f64::from(h) / 16.0;
    }
    assert!(total / data.len() as f64 <= 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_exemplars_lead_their_own_clusters(
        pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..40),
    ) {
        let feats: Vec<_> = match pts.iter().map(|p| tanh_normalize(p, 8.0)).collect::<Result<Vec<_>, _>>() {
            Ok(f) => f,
            Err(_) => return Ok(()),
        };
        let s = build_similarity(&feats).unwrap();
        match affinity_propagation(&s, &ApConfig::default()) {
            Ok(c) => {
                prop_assert!(c.n_clusters() >= 1);
                prop_assert_eq!(c.assignment.len(), pts.len());
                prop_assert!(c.exemplars.windows(2).all(|w| w[0] < w[1]));
                for (slot, &e) in c.exemplars.iter().enumerate() {
                    prop_assert_eq!(c.assignment[e], slot);
                }
                prop_assert!(c.assignment.iter().all(|&a| a < c.n_clusters()));
            }
            Err(e) => {
                let no_exemplars = matches!(e, Error::NoExemplars { .. });
                prop_assert!(no_exemplars, "{}", e);
            }
        }
    }
}
