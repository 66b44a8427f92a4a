//! Round trips and invariants of the dataset readers, writers and
//! normalization.

use proptest::prelude::*;
use specmtm::backbone::TimeSeriesBatch;
use specmtm::data::{
    load_dataset, normalize, parse_ts_str, parse_tsv_str, synth_generate, write_ts, write_tsv, DataSource, DatasetMeta,
    NormStats, SynthSpec,
};
use specmtm::Mat;

fn batch(max_len: usize, max_ch: usize) -> impl Strategy<Value = TimeSeriesBatch> {
    (1usize..6, 1..=max_len, 1..=max_ch, 1usize..4).prop_flat_map(|(n, l, c, k)| {
        (
            prop::collection::vec(prop::collection::vec(-1e6f64..1e6, l * c), n),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(xs, ys)| {
                let samples = xs.into_iter().map(|v| Mat::from_vec(l, c, v).unwrap()).collect();
                TimeSeriesBatch::new(samples, Some(ys), l, c, k).unwrap()
            })
    })
}

fn meta_for(b: &TimeSeriesBatch, names: Vec<String>) -> DatasetMeta {
    DatasetMeta {
        name: "prop".into(),
        examples: b.len(),
        length: b.length(),
        channels: b.channels(),
        classes: b.num_classes(),
        kind: "ts".into(),
        class_names: names,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ts_text_roundtrip_is_exact(b in batch(12, 3)) {
        let names: Vec<String> = (0..b.num_classes()).map(|k| format!("c{k}")).collect();
        let text = write_ts(&b, &meta_for(&b, names)).unwrap();
        let (back, meta) = parse_ts_str(&text, "prop.ts").unwrap();
        prop_assert_eq!(back.samples(), b.samples());
        // Classes are those declared in the header, in order.
        prop_assert_eq!(back.labels(), b.labels());
        prop_assert_eq!(meta.channels, b.channels());
    }

    #[test]
    fn tsv_text_roundtrip_is_exact(b in batch(12, 1)) {
        let names: Vec<String> = (0..b.num_classes()).map(|k| k.to_string()).collect();
        let text = write_tsv(&b, &meta_for(&b, names)).unwrap();
        let (back, _) = parse_tsv_str(&text, "prop.tsv").unwrap();
        prop_assert_eq!(back.samples(), b.samples());
        // Labels are remapped to the classes present, which preserves order.
        let used: std::collections::BTreeSet<usize> = b.labels().unwrap().iter().copied().collect();
        let remap: Vec<usize> = b.labels().unwrap().iter().map(|y| used.iter().position(|u| u == y).unwrap()).collect();
        prop_assert_eq!(back.labels().unwrap(), &remap[..]);
    }

    #[test]
    fn normalized_train_split_has_zero_mean_unit_std(b in batch(10, 3)) {
        let s = NormStats::fit(&b);
        let z = s.apply(&b).unwrap();
        let back = NormStats::fit(&z);
        for c in 0..b.channels() {
            prop_assert!(back.mean[c].abs() <= 1e-8 * (1.0 + s.mean[c].abs() / s.std[c].max(1.0)));
            if s.std[c] >= 1e-8 {
                prop_assert!((back.std[c] - 1.0).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn synthetic_generation_is_seed_deterministic() {
    let spec = SynthSpec {
        samples: 12,
        length: 32,
        ..Default::default()
    };
    let a = synth_generate(&spec, 3).unwrap();
    assert_eq!(a.samples(), synth_generate(&spec, 3).unwrap().samples());
    assert_ne!(a.samples(), synth_generate(&spec, 4).unwrap().samples());
    assert_eq!(a.labels().unwrap(), &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
}

#[test]
fn test_split_uses_training_statistics() {
    let ds = load_dataset(&DataSource::default(), 0).unwrap();
    let (z, stats) = normalize(&ds).unwrap();
    assert_eq!(stats, NormStats::fit(&ds.train));
    assert_eq!(z.test.sample(0), stats.apply(&ds.test).unwrap().sample(0));
    assert_eq!((ds.train.len(), ds.test.len()), (480, 120));
}

#[test]
fn files_on_disk_load_through_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        samples: 9,
        length: 16,
        frequencies: vec![vec![1.0], vec![3.0], vec![5.0]],
        ..Default::default()
    };
    let b = synth_generate(&spec, 1).unwrap();
    let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let text = write_ts(&b, &meta_for(&b, names)).unwrap();
    std::fs::write(dir.path().join("X_TRAIN.ts"), &text).unwrap();
    std::fs::write(dir.path().join("X_TEST.ts"), &text).unwrap();
    let src = DataSource::Ts {
        train: "X_TRAIN.ts".into(),
        test: "X_TEST.ts".into(),
    }
    .resolved(dir.path());
    let ds = load_dataset(&src, 0).unwrap();
    assert_eq!(ds.train.samples(), b.samples());
    assert_eq!(ds.meta.examples, 18);
}
