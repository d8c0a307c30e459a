//! Property-based tests for the serialization format and the windowing
//! arithmetic.

use proptest::prelude::*;

use melada::data::{parse_dataset, serialize_dataset, Domain, Provenance, SequenceSample};
use melada::signal::{make_sequences, FeatureFrame};

fn arb_domain() -> impl Strategy<Value = Domain> {
    (1usize..4, 1usize..4, 1usize..3, 0u32..50).prop_flat_map(
        |(seq_len, feat_dim, n_classes, subject_id)| {
            let sample = (
                proptest::collection::vec(-1e6f64..1e6, seq_len * feat_dim),
                0u8..(n_classes as u8),
            )
                .prop_map(|(frames, label)| SequenceSample { frames, label });
            proptest::collection::vec(sample, 0..6).prop_map(move |samples| Domain {
                subject_id,
                seq_len,
                feat_dim,
                n_classes,
                samples,
                provenance: Provenance::Synthetic,
            })
        },
    )
}

proptest! {
    #[test]
    fn meld_roundtrip(domains in proptest::collection::vec(arb_domain(), 1..4)) {
        let bytes = serialize_dataset(&domains);
        let parsed = parse_dataset(&bytes).unwrap();
        prop_assert_eq!(parsed, domains);
    }

    #[test]
    fn meld_rejects_any_truncation(domains in proptest::collection::vec(arb_domain(), 1..3),
                                   cut in 0usize..100) {
        let bytes = serialize_dataset(&domains);
        let cut = cut % bytes.len();
        if cut > 0 {
            prop_assert!(parse_dataset(&bytes[..bytes.len() - cut]).is_err());
        }
    }

    #[test]
    fn window_count_and_content(n in 0usize..80, step in 1usize..20, dim in 1usize..4) {
        prop_assume!(step >= 2);
        let stride = step - 1;
        let frames: Vec<FeatureFrame> = (0..n)
            .map(|i| FeatureFrame {
                values: (0..dim).map(|d| (i * dim + d) as f64).collect(),
                timestamp_s: i as f64,
            })
            .collect();
        let windows = make_sequences(&frames, step, stride).unwrap();
        let expected = if n < step { 0 } else { (n - step) / stride + 1 };
        prop_assert_eq!(windows.len(), expected);
        for (k, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.len(), step * dim);
            for j in 0..step {
                let src = &frames[k * stride + j].values;
                prop_assert_eq!(&w[j * dim..(j + 1) * dim], &src[..]);
            }
        }
    }
}
