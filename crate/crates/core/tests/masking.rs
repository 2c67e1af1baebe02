// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use seqattrib::{FeatureGroup, Instance, Mask, Span};

const MASK: &str = "<m>";

/// Random instance: features are disjoint runs of tokens, with free tokens
/// between some of them.
fn arb_instance() -> impl Strategy<Value = Instance> {
    prop::collection::vec((1usize..4, 0usize..2), 1..8).prop_map(|runs| {
        let mut tokens = Vec::new();
        let mut features = Vec::new();
        for (f, (len, gap)) in runs.into_iter().enumerate() {
            for _ in 0..gap {
                tokens.push("|".to_string());
            }
            let start = tokens.len();
            for k in 0..len {
                tokens.push(format!("t{f}_{k}"));
            }
            features.push(FeatureGroup::new(format!("f{f}"), vec![Span(start, tokens.len())]));
        }
        Instance::new(tokens, features, vec!["y".into()]).unwrap()
    })
}

fn arb_case() -> impl Strategy<Value = (Instance, Mask, Mask)> {
    arb_instance().prop_flat_map(|inst| {
        let d = inst.num_features();
        (
            Just(inst),
            prop::collection::vec(any::<bool>(), d).prop_map(Mask::from_bits),
            prop::collection::vec(any::<bool>(), d).prop_map(Mask::from_bits),
        )
    })
}

proptest! {
    #[test]
    fn masking_is_idempotent((inst, m, _) in arb_case()) {
        let once = inst.apply_mask(&m, MASK).unwrap();
        let again = Instance::new(once.clone(), inst.features().to_vec(), vec!["y".into()]).unwrap();
        prop_assert_eq!(again.apply_mask(&m, MASK).unwrap(), once);
    }

    #[test]
    fn masking_is_monotone((inst, a, b) in arb_case()) {
        // a ∧ b keeps a subset of what a keeps
        let both = Mask::from_bits(a.iter().zip(b.iter()).map(|(x, y)| x && y).collect());
        let wide = inst.apply_mask(&a, MASK).unwrap();
        let narrow = inst.apply_mask(&both, MASK).unwrap();
        prop_assert_eq!(wide.len(), narrow.len());
        for (w, n) in wide.iter().zip(&narrow) {
            prop_assert!(n == w || n == MASK);
        }
    }

    #[test]
    fn full_mask_is_identity_and_empty_hides_every_feature(inst in arb_instance()) {
        let d = inst.num_features();
        prop_assert_eq!(inst.apply_mask(&Mask::full(d), MASK).unwrap(), inst.input_tokens().to_vec());
        let hidden = inst.apply_mask(&Mask::empty(d), MASK).unwrap();
        for (tok, orig) in hidden.iter().zip(inst.input_tokens()) {
            prop_assert!(tok == MASK || orig == "|");
        }
    }

    #[test]
    fn json_roundtrip_preserves_digest(inst in arb_instance()) {
        let back = Instance::from_json_str(&inst.to_json_string()).unwrap();
        prop_assert_eq!(back.digest(), inst.digest());
        prop_assert_eq!(back, inst);
    }
}
