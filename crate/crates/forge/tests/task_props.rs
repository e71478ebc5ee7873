use patchlab_core::SyntheticVocab;
use patchlab_forge::task::classify;
use patchlab_forge::{make_dataset, Format, LabelRule, OperandPair, Outcome, TaskSpec};
use proptest::prelude::*;

fn digits(min: usize, max: usize) -> impl Strategy<Value = String> {
    proptest::collection::vec(0u8..10, min..=max)
        .prop_map(|v| v.into_iter().map(|d| char::from(b'0' + d)).collect())
}

prop_compose! {
    fn pair()(i in digits(1, 2), f1 in digits(1, 3), j in digits(1, 2), f2 in digits(1, 3))
        -> (String, String) {
        (format!("{i}.{f1}"), format!("{j}.{f2}"))
    }
}

proptest! {
    #[test]
    fn labels_follow_their_rules((a, b) in pair()) {
        let Ok(p) = OperandPair::parse(&a, &b) else { return Ok(()); };
        let (fa, fb): (f64, f64) = (a.parse().unwrap(), b.parse().unwrap());
        let larger = if fa > fb { &a } else { &b };
        let longer = if a.len() - a.find('.').unwrap() > b.len() - b.find('.').unwrap() { &a } else { &b };
        prop_assert_eq!(&p.answer(LabelRule::CorrectByValue).to_string(), larger);
        prop_assert_eq!(&p.answer(LabelRule::BuggyByFractionLength).to_string(), longer);
        prop_assert_eq!(p.rules_disagree(), larger != longer);
        prop_assert_eq!(classify(&p, larger), Outcome::Correct);
    }

    #[test]
    fn renders_are_injective_and_round_trip((a, b) in pair()) {
        let Ok(p) = OperandPair::parse(&a, &b) else { return Ok(()); };
        let v = SyntheticVocab::new();
        let r: Vec<String> = Format::ALL.iter().map(|f| f.render(&p)).collect();
        prop_assert!(r[0] != r[1] && r[1] != r[2] && r[0] != r[2]);
        for s in &r {
            prop_assert_eq!(&v.detokenize(&v.tokenize(s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn dataset_is_a_pure_function_of_spec(seed in 0u64..1000) {
        let v = SyntheticVocab::new();
        let spec = TaskSpec {
            pairs: patchlab_forge::task::default_pairs().into_iter().step_by(401).collect(),
            split_seed: seed,
            ..TaskSpec::default()
        };
        let a = make_dataset(&spec, &v).unwrap();
        let b = make_dataset(&spec, &v).unwrap();
        prop_assert_eq!(a.train, b.train);
        prop_assert_eq!(a.held_out, b.held_out);
    }
}
