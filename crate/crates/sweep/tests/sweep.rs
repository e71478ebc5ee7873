use std::collections::BTreeSet;

use patchlab_core::intervention::NeuronId;
use patchlab_core::{ModelConfig, Transformer, Weights};
use patchlab_forge::{Format, OperandPair, Outcome, TaskSpec};
use patchlab_sweep::emit::{from_json, read_csv, report_csv, report_svg, to_json, OutputMeta};
use patchlab_sweep::spec::{default_alphas, default_lambdas, SUBSET_CAP};
use patchlab_sweep::*;
use proptest::prelude::*;

fn pairs(n: usize) -> Vec<OperandPair> {
    trial_pairs(&TaskSpec::default().pairs, n, 1)
}

fn cx(pairs: &[OperandPair]) -> SweepContext<'_> {
    SweepContext {
        pairs,
        roles: Roles::default(),
        level: 0.95,
        seed: 42,
    }
}

fn meta() -> OutputMeta {
    OutputMeta::new(&serde_json::json!({"k": 1}), "abc", 42)
}

#[test]
fn trial_pairs_are_disagreeing_sorted_and_seeded() {
    let pool = TaskSpec::default().pairs;
    let a = trial_pairs(&pool, 20, 3);
    assert_eq!(a.len(), 20);
    assert!(a.iter().all(|p| p.rules_disagree()));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a, trial_pairs(&pool, 20, 3));
    assert_ne!(a, trial_pairs(&pool, 20, 4));
}

#[test]
fn mock_head_threshold_is_recovered_exactly() {
    let mock = MockSubject::default();
    let p = pairs(10);
    let r =
        run_head_subset_sweep(&mock, &cx(&p), 3, Parity::Even, 1, None, SUBSET_CAP, 1.0).unwrap();
    assert_eq!(r.points.len(), 4);
    assert_eq!(r.step, Some(4.0));
    let rates: Vec<f64> = r.points.iter().map(|p| p.rate.unwrap()).collect();
    assert_eq!(rates, vec![0.0, 0.0, 0.0, 1.0]);
    // every subset of size k is present
    let sizes: Vec<usize> = r.points.iter().map(|p| p.subsets.len()).collect();
    assert_eq!(sizes, vec![4, 6, 4, 1]);
}

#[test]
fn mixed_parity_success_depends_on_good_head_count_only() {
    let mock = MockSubject::default();
    let p = pairs(3);
    let r = run_head_subset_sweep(
        &mock,
        &cx(&p),
        3,
        Parity::Mixed,
        3,
        Some(6),
        SUBSET_CAP,
        1.0,
    )
    .unwrap();
    for point in &r.points {
        for s in &point.subsets {
            let good = s.heads.iter().filter(|h| *h % 2 == 0).count();
            let want = if good >= 4 { 3 } else { 0 };
            assert_eq!(s.tally.correct, want, "{:?}", s.heads);
        }
    }
    let odd =
        run_head_subset_sweep(&mock, &cx(&p), 3, Parity::Odd, 1, None, SUBSET_CAP, 1.0).unwrap();
    assert!(odd.points.iter().all(|p| p.successes == 0));
    assert_eq!(odd.step, None);
}

#[test]
fn subset_cap_samples_deterministically() {
    let mock = MockSubject {
        n_heads: 16,
        ..Default::default()
    };
    let p = pairs(1);
    let run =
        || run_head_subset_sweep(&mock, &cx(&p), 3, Parity::Mixed, 8, Some(8), 50, 1.0).unwrap();
    let a = run();
    assert_eq!(a.points[0].subsets.len(), 50);
    assert!(a.points[0].note.is_some());
    let distinct: BTreeSet<_> = a.points[0]
        .subsets
        .iter()
        .map(|s| s.heads.clone())
        .collect();
    assert_eq!(distinct.len(), 50);
    assert_eq!(a, run());
}

#[test]
fn mock_lambda_threshold_is_recovered_exactly() {
    let mock = MockSubject::default();
    let p = pairs(8);
    let r = run_fraction_sweep(
        &mock,
        &cx(&p),
        3,
        &[0, 2, 4, 6],
        &default_lambdas(),
        BlendMode::Convex,
    )
    .unwrap();
    assert_eq!(r.points.len(), 11);
    assert_eq!(r.step, Some(0.6));
    assert_eq!(r.points[5].successes, 0);
    assert_eq!(r.points[6].successes, 8);
}

#[test]
fn mock_layer_band_and_alpha_step() {
    let mock = MockSubject {
        causal_neurons: [NeuronId { layer: 5, index: 2 }].into(),
        ..Default::default()
    };
    let p = pairs(6);
    let r = run_layer_sweep(
        &mock,
        &cx(&p),
        &[0, 1, 2, 3, 4, 5, 6, 7],
        PatchSite::Pattern,
        &[0, 2, 4, 6],
    )
    .unwrap();
    assert_eq!(r.bands(), vec![(3.0, 3.0)]);

    let neurons = [
        NeuronId { layer: 5, index: 2 },
        NeuronId { layer: 5, index: 3 },
    ];
    let a = run_alpha_sweep(&mock, &cx(&p), &neurons, &default_alphas()).unwrap();
    assert_eq!(a.points.len(), 21);
    assert_eq!(a.step, Some(-1.0));
}

#[test]
fn empty_neuron_set_is_baseline() {
    let mock = MockSubject::default();
    let p = pairs(5);
    let a = run_alpha_sweep(&mock, &cx(&p), &[], &default_alphas()).unwrap();
    assert!(a
        .points
        .iter()
        .all(|pt| pt.tally.bug == 5 && pt.successes == 0));
    assert_eq!(a.step, None);
}

#[test]
fn bidirectional_on_mock() {
    let mock = MockSubject::default();
    let p = pairs(7);
    let r = run_bidirectional(&mock, &cx(&p), 3, &[0, 2, 4, 6], 1.0, PatchSite::Pattern).unwrap();
    for label in [
        "forward",
        "reverse",
        "baseline_bug_format",
        "baseline_good_format",
    ] {
        assert_eq!(r.point(label).unwrap().rate, Some(1.0), "{label}");
    }
    let wrong =
        run_bidirectional(&mock, &cx(&p), 2, &[0, 2, 4, 6], 1.0, PatchSite::Pattern).unwrap();
    assert_eq!(wrong.point("forward").unwrap().rate, Some(0.0));
}

#[test]
fn generalization_marks_absent_bug_na() {
    struct OnlyDisagreeing(MockSubject);
    impl Subject for OnlyDisagreeing {
        fn digest(&self) -> String {
            "partial".into()
        }
        fn n_layers(&self) -> usize {
            self.0.n_layers
        }
        fn n_heads(&self) -> usize {
            self.0.n_heads
        }
        fn d_mlp(&self) -> usize {
            self.0.d_mlp
        }
        fn run(
            &self,
            pair: &OperandPair,
            target: Format,
            iv: &Intervention,
        ) -> patchlab_sweep::Result<Outcome> {
            if pair.rules_disagree() {
                self.0.run(pair, target, iv)
            } else {
                Ok(Outcome::Correct)
            }
        }
    }
    let s = OnlyDisagreeing(MockSubject::default());
    let list = [
        ("9.8", "9.11"),
        ("9.11", "9.8"),
        ("3.9", "3.45"),
        ("2.1", "2.15"),
        ("7.6", "7.52"),
    ]
    .map(|(a, b)| OperandPair::parse(a, b).unwrap());
    let r = run_pair_generalization(&s, &cx(&[]), &list, 3, &[0, 2, 4, 6]).unwrap();
    assert_eq!(generalization_summary(&r), (4, 4));
    let na = &r.points[3];
    assert_eq!(na.trials, 0);
    assert_eq!(na.note.as_deref(), Some("n/a: bug absent"));
}

#[test]
fn specs_dispatch_and_reject_bad_addresses() {
    let mock = MockSubject::default();
    let pool = TaskSpec::default().pairs;
    let mut spec = SweepSpec::new(Protocol::FractionSweep {
        layer: 3,
        heads: vec![0, 2, 4, 6],
        lambdas: default_lambdas(),
        mode: BlendMode::Convex,
    });
    spec.trials = 4;
    let r = run_sweep(&mock, &spec, &pool).unwrap();
    assert_eq!(r.step, Some(0.6));
    assert!(r.points.iter().all(|p| p.trials == 4));

    spec.protocol = Protocol::Bidirectional {
        layer: 8,
        heads: vec![0],
        lambda: 1.0,
        site: PatchSite::Pattern,
    };
    assert!(run_sweep(&mock, &spec, &pool).is_err());
    spec.protocol = Protocol::AlphaSweep {
        neurons: vec![NeuronId {
            layer: 0,
            index: 16,
        }],
        alphas: vec![0.0],
    };
    assert!(run_sweep(&mock, &spec, &pool).is_err());
    spec.protocol = Protocol::RandomControl {
        layers: 4..8,
        n_neurons: 8,
        alphas: default_alphas(),
    };
    let r = run_sweep(&mock, &spec, &pool).unwrap();
    assert_eq!(r.protocol, "random_control");
    assert_eq!(r.parameters["neurons"].as_array().unwrap().len(), 8);
}

#[test]
fn emitted_outputs_round_trip_and_are_deterministic() {
    let mock = MockSubject::default();
    let p = pairs(4);
    let r = run_fraction_sweep(
        &mock,
        &cx(&p),
        3,
        &[0, 2, 4, 6],
        &default_lambdas(),
        BlendMode::Convex,
    )
    .unwrap();
    let config = serde_json::json!({"k": 1});
    let m = meta();

    let json = to_json(&m, &config, &r).unwrap();
    assert_eq!(json, to_json(&m, &config, &r).unwrap());
    let back = from_json::<SweepReport>(&json).unwrap();
    assert_eq!(back.result, r);
    assert_eq!(back.meta, m);

    let csv = report_csv(&m, &r).unwrap();
    assert!(csv.starts_with("# tool=patchlab version="));
    assert!(csv.contains("checkpoint_digest=abc seed=42"));
    let rows = read_csv(&csv).unwrap();
    assert_eq!(rows.len(), r.points.len());
    assert_eq!(&rows[6][1], "0.6");
    assert_eq!(&rows[6][2], "correct");

    let svg = report_svg(&m, &r);
    assert_eq!(svg, report_svg(&m, &r));
    assert!(svg.contains(&format!("config_digest={}", m.config_digest)));
    assert!(svg.contains("step at 0.6"));

    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(dir.path(), "fraction", &m, &config, &r).unwrap();
    assert_eq!(files.len(), 3);
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), json);
}

#[test]
fn svg_curve_has_one_rising_edge_at_threshold() {
    let mock = MockSubject::default();
    let p = pairs(2);
    let r = run_fraction_sweep(
        &mock,
        &cx(&p),
        3,
        &[0, 2, 4, 6],
        &default_lambdas(),
        BlendMode::Convex,
    )
    .unwrap();
    let svg = report_svg(&meta(), &r);
    let path = svg.lines().find(|l| l.contains(r#"class="rate""#)).unwrap();
    let d = path
        .split("d=\"")
        .nth(1)
        .unwrap()
        .split('"')
        .next()
        .unwrap();
    let mut x = 0.0;
    let mut y: f64 = d[1..]
        .split(' ')
        .next()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let mut edges = Vec::new();
    for cmd in d.split(' ').skip(1) {
        let v: f64 = cmd[1..].parse().unwrap();
        match &cmd[..1] {
            "H" => x = v,
            "V" => {
                if v != y {
                    edges.push(x);
                }
                y = v;
            }
            _ => unreachable!(),
        }
    }
    // plot spans x 60..540 for lambda 0..1
    assert_eq!(edges, vec![60.0 + 0.6 * 480.0]);
}

fn small_model() -> ModelSubject {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: 20,
        max_seq: 24,
        norm_eps: 1e-5,
    };
    let w = Weights::<f32>::init(&cfg, 5).unwrap();
    ModelSubject::from_model(Transformer::new(cfg, w).unwrap(), "small".into())
}

#[test]
fn model_subject_identities() {
    let s = small_model();
    let pair = OperandPair::parse("9.8", "9.11").unwrap();
    let base = s.answer(&pair, Format::Qa, &Intervention::None).unwrap();
    let zero = Intervention::Transplant(Transplant {
        source: Format::Simple,
        layer: 1,
        site: PatchSite::ResidPost,
        heads: vec![],
        lambda: 0.0,
        mode: BlendMode::Convex,
    });
    assert_eq!(s.answer(&pair, Format::Qa, &zero).unwrap(), base);
    let own = Intervention::Transplant(Transplant {
        source: Format::Qa,
        layer: 0,
        site: PatchSite::Pattern,
        heads: vec![0, 1],
        lambda: 1.0,
        mode: BlendMode::Convex,
    });
    assert_eq!(s.answer(&pair, Format::Qa, &own).unwrap(), base);
    let empty = Intervention::Ablate {
        neurons: vec![],
        alpha: -3.0,
    };
    assert!(s.plan(&pair, Format::Qa, &empty).unwrap().is_none());
    let steer0 = Intervention::Steer {
        neurons: vec![NeuronId { layer: 1, index: 3 }],
        source: Format::Simple,
        alpha: 0.0,
    };
    assert_eq!(s.answer(&pair, Format::Qa, &steer0).unwrap(), base);
}

#[test]
fn controls_run_on_a_model() {
    use patchlab_sweep::controls::*;
    let s = small_model();
    let p = pairs(3);
    let scores = mean_differential_scores(&s, &p, Roles::default(), 0..2).unwrap();
    assert_eq!(scores.len(), 64);
    assert!(scores.windows(2).all(|w| w[0].score >= w[1].score));
    let h = hijacker_neurons(&s, &p, Roles::default(), 0..2, 8).unwrap();
    assert!(h.len() <= 8);
    let spec = specificity_control(&s, &h, &p, Roles::default(), CONTROL_PROMPT).unwrap();
    assert!(spec.control_mean_abs.is_finite() && spec.bug_mean_abs >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_are_conserved(threshold in 1usize..5, lt in 0u32..11, n in 1usize..6) {
        let mock = MockSubject { head_threshold: threshold, lambda_threshold: lt as f64 / 10.0, ..Default::default() };
        let p = pairs(n);
        let r = run_fraction_sweep(&mock, &cx(&p), 3, &[0, 2, 4, 6], &default_lambdas(), BlendMode::Convex).unwrap();
        for pt in &r.points {
            prop_assert_eq!(pt.tally.trials(), n as u64);
            prop_assert_eq!(pt.trials, n as u64);
            let ci = pt.ci.unwrap();
            prop_assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper);
        }
        let want = if lt == 0 { None } else { Some(lt as f64 / 10.0) };
        prop_assert_eq!(r.step, want);
    }
}
