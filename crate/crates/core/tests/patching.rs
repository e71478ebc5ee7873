use patchlab_core::intervention::{ablation_plan, NeuronId};
use patchlab_core::lens::{differential_scores, TokenPosition};
use patchlab_core::{
    capture, steering_plan, steering_vector, transplant_plan, ActivationAddress, ModelConfig,
    PatchMode, PatchPlan, PositionRule, Site, Trace, Transformer, Weights,
};
use patchlab_testkit as kit;
use proptest::prelude::*;
use rand::Rng;

type Model = Transformer<f32>;

fn toy(seed: u64) -> (ModelConfig, Model) {
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 8,
        d_head: 2,
        d_mlp: 6,
        vocab_size: 9,
        max_seq: 12,
        norm_eps: 1e-5,
    };
    let w = Weights::<f32>::init(&cfg, seed).unwrap();
    (cfg.clone(), Transformer::new(cfg, w).unwrap())
}

const VECTOR_SITES: [Site; 4] = [Site::ResidPre, Site::AttnOut, Site::MlpOut, Site::ResidPost];

fn site_values<'a>(t: &'a Trace<f32>, layer: usize, site: Site) -> &'a [f32] {
    let l = &t.layers[layer];
    match site {
        Site::ResidPre => l.resid_pre.data(),
        Site::AttnOut => l.attn_out.data(),
        Site::MlpOut => l.mlp_out.data(),
        Site::ResidPost => l.resid_post.data(),
        Site::AttnPattern => l.attn_pattern.data(),
        Site::MlpNeuron(_) => l.mlp_act.data(),
    }
}

#[test]
fn empty_plan_is_identity() {
    let (_, m) = toy(1);
    let tokens = [1, 2, 3, 4, 5];
    let a = m.forward_trace(&tokens).unwrap();
    let b = m.forward_patched(&tokens, &PatchPlan::new()).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn zero_blend_is_identity_for_any_source() {
    let (_, m) = toy(2);
    let target = [1, 2, 3, 4, 5, 6];
    let source = m.forward_trace(&[8, 7, 6, 5, 4, 3]).unwrap();
    let base = m.forward_trace(&target).unwrap();
    for layer in 0..3 {
        let plan = transplant_plan(&source, layer, &[0, 1, 2, 3], 0.0, PositionRule::All).unwrap();
        assert!(m.forward_patched(&target, &plan).unwrap().bit_eq(&base));
        for site in VECTOR_SITES {
            let src = capture(&source, &ActivationAddress::new(layer, site)).unwrap();
            let plan = PatchPlan::new().push(
                ActivationAddress::new(layer, site),
                PatchMode::Blend {
                    lambda: 0.0,
                    source: src,
                },
            );
            assert!(m.forward_patched(&target, &plan).unwrap().bit_eq(&base));
        }
    }
}

#[test]
fn self_patch_is_identity() {
    let (cfg, m) = toy(3);
    let tokens = [3, 1, 4, 1, 5, 0];
    let base = m.forward_trace(&tokens).unwrap();
    for layer in 0..cfg.n_layers {
        for site in VECTOR_SITES
            .into_iter()
            .chain([Site::AttnPattern, Site::MlpNeuron(2)])
        {
            let addr = ActivationAddress::new(layer, site);
            let src = capture(&base, &addr).unwrap();
            let plan = PatchPlan::new().push(addr, PatchMode::Replace { source: src });
            let t = m.forward_patched(&tokens, &plan).unwrap();
            assert!(t.bit_eq(&base), "layer {layer} site {site}");
        }
        let plan = transplant_plan(&base, layer, &[0, 1, 2, 3], 1.0, PositionRule::All).unwrap();
        assert!(m.forward_patched(&tokens, &plan).unwrap().bit_eq(&base));
    }
}

#[test]
fn capture_copies() {
    let (cfg, m) = toy(4);
    let t = m.forward_trace(&[1, 2, 3, 4]).unwrap();
    let s = capture(&t, &ActivationAddress::new(1, Site::ResidPost)).unwrap();
    assert_eq!(s.values.data(), t.layers[1].resid_post.data());
    assert_ne!(
        s.values.data().as_ptr(),
        t.layers[1].resid_post.data().as_ptr()
    );

    let p = capture(&t, &ActivationAddress::pattern(2, [1])).unwrap();
    assert_eq!(p.values.shape(), &[1, 4, 4]);
    for r in 0..4 {
        let sum: f32 = p.values.data()[r * 4..r * 4 + 4].iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
    let n = capture(&t, &ActivationAddress::new(0, Site::MlpNeuron(5))).unwrap();
    assert_eq!(n.values.shape(), &[4]);
    assert!(capture(&t, &ActivationAddress::new(cfg.n_layers, Site::AttnOut)).is_err());
    assert!(capture(&t, &ActivationAddress::new(0, Site::MlpNeuron(cfg.d_mlp))).is_err());
    assert!(capture(&t, &ActivationAddress::pattern(0, [cfg.n_heads])).is_err());
    assert!(capture(&t, &ActivationAddress::pattern(0, [])).is_err());
}

#[test]
fn shorter_source_leaves_later_positions_alone() {
    let (cfg, m) = toy(5);
    let target = [1, 2, 3, 4, 5, 6, 7];
    let base = m.forward_trace(&target).unwrap();
    let source = m.forward_trace(&[7, 6, 5]).unwrap();
    let s = source.seq_len();
    for layer in 0..cfg.n_layers {
        for site in VECTOR_SITES.into_iter().chain([Site::AttnPattern]) {
            let addr = ActivationAddress::new(layer, site);
            let plan = PatchPlan::new().push(
                addr.clone(),
                PatchMode::Replace {
                    source: capture(&source, &addr).unwrap(),
                },
            );
            let t = m.forward_patched(&target, &plan).unwrap();
            let (got, want) = (
                site_values(&t, layer, site),
                site_values(&base, layer, site),
            );
            let per_pos = want.len() / target.len();
            if site == Site::AttnPattern {
                for h in 0..cfg.n_heads {
                    for i in s..target.len() {
                        let r = (h * target.len() + i) * target.len();
                        assert_eq!(got[r..r + target.len()], want[r..r + target.len()]);
                    }
                }
            } else {
                assert_eq!(
                    got[s * per_pos..],
                    want[s * per_pos..],
                    "layer {layer} site {site}"
                );
                assert_ne!(got[..s * per_pos], want[..s * per_pos]);
            }
        }
    }
}

#[test]
fn pattern_transplant_matches_hand_mixed_oracle() {
    let mut rng = kit::rng(31);
    for _ in 0..20 {
        let mut cfg = kit::small_config(&mut rng, 1, 4);
        cfg.n_layers = 1;
        let w32 = kit::random_weights(&mut rng, &cfg).cast::<f32>();
        let w64: Weights<f64> = w32.cast();
        let len = rng.random_range(1..=3);
        let a: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size as u32))
            .collect();
        let b: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size as u32))
            .collect();
        let model = Transformer::new(cfg.clone(), w32).unwrap();
        let src = model.forward_trace(&a).unwrap();
        let heads: Vec<usize> = (0..cfg.n_heads).collect();
        let plan = transplant_plan(&src, 0, &heads, 1.0, PositionRule::All).unwrap();
        let patched = model.forward_patched(&b, &plan).unwrap();

        let pa = kit::attention_parts(&cfg, &w64, 0, &kit::embed(&cfg, &w64, &a));
        let pb = kit::attention_parts(&cfg, &w64, 0, &kit::embed(&cfg, &w64, &b));
        let want = kit::mix(&cfg, &w64, 0, &pa.probs, &pb.values).concat();
        let got: Vec<f64> = patched.layers[0]
            .attn_out
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        assert!(kit::max_abs_diff(&got, &want) <= 1e-5);
    }
}

#[test]
fn split_head_sets_equal_their_union() {
    let (_, m) = toy(6);
    let target = [1, 2, 3, 4, 5];
    let source = m.forward_trace(&[5, 3, 1, 2, 2]).unwrap();
    let split = transplant_plan(&source, 1, &[0, 2], 0.5, PositionRule::All)
        .unwrap()
        .extend(transplant_plan(&source, 1, &[1, 3], 0.5, PositionRule::All).unwrap());
    let union = transplant_plan(&source, 1, &[0, 1, 2, 3], 0.5, PositionRule::All).unwrap();
    let a = m.forward_patched(&target, &split).unwrap();
    let b = m.forward_patched(&target, &union).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn validation_errors() {
    let (cfg, m) = toy(7);
    let t = m.forward_trace(&[1, 2, 3]).unwrap();
    let tokens = [1, 2, 3];
    let bad_lambda = transplant_plan(&t, 0, &[0], 1.5, PositionRule::All).unwrap();
    assert!(m.forward_patched(&tokens, &bad_lambda).is_err());
    let overlap = transplant_plan(&t, 0, &[0, 1], 1.0, PositionRule::All)
        .unwrap()
        .extend(transplant_plan(&t, 0, &[1, 2], 1.0, PositionRule::All).unwrap());
    assert!(m.forward_patched(&tokens, &overlap).is_err());
    let scalar_on_pattern = PatchPlan::new().push(
        ActivationAddress::pattern(0, [0]),
        PatchMode::SetScalar { alpha: 0.0 },
    );
    assert!(m.forward_patched(&tokens, &scalar_on_pattern).is_err());
    let short_vector = steering_plan(
        ActivationAddress::new(0, Site::ResidPost),
        vec![1.0f32; 3],
        1.0,
    );
    assert!(m.forward_patched(&tokens, &short_vector).is_err());
    let wrong_site = PatchPlan::new().push(
        ActivationAddress::new(0, Site::AttnOut),
        PatchMode::Replace {
            source: capture(&t, &ActivationAddress::new(0, Site::MlpNeuron(1))).unwrap(),
        },
    );
    assert!(m.forward_patched(&tokens, &wrong_site).is_err());
    let bad_layer = ablation_plan::<f32>(
        &[NeuronId {
            layer: cfg.n_layers,
            index: 0,
        }],
        0.0,
        PositionRule::All,
    );
    assert!(m.forward_patched(&tokens, &bad_layer).is_err());
}

#[test]
fn ablation_at_natural_value_is_a_fixed_point() {
    let (cfg, m) = toy(8);
    let tokens = [2, 4, 6, 8];
    let base = m.forward_trace(&tokens).unwrap();
    for layer in 0..cfg.n_layers {
        for pos in 0..tokens.len() {
            let natural = base.layers[layer].mlp_act.row(pos)[3] as f64;
            let plan = ablation_plan(
                &[NeuronId { layer, index: 3 }],
                natural,
                PositionRule::At { pos },
            );
            let t = m.forward_patched(&tokens, &plan).unwrap();
            let diff = t.logits.max_abs_diff(&base.logits).unwrap();
            assert!(diff <= 1e-5);
        }
    }
}

#[test]
fn zero_ablation_removes_the_neuron() {
    let (cfg, m) = toy(9);
    let tokens = [1, 3, 5];
    let plan = ablation_plan(&[NeuronId { layer: 1, index: 2 }], 0.0, PositionRule::All);
    let t = m.forward_patched(&tokens, &plan).unwrap();
    assert!(t.layers[1]
        .mlp_act
        .data()
        .iter()
        .skip(2)
        .step_by(cfg.d_mlp)
        .all(|&v| v == 0.0));
    let mut w = m.weights().clone();
    w.layers[1].w_out.row_mut(2).fill(0.0);
    let pruned = Transformer::new(cfg, w)
        .unwrap()
        .forward_trace(&tokens)
        .unwrap();
    assert!(
        t.layers[1]
            .mlp_out
            .max_abs_diff(&pruned.layers[1].mlp_out)
            .unwrap()
            <= 1e-6
    );
    assert!(t.logits.max_abs_diff(&pruned.logits).unwrap() <= 1e-5);
}

#[test]
fn steering_identities() {
    let (_, m) = toy(10);
    let tokens = [1, 2, 3, 4];
    let base = m.forward_trace(&tokens).unwrap();
    let addr = ActivationAddress::new(1, Site::ResidPost);
    let v = steering_vector(&base, &base, &addr, 3, 3).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
    for alpha in [-3.0, 0.5, 4.0] {
        let plan = steering_plan(addr.clone(), v.clone(), alpha);
        assert!(m.forward_patched(&tokens, &plan).unwrap().bit_eq(&base));
    }
    let other = m.forward_trace(&[4, 3, 2, 1]).unwrap();
    let v = steering_vector(&other, &base, &addr, 3, 3).unwrap();
    assert!(v.iter().any(|&x| x != 0.0));
    let zero = steering_plan(
        addr.clone().with_positions(PositionRule::At { pos: 3 }),
        v.clone(),
        0.0,
    );
    assert!(m.forward_patched(&tokens, &zero).unwrap().bit_eq(&base));
    // alpha = 1 at the final position moves it exactly onto the good run there
    let one = steering_plan(addr.with_positions(PositionRule::At { pos: 3 }), v, 1.0);
    let t = m.forward_patched(&tokens, &one).unwrap();
    for (a, b) in t.layers[1]
        .resid_post
        .row(3)
        .iter()
        .zip(other.layers[1].resid_post.row(3))
    {
        assert!((a - b).abs() <= 1e-6);
    }
}

fn with_neuron(mut t: Trace<f32>, layer: usize, index: usize, value: f32) -> Trace<f32> {
    let m = t.config.d_mlp;
    let last = t.last_position();
    t.layers[layer].mlp_act.data_mut()[last * m + index] = value;
    t
}

#[test]
fn steering_and_differential_score_on_one_neuron() {
    let (_, m) = toy(11);
    let base = m.forward_trace(&[1, 2, 3]).unwrap();
    let good = with_neuron(base.clone(), 2, 4, 0.12);
    let bad = with_neuron(base, 2, 4, 0.18);
    let v = steering_vector(
        &good,
        &bad,
        &ActivationAddress::new(2, Site::MlpNeuron(4)),
        2,
        2,
    )
    .unwrap();
    assert_eq!(v.len(), 1);
    assert!((v[0] as f64 + 0.06).abs() < 1e-6);
    let scores = differential_scores(&bad, &good, 2..3, TokenPosition::Last).unwrap();
    assert_eq!(scores[0].neuron, NeuronId { layer: 2, index: 4 });
    assert!((scores[0].score - 0.06).abs() < 1e-6);
    assert!(scores[1..].iter().all(|s| s.score == 0.0));
}

// --- property suite over random plans -----------------------------------

#[derive(Debug, Clone)]
enum Kind {
    ZeroBlend,
    SelfReplace,
    Blend(f64),
    Ablate(f64),
    Steer(f64),
}

fn plan_strategy() -> impl Strategy<Value = (u64, Vec<(usize, u8, Kind)>)> {
    let kind = prop_oneof![
        Just(Kind::ZeroBlend),
        Just(Kind::SelfReplace),
        (0.0..=1.0f64).prop_map(Kind::Blend),
        (-3.0..3.0f64).prop_map(Kind::Ablate),
        (-2.0..2.0f64).prop_map(Kind::Steer),
    ];
    (
        any::<u64>(),
        proptest::collection::vec((0..3usize, 0..6u8, kind), 1..4),
    )
}

/// Build a plan with at most one directive per (layer, site).
fn build(
    base: &Trace<f32>,
    other: &Trace<f32>,
    spec: &[(usize, u8, Kind)],
) -> (PatchPlan<f32>, bool) {
    let mut plan = PatchPlan::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut identity = true;
    for (layer, site_ix, kind) in spec {
        let site = match site_ix {
            0 => Site::ResidPre,
            1 => Site::AttnPattern,
            2 => Site::AttnOut,
            3 => Site::MlpOut,
            4 => Site::ResidPost,
            _ => Site::MlpNeuron(1),
        };
        if !seen.insert((*layer, site)) {
            continue;
        }
        let addr = ActivationAddress::new(*layer, site);
        let mode = match kind {
            Kind::ZeroBlend => PatchMode::Blend {
                lambda: 0.0,
                source: capture(other, &addr).unwrap(),
            },
            Kind::SelfReplace => PatchMode::Replace {
                source: capture(base, &addr).unwrap(),
            },
            Kind::Blend(l) => {
                identity = false;
                PatchMode::Blend {
                    lambda: *l,
                    source: capture(other, &addr).unwrap(),
                }
            }
            Kind::Ablate(a) if matches!(site, Site::MlpNeuron(_)) => {
                identity = false;
                PatchMode::SetScalar { alpha: *a }
            }
            Kind::Steer(a) if !matches!(site, Site::AttnPattern | Site::MlpNeuron(_)) => {
                identity = false;
                PatchMode::AddScaled {
                    alpha: *a,
                    vector: vec![0.25; base.config.d_model],
                }
            }
            _ => PatchMode::Replace {
                source: capture(base, &addr).unwrap(),
            },
        };
        plan = plan.push(addr, mode);
    }
    (plan, identity)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_plans_respect_patch_invariants((seed, spec) in plan_strategy()) {
        let (_, m) = toy(seed % 5);
        let mut rng = kit::rng(seed);
        let len = rng.random_range(2..8);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..9)).collect();
        let other_tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..9)).collect();
        let base = m.forward_trace(&tokens).unwrap();
        let other = m.forward_trace(&other_tokens).unwrap();
        let (plan, identity) = build(&base, &other, &spec);
        let t = m.forward_patched(&tokens, &plan).unwrap();

        if identity {
            prop_assert!(t.bit_eq(&base));
        }
        let (worst, negative) = t.pattern_violations();
        prop_assert!(worst <= 1e-5 && !negative);
        let first = plan.earliest_layer().unwrap();
        prop_assert_eq!(t.embed.data(), base.embed.data());
        for l in 0..first {
            prop_assert_eq!(&t.layers[l], &base.layers[l]);
        }

        // reversing directive order changes nothing
        let mut reversed = plan.clone();
        reversed.directives.reverse();
        prop_assert!(m.forward_patched(&tokens, &reversed).unwrap().bit_eq(&t));
    }
}
