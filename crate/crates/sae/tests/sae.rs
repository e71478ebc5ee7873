use patchlab_core::io::ActivationDataset;
use patchlab_core::{ModelConfig, Site, Tensor, Transformer, Weights};
use patchlab_sae::synthetic::planted_dictionary;
use patchlab_sae::{
    feature_head_correlation, feature_overlap, feature_report, relative_error, train_rows,
    train_sae, ActivationSource, SaeConfig, SaeError, SaeModel,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn planted_config(k: usize) -> SaeConfig {
    SaeConfig {
        input_dim: 16,
        expansion: 2,
        k,
        steps: 1500,
        learning_rate: 3e-3,
        batch_size: 32,
        seed: 11,
        eval_every: 100,
        ..Default::default()
    }
}

fn split_rows(rows: &Tensor<f32>, at: usize) -> (Tensor<f32>, Tensor<f32>) {
    let d = rows.shape()[1];
    let n = rows.shape()[0];
    let a = Tensor::new(vec![at, d], rows.data()[..at * d].to_vec()).unwrap();
    let b = Tensor::new(vec![n - at, d], rows.data()[at * d..].to_vec()).unwrap();
    (a, b)
}

#[test]
fn recovers_planted_dictionary() {
    let data = planted_dictionary(16, 4, 4000, 2, 5).unwrap();
    let (train, held) = split_rows(&data.rows, 3500);
    let sae = train_rows(&train, &planted_config(4), None).unwrap();
    let train_err = relative_error(&sae, &train).unwrap();
    let held_err = relative_error(&sae, &held).unwrap();
    assert!(train_err < 0.05, "train relative error {train_err}");
    assert!(
        held_err <= 2.0 * train_err.max(1e-9),
        "held {held_err} vs train {train_err}"
    );
    assert!(sae.decoder_norm_defect() <= 1e-4);
    assert!(
        sae.provenance.eval_non_increasing(0.05),
        "{:?}",
        sae.provenance.eval
    );

    // reconstructions on the training distribution track the recorded eval MSE
    let last = sae.provenance.final_eval().unwrap();
    let d = 16.0;
    let mse: f64 = (0..train.shape()[0])
        .map(|i| {
            let x = train.row(i);
            let xh = sae.reconstruct(x).unwrap();
            x.iter()
                .zip(&xh)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (train.shape()[0] as f64 * d);
    assert!(
        mse <= last.mse * 1.10 + 1e-9,
        "train mse {mse}, eval {}",
        last.mse
    );
}

#[test]
fn full_k_is_at_least_as_good_as_smaller_k() {
    let data = planted_dictionary(8, 6, 1500, 3, 9).unwrap();
    let mut cfg = planted_config(1);
    cfg.input_dim = 8;
    cfg.expansion = 1;
    cfg.steps = 600;
    let errs: Vec<f64> = [1, 3, 8]
        .into_iter()
        .map(|k| {
            cfg.k = k;
            let sae = train_rows(&data.rows, &cfg, None).unwrap();
            relative_error(&sae, &data.rows).unwrap()
        })
        .collect();
    assert!(
        errs[2] <= errs[1] + 1e-3 && errs[2] <= errs[0] + 1e-3,
        "{errs:?}"
    );
}

#[test]
fn same_seed_is_bit_identical() {
    let data = planted_dictionary(8, 4, 600, 2, 1).unwrap();
    let mut cfg = planted_config(2);
    cfg.input_dim = 8;
    cfg.steps = 200;
    let a = train_rows(&data.rows, &cfg, None).unwrap();
    let b = train_rows(&data.rows, &cfg, None).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    cfg.seed += 1;
    let c = train_rows(&data.rows, &cfg, None).unwrap();
    assert_ne!(a.w_dec, c.w_dec);
}

#[test]
fn persistence_round_trip() {
    let data = planted_dictionary(8, 4, 300, 2, 2).unwrap();
    let ds = ActivationDataset {
        layer: 3,
        site: Site::ResidPost,
        positions: "last".into(),
        meta: Default::default(),
        rows: data.rows,
    };
    let mut cfg = planted_config(2);
    cfg.input_dim = 8;
    cfg.steps = 50;
    let sae = train_sae(&ds, &cfg).unwrap();
    assert_eq!(
        sae.provenance.source,
        Some(ActivationSource {
            layer: 3,
            site: "resid_post".into()
        })
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sae");
    sae.save(&path).unwrap();
    assert_eq!(SaeModel::load(&path).unwrap(), sae);
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    assert!(SaeModel::from_bytes(&bytes).is_err());
}

#[test]
fn rejects_bad_inputs() {
    let data = planted_dictionary(8, 4, 100, 2, 2).unwrap();
    let cfg = planted_config(2); // input_dim 16
    assert!(matches!(
        train_rows(&data.rows, &cfg, None),
        Err(SaeError::Dim {
            expected: 16,
            got: 8
        })
    ));
    let mut bad = cfg.clone();
    bad.k = 0;
    assert!(matches!(bad.validate(), Err(SaeError::Config(_))));
    bad.k = 33;
    assert!(bad.validate().is_err());
    bad.k = 2;
    bad.expansion = 0;
    assert!(bad.validate().is_err());
    let mut nan = data.rows.clone();
    nan.data_mut()[3] = f32::NAN;
    let mut c8 = cfg.clone();
    c8.input_dim = 8;
    assert!(train_rows(&nan, &c8, None).is_err());
    let sae = SaeModel::init(c8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(sae.encode(&[0.0; 7]), Err(SaeError::Dim { .. })));
}

#[test]
fn overlap_of_a_run_with_itself_is_one() {
    let data = planted_dictionary(8, 4, 200, 2, 3).unwrap();
    let other = planted_dictionary(8, 4, 200, 1, 4).unwrap();
    let cfg = SaeConfig {
        input_dim: 8,
        expansion: 4,
        k: 3,
        ..Default::default()
    };
    let sae = SaeModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(
        feature_overlap(&sae, &data.rows, &data.rows, 20).unwrap(),
        1.0
    );
    let ab = feature_overlap(&sae, &data.rows, &other.rows, 10).unwrap();
    let ba = feature_overlap(&sae, &other.rows, &data.rows, 10).unwrap();
    assert_eq!(ab, ba);
    assert!((0.0..=1.0).contains(&ab));
    assert!(feature_overlap(&sae, &data.rows, &data.rows, 33).is_err());

    let report = feature_report(&sae, &data.rows, &other.rows, 10).unwrap();
    assert_eq!(report.overlap, ab);
    assert!(report.features.iter().all(|f| f.top_wrong || f.top_correct));
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), report.features.len() + 1);
    assert!(csv.starts_with("feature,mean_wrong,mean_correct,ratio"));
}

/// Traces whose final-position residual carries a feature value that
/// tracks the even heads' output norms.
#[test]
fn feature_tracks_even_heads() {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 4,
        d_head: 1,
        d_mlp: 4,
        vocab_size: 5,
        max_seq: 6,
        norm_eps: 1e-5,
    };
    let model = Transformer::new(cfg.clone(), Weights::<f32>::init(&cfg, 3).unwrap()).unwrap();
    // identity dictionary: feature i reads coordinate i
    let sae_cfg = SaeConfig {
        input_dim: 4,
        expansion: 1,
        k: 1,
        ..Default::default()
    };
    let mut sae = SaeModel::init(sae_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let eye: Vec<f32> = (0..16)
        .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
        .collect();
    sae.w_enc = Tensor::new(vec![4, 4], eye.clone()).unwrap();
    sae.w_dec = Tensor::new(vec![4, 4], eye).unwrap();
    sae.provenance.source = Some(ActivationSource {
        layer: 0,
        site: "resid_post".into(),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let traces: Vec<_> = (0..30)
        .map(|i| {
            use rand::Rng;
            let mut t = model.forward_trace(&[1, 2, (i % 5) as u32]).unwrap();
            let strength: f32 = rng.random_range(1.0..5.0);
            let last = t.last_position();
            let row = t.layers[0].resid_post.row_mut(last);
            row.copy_from_slice(&[strength, 0.0, 0.0, 0.0]);
            let heads = t.layers[1].attn_head_out.as_mut().unwrap();
            let s = 3;
            for h in 0..4 {
                let v = if h % 2 == 0 {
                    0.5 * strength + rng.random_range(-0.05..0.05)
                } else {
                    rng.random_range(0.0..3.0)
                };
                heads.data_mut()[h * s + last] = v;
            }
            t
        })
        .collect();
    let rs = feature_head_correlation(&sae, &traces, 0, 1).unwrap();
    for c in &rs {
        let r = c.r.unwrap();
        if c.head % 2 == 0 {
            assert!(r > 0.9, "head {} r {r}", c.head);
        } else {
            assert!(r.abs() < 0.3, "head {} r {r}", c.head);
        }
    }
    // a feature that never fires is constant at zero
    let flat = feature_head_correlation(&sae, &traces, 3, 1).unwrap();
    assert!(flat.iter().all(|c| c.r.is_none()));
    assert!(feature_head_correlation(&sae, &traces[..2], 0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_keeps_exactly_k(
        seed in any::<u64>(),
        k in 1usize..=24,
        x in proptest::collection::vec(-4.0f32..4.0, 6),
    ) {
        let cfg = SaeConfig { input_dim: 6, expansion: 4, k, ..Default::default() };
        let sae = SaeModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let code = sae.encode(&x).unwrap();
        prop_assert_eq!(code.indices.len(), k);
        prop_assert!(code.indices.windows(2).all(|w| w[0] < w[1]));
        let pre = sae.pre_activations(&x).unwrap();
        let min_kept = code.values.iter().cloned().fold(f32::INFINITY, f32::min);
        for (i, &p) in pre.iter().enumerate() {
            if let Ok(pos) = code.indices.binary_search(&(i as u32)) {
                prop_assert_eq!(code.values[pos], p);
            } else {
                prop_assert!(p <= min_kept);
            }
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(
        a in proptest::collection::vec(0.0f64..1.0, 30),
        b in proptest::collection::vec(0.0f64..1.0, 30),
        n in 1usize..30,
    ) {
        use patchlab_sae::{set_overlap, top_features};
        let (ta, tb) = (top_features(&a, n), top_features(&b, n));
        let o = set_overlap(&ta, &tb, n);
        prop_assert_eq!(o, set_overlap(&tb, &ta, n));
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(set_overlap(&ta, &ta, n), 1.0);
    }
}

#[test]
fn silent_features_get_recycled_when_it_helps() {
    // many directions, few features: the residual keeps pointing somewhere new
    let data = planted_dictionary(32, 32, 3000, 1, 12).unwrap();
    let cfg = SaeConfig {
        input_dim: 32,
        expansion: 1,
        k: 1,
        steps: 1500,
        learning_rate: 1e-2,
        batch_size: 16,
        seed: 3,
        eval_every: 20,
        dead_after: 2,
        ..Default::default()
    };
    let sae = train_rows(&data.rows, &cfg, None).unwrap();
    assert!(sae.provenance.reinitialized > 0);
    assert!(sae.decoder_norm_defect() <= 1e-4);
}
