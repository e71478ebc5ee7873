use patchlab_core::io::{
    load_acts, load_checkpoint, load_trace, save_acts, save_checkpoint, save_trace,
    ActivationDataset, Checkpoint, Provenance, TRACE_MAGIC,
};
use patchlab_core::{Error, ModelConfig, Site, SyntheticVocab, Tensor, Transformer, Weights};
use sha2::{Digest, Sha256};

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 12,
        vocab_size: 20,
        max_seq: 24,
        norm_eps: 1e-5,
    }
}

fn checkpoint() -> Checkpoint {
    let cfg = toy_config();
    let w = Weights::<f32>::init(&cfg, 9).unwrap();
    let mut prov = Provenance {
        seed: 9,
        steps: 0,
        final_loss: None,
        ..Default::default()
    };
    prov.notes.insert("origin".into(), "test".into());
    Checkpoint::new(cfg, w, prov).unwrap()
}

fn split(bytes: &[u8]) -> (&[u8], u32, serde_json::Value, &[u8]) {
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
    (&bytes[..8], version, header, &bytes[20 + hlen..])
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = checkpoint();
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.digest(), ck.digest());
    assert_eq!(back.provenance, ck.provenance);
    let tokens = [1, 2, 3];
    let a = ck.model().unwrap().forward_trace(&tokens).unwrap();
    let b = back.model().unwrap().forward_trace(&tokens).unwrap();
    assert!(a.bit_eq(&b));
    assert!(matches!(
        load_checkpoint(dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn fixture_trace_layout() {
    let ck = checkpoint();
    let vocab = SyntheticVocab::new();
    let tokens = vocab.tokenize("Q:9.8 9.11A:").unwrap();
    assert_eq!(tokens.len(), 12);
    let trace = ck.model().unwrap().forward_trace(&tokens).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.trace");
    save_trace(&trace, &path, false).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (magic, version, header, payload) = split(&bytes);
    assert_eq!(magic, TRACE_MAGIC);
    assert_eq!(version, 1);
    assert_eq!(header["n_tokens"], 12);
    assert_eq!(header["omit_head_outputs"], false);
    assert_eq!(header["payload_len"], payload.len());
    assert_eq!(
        header["payload_digest"],
        hex::encode(Sha256::digest(payload))
    );
    // first tensor is the embedding, stored as little-endian f32
    let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
    assert_eq!(first, trace.embed.data()[0]);

    let (back, info) = load_trace(&path).unwrap();
    assert_eq!(info.n_tokens, 12);
    assert!(back.bit_eq(&trace));

    save_trace(&trace, &path, true).unwrap();
    let smaller = std::fs::read(&path).unwrap();
    assert!(smaller.len() < bytes.len());
    let (back, info) = load_trace(&path).unwrap();
    assert!(info.omit_head_outputs && !back.has_head_outputs());
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&checkpoint(), &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x01;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::DigestMismatch { .. })
    ));

    std::fs::write(&path, &good[..good.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    let mut future = good.clone();
    future[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &future).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Version { found: 7, .. })
    ));

    std::fs::write(&path, &good).unwrap();
    assert!(matches!(load_trace(&path), Err(Error::Format(_))));
}

#[test]
fn activation_dataset_file_round_trip() {
    let rows = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0]).unwrap();
    let mut ds = ActivationDataset {
        layer: 3,
        site: Site::ResidPost,
        positions: "final prompt token".into(),
        meta: Default::default(),
        rows,
    };
    ds.meta.insert("format".into(), "qa".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.acts");
    save_acts(&ds, &path).unwrap();
    assert_eq!(load_acts(&path).unwrap(), ds);
}

#[test]
fn digest_ignores_provenance_but_tracks_weights() {
    let a = checkpoint();
    let mut b = a.clone();
    b.provenance.steps = 10;
    assert_eq!(a.digest(), b.digest());
    b.weights.tensors_mut()[0].data_mut()[0] += 1.0;
    assert_ne!(a.digest(), b.digest());
    let m: Transformer<f32> = a.model().unwrap();
    assert_eq!(m.config(), &toy_config());
}
