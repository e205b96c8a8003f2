mod common;

use common::small;
use genseg::checkpoint::{
    model_checkpoint, model_from_checkpoint, tokenizer_checkpoint, tokenizer_from_checkpoint, Checkpoint,
    CheckpointKind,
};
use genseg::model::Transformer;
use genseg::tokenizer::{Tokenizer, TokenizerConfig};
use genseg::Error;

#[test]
fn tokenizer_round_trip_is_bit_exact() {
    let tok = Tokenizer::init(TokenizerConfig { seed: 4, ..Default::default() }).unwrap();
    let ck = tokenizer_checkpoint(&tok);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(tokenizer_from_checkpoint(&back).unwrap(), tok);
}

#[test]
fn model_round_trip_through_a_file() {
    let c = small();
    let model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model_checkpoint(&model, &c.tokenizer).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.kind, CheckpointKind::Model);
    assert_eq!(model_from_checkpoint(&ck, &c.tokenizer).unwrap(), model);
    // the same model saved twice gives identical files
    let again = dir.path().join("again.ckpt");
    model_checkpoint(&model, &c.tokenizer).save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn header_errors() {
    let tok = Tokenizer::init(TokenizerConfig::default()).unwrap();
    let bytes = tokenizer_checkpoint(&tok).to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::SchemaVersion { found: 7, expected: 1 })));

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn kind_and_tokenizer_mismatches() {
    let c = small();
    let model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let mck = model_checkpoint(&model, &c.tokenizer);
    assert!(tokenizer_from_checkpoint(&mck).is_err());
    let other = Tokenizer::init(TokenizerConfig { codebook_size: 32, ..Default::default() }).unwrap();
    assert!(model_from_checkpoint(&mck, &other).is_err());
}

#[test]
fn missing_file_is_reported_as_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let err = Checkpoint::load(&dir.path().join("nope.ckpt")).unwrap_err();
    assert!(matches!(err, Error::CheckpointNotFound(_)));
    assert!(err.to_string().starts_with("checkpoint not found"));
}
