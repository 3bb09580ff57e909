use rand::Rng as _;
use repaug::io::{read_embedding_cache, write_embedding_cache, Payload};
use repaug::synth::{generate, SynthConfig};
use repaug::{rng, Corpus, CorpusRecord, EncoderConfig, EncoderModel, Error, Split, Tensor};

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let corpus = generate(&SynthConfig {
        pairs: 40,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    corpus.save(&path).unwrap();
    assert_eq!(Corpus::load(&path).unwrap(), corpus);
}

#[test]
fn vector_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.jsonl");
    let corpus = Corpus {
        records: vec![CorpusRecord {
            id: "a".into(),
            split: Split::Test,
            payload: Payload::Vectors {
                qvec: vec![0.1, -2.5, 1e-300],
                cvec: vec![3.0, 0.0, -0.7],
            },
        }],
    };
    corpus.save(&path).unwrap();
    assert_eq!(Corpus::load(&path).unwrap(), corpus);
}

#[test]
fn missing_corpus_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Corpus::load(&dir.path().join("nope.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn embedding_cache_round_trips_at_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.raec");
    let mut r = rng::from_seed(3);
    let m = Tensor::matrix(3, 4, (0..12).map(|_| r.random_range(-5.0..5.0)).collect());
    write_embedding_cache(&path, &m).unwrap();
    let back = read_embedding_cache(&path, Some(4)).unwrap();
    assert_eq!(back.shape(), &[3, 4]);
    for (a, b) in m.data().iter().zip(back.data()) {
        assert_eq!(*a as f32, *b as f32);
    }
    assert!(matches!(read_embedding_cache(&path, Some(5)), Err(Error::Format(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_embedding_cache(&path, None), Err(Error::Format(_))));
}

#[test]
fn empty_embedding_cache_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.raec");
    write_embedding_cache(&path, &Tensor::zeros(&[0, 7])).unwrap();
    assert_eq!(read_embedding_cache(&path, Some(7)).unwrap().rows(), 0);
}

#[test]
fn truncated_cache_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.raec");
    write_embedding_cache(&path, &Tensor::full(&[2, 3], 1.5)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_embedding_cache(&path, None), Err(Error::Format(_))));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ramd");
    for (normalize, shared) in [(false, true), (true, false)] {
        let cfg = EncoderConfig {
            layer_sizes: vec![16, 8, 4],
            normalize_output: normalize,
            shared_towers: shared,
        };
        let m = EncoderModel::new(cfg, 5).unwrap();
        m.save(&path).unwrap();
        let back = EncoderModel::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.to_bytes(), m.to_bytes());
        for (a, b) in back.params().iter().zip(m.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn checkpoint_rejects_bad_magic_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ramd");
    assert!(matches!(EncoderModel::load(&path), Err(Error::Io { .. })));
    std::fs::write(&path, b"NOPE\x01\x00").unwrap();
    assert!(matches!(EncoderModel::load(&path), Err(Error::Format(_))));
}
