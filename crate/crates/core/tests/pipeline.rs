use std::collections::BTreeMap;

use lift_core::corpus::{self, Example, Task, Tokenization};
use lift_core::diffusion;
use lift_core::eval;
use lift_core::sampler::DecodeConfig;
use lift_core::trainer::Trainer;
use lift_core::{Checkpoint, Denoiser, Error, ModelConfig, ObjectiveKind, ObjectiveSpec, TrainConfig, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(vocab_size: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        max_seq_len,
        dropout_rate: 0.0,
    }
}

#[test]
fn padding_is_never_counted_or_masked() {
    let examples = vec![
        Example::new("ab", "c"),
        Example::new("a", "bbbbcc"),
        Example::new("cc", "abcab"),
        Example::new("", "a"),
    ];
    let vocab = Vocabulary::build(&examples, Tokenization::Char).unwrap();
    let mut brute: BTreeMap<&str, u64> = BTreeMap::new();
    for ex in &examples {
        for (i, _) in ex.response.char_indices() {
            *brute.entry(&ex.response[i..i + 1]).or_default() += 1;
        }
    }
    for (tok, &n) in &brute {
        assert_eq!(vocab.frequency()[vocab.id(tok).unwrap()], n, "{tok}");
    }
    assert_eq!(vocab.frequency()[vocab.pad_id()], 0);
    assert_eq!(vocab.frequency()[vocab.mask_id()], 0);

    let data = vocab.encode_all(&examples).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for batch in corpus::make_batches(&data, 4, 3, 0, vocab.pad_id()).unwrap() {
        for seq in &batch.sequences {
            let c = diffusion::corrupt(seq, 1.0, vocab.mask_id(), &mut rng);
            assert_eq!(c.mask_set, seq.response_range().collect::<Vec<_>>());
            for p in seq.content_len()..seq.len() {
                assert_eq!(c.ids[p], vocab.pad_id());
            }
        }
    }
}

#[test]
fn bidirectional_witness_on_trained_model() {
    // The second character always repeats the first, so the masked first
    // position can only be recovered from the later one.
    let examples: Vec<Example> = (0..400).map(|i| {
        let c = ["a", "b", "c", "d"][i % 4];
        Example::new("", format!("{c}{c}"))
    }).collect();
    let vocab = Vocabulary::build(&examples, Tokenization::Char).unwrap();
    let data = vocab.encode_all(&examples).unwrap();
    let config = TrainConfig {
        batch_size: 16,
        epochs: 12,
        learning_rate: 3e-3,
        weight_decay: 0.0,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, Denoiser::new(small(vocab.len(), 4), 5).unwrap(), data, &vocab).unwrap();
    trainer.run().unwrap();
    let model = trainer.model();
    let m = vocab.mask_id();
    let argmax_first = |later: &str| {
        let out = model.predict(&[vec![m, vocab.id(later).unwrap()]], &[2]).unwrap();
        let row = out.at(0, 0);
        (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
    };
    for c in ["a", "b", "c", "d"] {
        assert_eq!(argmax_first(c), vocab.id(c).unwrap(), "{c}");
    }
}

#[test]
fn files_round_trip_through_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let all = corpus::generate_synthetic(Task::Copy, 72, 9).unwrap();
    let (train, evals) = all.split_at(64);
    let path = dir.path().join("train.jsonl");
    corpus::write_jsonl(&path, train).unwrap();
    let read = corpus::read_corpus(&path).unwrap();
    assert_eq!(read, train);

    let vocab = Vocabulary::build(&read, Tokenization::Char).unwrap();
    vocab.save(&dir.path().join("vocab.json")).unwrap();
    let vocab = Vocabulary::load(&dir.path().join("vocab.json")).unwrap();
    let data = vocab.encode_all(&read).unwrap();

    let config = TrainConfig {
        batch_size: 8,
        epochs: 2,
        checkpoint_every: 5,
        objective: ObjectiveSpec::new(ObjectiveKind::LiftA),
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let mut trainer = Trainer::new(config, Denoiser::new(small(vocab.len(), 32), 1).unwrap(), data.clone(), &vocab)
        .unwrap()
        .with_output(&out)
        .unwrap();
    trainer.run().unwrap();
    for f in ["train_log.jsonl", "epochs.csv", "last.ckpt", "checkpoint_5.ckpt", "checkpoint_16.ckpt", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 16);

    let restored = Checkpoint::load(&out.join("last.ckpt")).unwrap().into_model().unwrap();
    assert_eq!(restored.params(), trainer.model().params());

    let response_len = data[0].response_len;
    let report = eval::evaluate(&restored, &vocab, Task::Copy, evals, &DecodeConfig::for_length(response_len, 1), &[1], 0, 8).unwrap();
    assert_eq!(report.examples.len(), evals.len());
    report.write(&out).unwrap();
    assert!(out.join("eval_report.json").exists());

    let other = corpus::generate_synthetic(Task::Copy, 64, 10).unwrap();
    let other_data = vocab.encode_all(&other).unwrap();
    let resumed = Trainer::resume(Checkpoint::load(&out.join("checkpoint_5.ckpt")).unwrap(), other_data, &vocab);
    assert!(matches!(resumed, Err(Error::Mismatch(_))));
}
