use super::*;
use crate::autodiff::Rng;
use crate::model::{TransformerConfig, TransformerModel};
use crate::preprocess::{Provenance, Window, WindowSet};
use rand::{Rng as _, SeedableRng};

fn provenance(session: u8, task: TaskKind) -> Provenance {
    Provenance { round: 1, session, task }
}

/// `per_user` windows for each of `users` subjects; subject `u` has a
/// distinct offset on a distinct channel plus small noise.
fn separable_set(users: usize, per_user: usize, t_len: usize, seed: u64) -> WindowSet {
    let mut rng = Rng::seed_from_u64(seed);
    let mut set = WindowSet::new(7, t_len, true);
    for u in 0..users {
        for k in 0..per_user {
            let mut data: Vec<f64> = (0..7 * t_len).map(|_| rng.random_range(-0.1..0.1)).collect();
            for t in 0..t_len {
                data[(1 + u % 6) * t_len + t] += 0.8;
                data[t] = t as f64 * 0.004;
            }
            let task = TaskKind::ALL[k % 5];
            set.push(Window {
                data,
                label: format!("s{u}"),
                provenance: provenance(1 + (k % 2) as u8, task),
            })
            .unwrap();
        }
    }
    set
}

fn tiny_transformer(n_classes: usize, t_len: usize, seed: u64) -> TransformerModel {
    let cfg = TransformerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        seq_len: t_len,
        n_classes,
        ..Default::default()
    };
    TransformerModel::new(cfg, seed).unwrap()
}

#[test]
fn split_ten_windows_eight_two() {
    let set = separable_set(1, 10, 4, 1);
    let (train, test) = split(&set, &SplitSpec::default()).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
}

#[test]
fn split_is_a_deterministic_partition() {
    let set = separable_set(3, 7, 4, 2);
    let spec = SplitSpec { seed: 9, ..Default::default() };
    let (train, test) = split(&set, &spec).unwrap();
    let (train2, test2) = split(&set, &spec).unwrap();
    assert_eq!((&train, &test), (&train2, &test2));
    assert_eq!(train.len() + test.len(), set.len());
    let mut seen: Vec<&[f64]> = (0..train.len()).map(|i| train.window(i)).chain((0..test.len()).map(|i| test.window(i))).collect();
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut all: Vec<&[f64]> = (0..set.len()).map(|i| set.window(i)).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(seen, all);
    // every subject: ceil(0.8·7) = 6 train windows
    for s in ["s0", "s1", "s2"] {
        assert_eq!(train.labels().iter().filter(|l| *l == s).count(), 6);
    }
}

#[test]
fn session_split_keeps_sessions_whole() {
    let mut set = separable_set(2, 8, 4, 3);
    // Give each subject four sessions across two rounds.
    let relabeled: Vec<Provenance> = set
        .provenance()
        .iter()
        .enumerate()
        .map(|(i, p)| Provenance {
            round: 1 + 2 * ((i / 2) % 2) as u8,
            session: 1 + (i % 2) as u8,
            ..*p
        })
        .collect();
    let mut rebuilt = WindowSet::new(7, 4, true);
    for (i, prov) in relabeled.into_iter().enumerate() {
        rebuilt
            .push(Window {
                data: set.window(i).to_vec(),
                label: set.labels()[i].clone(),
                provenance: prov,
            })
            .unwrap();
    }
    set = rebuilt;
    let spec = SplitSpec {
        unit: SplitUnit::Session,
        ..Default::default()
    };
    let (train, test) = split(&set, &spec).unwrap();
    for subject in ["s0", "s1"] {
        let keys = |ws: &WindowSet| -> std::collections::BTreeSet<(u8, u8)> {
            ws.labels()
                .iter()
                .zip(ws.provenance())
                .filter(|(l, _)| *l == subject)
                .map(|(_, p)| (p.round, p.session))
                .collect()
        };
        let (a, b) = (keys(&train), keys(&test));
        assert!(a.is_disjoint(&b));
        assert_eq!((a.len(), b.len()), (3, 1));
    }
}

#[test]
fn split_needs_two_units_per_subject() {
    let set = separable_set(2, 1, 4, 4);
    assert_eq!(
        split(&set, &SplitSpec::default()),
        Err(TrainingError::InsufficientData("s0".into()))
    );
    let one_session = separable_set(1, 1, 4, 4);
    let spec = SplitSpec {
        unit: SplitUnit::Session,
        ..Default::default()
    };
    assert!(split(&one_session, &spec).is_err());
}

#[test]
fn label_encoding_is_sorted_and_invertible() {
    let (codes, enc) = encode_labels(&["s2", "s1", "s2"]);
    assert_eq!(codes, vec![1, 0, 1]);
    assert_eq!(enc.classes(), ["s1", "s2"]);
    for (c, id) in codes.iter().zip(["s2", "s1", "s2"]) {
        assert_eq!(enc.decode(*c), Some(id));
    }
    assert_eq!(enc.encode_all(&["s3"]), Err(TrainingError::UnknownLabel("s3".into())));
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let set = separable_set(2, 4, 6, 5);
    let enc = LabelEncoder::fit(set.labels());
    let mut model = tiny_transformer(2, 6, 1);
    let before = model.params().clone();
    let report = train_epochs(&mut model, &set, &enc, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(model.params(), &before);
    assert!(!model.is_trained());
}

#[test]
fn labels_beyond_the_head_are_rejected() {
    let set = separable_set(3, 2, 6, 6);
    let enc = LabelEncoder::fit(set.labels());
    let mut model = tiny_transformer(2, 6, 1);
    assert!(matches!(
        train_epochs(&mut model, &set, &enc, &TrainConfig::default()),
        Err(TrainingError::LabelOutOfRange { label: 2, classes: 2 })
    ));
}

fn mean_loss(model: &TransformerModel, set: &WindowSet, enc: &LabelEncoder) -> f64 {
    let targets = enc.encode_all(set.labels()).unwrap();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let mut p = model.forward(&set.window_array(i)).unwrap();
        crate::autodiff::softmax_in_place(&mut p);
        total -= p[t].ln();
    }
    total / targets.len() as f64
}

#[test]
fn tiny_transformer_overfits_four_separable_users() {
    let set = separable_set(4, 12, 8, 7);
    let enc = LabelEncoder::fit(set.labels());
    let mut model = tiny_transformer(4, 8, 3);
    let initial = mean_loss(&model, &set, &enc);
    assert!((initial - 4f64.ln()).abs() < 0.35, "initial loss {initial}");
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        learning_rate: 0.01,
        shuffle_seed: 11,
        ..Default::default()
    };
    let report = train_epochs(&mut model, &set, &enc, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 40);
    assert!(report.final_train_accuracy >= 0.95, "{report:?}");
    for e in 5..30 {
        assert!(
            report.epoch_losses[e + 10] <= report.epoch_losses[e],
            "loss rose between epochs {e} and {}: {:?}",
            e + 10,
            report.epoch_losses
        );
    }
    let eval = evaluate(&model, &set, &enc).unwrap();
    assert!((eval.accuracy - report.final_train_accuracy).abs() < 1e-12);
}

#[test]
fn training_is_bit_reproducible() {
    let set = separable_set(3, 5, 6, 8);
    let enc = LabelEncoder::fit(set.labels());
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        shuffle_seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut model = tiny_transformer(3, 6, 2);
        let report = train_epochs(&mut model, &set, &enc, &cfg).unwrap();
        (report, model.params().clone())
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    let mut other = tiny_transformer(3, 6, 2);
    let r3 = train_epochs(&mut other, &set, &enc, &TrainConfig { learning_rate: 0.002, ..cfg }).unwrap();
    assert_ne!(r3.fingerprint, r1.fingerprint);
}

#[test]
fn evaluation_arithmetic() {
    let set = separable_set(4, 6, 2, 9);
    let enc = LabelEncoder::fit(set.labels());
    let always_zero = evaluate_with(&set, &enc, |_| Ok(0)).unwrap();
    assert_eq!(always_zero.accuracy, 0.25);
    let targets = enc.encode_all(set.labels()).unwrap();
    let perfect = evaluate_with(&set, &enc, |i| Ok(targets[i])).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert!(TaskKind::ALL.iter().all(|&t| perfect.task_accuracy(t) == Some(1.0)));
    let empty = WindowSet::new(7, 2, true);
    assert_eq!(evaluate_with(&empty, &enc, |_| Ok(0)), Err(TrainingError::EmptyWindowSet));
}

#[test]
fn random_predictor_scores_one_over_n() {
    let n = 5;
    let set = separable_set(n, 4000, 1, 10);
    let enc = LabelEncoder::fit(set.labels());
    let mut rng = Rng::seed_from_u64(77);
    let eval = evaluate_with(&set, &enc, |_| Ok(rng.random_range(0..n))).unwrap();
    // 20 000 Bernoulli(0.2) draws: standard error 0.0028
    assert!((eval.accuracy - 0.2).abs() < 0.015, "{}", eval.accuracy);
}

#[test]
fn untrained_models_cannot_be_evaluated() {
    let set = separable_set(2, 2, 6, 1);
    let enc = LabelEncoder::fit(set.labels());
    assert!(matches!(
        evaluate(&tiny_transformer(2, 6, 0), &set, &enc),
        Err(TrainingError::Model(ModelError::UntrainedModel))
    ));
}

#[test]
fn majority_vote_ties_to_lowest() {
    assert_eq!(majority_vote(&[2, 1, 2, 1]), Some(1));
    assert_eq!(majority_vote(&[3, 3, 0]), Some(3));
    assert_eq!(majority_vote(&[]), None);
}
