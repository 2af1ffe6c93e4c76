use std::path::Path;

use promptrec::data::{Dataset, InteractionLog, Profiles};
use promptrec::encoder::EncoderConfig;
use promptrec::model::Model;
use promptrec::pretrain::{pretrain, PretrainConfig};
use promptrec::train::{mean_bpr, TrainConfig, TrainUser};
use promptrec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 40;

/// Every user walks the item ring: the next item is always the current
/// one plus one, modulo V.
fn planted(users: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for u in 0..users {
        let start = rng.gen_range(0..V);
        let len = rng.gen_range(8..=14);
        for t in 0..len {
            text.push_str(&format!("u{u}\ti{}\t{t}\n", (start + t) % V));
        }
    }
    let log = InteractionLog::parse(&text, Path::new("planted.tsv")).unwrap();
    Dataset {
        profiles: Profiles::empty(log.num_users()),
        log,
    }
}

fn config(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            max_seq_len: 16,
            ..EncoderConfig::with_dim(16)
        },
        train: TrainConfig {
            epochs,
            lr: 1e-2,
            batch_size: 64,
            seed: 3,
            patience: 0,
            ..TrainConfig::default()
        },
        holdout: 0.0,
        cl: None,
    }
}

fn train_users(data: &Dataset) -> Vec<TrainUser<'_>> {
    (0..data.log.num_users())
        .map(|u| TrainUser {
            id: u,
            items: data.sequence(u),
            features: None,
        })
        .collect()
}

#[test]
fn planted_ring_is_learned() {
    let data = planted(200, 1);
    let users: Vec<usize> = (0..200).collect();
    let cfg = config(20);
    let fresh = Model::new_backbone(cfg.encoder, data.num_items(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let before = mean_bpr(&fresh, &train_users(&data), 5).unwrap();
    let (model, _) = pretrain(&data, &users, &cfg).unwrap();
    let after = mean_bpr(&model, &train_users(&data), 5).unwrap();
    assert!(after < 0.3 * before, "mean BPR {before:.4} -> {after:.4}");
}

#[test]
fn epoch_loss_drops_below_the_first_epoch() {
    let data = planted(200, 2);
    let users: Vec<usize> = (0..200).collect();
    let (_, report) = pretrain(&data, &users, &config(8)).unwrap();
    let first = report.epochs[0].loss;
    for e in &report.epochs[4..] {
        assert!(e.loss < first, "epoch {} loss {} vs first {first}", e.epoch, e.loss);
    }
}

#[test]
fn identical_seeds_give_identical_backbones() {
    let data = planted(60, 3);
    let users: Vec<usize> = (0..60).collect();
    let (a, ra) = pretrain(&data, &users, &config(3)).unwrap();
    let (b, rb) = pretrain(&data, &users, &config(3)).unwrap();
    assert_eq!(ra, rb);
    for ((na, pa), (nb, pb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(pa.tensor.value_bytes(), pb.tensor.value_bytes(), "{na}");
    }
}

#[test]
fn empty_warm_split_is_a_data_error() {
    let data = planted(5, 4);
    assert!(matches!(pretrain(&data, &[], &config(1)), Err(Error::Data(_))));
}
