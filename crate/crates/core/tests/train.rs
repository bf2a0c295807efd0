use std::fs;

use cmae_core::constellation::RenderConfig;
use cmae_core::dataset::{generate_split, DatasetConfig, Sample, Split};
use cmae_core::losses::LossWeights;
use cmae_core::model::{forward_finetune, init_params, patchify_batch, ModelConfig, Phase};
use cmae_core::rng::{set_global_seed, Stream};
use cmae_core::tensor::{checkpoint, ParamSet, Tape};
use cmae_core::train::*;
use cmae_core::Error;
use rand::Rng;

fn model() -> ModelConfig {
    ModelConfig::tiny()
}

fn data(split: Split, n: usize, seed: u64) -> Vec<Sample> {
    let cfg = DatasetConfig {
        master_seed: seed,
        pretrain_count: n,
        train_count: n,
        test_count: n,
        ..DatasetConfig::desk()
    };
    let render = RenderConfig {
        image_size: 16,
        ..RenderConfig::default()
    };
    generate_split(&cfg, &render, split).unwrap()
}

fn pre_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        lr: 1e-3,
        ckpt_every: 1,
        cosine: false,
        ..TrainConfig::pretrain_desk()
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let d = data(Split::Pretrain, 10, 1);
    let cfg = pre_cfg(4);
    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain(
        &d,
        &model(),
        &cfg,
        7,
        None,
        &RunOptions {
            out_dir: Some(full_dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(full.completed);

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
        ..RunOptions::default()
    };
    let part = pretrain(&d, &model(), &cfg, 7, None, &opts).unwrap();
    assert!(!part.completed);
    assert!(part.final_checkpoint.is_none());
    let resumed = pretrain(
        &d,
        &model(),
        &cfg,
        7,
        None,
        &RunOptions {
            resume: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(resumed.params, full.params);
    let a = fs::read(full.final_checkpoint.unwrap()).unwrap();
    let b = fs::read(resumed.final_checkpoint.unwrap()).unwrap();
    assert_eq!(a, b);
    let epochs: Vec<usize> = resumed.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [1, 2, 3, 4]);
}

#[test]
fn same_seed_same_checkpoint_and_log_contract() {
    let d = data(Split::Pretrain, 10, 2);
    let cfg = pre_cfg(2);
    let run = |seed| pretrain(&d, &model(), &cfg, seed, None, &RunOptions::default()).unwrap();
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    let hash = &a.log.records[0].config_hash;
    assert!(a.log.records.iter().all(|r| &r.config_hash == hash));
    assert!(a.log.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
    assert!(a.steps.iter().all(|s| s.total.is_finite()));
}

#[test]
fn log_is_line_delimited_json() {
    let d = data(Split::Pretrain, 10, 3);
    let dir = tempfile::tempdir().unwrap();
    let r = pretrain(
        &d,
        &model(),
        &pre_cfg(3),
        1,
        None,
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let log = TrainLog::read(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log, r.log);
    assert_eq!(
        fs::read_to_string(dir.path().join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    assert!(dir.path().join("ckpt/epoch_0002.ckpt").is_file());
    assert!(dir.path().join("ckpt/latest.json").is_file());
}

#[test]
fn zero_cls_weight_still_logs_cls() {
    let d = data(Split::Pretrain, 10, 4);
    let cfg = TrainConfig {
        loss_weights: LossWeights {
            lambda_rec: 1.0,
            lambda_cls: 0.0,
        },
        ..pre_cfg(1)
    };
    let r = pretrain(&d, &model(), &cfg, 1, None, &RunOptions::default()).unwrap();
    let rec = &r.log.records[0];
    assert!(rec.cls.unwrap() > 0.0);
    assert_eq!(rec.total, rec.rec);
}

#[test]
fn divergence_aborts_and_keeps_last_good_checkpoint() {
    let d = data(Split::Pretrain, 10, 5);
    let cfg = TrainConfig {
        batch_size: 10,
        lr: 1e30,
        weight_decay: 0.0,
        ..pre_cfg(5)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = pretrain(
        &d,
        &model(),
        &cfg,
        1,
        None,
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap_err();
    let Error::Diverged { epoch, .. } = err else {
        panic!("expected divergence, got {err}");
    };
    assert!(epoch >= 2);
    let good = dir.path().join(format!("ckpt/epoch_{:04}.ckpt", epoch - 1));
    assert!(checkpoint::load(&good).unwrap().iter().all(|(_, t)| t.all_finite()));
    assert!(!dir.path().join("final.ckpt").exists());
}

#[test]
fn resume_refuses_a_different_configuration() {
    let d = data(Split::Pretrain, 10, 6);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    pretrain(&d, &model(), &pre_cfg(1), 1, None, &opts).unwrap();
    let again = RunOptions { resume: true, ..opts };
    assert!(pretrain(&d, &model(), &pre_cfg(2), 1, None, &again).is_err());
}

#[test]
fn seed_streams_are_reproducible_and_distinct() {
    let s = set_global_seed(9);
    let draw = |stream| -> Vec<u64> {
        let mut r = s.rng(stream, &[0]);
        (0..4).map(|_| r.gen()).collect()
    };
    assert_eq!(draw(Stream::Shuffle), draw(Stream::Shuffle));
    assert_ne!(draw(Stream::Shuffle), draw(Stream::Mask));
    assert_ne!(draw(Stream::Init), draw(Stream::Noise));
    assert_eq!(epoch_order(9, 1, 20)[..4], epoch_order(9, 1, 20)[..4]);
    let a: ParamSet<f32> = init_params(&model(), Phase::Pretrain, 9).unwrap();
    assert_eq!(a, init_params(&model(), Phase::Pretrain, 9).unwrap());
}

#[test]
fn pretrained_and_random_init_differ_only_in_encoder() {
    let m = model();
    let pre: ParamSet<f32> = init_params(&m, Phase::Pretrain, 100).unwrap();
    let a = finetune_params(&m, 1, &FinetuneInit::Pretrained(pre.clone())).unwrap();
    let b = finetune_params(&m, 1, &FinetuneInit::Random).unwrap();
    for (name, t) in a.iter() {
        let other = b.get(name).unwrap();
        if name.starts_with("encoder.") {
            assert_eq!(t, pre.get(name).unwrap(), "{name}");
            if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                assert_ne!(t, other, "{name}");
            }
        } else {
            assert_eq!(t, other, "{name}");
        }
    }
    assert!(a
        .names()
        .all(|n| !n.starts_with("decoder.") && !n.starts_with("cls_head.")));
}

#[test]
fn missing_encoder_tensors_are_named() {
    let m = model();
    let mut pre: ParamSet<f32> = init_params(&m, Phase::Pretrain, 1).unwrap();
    pre.remove("encoder.blocks.0.attn.q.weight");
    let err = finetune_params(&m, 1, &FinetuneInit::Pretrained(pre))
        .unwrap_err()
        .to_string();
    assert!(err.contains("encoder.blocks.0.attn.q.weight"), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let m = model();
    let d = data(Split::Train, 10, 7);
    let cfg = TrainConfig {
        batch_size: 5,
        epochs: 2,
        ..TrainConfig::finetune_desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let r = finetune(
        &d,
        Some(&d),
        &m,
        &cfg,
        1,
        &FinetuneInit::Random,
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let loaded = checkpoint::load(&r.final_checkpoint.unwrap()).unwrap();
    assert_eq!(loaded, r.params);
    let imgs: Vec<_> = d.iter().map(|s| &s.noisy).collect();
    let patches = patchify_batch::<f32>(&imgs, m.patch_size).unwrap();
    let logits = |p: &ParamSet<f32>| {
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let l = forward_finetune(&mut tape, &b, &m, &patches).unwrap();
        tape.value(l).clone()
    };
    assert_eq!(logits(&loaded), logits(&r.params));
    assert!(r
        .log
        .records
        .iter()
        .all(|rec| rec.test_acc.is_some() && rec.loss.is_some()));
    assert_eq!(
        predict(&r.params, &m, &d, 3).unwrap(),
        predict(&r.params, &m, &d, 64).unwrap()
    );
}

#[test]
fn finetune_rejects_labels_outside_head() {
    let m = ModelConfig {
        n_downstream_classes: 4,
        ..model()
    };
    let d = data(Split::Train, 10, 8);
    let cfg = TrainConfig {
        batch_size: 10,
        epochs: 1,
        ..TrainConfig::finetune_desk()
    };
    assert!(finetune(&d, None, &m, &cfg, 1, &FinetuneInit::Random, &RunOptions::default()).is_err());
}
