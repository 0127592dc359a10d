use std::path::Path;

use fexgan::corpus::{gen_corpus, CorpusSpec};
use fexgan::generator::{GeneratorConfig, Noise};
use fexgan::tensor::Tensor;
use fexgan::trainer::{
    self, from_bytes, load_checkpoint, read_metrics, save_checkpoint, NetworkConfig, StepPhase, TrainConfig,
    Trainer, TrainingData,
};
use fexgan::Error;

fn tiny_corpus(dir: &Path) {
    let spec = CorpusSpec {
        n_identities: 2,
        frames_per_pair: 4,
        image_size: 32,
        corpus_seed: 3,
    };
    gen_corpus(&spec, dir).unwrap();
}

fn tiny_config(root: &Path, out: &Path) -> TrainConfig {
    let g = GeneratorConfig::scaled(32, 8, 4);
    let mut c = TrainConfig::paper(root);
    c.image_size = 32;
    c.latent_dim = 8;
    c.batch_size = 4;
    c.total_steps = 6;
    c.checkpoint_every = 3;
    c.seed = 5;
    c.output_dir = out.to_owned();
    c.network = NetworkConfig {
        encoder_channels: g.encoder_channels,
        decoder_channels: g.decoder_channels,
        latent_branch: g.latent_branch,
        affect_branch: g.affect_branch,
        disc_channels: vec![4, 8, 16],
        ..NetworkConfig::default()
    };
    c
}

fn trainer_for(config: &TrainConfig) -> Trainer {
    Trainer::new(config.clone(), TrainingData::load(config).unwrap()).unwrap()
}

#[test]
fn each_half_step_leaves_the_other_network_untouched() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let mut t = trainer_for(&cfg);
    for _ in 0..3 {
        let mut hashes = Vec::new();
        t.train_step_observed(|phase, m| {
            hashes.push((phase, m.generator.store().digest(), m.discriminator.store().digest()))
        })
        .unwrap();
        let [(p0, g0, d0), (p1, g1, d1), (p2, g2, d2)] = hashes[..] else { panic!("three phases") };
        assert_eq!((p0, p1, p2), (StepPhase::BeforeDiscriminator, StepPhase::BeforeGenerator, StepPhase::Done));
        assert_eq!(g0, g1, "discriminator update changed the generator");
        assert_ne!(d0, d1, "discriminator did not move");
        assert_eq!(d1, d2, "generator update changed the discriminator");
        assert_ne!(g1, g2, "generator did not move");
    }
}

#[test]
fn metrics_are_finite_and_recompose() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let mut t = trainer_for(&cfg);
    for step in 1..=10 {
        let m = t.train_step().unwrap();
        assert_eq!(m.step, step);
        assert!(m.losses.all_finite(), "{m:?}");
        assert!(m.losses.is_consistent(&cfg.loss_weights, 1e-9), "{m:?}");
        assert!(m.disc_total_after.is_some());
        for acc in [m.real_binary_acc, m.fake_binary_acc, m.real_class_acc, m.fake_class_acc] {
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn identical_start_gives_identical_steps() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let mut a = trainer_for(&cfg);
    let mut b = trainer_for(&cfg);
    for _ in 0..4 {
        assert!(a.train_step().unwrap().same_numbers(&b.train_step().unwrap()));
    }
    assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let mut t = trainer_for(&cfg);
    t.train_step().unwrap();
    t.train_step().unwrap();

    let bytes = t.checkpoint_bytes();
    let ck = from_bytes(&bytes).unwrap();
    assert_eq!(ck.state, t.state);
    assert_eq!(trainer::to_bytes(&ck.config, &ck.models, &ck.state), bytes, "save-load-save differs");

    let images = t.data().dataset.gather(&[0, 1, 2]);
    let src = fexgan::generator::affect_batch(&[fexgan::affect::one_hot(fexgan::affect::AffectClass::Neutral); 3]);
    let tgt = fexgan::generator::affect_batch(&[fexgan::affect::one_hot(fexgan::affect::AffectClass::Joy); 3]);
    let before = t.models.generator.generate(&images, &src, &tgt, &Noise::Deterministic).unwrap();
    let after = ck.models.generator.generate(&images, &src, &tgt, &Noise::Deterministic).unwrap();
    assert_eq!(before, after);
    let d_before = t.models.discriminator.discriminate(&images).unwrap();
    let d_after = ck.models.discriminator.discriminate(&images).unwrap();
    assert_eq!(d_before.validity, d_after.validity);
    assert_eq!(d_before.class_probs, d_after.class_probs);

    // Continuing from the restored state matches continuing the original.
    let mut resumed = Trainer::resume(cfg.clone(), TrainingData::load(&cfg).unwrap(), ck).unwrap();
    for _ in 0..2 {
        assert!(t.train_step().unwrap().same_numbers(&resumed.train_step().unwrap()));
    }
}

#[test]
fn corrupt_truncated_and_old_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let t = trainer_for(&cfg);
    let bytes = t.checkpoint_bytes();

    let truncated = &bytes[..bytes.len() - 100];
    assert!(matches!(from_bytes(truncated), Err(Error::Integrity(_))));
    assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Integrity(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(from_bytes(&flipped), Err(Error::Integrity(_))));

    let mut old = bytes.clone();
    old[4..8].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(from_bytes(&old), Err(Error::Version { found: 0, expected: 1 })));

    let path = dir.path().join("x.ckpt");
    save_checkpoint(&t.config, &t.models, &t.state, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    load_checkpoint(&path).unwrap();
}

#[test]
fn full_run_writes_log_and_checkpoints_and_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let outputs = tempfile::tempdir().unwrap();

    let straight = outputs.path().join("straight");
    let cfg = tiny_config(dir.path(), &straight);
    let final_a = trainer::train(&cfg, None, |_| {}).unwrap();
    let rows = read_metrics(&straight.join(trainer::METRICS_FILE)).unwrap();
    assert_eq!(rows.iter().map(|m| m.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    assert!(straight.join("checkpoints/step_000003.ckpt").exists());
    assert!(straight.join("checkpoints/step_000006.ckpt").exists());

    // Interrupted after 3 steps, resumed to 6.
    let split = outputs.path().join("split");
    let mut short = tiny_config(dir.path(), &split);
    short.total_steps = 3;
    trainer::train(&short, None, |_| {}).unwrap();
    let long = tiny_config(dir.path(), &split);
    let final_b = trainer::train(&long, Some(&split.join("checkpoints/step_000003.ckpt")), |_| {}).unwrap();
    let resumed_rows = read_metrics(&split.join(trainer::METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), resumed_rows.len());
    for (a, b) in rows.iter().zip(&resumed_rows) {
        assert!(a.same_numbers(b), "{a:?} vs {b:?}");
    }
    assert_eq!(
        trainer::to_bytes(&final_a.config, &final_a.models, &final_a.state),
        // output_dir differs between the two runs, so compare under one config
        trainer::to_bytes(&final_a.config, &final_b.models, &final_b.state)
    );
}

#[test]
fn mismatched_networks_cannot_resume() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let ck = trainer_for(&cfg).into_checkpoint();
    let mut other = cfg.clone();
    other.network.disc_channels = vec![4, 8, 32];
    assert!(Trainer::resume(other, TrainingData::load(&cfg).unwrap(), ck).is_err());
}

#[test]
fn missing_target_pool_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    std::fs::remove_dir_all(dir.path().join("1/fear")).unwrap();
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let mut t = trainer_for(&cfg);
    let err = (0..50).find_map(|_| t.train_step().err()).expect("a fear target for identity 1 is drawn");
    let msg = err.to_string();
    assert!(msg.contains("identity 1") && msg.contains("fear"), "{msg}");
}

#[test]
fn tensor_shapes_of_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let cfg = tiny_config(dir.path(), &dir.path().join("out"));
    let mut t = trainer_for(&cfg);
    let b = t.draw_batch().unwrap();
    assert_eq!(b.source_images.shape(), &[4, 3, 32, 32]);
    assert_eq!(b.target_affects.shape(), &[4, 7]);
    assert_eq!(b.epsilon.shape(), &[4, 8]);
    let data = t.data();
    for ((&s, &tg), class) in b.source_idx.iter().zip(&b.target_idx).zip(&b.target_classes) {
        assert_eq!(data.record(s).identity_id, data.record(tg).identity_id);
        assert_eq!(data.record(tg).affect, *class);
        assert!(data.train.contains(&tg), "targets come from the training split");
    }
    let _: &Tensor<f32> = &b.target_images;
}
