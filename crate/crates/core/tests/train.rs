mod common;

use common::uniform;
use mudiff::nn::{ParamStore, Tensor};
use mudiff::tcld::{TcldConfig, TcldModel, TextEmbedder};
use mudiff::train::{
    load_model, AdamW, AdamWConfig, Checkpoint, CheckpointKind, Ema, EmaConfig, TrainConfig,
    Trainer, Weights, MAGIC,
};
use mudiff::Error;

fn stage2_config() -> TcldConfig {
    TcldConfig {
        latent_length: 8,
        ..TcldConfig::tiny()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        seed: 17,
        ..TrainConfig::tiny()
    }
}

fn run_steps(t: &mut Trainer<TcldModel>, n: usize) {
    let emb = t.model.embedder().unwrap();
    let e = emb.embed("organ").unwrap();
    for _ in 0..n {
        t.step(|m, rng| {
            let z = uniform(&[8, 8], 1.0, rng);
            m.train_step(&[(&z, &e), (&z, &e)], rng)
        })
        .unwrap();
    }
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::full(vec![3], 0.7)).unwrap();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store).unwrap();
    assert_eq!(store.by_name("w").unwrap().value.data(), &[0.7; 3]);
}

#[test]
fn ema_fixed_point_and_decay_schedule() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::full(vec![2], -1.25)).unwrap();
    let mut ema = Ema::new(EmaConfig::default(), &store);
    for step in 1..50 {
        ema.update(&store, step);
    }
    assert_eq!(ema.shadow()[0].data(), &[-1.25, -1.25]);
    let c = EmaConfig::default();
    assert!((c.decay(1) - 0.5f64.powf(0.7)).abs() < 1e-12);
    assert_eq!(c.decay(1_000_000), 0.995);
    assert!((1..1000).all(|t| c.decay(t) <= c.decay(t + 1)));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut t = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    run_steps(&mut t, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2.ckpt");
    t.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, t.to_checkpoint().unwrap());
    let raw: TcldModel = load_model(&loaded, Weights::Raw).unwrap();
    assert_eq!(raw.params, t.model.params);
    let ema: TcldModel = load_model(&loaded, Weights::Ema).unwrap();
    assert_eq!(ema.params, t.ema_model().params);
    assert_ne!(ema.params, raw.params);
}

#[test]
fn resume_reproduces_uninterrupted_trace() {
    let mut full = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    run_steps(&mut full, 12);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    run_steps(&mut first, 5);
    first.save(&path).unwrap();
    let mut second = Trainer::<TcldModel>::resume(&path).unwrap();
    assert_eq!(second.step_count(), 5);
    run_steps(&mut second, 7);

    let mut trace = first.losses();
    trace.extend(second.losses());
    assert_eq!(trace, full.losses());
    assert_eq!(second.model.params, full.model.params);
    assert_eq!(second.ema_model().params, full.ema_model().params);
    assert_eq!(second.log.last().unwrap().step, 12);
}

#[test]
fn loss_log_lines_are_tab_separated() {
    let mut t = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    run_steps(&mut t, 1);
    let line = t.log[0].log_line();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[0], "1");
    assert_eq!(fields[1].parse::<f32>().unwrap(), t.log[0].loss);
    fields[2].parse::<u64>().unwrap();
}

#[test]
fn damaged_files_are_rejected() {
    let mut ck = Checkpoint::new(CheckpointKind::Latent, "a = 1\n");
    ck.push("x", Tensor::full(vec![2, 3], 0.5));
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

    let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 13]).unwrap_err();
    assert!(
        matches!(cut, Error::Truncated { .. } | Error::Format(_)),
        "{cut}"
    );
    let cut = Checkpoint::from_bytes(&bytes[..30]).unwrap_err();
    assert!(matches!(cut, Error::Truncated { .. }), "{cut}");

    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"RIFF");
    let err = Checkpoint::from_bytes(&foreign).unwrap_err().to_string();
    assert!(err.contains("MOUS"), "{err}");

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version)
        .unwrap_err()
        .to_string()
        .contains("version"));

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 12;
    flipped[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
}

#[test]
fn wrong_kind_and_shape_are_rejected() {
    let t = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    let ck = t.to_checkpoint().unwrap();
    assert!(load_model::<mudiff::dmae::DmaeModel>(&ck, Weights::Raw).is_err());

    let mut other = stage2_config();
    other.generator.channels = vec![16, 64];
    let foreign = Trainer::<TcldModel>::new(&other, train_config())
        .unwrap()
        .to_checkpoint()
        .unwrap();
    let mut mixed = ck.clone();
    mixed.tensors = foreign.tensors;
    let err = load_model::<TcldModel>(&mixed, Weights::Raw).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    assert!(Trainer::<TcldModel>::from_checkpoint(&mixed).is_err());
}

#[test]
fn same_seed_same_trace() {
    let mut a = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    let mut b = Trainer::<TcldModel>::new(&stage2_config(), train_config()).unwrap();
    run_steps(&mut a, 6);
    run_steps(&mut b, 6);
    assert_eq!(a.losses(), b.losses());
}
