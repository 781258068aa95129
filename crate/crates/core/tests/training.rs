use advinpaint::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
use advinpaint::config::RunConfig;
use advinpaint::data::{gen_synthetic_dataset, train_count, Dataset};
use advinpaint::error::Error;
use advinpaint::image::stack_images;
use advinpaint::networks::FrBackbone;
use advinpaint::nn::params::fingerprint;
use advinpaint::training::fr::{load_fr, FrTrainer};
use advinpaint::training::{Stage1Trainer, Stage2Trainer};
use candle_core::{DType, Device, Tensor};

fn tiny_data(run: &RunConfig) -> Dataset {
    let d = &run.data;
    gen_synthetic_dataset(d.identities, d.per_identity, d.resolution, d.seed).unwrap()
}

fn fr_checkpoint(run: &RunConfig, data: &Dataset) -> CheckpointBundle {
    let mut t = FrTrainer::new(&run.fr, data.identities.len()).unwrap();
    t.run(data, run.fr.steps).unwrap();
    t.checkpoint(run).unwrap()
}

fn probe(data: &Dataset) -> Tensor {
    let imgs: Vec<_> = data.identities.iter().map(|i| &i.images[0]).collect();
    stack_images(&imgs, DType::F32, &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

#[test]
fn dataset_counts_and_split() {
    let data = gen_synthetic_dataset(32, 16, 32, 5).unwrap();
    assert_eq!(data.len(), 512);
    let (train, held) = data.split(0.75).unwrap();
    assert_eq!(train.len(), 32 * 12);
    assert_eq!(held.len(), 32 * 4);
    assert_eq!(train_count(16, 0.75), 12);
    assert_eq!(train_count(2, 0.9), 1);

    assert!(matches!(gen_synthetic_dataset(1, 4, 32, 0), Err(Error::Config(_))));
    assert!(matches!(gen_synthetic_dataset(4, 4, 40, 0), Err(Error::Config(_))));
    assert!(matches!(data.split(1.0), Err(Error::Config(_))));
}

#[test]
fn fr_training_reduces_loss() {
    let mut run = RunConfig::tiny();
    run.fr.steps = 30;
    let data = tiny_data(&run);
    let mut t = FrTrainer::new(&run.fr, data.identities.len()).unwrap();
    t.run(&data, run.fr.steps).unwrap();
    assert_eq!(t.steps_done(), 30);
    let term = |i: usize| t.log[i].terms["margin_ce"];
    let head: f64 = (0..5).map(term).sum::<f64>() / 5.0;
    let tail: f64 = (25..30).map(term).sum::<f64>() / 5.0;
    assert!(tail < head, "cross-entropy {head} -> {tail}");
}

#[test]
fn stages_keep_the_face_model_frozen() {
    let run = RunConfig::tiny();
    let data = tiny_data(&run);
    let ck = fr_checkpoint(&run, &data);
    let before = fingerprint(&ck.group("fr")).unwrap();
    let fr = load_fr(&ck, &run.fr.model, DType::F32).unwrap();
    let x = probe(&data);
    let e0 = bits(&fr.embed(&x).unwrap());

    let attacked: [&dyn FrBackbone; 1] = [&fr];
    let mut s1 = Stage1Trainer::new(&run).unwrap();
    s1.run(&data, &attacked, 2).unwrap();
    let mut s2 = Stage2Trainer::new(&run, Some(&s1.checkpoint().unwrap())).unwrap();
    s2.run(&data, &attacked, 2).unwrap();

    assert_eq!(bits(&fr.embed(&x).unwrap()), e0);
    assert_eq!(fingerprint(&ck.group("fr")).unwrap(), before);
    for r in s1.log.iter().chain(&s2.log) {
        assert!(r.terms.values().all(|v| v.is_finite()), "{r:?}");
    }
    assert!(s2.log[0].terms.contains_key("d_gp"));
}

#[test]
fn zero_steps_leave_initial_weights() {
    let run = RunConfig::tiny();
    let data = tiny_data(&run);
    let ck = fr_checkpoint(&run, &data);
    let fr = load_fr(&ck, &run.fr.model, DType::F32).unwrap();
    let attacked: [&dyn FrBackbone; 1] = [&fr];

    let fresh = Stage1Trainer::new(&run).unwrap();
    let mut idle = Stage1Trainer::new(&run).unwrap();
    idle.run(&data, &attacked, 0).unwrap();
    assert!(idle.log.is_empty());
    assert_eq!(idle.generator_store().fingerprint().unwrap(), fresh.generator_store().fingerprint().unwrap());
    assert_eq!(idle.checkpoint().unwrap().encode().unwrap(), fresh.checkpoint().unwrap().encode().unwrap());

    let mut moved = Stage1Trainer::new(&run).unwrap();
    moved.run(&data, &attacked, 1).unwrap();
    assert_ne!(moved.generator_store().fingerprint().unwrap(), fresh.generator_store().fingerprint().unwrap());

    let s1 = fresh.checkpoint().unwrap();
    let a = Stage2Trainer::new(&run, Some(&s1)).unwrap();
    let mut b = Stage2Trainer::new(&run, Some(&s1)).unwrap();
    b.run(&data, &attacked, 0).unwrap();
    assert_eq!(a.refiner_store().fingerprint().unwrap(), b.refiner_store().fingerprint().unwrap());
}

#[test]
fn stage2_needs_a_stage1_checkpoint() {
    let run = RunConfig::tiny();
    assert!(matches!(Stage2Trainer::new(&run, None), Err(Error::State(_))));

    let data = tiny_data(&run);
    let fr = fr_checkpoint(&run, &data);
    assert!(Stage2Trainer::new(&run, Some(&fr)).is_err());
    assert!(Stage1Trainer::resume(&fr).is_err());
}

#[test]
fn checkpoint_header_is_checked() {
    let run = RunConfig::tiny();
    let data = tiny_data(&run);
    let ck = fr_checkpoint(&run, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fr.ckpt");
    save_checkpoint(&path, &ck).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(CheckpointBundle::decode(&bytes), Err(Error::Version { found: 7, expected: 1 })));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(CheckpointBundle::decode(&bytes), Err(Error::Corrupt(_))));
    assert!(matches!(CheckpointBundle::decode(b"nonsense"), Err(Error::Corrupt(_))));

    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
    assert!(load_checkpoint(&dir.path().join("absent.ckpt")).is_err());
}
