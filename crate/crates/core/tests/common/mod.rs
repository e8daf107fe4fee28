#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dfq_core::checkpoint::Checkpoint;
use dfq_core::config::RunConfig;
use dfq_core::data::{save_packed, synthetic_shapes, Normalizer, PACKED_FILE};
use dfq_core::model_zoo::{build, ArchitectureSpec, Classifier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 16;

pub fn small_spec() -> ArchitectureSpec {
    ArchitectureSpec::new("tiny_cnn", 10, [3, SIDE, SIDE])
}

pub fn small_teacher() -> Classifier {
    build(&small_spec(), &mut ChaCha8Rng::seed_from_u64(100)).unwrap()
}

/// Writes an untrained teacher checkpoint and a small test split under `dir`.
pub fn fixture(dir: &Path) -> RunConfig {
    let teacher = small_teacher();
    let mut ckpt = Checkpoint::new("teacher");
    teacher.to_checkpoint(&mut ckpt, "").unwrap();
    ckpt.put_json("normalization", &Normalizer::default()).unwrap();
    let teacher_path = dir.join("teacher.ckpt");
    ckpt.save(&teacher_path).unwrap();
    let test_dir = dir.join("test");
    save_packed(&synthetic_shapes(40, SIDE, 1), &test_dir.join(PACKED_FILE)).unwrap();

    let mut cfg = RunConfig::default();
    cfg.model = small_spec();
    cfg.teacher_checkpoint = teacher_path;
    cfg.data.train = dir.join("train");
    cfg.data.test = test_dir;
    cfg.out_root = dir.join("runs");
    cfg.generator.latent_dim = 16;
    cfg.generator.width = 8;
    cfg.schedule.batch_size = 8;
    cfg.schedule.iterations_per_epoch = 3;
    cfg.schedule.epochs = 2;
    cfg.schedule.decay_every = 1;
    cfg.causal.lambda = 0.5;
    cfg
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap()
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir(None)
}
