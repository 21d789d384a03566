//! Dataset parsing, splits, augmentation isolation.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use staer_core::backbone::{Backbone, BackboneConfig, BackboneKind};
use staer_core::data::{
    load_cifar10, load_mnist, parse_cifar10, parse_idx, split_by_tasks, synthetic, write_idx, DatasetKind, Split,
    SyntheticConfig, TaskSplit, CIFAR_RECORD, DATA_ROOT_ENV,
};
use staer_core::trainer::{run_task_sequence, Method, Trainer, TrainerConfig};
use staer_core::Error;

fn idx_bytes(n: usize, rows: usize, cols: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for v in [0x803u32, n as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend((0..n * rows * cols).map(|_| rng.random::<u8>()));
    let mut labels = Vec::new();
    for v in [0x801u32, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend((0..n).map(|_| rng.random_range(0..10u8)));
    (images, labels)
}

/// Data root: `STAER_DATA` when set, otherwise the workspace `data/` directory.
fn root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[test]
fn idx_round_trip_is_exact() {
    let (images, labels) = idx_bytes(17, 5, 4, 1);
    let ds = parse_idx(&images, &labels).unwrap();
    assert_eq!(ds.images.shape(), [17, 1, 5, 4]);
    let (i2, l2) = write_idx(&ds).unwrap();
    assert_eq!((&i2, &l2), (&images, &labels));
    let again = parse_idx(&i2, &l2).unwrap();
    assert_eq!(again, ds);
}

#[test]
fn idx_rejects_bad_files() {
    let (mut images, labels) = idx_bytes(3, 2, 2, 2);
    assert!(matches!(parse_idx(&labels, &labels), Err(Error::BadMagic { .. })));
    images.pop();
    assert!(matches!(parse_idx(&images, &labels), Err(Error::Format { .. })));
    assert!(parse_idx(&images[..10], &labels).is_err());
}

#[test]
fn cifar_records_and_errors() {
    let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
    bytes[0] = 3;
    bytes[CIFAR_RECORD] = 9;
    bytes[1] = 255;
    let ds = parse_cifar10(&bytes).unwrap();
    assert_eq!(ds.labels, vec![3, 9]);
    assert_eq!(ds.images.shape(), [2, 3, 32, 32]);
    assert_eq!(ds.image(0)[0], 1.0);
    assert!(parse_cifar10(&bytes[1..]).is_err());
    bytes[0] = 10;
    assert!(parse_cifar10(&bytes).is_err());
}

#[test]
fn missing_files_mention_remedy() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_mnist(dir.path(), Split::Train).unwrap_err().to_string();
    assert!(err.contains("fetch-data") && err.contains(DATA_ROOT_ENV), "{err}");
    assert!(load_cifar10(dir.path(), Split::Test).is_err());
}

#[test]
fn canonical_mnist_counts() {
    let root = root();
    if !root.join("mnist").exists() {
        eprintln!("skipping: no MNIST under {}", root.display());
        return;
    }
    let train = load_mnist(&root, Split::Train).unwrap();
    let test = load_mnist(&root, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert_eq!(train.image_shape(), [1, 28, 28]);
    let split = TaskSplit::standard(10, 5, None).unwrap();
    let tasks = split_by_tasks(&train, &split).unwrap();
    let sizes: Vec<usize> = tasks.iter().map(|t| t.len()).collect();
    assert_eq!(sizes, vec![12_665, 12_089, 11_263, 12_183, 11_800]);
    let test_sizes: Vec<usize> = split_by_tasks(&test, &split).unwrap().iter().map(|t| t.len()).collect();
    assert_eq!(test_sizes, vec![2_115, 2_042, 1_874, 1_986, 1_983]);
}

#[test]
fn canonical_cifar_counts() {
    let root = root();
    if !root.join("cifar-10-batches-bin").exists() {
        eprintln!("skipping: no CIFAR-10 under {}", root.display());
        return;
    }
    let train = load_cifar10(&root, Split::Train).unwrap();
    let test = load_cifar10(&root, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (50_000, 10_000));
    let split = TaskSplit::standard(10, 5, None).unwrap();
    assert!(split_by_tasks(&train, &split)
        .unwrap()
        .iter()
        .all(|t| t.len() == 10_000));
}

#[test]
fn training_leaves_test_split_untouched() {
    let cfg = SyntheticConfig {
        train_per_class: 10,
        test_per_class: 5,
        ..SyntheticConfig::default()
    };
    let split = TaskSplit::standard(10, 5, None).unwrap();
    let train = split_by_tasks(&synthetic(&cfg, Split::Train).unwrap(), &split).unwrap();
    let test = split_by_tasks(&synthetic(&cfg, Split::Test).unwrap(), &split).unwrap();
    let before: Vec<String> = test.iter().map(|t| t.content_hash()).collect();
    let model = Backbone::new(BackboneConfig::preset(BackboneKind::Mlp), [1, 8, 8], 10, 0).unwrap();
    let config = TrainerConfig {
        method: Method::Staer,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(config, model, DatasetKind::Synthetic, 0).unwrap();
    run_task_sequence(&mut trainer, &split, &train, &test, &mut |_| {}).unwrap();
    let after: Vec<String> = test.iter().map(|t| t.content_hash()).collect();
    assert_eq!(before, after);
}

#[test]
fn class_order_permutation_is_seeded() {
    let a = TaskSplit::standard(10, 5, Some(3)).unwrap();
    let b = TaskSplit::standard(10, 5, Some(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(TaskSplit::standard(10, 5, None).unwrap().tasks[0], vec![0, 1]);
    assert!(TaskSplit::standard(10, 3, None).is_err());
}
