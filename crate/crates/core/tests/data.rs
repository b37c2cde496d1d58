//! CIFAR-10 binary ingestion on generated record files.

use std::fs;
use std::path::Path;

use robust_proxy::data::{load_cifar10_with, CifarLoad};
use robust_proxy::Error;

const RECORD: usize = 3073;
const PER_FILE: usize = 10_000;

fn write_batch(path: &Path, label_of: impl Fn(usize) -> u8) {
    let mut bytes = vec![0u8; RECORD * PER_FILE];
    for (i, rec) in bytes.chunks_exact_mut(RECORD).enumerate() {
        rec[0] = label_of(i);
        for (j, b) in rec[1..].iter_mut().enumerate() {
            *b = ((i + j) % 256) as u8;
        }
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn reads_records_in_plane_order_with_stable_ids() {
    let dir = tempfile::tempdir().unwrap();
    write_batch(&dir.path().join("data_batch_1.bin"), |i| (i % 10) as u8);
    write_batch(&dir.path().join("test_batch.bin"), |i| (9 - i % 10) as u8);
    let opts = CifarLoad { train_files: 1, max_train: Some(25), max_test: Some(7) };
    let (train, test) = load_cifar10_with(dir.path(), &opts).unwrap();
    assert_eq!((train.len(), test.len()), (25, 7));
    assert_eq!(train.image_shape(), [3, 32, 32]);
    assert_eq!(&train.labels()[..3], &[0, 1, 2]);
    assert_eq!(&test.labels()[..2], &[9, 8]);
    assert_eq!(train.ids()[24], 24);
    assert_eq!(test.ids()[0], 50_000);
    let row = train.images().row(3);
    // first byte of the red plane, first of the green plane
    assert_eq!(row[0], 3.0 / 255.0);
    assert_eq!(row[1024], ((3 + 1024) % 256) as f64 / 255.0);
}

#[test]
fn rejects_truncated_files_and_bad_labels() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; RECORD * 3]).unwrap();
    let opts = CifarLoad { train_files: 1, max_train: Some(2), max_test: Some(2) };
    assert!(matches!(load_cifar10_with(dir.path(), &opts), Err(Error::Ingestion { .. })));
    write_batch(&dir.path().join("data_batch_1.bin"), |i| if i == 1 { 10 } else { 0 });
    write_batch(&dir.path().join("test_batch.bin"), |_| 0);
    assert!(matches!(load_cifar10_with(dir.path(), &opts), Err(Error::Ingestion { .. })));
    assert!(load_cifar10_with(dir.path(), &CifarLoad { train_files: 0, ..opts }).is_err());
}
