use std::path::{Path, PathBuf};

use gradleak::autodiff::Tensor;
use gradleak::data::{load_idx, synth_dataset, write_idx, DataError, SynthSpec};
use gradleak::models::Example;

fn pair(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("images.idx"), dir.join("labels.idx"))
}

fn sample(count: usize) -> Vec<Example> {
    let spec = SynthSpec {
        blobs: 2,
        shape: [1, 6, 5],
        classes: 10,
    };
    synth_dataset(&spec, count, 3).unwrap()
}

#[test]
fn round_trip_is_exact_up_to_byte_rounding() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = pair(dir.path());
    let data = sample(7);
    write_idx(&img, &lab, &data).unwrap();
    let back = load_idx(&img, &lab, None).unwrap();
    assert_eq!(back.len(), 7);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(b.image.shape(), &[1, 6, 5]);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-15);
        }
    }
    // Byte-valued images survive unchanged.
    write_idx(&img, &lab, &back).unwrap();
    assert_eq!(load_idx(&img, &lab, None).unwrap(), back);
}

#[test]
fn swapped_files_report_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = pair(dir.path());
    write_idx(&img, &lab, &sample(2)).unwrap();
    let err = load_idx(&lab, &img, None).unwrap_err();
    assert!(
        matches!(
            err,
            DataError::BadMagic {
                expected: 0x803,
                found: 0x801,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = pair(dir.path());
    write_idx(&img, &lab, &sample(3)).unwrap();
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
    let err = load_idx(&img, &lab, None).unwrap_err();
    assert!(matches!(err, DataError::Truncated { expected, found, .. } if expected == bytes.len() && found == bytes.len() - 1));

    std::fs::write(&img, &bytes[..6]).unwrap();
    assert!(matches!(load_idx(&img, &lab, None), Err(DataError::Truncated { .. })));
}

#[test]
fn count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = pair(dir.path());
    let (img2, lab2) = (dir.path().join("i2"), dir.path().join("l2"));
    write_idx(&img, &lab, &sample(3)).unwrap();
    write_idx(&img2, &lab2, &sample(4)).unwrap();
    let err = load_idx(&img, &lab2, None).unwrap_err();
    assert!(matches!(err, DataError::CountMismatch { images: 3, labels: 4 }), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = pair(dir.path());
    assert!(matches!(load_idx(&img, &lab, None), Err(DataError::Io { .. })));
}

#[test]
fn downsampling_mean_pools_a_centered_crop() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = pair(dir.path());
    // 5x5 ramp of byte values 0..25; target 2x2 crops rows/cols 0..4 (offset 0).
    let pixels: Vec<f64> = (0..25).map(|v| v as f64 / 255.0).collect();
    let z = Example {
        image: Tensor::new(vec![1, 5, 5], pixels),
        label: 1,
    };
    write_idx(&img, &lab, &[z]).unwrap();
    let small = load_idx(&img, &lab, Some([1, 2, 2])).unwrap();
    let expect = [
        (0.0 + 1.0 + 5.0 + 6.0) / 4.0,
        (2.0 + 3.0 + 7.0 + 8.0) / 4.0,
        (10.0 + 11.0 + 15.0 + 16.0) / 4.0,
        (12.0 + 13.0 + 17.0 + 18.0) / 4.0,
    ];
    for (a, b) in small[0].image.data().iter().zip(expect) {
        assert!((a - b / 255.0).abs() <= 1e-15);
    }
    assert!(matches!(load_idx(&img, &lab, Some([1, 6, 6])), Err(DataError::Resample { .. })));
    assert!(matches!(load_idx(&img, &lab, Some([3, 2, 2])), Err(DataError::Resample { .. })));
}

/// Set GRADLEAK_MNIST_DIR to a directory holding the standard training files.
#[test]
fn mnist_loads_when_available() {
    let Ok(dir) = std::env::var("GRADLEAK_MNIST_DIR") else {
        eprintln!("GRADLEAK_MNIST_DIR unset; skipping");
        return;
    };
    let dir = Path::new(&dir);
    let data = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Some([1, 16, 16]),
    )
    .unwrap();
    assert_eq!(data.len(), 60_000);
    assert!(data.iter().all(|z| z.label < 10 && z.image.shape() == [1, 16, 16]));
}
