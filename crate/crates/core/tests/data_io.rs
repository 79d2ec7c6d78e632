use std::path::Path;

use fastaa::data::{idx_paths, load_dataset, save_idx, save_raw_dir, synth_dataset, Dataset, Format, SynthSpec};
use fastaa::imageops::Image;
use fastaa::Error;

/// Writes an IDX pair byte by byte from the format description.
fn write_idx_by_hand(prefix: &Path, rows: u32, cols: u32, pixels: &[Vec<u8>], labels: &[u8]) {
    let (img_path, lbl_path) = idx_paths(prefix);
    let mut img = vec![0, 0, 8, 3];
    img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    for p in pixels {
        img.extend_from_slice(p);
    }
    let mut lbl = vec![0, 0, 8, 1];
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    std::fs::write(img_path, img).unwrap();
    std::fs::write(lbl_path, lbl).unwrap();
}

#[test]
fn hand_written_idx_pair_of_100_digits() {
    let tmp = tempfile::tempdir().unwrap();
    let prefix = tmp.path().join("mini");
    let pixels: Vec<Vec<u8>> = (0..100).map(|i| (0..784).map(|j| ((i * 7 + j) % 256) as u8).collect()).collect();
    let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
    write_idx_by_hand(&prefix, 28, 28, &pixels, &labels);

    let d = load_dataset(&prefix, Format::Idx).unwrap();
    assert_eq!(d.len(), 100);
    assert_eq!(d.shape(), (28, 28, 1));
    assert_eq!(d.class_count(), 10);
    assert_eq!(d.images()[42].pixels(), &pixels[42][..]);
    assert_eq!(d.images()[42].label(), 2);
}

#[test]
fn truncated_idx_is_a_parse_error_with_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let prefix = tmp.path().join("cut");
    let pixels: Vec<Vec<u8>> = (0..3).map(|_| vec![9; 16]).collect();
    write_idx_by_hand(&prefix, 4, 4, &pixels, &[0, 1, 0]);
    let (img_path, lbl_path) = idx_paths(&prefix);
    let mut bytes = std::fs::read(&img_path).unwrap();
    bytes.truncate(16 + 20);
    std::fs::write(&img_path, &bytes).unwrap();
    match load_dataset(&prefix, Format::Idx) {
        Err(Error::Parse { offset, path, .. }) => {
            assert_eq!(offset, 36);
            assert_eq!(path, img_path);
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    write_idx_by_hand(&prefix, 4, 4, &pixels, &[0, 1, 0]);
    std::fs::write(&lbl_path, [0, 0, 8, 1, 0, 0]).unwrap();
    assert!(matches!(load_dataset(&prefix, Format::Idx), Err(Error::Parse { .. })));

    std::fs::write(&img_path, [0, 0, 8, 3]).unwrap();
    assert!(matches!(load_dataset(&prefix, Format::Idx), Err(Error::Parse { offset: 4, .. })));
}

#[test]
fn bad_magic_and_unknown_format() {
    let tmp = tempfile::tempdir().unwrap();
    let prefix = tmp.path().join("m");
    write_idx_by_hand(&prefix, 2, 2, &[vec![1, 2, 3, 4]], &[0]);
    let (img_path, _) = idx_paths(&prefix);
    let mut bytes = std::fs::read(&img_path).unwrap();
    bytes[3] = 9;
    std::fs::write(&img_path, bytes).unwrap();
    assert!(matches!(load_dataset(&prefix, Format::Idx), Err(Error::Parse { offset: 0, .. })));
    assert!(matches!("jpeg".parse::<Format>(), Err(Error::Usage(_))));
}

#[test]
fn idx_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_dataset(&SynthSpec::new(3, 7), 2).unwrap();
    let prefix = tmp.path().join("rt");
    save_idx(&d, &prefix).unwrap();
    let back = load_dataset(&prefix, Format::Idx).unwrap();
    assert_eq!(back.images(), d.images());
    assert_eq!(back.fingerprint(), d.fingerprint());
}

#[test]
fn raw_dir_round_trip_counts_classes_from_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_dataset(
        &SynthSpec {
            channels: 3,
            ..SynthSpec::new(4, 3)
        },
        8,
    )
    .unwrap();
    save_raw_dir(&d, tmp.path()).unwrap();
    let entries = std::fs::read_dir(tmp.path()).unwrap().count();
    assert_eq!(entries, 4);
    let back = load_dataset(tmp.path(), Format::RawDir).unwrap();
    assert_eq!(back.class_count(), 4);
    assert_eq!(back.len(), 12);
    let mut a: Vec<Image> = d.images().to_vec();
    let mut b: Vec<Image> = back.images().to_vec();
    let key = |i: &Image| (i.label(), i.pixels().to_vec());
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);
}

#[test]
fn corrupt_raw_fixture_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = Dataset::new("x", vec![Image::filled(4, 4, 1, 3, 0).unwrap(), Image::filled(4, 4, 1, 9, 1).unwrap()], 2).unwrap();
    save_raw_dir(&d, tmp.path()).unwrap();
    let file = std::fs::read_dir(tmp.path().join("1")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = std::fs::read(&file).unwrap();
    bytes.pop();
    std::fs::write(&file, bytes).unwrap();
    match load_dataset(tmp.path(), Format::RawDir) {
        Err(Error::Parse { path, .. }) => assert_eq!(path, file),
        other => panic!("expected parse error, got {other:?}"),
    }
}
