//! Byte-level checks of the checkpoint, IDX, CIFAR-10 and PNG paths.

use std::path::PathBuf;

use onetok::config::{Phase, RunConfig};
use onetok::data::{self, Dataset};
use onetok::latent_generator::LatentStats;
use onetok::params::ParamStore;
use onetok::pipeline::{load_checkpoint, save_checkpoint, Checkpoint};
use onetok::{Error, Tensor};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden_checkpoint() -> Checkpoint {
    let mut c = Checkpoint::new(Phase::StageB, 42, RunConfig::default());
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_vec(&[2, 1], vec![1.0, -2.5]).unwrap());
    c.groups.insert("mixer".into(), s);
    c.latent_stats = Some(LatentStats {
        mean: vec![0.5],
        std: vec![2.0],
    });
    c.latent_source = Some("ema".into());
    c
}

#[test]
fn checkpoint_header_and_tensor_bytes() {
    let bytes = golden_checkpoint().to_bytes().unwrap();
    let mut expect: Vec<u8> = Vec::new();
    expect.extend_from_slice(b"RPTK");
    expect.extend_from_slice(&[1, 0, 0, 0]);
    expect.extend_from_slice(&[3, 0, 0, 0]);
    // mixer/w: name, rank 2, dims 2×1, 1.0 and -2.5
    expect.extend_from_slice(&[7, 0]);
    expect.extend_from_slice(b"mixer/w");
    expect.extend_from_slice(&[2, 2, 0, 0, 0, 1, 0, 0, 0]);
    expect.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
    expect.extend_from_slice(&[11, 0]);
    expect.extend_from_slice(b"latent/mean");
    expect.extend_from_slice(&[1, 1, 0, 0, 0, 0x00, 0x00, 0x00, 0x3f]);
    expect.extend_from_slice(&[10, 0]);
    expect.extend_from_slice(b"latent/std");
    expect.extend_from_slice(&[1, 1, 0, 0, 0, 0x00, 0x00, 0x00, 0x40]);
    assert_eq!(&bytes[..expect.len()], &expect[..]);
    let off = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    assert_eq!(off as usize, expect.len());
    let meta = std::str::from_utf8(&bytes[expect.len()..bytes.len() - 8]).unwrap();
    assert!(meta.contains("phase = \"stage_b\""), "{meta}");
    assert!(meta.contains("step = 42"), "{meta}");
}

#[test]
fn committed_golden_checkpoint_loads_and_reserializes() {
    let path = fixture("golden.rptk");
    let on_disk = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, golden_checkpoint());
    assert_eq!(loaded.to_bytes().unwrap(), on_disk);
}

#[test]
fn checkpoint_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.rptk");
    let c = golden_checkpoint();
    save_checkpoint(&c, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, c);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend_from_slice(&[0, 255, 51, 204, 127, 128, 1, 254]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    (images, labels)
}

#[test]
fn idx_two_image_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = idx_fixture();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, im).unwrap();
    std::fs::write(&lp, lb).unwrap();
    let (images, labels) = data::ingest_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(images.shape(), &[2, 1, 2, 2]);
    let expect: Vec<f32> = [0u8, 255, 51, 204, 127, 128, 1, 254]
        .iter()
        .map(|&b| b as f32 / 127.5 - 1.0)
        .collect();
    assert_eq!(images.data(), &expect[..]);
    assert_eq!(images.data()[0], -1.0);
    assert_eq!(images.data()[1], 1.0);
    assert_eq!(labels, vec![7, 3]);
}

#[test]
fn idx_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (im, _) = idx_fixture();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, im).unwrap();
    std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 1, 7]).unwrap();
    assert!(matches!(data::ingest_mnist_idx(&ip, &lp), Err(Error::Format { .. })));
}

#[test]
fn digits_fixture_loads() {
    let (images, labels) = data::ingest_mnist_idx(
        &fixture("digits16-images.idx3-ubyte"),
        &fixture("digits16-labels.idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(images.shape(), &[1797, 1, 16, 16]);
    assert_eq!(labels.len(), 1797);
    assert!(labels.iter().all(|&l| l < 10));
    assert!(images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn cifar_one_record_fixture() {
    let mut rec = vec![6u8];
    for ch in 0..3u32 {
        for i in 0..1024u32 {
            rec.push(((i + ch * 85) % 256) as u8);
        }
    }
    let (images, labels) = data::parse_cifar10(&rec).unwrap();
    assert_eq!(images.shape(), &[1, 3, 32, 32]);
    assert_eq!(labels, vec![6]);
    for ch in 0..3usize {
        for i in [0usize, 1, 255, 1023] {
            let b = ((i as u32 + ch as u32 * 85) % 256) as u8;
            assert_eq!(images.data()[ch * 1024 + i], b as f32 / 127.5 - 1.0);
        }
    }
    // red plane starts at byte 0, green at 85, blue at 170
    assert_eq!(images.data()[1024], 85.0 / 127.5 - 1.0);
    assert_eq!(images.data()[2048], 170.0 / 127.5 - 1.0);
    assert!(data::parse_cifar10(&rec[..3000]).is_err());
}

#[test]
fn png_grid_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let img = Tensor::from_vec(&[1, 1, 2, 2], vec![-1.0, 1.0, 0.3, -0.77]).unwrap();
    data::emit_image_grid(&img, 1, &path).unwrap();
    let back = data::decode_png(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back.shape(), &[1, 2, 2]);
    for (a, b) in img.data().iter().zip(back.data()) {
        let (x, y) = (data::unit_to_byte(*a) as i32, data::unit_to_byte(*b) as i32);
        assert!((x - y).abs() <= 1);
    }
    assert_eq!(data::unit_to_byte(back.data()[0]), 0);
    assert_eq!(data::unit_to_byte(back.data()[1]), 255);
    assert!(data::emit_image_grid(&img, 0, &path).is_err());
}

#[test]
fn png_output_is_byte_stable() {
    let img = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|i| i as f32 / 12.0 - 1.0).collect()).unwrap();
    let a = data::image_grid_png(&img, 2).unwrap();
    let b = data::image_grid_png(&img, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn image_dir_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    for (class, v) in [("a", -1.0f32), ("b", 1.0)] {
        std::fs::create_dir(dir.path().join(class)).unwrap();
        let img = Tensor::full(&[1, 1, 2, 2], v);
        data::emit_image_grid(&img, 1, &dir.path().join(class).join("0.png")).unwrap();
    }
    let (images, labels) = data::ingest_image_dir(dir.path()).unwrap();
    assert_eq!(images.shape(), &[2, 1, 2, 2]);
    assert_eq!(labels, vec![0, 1]);
    let ds = Dataset::new(images, labels).unwrap();
    assert_eq!(ds.pad_to(4).unwrap().images.shape(), &[2, 1, 4, 4]);
}
