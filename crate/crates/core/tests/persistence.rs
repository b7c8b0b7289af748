use vitsplit::config::RunConfig;
use vitsplit::data::{synthesize, SyntheticSpec};
use vitsplit::persist::{dataset_to_container, ingest_image_dir, load_dataset, save_dataset, Container, TAG_DATASET};
use vitsplit::pipeline;

// crc32 of the dataset container for the default synthetic spec, pinned from
// this implementation as a regression guard
const SYNTHETIC_GOLDEN_CRC: u32 = 0x2144_df1c;

#[test]
fn synthetic_dataset_checksum_is_pinned() {
    let d = synthesize(&SyntheticSpec::default()).unwrap();
    assert_eq!(d.len(), 400);
    assert_eq!(d.class_counts(), vec![50; 8]);
    let bytes = dataset_to_container(&d).unwrap().to_bytes().unwrap();
    let crc = crc32fast::hash(&bytes);
    assert_eq!(crc, SYNTHETIC_GOLDEN_CRC, "crc {crc:#010x}");
}

#[test]
fn ingest_writes_a_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { out_dir: dir.path().to_path_buf(), ..RunConfig::default() };
    let d = pipeline::ingest(&cfg, false).unwrap();
    let back = load_dataset(&dir.path().join("data/dataset.vtsp")).unwrap();
    assert_eq!(back.pixels, d.pixels);
    assert_eq!(back.labels, d.labels);
}

#[test]
fn file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.vtsp");
    let d = synthesize(&SyntheticSpec { per_class: 3, channels: 3, ..Default::default() }).unwrap();
    save_dataset(&p, &d, false).unwrap();
    let first = std::fs::read(&p).unwrap();
    let c = Container::read(&p, Some(TAG_DATASET)).unwrap();
    assert_eq!(c.to_bytes().unwrap(), first);
}

#[test]
fn empty_image_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ingest_image_dir(dir.path(), 8, 1).is_err());
    std::fs::create_dir(dir.path().join("cat")).unwrap();
    assert!(ingest_image_dir(dir.path(), 8, 1).is_err());
}
