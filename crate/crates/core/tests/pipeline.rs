//! Integration flow over the checked-in 10-record fixture: filter, build,
//! round-trip, batch-load.

use std::path::Path;

use stylediff_core::captioner::EchoCaptioner;
use stylediff_core::dataset::{
    build_manifest, filter_records, load_triplet_batch, read_metadata, FilterRules, Manifest,
};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/records.jsonl");

/// Deterministic tiny PNGs for the fixture records.
fn write_fixture_images(root: &Path) {
    std::fs::create_dir_all(root.join("img")).unwrap();
    for i in 1..=10u32 {
        let mut img = image::RgbaImage::new(8, 8);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgba([(i * 17) as u8, (x * 30) as u8, (y * 30) as u8, 255]);
        }
        img.save(root.join(format!("img/{i:04}.png"))).unwrap();
    }
}

#[test]
fn fixture_filters_to_seven() {
    let records = read_metadata(Path::new(FIXTURE)).unwrap();
    assert_eq!(records.len(), 10);
    let (kept, excluded) = filter_records(records, &FilterRules::default());
    assert_eq!(kept.len(), 7);
    assert_eq!(excluded.len(), 3);
    let reasons: Vec<&str> = excluded.iter().map(|(_, r)| r.as_str()).collect();
    assert!(reasons.contains(&"genre:photography"));
    assert!(reasons.contains(&"movement:abstract"));
    assert!(reasons.contains(&"genre:design drawings"));
}

#[test]
fn fixture_build_is_deterministic_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_images(dir.path());

    let build = |out: &Path| {
        let b = build_manifest(
            Path::new(FIXTURE),
            dir.path(),
            &EchoCaptioner,
            &FilterRules::default(),
            2,
            3,
        )
        .unwrap();
        b.manifest.save(out).unwrap();
        stylediff_core::dataset::write_skipped(out, &b.skipped).unwrap();
        b
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let a = build(&out_a);
    build(&out_b);

    assert_eq!(a.manifest.len(), 7);
    assert_eq!(a.manifest.stats.kept, 7);
    assert_eq!(a.manifest.stats.excluded, 3);
    assert_eq!(a.manifest.stats.total, 10);
    assert!(a.skipped.is_empty());

    // byte-identical across runs
    for file in ["manifest.jsonl", "manifest.stats.json", "skipped.jsonl"] {
        let ba = std::fs::read(out_a.join(file)).unwrap();
        let bb = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(ba, bb, "{file} differs between runs");
    }

    // structural round trip
    let loaded = Manifest::load(&out_a).unwrap();
    assert_eq!(loaded, a.manifest);

    // batch loading honors shape and scaling contracts
    let batch = load_triplet_batch(&loaded, &[0, 3], 16, 4, dir.path()).unwrap();
    assert_eq!(batch.images.len(), 2);
    assert_eq!(batch.images[0].dim(), (4, 16, 16));
    assert!(batch.images[0].iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(batch.style_texts[0].rendered.contains("Post-Impressionism"), true);
}
