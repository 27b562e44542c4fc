//! Triplet dataset pipeline: filter raw artwork metadata, select style
//! attributes, caption content, and serve decoded batches.
//!
//! Ingestion starts from a local JSON Lines metadata file; one
//! [`ArtworkRecord`] per line. The build writes `manifest.jsonl` (one
//! triplet per line), `manifest.stats.json`, and `skipped.jsonl`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::captioner::{CaptionerClient, CAPTION_PROMPT};
use crate::config::DatasetConfig;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtworkRecord {
    pub image_path: String,
    #[serde(default)]
    pub artist: String,
    #[serde(default)]
    pub movement: String,
    #[serde(default)]
    pub genre: String,
    #[serde(default)]
    pub medium: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl ArtworkRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_path.is_empty() {
            return Err(Error::Dataset("record with empty image_path".into()));
        }
        Ok(())
    }

    /// Stable identifier used in skip reports and error messages.
    pub fn id(&self) -> &str {
        &self.image_path
    }
}

/// Case-insensitive exact-match exclusion lists. Values are normalized
/// (trimmed, lowercased) on both sides; substring matching is not used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub excluded_genres: Vec<String>,
    pub excluded_movements: Vec<String>,
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

impl Default for FilterRules {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            excluded_genres: d.excluded_genres,
            excluded_movements: d.excluded_movements,
        }
    }
}

impl FilterRules {
    pub fn from_config(cfg: &DatasetConfig) -> Self {
        Self {
            excluded_genres: cfg.excluded_genres.clone(),
            excluded_movements: cfg.excluded_movements.clone(),
        }
    }

    /// `Some(reason)` if the record is excluded; the reason names the
    /// matched rule, e.g. `genre:photography`.
    pub fn exclusion_reason(&self, record: &ArtworkRecord) -> Option<String> {
        let genre = normalize(&record.genre);
        if self.excluded_genres.iter().any(|g| normalize(g) == genre) && !genre.is_empty() {
            return Some(format!("genre:{genre}"));
        }
        let movement = normalize(&record.movement);
        if self
            .excluded_movements
            .iter()
            .any(|m| normalize(m) == movement)
            && !movement.is_empty()
        {
            return Some(format!("movement:{movement}"));
        }
        None
    }
}

/// Split records into kept and excluded, preserving input order.
pub fn filter_records(
    records: Vec<ArtworkRecord>,
    rules: &FilterRules,
) -> (Vec<ArtworkRecord>, Vec<(ArtworkRecord, String)>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for record in records {
        match rules.exclusion_reason(&record) {
            Some(reason) => excluded.push((record, reason)),
            None => kept.push(record),
        }
    }
    (kept, excluded)
}

/// The four style attributes, in their fixed rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StyleAttribute {
    #[serde(rename = "artist")]
    Artist,
    #[serde(rename = "artistic style")]
    ArtisticStyle,
    #[serde(rename = "genre")]
    Genre,
    #[serde(rename = "medium")]
    Medium,
}

impl StyleAttribute {
    pub fn name(self) -> &'static str {
        match self {
            StyleAttribute::Artist => "artist",
            StyleAttribute::ArtisticStyle => "artistic style",
            StyleAttribute::Genre => "genre",
            StyleAttribute::Medium => "medium",
        }
    }
}

/// Ordered style keywords plus their deterministic rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleText {
    pub keywords: Vec<(StyleAttribute, String)>,
    pub rendered: String,
}

/// Keyword values joined by `", "`, in keyword order.
pub fn render_style_keywords(keywords: &[(StyleAttribute, String)]) -> String {
    keywords
        .iter()
        .map(|(_, value)| value.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

impl StyleText {
    pub fn from_keywords(keywords: Vec<(StyleAttribute, String)>) -> Result<Self> {
        if keywords.is_empty() || keywords.len() > 4 {
            return Err(Error::Dataset(format!(
                "style text needs 1..=4 keywords, got {}",
                keywords.len()
            )));
        }
        let rendered = render_style_keywords(&keywords);
        Ok(Self { keywords, rendered })
    }

    pub fn attribute(&self, attr: StyleAttribute) -> Option<&str> {
        self.keywords
            .iter()
            .find(|(a, _)| *a == attr)
            .map(|(_, v)| v.as_str())
    }
}

/// Parse a rendered style string back into keywords, used for `--style-text`
/// command-line input. Values must not contain commas.
pub fn parse_style_text(text: &str) -> Result<StyleText> {
    let mut keywords = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, value) = part
            .split_once(':')
            .ok_or_else(|| Error::Dataset(format!("style keyword `{part}` is not `name: value`")))?;
        let attr = match normalize(name).as_str() {
            "artist" => StyleAttribute::Artist,
            "artistic style" => StyleAttribute::ArtisticStyle,
            "genre" => StyleAttribute::Genre,
            "medium" => StyleAttribute::Medium,
            other => {
                return Err(Error::Dataset(format!(
                    "unknown style attribute `{other}` (expected artist, artistic style, genre, medium)"
                )))
            }
        };
        keywords.push((attr, value.trim().to_string()));
    }
    StyleText::from_keywords(keywords)
}

/// Select the present style attributes of a record in the fixed order
/// (artist, artistic style, genre, medium). Errors if all four are empty.
pub fn select_style_attributes(record: &ArtworkRecord) -> Result<StyleText> {
    let candidates = [
        (StyleAttribute::Artist, record.artist.trim()),
        (StyleAttribute::ArtisticStyle, record.movement.trim()),
        (StyleAttribute::Genre, record.genre.trim()),
        (StyleAttribute::Medium, record.medium.trim()),
    ];
    let keywords: Vec<(StyleAttribute, String)> = candidates
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(a, v)| (a, v.to_string()))
        .collect();
    if keywords.is_empty() {
        return Err(Error::Dataset(format!(
            "record `{}` has no style attributes",
            record.id()
        )));
    }
    StyleText::from_keywords(keywords)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentSource {
    Captioner,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentText {
    pub text: String,
    pub source: ContentSource,
}

impl ContentText {
    pub fn manual(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Dataset("empty content text".into()));
        }
        Ok(Self {
            text,
            source: ContentSource::Manual,
        })
    }
}

/// One supervision unit: artwork record, content description, style
/// description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub record: ArtworkRecord,
    pub content: ContentText,
    pub style: StyleText,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub version: u32,
    pub total: usize,
    pub kept: usize,
    pub excluded: usize,
    pub skipped: usize,
    /// Exclusion counts keyed by rule reason, e.g. `genre:photography`.
    pub excluded_by_reason: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<Triplet>,
    pub stats: ManifestStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub record: ArtworkRecord,
    pub error: String,
}

impl Manifest {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.jsonl")
    }

    pub fn stats_path(dir: &Path) -> PathBuf {
        dir.join("manifest.stats.json")
    }

    pub fn skipped_path(dir: &Path) -> PathBuf {
        dir.join("skipped.jsonl")
    }

    /// Write `manifest.jsonl` + `manifest.stats.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(Self::manifest_path(dir))?);
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let stats = serde_json::to_string_pretty(&self.stats)?;
        std::fs::write(Self::stats_path(dir), stats + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = std::fs::File::open(Self::manifest_path(dir))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<Triplet>(&line)?);
        }
        let stats: ManifestStats =
            serde_json::from_str(&std::fs::read_to_string(Self::stats_path(dir))?)?;
        Ok(Self {
            version: stats.version,
            entries,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Read a JSON Lines metadata file of [`ArtworkRecord`]s.
pub fn read_metadata(path: &Path) -> Result<Vec<ArtworkRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ArtworkRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        record.validate()?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "metadata file {} contains no records",
            path.display()
        )));
    }
    Ok(records)
}

/// Caption one image. Transport failures are retried up to `max_attempts`
/// total calls; an empty response is a hard error.
pub fn generate_content_description(
    image_path: &Path,
    captioner: &dyn CaptionerClient,
    max_attempts: u32,
) -> Result<ContentText> {
    let bytes = std::fs::read(image_path).map_err(|e| Error::Captioner {
        record: image_path.display().to_string(),
        message: format!("cannot read image: {e}"),
    })?;
    let mut last_err = String::new();
    for _ in 0..max_attempts.max(1) {
        match captioner.caption(&bytes, CAPTION_PROMPT) {
            Ok(response) => {
                let text = response.trim().to_string();
                if text.is_empty() {
                    return Err(Error::Captioner {
                        record: image_path.display().to_string(),
                        message: "captioner returned an empty response".into(),
                    });
                }
                return Ok(ContentText {
                    text,
                    source: ContentSource::Captioner,
                });
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(Error::Captioner {
        record: image_path.display().to_string(),
        message: format!("all {max_attempts} attempts failed: {last_err}"),
    })
}

/// Everything produced by one manifest build.
#[derive(Debug)]
pub struct ManifestBuild {
    pub manifest: Manifest,
    pub skipped: Vec<SkippedRecord>,
}

/// Build a manifest from a metadata file: filter, select style
/// attributes, caption each kept record. Per-record failures are
/// collected into the skip report instead of aborting, unless more than
/// half of the kept records fail. Entries keep input order regardless of
/// the worker count.
pub fn build_manifest(
    metadata_file: &Path,
    image_root: &Path,
    captioner: &(dyn CaptionerClient + Sync),
    rules: &FilterRules,
    workers: usize,
    caption_attempts: u32,
) -> Result<ManifestBuild> {
    let records = read_metadata(metadata_file)?;
    let total = records.len();
    let (kept, excluded) = filter_records(records, rules);
    if kept.is_empty() {
        return Err(Error::Dataset("no records survived filtering".into()));
    }

    let results = run_captioning(&kept, image_root, captioner, workers, caption_attempts);

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (record, result) in kept.iter().zip(results) {
        match result {
            Ok(content) => {
                let style = select_style_attributes(record);
                match style {
                    Ok(style) => entries.push(Triplet {
                        record: record.clone(),
                        content,
                        style,
                    }),
                    Err(e) => skipped.push(SkippedRecord {
                        record: record.clone(),
                        error: e.to_string(),
                    }),
                }
            }
            Err(e) => skipped.push(SkippedRecord {
                record: record.clone(),
                error: e.to_string(),
            }),
        }
    }

    if skipped.len() * 2 > kept.len() {
        return Err(Error::Dataset(format!(
            "{} of {} kept records failed; aborting build",
            skipped.len(),
            kept.len()
        )));
    }

    let mut excluded_by_reason = BTreeMap::new();
    for (_, reason) in &excluded {
        *excluded_by_reason.entry(reason.clone()).or_insert(0) += 1;
    }
    let stats = ManifestStats {
        version: MANIFEST_VERSION,
        total,
        kept: kept.len(),
        excluded: excluded.len(),
        skipped: skipped.len(),
        excluded_by_reason,
    };
    Ok(ManifestBuild {
        manifest: Manifest {
            version: MANIFEST_VERSION,
            entries,
            stats,
        },
        skipped,
    })
}

/// Caption all records with bounded parallelism; results come back in
/// input order (slot per record, not completion order).
fn run_captioning(
    kept: &[ArtworkRecord],
    image_root: &Path,
    captioner: &(dyn CaptionerClient + Sync),
    workers: usize,
    caption_attempts: u32,
) -> Vec<Result<ContentText>> {
    let workers = workers.max(1);
    if workers == 1 || kept.len() == 1 {
        return kept
            .iter()
            .map(|r| generate_content_description(&image_root.join(&r.image_path), captioner, caption_attempts))
            .collect();
    }
    let mut slots: Vec<Option<Result<ContentText>>> = (0..kept.len()).map(|_| None).collect();
    let chunk = kept.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let records = &kept[w * chunk..(w * chunk + slot_chunk.len())];
            scope.spawn(move || {
                for (slot, record) in slot_chunk.iter_mut().zip(records) {
                    *slot = Some(generate_content_description(
                        &image_root.join(&record.image_path),
                        captioner,
                        caption_attempts,
                    ));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

pub fn write_skipped(dir: &Path, skipped: &[SkippedRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(Manifest::skipped_path(dir))?);
    for s in skipped {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Decoded images plus their texts, ready for the training graph.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    /// Each `[channels, size, size]`, scaled so byte 128 maps to exactly 0.
    pub images: Vec<Array3<f64>>,
    pub content_texts: Vec<String>,
    pub style_texts: Vec<StyleText>,
    pub indices: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Byte-to-latent scaling: `(p - 128) / 128`, so mid-gray (128) is exactly
/// 0.0 and the range is about [-1, 1].
pub fn byte_to_unit(p: u8) -> f64 {
    (p as f64 - 128.0) / 128.0
}

/// Inverse of [`byte_to_unit`], clamped.
pub fn unit_to_byte(v: f64) -> u8 {
    (v * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8
}

/// Decode and scale one image to `[channels, size, size]`.
pub fn load_image_tensor(path: &Path, size: usize, channels: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| {
        Error::Dataset(format!("cannot decode image `{}`: {e}", path.display()))
    })?;
    let img = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut out = Array3::<f64>::zeros((channels, size, size));
    match channels {
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = byte_to_unit(p.0[c]);
                }
            }
        }
        4 => {
            let rgba = img.to_rgba8();
            for (x, y, p) in rgba.enumerate_pixels() {
                for c in 0..4 {
                    out[[c, y as usize, x as usize]] = byte_to_unit(p.0[c]);
                }
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {other} (expected 3 or 4)"
            )))
        }
    }
    Ok(out)
}

/// Write a `[channels, size, size]` tensor in [-1, 1] as a lossless PNG.
pub fn save_image_tensor(path: &Path, tensor: &Array3<f64>) -> Result<()> {
    let (c, h, w) = tensor.dim();
    match c {
        3 => {
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        unit_to_byte(tensor[[0, y, x]]),
                        unit_to_byte(tensor[[1, y, x]]),
                        unit_to_byte(tensor[[2, y, x]]),
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            img.save(path)?;
        }
        4 => {
            let mut img = image::RgbaImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        unit_to_byte(tensor[[0, y, x]]),
                        unit_to_byte(tensor[[1, y, x]]),
                        unit_to_byte(tensor[[2, y, x]]),
                        unit_to_byte(tensor[[3, y, x]]),
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgba(px));
                }
            }
            img.save(path)?;
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {other}"
            )))
        }
    }
    Ok(())
}

/// Load a batch of manifest entries by index. Image paths are resolved
/// against `image_root`; texts are carried verbatim.
pub fn load_triplet_batch(
    manifest: &Manifest,
    indices: &[usize],
    image_size: usize,
    channels: usize,
    image_root: &Path,
) -> Result<TripletBatch> {
    let mut images = Vec::with_capacity(indices.len());
    let mut content_texts = Vec::with_capacity(indices.len());
    let mut style_texts = Vec::with_capacity(indices.len());
    for &i in indices {
        let entry = manifest.entries.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "index {i} out of range for manifest of {} entries",
                manifest.len()
            ))
        })?;
        let path = image_root.join(&entry.record.image_path);
        let img = load_image_tensor(&path, image_size, channels).map_err(|e| {
            Error::Dataset(format!("entry {i} (`{}`): {e}", entry.record.image_path))
        })?;
        images.push(img);
        content_texts.push(entry.content.text.clone());
        style_texts.push(entry.style.clone());
    }
    Ok(TripletBatch {
        images,
        content_texts,
        style_texts,
        indices: indices.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::EchoCaptioner;
    use proptest::prelude::*;

    fn record(artist: &str, movement: &str, genre: &str, medium: &str) -> ArtworkRecord {
        ArtworkRecord {
            image_path: format!("img/{artist}.png"),
            artist: artist.into(),
            movement: movement.into(),
            genre: genre.into(),
            medium: medium.into(),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn photography_is_excluded_with_reason() {
        let rules = FilterRules::default();
        let (kept, excluded) = filter_records(
            vec![record("x", "Realism", "photography", "print")],
            &rules,
        );
        assert!(kept.is_empty());
        assert_eq!(excluded[0].1, "genre:photography");
    }

    #[test]
    fn matching_is_case_insensitive_and_exact() {
        let rules = FilterRules::default();
        let records = vec![
            record("a", "ABSTRACT", "landscape", "oil"), // movement matches
            record("b", "Abstract Expressionism", "landscape", "oil"), // no substring match
            record("c", "Impressionism", " Photography ", "oil"), // trimmed genre matches
        ];
        let (kept, excluded) = filter_records(records, &rules);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].artist, "b");
        assert_eq!(excluded.len(), 2);
        assert_eq!(excluded[0].1, "movement:abstract");
        assert_eq!(excluded[1].1, "genre:photography");
    }

    #[test]
    fn filtering_is_idempotent() {
        let rules = FilterRules::default();
        let records = vec![
            record("a", "Impressionism", "landscape", "oil"),
            record("b", "Abstract", "landscape", "oil"),
            record("c", "Cubism", "portrait", "oil"),
        ];
        let (kept, _) = filter_records(records, &rules);
        let (kept2, excluded2) = filter_records(kept.clone(), &rules);
        assert_eq!(kept, kept2);
        assert!(excluded2.is_empty());
    }

    proptest! {
        #[test]
        fn filtering_is_permutation_equivariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rules = FilterRules::default();
            let mut records: Vec<ArtworkRecord> = (0..8)
                .map(|i| {
                    let genre = if i % 3 == 0 { "photography" } else { "landscape" };
                    let mut r = record(&format!("artist{i}"), "Impressionism", genre, "oil");
                    r.image_path = format!("img/{i}.png");
                    r
                })
                .collect();
            let (kept_a, _) = filter_records(records.clone(), &rules);
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            records.shuffle(&mut rng);
            let (kept_b, _) = filter_records(records.clone(), &rules);
            // same kept set, order following the shuffled input
            let expected: Vec<_> = records
                .iter()
                .filter(|r| rules.exclusion_reason(r).is_none())
                .cloned()
                .collect();
            prop_assert_eq!(kept_b, expected);
            prop_assert_eq!(kept_a.len(), 5);
        }
    }

    #[test]
    fn style_attributes_fixed_order() {
        let r = record("Vincent van Gogh", "Post-Impressionism", "landscape", "oil");
        let s = select_style_attributes(&r).unwrap();
        assert_eq!(s.keywords.len(), 4);
        assert_eq!(
            s.rendered,
            "Vincent van Gogh, Post-Impressionism, landscape, oil"
        );
        let names: Vec<_> = s.keywords.iter().map(|(a, _)| a.name()).collect();
        assert_eq!(names, vec!["artist", "artistic style", "genre", "medium"]);
    }

    #[test]
    fn style_attributes_single_field() {
        let r = record("Monet", "", "", "");
        let s = select_style_attributes(&r).unwrap();
        assert_eq!(s.keywords, vec![(StyleAttribute::Artist, "Monet".to_string())]);
        assert_eq!(s.rendered, "Monet");
    }

    #[test]
    fn style_attributes_all_empty_is_error() {
        let r = record("", "", "", "");
        assert!(select_style_attributes(&r).is_err());
    }

    #[test]
    fn style_text_parse() {
        let s = parse_style_text("artist: X, medium: oil").unwrap();
        assert_eq!(
            s.keywords,
            vec![
                (StyleAttribute::Artist, "X".to_string()),
                (StyleAttribute::Medium, "oil".to_string())
            ]
        );
        assert_eq!(s.rendered, "X, oil");
        assert!(parse_style_text("painter: X").is_err());
        assert!(parse_style_text("").is_err());
    }

    #[test]
    fn caption_retry_then_success() {
        use std::sync::atomic::{AtomicU32, Ordering};
        struct Flaky(AtomicU32);
        impl CaptionerClient for Flaky {
            fn caption(&self, _image: &[u8], _prompt: &str) -> Result<String> {
                let n = self.0.fetch_add(1, Ordering::SeqCst);
                if n < 2 {
                    Err(Error::Dataset("transient".into()))
                } else {
                    Ok("A vase of flowers on a table.".into())
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        image::RgbaImage::new(4, 4).save(&img).unwrap();

        let flaky = Flaky(AtomicU32::new(0));
        let content = generate_content_description(&img, &flaky, 3).unwrap();
        assert_eq!(content.text, "A vase of flowers on a table.");
        assert_eq!(content.source, ContentSource::Captioner);
        assert_eq!(flaky.0.load(Ordering::SeqCst), 3);

        // two attempts are not enough
        let flaky = Flaky(AtomicU32::new(0));
        assert!(generate_content_description(&img, &flaky, 2).is_err());
    }

    #[test]
    fn caption_empty_response_is_error() {
        struct Empty;
        impl CaptionerClient for Empty {
            fn caption(&self, _image: &[u8], _prompt: &str) -> Result<String> {
                Ok("   ".into())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        image::RgbaImage::new(4, 4).save(&img).unwrap();
        assert!(generate_content_description(&img, &Empty, 3).is_err());
    }

    #[test]
    fn caption_prompt_is_verbatim() {
        struct PromptCheck;
        impl CaptionerClient for PromptCheck {
            fn caption(&self, _image: &[u8], prompt: &str) -> Result<String> {
                assert_eq!(prompt, "<image>, describe the content of this picture briefly.");
                Ok("ok".into())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        image::RgbaImage::new(4, 4).save(&img).unwrap();
        generate_content_description(&img, &PromptCheck, 1).unwrap();
    }

    fn write_fixture_images(root: &Path, records: &[ArtworkRecord]) {
        std::fs::create_dir_all(root.join("img")).unwrap();
        for (i, r) in records.iter().enumerate() {
            let mut img = image::RgbaImage::new(8, 8);
            for p in img.pixels_mut() {
                *p = image::Rgba([i as u8 * 20, 60, 200, 255]);
            }
            img.save(root.join(&r.image_path)).unwrap();
        }
    }

    #[test]
    fn manifest_build_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record("a", "Impressionism", "landscape", "oil"),
            record("b", "Cubism", "portrait", "oil"),
            record("c", "Realism", "photography", "print"),
        ];
        write_fixture_images(dir.path(), &records);
        let meta = dir.path().join("meta.jsonl");
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        std::fs::write(&meta, text).unwrap();

        let build = build_manifest(
            &meta,
            dir.path(),
            &EchoCaptioner,
            &FilterRules::default(),
            1,
            3,
        )
        .unwrap();
        assert_eq!(build.manifest.entries.len(), 2);
        assert_eq!(build.manifest.stats.kept, 2);
        assert_eq!(build.manifest.stats.excluded, 1);
        assert_eq!(build.manifest.stats.total, 3);

        let out = dir.path().join("out");
        build.manifest.save(&out).unwrap();
        let loaded = Manifest::load(&out).unwrap();
        assert_eq!(loaded, build.manifest);
    }

    #[test]
    fn skipped_records_below_threshold_do_not_abort() {
        struct FailOne;
        impl CaptionerClient for FailOne {
            fn caption(&self, image: &[u8], _prompt: &str) -> Result<String> {
                // fail for the image whose pixels were painted with value 0
                if image.len() > 100 && {
                    let img = image::load_from_memory(image).unwrap().to_rgba8();
                    img.get_pixel(0, 0).0[0] == 0
                } {
                    Err(Error::Dataset("permanent failure".into()))
                } else {
                    Ok("a caption".into())
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<ArtworkRecord> = (0..5)
            .map(|i| {
                let mut r = record(&format!("artist{i}"), "Impressionism", "landscape", "oil");
                r.image_path = format!("img/{i}.png");
                r
            })
            .collect();
        write_fixture_images(dir.path(), &records);
        let meta = dir.path().join("meta.jsonl");
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        std::fs::write(&meta, text).unwrap();

        let build =
            build_manifest(&meta, dir.path(), &FailOne, &FilterRules::default(), 1, 1).unwrap();
        assert_eq!(build.manifest.entries.len(), 4);
        assert_eq!(build.skipped.len(), 1);
        assert_eq!(build.manifest.stats.skipped, 1);
    }

    #[test]
    fn empty_metadata_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("meta.jsonl");
        std::fs::write(&meta, "\n\n").unwrap();
        assert!(read_metadata(&meta).is_err());
    }

    #[test]
    fn batch_loading_contracts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("img")).unwrap();
        // constant mid-gray image: every byte 128 → exactly 0.0 after scaling
        let mut img = image::RgbaImage::new(8, 8);
        for p in img.pixels_mut() {
            *p = image::Rgba([128, 128, 128, 128]);
        }
        img.save(dir.path().join("img/g.png")).unwrap();

        let triplet = Triplet {
            record: ArtworkRecord {
                image_path: "img/g.png".into(),
                artist: "a".into(),
                movement: "m".into(),
                genre: "g".into(),
                medium: "oil".into(),
                extra: BTreeMap::new(),
            },
            content: ContentText::manual("a gray square").unwrap(),
            style: parse_style_text("artist: a").unwrap(),
        };
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            entries: vec![triplet],
            stats: ManifestStats::default(),
        };

        let batch = load_triplet_batch(&manifest, &[0], 16, 4, dir.path()).unwrap();
        assert_eq!(batch.images[0].dim(), (4, 16, 16));
        assert!(batch.images[0].iter().all(|&v| v == 0.0));
        assert_eq!(batch.content_texts[0], "a gray square");

        assert!(load_triplet_batch(&manifest, &[1], 16, 4, dir.path()).is_err());
    }

    #[test]
    fn byte_scaling_round_trip() {
        assert_eq!(byte_to_unit(128), 0.0);
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(unit_to_byte(0.0), 128);
        for b in [0u8, 1, 64, 127, 128, 200, 255] {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }
}
