//! Synthetic 4-channel latent dataset with two content classes (bright
//! left half vs bright top half) and two style classes (horizontal vs
//! vertical high-frequency stripes), stored as RGBA PNGs plus a regular
//! manifest. Used by the end-to-end training checks and the CLI's
//! `--synthetic` dataset builder.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    ArtworkRecord, ContentText, Manifest, ManifestStats, StyleAttribute, StyleText, Triplet,
    MANIFEST_VERSION,
};
use crate::error::Result;

pub const CONTENT_AMPLITUDE: f64 = 0.45;
pub const STRIPE_AMPLITUDE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyContent {
    Left,
    Top,
}

impl ToyContent {
    pub const ALL: [ToyContent; 2] = [ToyContent::Left, ToyContent::Top];

    pub fn text(self) -> &'static str {
        match self {
            ToyContent::Left => "left",
            ToyContent::Top => "top",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyStyle {
    Horizontal,
    Vertical,
}

impl ToyStyle {
    pub const ALL: [ToyStyle; 2] = [ToyStyle::Horizontal, ToyStyle::Vertical];

    pub fn text(self) -> &'static str {
        match self {
            ToyStyle::Horizontal => "horizontal stripes",
            ToyStyle::Vertical => "vertical stripes",
        }
    }

    pub fn style_text(self) -> StyleText {
        StyleText::from_keywords(vec![(StyleAttribute::ArtisticStyle, self.text().to_string())])
            .expect("one keyword is valid")
    }
}

/// Noise-free class pattern for one (content, style) cell, identical
/// across the four channels.
pub fn class_pattern(content: ToyContent, style: ToyStyle, size: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((4, size, size));
    for y in 0..size {
        for x in 0..size {
            let content_term = match content {
                ToyContent::Left => {
                    if x < size / 2 {
                        CONTENT_AMPLITUDE
                    } else {
                        -CONTENT_AMPLITUDE
                    }
                }
                ToyContent::Top => {
                    if y < size / 2 {
                        CONTENT_AMPLITUDE
                    } else {
                        -CONTENT_AMPLITUDE
                    }
                }
            };
            let phase = match style {
                ToyStyle::Horizontal => y,
                ToyStyle::Vertical => x,
            };
            let stripe_term = if (phase / 2) % 2 == 0 {
                STRIPE_AMPLITUDE
            } else {
                -STRIPE_AMPLITUDE
            };
            for c in 0..4 {
                out[[c, y, x]] = content_term + stripe_term;
            }
        }
    }
    out
}

/// One noisy sample of a cell, clamped to the byte-representable range.
pub fn toy_latent(
    content: ToyContent,
    style: ToyStyle,
    size: usize,
    noise_std: f64,
    rng: &mut ChaCha12Rng,
) -> Array3<f64> {
    let mut latent = class_pattern(content, style, size);
    if noise_std > 0.0 {
        let dist = Normal::new(0.0, noise_std).unwrap();
        for v in latent.iter_mut() {
            *v = (*v + dist.sample(rng)).clamp(-1.0, 0.99);
        }
    }
    latent
}

#[derive(Debug, Clone, Copy)]
pub struct ToyDatasetSpec {
    pub samples_per_cell: usize,
    pub image_size: usize,
    pub noise_std: f64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            samples_per_cell: 64,
            image_size: 16,
            noise_std: 0.05,
        }
    }
}

/// Write the synthetic dataset under `dir` (PNGs in `img/`, manifest
/// files at the top level) and return the manifest.
pub fn generate_toy_dataset(
    dir: &Path,
    spec: ToyDatasetSpec,
    rng: &mut ChaCha12Rng,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("img"))?;
    let mut entries = Vec::new();
    for content in ToyContent::ALL {
        for style in ToyStyle::ALL {
            for i in 0..spec.samples_per_cell {
                let latent = toy_latent(content, style, spec.image_size, spec.noise_std, rng);
                let rel = format!(
                    "img/{}_{}_{i:03}.png",
                    content.text().replace(' ', "-"),
                    style.text().replace(' ', "-")
                );
                crate::dataset::save_image_tensor(&dir.join(&rel), &latent)?;
                entries.push(Triplet {
                    record: ArtworkRecord {
                        image_path: rel,
                        artist: String::new(),
                        movement: style.text().to_string(),
                        genre: String::new(),
                        medium: String::new(),
                        extra: BTreeMap::new(),
                    },
                    content: ContentText::manual(content.text())?,
                    style: style.style_text(),
                });
            }
        }
    }
    let total = entries.len();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        entries,
        stats: ManifestStats {
            version: MANIFEST_VERSION,
            total,
            kept: total,
            excluded: 0,
            skipped: 0,
            excluded_by_reason: BTreeMap::new(),
        },
    };
    manifest.save(dir)?;
    crate::dataset::write_skipped(dir, &[])?;
    Ok(manifest)
}

/// Class centroids in raw latent space, computed from a set of labeled
/// latents. Content centroids average over both styles and vice versa, so
/// the orthogonal factor cancels.
#[derive(Debug, Clone)]
pub struct ClassCentroids {
    pub content: [(ToyContent, Array3<f64>); 2],
    pub style: [(ToyStyle, Array3<f64>); 2],
}

pub fn centroids_from_samples(
    samples: &[(ToyContent, ToyStyle, Array3<f64>)],
) -> ClassCentroids {
    let shape = samples[0].2.dim();
    let mut content_sum = [Array3::<f64>::zeros(shape), Array3::<f64>::zeros(shape)];
    let mut content_count = [0usize; 2];
    let mut style_sum = [Array3::<f64>::zeros(shape), Array3::<f64>::zeros(shape)];
    let mut style_count = [0usize; 2];
    for (content, style, latent) in samples {
        let ci = *content as usize;
        let si = *style as usize;
        content_sum[ci] += latent;
        content_count[ci] += 1;
        style_sum[si] += latent;
        style_count[si] += 1;
    }
    for i in 0..2 {
        content_sum[i] /= content_count[i].max(1) as f64;
        style_sum[i] /= style_count[i].max(1) as f64;
    }
    let [cl, ct] = content_sum;
    let [sh, sv] = style_sum;
    ClassCentroids {
        content: [(ToyContent::Left, cl), (ToyContent::Top, ct)],
        style: [(ToyStyle::Horizontal, sh), (ToyStyle::Vertical, sv)],
    }
}

fn sq_dist(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-centroid classification of each factor independently.
pub fn classify(latent: &Array3<f64>, centroids: &ClassCentroids) -> (ToyContent, ToyStyle) {
    let content = if sq_dist(latent, &centroids.content[0].1) <= sq_dist(latent, &centroids.content[1].1)
    {
        centroids.content[0].0
    } else {
        centroids.content[1].0
    };
    let style = if sq_dist(latent, &centroids.style[0].1) <= sq_dist(latent, &centroids.style[1].1) {
        centroids.style[0].0
    } else {
        centroids.style[1].0
    };
    (content, style)
}
