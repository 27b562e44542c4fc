//! Quantitative metrics over directories of generated images: style
//! similarity (SS), text alignment (TA), and image quality (IQ).
//!
//! SS and TA are cosine similarities in the embedding space of a
//! pluggable [`Embedder`]; IQ delegates to a pluggable
//! [`QualityPredictor`]. The shipped stubs are deterministic and
//! self-contained; real CLIP-style or aesthetic-predictor backends plug
//! in behind the same traits.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{Manifest, StyleAttribute, StyleText};
use crate::error::{Error, Result};

pub trait Embedder {
    /// Unit-norm embedding of an image (`[c,h,w]`, values in [-1, 1]).
    fn embed_image(&self, image: &Array3<f64>) -> Result<Array1<f64>>;
    /// Unit-norm embedding of a text in the same space.
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

pub trait QualityPredictor {
    fn score(&self, image: &Array3<f64>) -> Result<f64>;
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("[{}]", a.len()), format!("[{}]", b.len())));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-9 || nb < 1e-9 {
        return Err(Error::Eval("zero-norm embedding".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Render the style-similarity prompt. The first slot takes the artist,
/// the second the genre; at least one must be present.
pub fn render_style_prompt(style: &StyleText) -> Result<String> {
    let artist = style.attribute(StyleAttribute::Artist);
    let genre = style.attribute(StyleAttribute::Genre);
    if artist.is_none() && genre.is_none() {
        return Err(Error::Eval(
            "style similarity needs an artist or genre keyword".into(),
        ));
    }
    Ok(format!(
        "the painter is {}, the theme is {}",
        artist.unwrap_or(""),
        genre.unwrap_or("")
    ))
}

/// Cosine similarity between the image and the rendered style prompt.
pub fn style_similarity(
    image: &Array3<f64>,
    style: &StyleText,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let prompt = render_style_prompt(style)?;
    let ie = embedder.embed_image(image)?;
    let te = embedder.embed_text(&prompt)?;
    cosine(&ie, &te)
}

/// Cosine similarity between the image and its content prompt.
pub fn text_alignment(
    image: &Array3<f64>,
    content_prompt: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let ie = embedder.embed_image(image)?;
    let te = embedder.embed_text(content_prompt)?;
    cosine(&ie, &te)
}

/// Delegate to the quality predictor.
pub fn image_quality(image: &Array3<f64>, predictor: &dyn QualityPredictor) -> Result<f64> {
    predictor.score(image)
}

/// Deterministic offline embedder: texts hash to a seeded random unit
/// vector; images reduce to a mean-centered 4x4 grayscale thumbnail.
/// Not a semantic embedding; exists so the metric plumbing runs without
/// external weights.
pub struct StubEmbedder {
    pub dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self { dim: 16 }
    }
}

fn grayscale(image: &Array3<f64>) -> ndarray::Array2<f64> {
    let (c, h, w) = image.dim();
    let mut out = ndarray::Array2::<f64>::zeros((h, w));
    let channels = c.min(3); // ignore alpha
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ci in 0..channels {
                s += image[[ci, y, x]];
            }
            out[[y, x]] = s / channels as f64;
        }
    }
    out
}

impl Embedder for StubEmbedder {
    fn embed_image(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        let gray = grayscale(image);
        let (h, w) = gray.dim();
        let side = 4usize;
        let mut v = Array1::<f64>::zeros(self.dim);
        for gy in 0..side {
            for gx in 0..side {
                let y0 = gy * h / side;
                let y1 = ((gy + 1) * h / side).max(y0 + 1);
                let x0 = gx * w / side;
                let x1 = ((gx + 1) * w / side).max(x0 + 1);
                let mut s = 0.0;
                let mut n = 0.0f64;
                for y in y0..y1.min(h) {
                    for x in x0..x1.min(w) {
                        s += gray[[y, x]];
                        n += 1.0;
                    }
                }
                v[gy * side + gx] = s / n.max(1.0);
            }
        }
        let mean = v.iter().take(16).sum::<f64>() / 16.0;
        for i in 0..16 {
            v[i] -= mean;
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-9 {
            // constant image: fixed basis direction
            let mut e = Array1::<f64>::zeros(self.dim);
            e[0] = 1.0;
            return Ok(e);
        }
        Ok(v / norm)
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut v = Array1::<f64>::zeros(self.dim);
        for x in v.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        let norm = v.dot(&v).sqrt();
        Ok(v / norm)
    }
}

/// Mean absolute difference between horizontally and vertically adjacent
/// grayscale pixels, in [0, 1]. A flat image scores 0; a pixel
/// checkerboard scores the maximum 1. Clearly labeled: this is a local
/// contrast statistic, not an aesthetic model.
pub struct ContrastStub;

impl QualityPredictor for ContrastStub {
    fn score(&self, image: &Array3<f64>) -> Result<f64> {
        let gray = grayscale(image);
        let (h, w) = gray.dim();
        if h < 2 || w < 2 {
            return Err(Error::Eval("image too small for contrast statistic".into()));
        }
        // map from [-1,1] to [0,1] so the score lands in [0,1]
        let g = gray.mapv(|v| (v + 1.0) / 2.0);
        let mut total = 0.0;
        let mut count = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    total += (g[[y, x]] - g[[y, x + 1]]).abs();
                    count += 1.0;
                }
                if y + 1 < h {
                    total += (g[[y, x]] - g[[y + 1, x]]).abs();
                    count += 1.0;
                }
            }
        }
        Ok(total / count)
    }
}

/// Prompt rows matched to generated images by filename stem.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub id: String,
    pub entries: BTreeMap<String, PromptEntry>,
}

#[derive(Debug, Clone)]
pub struct PromptEntry {
    pub content_text: String,
    pub style: Option<StyleText>,
}

fn stem_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

impl PromptSet {
    pub fn from_manifest(manifest: &Manifest, id: impl Into<String>) -> Self {
        let mut entries = BTreeMap::new();
        for t in &manifest.entries {
            entries.insert(
                stem_of(&t.record.image_path),
                PromptEntry {
                    content_text: t.content.text.clone(),
                    style: Some(t.style.clone()),
                },
            );
        }
        Self {
            id: id.into(),
            entries,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub stem: String,
    pub ss: Option<f64>,
    pub ta: f64,
    pub iq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Population mean and standard deviation.
pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
            n: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Aggregate {
        mean,
        std: var.sqrt(),
        n,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub ss: Aggregate,
    pub ta: Aggregate,
    pub iq: Aggregate,
    pub unmatched: Vec<String>,
    pub checkpoint_id: Option<String>,
    pub prompt_set_id: String,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("stem,ss,ta,iq\n");
        for row in &self.rows {
            let ss = row.ss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", row.stem, ss, row.ta, row.iq));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Compute per-image metrics for every PNG in `images_dir` whose stem
/// matches a prompt entry; unmatched files are listed and excluded from
/// the aggregates. Rows are ordered by filename.
pub fn evaluate_run(
    images_dir: &Path,
    prompts: &PromptSet,
    embedder: &dyn Embedder,
    predictor: &dyn QualityPredictor,
    checkpoint_id: Option<String>,
) -> Result<EvalReport> {
    let mut files: Vec<String> = std::fs::read_dir(images_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Eval(format!(
            "no .png files in {}",
            images_dir.display()
        )));
    }

    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for file in files {
        let stem = stem_of(&file);
        let Some(entry) = prompts.entries.get(&stem) else {
            unmatched.push(file);
            continue;
        };
        let image = load_eval_image(&images_dir.join(&file))?;
        let ta = text_alignment(&image, &entry.content_text, embedder)?;
        let iq = image_quality(&image, predictor)?;
        // SS is undefined when the prompt has neither artist nor genre;
        // such rows keep TA/IQ and drop out of the SS aggregate
        let ss = entry
            .style
            .as_ref()
            .filter(|style| render_style_prompt(style).is_ok())
            .map(|style| style_similarity(&image, style, embedder))
            .transpose()?;
        rows.push(EvalRow { stem, ss, ta, iq });
    }
    if rows.is_empty() {
        return Err(Error::Eval("no image matched a prompt entry".into()));
    }

    let ss_vals: Vec<f64> = rows.iter().filter_map(|r| r.ss).collect();
    let ta_vals: Vec<f64> = rows.iter().map(|r| r.ta).collect();
    let iq_vals: Vec<f64> = rows.iter().map(|r| r.iq).collect();
    Ok(EvalReport {
        ss: aggregate(&ss_vals),
        ta: aggregate(&ta_vals),
        iq: aggregate(&iq_vals),
        rows,
        unmatched,
        checkpoint_id,
        prompt_set_id: prompts.id.clone(),
    })
}

/// Decode an image at native size as `[4,h,w]` in [-1, 1].
pub fn load_eval_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Eval(format!("cannot decode `{}`: {e}", path.display())))?;
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut out = Array3::<f64>::zeros((4, h as usize, w as usize));
    for (x, y, p) in rgba.enumerate_pixels() {
        for c in 0..4 {
            out[[c, y as usize, x as usize]] = crate::dataset::byte_to_unit(p.0[c]);
        }
    }
    Ok(out)
}
