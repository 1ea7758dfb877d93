//! Mining id-like outliers from random crops of the few-shot images.
//!
//! Each ID sample is cropped M times; crops are ranked by cosine similarity
//! to the zero-shot prompt of the sample's ground-truth class, and the top Q
//! become extra ID training data while the bottom Q become outliers. Crop
//! RNG streams are keyed by `(seed, image_index)`, so per-image output does
//! not depend on processing order.

use rand::Rng;

use crate::embed::{cosine_similarity, Embedding};
use crate::encoder::{zero_shot_class_embeddings, Backend, CropBox, ImageRef};
use crate::rng::stream_rng;
use crate::{Error, Float, Result};

const CROP_ATTEMPTS: usize = 100;
const STREAM_CROPS: u64 = 0x10;

/// Crop-mining parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MinerConfig {
    /// Crops drawn per image.
    pub crops_per_image: usize,
    /// Crops kept per side (top Q into d_in, bottom Q into d_out).
    pub keep_per_side: usize,
    /// Crop area as a fraction of image area, sampled uniformly.
    pub scale_range: (f64, f64),
    /// Width/height ratio, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            crops_per_image: 256,
            keep_per_side: 32,
            scale_range: (0.1, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crops_per_image < 2 * self.keep_per_side {
            return Err(Error::InsufficientCrops {
                needed: 2 * self.keep_per_side,
                got: self.crops_per_image,
            });
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::InvalidConfig(format!(
                "aspect_range ({alo}, {ahi}) must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

/// One mined in-distribution crop: embedding plus audit fields.
#[derive(Debug, Clone)]
pub struct MinedExample<T: Float> {
    pub embedding: Embedding<T>,
    pub label: usize,
    pub source_index: usize,
    pub sim: T,
    pub crop_box: CropBox,
    pub crop_id: String,
}

/// One mined outlier crop; no label by construction.
#[derive(Debug, Clone)]
pub struct MinedOutlier<T: Float> {
    pub embedding: Embedding<T>,
    pub source_index: usize,
    pub sim: T,
    pub crop_box: CropBox,
    pub crop_id: String,
}

/// The mined training sets: d_in (labeled) and d_out (unlabeled).
#[derive(Debug, Clone, Default)]
pub struct MinedDatasets<T: Float> {
    pub d_in: Vec<MinedExample<T>>,
    pub d_out: Vec<MinedOutlier<T>>,
}

/// Draw M crop windows for one image.
///
/// The RNG stream depends only on `(cfg.seed, image_index)`. Windows that do
/// not fit after 100 attempts fall back to a centered square crop.
pub fn generate_crops(
    img: &ImageRef,
    cfg: &MinerConfig,
    image_index: u64,
) -> Result<Vec<ImageRef>> {
    cfg.validate()?;
    let region = img.region()?;
    let (width, height) = (region.w, region.h);
    if width == 0 || height == 0 {
        return Err(Error::DegenerateImage(img.id.clone()));
    }
    let area = (width * height) as f64;
    let mut rng = stream_rng(cfg.seed, STREAM_CROPS, image_index);
    let mut crops = Vec::with_capacity(cfg.crops_per_image);
    for j in 0..cfg.crops_per_image {
        let mut chosen: Option<CropBox> = None;
        for _ in 0..CROP_ATTEMPTS {
            let target_area = area * rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
            let log_aspect =
                rng.gen_range(cfg.aspect_range.0.ln()..=cfg.aspect_range.1.ln());
            let aspect = log_aspect.exp();
            let w = (target_area * aspect).sqrt().round() as usize;
            let h = (target_area / aspect).sqrt().round() as usize;
            if w >= 1 && h >= 1 && w <= width && h <= height {
                let x = rng.gen_range(0..=width - w);
                let y = rng.gen_range(0..=height - h);
                chosen = Some(CropBox {
                    x: region.x + x,
                    y: region.y + y,
                    w,
                    h,
                });
                break;
            }
        }
        let crop = chosen.unwrap_or_else(|| {
            let side = width.min(height);
            CropBox {
                x: region.x + (width - side) / 2,
                y: region.y + (height - side) / 2,
                w: side,
                h: side,
            }
        });
        crops.push(img.with_crop(format!("{}#crop{}", img.id, j), crop));
    }
    Ok(crops)
}

/// Indices of the Q most and Q least similar crops.
///
/// Ties prefer the lower crop index; the bottom set is chosen from crops not
/// already taken by the top set, so the two never overlap.
pub fn filter_crops<T: Float>(
    crop_embs: &[Embedding<T>],
    class_prompt_emb: &Embedding<T>,
    keep_per_side: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if crop_embs.len() < 2 * keep_per_side {
        return Err(Error::InsufficientCrops {
            needed: 2 * keep_per_side,
            got: crop_embs.len(),
        });
    }
    let sims = crop_embs
        .iter()
        .map(|e| cosine_similarity(e, class_prompt_emb))
        .collect::<Result<Vec<T>>>()?;

    let mut by_sim_desc: Vec<usize> = (0..sims.len()).collect();
    by_sim_desc.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("similarities are finite")
            .then(a.cmp(&b))
    });
    let top: Vec<usize> = by_sim_desc[..keep_per_side].to_vec();

    let mut rest: Vec<usize> = by_sim_desc[keep_per_side..].to_vec();
    rest.sort_by(|&a, &b| {
        sims[a]
            .partial_cmp(&sims[b])
            .expect("similarities are finite")
            .then(a.cmp(&b))
    });
    let bottom: Vec<usize> = rest[..keep_per_side].to_vec();
    Ok((top, bottom))
}

/// Mine d_in and d_out from the few-shot set.
///
/// Crops are ranked against the zero-shot embedding of each sample's own
/// class. Each image's crop stream is keyed by a stable hash of its id, so
/// reordering the few-shot list permutes the output blocks without changing
/// their content (identical ids share one stream). Any per-sample failure
/// aborts the run; few-shot data is too scarce to drop samples silently.
pub fn build_mined_datasets<T: Float>(
    fewshot: &[(ImageRef, usize)],
    class_names: &[String],
    backend: &dyn Backend<T>,
    cfg: &MinerConfig,
    templates: &[String],
) -> Result<MinedDatasets<T>> {
    cfg.validate()?;
    if fewshot.is_empty() {
        return Err(Error::EmptyInput);
    }
    for &(_, label) in fewshot {
        if label >= class_names.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_names.len(),
            });
        }
    }
    let class_embs = zero_shot_class_embeddings(backend, class_names, templates)?;

    let mut mined = MinedDatasets::default();
    for (i, (img, label)) in fewshot.iter().enumerate() {
        let crops = generate_crops(img, cfg, crate::rng::stable_hash(img.id.as_bytes()))?;
        let embs = crops
            .iter()
            .map(|c| backend.encode_image(c))
            .collect::<Result<Vec<_>>>()?;
        let (top, bottom) = filter_crops(&embs, &class_embs[*label], cfg.keep_per_side)?;
        for &j in &top {
            mined.d_in.push(MinedExample {
                embedding: embs[j].clone(),
                label: *label,
                source_index: i,
                sim: cosine_similarity(&embs[j], &class_embs[*label])?,
                crop_box: crops[j].crop_box.expect("generated crops carry a box"),
                crop_id: crops[j].id.clone(),
            });
        }
        for &j in &bottom {
            mined.d_out.push(MinedOutlier {
                embedding: embs[j].clone(),
                source_index: i,
                sim: cosine_similarity(&embs[j], &class_embs[*label])?,
                crop_box: crops[j].crop_box.expect("generated crops carry a box"),
                crop_id: crops[j].id.clone(),
            });
        }
    }
    Ok(mined)
}
