//! Frozen dual-encoder contract and the seeded toy backend.
//!
//! The toy backend stands in for a pretrained contrastive encoder so that the
//! whole pipeline runs and verifies offline. Its image path is
//! `downsample -> fixed seeded linear map -> tanh -> normalize`, its text path
//! is `mean-pool tokens -> fixed seeded linear map -> tanh -> normalize`, and
//! the text path carries an exact analytic vector-Jacobian product. Backends
//! wrapping real checkpoints implement the same trait; if they cannot supply
//! text-path gradients, training with them is rejected up front rather than
//! silently degraded.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embed::{normalize, Embedding};
use crate::rng::stream_rng;
use crate::{fl, Error, Float, Result};

/// Downsample grid for the toy image path: 8x8 grayscale cells.
const POOL_GRID: usize = 8;
const IMG_FEATURES: usize = POOL_GRID * POOL_GRID;

/// Hash-bucket count for the toy vocabulary.
const VOCAB_BUCKETS: u64 = 1 << 16;

// rng stream labels for parameter blocks
const STREAM_W_IMG: u64 = 0x01;
const STREAM_B_IMG: u64 = 0x02;
const STREAM_W_TXT: u64 = 0x03;
const STREAM_B_TXT: u64 = 0x04;
const STREAM_VOCAB: u64 = 0x05;

/// Raw pixel buffer in [0, 1], row-major `h * w * channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageData {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    fn gray(&self, y: usize, x: usize) -> f32 {
        let base = (y * self.width + x) * self.channels;
        let mut acc = 0.0;
        for c in 0..self.channels {
            acc += self.pixels[base + c];
        }
        acc / self.channels as f32
    }
}

/// Crop window in pixel units, fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Reference to an image: shared pixels plus an optional crop window.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub id: String,
    pub data: Arc<ImageData>,
    pub crop_box: Option<CropBox>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, data: ImageData) -> Self {
        Self {
            id: id.into(),
            data: Arc::new(data),
            crop_box: None,
        }
    }

    pub fn with_crop(&self, id: impl Into<String>, crop: CropBox) -> Self {
        Self {
            id: id.into(),
            data: Arc::clone(&self.data),
            crop_box: Some(crop),
        }
    }

    /// Active region: the crop box, or the full image.
    pub fn region(&self) -> Result<CropBox> {
        match self.crop_box {
            None => Ok(CropBox {
                x: 0,
                y: 0,
                w: self.data.width,
                h: self.data.height,
            }),
            Some(c) => {
                if c.w == 0
                    || c.h == 0
                    || c.x + c.w > self.data.width
                    || c.y + c.h > self.data.height
                {
                    return Err(Error::InvalidImage(format!(
                        "crop box {:?} outside {}x{} image {}",
                        c, self.data.width, self.data.height, self.id
                    )));
                }
                Ok(c)
            }
        }
    }
}

/// Ordered token embeddings fed to the text path.
///
/// `class_slot` marks the position holding the (frozen) class-name token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T: Float> {
    pub entries: Vec<Vec<T>>,
    pub class_slot: Option<usize>,
}

impl<T: Float> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Vector-Jacobian product handle for one text encoding.
pub trait TextVjp<T: Float> {
    /// Gradient of `upstream . output` with respect to each token entry.
    ///
    /// Returns one gradient vector per token position.
    fn token_grads(&self, upstream: &[T]) -> Vec<Vec<T>>;
}

/// Frozen dual encoder: image side and text side into a shared unit sphere.
///
/// Implementations never mutate their parameters; [`Backend::param_checksum`]
/// lets callers verify that.
pub trait Backend<T: Float>: Send + Sync {
    fn name(&self) -> &str;

    /// Output embedding dimension d.
    fn dim(&self) -> usize;

    /// Word-embedding dimension of the text input layer.
    fn text_context_dim(&self) -> usize;

    /// Whether [`Backend::encode_text_vjp`] is supported.
    fn differentiable_text(&self) -> bool {
        false
    }

    fn encode_image(&self, img: &ImageRef) -> Result<Embedding<T>>;

    fn encode_text(&self, toks: &TokenSequence<T>) -> Result<Embedding<T>>;

    /// Text encoding plus a VJP handle for the token entries.
    fn encode_text_vjp<'a>(
        &'a self,
        toks: &TokenSequence<T>,
    ) -> Result<(Embedding<T>, Box<dyn TextVjp<T> + 'a>)> {
        let _ = toks;
        Err(Error::GradientUnsupported)
    }

    /// Fixed vocabulary lookup for one token.
    fn token_embedding(&self, token: &str) -> Result<Vec<T>>;

    /// Checksum over all backend parameters, for frozen-ness audits.
    fn param_checksum(&self) -> u64;
}

/// Deterministic frozen backend for offline verification.
#[derive(Debug, Clone)]
pub struct ToyBackend<T: Float> {
    seed: u64,
    dim: usize,
    // row-major dim x IMG_FEATURES
    w_img: Vec<T>,
    b_img: Vec<T>,
    // row-major dim x dim (text_context_dim == dim)
    w_txt: Vec<T>,
    b_txt: Vec<T>,
}

/// Build the toy backend for `(seed, dim)`; `dim` must be at least 8.
pub fn toy_backend<T: Float>(seed: u64, dim: usize) -> ToyBackend<T> {
    ToyBackend::new(seed, dim)
}

fn seeded_gaussians<T: Float>(seed: u64, stream: u64, count: usize, std: f64) -> Vec<T> {
    let mut rng = stream_rng(seed, stream, 0);
    (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            fl(z * std)
        })
        .collect()
}

/// Seeded random matrix with unit singular values (row-major rows x cols).
///
/// The shorter side is orthonormalized by modified Gram-Schmidt, so the map
/// neither stretches nor crushes any direction; prompt gradients stay equally
/// effective everywhere.
fn seeded_orthonormal<T: Float>(seed: u64, stream: u64, rows: usize, cols: usize) -> Vec<T> {
    let mut rng = stream_rng(seed, stream, 0);
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let orthonormalize_rows = rows <= cols;
    if !orthonormalize_rows {
        // transpose, orthonormalize, transpose back
        let mut t = vec![vec![0.0; rows]; cols];
        for (r, row) in m.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                t[c][r] = v;
            }
        }
        m = t;
    }
    for i in 0..m.len() {
        for j in 0..i {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            let (prev, cur) = m.split_at_mut(i);
            for (x, &q) in cur[0].iter_mut().zip(&prev[j]) {
                *x -= dot * q;
            }
        }
        let norm: f64 = m[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-10, "degenerate random matrix");
        for x in &mut m[i] {
            *x /= norm;
        }
    }
    let mut flat = vec![T::zero(); rows * cols];
    if orthonormalize_rows {
        for (r, row) in m.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                flat[r * cols + c] = fl(v);
            }
        }
    } else {
        for (c, col) in m.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                flat[r * cols + c] = fl(v);
            }
        }
    }
    flat
}

impl<T: Float> ToyBackend<T> {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 8, "toy backend needs dim >= 8, got {dim}");
        Self {
            seed,
            dim,
            w_img: seeded_orthonormal(seed, STREAM_W_IMG, dim, IMG_FEATURES),
            b_img: seeded_gaussians(seed, STREAM_B_IMG, dim, 0.1),
            w_txt: seeded_orthonormal(seed, STREAM_W_TXT, dim, dim),
            b_txt: seeded_gaussians(seed, STREAM_B_TXT, dim, 0.1),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Average-pool the active region onto the fixed grayscale grid.
    ///
    /// Cell bounds use integer arithmetic only, so the result is identical
    /// across platforms. Regions smaller than the grid re-read pixels.
    fn downsample(&self, img: &ImageRef) -> Result<Vec<T>> {
        let region = img.region()?;
        let cell_bounds = |g: usize, extent: usize, origin: usize| {
            let start = origin + g * extent / POOL_GRID;
            let end = (origin + ((g + 1) * extent).div_ceil(POOL_GRID))
                .min(origin + extent)
                .max(start + 1);
            (start, end)
        };
        let mut cells = Vec::with_capacity(IMG_FEATURES);
        for gy in 0..POOL_GRID {
            let (y0, y1) = cell_bounds(gy, region.h, region.y);
            for gx in 0..POOL_GRID {
                let (x0, x1) = cell_bounds(gx, region.w, region.x);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += f64::from(img.data.gray(y, x));
                    }
                }
                cells.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
        // center the grid so shared brightness does not dominate every
        // embedding direction
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        Ok(cells.into_iter().map(|c| fl(c - mean)).collect())
    }

    fn affine_tanh(&self, w: &[T], b: &[T], input: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim);
        for (row, &bias) in b.iter().enumerate() {
            let mut acc = bias;
            let offset = row * input.len();
            for (j, &x) in input.iter().enumerate() {
                acc = acc + w[offset + j] * x;
            }
            out.push(acc.tanh());
        }
        out
    }

    fn mean_pool(&self, toks: &TokenSequence<T>) -> Result<Vec<T>> {
        if toks.is_empty() {
            return Err(Error::EmptyInput);
        }
        let m = self.text_context_dim();
        for entry in &toks.entries {
            if entry.len() != m {
                return Err(Error::DimensionMismatch {
                    left: entry.len(),
                    right: m,
                });
            }
        }
        let inv_len = T::one() / fl(toks.len() as f64);
        let mut pooled = vec![T::zero(); m];
        for entry in &toks.entries {
            for (acc, &x) in pooled.iter_mut().zip(entry) {
                *acc = *acc + x * inv_len;
            }
        }
        Ok(pooled)
    }
}

/// Saved forward state for the toy text path.
struct ToyTextVjp<'a, T: Float> {
    backend: &'a ToyBackend<T>,
    activated: Vec<T>,
    act_norm: T,
    unit: Vec<T>,
    token_count: usize,
}

impl<T: Float> TextVjp<T> for ToyTextVjp<'_, T> {
    fn token_grads(&self, upstream: &[T]) -> Vec<Vec<T>> {
        let d = self.backend.dim;
        let m = d;
        // normalize backward: g_a = (g - h (h.g)) / r
        let hg: T = self
            .unit
            .iter()
            .zip(upstream)
            .map(|(&h, &g)| h * g)
            .sum();
        let g_act: Vec<T> = upstream
            .iter()
            .zip(&self.unit)
            .map(|(&g, &h)| (g - h * hg) / self.act_norm)
            .collect();
        // tanh backward: g_u = g_a * (1 - a^2)
        let g_pre: Vec<T> = g_act
            .iter()
            .zip(&self.activated)
            .map(|(&g, &a)| g * (T::one() - a * a))
            .collect();
        // linear backward onto the pooled input: W^T g_u
        let mut g_pool = vec![T::zero(); m];
        for (row, &g) in g_pre.iter().enumerate() {
            let offset = row * m;
            for (j, slot) in g_pool.iter_mut().enumerate() {
                *slot = *slot + self.backend.w_txt[offset + j] * g;
            }
        }
        // mean-pool backward: every position receives g_pool / L
        let inv_len = T::one() / fl(self.token_count as f64);
        let per_token: Vec<T> = g_pool.iter().map(|&g| g * inv_len).collect();
        vec![per_token; self.token_count]
    }
}

impl<T: Float> Backend<T> for ToyBackend<T> {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn text_context_dim(&self) -> usize {
        self.dim
    }

    fn differentiable_text(&self) -> bool {
        true
    }

    fn encode_image(&self, img: &ImageRef) -> Result<Embedding<T>> {
        let cells = self.downsample(img)?;
        normalize(&self.affine_tanh(&self.w_img, &self.b_img, &cells))
    }

    fn encode_text(&self, toks: &TokenSequence<T>) -> Result<Embedding<T>> {
        let pooled = self.mean_pool(toks)?;
        normalize(&self.affine_tanh(&self.w_txt, &self.b_txt, &pooled))
    }

    fn encode_text_vjp<'a>(
        &'a self,
        toks: &TokenSequence<T>,
    ) -> Result<(Embedding<T>, Box<dyn TextVjp<T> + 'a>)> {
        let pooled = self.mean_pool(toks)?;
        let activated = self.affine_tanh(&self.w_txt, &self.b_txt, &pooled);
        let act_norm: T = activated.iter().map(|&x| x * x).sum::<T>().sqrt();
        if act_norm < fl(1e-12) {
            return Err(Error::ZeroVector);
        }
        let unit: Vec<T> = activated.iter().map(|&x| x / act_norm).collect();
        let embedding = Embedding::from_unit(unit.clone());
        let vjp = ToyTextVjp {
            backend: self,
            activated,
            act_norm,
            unit,
            token_count: toks.len(),
        };
        Ok((embedding, Box::new(vjp)))
    }

    fn token_embedding(&self, token: &str) -> Result<Vec<T>> {
        let bucket = crate::rng::stable_hash(token.as_bytes()) % VOCAB_BUCKETS;
        let mut rng = stream_rng(self.seed, STREAM_VOCAB, bucket);
        Ok((0..self.dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                fl(z)
            })
            .collect())
    }

    fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for block in [&self.w_img, &self.b_img, &self.w_txt, &self.b_txt] {
            for &x in block.iter() {
                feed(x.to_f64().unwrap_or(f64::NAN).to_bits());
            }
        }
        h
    }
}

/// Tokenize a filled template into a [`TokenSequence`] via the backend's
/// fixed vocabulary.
///
/// The template is split on whitespace and must contain exactly one `{}`
/// placeholder; the class name is embedded as a single token at that slot.
pub fn zero_shot_tokens<T: Float>(
    backend: &dyn Backend<T>,
    class_name: &str,
    template: &str,
) -> Result<TokenSequence<T>> {
    let words: Vec<&str> = template.split_whitespace().collect();
    let placeholders = words.iter().filter(|w| **w == "{}").count();
    if placeholders != 1 || words.is_empty() {
        return Err(Error::InvalidTemplate(template.to_string()));
    }
    let mut entries = Vec::with_capacity(words.len());
    let mut class_slot = None;
    for (i, word) in words.iter().enumerate() {
        if *word == "{}" {
            class_slot = Some(i);
            entries.push(backend.token_embedding(class_name)?);
        } else {
            entries.push(backend.token_embedding(word)?);
        }
    }
    Ok(TokenSequence {
        entries,
        class_slot,
    })
}

/// One encode request in the adapter wire schema.
///
/// Adapters wrapping a real pretrained dual encoder live behind a process
/// boundary; the transport is the adapter's choice but these payload shapes
/// are fixed. The `kind` tag is `"image"` or `"text"`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterRequest {
    Image { payload: ImagePayload },
    Text { payload: TextPayload },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImagePayload {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major pixels in [0, 1].
    pub pixels: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<CropBox>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextPayload {
    /// One word-embedding row per token position.
    pub entries: Vec<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_slot: Option<usize>,
}

/// Adapter reply: the unit-norm embedding as d float32 values, plus an
/// opaque handle for requesting vector-Jacobian products against this
/// encoding when the adapter supports text gradients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterResponse {
    pub embedding: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vjp: Option<String>,
}

impl AdapterRequest {
    pub fn from_image(img: &ImageRef) -> Self {
        Self::Image {
            payload: ImagePayload {
                height: img.data.height,
                width: img.data.width,
                channels: img.data.channels,
                pixels: img.data.pixels.clone(),
                crop_box: img.crop_box,
            },
        }
    }

    pub fn from_tokens<T: Float>(toks: &TokenSequence<T>) -> Self {
        Self::Text {
            payload: TextPayload {
                entries: toks
                    .entries
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|&x| x.to_f64().unwrap_or(f64::NAN) as f32)
                            .collect()
                    })
                    .collect(),
                class_slot: toks.class_slot,
            },
        }
    }
}

/// Zero-shot class embeddings, ensembled over one or more templates.
///
/// Multiple templates are averaged in embedding space and renormalized.
pub fn zero_shot_class_embeddings<T: Float>(
    backend: &dyn Backend<T>,
    class_names: &[String],
    templates: &[String],
) -> Result<Vec<Embedding<T>>> {
    if templates.is_empty() {
        return Err(Error::InvalidTemplate("no templates given".into()));
    }
    class_names
        .iter()
        .map(|name| {
            let mut acc = vec![T::zero(); backend.dim()];
            for template in templates {
                let toks = zero_shot_tokens(backend, name, template)?;
                let emb = backend.encode_text(&toks)?;
                for (slot, &x) in acc.iter_mut().zip(emb.as_slice()) {
                    *slot = *slot + x;
                }
            }
            normalize(&acc)
        })
        .collect()
}
