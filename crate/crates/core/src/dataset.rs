//! Paired editing data: caption rewriting, condition extraction, pair
//! generation, quality scoring and filtering, plus the procedural
//! three-family corpus used to study expert routing.
//!
//! The language model and the conditional image generator sit behind
//! [`CaptionClient`] and [`GeneratorClient`]. The bundled implementations are
//! deterministic and local; nothing here reaches the network.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::eval::{cosine, Embedder};
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::text::{fnv1a, words, Family, Instruction};

/// The six structural conditions the generator can be driven by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionMethod {
    /// Luminance gradient magnitude.
    Edges,
    /// Nearest-neighbour 4× decimation, upsampled back.
    Downsample,
    /// Luminance quantised to four levels.
    Quantize,
    /// 3×3 box blur.
    Blur,
    /// 4×4 grid of per-cell mean colours.
    ColorGrid,
    /// Binary luminance threshold at the (upper) median.
    Threshold,
}

impl ConditionMethod {
    pub const ALL: [ConditionMethod; 6] = [
        ConditionMethod::Edges,
        ConditionMethod::Downsample,
        ConditionMethod::Quantize,
        ConditionMethod::Blur,
        ConditionMethod::ColorGrid,
        ConditionMethod::Threshold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionMethod::Edges => "edges",
            ConditionMethod::Downsample => "downsample",
            ConditionMethod::Quantize => "quantize",
            ConditionMethod::Blur => "blur",
            ConditionMethod::ColorGrid => "color-grid",
            ConditionMethod::Threshold => "threshold",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub resolution: (usize, usize),
    /// In `[0, 10]`.
    pub aesthetic: f64,
    /// In `[-1, 1]`.
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

/// One source/target pair with its instruction and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    pub id: String,
    pub src_image: ImageTensor,
    pub tgt_image: ImageTensor,
    pub instruction: Instruction,
    pub src_caption: String,
    pub tgt_caption: String,
    /// `None` for pairs made by a procedural transform rather than a generator.
    pub condition_method: Option<ConditionMethod>,
    pub text_scale: f64,
    pub scores: Option<Scores>,
    pub provenance: Provenance,
}

impl EditSample {
    pub fn family(&self) -> Option<Family> {
        self.instruction.family()
    }
}

/// `(source caption, instruction, target caption)` shown to the caption
/// model as a worked example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InContextExample {
    pub src_caption: String,
    pub instruction: String,
    pub tgt_caption: String,
}

/// Rewrites a source caption into the caption of the edited image.
pub trait CaptionClient {
    fn name(&self) -> &str;

    fn rewrite(&self, src_caption: &str, instruction: &Instruction, in_context: &[InContextExample]) -> Result<String>;
}

/// Renders a target image from a structural condition and a caption.
pub trait GeneratorClient {
    fn name(&self) -> &str;

    fn generate(&self, src: &ImageTensor, condition: &ImageTensor, tgt_caption: &str, text_scale: f64, seed: u64) -> Result<ImageTensor>;
}

/// Rule-based caption rewriting.
///
/// * `make it a <X>` → `a <X> of <subject>`
/// * `turn it into <S> style` → `<caption> in the style of <S>`
/// * `change the color to <C>` → first colour word replaced by `<C>`
/// * `add <O> into the <P>` → `<caption> with <O> in the <P>`
/// * `replace <A> with <B>` / `swap <A> for <B>` → entity `<A>` substituted
/// * anything else → `<caption>, <instruction>`
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateCaptionClient;

pub const COLORS: [(&str, [f64; 3]); 9] = [
    ("red", [0.9, -0.8, -0.8]),
    ("green", [-0.7, 0.8, -0.7]),
    ("blue", [-0.8, -0.6, 0.9]),
    ("yellow", [0.9, 0.8, -0.8]),
    ("purple", [0.3, -0.7, 0.7]),
    ("orange", [0.9, 0.1, -0.9]),
    ("white", [0.9, 0.9, 0.9]),
    ("black", [-0.9, -0.9, -0.9]),
    ("cyan", [-0.8, 0.7, 0.8]),
];

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

impl CaptionClient for TemplateCaptionClient {
    fn name(&self) -> &str {
        "template-captioner"
    }

    fn rewrite(&self, src_caption: &str, instruction: &Instruction, _in_context: &[InContextExample]) -> Result<String> {
        let caption = src_caption.trim();
        let instr = instruction.text().trim().to_lowercase();
        let instr = instr.trim_end_matches(['.', '!']);
        let subject = caption.strip_prefix("a photo of ").unwrap_or(caption);

        if let Some(rest) = instr.strip_prefix("make it ") {
            let target = rest.trim();
            let target = target.strip_prefix("a ").or_else(|| target.strip_prefix("an ")).unwrap_or(target);
            return Ok(format!("{} {target} of {subject}", article(target)));
        }
        if let Some(style) = instr.strip_prefix("turn it into ").and_then(|r| r.strip_suffix(" style")) {
            return Ok(format!("{caption} in the style of {}", style.trim()));
        }
        if let Some(color) = instr.strip_prefix("change the color to ") {
            let color = color.trim();
            let mut replaced = false;
            let rewritten: Vec<String> = caption
                .split(' ')
                .map(|w| {
                    if !replaced && color_rgb(w).is_some() {
                        replaced = true;
                        color.to_string()
                    } else {
                        w.to_string()
                    }
                })
                .collect();
            return Ok(if replaced {
                rewritten.join(" ")
            } else {
                format!("{color} {caption}")
            });
        }
        if let Some((object, place)) = instr.strip_prefix("add ").and_then(|r| r.split_once(" into the ")) {
            return Ok(format!("{caption} with {} in the {}", object.trim(), place.trim()));
        }
        let swap = instr
            .strip_prefix("replace ")
            .and_then(|r| r.split_once(" with "))
            .or_else(|| instr.strip_prefix("swap ").and_then(|r| r.split_once(" for ")));
        if let Some((from, to)) = swap {
            let (from, to) = (strip_article(from), strip_article(to));
            if caption.contains(from) {
                return Ok(caption.replacen(from, to, 1));
            }
        }
        Ok(format!("{caption}, {instr}"))
    }
}

fn strip_article(s: &str) -> &str {
    let s = s.trim();
    ["the ", "a ", "an "].iter().find_map(|a| s.strip_prefix(a)).unwrap_or(s)
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Blends the condition map with a smooth colour field derived from the
/// caption hash and seed: `out = (1 − a)·condition + a·field`, with
/// `a = s / (1 + s)` for text scale `s`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProceduralGenerator;

impl GeneratorClient for ProceduralGenerator {
    fn name(&self) -> &str {
        "procedural-generator"
    }

    fn generate(&self, _src: &ImageTensor, condition: &ImageTensor, tgt_caption: &str, text_scale: f64, seed: u64) -> Result<ImageTensor> {
        if !(text_scale >= 0.0 && text_scale.is_finite()) {
            return Err(Error::Pipeline(format!(
                "text scale must be finite and nonnegative, got {text_scale}"
            )));
        }
        let mut rng = seeded(fnv1a(tgt_caption.as_bytes()) ^ seed.rotate_left(17));
        let c1: [f64; 3] = core::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let c2: [f64; 3] = core::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let (h, w) = (condition.height(), condition.width());
        let a = text_scale / (1.0 + text_scale);
        let span = ((h + w).saturating_sub(2)).max(1) as f64;
        Ok(ImageTensor::from_fn(h, w, |c, y, x| {
            let f = (x + y) as f64 / span;
            let field = c1[c] * (1.0 - f) + c2[c] * f;
            (1.0 - a) * condition.get(c, y, x) + a * field
        }))
    }
}

/// Target caption through the caption client, with input and output checks.
pub fn rewrite_caption(
    client: &dyn CaptionClient,
    src_caption: &str,
    instruction: &Instruction,
    in_context: &[InContextExample],
) -> Result<String> {
    if src_caption.trim().is_empty() {
        return Err(Error::Input("source caption is empty".into()));
    }
    let out = client.rewrite(src_caption, instruction, in_context)?;
    if out.trim().is_empty() {
        return Err(Error::Input(format!("{} returned an empty caption", client.name())));
    }
    Ok(out)
}

/// Target image through the generator client.
pub fn generate_pair(
    client: &dyn GeneratorClient,
    src: &ImageTensor,
    condition: &ImageTensor,
    tgt_caption: &str,
    text_scale: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let out = client.generate(src, condition, tgt_caption, text_scale, seed)?;
    if out.height() != src.height() || out.width() != src.width() {
        return Err(Error::Pipeline(format!(
            "{} returned {}x{} for a {}x{} source",
            client.name(),
            out.height(),
            out.width(),
            src.height(),
            src.width()
        )));
    }
    Ok(out)
}

/// Structural condition map of `img`, same size, three channels.
pub fn extract_condition(img: &ImageTensor, method: ConditionMethod) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let lum = |y: usize, x: usize| img.luminance(y, x);
    match method {
        ConditionMethod::Edges => gray(h, w, |y, x| {
            let gx = lum(y, (x + 1).min(w - 1)) - lum(y, x);
            let gy = lum((y + 1).min(h - 1), x) - lum(y, x);
            libm::sqrt(gx * gx + gy * gy)
        }),
        ConditionMethod::Downsample => ImageTensor::from_fn(h, w, |c, y, x| img.get(c, y / 4 * 4, x / 4 * 4)),
        ConditionMethod::Quantize => gray(h, w, |y, x| {
            let level = libm::round((lum(y, x) + 1.0) * 1.5);
            level / 1.5 - 1.0
        }),
        ConditionMethod::Blur => ImageTensor::from_fn(h, w, |c, y, x| {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc += img.get(c, yy, xx);
                    n += 1.0;
                }
            }
            acc / n
        }),
        ConditionMethod::ColorGrid => {
            let cell = |i: usize, n: usize| (i * 4 / n).min(3);
            let mut sums = [[[0.0f64; 3]; 4]; 4];
            let mut counts = [[0.0f64; 4]; 4];
            for y in 0..h {
                for x in 0..w {
                    let (gy, gx) = (cell(y, h), cell(x, w));
                    counts[gy][gx] += 1.0;
                    for (c, s) in sums[gy][gx].iter_mut().enumerate() {
                        *s += img.get(c, y, x);
                    }
                }
            }
            ImageTensor::from_fn(h, w, |c, y, x| {
                let (gy, gx) = (cell(y, h), cell(x, w));
                sums[gy][gx][c] / counts[gy][gx]
            })
        }
        ConditionMethod::Threshold => {
            let mut all: Vec<f64> = (0..h * w).map(|i| lum(i / w, i % w)).collect();
            all.sort_by(f64::total_cmp);
            let median = all[all.len() / 2];
            gray(h, w, |y, x| if lum(y, x) >= median { 1.0 } else { -1.0 })
        }
    }
}

fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
    let plane: Vec<f64> = (0..h * w).map(|i| f(i / w, i % w)).collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    ImageTensor::new(Tensor::new(&[3, h, w], data).expect("positive extents")).expect("finite map")
}

/// Target band of local contrast that the aesthetic stub rewards.
pub const CONTRAST_BAND: (f64, f64) = (0.02, 0.3);

/// `10 · (1 − mean deviation of local contrast from the band, in band
/// widths)`, clamped to `[0, 10]`. Local contrast is the absolute gap between
/// a pixel's luminance and the mean luminance of its in-image 4-neighbours.
pub fn aesthetic_score(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let (lo, hi) = CONTRAST_BAND;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut neigh = Vec::with_capacity(4);
            if y > 0 {
                neigh.push(img.luminance(y - 1, x));
            }
            if y + 1 < h {
                neigh.push(img.luminance(y + 1, x));
            }
            if x > 0 {
                neigh.push(img.luminance(y, x - 1));
            }
            if x + 1 < w {
                neigh.push(img.luminance(y, x + 1));
            }
            let contrast = if neigh.is_empty() {
                0.0
            } else {
                (img.luminance(y, x) - neigh.iter().sum::<f64>() / neigh.len() as f64).abs()
            };
            total += (lo - contrast).max(0.0) + (contrast - hi).max(0.0);
        }
    }
    let mean_dev = total / (h * w) as f64 / (hi - lo);
    (10.0 * (1.0 - mean_dev)).clamp(0.0, 10.0)
}

/// Fills the sample's resolution, aesthetic and CLIP scores. Scores describe
/// the target image and target caption.
pub fn score_sample(mut s: EditSample, embedder: &dyn Embedder) -> Result<EditSample> {
    let image = embedder.embed_image(&s.tgt_image);
    let text = embedder.embed_text(&s.tgt_caption);
    let clip = cosine(&image, &text).unwrap_or(0.0).clamp(-1.0, 1.0);
    s.scores = Some(Scores {
        resolution: (s.tgt_image.height(), s.tgt_image.width()),
        aesthetic: aesthetic_score(&s.tgt_image),
        clip,
    });
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterPolicy {
    pub min_height: usize,
    pub min_width: usize,
    pub min_aesthetic: f64,
    pub min_clip: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_height: 16,
            min_width: 16,
            min_aesthetic: 4.0,
            min_clip: 0.2,
        }
    }
}

impl FilterPolicy {
    /// Thresholds every scored sample passes.
    pub fn permissive() -> Self {
        Self {
            min_height: 1,
            min_width: 1,
            min_aesthetic: 0.0,
            min_clip: -1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_height == 0 || self.min_width == 0 || !self.min_aesthetic.is_finite() || !self.min_clip.is_finite() {
            return Err(Error::Config(format!("bad filter policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropReason {
    Resolution,
    Aesthetic,
    Clip,
}

impl DropReason {
    pub const ALL: [DropReason; 3] = [DropReason::Resolution, DropReason::Aesthetic, DropReason::Clip];

    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Resolution => "resolution",
            DropReason::Aesthetic => "aesthetic",
            DropReason::Clip => "clip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(DropReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sample: EditSample,
    pub verdict: Option<Verdict>,
}

/// Ordered samples with their filter verdicts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterSummary {
    pub total: usize,
    pub kept: usize,
    pub resolution: usize,
    pub aesthetic: usize,
    pub clip: usize,
}

impl FilterSummary {
    pub fn dropped(&self) -> usize {
        self.resolution + self.aesthetic + self.clip
    }
}

impl Manifest {
    pub fn from_samples(samples: Vec<EditSample>) -> Self {
        Self {
            entries: samples.into_iter().map(|sample| ManifestEntry { sample, verdict: None }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Samples with a `Keep` verdict, or every sample if none is judged yet.
    pub fn kept(&self) -> Vec<&EditSample> {
        let judged = self.entries.iter().any(|e| e.verdict.is_some());
        self.entries
            .iter()
            .filter(|e| !judged || e.verdict == Some(Verdict::Keep))
            .map(|e| &e.sample)
            .collect()
    }

    pub fn summary(&self) -> FilterSummary {
        let mut s = FilterSummary {
            total: self.entries.len(),
            ..FilterSummary::default()
        };
        for e in &self.entries {
            match e.verdict {
                Some(Verdict::Keep) => s.kept += 1,
                Some(Verdict::Drop(DropReason::Resolution)) => s.resolution += 1,
                Some(Verdict::Drop(DropReason::Aesthetic)) => s.aesthetic += 1,
                Some(Verdict::Drop(DropReason::Clip)) => s.clip += 1,
                None => {}
            }
        }
        s
    }
}

/// Judges every sample: resolution, then aesthetic, then CLIP; the first
/// failed check is the recorded reason.
pub fn filter(mut manifest: Manifest, policy: &FilterPolicy) -> Result<Manifest> {
    policy.validate()?;
    for e in &mut manifest.entries {
        let scores = e
            .sample
            .scores
            .ok_or_else(|| Error::Pipeline(format!("sample {} reached the filter unscored", e.sample.id)))?;
        let (h, w) = scores.resolution;
        e.verdict = Some(if h < policy.min_height || w < policy.min_width {
            Verdict::Drop(DropReason::Resolution)
        } else if scores.aesthetic < policy.min_aesthetic {
            Verdict::Drop(DropReason::Aesthetic)
        } else if scores.clip < policy.min_clip {
            Verdict::Drop(DropReason::Clip)
        } else {
            Verdict::Keep
        });
    }
    Ok(manifest)
}

pub const STYLES: [&str; 5] = ["comic", "sketch", "watercolor", "sepia", "neon"];
pub const OBJECTS: [&str; 5] = ["sun", "moon", "star", "box", "tree"];
pub const PLACES: [&str; 4] = ["sky", "ground", "left", "right"];
const SHAPES: [&str; 2] = ["circle", "square"];

/// Source scene: vertical two-colour gradient with one shape on top.
struct Scene {
    image: ImageTensor,
    mask: Vec<bool>,
    shape_color: &'static str,
    caption: String,
}

fn scene(rng: &mut impl Rng, side: usize) -> Scene {
    let bg = rng.gen_range(0..COLORS.len());
    let mut fg = rng.gen_range(0..COLORS.len());
    while fg == bg {
        fg = rng.gen_range(0..COLORS.len());
    }
    let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
    let radius = rng.gen_range(side / 5..=side / 3).max(1) as f64;
    let cy = rng.gen_range(radius..side as f64 - radius);
    let cx = rng.gen_range(radius..side as f64 - radius);
    let mask: Vec<bool> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            match shape {
                "circle" => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= radius * radius,
                _ => (y - cy).abs() <= radius && (x - cx).abs() <= radius,
            }
        })
        .collect();
    let (bg_rgb, fg_rgb) = (COLORS[bg].1, COLORS[fg].1);
    let image = ImageTensor::from_fn(side, side, |c, y, x| {
        if mask[y * side + x] {
            fg_rgb[c]
        } else {
            let shade = 0.85 + 0.15 * y as f64 / side as f64;
            bg_rgb[c] * shade
        }
    });
    Scene {
        image,
        mask,
        shape_color: COLORS[fg].0,
        caption: format!("a photo of a {} {shape} on a {} background", COLORS[fg].0, COLORS[bg].0),
    }
}

/// Per-style colour matrix, offset and stripe texture.
fn stylize(img: &ImageTensor, style: &str) -> ImageTensor {
    let (m, o, texture): ([[f64; 3]; 3], [f64; 3], f64) = match style {
        "comic" => ([[1.6, -0.3, -0.3], [-0.3, 1.6, -0.3], [-0.3, -0.3, 1.6]], [0.0, 0.0, 0.0], 0.25),
        "sketch" => ([[-0.3, -0.3, -0.3], [-0.3, -0.3, -0.3], [-0.3, -0.3, -0.3]], [0.5, 0.5, 0.5], 0.15),
        "watercolor" => ([[0.5, 0.1, 0.1], [0.1, 0.5, 0.1], [0.1, 0.1, 0.5]], [0.35, 0.35, 0.4], 0.1),
        "sepia" => ([[0.39, 0.77, 0.19], [0.35, 0.69, 0.17], [0.27, 0.53, 0.13]], [0.1, 0.0, -0.2], 0.05),
        _ => ([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], [0.1, 0.1, 0.1], 0.2),
    };
    let (h, w) = (img.height(), img.width());
    ImageTensor::from_fn(h, w, |c, y, x| {
        let p = img.pixel(y, x);
        let stripe = if (x + 2 * y) % 3 == 0 { texture } else { -texture * 0.5 };
        m[c][0] * p[0] + m[c][1] * p[1] + m[c][2] * p[2] + o[c] + stripe
    })
}

fn object_mask(object: &str, place: &str, side: usize) -> Vec<bool> {
    let s = side as f64;
    let (cy, cx) = match place {
        "sky" => (s * 0.2, s * 0.5),
        "ground" => (s * 0.8, s * 0.5),
        "left" => (s * 0.5, s * 0.2),
        _ => (s * 0.5, s * 0.8),
    };
    let r = (s * 0.15).max(1.0);
    (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            let (dy, dx) = (y - cy, x - cx);
            match object {
                "sun" | "moon" => dy * dy + dx * dx <= r * r,
                "star" => (dy.abs() <= r && dx.abs() <= r * 0.35) || (dx.abs() <= r && dy.abs() <= r * 0.35),
                "tree" => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
                _ => dy.abs() <= r && dx.abs() <= r,
            }
        })
        .collect()
}

fn object_color(object: &str) -> [f64; 3] {
    match object {
        "sun" => [1.0, 0.85, -0.6],
        "moon" => [0.95, 0.95, 0.8],
        "star" => [1.0, 1.0, 0.2],
        "tree" => [-0.6, 0.5, -0.7],
        _ => [0.4, -0.1, -0.6],
    }
}

/// Procedural corpus of `3 · per_family` labelled pairs on `side × side`
/// images, families interleaved. Target captions go through `captioner`.
pub fn synth_routing_corpus(per_family: usize, side: usize, seed: u64, captioner: &dyn CaptionClient) -> Result<Vec<EditSample>> {
    if per_family == 0 {
        return Err(Error::Config("per_family must be at least 1".into()));
    }
    if side < 4 {
        return Err(Error::Config(format!("image side {side} is too small")));
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(3 * per_family);
    for i in 0..per_family {
        for family in Family::ALL {
            let sc = scene(&mut rng, side);
            let (text, tgt) = match family {
                Family::LocalTranslation => {
                    let mut pick = COLORS[rng.gen_range(0..COLORS.len())];
                    while pick.0 == sc.shape_color {
                        pick = COLORS[rng.gen_range(0..COLORS.len())];
                    }
                    let tgt = ImageTensor::from_fn(
                        side,
                        side,
                        |c, y, x| {
                            if sc.mask[y * side + x] {
                                pick.1[c]
                            } else {
                                sc.image.get(c, y, x)
                            }
                        },
                    );
                    (format!("change the color to {}", pick.0), tgt)
                }
                Family::GlobalStyle => {
                    let style = STYLES[rng.gen_range(0..STYLES.len())];
                    (format!("turn it into {style} style"), stylize(&sc.image, style))
                }
                Family::LocalEdit => {
                    let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
                    let place = PLACES[rng.gen_range(0..PLACES.len())];
                    let mask = object_mask(object, place, side);
                    let rgb = object_color(object);
                    let tgt = ImageTensor::from_fn(
                        side,
                        side,
                        |c, y, x| if mask[y * side + x] { rgb[c] } else { sc.image.get(c, y, x) },
                    );
                    (format!("add {object} into the {place}"), tgt)
                }
            };
            let instruction = Instruction::labeled(text, family)?;
            let tgt_caption = rewrite_caption(captioner, &sc.caption, &instruction, &[])?;
            out.push(EditSample {
                id: format!("synth-{:06}", out.len()),
                src_image: sc.image,
                tgt_image: tgt,
                instruction,
                src_caption: sc.caption,
                tgt_caption,
                condition_method: None,
                text_scale: 0.0,
                scores: None,
                provenance: Provenance {
                    generator: "procedural-transform".into(),
                    seed: seed.wrapping_add(i as u64),
                },
            });
        }
    }
    Ok(out)
}

/// Runs every seed sample through the caption and generator clients:
/// condition methods cycle through all six, text scales cycle through
/// `text_scales`.
pub fn client_pipeline(
    seeds: &[EditSample],
    captioner: &dyn CaptionClient,
    generator: &dyn GeneratorClient,
    in_context: &[InContextExample],
    text_scales: &[f64],
    seed: u64,
) -> Result<Vec<EditSample>> {
    if text_scales.is_empty() {
        return Err(Error::Config("at least one text scale is required".into()));
    }
    seeds
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let method = ConditionMethod::ALL[i % ConditionMethod::ALL.len()];
            let scale = text_scales[i % text_scales.len()];
            let tgt_caption = rewrite_caption(captioner, &s.src_caption, &s.instruction, in_context)?;
            let condition = extract_condition(&s.src_image, method);
            let sample_seed = seed.wrapping_add(i as u64);
            let tgt = generate_pair(generator, &s.src_image, &condition, &tgt_caption, scale, sample_seed)?;
            Ok(EditSample {
                id: format!("gen-{i:06}"),
                src_image: s.src_image.clone(),
                tgt_image: tgt,
                instruction: s.instruction.clone(),
                src_caption: s.src_caption.clone(),
                tgt_caption,
                condition_method: Some(method),
                text_scale: scale,
                scores: None,
                provenance: Provenance {
                    generator: generator.name().to_string(),
                    seed: sample_seed,
                },
            })
        })
        .collect()
}

/// Scores then filters, returning the judged manifest.
pub fn score_and_filter(samples: Vec<EditSample>, embedder: &dyn Embedder, policy: &FilterPolicy) -> Result<Manifest> {
    let scored = samples.into_iter().map(|s| score_sample(s, embedder)).collect::<Result<Vec<_>>>()?;
    filter(Manifest::from_samples(scored), policy)
}

/// Boxed default clients.
pub fn default_clients() -> (Box<dyn CaptionClient>, Box<dyn GeneratorClient>) {
    (Box::new(TemplateCaptionClient), Box::new(ProceduralGenerator))
}

/// Words of a caption that name a known colour.
pub fn caption_colors(caption: &str) -> Vec<[f64; 3]> {
    words(caption).iter().filter_map(|w| color_rgb(w)).collect()
}
