//! Edit-quality metrics: caption similarity (CLIP-T), directional
//! consistency (CLIP-D) and the ranking-based prefer score, over a pluggable
//! [`Embedder`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::dataset::{color_rgb, EditSample};
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::{normal, seeded};
use crate::text::{fnv1a, words};

pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed_image(&self, img: &ImageTensor) -> Vec<f64>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

const GRID: usize = 8;
const FEATURES: usize = 3 + 3 * GRID * GRID;

/// Weightless embedder. Both branches land in a shared 195-dim feature space
/// (channel means, then an 8×8 per-channel block-mean grid) before one
/// seeded Gaussian projection to `k` dims. Colour words write their RGB into
/// the mean and grid slots; other words add a small hash-seeded vector.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    k: usize,
    projection: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(k: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let scale = 1.0 / libm::sqrt(k as f64);
        let projection = (0..FEATURES * k).map(|_| normal(&mut rng) * scale).collect();
        Self { k, projection }
    }

    fn project(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (i, &v) in f.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &self.projection[i * self.k..(i + 1) * self.k];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += v * p;
            }
        }
        out
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(64, 0x5eed)
    }
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.k
    }

    fn embed_image(&self, img: &ImageTensor) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let mut f = vec![0.0; FEATURES];
        let mut counts = [0.0f64; GRID * GRID];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * GRID / h) * GRID + x * GRID / w;
                counts[cell] += 1.0;
                for c in 0..3 {
                    let v = img.get(c, y, x);
                    f[c] += v;
                    f[3 + c * GRID * GRID + cell] += v;
                }
            }
        }
        for v in &mut f[..3] {
            *v /= (h * w) as f64;
        }
        for c in 0..3 {
            for (cell, &n) in counts.iter().enumerate() {
                if n > 0.0 {
                    f[3 + c * GRID * GRID + cell] /= n;
                }
            }
        }
        self.project(&f)
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut f = vec![0.0; FEATURES];
        for word in words(text) {
            if let Some(rgb) = color_rgb(&word) {
                for c in 0..3 {
                    f[c] += rgb[c];
                    for cell in 0..GRID * GRID {
                        f[3 + c * GRID * GRID + cell] += rgb[c];
                    }
                }
            } else {
                let mut rng = seeded(fnv1a(word.as_bytes()));
                for v in &mut f {
                    *v += 0.3 * normal(&mut rng);
                }
            }
        }
        self.project(&f)
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Cosine similarity clamped to `[-1, 1]`; a zero-norm side is a
/// [`Error::Degenerate`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate(format!("zero or non-finite norm ({na}, {nb})")));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn clip_t(generated: &ImageTensor, tgt_caption: &str, e: &dyn Embedder) -> Result<f64> {
    cosine(&e.embed_image(generated), &e.embed_text(tgt_caption))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Directional {
    pub value: f64,
    /// Either direction had norm below `1e-12`; `value` is then 0.
    pub degenerate: bool,
}

pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine between a pair of difference vectors, 0 with a flag when either
/// is shorter than [`DEGENERATE_NORM`].
pub fn directional_cosine(image_dir: &[f64], text_dir: &[f64]) -> Result<Directional> {
    if norm(image_dir) < DEGENERATE_NORM || norm(text_dir) < DEGENERATE_NORM {
        return Ok(Directional {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Directional {
        value: cosine(image_dir, text_dir)?,
        degenerate: false,
    })
}

pub fn clip_d(src: &ImageTensor, generated: &ImageTensor, src_caption: &str, tgt_caption: &str, e: &dyn Embedder) -> Result<Directional> {
    let diff = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| x - y).collect() };
    let image_dir = diff(e.embed_image(generated), e.embed_image(src));
    let text_dir = diff(e.embed_text(tgt_caption), e.embed_text(src_caption));
    directional_cosine(&image_dir, &text_dir)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingBallot {
    pub participant: String,
    pub sample: String,
    /// Best first.
    pub ranking: Vec<String>,
}

impl RankingBallot {
    pub fn new(participant: impl Into<String>, sample: impl Into<String>, ranking: Vec<String>) -> Self {
        Self {
            participant: participant.into(),
            sample: sample.into(),
            ranking,
        }
    }

    /// Every method of `methods` exactly once, nothing else.
    pub fn validate(&self, methods: &BTreeSet<&str>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in &self.ranking {
            if !methods.contains(m.as_str()) || !seen.insert(m.as_str()) {
                return Err(self.malformed(&format!("unexpected or repeated method {m:?}")));
            }
        }
        if seen.len() != methods.len() {
            let missing: Vec<&str> = methods.difference(&seen).copied().collect();
            return Err(self.malformed(&format!("missing methods {missing:?}")));
        }
        Ok(())
    }

    fn malformed(&self, why: &str) -> Error {
        Error::Input(format!(
            "malformed ballot from participant {} on sample {}: {why}",
            self.participant, self.sample
        ))
    }
}

/// Method names of the first ballot, used as the reference set.
fn method_set(ballots: &[RankingBallot]) -> Result<BTreeSet<&str>> {
    let first = ballots.first().ok_or_else(|| Error::Input("no ballots".into()))?;
    Ok(first.ranking.iter().map(String::as_str).collect())
}

/// Fraction of ballots ranking `method` first.
pub fn prefer_score(ballots: &[RankingBallot], method: &str) -> Result<f64> {
    let methods = method_set(ballots)?;
    if !methods.contains(method) {
        return Err(Error::Input(format!("method {method:?} does not appear in the ballots")));
    }
    let mut top = 0usize;
    for b in ballots {
        b.validate(&methods)?;
        if b.ranking[0] == method {
            top += 1;
        }
    }
    Ok(top as f64 / ballots.len() as f64)
}

/// Prefer score of every method, in name order.
pub fn prefer_scores(ballots: &[RankingBallot]) -> Result<BTreeMap<String, f64>> {
    let methods = method_set(ballots)?;
    methods.iter().map(|m| Ok((m.to_string(), prefer_score(ballots, m)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskClass {
    Global,
    Local,
}

impl TaskClass {
    pub fn of(sample: &EditSample) -> Result<Self> {
        let family = sample
            .family()
            .ok_or_else(|| Error::Input(format!("sample {} has no family label", sample.id)))?;
        Ok(if family.is_global() { TaskClass::Global } else { TaskClass::Local })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskClass::Global => "global",
            TaskClass::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub method: String,
    pub sample_id: String,
    pub class: TaskClass,
    pub clip_t: f64,
    pub clip_d: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMeans {
    pub clip_t: f64,
    pub clip_d: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub global: ClassMeans,
    pub local: ClassMeans,
    pub prefer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub records: Vec<EvalRecord>,
}

/// Edited images of one method keyed by sample id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MethodOutputs {
    pub name: String,
    pub images: BTreeMap<String, ImageTensor>,
}

/// Per-method, per-class metric means. Every method must have an output for
/// every sample; the error lists what is missing.
pub fn eval_report(
    methods: &[MethodOutputs],
    samples: &[&EditSample],
    e: &dyn Embedder,
    ballots: Option<&[RankingBallot]>,
) -> Result<EvalReport> {
    if methods.is_empty() || samples.is_empty() {
        return Err(Error::Input("evaluation needs at least one method and one sample".into()));
    }
    let mut missing = Vec::new();
    for m in methods {
        for s in samples {
            if !m.images.contains_key(&s.id) {
                missing.push(format!("{}/{}", m.name, s.id));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!("missing outputs: {}", missing.join(", "))));
    }
    let prefer = match ballots {
        Some(b) => {
            let names: BTreeSet<&str> = methods.iter().map(|m| m.name.as_str()).collect();
            for ballot in b {
                ballot.validate(&names)?;
                if !samples.iter().any(|s| s.id == ballot.sample) {
                    return Err(ballot.malformed("sample is not in the evaluated set"));
                }
            }
            Some(prefer_scores(b)?)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(methods.len() * samples.len());
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let mut sums = [(0.0, 0.0, 0usize); 2];
        for s in samples {
            let generated = &m.images[&s.id];
            let class = TaskClass::of(s)?;
            let t = clip_t(generated, &s.tgt_caption, e)?;
            let d = clip_d(&s.src_image, generated, &s.src_caption, &s.tgt_caption, e)?;
            let slot = &mut sums[class as usize];
            slot.0 += t;
            slot.1 += d.value;
            slot.2 += 1;
            records.push(EvalRecord {
                method: m.name.clone(),
                sample_id: s.id.clone(),
                class,
                clip_t: t,
                clip_d: d.value,
                degenerate: d.degenerate,
            });
        }
        let means = |(t, d, n): (f64, f64, usize)| {
            if n == 0 {
                ClassMeans::default()
            } else {
                ClassMeans {
                    clip_t: t / n as f64,
                    clip_d: d / n as f64,
                    count: n,
                }
            }
        };
        rows.push(ReportRow {
            method: m.name.clone(),
            global: means(sums[0]),
            local: means(sums[1]),
            prefer: prefer.as_ref().and_then(|p| p.get(&m.name).copied()),
        });
    }
    Ok(EvalReport { rows, records })
}

impl EvalReport {
    /// Fixed-width table: global CLIP-T / CLIP-D, local CLIP-T / CLIP-D,
    /// prefer score.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>17}  {:>17}  {:>7}", "", "Global", "Local", "");
        let _ = writeln!(
            out,
            "{:<width$}  {:>8} {:>8}  {:>8} {:>8}  {:>7}",
            "Method", "CLIP-T", "CLIP-D", "CLIP-T", "CLIP-D", "Prefer"
        );
        let cell = |m: &ClassMeans, v: f64| if m.count == 0 { format!("{:>8}", "-") } else { format!("{v:>8.4}") };
        for r in &self.rows {
            let prefer = r.prefer.map_or_else(|| format!("{:>7}", "-"), |p| format!("{p:>7.4}"));
            let _ = writeln!(
                out,
                "{:<width$}  {} {}  {} {}  {}",
                r.method,
                cell(&r.global, r.global.clip_t),
                cell(&r.global, r.global.clip_d),
                cell(&r.local, r.local.clip_t),
                cell(&r.local, r.local.clip_d),
                prefer
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_routing_corpus, TemplateCaptionClient};

    struct Fixed(Vec<f64>, Vec<f64>);

    impl Embedder for Fixed {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn embed_image(&self, _: &ImageTensor) -> Vec<f64> {
            self.0.clone()
        }
        fn embed_text(&self, _: &str) -> Vec<f64> {
            self.1.clone()
        }
    }

    #[test]
    fn hand_cosines() {
        let img = ImageTensor::filled(2, 2, [0.1, 0.2, 0.3]);
        assert_eq!(clip_t(&img, "x", &Fixed(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0])).unwrap(), 1.0);
        assert_eq!(clip_t(&img, "x", &Fixed(vec![1.0, 0.0], vec![0.0, 1.0])).unwrap(), 0.0);
        let v = clip_t(&img, "x", &Fixed(vec![1.0, 2.0, 2.0], vec![2.0, 1.0, 2.0])).unwrap();
        assert!((v - 8.0 / 9.0).abs() < 1e-15);
        let d = directional_cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d.value - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            clip_t(&img, "x", &Fixed(vec![0.0; 2], vec![1.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn unchanged_output_is_degenerate() {
        let e = ToyEmbedder::default();
        let img = ImageTensor::from_fn(8, 8, |c, y, x| ((c + y + x) % 3) as f64 * 0.3);
        let d = clip_d(&img, &img, "a red box", "a blue box", &e).unwrap();
        assert_eq!(
            d,
            Directional {
                value: 0.0,
                degenerate: true
            }
        );
    }

    #[test]
    fn toy_embedder_is_deterministic_and_color_aware() {
        let e = ToyEmbedder::default();
        assert_eq!(e.embed_text("a red box"), ToyEmbedder::default().embed_text("a red box"));
        let red = ImageTensor::filled(8, 8, [0.9, -0.8, -0.8]);
        let a = clip_t(&red, "a red square", &e).unwrap();
        let b = clip_t(&red, "a green square", &e).unwrap();
        assert!(a > b, "{a} vs {b}");
    }

    fn ballot(p: &str, order: &[&str]) -> RankingBallot {
        RankingBallot::new(p, "s0", order.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn prefer_counts() {
        let one = [ballot("p", &["A", "B"])];
        assert_eq!(prefer_score(&one, "A").unwrap(), 1.0);
        assert_eq!(prefer_score(&one, "B").unwrap(), 0.0);
        let mut many = Vec::new();
        for i in 0..10 {
            many.push(ballot(
                &format!("p{i}"),
                if i < 4 {
                    &["A", "B", "C"]
                } else if i < 7 {
                    &["B", "C", "A"]
                } else {
                    &["C", "A", "B"]
                },
            ));
        }
        assert_eq!(prefer_score(&many, "A").unwrap(), 0.4);
        let all = prefer_scores(&many).unwrap();
        assert!((all.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_ballots_name_the_participant() {
        let bad = [ballot("p1", &["A", "B"]), ballot("p2", &["A", "A"])];
        let msg = prefer_score(&bad, "A").unwrap_err().to_string();
        assert!(msg.contains("p2") && msg.contains("s0"), "{msg}");
        let short = [ballot("p1", &["A", "B"]), ballot("p3", &["B"])];
        assert!(prefer_score(&short, "A").is_err());
        assert!(prefer_score(&[], "A").is_err());
    }

    #[test]
    fn report_single_sample_and_missing_ids() {
        let corpus = synth_routing_corpus(1, 8, 4, &TemplateCaptionClient).unwrap();
        let e = ToyEmbedder::default();
        let s = &corpus[0];
        let mut out = MethodOutputs {
            name: "m".into(),
            ..Default::default()
        };
        out.images.insert(s.id.clone(), s.tgt_image.clone());
        let report = eval_report(&[out.clone()], &[s], &e, None).unwrap();
        let r = &report.records[0];
        let row = &report.rows[0];
        assert_eq!(row.local.clip_t, r.clip_t);
        assert_eq!(row.local.clip_d, r.clip_d);
        assert_eq!(row.global.count, 0);
        assert!(report.table().contains("CLIP-T"));

        let err = eval_report(&[out], &[s, &corpus[1]], &e, None).unwrap_err().to_string();
        assert!(err.contains(&corpus[1].id), "{err}");
    }
}
