//! JSON-lines dataset manifest with PNG images stored next to it.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use moe_edit_core::dataset::{ConditionMethod, DropReason, EditSample, Manifest, ManifestEntry, Provenance, Scores, Verdict};
use moe_edit_core::text::{Family, Instruction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::images::{load_png, save_png};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRecord {
    height: usize,
    width: usize,
    aesthetic: f64,
    clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    id: String,
    family: Option<String>,
    instruction: String,
    src_caption: String,
    tgt_caption: String,
    src_image: String,
    tgt_image: String,
    condition_method: Option<String>,
    text_scale: f64,
    scores: Option<ScoreRecord>,
    verdict: Option<String>,
    reason: Option<String>,
    generator: String,
    seed: u64,
}

fn image_paths(id: &str) -> (String, String) {
    (format!("{IMAGE_DIR}/{id}_src.png"), format!("{IMAGE_DIR}/{id}_tgt.png"))
}

fn record(e: &ManifestEntry) -> Record {
    let s = &e.sample;
    let (src_image, tgt_image) = image_paths(&s.id);
    let (verdict, reason) = match e.verdict {
        None => (None, None),
        Some(Verdict::Keep) => (Some("keep".to_string()), None),
        Some(Verdict::Drop(r)) => (Some("drop".to_string()), Some(r.as_str().to_string())),
    };
    Record {
        id: s.id.clone(),
        family: s.family().map(|f| f.label().to_string()),
        instruction: s.instruction.text().to_string(),
        src_caption: s.src_caption.clone(),
        tgt_caption: s.tgt_caption.clone(),
        src_image,
        tgt_image,
        condition_method: s.condition_method.map(|m| m.as_str().to_string()),
        text_scale: s.text_scale,
        scores: s.scores.map(|sc| ScoreRecord {
            height: sc.resolution.0,
            width: sc.resolution.1,
            aesthetic: sc.aesthetic,
            clip: sc.clip,
        }),
        verdict,
        reason,
        generator: s.provenance.generator.clone(),
        seed: s.provenance.seed,
    }
}

/// Writes `dir/manifest.jsonl` and every image; returns the manifest path.
pub fn write(dir: &Path, manifest: &Manifest) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for e in &manifest.entries {
        let r = record(e);
        save_png(&dir.join(&r.src_image), &e.sample.src_image)?;
        save_png(&dir.join(&r.tgt_image), &e.sample.tgt_image)?;
        serde_json::to_writer(&mut out, &r).map_err(|e| CliError::pipeline(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    f.write_all(&out).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Accepts the manifest file itself or the directory holding it.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn bad(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::pipeline(format!("{}:{line}: {msg}", path.display()))
}

pub fn read(path: &Path) -> CliResult<Manifest> {
    let path = resolve(path);
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let f = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| CliError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| bad(&path, n, e))?;
        let family = match &r.family {
            Some(label) => Some(Family::from_label(label).ok_or_else(|| bad(&path, n, format!("unknown family {label:?}")))?),
            None => None,
        };
        let instruction = match family {
            Some(f) => Instruction::labeled(r.instruction.clone(), f),
            None => Instruction::new(r.instruction.clone()),
        }
        .map_err(|e| bad(&path, n, e))?;
        let condition_method = r
            .condition_method
            .as_deref()
            .map(ConditionMethod::parse)
            .transpose()
            .map_err(|e| bad(&path, n, e))?;
        let verdict = match (r.verdict.as_deref(), r.reason.as_deref()) {
            (None, _) => None,
            (Some("keep"), None) => Some(Verdict::Keep),
            (Some("drop"), Some(reason)) => Some(Verdict::Drop(
                DropReason::parse(reason).ok_or_else(|| bad(&path, n, format!("unknown drop reason {reason:?}")))?,
            )),
            (v, reason) => return Err(bad(&path, n, format!("inconsistent verdict {v:?} / reason {reason:?}"))),
        };
        let sample = EditSample {
            src_image: load_png(&base.join(&r.src_image), None)?,
            tgt_image: load_png(&base.join(&r.tgt_image), None)?,
            id: r.id,
            instruction,
            src_caption: r.src_caption,
            tgt_caption: r.tgt_caption,
            condition_method,
            text_scale: r.text_scale,
            scores: r.scores.map(|s| Scores {
                resolution: (s.height, s.width),
                aesthetic: s.aesthetic,
                clip: s.clip,
            }),
            provenance: Provenance {
                generator: r.generator,
                seed: r.seed,
            },
        };
        entries.push(ManifestEntry { sample, verdict });
    }
    Ok(Manifest { entries })
}

/// SHA-256 over the manifest file and every image it references, in order.
pub fn checksum(path: &Path) -> CliResult<String> {
    let path = resolve(path);
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let mut h = Sha256::new();
    h.update(&text);
    for line in text.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        let r: Record = serde_json::from_slice(line).map_err(|e| CliError::pipeline(format!("{}: {e}", path.display())))?;
        for rel in [&r.src_image, &r.tgt_image] {
            let p = base.join(rel);
            h.update(std::fs::read(&p).map_err(|e| CliError::io(&p, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use moe_edit_core::dataset::{filter, score_sample, synth_routing_corpus, FilterPolicy, TemplateCaptionClient};
    use moe_edit_core::eval::ToyEmbedder;

    #[test]
    fn write_read_write_is_stable() {
        let e = ToyEmbedder::default();
        let samples: Vec<_> = synth_routing_corpus(2, 8, 1, &TemplateCaptionClient)
            .unwrap()
            .into_iter()
            .map(|s| score_sample(s, &e).unwrap())
            .collect();
        let judged = filter(Manifest::from_samples(samples), &FilterPolicy::default()).unwrap();
        let a = tempfile::tempdir().unwrap();
        write(a.path(), &judged).unwrap();
        let back = read(a.path()).unwrap();
        assert_eq!(back.len(), judged.len());
        for (x, y) in back.entries.iter().zip(&judged.entries) {
            assert_eq!(x.verdict, y.verdict);
            assert_eq!(x.sample.instruction, y.sample.instruction);
            assert_eq!(x.sample.scores, y.sample.scores);
        }
        let b = tempfile::tempdir().unwrap();
        write(b.path(), &back).unwrap();
        let c = tempfile::tempdir().unwrap();
        write(c.path(), &read(b.path()).unwrap()).unwrap();
        assert_eq!(checksum(b.path()).unwrap(), checksum(c.path()).unwrap());
    }
}
