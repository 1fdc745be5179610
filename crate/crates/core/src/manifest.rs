//! Dataset manifest: JSON-lines, one record per example. Unknown fields are
//! preserved on round trip; schema violations name the line and field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example, Split};
use crate::error::{GlamError, Result};
use crate::pgm::{self, PgmData};
use crate::saliency::N_CLASSES;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub label_malignant: u8,
    pub label_benign: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_malignant_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_benign_path: Option<String>,
    pub split: Split,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ManifestRecord {
    fn validate(&self, line: usize) -> Result<()> {
        let field_err = |field: &str, why: &str| {
            Err(GlamError::manifest(format!("line {line}: field {field}: {why}")))
        };
        if self.label_malignant > 1 {
            return field_err("label_malignant", "must be 0 or 1");
        }
        if self.label_benign > 1 {
            return field_err("label_benign", "must be 0 or 1");
        }
        if (self.label_malignant == 1) != self.mask_malignant_path.is_some() {
            return field_err("mask_malignant_path", "must be present iff label_malignant = 1");
        }
        if (self.label_benign == 1) != self.mask_benign_path.is_some() {
            return field_err("mask_benign_path", "must be present iff label_benign = 1");
        }
        if self.id.is_empty() {
            return field_err("id", "must be nonempty");
        }
        Ok(())
    }
}

/// Parses and schema-validates manifest text. Does not touch the filesystem.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(raw)
            .map_err(|e| GlamError::manifest(format!("line {line}: {e}")))?;
        rec.validate(line)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn render_manifest(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text).map_err(|e| match e {
        GlamError::Manifest(m) => GlamError::manifest(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    Ok(std::fs::write(path, render_manifest(records)?)?)
}

fn read_image_u8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let p = pgm::read_pgm(path)?;
    match p.data {
        PgmData::U8(d) => Ok((p.height, p.width, d)),
        PgmData::U16(_) => Err(GlamError::manifest(format!(
            "{}: expected 8-bit PGM",
            path.display()
        ))),
    }
}

fn read_mask_u8(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let (mh, mw, data) = read_image_u8(path)?;
    if (mh, mw) != (h, w) {
        return Err(GlamError::manifest(format!(
            "{}: mask is {mh}x{mw} but image is {h}x{w}",
            path.display()
        )));
    }
    data.iter()
        .map(|&v| match v {
            0 => Ok(0u8),
            255 => Ok(1u8),
            other => Err(GlamError::manifest(format!(
                "{}: mask value {other} is not 0/255",
                path.display()
            ))),
        })
        .collect()
}

/// Loads the examples of one split; paths in the manifest are resolved
/// relative to the manifest's directory.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Dataset> {
    let records = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut examples = Vec::new();
    for rec in records.iter().filter(|r| r.split == split) {
        let (h, w, image) = read_image_u8(&base.join(&rec.image_path))?;
        let mut masks: [Option<Vec<u8>>; N_CLASSES] = [None, None];
        if let Some(p) = &rec.mask_malignant_path {
            masks[0] = Some(read_mask_u8(&base.join(p), h, w)?);
        }
        if let Some(p) = &rec.mask_benign_path {
            masks[1] = Some(read_mask_u8(&base.join(p), h, w)?);
        }
        examples.push(Example {
            id: rec.id.clone(),
            height: h,
            width: w,
            image,
            labels: [rec.label_malignant == 1, rec.label_benign == 1],
            masks,
        });
    }
    Dataset::new(examples)
}

/// Writes a full dataset directory: images/, masks/, and manifest.jsonl.
pub fn write_dataset(dir: &Path, splits: &[(Split, &Dataset)]) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut records = Vec::new();
    for (split, ds) in splits {
        for e in &ds.examples {
            e.validate()?;
            let image_rel = format!("images/{}.pgm", e.id);
            let bytes: Vec<u8> = e.image.clone();
            pgm::write_pgm8(&dir.join(&image_rel), e.width, e.height, &bytes)?;
            let mut mask_paths: [Option<String>; N_CLASSES] = [None, None];
            for (c, name) in ["malignant", "benign"].iter().enumerate() {
                if let Some(m) = &e.masks[c] {
                    let rel = format!("masks/{}_{name}.pgm", e.id);
                    let px: Vec<u8> = m.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
                    pgm::write_pgm8(&dir.join(&rel), e.width, e.height, &px)?;
                    mask_paths[c] = Some(rel);
                }
            }
            records.push(ManifestRecord {
                id: e.id.clone(),
                image_path: image_rel,
                label_malignant: e.labels[0] as u8,
                label_benign: e.labels[1] as u8,
                mask_malignant_path: mask_paths[0].take(),
                mask_benign_path: mask_paths[1].take(),
                split: *split,
                extra: BTreeMap::new(),
            });
        }
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_json(label: u8, with_mask: bool) -> String {
        let mask = if with_mask {
            r#","mask_malignant_path":"m.pgm""#
        } else {
            ""
        };
        format!(
            r#"{{"id":"a","image_path":"i.pgm","label_malignant":{label},"label_benign":0{mask},"split":"train"}}"#
        )
    }

    #[test]
    fn empty_text_parses_to_empty() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn label_without_mask_is_rejected_with_line() {
        let err = parse_manifest(&record_json(1, false)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("mask_malignant_path"), "{msg}");
        assert!(parse_manifest(&record_json(1, true)).is_ok());
        assert!(parse_manifest(&record_json(0, false)).is_ok());
        assert!(parse_manifest(&record_json(0, true)).is_err());
        assert!(parse_manifest(&record_json(2, false)).is_err());
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let text = r#"{"id":"a","image_path":"i.pgm","label_malignant":0,"label_benign":0,"split":"val","site":"nyc","score":3}"#;
        let recs = parse_manifest(text).unwrap();
        assert_eq!(recs[0].extra["site"], serde_json::json!("nyc"));
        let rendered = render_manifest(&recs).unwrap();
        let back = parse_manifest(&rendered).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn garbage_lines_fail_with_line_numbers() {
        let text = format!("{}\nnot json\n", record_json(0, false));
        let msg = parse_manifest(&text).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pos = Example {
            id: "train-0000".into(),
            height: 3,
            width: 4,
            image: (0..12).map(|v| (v * 20) as u8).collect(),
            labels: [true, false],
            masks: [Some(vec![0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0]), None],
        };
        let neg = Example {
            id: "val-0000".into(),
            height: 3,
            width: 4,
            image: vec![9; 12],
            labels: [false, false],
            masks: [None, None],
        };
        let train = Dataset::new(vec![pos.clone()]).unwrap();
        let val = Dataset::new(vec![neg]).unwrap();
        let manifest =
            write_dataset(dir.path(), &[(Split::Train, &train), (Split::Val, &val)]).unwrap();
        let loaded = load_split(&manifest, Split::Train).unwrap();
        assert_eq!(loaded.len(), 1);
        let got = &loaded.examples[0];
        assert_eq!(got.image, pos.image);
        assert_eq!(got.masks[0], pos.masks[0]);
        assert_eq!(got.labels, [true, false]);
        let v = load_split(&manifest, Split::Val).unwrap();
        assert_eq!(v.len(), 1);
        assert!(!v.examples[0].positive());
    }

    #[test]
    fn missing_image_file_is_an_error_not_a_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, record_json(0, false)).unwrap();
        assert!(load_split(&path, Split::Train).is_err());
    }
}
