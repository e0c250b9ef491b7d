//! Image corpora: loading, validation, proportion-controlled mixing and
//! anchor lookup.
//!
//! A corpus manifest is a UTF-8 text file with one record per line:
//!
//! ```text
//! # p_c=0.3 seed=7 replacement=0 shape=32x32x3
//! <id>\t<relative_path>\t<0|1>\t<prompt>
//! ```
//!
//! Lines starting with `#` carry `key=value` metadata; unknown keys are
//! ignored. Images are 8-bit PNGs resolved relative to the corpus root.

pub mod toy;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

pub const DEFAULT_SHAPE: Shape = (32, 32, 3);

/// One training image with its prompt and copyright flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord<T> {
    pub id: String,
    pub pixels: Image<T>,
    pub prompt: String,
    pub copyrighted: bool,
    pub source_path: PathBuf,
}

/// An ordered, validated set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest<T> {
    pub records: Vec<ImageRecord<T>>,
    /// Requested copyright proportion for mixed corpora, the measured one
    /// for loaded corpora. `p_nc` is always `1 - p_c`.
    pub p_c: f64,
    pub seed: u64,
    pub image_shape: Shape,
    /// Set when a quota exceeded its source set during mixing.
    pub sampled_with_replacement: bool,
}

/// Trim, collapse inner whitespace, case-fold.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl<T: Scalar> CorpusManifest<T> {
    /// Builds a manifest from in-memory records, enforcing every invariant.
    pub fn from_records(records: Vec<ImageRecord<T>>, image_shape: Shape, seed: u64) -> Result<Self> {
        let manifest = Self {
            p_c: measured_p_c(&records),
            records,
            seed,
            image_shape,
            sampled_with_replacement: false,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn p_nc(&self) -> f64 {
        1.0 - self.p_c
    }

    /// Fraction of records flagged copyrighted (0 for an empty corpus).
    pub fn measured_p_c(&self) -> f64 {
        measured_p_c(&self.records)
    }

    pub fn copyrighted(&self) -> impl Iterator<Item = &ImageRecord<T>> {
        self.records.iter().filter(|r| r.copyrighted)
    }

    /// Distinct prompts in first-appearance order.
    pub fn prompts(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.prompt.clone()))
            .map(|r| r.prompt.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate record id `{}`", r.id)));
            }
            if r.pixels.shape() != self.image_shape {
                return Err(Error::Validation(format!(
                    "record `{}` has shape {:?}, corpus declares {:?}",
                    r.id,
                    r.pixels.shape(),
                    self.image_shape
                )));
            }
            if !r.pixels.in_unit_range() {
                return Err(Error::Validation(format!(
                    "record `{}` has pixel values outside [0, 1]",
                    r.id
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.p_c) {
            return Err(Error::Validation(format!("p_c = {} outside [0, 1]", self.p_c)));
        }
        Ok(())
    }

    /// Serializes to the manifest text format. Paths are written as stored.
    pub fn to_manifest_string(&self) -> String {
        let (h, w, c) = self.image_shape;
        let mut out = format!(
            "# p_c={} seed={} replacement={} shape={h}x{w}x{c}\n",
            self.p_c,
            self.seed,
            u8::from(self.sampled_with_replacement)
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.id,
                r.source_path.display(),
                u8::from(r.copyrighted),
                r.prompt
            );
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest_string()).map_err(|e| Error::io(path, e))
    }
}

fn measured_p_c<T>(records: &[ImageRecord<T>]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.copyrighted).count() as f64 / records.len() as f64
}

#[derive(Debug, Default)]
struct Header {
    p_c: Option<f64>,
    seed: Option<u64>,
    replacement: Option<bool>,
    shape: Option<Shape>,
}

fn parse_shape(s: &str) -> Option<Shape> {
    let mut it = s.split('x').map(|p| p.trim().parse::<usize>());
    let shape = (it.next()?.ok()?, it.next()?.ok()?, it.next()?.ok()?);
    it.next().is_none().then_some(shape)
}

fn parse_header(line: &str, header: &mut Header, path: &Path, lineno: usize) -> Result<()> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };
    for token in line.trim_start_matches('#').split_whitespace() {
        let Some((key, value)) = token.split_once('=') else {
            continue;
        };
        match key {
            "p_c" => header.p_c = Some(value.parse().map_err(|_| bad(format!("bad p_c `{value}`")))?),
            "seed" => header.seed = Some(value.parse().map_err(|_| bad(format!("bad seed `{value}`")))?),
            "replacement" => header.replacement = Some(value == "1" || value == "true"),
            "shape" => header.shape = Some(parse_shape(value).ok_or_else(|| bad(format!("bad shape `{value}`")))?),
            _ => {}
        }
    }
    Ok(())
}

/// Loads and validates a corpus. `manifest_file` is resolved against
/// `root_dir` when relative; image paths always are. Record order follows the
/// manifest. Without a `shape=` header the desk-scale 32×32×3 is assumed.
pub fn load_corpus<T: Scalar>(root_dir: &Path, manifest_file: &Path) -> Result<CorpusManifest<T>> {
    let manifest_path = root_dir.join(manifest_file);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut header = Header::default();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            parse_header(line, &mut header, &manifest_path, lineno)?;
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format {
                path: manifest_path.clone(),
                line: lineno,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let copyrighted = match fields[2].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Format {
                    path: manifest_path.clone(),
                    line: lineno,
                    message: format!("copyright flag must be 0 or 1, got `{other}`"),
                })
            }
        };
        records.push((
            fields[0].to_string(),
            PathBuf::from(fields[1]),
            copyrighted,
            fields[3].to_string(),
        ));
    }

    let shape = header.shape.unwrap_or(DEFAULT_SHAPE);
    let mut loaded = Vec::with_capacity(records.len());
    for (id, rel, copyrighted, prompt) in records {
        let pixels = Image::read_png(&root_dir.join(&rel), shape.2)?;
        if pixels.shape() != shape {
            return Err(Error::Validation(format!(
                "record `{id}` has shape {:?}, corpus declares {:?}",
                pixels.shape(),
                shape
            )));
        }
        loaded.push(ImageRecord {
            id,
            pixels,
            prompt,
            copyrighted,
            source_path: rel,
        });
    }
    let mut manifest = CorpusManifest::from_records(loaded, shape, header.seed.unwrap_or(0))?;
    manifest.sampled_with_replacement = header.replacement.unwrap_or(false);
    Ok(manifest)
}

/// Draws `quota` indices from `0..n`: without replacement when possible,
/// otherwise as successive fresh permutations. The second value is the
/// 0-based repeat count of each draw.
fn draw_indices(n: usize, quota: usize, rng: &mut impl rand::Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(quota);
    let mut round = 0;
    while out.len() < quota {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let take = (quota - out.len()).min(n);
        out.extend(perm.into_iter().take(take).map(|i| (i, round)));
        round += 1;
    }
    out
}

/// Mixes `round(p_c * n_total)` copyrighted records with the remainder drawn
/// from the non-copyright set, then shuffles. Repeated draws get an `~k`
/// suffix on their id so ids stay unique.
pub fn mix_corpus<T: Scalar>(
    copyright_set: &CorpusManifest<T>,
    noncopyright_set: &CorpusManifest<T>,
    p_c: f64,
    n_total: usize,
    seed: u64,
) -> Result<CorpusManifest<T>> {
    if !(0.0..=1.0).contains(&p_c) {
        return Err(Error::invalid(format!("p_c = {p_c} outside [0, 1]")));
    }
    if let Some(r) = copyright_set.records.iter().find(|r| !r.copyrighted) {
        return Err(Error::Validation(format!(
            "record `{}` in the copyright set is not flagged copyrighted",
            r.id
        )));
    }
    if let Some(r) = noncopyright_set.records.iter().find(|r| r.copyrighted) {
        return Err(Error::Validation(format!(
            "record `{}` in the non-copyright set is flagged copyrighted",
            r.id
        )));
    }
    let quota_c = (p_c * n_total as f64).round() as usize;
    let quota_nc = n_total - quota_c;
    if quota_c > 0 && copyright_set.is_empty() {
        return Err(Error::invalid("copyright set is empty but its quota is nonzero"));
    }
    if quota_nc > 0 && noncopyright_set.is_empty() {
        return Err(Error::invalid("non-copyright set is empty but its quota is nonzero"));
    }
    if quota_c > 0 && quota_nc > 0 && copyright_set.image_shape != noncopyright_set.image_shape {
        return Err(Error::Shape {
            expected: copyright_set.image_shape,
            actual: noncopyright_set.image_shape,
        });
    }
    let shape = if quota_c > 0 {
        copyright_set.image_shape
    } else {
        noncopyright_set.image_shape
    };

    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(n_total);
    let mut replaced = false;
    for (set, quota) in [(copyright_set, quota_c), (noncopyright_set, quota_nc)] {
        if quota == 0 {
            continue;
        }
        replaced |= quota > set.len();
        for (idx, round) in draw_indices(set.len(), quota, &mut rng) {
            let mut rec = set.records[idx].clone();
            if round > 0 {
                rec.id = format!("{}~{}", rec.id, round);
            }
            records.push(rec);
        }
    }
    records.shuffle(&mut rng);

    let manifest = CorpusManifest {
        records,
        p_c,
        seed,
        image_shape: shape,
        sampled_with_replacement: replaced,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Copyrighted records whose normalized prompt equals the normalized query,
/// in manifest order.
pub fn anchors_for_prompt<'a, T: Scalar>(manifest: &'a CorpusManifest<T>, prompt: &str) -> Vec<&'a ImageRecord<T>> {
    let key = normalize_prompt(prompt);
    manifest
        .copyrighted()
        .filter(|r| normalize_prompt(&r.prompt) == key)
        .collect()
}
