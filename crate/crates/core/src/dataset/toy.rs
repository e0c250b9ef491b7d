//! Procedural toy corpora: a handful of distinctive "artworks" stand in for
//! the copyrighted set, loosely structured "photos" for the rest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{CorpusManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::{derive_seed, normal, rng_from_seed, StdRng};
use crate::scalar::Scalar;

const ARTWORK_TITLES: [&str; 10] = [
    "starry swirl over the village",
    "sunflowers in a yellow vase",
    "wheat field with crows",
    "the bedroom in blue",
    "irises by the garden wall",
    "cafe terrace at night",
    "almond blossoms",
    "olive trees at dusk",
    "the yellow house",
    "self portrait with straw hat",
];

const PHOTO_CLASSES: [&str; 10] = [
    "goldfish",
    "tabby cat",
    "golden retriever",
    "red fox",
    "tree frog",
    "hot air balloon",
    "lighthouse",
    "daisy",
    "volcano",
    "sailboat",
];

/// Title of artwork `i`; prompts for generated copyright records.
pub fn artwork_prompt(i: usize) -> String {
    match ARTWORK_TITLES.get(i) {
        Some(t) => format!("a painting of {t}"),
        None => format!("a painting, artwork number {i}"),
    }
}

pub fn photo_prompt(i: usize) -> String {
    match PHOTO_CLASSES.get(i) {
        Some(c) => format!("a photo of a {c}"),
        None => format!("a photo of object class {i}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub shape: Shape,
    pub n_artworks: usize,
    pub n_photo_classes: usize,
    pub n_copyright: usize,
    pub n_noncopyright: usize,
    /// Pixel noise separating the copies of one artwork.
    pub copy_jitter: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            shape: (32, 32, 3),
            n_artworks: 10,
            n_photo_classes: 10,
            n_copyright: 200,
            n_noncopyright: 200,
            copy_jitter: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus<T> {
    pub copyright: CorpusManifest<T>,
    pub noncopyright: CorpusManifest<T>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn palette(rng: &mut StdRng) -> [[f64; 3]; 3] {
    let h0: f64 = rng.random();
    [
        hsv(h0, rng.random_range(0.6..1.0), rng.random_range(0.15..0.4)),
        hsv(
            h0 + rng.random_range(0.25..0.45),
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..0.95),
        ),
        hsv(
            h0 + rng.random_range(0.55..0.75),
            rng.random_range(0.3..0.8),
            rng.random_range(0.8..1.0),
        ),
    ]
}

fn blend(pal: &[[f64; 3]; 3], s: f64, ch: usize) -> f64 {
    let s = s.clamp(0.0, 1.0);
    if s < 0.5 {
        let u = s * 2.0;
        pal[0][ch] * (1.0 - u) + pal[1][ch] * u
    } else {
        let u = (s - 0.5) * 2.0;
        pal[1][ch] * (1.0 - u) + pal[2][ch] * u
    }
}

/// Base image of artwork `index`. The pattern family cycles with the index
/// so any ten consecutive artworks are structurally distinct.
pub fn artwork<T: Scalar>(index: usize, shape: Shape, seed: u64) -> Image<T> {
    let mut rng = rng_from_seed(derive_seed(seed, index as u64));
    let pal = palette(&mut rng);
    let (h, w, _) = shape;
    let freq = rng.random_range(0.6..1.4);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = (
        rng.random_range(0.3..0.7) * h as f64,
        rng.random_range(0.3..0.7) * w as f64,
    );
    let theta = rng.random_range(0.0..PI);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(2.0..6.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let kind = index % 6;
    Image::from_fn(shape, |y, x, ch| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let (dy, dx) = (fy - cy, fx - cx);
        let r = (dy * dy + dx * dx).sqrt();
        let ang = dy.atan2(dx);
        let s = match kind {
            0 => 0.5 + 0.5 * (freq * r + phase).sin(),
            1 => 0.5 + 0.5 * (freq * (fx * theta.cos() + fy * theta.sin()) + phase).sin(),
            2 => 0.5 + 0.5 * (0.5 * freq * r + 3.0 * ang + phase).sin(),
            3 => {
                let v = (0.5 * freq * fx + phase).sin() * (0.5 * freq * fy).sin();
                0.5 + 0.5 * (4.0 * v).tanh()
            }
            4 => 0.5 + 0.5 * (7.0 * ang + phase).sin() * (-r / (h as f64)).exp(),
            _ => {
                let v: f64 = blobs
                    .iter()
                    .map(|&(by, bx, rad, amp)| {
                        amp * (-((fy - by).powi(2) + (fx - bx).powi(2)) / (2.0 * rad * rad)).exp()
                    })
                    .sum();
                0.5 + 0.5 * (2.0 * v).tanh()
            }
        };
        T::lit(blend(&pal, s, ch % 3))
    })
}

fn photo<T: Scalar>(class: usize, shape: Shape, class_seed: u64, rng: &mut StdRng) -> Image<T> {
    let mut crng = rng_from_seed(class_seed);
    let base_h: f64 = crng.random();
    let top = hsv(base_h, 0.5, 0.85);
    let bottom = hsv(base_h + 0.1, 0.6, 0.35);
    let (h, w, _) = shape;
    let tilt: f64 = rng.random_range(-0.3..0.3);
    let mut blobs: Vec<(f64, f64, f64, [f64; 3])> = Vec::new();
    // the subject: a class-coloured blob of random placement and size
    blobs.push((
        rng.random_range(0.25..0.75) * h as f64,
        rng.random_range(0.25..0.75) * w as f64,
        rng.random_range(3.0..7.0),
        hsv(base_h + 0.5 + 0.05 * class as f64, 0.8, rng.random_range(0.5..0.9)),
    ));
    for _ in 0..rng.random_range(1..4) {
        blobs.push((
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
            rng.random_range(1.5..4.0),
            hsv(rng.random(), rng.random_range(0.2..0.9), rng.random_range(0.3..1.0)),
        ));
    }
    let mut img = Image::from_fn(shape, |y, x, ch| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let u = ((fy + tilt * (fx - w as f64 / 2.0)) / h as f64).clamp(0.0, 1.0);
        let mut v = top[ch % 3] * (1.0 - u) + bottom[ch % 3] * u;
        for &(by, bx, rad, col) in &blobs {
            let a = (-((fy - by).powi(2) + (fx - bx).powi(2)) / (2.0 * rad * rad)).exp();
            v = v * (1.0 - a) + col[ch % 3] * a;
        }
        T::lit(v)
    });
    for v in img.data_mut() {
        *v = (*v + normal::<T, _>(rng) * T::lit(0.03)).max(T::zero()).min(T::one());
    }
    img
}

/// The distinct base paintings, one record per artwork, no jitter.
pub fn artworks<T: Scalar>(n: usize, shape: Shape, seed: u64) -> Vec<ImageRecord<T>> {
    (0..n)
        .map(|i| ImageRecord {
            id: format!("art{i:02}"),
            pixels: artwork(i, shape, seed),
            prompt: artwork_prompt(i),
            copyrighted: true,
            source_path: PathBuf::from(format!("art{i:02}.png")),
        })
        .collect()
}

/// Generates both source sets. Copyright record `k` is a jittered copy of
/// artwork `k % n_artworks`; photo `k` belongs to class `k % n_photo_classes`.
pub fn generate<T: Scalar>(spec: &ToyCorpusSpec) -> Result<ToyCorpus<T>> {
    if spec.n_artworks == 0 || spec.n_photo_classes == 0 {
        return Err(Error::invalid(
            "toy corpus needs at least one artwork and one photo class",
        ));
    }
    let bases: Vec<Image<T>> = (0..spec.n_artworks)
        .map(|i| artwork(i, spec.shape, spec.seed))
        .collect();
    let mut rng = rng_from_seed(derive_seed(spec.seed, 1 << 32));
    let jitter = T::lit(spec.copy_jitter);
    let copyright = (0..spec.n_copyright)
        .map(|k| {
            let a = k % spec.n_artworks;
            let mut px = bases[a].clone();
            for v in px.data_mut() {
                *v = (*v + normal::<T, _>(&mut rng) * jitter).max(T::zero()).min(T::one());
            }
            ImageRecord {
                id: format!("c{k:04}"),
                pixels: px,
                prompt: artwork_prompt(a),
                copyrighted: true,
                source_path: PathBuf::from(format!("copyright/c{k:04}.png")),
            }
        })
        .collect();
    let mut prng = rng_from_seed(derive_seed(spec.seed, 2 << 32));
    let noncopyright = (0..spec.n_noncopyright)
        .map(|k| {
            let class = k % spec.n_photo_classes;
            let class_seed = derive_seed(spec.seed, (3 << 32) + class as u64);
            ImageRecord {
                id: format!("n{k:04}"),
                pixels: photo(class, spec.shape, class_seed, &mut prng),
                prompt: photo_prompt(class),
                copyrighted: false,
                source_path: PathBuf::from(format!("noncopyright/n{k:04}.png")),
            }
        })
        .collect();
    Ok(ToyCorpus {
        copyright: CorpusManifest::from_records(copyright, spec.shape, spec.seed)?,
        noncopyright: CorpusManifest::from_records(noncopyright, spec.shape, spec.seed)?,
    })
}

/// Writes every record as PNG under `root` (at its `source_path`) plus
/// `copyright.tsv` and `noncopyright.tsv`. Returns the two manifest paths.
pub fn save<T: Scalar>(corpus: &ToyCorpus<T>, root: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut out = Vec::new();
    for (set, name) in [
        (&corpus.copyright, "copyright.tsv"),
        (&corpus.noncopyright, "noncopyright.tsv"),
    ] {
        for r in &set.records {
            let path = root.join(&r.source_path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            r.pixels.write_png(&path)?;
        }
        let path = root.join(name);
        set.write_manifest(&path)?;
        out.push(path);
    }
    let nc = out.pop().unwrap();
    Ok((out.pop().unwrap(), nc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_valid() {
        let spec = ToyCorpusSpec {
            n_copyright: 20,
            n_noncopyright: 20,
            ..Default::default()
        };
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a.copyright, b.copyright);
        assert_eq!(a.noncopyright, b.noncopyright);
        assert_eq!(a.copyright.p_c, 1.0);
        assert_eq!(a.noncopyright.p_c, 0.0);
        assert_eq!(a.copyright.prompts().len(), 10);
    }

    #[test]
    fn artworks_are_distinct() {
        let arts = artworks::<f64>(10, (32, 32, 3), 5);
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(arts[i].pixels.mse(&arts[j].pixels).unwrap() > 1e-3, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            n_copyright: 4,
            n_noncopyright: 3,
            ..Default::default()
        };
        let corpus = generate::<f64>(&spec).unwrap();
        let (c, n) = save(&corpus, dir.path()).unwrap();
        let loaded = super::super::load_corpus::<f64>(dir.path(), &c).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded.records[2].prompt, corpus.copyright.records[2].prompt);
        let diff = loaded.records[2]
            .pixels
            .mse(&corpus.copyright.records[2].pixels)
            .unwrap();
        assert!(diff < 1e-5);
        assert_eq!(super::super::load_corpus::<f64>(dir.path(), &n).unwrap().len(), 3);
    }
}
