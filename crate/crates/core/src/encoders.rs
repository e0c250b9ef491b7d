//! Frozen random-weight convolutional encoders.
//!
//! One stack of stride-2 3×3 convolutions serves both feature views: the
//! semantic embedding is the global average of the deepest map projected to
//! `embedding_dim`, and the perceptual features are every intermediate map,
//! unit-normalized per pixel. The stack has no biases, so a black image maps
//! to all-zero features.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::{normal, rng_from_seed};
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.2;
/// Gain on the semantic projection; puts the MSE between unrelated toy
/// images in the unit range.
const EMBEDDING_GAIN: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    /// Every per-channel weight equals one.
    Uniform,
    /// One line per layer, comma-separated non-negative reals.
    Custom(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub seed: u64,
    pub layer_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub weight_scheme: WeightScheme,
    pub input_shape: Shape,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layer_widths: vec![16, 32, 64],
            embedding_dim: 64,
            weight_scheme: WeightScheme::Uniform,
            input_shape: (32, 32, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding<T> {
    pub vector: Vec<T>,
    pub encoder_id: String,
}

impl<T: Scalar> SemanticEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Per-layer maps (`H_l × W_l × C_l`) and channel weights `w^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualFeatures<T> {
    pub layers: Vec<Image<T>>,
    pub weights: Vec<Vec<T>>,
    pub encoder_id: String,
}

/// Rescales every pixel's channel vector to unit length; all-zero vectors
/// are left at zero.
pub fn normalize_features<T: Scalar>(map: &mut Image<T>) {
    let (h, w, _) = map.shape();
    for y in 0..h {
        for x in 0..w {
            let px = map.pixel_mut(y, x);
            let norm = px.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if norm > T::zero() {
                for v in px {
                    *v /= norm;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Conv<T> {
    in_c: usize,
    out_c: usize,
    /// `[out][ky][kx][in]`
    kernel: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    fn out_size(n: usize) -> usize {
        n.div_ceil(2)
    }

    /// 3×3, stride 2, zero padding 1, followed by a leaky ReLU.
    fn forward(&self, input: &Image<T>) -> Image<T> {
        let (h, w, c) = input.shape();
        debug_assert_eq!(c, self.in_c);
        let (oh, ow) = (Self::out_size(h), Self::out_size(w));
        let slope = T::lit(LEAKY_SLOPE);
        let mut out = Image::zeros((oh, ow, self.out_c));
        let mut acc = vec![T::zero(); self.out_c];
        for oy in 0..oh {
            for ox in 0..ow {
                acc.iter_mut().for_each(|a| *a = T::zero());
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = input.pixel(iy as usize, ix as usize);
                        for (o, a) in acc.iter_mut().enumerate() {
                            let k = &self.kernel[((o * 3 + ky) * 3 + kx) * c..][..c];
                            *a += crate::scalar::dot(k, px);
                        }
                    }
                }
                for (dst, &a) in out.pixel_mut(oy, ox).iter_mut().zip(&acc) {
                    *dst = if a >= T::zero() { a } else { a * slope };
                }
            }
        }
        out
    }
}

/// A built, immutable encoder.
#[derive(Debug, Clone)]
pub struct ConvEncoder<T> {
    spec: EncoderSpec,
    id: String,
    convs: Vec<Conv<T>>,
    /// `embedding_dim × C_last`, row-major.
    projection: Vec<T>,
    layer_weights: Vec<Vec<T>>,
}

fn read_weights_file<T: Scalar>(path: &Path, widths: &[usize]) -> Result<Vec<Vec<T>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != widths.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: lines.len(),
            message: format!("expected {} weight lines, found {}", widths.len(), lines.len()),
        });
    }
    lines
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(i, (line, &width))| {
            let bad = |message: String| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let row = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("not a number: `{}`", t.trim())))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != width {
                return Err(bad(format!("layer {i} needs {width} weights, found {}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(bad("weights must be finite and non-negative".into()));
            }
            Ok(row.into_iter().map(T::lit).collect())
        })
        .collect()
}

/// Builds the frozen stack; weights are a pure function of the spec.
pub fn build_encoder<T: Scalar>(spec: &EncoderSpec) -> Result<ConvEncoder<T>> {
    if spec.layer_widths.is_empty() {
        return Err(Error::invalid("encoder needs at least one layer"));
    }
    if spec.layer_widths.contains(&0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    if spec.embedding_dim == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    let (h, w, c) = spec.input_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid("input shape must be non-empty"));
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut convs = Vec::with_capacity(spec.layer_widths.len());
    let mut in_c = c;
    for (layer, &out_c) in spec.layer_widths.iter().enumerate() {
        let std = T::lit((2.0 / (9.0 * in_c as f64)).sqrt());
        let mut kernel: Vec<T> = (0..out_c * 9 * in_c).map(|_| normal::<T, _>(&mut rng) * std).collect();
        if layer == 0 {
            // zero-sum first-layer filters respond to contrast and colour
            // differences, not to overall brightness
            for k in kernel.chunks_exact_mut(9 * in_c) {
                let mean = k.iter().copied().sum::<T>() / T::lit(k.len() as f64);
                k.iter_mut().for_each(|v| *v -= mean);
            }
        }
        convs.push(Conv { in_c, out_c, kernel });
        in_c = out_c;
    }
    let pstd = T::lit(EMBEDDING_GAIN / (in_c as f64).sqrt());
    let projection = (0..spec.embedding_dim * in_c)
        .map(|_| normal::<T, _>(&mut rng) * pstd)
        .collect();
    let layer_weights = match &spec.weight_scheme {
        WeightScheme::Uniform => spec.layer_widths.iter().map(|&n| vec![T::one(); n]).collect(),
        WeightScheme::Custom(path) => read_weights_file(path, &spec.layer_widths)?,
    };
    let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
    let id = format!(
        "conv-s{}-w{}-d{}-{}x{}x{}",
        spec.seed,
        widths.join("_"),
        spec.embedding_dim,
        h,
        w,
        c
    );
    Ok(ConvEncoder {
        spec: spec.clone(),
        id,
        convs,
        projection,
        layer_weights,
    })
}

impl<T: Scalar> ConvEncoder<T> {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input_shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    fn check(&self, image: &Image<T>) -> Result<()> {
        if image.shape() != self.spec.input_shape {
            return Err(Error::Shape {
                expected: self.spec.input_shape,
                actual: image.shape(),
            });
        }
        Ok(())
    }

    /// Raw (unnormalized) activations of every layer.
    pub fn activations(&self, image: &Image<T>) -> Result<Vec<Image<T>>> {
        self.check(image)?;
        let mut maps: Vec<Image<T>> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let next = conv.forward(maps.last().unwrap_or(image));
            maps.push(next);
        }
        Ok(maps)
    }

    fn project(&self, deepest: &Image<T>) -> SemanticEmbedding<T> {
        let c = deepest.channels();
        let n = T::from_usize(deepest.height() * deepest.width()).unwrap();
        let mut pooled = vec![T::zero(); c];
        for px in deepest.data().chunks_exact(c) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n);
        let vector = self
            .projection
            .chunks_exact(c)
            .map(|row| crate::scalar::dot(row, &pooled))
            .collect();
        SemanticEmbedding {
            vector,
            encoder_id: self.id.clone(),
        }
    }

    fn perceptual(&self, mut maps: Vec<Image<T>>) -> PerceptualFeatures<T> {
        maps.iter_mut().for_each(normalize_features);
        PerceptualFeatures {
            layers: maps,
            weights: self.layer_weights.clone(),
            encoder_id: self.id.clone(),
        }
    }

    pub fn embed_semantic(&self, image: &Image<T>) -> Result<SemanticEmbedding<T>> {
        let maps = self.activations(image)?;
        Ok(self.project(maps.last().expect("non-empty stack")))
    }

    pub fn extract_perceptual(&self, image: &Image<T>) -> Result<PerceptualFeatures<T>> {
        Ok(self.perceptual(self.activations(image)?))
    }

    /// Both views from a single forward pass.
    pub fn features(&self, image: &Image<T>) -> Result<(SemanticEmbedding<T>, PerceptualFeatures<T>)> {
        let maps = self.activations(image)?;
        let sem = self.project(maps.last().expect("non-empty stack"));
        Ok((sem, self.perceptual(maps)))
    }
}

/// Reads `<id>\t<comma-separated reals>` lines. All rows must share one
/// dimension.
pub fn load_external_embeddings<T: Scalar>(file: &Path) -> Result<BTreeMap<String, SemanticEmbedding<T>>> {
    let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    let encoder_id = format!(
        "external:{}",
        file.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    );
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format {
            path: file.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `<id>\\t<values>`".into()))?;
        let vector = values
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| bad(format!("not a finite number: `{}`", t.trim())))
            })
            .collect::<Result<Vec<T>>>()?;
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(bad(format!(
                    "dimension {} differs from earlier rows ({d})",
                    vector.len()
                )))
            }
            _ => {}
        }
        if out
            .insert(
                id.to_string(),
                SemanticEmbedding {
                    vector,
                    encoder_id: encoder_id.clone(),
                },
            )
            .is_some()
        {
            return Err(bad(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// Lookup that reports the missing id.
pub fn external_embedding<'a, T>(
    map: &'a BTreeMap<String, SemanticEmbedding<T>>,
    id: &str,
) -> Result<&'a SemanticEmbedding<T>> {
    map.get(id).ok_or_else(|| Error::Lookup(id.to_string()))
}
