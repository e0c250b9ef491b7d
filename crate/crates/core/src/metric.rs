//! Copyright loss: semantic and perceptual distances, their normalized
//! similarity scores, and the weighted combination.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::ImageRecord;
use crate::encoders::{ConvEncoder, PerceptualFeatures, SemanticEmbedding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Trade-off weights of the combined score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricWeights<T> {
    pub alpha: T,
    pub beta: T,
    /// Map the perceptual score to `max(0, ·)`. Off by default.
    pub clamp_cl_perc_nonnegative: bool,
}

impl<T: Scalar> MetricWeights<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        let w = Self {
            alpha,
            beta,
            clamp_cl_perc_nonnegative: false,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero() && self.beta >= T::zero()) || !(self.alpha + self.beta > T::zero()) {
            return Err(Error::invalid(format!(
                "metric weights need alpha, beta >= 0 and alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// The score of an image against itself.
    pub fn max_score(&self) -> T {
        self.alpha + self.beta
    }
}

impl<T: Scalar> Default for MetricWeights<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.5),
            beta: T::lit(0.5),
            clamp_cl_perc_nonnegative: false,
        }
    }
}

/// Mean squared difference of the two embeddings.
pub fn d_sem<T: Scalar>(x: &SemanticEmbedding<T>, y: &SemanticEmbedding<T>) -> Result<T> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension {
            left: x.dim(),
            right: y.dim(),
        });
    }
    if x.dim() == 0 {
        return Ok(T::zero());
    }
    let s = x
        .vector
        .iter()
        .zip(&y.vector)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(s / T::from_usize(x.dim()).unwrap())
}

/// Per layer, the spatial mean of `‖w ⊙ (x̂ − ŷ)‖²`; summed over layers.
pub fn d_perc<T: Scalar>(x: &PerceptualFeatures<T>, y: &PerceptualFeatures<T>) -> Result<T> {
    if x.encoder_id != y.encoder_id {
        return Err(Error::Incompatible(format!(
            "features from encoders `{}` and `{}`",
            x.encoder_id, y.encoder_id
        )));
    }
    if x.layers.len() != y.layers.len() || x.weights.len() != x.layers.len() || x.weights != y.weights {
        return Err(Error::Incompatible("layer count or weights differ".into()));
    }
    let mut total = T::zero();
    for ((lx, ly), w) in x.layers.iter().zip(&y.layers).zip(&x.weights) {
        if lx.shape() != ly.shape() {
            return Err(Error::Shape {
                expected: lx.shape(),
                actual: ly.shape(),
            });
        }
        let c = lx.channels();
        if w.len() != c {
            return Err(Error::Dimension {
                left: w.len(),
                right: c,
            });
        }
        let mut layer = T::zero();
        for (px, py) in lx.data().chunks_exact(c).zip(ly.data().chunks_exact(c)) {
            for ((&a, &b), &wk) in px.iter().zip(py).zip(w) {
                let d = wk * (a - b);
                layer += d * d;
            }
        }
        total += layer / T::from_usize(lx.height() * lx.width()).unwrap();
    }
    Ok(total)
}

fn check_distance<T: Scalar>(d: T) -> Result<()> {
    if d >= T::zero() {
        Ok(())
    } else {
        Err(Error::invalid(format!("distance must be non-negative, got {d}")))
    }
}

/// `1 − d / (1 + d)`, in `(0, 1]`.
pub fn cl_sem<T: Scalar>(d: T) -> Result<T> {
    check_distance(d)?;
    Ok(T::one() - d / (T::one() + d))
}

/// `(1 − d) / (1 + d)`, in `(−1, 1]`. Negative once `d > 1`.
pub fn cl_perc<T: Scalar>(d: T) -> Result<T> {
    check_distance(d)?;
    Ok((T::one() - d) / (T::one() + d))
}

/// Both raw distances between two feature sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distances<T> {
    pub sem: T,
    pub perc: T,
}

/// The two feature views of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures<T> {
    pub semantic: SemanticEmbedding<T>,
    pub perceptual: PerceptualFeatures<T>,
}

impl<T: Scalar> ImageFeatures<T> {
    pub fn of(encoder: &ConvEncoder<T>, image: &Image<T>) -> Result<Self> {
        let (semantic, perceptual) = encoder.features(image)?;
        Ok(Self { semantic, perceptual })
    }

    pub fn distances(&self, other: &Self) -> Result<Distances<T>> {
        Ok(Distances {
            sem: d_sem(&self.semantic, &other.semantic)?,
            perc: d_perc(&self.perceptual, &other.perceptual)?,
        })
    }
}

/// `α·CL_sem + β·CL_perc` from precomputed distances.
pub fn combine<T: Scalar>(d: Distances<T>, w: &MetricWeights<T>) -> Result<T> {
    let mut perc = cl_perc(d.perc)?;
    if w.clamp_cl_perc_nonnegative {
        perc = perc.max(T::zero());
    }
    Ok(w.alpha * cl_sem(d.sem)? + w.beta * perc)
}

pub fn copyright_loss_features<T: Scalar>(
    x: &ImageFeatures<T>,
    y: &ImageFeatures<T>,
    w: &MetricWeights<T>,
) -> Result<T> {
    combine(x.distances(y)?, w)
}

/// Combined copyright score between two images; higher means more similar.
pub fn copyright_loss<T: Scalar>(
    x_img: &ImageRecord<T>,
    y_img: &ImageRecord<T>,
    encoder: &ConvEncoder<T>,
    w: &MetricWeights<T>,
) -> Result<T> {
    let fx = ImageFeatures::of(encoder, &x_img.pixels)?;
    let fy = ImageFeatures::of(encoder, &y_img.pixels)?;
    copyright_loss_features(&fx, &fy, w)
}

/// All-pairs scores, `values[i][j] = CL(query i, value j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CLMatrix<T> {
    pub values: Vec<Vec<T>>,
    pub query_ids: Vec<String>,
    pub value_ids: Vec<String>,
}

pub fn cl_matrix<T: Scalar>(
    queries: &[ImageRecord<T>],
    values: &[ImageRecord<T>],
    encoder: &ConvEncoder<T>,
    w: &MetricWeights<T>,
) -> Result<CLMatrix<T>> {
    if queries.is_empty() || values.is_empty() {
        return Err(Error::invalid("cl_matrix needs non-empty query and value lists"));
    }
    w.validate()?;
    let feats = |set: &[ImageRecord<T>]| {
        set.par_iter()
            .map(|r| ImageFeatures::of(encoder, &r.pixels))
            .collect::<Result<Vec<_>>>()
    };
    let fq = feats(queries)?;
    let fv = feats(values)?;
    let rows = fq
        .par_iter()
        .map(|q| {
            fv.iter()
                .map(|v| copyright_loss_features(q, v, w))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CLMatrix {
        values: rows,
        query_ids: queries.iter().map(|r| r.id.clone()).collect(),
        value_ids: values.iter().map(|r| r.id.clone()).collect(),
    })
}

impl<T: Scalar> CLMatrix<T> {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.value_ids.len()
    }

    /// Column index of each row's maximum (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        self.values
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    /// CSV: header `query_id,<value ids...>`, then one row per query.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id");
        for id in &self.value_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (id, row) in self.query_ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let fmt = |line: usize, message: String| Error::Format {
            path: "<csv>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt(1, "empty matrix file".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("query_id") {
            return Err(fmt(1, "header must start with `query_id`".into()));
        }
        let value_ids: Vec<String> = cols.map(str::to_string).collect();
        let mut query_ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            query_ids.push(cells.next().unwrap_or_default().to_string());
            let row = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map(T::lit)
                        .map_err(|_| fmt(i + 2, format!("bad number `{c}`")))
                })
                .collect::<Result<Vec<T>>>()?;
            if row.len() != value_ids.len() {
                return Err(fmt(
                    i + 2,
                    format!("expected {} cells, found {}", value_ids.len(), row.len()),
                ));
            }
            values.push(row);
        }
        Ok(Self {
            values,
            query_ids,
            value_ids,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Heatmap: query index down, value index across, `cell` pixels per entry.
    /// Colours span the matrix's own min..max.
    pub fn render(&self, cell: usize) -> Image<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        let vals: Vec<f64> = self.values.iter().flatten().map(|v| v.as_f64()).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Image::from_fn((rows * cell, cols * cell, 3), |y, x, c| {
            let v = (self.values[y / cell][x / cell].as_f64() - lo) / span;
            crate::plot::heat_color(v)[c]
        })
    }
}
