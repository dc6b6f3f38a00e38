use serde::{Deserialize, Serialize};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::score::{ScoreEstimator, TokenSequence};

const ROW_TOLERANCE: f64 = 1e-9;

/// Token-by-position attention, one row per caption token, rows summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    rows: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    /// Builds a map from raw nonnegative rows, normalizing each row. All-zero
    /// rows become uniform.
    pub fn from_rows(rows: usize, height: usize, width: usize, mut values: Vec<f64>) -> Result<Self> {
        let cols = height * width;
        if cols == 0 || values.len() != rows * cols {
            return Err(Error::dims(
                format!("{rows}x{cols} attention values"),
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("attention values must be finite and nonnegative".into()));
        }
        for row in values.chunks_mut(cols) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / cols as f64);
            }
        }
        Ok(Self {
            rows,
            height,
            width,
            values,
        })
    }

    pub fn uniform(rows: usize, height: usize, width: usize) -> Self {
        let cols = height * width;
        Self {
            rows,
            height,
            width,
            values: vec![1.0 / cols as f64; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_row_stochastic(&self) -> bool {
        (0..self.rows).all(|i| {
            let r = self.row(i);
            r.iter().all(|v| *v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= ROW_TOLERANCE
        })
    }

    /// Nearest-neighbour upsampling to `height × width`, rows renormalized.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::dims(
                format!("target at least {}x{}", self.height, self.width),
                format!("{height}x{width}"),
            ));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut values = Vec::with_capacity(self.rows * height * width);
        for i in 0..self.rows {
            let row = self.row(i);
            for j in 0..height {
                let sj = j * self.height / height;
                for k in 0..width {
                    let sk = k * self.width / width;
                    values.push(row[sj * self.width + sk]);
                }
            }
        }
        Self::from_rows(self.rows, height, width, values)
    }
}

/// Average of attention blocks after upsampling each to `height × width`.
pub fn average_blocks(blocks: &[AttentionMap], height: usize, width: usize) -> Result<AttentionMap> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Capability("estimator produced no attention blocks".into()))?;
    if blocks.len() == 1 && first.height == height && first.width == width {
        return Ok(first.clone());
    }
    let rows = first.rows;
    let mut acc = vec![0.0; rows * height * width];
    for b in blocks {
        if b.rows != rows {
            return Err(Error::dims(format!("{rows} attention rows"), b.rows));
        }
        let up = b.upsample(height, width)?;
        for (a, v) in acc.iter_mut().zip(&up.values) {
            *a += v;
        }
    }
    let n = blocks.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    AttentionMap::from_rows(rows, height, width, acc)
}

/// Cross-attention of caption `c` at the initial step `t = T`, averaged over
/// every attention block of the estimator and brought to the resolution of `x_t`.
pub fn extract_attention(
    est: &dyn ScoreEstimator,
    x_t: &Grid,
    c: &TokenSequence,
    sched: &Schedule,
) -> Result<AttentionMap> {
    if !est.attention_capable() {
        return Err(Error::Capability(
            "estimator does not expose cross-attention maps".into(),
        ));
    }
    let blocks = est.attention_blocks(x_t, sched.steps(), c, sched)?;
    let s = x_t.shape();
    average_blocks(&blocks, s.height, s.width)
}
