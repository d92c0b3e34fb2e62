//! Overlapping trajectory segments.
//!
//! Segment `k` (zero-based) covers points `[k·s, k·s + L_seg)` with stride
//! `s = L_seg − L_overlap`. Neighbouring segments share `L_overlap` points;
//! on reassembly every shared point is the mean of its two predictions.

use std::ops::Range;

use numgrad::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub len: usize,
    pub seg_len: usize,
    pub overlap: usize,
    pub count: usize,
    pub stride: usize,
}

impl SegmentLayout {
    pub fn new(len: usize, seg_len: usize, overlap: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if seg_len == 0 || seg_len > len {
            return bad(format!("segment length {seg_len} must lie in [1, {len}]"));
        }
        if overlap >= seg_len {
            return bad(format!("overlap {overlap} must be smaller than the segment length {seg_len}"));
        }
        let stride = seg_len - overlap;
        if (len - seg_len) % stride != 0 {
            return bad(format!(
                "segments of {seg_len} with overlap {overlap} do not tile a trajectory of {len} points"
            ));
        }
        Ok(Self { len, seg_len, overlap, count: (len - seg_len) / stride + 1, stride })
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        let a = k * self.stride;
        a..a + self.seg_len
    }

    /// Number of segments covering point `i`.
    pub fn coverage(&self, i: usize) -> usize {
        (0..self.count).filter(|&k| self.range(k).contains(&i)).count()
    }

    /// Effective overlap between neighbours (0 when there is one segment).
    fn shared(&self) -> usize {
        if self.count < 2 {
            0
        } else {
            self.overlap
        }
    }

    fn check(&self, traj: &Tensor) -> Result<()> {
        if traj.rows() != self.len {
            return Err(Error::Invalid(format!("trajectory has {} points, layout expects {}", traj.rows(), self.len)));
        }
        Ok(())
    }

    /// `K` tensors of `L_seg × C` cut from an `L × C` trajectory.
    pub fn segment(&self, traj: &Tensor) -> Result<Vec<Tensor>> {
        self.check(traj)?;
        let c = traj.cols();
        Ok((0..self.count)
            .map(|k| {
                let r = self.range(k);
                Tensor::matrix(self.seg_len, c, traj.data()[r.start * c..r.end * c].to_vec())
            })
            .collect())
    }

    /// Inverse of [`segment`](Self::segment), averaging shared points.
    pub fn reassemble(&self, segs: &[Tensor]) -> Result<Tensor> {
        let c = self.check_segments(segs)?;
        let mut out = vec![0.0; self.len * c];
        for (k, seg) in segs.iter().enumerate() {
            for (j, i) in self.range(k).enumerate() {
                let w = 1.0 / self.coverage(i) as f64;
                for ch in 0..c {
                    out[i * c + ch] += w * seg.get(j, ch);
                }
            }
        }
        Ok(Tensor::matrix(self.len, c, out))
    }

    /// Mean over adjacent pairs of the mean squared difference across their
    /// shared points; zero with a single segment or no overlap.
    pub fn consistency_loss(&self, segs: &[Tensor]) -> Result<f64> {
        let c = self.check_segments(segs)?;
        let ov = self.shared();
        if ov == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for k in 0..self.count - 1 {
            let mut pair = 0.0;
            for j in 0..ov {
                for ch in 0..c {
                    let d = segs[k].get(self.stride + j, ch) - segs[k + 1].get(j, ch);
                    pair += d * d;
                }
            }
            total += pair / (ov * c) as f64;
        }
        Ok(total / (self.count - 1) as f64)
    }

    fn check_segments(&self, segs: &[Tensor]) -> Result<usize> {
        if segs.len() != self.count {
            return Err(Error::Invalid(format!("{} segments, layout expects {}", segs.len(), self.count)));
        }
        let c = segs[0].cols();
        if segs.iter().any(|s| s.rows() != self.seg_len || s.cols() != c) {
            return Err(Error::Invalid(format!("segments must all be {} x {c}", self.seg_len)));
        }
        Ok(c)
    }

    /// Flattened segments of `items` stacked trajectories (`items·L × C`):
    /// one row of `L_seg·C` per segment, item-major.
    pub fn segment_rows(&self, trajs: &Tensor, items: usize) -> Result<Tensor> {
        let c = trajs.cols();
        if trajs.rows() != items * self.len {
            return Err(Error::Invalid(format!("{} rows for {items} trajectories of {}", trajs.rows(), self.len)));
        }
        let width = self.seg_len * c;
        let mut data = Vec::with_capacity(items * self.count * width);
        for b in 0..items {
            for k in 0..self.count {
                let r = self.range(k);
                let base = b * self.len;
                data.extend_from_slice(&trajs.data()[(base + r.start) * c..(base + r.end) * c]);
            }
        }
        Ok(Tensor::matrix(items * self.count, width, data))
    }

    /// Terms for `Graph::combine_rows` taking per-point segment rows
    /// (`items·K·L_seg`, item-major then segment) to `items·L` reassembled
    /// points.
    pub fn reassemble_terms(&self, items: usize) -> Vec<(usize, usize, f64)> {
        let mut terms = Vec::with_capacity(items * self.count * self.seg_len);
        for b in 0..items {
            for k in 0..self.count {
                for (j, i) in self.range(k).enumerate() {
                    let src = (b * self.count + k) * self.seg_len + j;
                    terms.push((b * self.len + i, src, 1.0 / self.coverage(i) as f64));
                }
            }
        }
        terms
    }

    /// Terms producing one row per shared point and adjacent pair holding
    /// `segment k − segment k+1`, plus the number of such rows. The mean of
    /// the squared rows is the batch consistency loss.
    pub fn overlap_diff_terms(&self, items: usize) -> (usize, Vec<(usize, usize, f64)>) {
        let ov = self.shared();
        let mut terms = Vec::new();
        let mut row = 0;
        for b in 0..items {
            for k in 0..self.count.saturating_sub(1) {
                for j in 0..ov {
                    let a = (b * self.count + k) * self.seg_len + self.stride + j;
                    let c = (b * self.count + k + 1) * self.seg_len + j;
                    terms.push((row, a, 1.0));
                    terms.push((row, c, -1.0));
                    row += 1;
                }
            }
        }
        (row, terms)
    }
}

/// Sinusoidal embedding of a scalar position into `dim` (even) channels:
/// `sin(p·f_i)` in the first half, `cos(p·f_i)` in the second, with
/// `f_i = 10000^(−i/(dim/2))`.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        out[i] = (position * f).sin();
        out[half + i] = (position * f).cos();
    }
    out
}
