//! Segmentation metrics: Dice overlap, voxel accuracy, and the exact
//! Hausdorff distance between segmentation boundaries.
//!
//! Boundaries are foreground voxels with at least one six-connected
//! background neighbor (volume borders count as background). Hausdorff is
//! computed exactly through a squared Euclidean distance transform
//! (separable lower-envelope passes), in voxel units.

use crate::error::{Error, Result};
use crate::volume::SegMask;
use serde::{Deserialize, Serialize};

/// Binary region mask over a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub shape: (usize, usize, usize),
    pub data: Vec<bool>,
}

impl RegionMask {
    pub fn new(shape: (usize, usize, usize)) -> Self {
        RegionMask {
            shape,
            data: vec![false; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape.1 + y) * self.shape.2 + z
    }
}

fn check_shapes(p: &RegionMask, t: &RegionMask) -> Result<()> {
    if p.shape != t.shape {
        return Err(Error::ShapeError(format!(
            "mask shapes differ: {:?} vs {:?}",
            p.shape, t.shape
        )));
    }
    Ok(())
}

/// Dice overlap `2|P n T| / (|P| + |T|)`; 1.0 when both sets are empty,
/// 0.0 when exactly one is.
pub fn dice(p: &RegionMask, t: &RegionMask) -> Result<f64> {
    check_shapes(p, t)?;
    let np = p.count();
    let nt = t.count();
    if np == 0 && nt == 0 {
        return Ok(1.0);
    }
    if np == 0 || nt == 0 {
        return Ok(0.0);
    }
    let inter = p
        .data
        .iter()
        .zip(&t.data)
        .filter(|&(&a, &b)| a && b)
        .count();
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Voxel accuracy `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(pred: &RegionMask, truth: &RegionMask) -> Result<f64> {
    check_shapes(pred, truth)?;
    let correct = pred
        .data
        .iter()
        .zip(&truth.data)
        .filter(|&(&a, &b)| a == b)
        .count();
    Ok(correct as f64 / pred.data.len() as f64)
}

/// Boundary voxels: foreground with a six-connected background neighbor
/// (out-of-bounds counts as background).
pub fn boundary(mask: &RegionMask) -> Vec<[usize; 3]> {
    let (h, w, d) = mask.shape;
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if !mask.data[mask.index(x, y, z)] {
                    continue;
                }
                let mut is_boundary = false;
                let neighbors: [(i64, i64, i64); 6] = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ];
                for (dx, dy, dz) in neighbors {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    let nz = z as i64 + dz;
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= h as i64
                        || ny >= w as i64
                        || nz >= d as i64
                        || !mask.data[mask.index(nx as usize, ny as usize, nz as usize)]
                    {
                        is_boundary = true;
                        break;
                    }
                }
                if is_boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// "No seed here yet" marker. Finite so the envelope arithmetic stays
/// exact; any true squared distance on a desk-scale grid is far below it.
const EDT_BIG: f64 = 1e12;

/// 1D squared-distance lower envelope pass (exact for finite inputs).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
            / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1; // z[0] = -inf guarantees termination for finite f
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        out[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance transform of a voxel point set.
fn edt3(points: &[[usize; 3]], shape: (usize, usize, usize)) -> Vec<f64> {
    let (h, w, d) = shape;
    let mut grid = vec![EDT_BIG; h * w * d];
    for p in points {
        grid[(p[0] * w + p[1]) * d + p[2]] = 0.0;
    }
    // Pass along z.
    let mut buf_in = vec![0.0f64; h.max(w).max(d)];
    let mut buf_out = vec![0.0f64; h.max(w).max(d)];
    for x in 0..h {
        for y in 0..w {
            let base = (x * w + y) * d;
            buf_in[..d].copy_from_slice(&grid[base..base + d]);
            edt_1d(&buf_in[..d], &mut buf_out[..d]);
            grid[base..base + d].copy_from_slice(&buf_out[..d]);
        }
    }
    // Pass along y.
    for x in 0..h {
        for z in 0..d {
            for y in 0..w {
                buf_in[y] = grid[(x * w + y) * d + z];
            }
            edt_1d(&buf_in[..w], &mut buf_out[..w]);
            for y in 0..w {
                grid[(x * w + y) * d + z] = buf_out[y];
            }
        }
    }
    // Pass along x.
    for y in 0..w {
        for z in 0..d {
            for x in 0..h {
                buf_in[x] = grid[(x * w + y) * d + z];
            }
            edt_1d(&buf_in[..h], &mut buf_out[..h]);
            for x in 0..h {
                grid[(x * w + y) * d + z] = buf_out[x];
            }
        }
    }
    grid
}

/// Symmetric Hausdorff distance between the boundaries of two nonempty
/// regions, in voxel units. Errors when either region is empty.
pub fn hausdorff(p: &RegionMask, t: &RegionMask) -> Result<f64> {
    check_shapes(p, t)?;
    let bp = boundary(p);
    let bt = boundary(t);
    if bp.is_empty() {
        return Err(Error::EmptyRegion("predicted"));
    }
    if bt.is_empty() {
        return Err(Error::EmptyRegion("reference"));
    }
    let (_, w, d) = p.shape;
    let dist_to_t = edt3(&bt, p.shape);
    let dist_to_p = edt3(&bp, p.shape);
    let mut worst: f64 = 0.0;
    for v in &bp {
        worst = worst.max(dist_to_t[(v[0] * w + v[1]) * d + v[2]]);
    }
    for v in &bt {
        worst = worst.max(dist_to_p[(v[0] * w + v[1]) * d + v[2]]);
    }
    Ok(worst.sqrt())
}

/// Evaluation region sets: nested lesion regions for the 4-class
/// convention, single foreground for binary masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionScheme {
    Nested,
    Binary,
}

/// Nested region names under the 4-class convention.
pub const NESTED_REGIONS: [(&str, u8); 3] = [("whole", 1), ("core", 2), ("enhancing", 3)];

/// Extract evaluation regions from a label mask.
///
/// Nested scheme (K=4): whole = labels {1,2,3}, core = {2,3},
/// enhancing = {3}. Binary scheme: foreground = labels >= 1.
pub fn extract_regions(mask: &SegMask, scheme: RegionScheme) -> Vec<(String, RegionMask)> {
    let thresholds: Vec<(&str, u8)> = match scheme {
        RegionScheme::Nested => NESTED_REGIONS.to_vec(),
        RegionScheme::Binary => vec![("foreground", 1)],
    };
    thresholds
        .into_iter()
        .map(|(name, k)| {
            let mut r = RegionMask::new(mask.shape);
            for (o, &l) in r.data.iter_mut().zip(&mask.data) {
                *o = l >= k;
            }
            (name.to_string(), r)
        })
        .collect()
}

/// Per-region metric row. Dice and accuracy are fractions in [0, 1];
/// `hausdorff` is `None` when either boundary is empty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    pub dice: f64,
    pub accuracy: f64,
    pub hausdorff: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: RegionScheme,
    pub regions: Vec<RegionMetrics>,
}

impl MetricsReport {
    pub fn mean_dice(&self) -> f64 {
        self.regions.iter().map(|r| r.dice).sum::<f64>() / self.regions.len() as f64
    }

    /// Plain-text rendering with percentages.
    pub fn render(&self) -> String {
        let mut out = String::from("region      dice%    acc%     hausdorff\n");
        for r in &self.regions {
            let hd = match r.hausdorff {
                Some(h) => format!("{h:.4}"),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(
                "{:<11} {:<8.2} {:<8.2} {}\n",
                r.region,
                r.dice * 100.0,
                r.accuracy * 100.0,
                hd
            ));
        }
        out
    }
}

/// Evaluate a predicted mask against ground truth over a region scheme.
pub fn evaluate(pred: &SegMask, truth: &SegMask, scheme: RegionScheme) -> Result<MetricsReport> {
    if pred.shape != truth.shape {
        return Err(Error::ShapeError(format!(
            "prediction shape {:?} != truth shape {:?}",
            pred.shape, truth.shape
        )));
    }
    let pred_regions = extract_regions(pred, scheme);
    let truth_regions = extract_regions(truth, scheme);
    let mut regions = Vec::new();
    for ((name, p), (_, t)) in pred_regions.into_iter().zip(truth_regions) {
        let d = dice(&p, &t)?;
        let a = accuracy(&p, &t)?;
        let hd = hausdorff(&p, &t).ok();
        regions.push(RegionMetrics {
            region: name,
            dice: d,
            accuracy: a,
            hausdorff: hd,
        });
    }
    Ok(MetricsReport { scheme, regions })
}
