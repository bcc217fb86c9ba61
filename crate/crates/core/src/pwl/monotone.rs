use serde::{Deserialize, Serialize};

use crate::error::{DlrError, Result};
use crate::TOL;

/// Non-decreasing piecewise-linear curve through `(0, 0)` on the domain `[0, x_end]`.
///
/// Holds the loss and recovery-time curves of a packet, keyed by the truncation level `x*`.
/// Beyond the last vertex the curve is extended as a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct MonotoneCurve {
    vertices: Vec<(f64, f64)>,
}

impl TryFrom<Vec<(f64, f64)>> for MonotoneCurve {
    type Error = DlrError;

    fn try_from(vertices: Vec<(f64, f64)>) -> Result<Self> {
        MonotoneCurve::new(vertices)
    }
}

impl From<MonotoneCurve> for Vec<(f64, f64)> {
    fn from(c: MonotoneCurve) -> Self {
        c.vertices
    }
}

impl Default for MonotoneCurve {
    fn default() -> Self {
        MonotoneCurve::zero()
    }
}

impl MonotoneCurve {
    pub fn zero() -> Self {
        MonotoneCurve {
            vertices: vec![(0.0, 0.0)],
        }
    }

    /// Validates a vertex list and removes collinear interior vertices. The first and last
    /// vertices are always kept so the domain survives canonicalization.
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self> {
        let Some(&(x0, v0)) = vertices.first() else {
            return Err(DlrError::InvalidCurve("no vertices".into()));
        };
        if x0.abs() > TOL || v0.abs() > TOL {
            return Err(DlrError::InvalidCurve(format!(
                "curve must start at (0, 0), starts at ({x0}, {v0})"
            )));
        }
        let mut pts: Vec<(f64, f64)> = vec![(0.0, 0.0)];
        for (i, &(x, v)) in vertices.iter().enumerate().skip(1) {
            if !x.is_finite() || !v.is_finite() {
                return Err(DlrError::InvalidCurve(format!("vertex {i} is not finite")));
            }
            let (lx, lv) = *pts.last().unwrap();
            if x < lx - TOL {
                return Err(DlrError::InvalidCurve(format!(
                    "vertex {i}: x = {x} is not increasing"
                )));
            }
            if v < lv - TOL {
                return Err(DlrError::InvalidCurve(format!(
                    "vertex {i}: value decreases from {lv} to {v}"
                )));
            }
            if x - lx <= TOL {
                if (v - lv).abs() > TOL {
                    return Err(DlrError::InvalidCurve(format!(
                        "vertex {i}: vertical jump at x = {x}"
                    )));
                }
                continue;
            }
            pts.push((x, v.max(lv)));
        }
        Ok(MonotoneCurve {
            vertices: remove_collinear(pts),
        })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn domain_end(&self) -> f64 {
        self.vertices.last().unwrap().0
    }

    pub fn segment_count(&self) -> usize {
        self.vertices.len() - 1
    }

    /// Value at `x`; constant beyond the end of the domain.
    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < 0.0 {
            return Err(DlrError::InvalidCurve(format!(
                "cannot evaluate at negative x = {x}"
            )));
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        let v = &self.vertices;
        let last = v[v.len() - 1];
        if x >= last.0 {
            return last.1;
        }
        let k = v.partition_point(|&(vx, _)| vx <= x);
        let (x0, y0) = v[k - 1];
        let (x1, y1) = v[k];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Slopes are non-increasing (within tolerance).
    pub fn is_concave(&self) -> bool {
        let slopes = self.slopes();
        slopes.windows(2).all(|w| w[1] <= w[0] + TOL)
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.vertices
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect()
    }

    /// Pointwise sum on the merged breakpoint grid.
    pub fn add(&self, other: &MonotoneCurve) -> MonotoneCurve {
        let grid = merged_grid(&self.vertices, &other.vertices);
        let pts = grid
            .into_iter()
            .map(|x| (x, self.eval_unchecked(x) + other.eval_unchecked(x)))
            .collect();
        MonotoneCurve {
            vertices: remove_collinear(pts),
        }
    }

    /// Pointwise maximum. Crossings inside a grid interval become new vertices.
    pub fn max(&self, other: &MonotoneCurve) -> MonotoneCurve {
        let grid = merged_grid(&self.vertices, &other.vertices);
        let mut pts = Vec::with_capacity(2 * grid.len());
        let mut prev: Option<(f64, f64)> = None; // (x, self - other)
        for x in grid {
            let a = self.eval_unchecked(x);
            let b = other.eval_unchecked(x);
            let d = a - b;
            if let Some((px, pd)) = prev {
                if (pd > TOL && d < -TOL) || (pd < -TOL && d > TOL) {
                    let xc = px + (x - px) * pd / (pd - d);
                    if xc - px > TOL && x - xc > TOL {
                        pts.push((xc, self.eval_unchecked(xc).max(other.eval_unchecked(xc))));
                    }
                }
            }
            pts.push((x, a.max(b)));
            prev = Some((x, d));
        }
        MonotoneCurve {
            vertices: remove_collinear(pts),
        }
    }

    pub fn approx_eq(&self, other: &MonotoneCurve, tol: f64) -> bool {
        self.vertices.len() == other.vertices.len()
            && self
                .vertices
                .iter()
                .zip(&other.vertices)
                .all(|(a, b)| (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol)
    }
}

/// Sorted union of two breakpoint sets with near-duplicates merged.
fn merged_grid(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<f64> {
    let mut xs: Vec<f64> = a.iter().chain(b).map(|v| v.0).collect();
    xs.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(xs.len());
    for x in xs {
        match out.last() {
            Some(&l) if x - l <= TOL => {}
            _ => out.push(x),
        }
    }
    out
}

pub(crate) fn remove_collinear(pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for v in pts {
        while out.len() >= 2 {
            let a = out[out.len() - 2];
            let b = out[out.len() - 1];
            let chord = a.1 + (v.1 - a.1) * (b.0 - a.0) / (v.0 - a.0);
            if (b.1 - chord).abs() <= TOL {
                out.pop();
            } else {
                break;
            }
        }
        out.push(v);
    }
    out
}
