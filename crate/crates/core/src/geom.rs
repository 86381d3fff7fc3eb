//! Small 2D geometry helpers shared by the synthesizer, the metrics and the
//! warp kernels: points, similarity transforms and least-squares fits.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// A 2D point in pixel coordinates. Coordinates may lie outside the frame
/// rectangle (features near borders drift out) but must be finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A set of N points stored as an (N, 2) array; row i is (x_i, y_i).
pub type PointSet = Array2<f64>;

pub fn point_set_from_pairs(pairs: &[[f64; 2]]) -> PointSet {
    let mut a = Array2::zeros((pairs.len(), 2));
    for (i, p) in pairs.iter().enumerate() {
        a[[i, 0]] = p[0];
        a[[i, 1]] = p[1];
    }
    a
}

pub fn point_set_to_pairs(set: &PointSet) -> Vec<[f64; 2]> {
    set.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

pub fn validate_finite(set: &PointSet, what: &str) -> Result<()> {
    if set.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what} contains non-finite coordinates")));
    }
    Ok(())
}

/// A direct 2D similarity transform x -> a*x + b in complex form
/// (a encodes rotation and uniform scale, b the translation).
#[derive(Clone, Copy, Debug)]
pub struct Similarity2 {
    pub a: Complex64,
    pub b: Complex64,
}

impl Similarity2 {
    pub fn identity() -> Self {
        Self { a: Complex64::new(1.0, 0.0), b: Complex64::new(0.0, 0.0) }
    }

    /// Rotation by `theta` radians about `center`, followed by `translation`.
    pub fn rotation_about(theta: f64, center: Point2, translation: Point2) -> Self {
        let a = Complex64::from_polar(1.0, theta);
        let c = Complex64::new(center.x, center.y);
        let t = Complex64::new(translation.x, translation.y);
        Self { a, b: c - a * c + t }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let z = self.a * Complex64::new(p.x, p.y) + self.b;
        Point2::new(z.re, z.im)
    }

    pub fn apply_set(&self, set: &PointSet) -> PointSet {
        let mut out = set.clone();
        for mut row in out.rows_mut() {
            let z = self.a * Complex64::new(row[0], row[1]) + self.b;
            row[0] = z.re;
            row[1] = z.im;
        }
        out
    }

    pub fn compose(&self, inner: &Similarity2) -> Similarity2 {
        // self ∘ inner
        Similarity2 { a: self.a * inner.a, b: self.a * inner.b + self.b }
    }

    pub fn inverse(&self) -> Similarity2 {
        let inv_a = Complex64::new(1.0, 0.0) / self.a;
        Similarity2 { a: inv_a, b: -inv_a * self.b }
    }

    pub fn rotation_deg(&self) -> f64 {
        self.a.arg().to_degrees()
    }

    /// Displacement of `center` under this transform.
    pub fn translation_at(&self, center: Point2) -> Point2 {
        let moved = self.apply(center);
        Point2::new(moved.x - center.x, moved.y - center.y)
    }
}

/// Least-squares similarity fit mapping `src` onto `dst`.
pub fn fit_similarity(src: &PointSet, dst: &PointSet) -> Result<Similarity2> {
    let n = src.nrows();
    if n != dst.nrows() {
        return Err(Error::Fit(format!("correspondence counts differ: {} vs {}", n, dst.nrows())));
    }
    if n < 3 {
        return Err(Error::Fit(format!("need at least 3 correspondences, got {n}")));
    }
    let mut ps = Complex64::new(0.0, 0.0);
    let mut qs = Complex64::new(0.0, 0.0);
    for i in 0..n {
        ps += Complex64::new(src[[i, 0]], src[[i, 1]]);
        qs += Complex64::new(dst[[i, 0]], dst[[i, 1]]);
    }
    let pm = ps / n as f64;
    let qm = qs / n as f64;
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for i in 0..n {
        let p = Complex64::new(src[[i, 0]], src[[i, 1]]) - pm;
        let q = Complex64::new(dst[[i, 0]], dst[[i, 1]]) - qm;
        num += p.conj() * q;
        den += p.norm_sqr();
    }
    if den < 1e-12 {
        return Err(Error::Fit("degenerate source configuration (coincident points)".into()));
    }
    let a = num / den;
    Ok(Similarity2 { a, b: qm - a * pm })
}

/// A full 2D affine transform x -> M x + d.
#[derive(Clone, Copy, Debug)]
pub struct Affine2 {
    pub m: [[f64; 2]; 2],
    pub d: [f64; 2],
}

impl Affine2 {
    /// sqrt(|det M|): the isotropic scale component.
    pub fn scale(&self) -> f64 {
        (self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]).abs().sqrt()
    }

    /// Ratio of the smaller to the larger singular value of M, in (0, 1].
    pub fn singular_ratio(&self) -> f64 {
        let [[a, b], [c, d]] = self.m;
        let t = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let r = (t * t - 4.0 * det * det).max(0.0).sqrt();
        let smax2 = (t + r) / 2.0;
        let smin2 = (t - r) / 2.0;
        if smax2 <= 0.0 {
            return 0.0;
        }
        (smin2.max(0.0) / smax2).sqrt()
    }
}

/// Least-squares affine fit mapping `src` onto `dst` via 3x3 normal equations.
pub fn fit_affine(src: &PointSet, dst: &PointSet) -> Result<Affine2> {
    let n = src.nrows();
    if n != dst.nrows() {
        return Err(Error::Fit(format!("correspondence counts differ: {} vs {}", n, dst.nrows())));
    }
    if n < 3 {
        return Err(Error::Fit(format!("need at least 3 correspondences, got {n}")));
    }
    // Normal matrix over rows [x y 1].
    let mut g = [[0.0f64; 3]; 3];
    let mut rx = [0.0f64; 3];
    let mut ry = [0.0f64; 3];
    for i in 0..n {
        let row = [src[[i, 0]], src[[i, 1]], 1.0];
        for j in 0..3 {
            for k in 0..3 {
                g[j][k] += row[j] * row[k];
            }
            rx[j] += row[j] * dst[[i, 0]];
            ry[j] += row[j] * dst[[i, 1]];
        }
    }
    let sx = solve3(g, rx).ok_or_else(|| Error::Fit("singular normal matrix in affine fit".into()))?;
    let sy = solve3(g, ry).ok_or_else(|| Error::Fit("singular normal matrix in affine fit".into()))?;
    Ok(Affine2 { m: [[sx[0], sx[1]], [sy[0], sy[1]]], d: [sx[2], sy[2]] })
}

/// Gaussian elimination with partial pivoting for a 3x3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}
