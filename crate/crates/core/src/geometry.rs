//! Homographies in the canonical `h33 = 1` gauge and their action on
//! 2D points via homogeneous normalization.

use nalgebra::Matrix3;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A 2D point; the homogeneous coordinate is fixed to 1 on input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Point {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// 3x3 projective transform with 8 degrees of freedom.
///
/// The matrix is re-gauged to `h33 = 1` on construction, so two matrices
/// differing only by a nonzero scalar are the same transform and compare
/// equal entry-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

const W_EPS: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Homography {
        Homography {
            m: Matrix3::identity(),
        }
    }

    /// Builds from row-major entries, canonicalizing the gauge.
    /// Errors if the matrix is singular or `h33` vanishes after scaling.
    pub fn from_rows(rows: [f64; 9]) -> Result<Homography> {
        let m = Matrix3::from_row_slice(&rows);
        let det = m.determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::SingularMatrix(format!("|det| = {:.3e}", det.abs())));
        }
        let h33 = m[(2, 2)];
        if h33.abs() <= W_EPS {
            return Err(Error::SingularMatrix("gauge entry h33 ~ 0".into()));
        }
        Ok(Homography { m: m / h33 })
    }

    /// The similarity `p -> s R(theta) (p - c)` as a homography with a
    /// zero perspective row. `s` must be positive.
    pub fn from_similarity(s: f64, theta: f64, cx: f64, cy: f64) -> Homography {
        assert!(s > 0.0, "similarity scale must be positive");
        let (sin, cos) = theta.sin_cos();
        let m = Matrix3::new(
            s * cos,
            -s * sin,
            -s * (cos * cx - sin * cy),
            s * sin,
            s * cos,
            -s * (sin * cx + cos * cy),
            0.0,
            0.0,
            1.0,
        );
        Homography { m }
    }

    /// Pure translation.
    pub fn translation(tx: f64, ty: f64) -> Homography {
        Homography {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Row-major entries.
    pub fn to_rows(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.m[(row, col)]
    }

    pub fn h31(&self) -> f64 {
        self.m[(2, 0)]
    }

    pub fn h32(&self) -> f64 {
        self.m[(2, 1)]
    }

    pub fn as_matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Applies the transform with homogeneous normalization. Errors when
    /// the point projects to infinity (`|w'| <= 1e-12`).
    pub fn apply(&self, p: Point) -> Result<Point> {
        apply_matrix(&self.m, p)
    }

    /// `compose(a, b)` applies `b` first: `compose(a, b).apply(p) =
    /// a.apply(b.apply(p))`. The product is re-gauged to `h33 = 1`.
    pub fn compose(&self, rhs: &Homography) -> Result<Homography> {
        let prod = self.m * rhs.m;
        let det = prod.determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::SingularMatrix(format!(
                "singular product, |det| = {:.3e}",
                det.abs()
            )));
        }
        let h33 = prod[(2, 2)];
        if h33.abs() <= W_EPS {
            return Err(Error::SingularMatrix("product gauge entry h33 ~ 0".into()));
        }
        Ok(Homography { m: prod / h33 })
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::SingularMatrix("non-invertible homography".into()))?;
        let h33 = inv[(2, 2)];
        if h33.abs() <= W_EPS {
            return Err(Error::SingularMatrix("inverse gauge entry h33 ~ 0".into()));
        }
        Ok(Homography { m: inv / h33 })
    }

    /// Conjugation by `diag(-1, 1, 1)`: the transform matching a
    /// reflection about the vertical axis on both sides.
    pub fn mirrored_x(&self) -> Homography {
        let mut m = self.m;
        m[(0, 1)] = -m[(0, 1)];
        m[(0, 2)] = -m[(0, 2)];
        m[(1, 0)] = -m[(1, 0)];
        m[(2, 0)] = -m[(2, 0)];
        Homography { m }
    }
}

/// Eq.-style projective application for a raw matrix (no gauge assumed).
pub(crate) fn apply_matrix(m: &Matrix3<f64>, p: Point) -> Result<Point> {
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    if w.abs() <= W_EPS {
        return Err(Error::DegenerateProjection { w_abs: w.abs() });
    }
    let x = m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)];
    let y = m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)];
    Ok(Point::new(x / w, y / w))
}

impl Serialize for Homography {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = <[f64; 9]>::deserialize(deserializer)?;
        Homography::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
        loop {
            let mut rows = [0.0; 9];
            for v in rows.iter_mut().take(6) {
                *v = rng.random_range(-2.0..2.0);
            }
            rows[6] = rng.random_range(-0.01..0.01);
            rows[7] = rng.random_range(-0.01..0.01);
            rows[8] = 1.0;
            if let Ok(h) = Homography::from_rows(rows) {
                return h;
            }
        }
    }

    #[test]
    fn identity_fixes_points() {
        let h = Homography::identity();
        let p = Point::new(3.0, 4.0);
        let q = h.apply(p).unwrap();
        assert_eq!((q.x, q.y), (3.0, 4.0));
    }

    #[test]
    fn scalar_multiples_are_the_same_transform() {
        let h = Homography::from_rows([2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let q = h.apply(Point::new(3.0, 4.0)).unwrap();
        assert_abs_diff_eq!(q.x, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn perspective_row_divides_by_w() {
        let h =
            Homography::from_rows([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.001, 0.0, 1.0]).unwrap();
        let q = h.apply(Point::new(100.0, 50.0)).unwrap();
        assert_abs_diff_eq!(q.x, 100.0 / 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 50.0 / 1.1, epsilon = 1e-12);
    }

    #[test]
    fn point_at_infinity_is_an_error() {
        let h =
            Homography::from_rows([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.01, 0.0, 1.0]).unwrap();
        assert!(matches!(
            h.apply(Point::new(100.0, 0.0)),
            Err(Error::DegenerateProjection { .. })
        ));
    }

    #[test]
    fn compose_with_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_homography(&mut rng);
        let c = h.compose(&Homography::identity()).unwrap();
        for (a, b) in c.to_rows().iter().zip(h.to_rows()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = random_homography(&mut rng);
            let c = h.compose(&h.inverse().unwrap()).unwrap();
            for (a, b) in c.to_rows().iter().zip(Homography::identity().to_rows()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h1 = random_homography(&mut rng);
            let h2 = random_homography(&mut rng);
            let p = Point::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let (Ok(via_c), Ok(step)) = (h1.compose(&h2).unwrap().apply(p), h2.apply(p)) else {
                continue;
            };
            let direct = h1.apply(step).unwrap();
            assert_abs_diff_eq!(via_c.x, direct.x, epsilon = 1e-9);
            assert_abs_diff_eq!(via_c.y, direct.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn similarity_identity_case() {
        let h = Homography::from_similarity(1.0, 0.0, 0.0, 0.0);
        assert_eq!(h.to_rows(), Homography::identity().to_rows());
    }

    #[test]
    fn similarity_scales_about_center() {
        let h = Homography::from_similarity(2.0, 0.0, 1.0, 1.0);
        let q = h.apply(Point::new(2.0, 1.0)).unwrap();
        assert_abs_diff_eq!(q.x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn similarity_matches_trig_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let s = rng.random_range(0.2..3.0);
            let theta: f64 = rng.random_range(-3.0..3.0);
            let (cx, cy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let p = Point::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
            let q = Homography::from_similarity(s, theta, cx, cy).apply(p).unwrap();
            let ex = s * ((p.x - cx) * theta.cos() - (p.y - cy) * theta.sin());
            let ey = s * ((p.x - cx) * theta.sin() + (p.y - cy) * theta.cos());
            assert_abs_diff_eq!(q.x, ex, epsilon = 1e-12);
            assert_abs_diff_eq!(q.y, ey, epsilon = 1e-12);
        }
    }

    #[test]
    fn serializes_as_row_major_nine_array() {
        let h = Homography::from_rows([2.0, 0.0, 0.5, 0.0, 2.0, -1.0, 0.001, 0.0, 1.0]).unwrap();
        let json = serde_json::to_string(&h).unwrap();
        assert_eq!(json, "[2.0,0.0,0.5,0.0,2.0,-1.0,0.001,0.0,1.0]");
        let back: Homography = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
    }

    proptest! {
        #[test]
        fn prop_gauge_invariance(
            seed in 0u64..500,
            lambda in prop_oneof![(-4.0..-0.1f64), (0.1..4.0f64)],
            px in -20.0..20.0f64,
            py in -20.0..20.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_homography(&mut rng);
            let scaled = Homography::from_rows(h.to_rows().map(|v| v * lambda)).unwrap();
            let p = Point::new(px, py);
            if let (Ok(a), Ok(b)) = (h.apply(p), scaled.apply(p)) {
                prop_assert!((a.x - b.x).abs() < 1e-9);
                prop_assert!((a.y - b.y).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_collinearity_preserved(
            seed in 0u64..500,
            ax in -10.0..10.0f64, ay in -10.0..10.0f64,
            dx in -1.0..1.0f64, dy in -1.0..1.0f64,
            t in 0.1..3.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_homography(&mut rng);
            let p0 = Point::new(ax, ay);
            let p1 = Point::new(ax + dx, ay + dy);
            let p2 = Point::new(ax + t * dx, ay + t * dy);
            if let (Ok(q0), Ok(q1), Ok(q2)) = (h.apply(p0), h.apply(p1), h.apply(p2)) {
                let cross = (q1.x - q0.x) * (q2.y - q0.y) - (q1.y - q0.y) * (q2.x - q0.x);
                // Normalize by the segment scale so the test is unit-free.
                let scale = q0.distance(&q1).max(q0.distance(&q2)).max(1.0);
                prop_assert!((cross / (scale * scale)).abs() < 1e-8);
            }
        }
    }
}
