//! 3D vectors, unit directions, 3x3 matrices, and rigid-motion transforms.
//!
//! Everything here is plain `f64` value types; the rest of the crate builds
//! its geometry on top of these.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use crate::geometry::GeometryError;

/// A point or displacement in 3D space. Serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", from = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Vec3) -> Vec3 {
        Vec3 {
            x: self.y * other.z - self.z * other.y,
            y: self.z * other.x - self.x * other.z,
            z: self.x * other.y - self.y * other.x,
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.scale(s)
    }
}

/// A direction with Euclidean norm within 1e-12 of 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    /// Normalizes `v`. Fails with `CoincidentAtoms` when `|v| <= 1e-9`,
    /// matching the separation threshold used for edge directions.
    pub fn try_new(v: Vec3) -> Result<Self, GeometryError> {
        let n = v.norm();
        if n <= 1e-9 {
            return Err(GeometryError::CoincidentAtoms { dist: n });
        }
        Ok(UnitVec3(v.scale(1.0 / n)))
    }

    pub fn as_vec3(&self) -> Vec3 {
        self.0
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.0.dot(other)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn zero() -> Mat3 {
        Mat3([[0.0; 3]; 3])
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.0[i][k] * o.0[k][j];
                }
                out.0[i][j] = s;
            }
        }
        out
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] += o.0[i][j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    /// Outer product `a b^T`.
    pub fn outer(a: &Vec3, b: &Vec3) -> Mat3 {
        let a = a.as_array();
        let b = b.as_array();
        let mut out = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = a[i] * b[j];
            }
        }
        out
    }

    /// Solves `M x = rhs` by Gaussian elimination with partial pivoting,
    /// followed by one step of iterative refinement. Returns `None` when a
    /// pivot vanishes entirely.
    pub fn solve(&self, rhs: &Vec3) -> Option<Vec3> {
        let x = gauss_solve(&self.0, &rhs.as_array())?;
        // One refinement pass tightens ill-conditioned solves at negligible cost.
        let xv = Vec3::from(x);
        let r = *rhs - self.mul_vec(&xv);
        let dx = gauss_solve(&self.0, &r.as_array())?;
        Some(xv + Vec3::from(dx))
    }

    /// Numerical rank from elimination pivots: pivots with magnitude below
    /// `tol` are treated as zero.
    pub fn rank(&self, tol: f64) -> usize {
        let mut a = self.0;
        let mut rank = 0;
        let mut row = 0;
        for col in 0..3 {
            // find pivot in this column at or below `row`
            let mut piv = row;
            for r in row + 1..3 {
                if a[r][col].abs() > a[piv][col].abs() {
                    piv = r;
                }
            }
            if piv >= 3 || a[piv][col].abs() <= tol {
                continue;
            }
            a.swap(row, piv);
            for r in row + 1..3 {
                let f = a[r][col] / a[row][col];
                for c in col..3 {
                    a[r][c] -= f * a[row][c];
                }
            }
            rank += 1;
            row += 1;
            if row == 3 {
                break;
            }
        }
        rank
    }
}

fn gauss_solve(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let mut a = *m;
    let mut b = *rhs;
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col] == 0.0 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = b[i];
        for j in i + 1..3 {
            s -= a[i][j] * x[j];
        }
        x[i] = s / a[i][i];
    }
    Some(x)
}

/// A rigid motion of 3D space: an orthogonal matrix (rotation or reflection)
/// plus a translation.
#[derive(Debug, Clone, Copy)]
pub struct E3Transform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl E3Transform {
    /// Validates orthogonality (`R R^T = I` within 1e-12) and `det = ±1`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let gram = rotation.mul_mat(&rotation.transpose());
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram.0[i][j] - target).abs());
            }
        }
        let det_dev = (rotation.det().abs() - 1.0).abs();
        if max_dev > 1e-12 || det_dev > 1e-12 {
            return Err(GeometryError::NotOrthogonal { deviation: max_dev.max(det_dev) });
        }
        Ok(E3Transform { rotation, translation })
    }

    pub fn identity() -> Self {
        E3Transform { rotation: Mat3::IDENTITY, translation: Vec3::ZERO }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Applies only the orthogonal part (how free vectors transform).
    pub fn apply_linear(&self, v: &Vec3) -> Vec3 {
        self.rotation.mul_vec(v)
    }

    /// A random rotation (det +1), optionally composed with a reflection
    /// through the xy-plane (det -1), plus a random translation.
    pub fn sample<R: rand::Rng>(rng: &mut R, reflect: bool, translation_scale: f64) -> Self {
        // Rotation from a normalized quaternion.
        let q: [f64; 4] = {
            let mut q = [0.0; 4];
            let mut n = 0.0;
            while n < 1e-6 {
                for v in q.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for v in q.iter_mut() {
                *v /= n;
            }
            q
        };
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let mut rot = Mat3([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]);
        if reflect {
            for j in 0..3 {
                rot.0[2][j] = -rot.0[2][j];
            }
        }
        // Re-orthonormalize with Gram-Schmidt so the 1e-12 invariant holds
        // regardless of quaternion rounding.
        let mut rows = [
            Vec3::new(rot.0[0][0], rot.0[0][1], rot.0[0][2]),
            Vec3::new(rot.0[1][0], rot.0[1][1], rot.0[1][2]),
            Vec3::ZERO,
        ];
        rows[0] = rows[0].scale(1.0 / rows[0].norm());
        rows[1] = rows[1] - rows[0].scale(rows[0].dot(&rows[1]));
        rows[1] = rows[1].scale(1.0 / rows[1].norm());
        let r2 = rows[0].cross(&rows[1]);
        rows[2] = if reflect { -r2 } else { r2 };
        let rot = Mat3([rows[0].as_array(), rows[1].as_array(), rows[2].as_array()]);
        let t = Vec3::new(
            rng.random_range(-translation_scale..translation_scale),
            rng.random_range(-translation_scale..translation_scale),
            rng.random_range(-translation_scale..translation_scale),
        );
        E3Transform { rotation: rot, translation: t }
    }
}

/// Applies a rigid motion to a list of positions.
pub fn apply_e3(t: &E3Transform, positions: &[Vec3]) -> Vec<Vec3> {
    positions.iter().map(|p| t.apply(p)).collect()
}
