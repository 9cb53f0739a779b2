//! Plane projective transforms: random bounded generation for synthetic
//! training pairs, normalized-DLT least-squares estimation, and corner
//! reprojection metrics.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{VmError, VmResult};

/// Row-major 3x3 projective transform mapping image-A pixel coordinates to
/// image-B pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Homography {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.m[2][0] * x + self.m[2][1] * y + self.m[2][2];
        (
            (self.m[0][0] * x + self.m[0][1] * y + self.m[0][2]) / w,
            (self.m[1][0] * x + self.m[1][1] * y + self.m[1][2]) / w,
        )
    }

    /// self ∘ other: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    m[i][j] += self.m[i][k] * other.m[k][j];
                }
            }
        }
        Homography { m }
    }

    pub fn inverse(&self) -> VmResult<Homography> {
        let m = &self.m;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 {
            return Err(VmError::Domain("singular homography".into()));
        }
        let inv = |r1: usize, c1: usize, r2: usize, c2: usize| {
            (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det
        };
        Ok(Homography {
            m: [
                [inv(1, 1, 2, 2), inv(0, 2, 2, 1), inv(0, 1, 1, 2)],
                [inv(1, 2, 2, 0), inv(0, 0, 2, 2), inv(0, 2, 1, 0)],
                [inv(1, 0, 2, 1), inv(0, 1, 2, 0), inv(0, 0, 1, 1)],
            ],
        })
    }

    /// Determinant of the upper-left 2x2 block (area scale of the affine part).
    pub fn det_upper2(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Normalize so m[2][2] == 1 (projective scale is arbitrary).
    pub fn normalized(&self) -> Homography {
        let s = self.m[2][2];
        if s == 0.0 {
            return *self;
        }
        let mut m = self.m;
        for row in &mut m {
            for v in row {
                *v /= s;
            }
        }
        Homography { m }
    }
}

/// Bounds for random homography generation, centered on the image middle.
#[derive(Debug, Clone, Copy)]
pub struct HomographyJitter {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation_frac: f64,
    pub perspective_jitter: f64,
}

impl Default for HomographyJitter {
    fn default() -> Self {
        HomographyJitter {
            max_rotation_deg: 15.0,
            scale_range: (0.8, 1.25),
            max_translation_frac: 0.10,
            perspective_jitter: 1e-4,
        }
    }
}

impl HomographyJitter {
    /// All-zero jitter: the generated homography is exactly the identity.
    pub fn none() -> Self {
        HomographyJitter {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation_frac: 0.0,
            perspective_jitter: 0.0,
        }
    }
}

/// Draw a bounded random homography for a (width, height) image: rotation,
/// isotropic scale and perspective jitter about the image center, plus a
/// translation. Resamples internally while the affine part is close to
/// degenerate (|det| < 0.1).
pub fn random_homography(
    width: usize,
    height: usize,
    jitter: &HomographyJitter,
    rng: &mut impl Rng,
) -> Homography {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    loop {
        let theta = if jitter.max_rotation_deg > 0.0 {
            rng.gen_range(-jitter.max_rotation_deg..jitter.max_rotation_deg)
                .to_radians()
        } else {
            0.0
        };
        let s = if jitter.scale_range.0 < jitter.scale_range.1 {
            rng.gen_range(jitter.scale_range.0..jitter.scale_range.1)
        } else {
            jitter.scale_range.0
        };
        let (tx, ty) = if jitter.max_translation_frac > 0.0 {
            (
                rng.gen_range(-jitter.max_translation_frac..jitter.max_translation_frac)
                    * width as f64,
                rng.gen_range(-jitter.max_translation_frac..jitter.max_translation_frac)
                    * height as f64,
            )
        } else {
            (0.0, 0.0)
        };
        let (px, py) = if jitter.perspective_jitter > 0.0 {
            (
                rng.gen_range(-jitter.perspective_jitter..jitter.perspective_jitter),
                rng.gen_range(-jitter.perspective_jitter..jitter.perspective_jitter),
            )
        } else {
            (0.0, 0.0)
        };
        let to_center = Homography {
            m: [[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]],
        };
        let rot_scale = Homography {
            m: [
                [s * theta.cos(), -s * theta.sin(), 0.0],
                [s * theta.sin(), s * theta.cos(), 0.0],
                [0.0, 0.0, 1.0],
            ],
        };
        let persp = Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]],
        };
        let back = Homography {
            m: [[1.0, 0.0, cx + tx], [0.0, 1.0, cy + ty], [0.0, 0.0, 1.0]],
        };
        let h = back
            .compose(&rot_scale)
            .compose(&persp)
            .compose(&to_center)
            .normalized();
        if h.det_upper2().abs() >= 0.1 {
            return h;
        }
    }
}

/// Normalized-DLT least-squares homography from point correspondences
/// (xa, ya, xb, yb). No robust estimation: the caller owns outlier policy.
pub fn estimate_homography_dlt(matches: &[(f64, f64, f64, f64)]) -> VmResult<Homography> {
    if matches.len() < 4 {
        return Err(VmError::Contract(format!(
            "DLT needs at least 4 correspondences, got {}",
            matches.len()
        )));
    }
    // Hartley normalization per side: centroid to origin, mean distance √2.
    let normalize = |pts: &[(f64, f64)]| -> (Homography, Vec<(f64, f64)>) {
        let n = pts.len() as f64;
        let (mx, my) = pts
            .iter()
            .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let mean_dist = pts
            .iter()
            .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
            .sum::<f64>()
            / n;
        let s = if mean_dist > 1e-12 {
            std::f64::consts::SQRT_2 / mean_dist
        } else {
            1.0
        };
        let t = Homography {
            m: [[s, 0.0, -s * mx], [0.0, s, -s * my], [0.0, 0.0, 1.0]],
        };
        let out = pts.iter().map(|p| t.apply(p.0, p.1)).collect();
        (t, out)
    };
    let a_pts: Vec<(f64, f64)> = matches.iter().map(|m| (m.0, m.1)).collect();
    let b_pts: Vec<(f64, f64)> = matches.iter().map(|m| (m.2, m.3)).collect();
    let (ta, an) = normalize(&a_pts);
    let (tb, bn) = normalize(&b_pts);

    let mut rows = Vec::with_capacity(matches.len() * 2 * 9);
    for ((x, y), (xp, yp)) in an.iter().zip(&bn) {
        rows.extend_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, x * xp, y * xp, *xp]);
        rows.extend_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, x * yp, y * yp, *yp]);
    }
    let a = DMatrix::from_row_slice(matches.len() * 2, 9, &rows);
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| VmError::Numerical("SVD failed to produce V^T".into()))?;
    let h_vec = vt.row(vt.nrows() - 1);
    let hn = Homography {
        m: [
            [h_vec[0], h_vec[1], h_vec[2]],
            [h_vec[3], h_vec[4], h_vec[5]],
            [h_vec[6], h_vec[7], h_vec[8]],
        ],
    };
    // denormalize: H = Tb^-1 · Hn · Ta
    Ok(tb.inverse()?.compose(&hn).compose(&ta).normalized())
}

/// Mean reprojection distance of the four image corners under two
/// homographies.
pub fn corner_reprojection_error(
    h_est: &Homography,
    h_gt: &Homography,
    width: usize,
    height: usize,
) -> f64 {
    let corners = [
        (0.0, 0.0),
        (width as f64, 0.0),
        (0.0, height as f64),
        (width as f64, height as f64),
    ];
    corners
        .iter()
        .map(|&(x, y)| {
            let (ex, ey) = h_est.apply(x, y);
            let (gx, gy) = h_gt.apply(x, y);
            ((ex - gx).powi(2) + (ey - gy).powi(2)).sqrt()
        })
        .sum::<f64>()
        / 4.0
}

/// Area under the cumulative error curve up to `threshold`, i.e. the exact
/// integral of the step recall function: mean_i max(0, 1 − e_i/threshold).
pub fn auc(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors
        .iter()
        .map(|&e| (1.0 - e / threshold).max(0.0))
        .sum::<f64>()
        / errors.len() as f64
}
