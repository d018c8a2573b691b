//! Real spherical-harmonics basis up to degree 3.
//!
//! Sign and normalization follow the convention used by community Gaussian
//! checkpoints (Condon-Shortley phase folded into the odd-order terms), so
//! coefficients loaded from those files shade identically. Rendered color is
//! `0.5 + sum_lm c_lm * Y_lm(dir)`.
//!
//! | l | m  | Y_lm(x, y, z)                         |
//! |---|----|---------------------------------------|
//! | 0 | 0  | C0                                    |
//! | 1 | -1 | -C1 y                                 |
//! | 1 | 0  | C1 z                                  |
//! | 1 | 1  | -C1 x                                 |
//! | 2 | -2 | C2[0] x y                             |
//! | 2 | -1 | C2[1] y z                             |
//! | 2 | 0  | C2[2] (2z² - x² - y²)                 |
//! | 2 | 1  | C2[3] x z                             |
//! | 2 | 2  | C2[4] (x² - y²)                       |
//! | 3 | -3 | C3[0] y (3x² - y²)                    |
//! | 3 | -2 | C3[1] x y z                           |
//! | 3 | -1 | C3[2] y (4z² - x² - y²)               |
//! | 3 | 0  | C3[3] z (2z² - 3x² - 3y²)             |
//! | 3 | 1  | C3[4] x (4z² - x² - y²)               |
//! | 3 | 2  | C3[5] z (x² - y²)                     |
//! | 3 | 3  | C3[6] x (x² - 3y²)                    |

use crate::error::{Error, Result};
use crate::model::{sh_coeff_count, Vec3, MAX_SH_DEGREE};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH sum so that zero coefficients render mid-gray.
pub const SH_COLOR_OFFSET: f64 = 0.5;

pub const MAX_COEFFS: usize = 16;

/// Basis values `Y_lm(dir)` for every coefficient up to `degree`; entries past
/// `(degree + 1)²` are zero.
pub fn basis(degree: usize, dir: &Vec3) -> [f64; MAX_COEFFS] {
    basis_and_gradient(degree, dir, false).0
}

/// Basis values together with their partial derivatives with respect to the
/// direction components, treating `(x, y, z)` as free variables.
pub fn basis_and_gradient(
    degree: usize,
    dir: &Vec3,
    with_grad: bool,
) -> ([f64; MAX_COEFFS], [[f64; 3]; MAX_COEFFS]) {
    let mut y = [0.0; MAX_COEFFS];
    let mut g = [[0.0; 3]; MAX_COEFFS];
    let (x, yy, z) = (dir.x, dir.y, dir.z);
    y[0] = SH_C0;
    if degree >= 1 {
        y[1] = -SH_C1 * yy;
        y[2] = SH_C1 * z;
        y[3] = -SH_C1 * x;
        if with_grad {
            g[1] = [0.0, -SH_C1, 0.0];
            g[2] = [0.0, 0.0, SH_C1];
            g[3] = [-SH_C1, 0.0, 0.0];
        }
    }
    if degree >= 2 {
        let (xx, y2, zz) = (x * x, yy * yy, z * z);
        y[4] = SH_C2[0] * x * yy;
        y[5] = SH_C2[1] * yy * z;
        y[6] = SH_C2[2] * (2.0 * zz - xx - y2);
        y[7] = SH_C2[3] * x * z;
        y[8] = SH_C2[4] * (xx - y2);
        if with_grad {
            g[4] = scale3(SH_C2[0], [yy, x, 0.0]);
            g[5] = scale3(SH_C2[1], [0.0, z, yy]);
            g[6] = scale3(SH_C2[2], [-2.0 * x, -2.0 * yy, 4.0 * z]);
            g[7] = scale3(SH_C2[3], [z, 0.0, x]);
            g[8] = scale3(SH_C2[4], [2.0 * x, -2.0 * yy, 0.0]);
        }
    }
    if degree >= 3 {
        let (xx, y2, zz) = (x * x, yy * yy, z * z);
        y[9] = SH_C3[0] * yy * (3.0 * xx - y2);
        y[10] = SH_C3[1] * x * yy * z;
        y[11] = SH_C3[2] * yy * (4.0 * zz - xx - y2);
        y[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * y2);
        y[13] = SH_C3[4] * x * (4.0 * zz - xx - y2);
        y[14] = SH_C3[5] * z * (xx - y2);
        y[15] = SH_C3[6] * x * (xx - 3.0 * y2);
        if with_grad {
            g[9] = scale3(SH_C3[0], [6.0 * x * yy, 3.0 * xx - 3.0 * y2, 0.0]);
            g[10] = scale3(SH_C3[1], [yy * z, x * z, x * yy]);
            g[11] = scale3(
                SH_C3[2],
                [-2.0 * x * yy, 4.0 * zz - xx - 3.0 * y2, 8.0 * yy * z],
            );
            g[12] = scale3(
                SH_C3[3],
                [-6.0 * x * z, -6.0 * yy * z, 6.0 * zz - 3.0 * xx - 3.0 * y2],
            );
            g[13] = scale3(
                SH_C3[4],
                [4.0 * zz - 3.0 * xx - y2, -2.0 * x * yy, 8.0 * x * z],
            );
            g[14] = scale3(SH_C3[5], [2.0 * x * z, -2.0 * yy * z, xx - y2]);
            g[15] = scale3(SH_C3[6], [3.0 * xx - 3.0 * y2, -6.0 * x * yy, 0.0]);
        }
    }
    (y, g)
}

fn scale3(s: f64, v: [f64; 3]) -> [f64; 3] {
    [s * v[0], s * v[1], s * v[2]]
}

/// Raw (unclamped) SH color `0.5 + sum c_lm Y_lm(dir)` using the first
/// `(degree + 1)²` coefficients.
pub fn eval_sh(degree: usize, coeffs: &[[f64; 3]], dir: &Vec3) -> Result<[f64; 3]> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::UnsupportedShDegree(degree));
    }
    let stored = stored_degree(coeffs.len())?;
    if degree > stored {
        return Err(Error::ShDegree {
            requested: degree,
            stored,
        });
    }
    let norm = dir.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "SH direction must be unit length, got norm {norm}"
        )));
    }
    Ok(eval_unchecked(degree, coeffs, dir))
}

pub(crate) fn eval_unchecked(degree: usize, coeffs: &[[f64; 3]], dir: &Vec3) -> [f64; 3] {
    let y = basis(degree, dir);
    let mut rgb = [SH_COLOR_OFFSET; 3];
    for (k, c) in coeffs.iter().take(sh_coeff_count(degree)).enumerate() {
        for ch in 0..3 {
            rgb[ch] += c[ch] * y[k];
        }
    }
    rgb
}

/// Degree implied by a coefficient count, if it is one of `1, 4, 9, 16`.
pub fn stored_degree(count: usize) -> Result<usize> {
    (0..=MAX_SH_DEGREE)
        .find(|&d| sh_coeff_count(d) == count)
        .ok_or_else(|| Error::format(format!("{count} SH coefficients do not match any degree <= 3")))
}

/// DC coefficient producing `rgb` for a degree-0 kernel.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - SH_COLOR_OFFSET) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    /// Associated Legendre P_l^m(x) with the Condon-Shortley phase, via the
    /// standard upward recurrence.
    fn legendre(l: i32, m: i32, x: f64) -> f64 {
        let mut pmm = 1.0;
        if m > 0 {
            let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
            let mut fact = 1.0;
            for _ in 0..m {
                pmm *= -fact * somx2;
                fact += 2.0;
            }
        }
        if l == m {
            return pmm;
        }
        let mut pmmp1 = x * f64::from(2 * m + 1) * pmm;
        if l == m + 1 {
            return pmmp1;
        }
        let mut pll = 0.0;
        for ll in (m + 2)..=l {
            pll = (x * f64::from(2 * ll - 1) * pmmp1 - f64::from(ll + m - 1) * pmm)
                / f64::from(ll - m);
            pmm = pmmp1;
            pmmp1 = pll;
        }
        pll
    }

    /// Real SH from spherical coordinates, independent of the polynomial table.
    fn real_sh(l: i32, m: i32, dir: &Vec3) -> f64 {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let am = m.unsigned_abs();
        let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)
            * factorial((l as u32) - am)
            / factorial(l as u32 + am))
        .sqrt();
        let p = legendre(l, am as i32, theta.cos());
        if m == 0 {
            k * p
        } else if m > 0 {
            std::f64::consts::SQRT_2 * k * (f64::from(m) * phi).cos() * p
        } else {
            std::f64::consts::SQRT_2 * k * (f64::from(am) * phi).sin() * p
        }
    }

    #[test]
    fn degree_zero_constant() {
        let c = [[0.7, -0.2, 1.3]];
        let rgb = eval_sh(0, &c, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        for ch in 0..3 {
            assert!((rgb[ch] - (0.5 + 0.282_094_791_773_878_14 * c[0][ch])).abs() < 1e-15);
        }
        let other = eval_sh(0, &c, &Vec3::new(0.6, 0.0, -0.8)).unwrap();
        assert_eq!(rgb, other);
    }

    #[test]
    fn matches_legendre_tabulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let dir = random_dir(&mut rng);
            let y = basis(3, &dir);
            let mut k = 0;
            for l in 0..=3 {
                for m in -l..=l {
                    let expected = real_sh(l, m, &dir);
                    assert!(
                        (y[k] - expected).abs() < 1e-12,
                        "l={l} m={m}: {} vs {expected}",
                        y[k]
                    );
                    k += 1;
                }
            }
            let coeffs: Vec<[f64; 3]> = (0..16)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let rgb = eval_sh(3, &coeffs, &dir).unwrap();
            let mut k = 0;
            let mut expected = [0.5; 3];
            for l in 0..=3 {
                for m in -l..=l {
                    for ch in 0..3 {
                        expected[ch] += coeffs[k][ch] * real_sh(l, m, &dir);
                    }
                    k += 1;
                }
            }
            for ch in 0..3 {
                assert!((rgb[ch] - expected[ch]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let dir = random_dir(&mut rng);
            let (_, g) = basis_and_gradient(3, &dir, true);
            for axis in 0..3 {
                let mut p = dir;
                let mut m = dir;
                p[axis] += h;
                m[axis] -= h;
                let (yp, ym) = (basis(3, &p), basis(3, &m));
                for k in 0..16 {
                    let fd = (yp[k] - ym[k]) / (2.0 * h);
                    assert!((fd - g[k][axis]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn degree_errors() {
        let c = [[0.0; 3]; 4];
        let dir = Vec3::new(1.0, 0.0, 0.0);
        assert!(matches!(eval_sh(2, &c, &dir), Err(Error::ShDegree { .. })));
        assert!(eval_sh(1, &c[..3], &dir).is_err());
        assert!(eval_sh(4, &c, &dir).is_err());
        assert!(eval_sh(1, &c, &Vec3::new(2.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir = random_dir(&mut rng);
        let c1: Vec<[f64; 3]> = (0..16).map(|_| [rng.random::<f64>(); 3]).collect();
        let c2: Vec<[f64; 3]> = (0..16).map(|_| [rng.random::<f64>(), 0.3, -0.1]).collect();
        let (a, b) = (0.7, -1.9);
        let mix: Vec<[f64; 3]> = c1
            .iter()
            .zip(&c2)
            .map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1], a * x[2] + b * y[2]])
            .collect();
        let (r1, r2, rm) = (
            eval_sh(3, &c1, &dir).unwrap(),
            eval_sh(3, &c2, &dir).unwrap(),
            eval_sh(3, &mix, &dir).unwrap(),
        );
        for ch in 0..3 {
            let expected = a * r1[ch] + b * r2[ch] - (a + b - 1.0) * 0.5;
            assert!((rm[ch] - expected).abs() < 1e-12);
        }
    }
}
