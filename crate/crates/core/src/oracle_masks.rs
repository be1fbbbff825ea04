//! Classical oracle masks computed from reference spectrograms.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::signal::C64;
use crate::tf::TfGrid;

/// Mixture bins with a modulus below this are treated as zero.
pub const ZERO_MIXTURE_EPS: f64 = 1e-12;

/// Default truncation ceiling for ratio masks.
pub const DEFAULT_R_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Ideal binary mask, `|s| > |n|`.
    Ibm,
    /// Ideal ratio mask, `|s| / (|s| + |n|)`.
    Irm,
    /// Wiener-filter-like mask, `|s|^2 / (|s|^2 + |n|^2)`.
    Wf,
    /// Ideal amplitude mask `|s| / |x|`, truncated to `[0, r_max]`.
    Iam,
    /// Phase-sensitive filter `cos(theta) |s| / |x|`, truncated to `[-r_max, r_max]`.
    Psf,
    /// Phase-sensitive filter truncated to `[0, 1]`.
    Tpsf,
    /// Ideal complex mask `s / x` with modulus truncated to `r_max`.
    Icm,
}

impl MaskKind {
    pub const ALL: [MaskKind; 7] = [
        MaskKind::Ibm,
        MaskKind::Irm,
        MaskKind::Wf,
        MaskKind::Iam,
        MaskKind::Psf,
        MaskKind::Tpsf,
        MaskKind::Icm,
    ];

    /// Whether the mask's value depends on the truncation ceiling.
    pub fn uses_r_max(self) -> bool {
        matches!(self, MaskKind::Iam | MaskKind::Psf | MaskKind::Icm)
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskKind::Ibm => "IBM",
            MaskKind::Irm => "IRM",
            MaskKind::Wf => "WF",
            MaskKind::Iam => "IAM",
            MaskKind::Psf => "PSF",
            MaskKind::Tpsf => "TPSF",
            MaskKind::Icm => "ICM",
        };
        f.write_str(s)
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        MaskKind::ALL
            .into_iter()
            .find(|k| k.to_string() == upper)
            .ok_or_else(|| Error::Unsupported(format!("mask kind `{s}`")))
    }
}

/// Real-valued mask with the ceiling it was truncated to.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMask {
    pub values: TfGrid<f64>,
    pub r_max: f64,
}

/// Complex multiplicative mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMask {
    pub values: TfGrid<C64>,
}

impl ComplexMask {
    pub fn from_real(mask: &TfGrid<f64>) -> Self {
        Self {
            values: mask.map(|&m| C64::new(m, 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskValues {
    Real(RealMask),
    Complex(ComplexMask),
}

impl MaskValues {
    pub fn to_complex(&self) -> ComplexMask {
        match self {
            MaskValues::Real(m) => ComplexMask::from_real(&m.values),
            MaskValues::Complex(c) => c.clone(),
        }
    }

    /// The real part for real masks, the modulus for complex ones.
    pub fn magnitude(&self) -> TfGrid<f64> {
        match self {
            MaskValues::Real(m) => m.values.clone(),
            MaskValues::Complex(c) => c.values.map(|v| v.norm()),
        }
    }
}

/// Mask values plus the number of zero-mixture bins that were guarded.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMask {
    pub mask: MaskValues,
    pub guarded_bins: usize,
}

/// `angle(s / x)` mapped to `(-pi, pi]`; returns 0 on zero-mixture bins.
pub fn wrapped_angle(z: C64) -> f64 {
    let a = z.im.atan2(z.re);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Map any angle into `(-pi, pi]`.
pub fn wrap_phase(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Phase difference between source and mixture at every bin, with the count
/// of bins where the mixture vanishes (reported as 0).
pub fn phase_difference(s: &TfGrid<C64>, x: &TfGrid<C64>) -> Result<(TfGrid<f64>, usize)> {
    s.check_shape(x, "phase_difference")?;
    let mut guarded = 0;
    let out = s.zip_map(x, |&sv, &xv| {
        if xv.norm() < ZERO_MIXTURE_EPS {
            guarded += 1;
            0.0
        } else {
            wrapped_angle(sv * xv.conj())
        }
    })?;
    Ok((out, guarded))
}

/// Ratio `s / x` with zero-mixture bins set to 0.
pub fn ratio(s: C64, x: C64) -> Option<C64> {
    (x.norm() >= ZERO_MIXTURE_EPS).then(|| s / x)
}

/// Compute an oracle mask of the given kind from source `s`, interference
/// `n` and mixture `x` spectrograms.
pub fn oracle_mask(
    kind: MaskKind,
    s: &TfGrid<C64>,
    n: &TfGrid<C64>,
    x: &TfGrid<C64>,
    r_max: f64,
) -> Result<OracleMask> {
    s.check_shape(x, "oracle_mask source vs mixture")?;
    n.check_shape(x, "oracle_mask interference vs mixture")?;
    if r_max.is_nan() || r_max <= 0.0 {
        return invalid(format!("r_max must be positive, got {r_max}"));
    }
    let mut guarded = 0usize;
    let mut real = Vec::with_capacity(x.len());
    let mut complex = Vec::with_capacity(x.len());
    for ((&sv, &nv), &xv) in s.iter().zip(n.iter()).zip(x.iter()) {
        let Some(r) = ratio(sv, xv) else {
            guarded += 1;
            real.push(0.0);
            complex.push(C64::new(0.0, 0.0));
            continue;
        };
        let (sa, na) = (sv.norm(), nv.norm());
        match kind {
            MaskKind::Ibm => real.push(if sa > na { 1.0 } else { 0.0 }),
            MaskKind::Irm => real.push(if sa + na > 0.0 { sa / (sa + na) } else { 0.0 }),
            MaskKind::Wf => {
                let (s2, n2) = (sa * sa, na * na);
                real.push(if s2 + n2 > 0.0 { s2 / (s2 + n2) } else { 0.0 })
            }
            MaskKind::Iam => real.push(r.norm().min(r_max)),
            // cos(angle(r)) * |r| == Re(r)
            MaskKind::Psf => real.push(r.re.clamp(-r_max, r_max)),
            MaskKind::Tpsf => real.push(r.re.clamp(0.0, 1.0)),
            MaskKind::Icm => {
                let m = r.norm();
                complex.push(if m > r_max { r * (r_max / m) } else { r })
            }
        }
    }
    let (frames, bins) = x.shape();
    let mask = if kind == MaskKind::Icm {
        MaskValues::Complex(ComplexMask {
            values: TfGrid::from_vec(frames, bins, complex)?,
        })
    } else {
        let ceiling = match kind {
            MaskKind::Ibm | MaskKind::Irm | MaskKind::Wf | MaskKind::Tpsf => 1.0,
            _ => r_max,
        };
        MaskValues::Real(RealMask {
            values: TfGrid::from_vec(frames, bins, real)?,
            r_max: ceiling,
        })
    };
    Ok(OracleMask {
        mask,
        guarded_bins: guarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: C64) -> TfGrid<C64> {
        TfGrid::filled(1, 1, v)
    }

    fn real_value(kind: MaskKind, s: C64, n: C64, r_max: f64) -> f64 {
        match oracle_mask(kind, &one(s), &one(n), &one(s + n), r_max).unwrap().mask {
            MaskValues::Real(m) => m.values[(0, 0)],
            MaskValues::Complex(_) => unreachable!(),
        }
    }

    #[test]
    fn equal_energies() {
        let s = C64::new(1.0, 0.0);
        let n = C64::new(0.0, 1.0);
        assert!((real_value(MaskKind::Irm, s, n, 2.0) - 0.5).abs() < 1e-15);
        assert!((real_value(MaskKind::Wf, s, n, 2.0) - 0.5).abs() < 1e-15);
        assert_eq!(real_value(MaskKind::Ibm, s, n, 2.0), 0.0);
    }

    #[test]
    fn phase_inversion_psf() {
        // s = -x  <=>  n = -2 s
        let s = C64::new(0.3, -0.4);
        let n = s * -2.0;
        assert!((real_value(MaskKind::Psf, s, n, 2.0) + 1.0).abs() < 1e-12);
        assert_eq!(real_value(MaskKind::Tpsf, s, n, 2.0), 0.0);
    }

    #[test]
    fn iam_is_clamped() {
        // s = 3, x = 1
        let s = C64::new(3.0, 0.0);
        let n = C64::new(-2.0, 0.0);
        assert_eq!(real_value(MaskKind::Iam, s, n, 2.0), 2.0);
        assert_eq!(real_value(MaskKind::Iam, s, n, f64::INFINITY), 3.0);
    }

    #[test]
    fn icm_clamp_preserves_phase() {
        let s = C64::new(0.0, 3.0);
        let n = C64::new(1.0, -3.0);
        let m = oracle_mask(MaskKind::Icm, &one(s), &one(n), &one(s + n), 2.0).unwrap();
        let MaskValues::Complex(c) = m.mask else { unreachable!() };
        let v = c.values[(0, 0)];
        assert!((v.norm() - 2.0).abs() < 1e-12);
        assert!((wrapped_angle(v) - wrapped_angle(s / (s + n))).abs() < 1e-12);
    }

    #[test]
    fn zero_mixture_bins_are_guarded() {
        let s = C64::new(1.0, 0.0);
        let n = C64::new(-1.0, 0.0);
        for kind in MaskKind::ALL {
            let m = oracle_mask(kind, &one(s), &one(n), &one(s + n), 2.0).unwrap();
            assert_eq!(m.guarded_bins, 1);
            assert_eq!(m.mask.magnitude()[(0, 0)], 0.0);
        }
        let (theta, guarded) = phase_difference(&one(s), &one(C64::new(0.0, 0.0))).unwrap();
        assert_eq!((theta[(0, 0)], guarded), (0.0, 1));
    }

    #[test]
    fn phase_difference_conventions() {
        let x = one(C64::new(0.7, -0.2));
        let cases = [(C64::new(1.0, 0.0), 0.0), (C64::new(0.0, 1.0), PI / 2.0), (C64::new(-1.0, 0.0), PI)];
        for (mult, expect) in cases {
            let s = x.map(|&v| v * mult);
            let (theta, _) = phase_difference(&s, &x).unwrap();
            assert!((theta[(0, 0)] - expect).abs() < 1e-12, "{mult}");
        }
        // -x with a negative-zero imaginary part still maps to +pi
        assert_eq!(wrapped_angle(C64::new(-1.0, -0.0)), PI);
    }

    #[test]
    fn shape_and_argument_errors() {
        let a = TfGrid::filled(2, 2, C64::new(1.0, 0.0));
        let b = TfGrid::filled(2, 3, C64::new(1.0, 0.0));
        assert!(oracle_mask(MaskKind::Iam, &a, &a, &b, 2.0).is_err());
        assert!(oracle_mask(MaskKind::Iam, &a, &a, &a, 0.0).is_err());
        assert!(phase_difference(&a, &b).is_err());
        assert!("XYZ".parse::<MaskKind>().is_err());
        assert_eq!("tpsf".parse::<MaskKind>().unwrap(), MaskKind::Tpsf);
    }

    fn c64() -> impl Strategy<Value = C64> {
        (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, b)| C64::new(a, b))
    }

    proptest! {
        #[test]
        fn iam_with_true_phase_reproduces_source(s in c64(), n in c64()) {
            let x = s + n;
            prop_assume!(x.norm() > 1e-6);
            let iam = real_value(MaskKind::Iam, s, n, f64::INFINITY);
            let (theta, _) = phase_difference(&one(s), &one(x)).unwrap();
            let est = x * C64::from_polar(iam, theta[(0, 0)]);
            prop_assert!((est - s).norm() < 1e-9 * (1.0 + s.norm()));
        }

        #[test]
        fn range_invariants(s in c64(), n in c64()) {
            prop_assume!((s + n).norm() > 1e-6);
            let ibm = real_value(MaskKind::Ibm, s, n, 2.0);
            prop_assert!(ibm == 0.0 || ibm == 1.0);
            for k in [MaskKind::Irm, MaskKind::Wf, MaskKind::Tpsf] {
                let v = real_value(k, s, n, 2.0);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let psf = real_value(MaskKind::Psf, s, n, f64::INFINITY);
            let tpsf = real_value(MaskKind::Tpsf, s, n, 2.0);
            prop_assert_eq!(tpsf, psf.clamp(0.0, 1.0));
            let iam = real_value(MaskKind::Iam, s, n, 2.0);
            prop_assert!((0.0..=2.0).contains(&iam));
        }

        #[test]
        fn joint_complex_scaling_invariance(s in c64(), n in c64(), g in c64()) {
            prop_assume!((s + n).norm() > 1e-3 && g.norm() > 1e-2);
            for kind in MaskKind::ALL {
                let a = oracle_mask(kind, &one(s), &one(n), &one(s + n), 2.0).unwrap().mask.to_complex();
                let b = oracle_mask(kind, &one(s * g), &one(n * g), &one((s + n) * g), 2.0).unwrap().mask.to_complex();
                prop_assert!((a.values[(0, 0)] - b.values[(0, 0)]).norm() < 1e-9, "{}", kind);
            }
        }
    }
}
