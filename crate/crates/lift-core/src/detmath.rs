//! Deterministic scalar math.
//!
//! Phantom rendering and depth encodings must produce byte-identical
//! volumes across platforms, so the trigonometric functions they use are
//! evaluated here with fixed polynomial formulations instead of the
//! platform libm. Angles are expressed in turns (1 turn = 2*pi radians),
//! which keeps range reduction exact for the rational inputs the pipeline
//! generates.

/// sin(2*pi*x), accurate to a few ulp for |x| < 2^40.
pub fn sin_tau(x: f64) -> f64 {
    // Reduce to s in [-0.5, 0.5] turns, then fold into [-0.25, 0.25].
    let mut s = x - x.round();
    if s > 0.25 {
        s = 0.5 - s;
    } else if s < -0.25 {
        s = -0.5 - s;
    }
    let theta = 2.0 * std::f64::consts::PI * s;
    let t = theta * theta;

    const C3: f64 = -1.0 / 6.0;
    const C5: f64 = 1.0 / 120.0;
    const C7: f64 = -1.0 / 5040.0;
    const C9: f64 = 1.0 / 362_880.0;
    const C11: f64 = -1.0 / 39_916_800.0;
    const C13: f64 = 1.0 / 6_227_020_800.0;
    const C15: f64 = -1.0 / 1_307_674_368_000.0;
    const C17: f64 = 1.0 / 355_687_428_096_000.0;
    const C19: f64 = -1.0 / 121_645_100_408_832_000.0;
    const C21: f64 = 1.0 / 51_090_942_171_709_440_000.0;

    let mut p = C21;
    p = p * t + C19;
    p = p * t + C17;
    p = p * t + C15;
    p = p * t + C13;
    p = p * t + C11;
    p = p * t + C9;
    p = p * t + C7;
    p = p * t + C5;
    p = p * t + C3;
    theta + theta * t * p
}

/// cos(2*pi*x).
pub fn cos_tau(x: f64) -> f64 {
    sin_tau(x + 0.25)
}

/// Cubic smoothstep of t clamped to [0, 1].
pub fn smoothstep01(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Complementary error function, fractional error below 1.2e-7
/// (Chebyshev fit). Plenty for p-values quoted to a few digits.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587
                                    + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_tau_hits_exact_points() {
        assert_eq!(sin_tau(0.0), 0.0);
        assert_eq!(sin_tau(0.5), 0.0);
        assert_eq!(sin_tau(1.0), 0.0);
        assert!((sin_tau(0.25) - 1.0).abs() < 1e-15);
        assert!((sin_tau(-0.25) + 1.0).abs() < 1e-15);
        assert!((sin_tau(1.0 / 12.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sin_tau_matches_libm_on_a_grid() {
        for i in -4000..4000 {
            let x = i as f64 * 7.3e-3;
            let want = (2.0 * std::f64::consts::PI * x).sin();
            assert!(
                (sin_tau(x) - want).abs() < 1e-13,
                "x={x} got {} want {want}",
                sin_tau(x)
            );
        }
    }

    #[test]
    fn cos_tau_matches_libm_on_a_grid() {
        for i in -1000..1000 {
            let x = i as f64 * 1.37e-2;
            let want = (2.0 * std::f64::consts::PI * x).cos();
            assert!((cos_tau(x) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn smoothstep_endpoints_and_midpoint() {
        assert_eq!(smoothstep01(-1.0), 0.0);
        assert_eq!(smoothstep01(0.0), 0.0);
        assert_eq!(smoothstep01(1.0), 1.0);
        assert_eq!(smoothstep01(2.0), 1.0);
        assert!((smoothstep01(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn erfc_known_values() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285_13).abs() < 1e-7);
        assert!((erfc(2.0) - 0.004_677_734_981_063_127).abs() < 1e-8);
        assert!((erfc(-1.0) - (2.0 - 0.157_299_207_050_285_13)).abs() < 1e-7);
    }

    #[test]
    fn normal_cdf_symmetry() {
        // The rational erfc fit carries ~1e-7 fractional error; at z=0
        // the two branch errors add instead of canceling.
        for z in [-2.5, -1.0, -0.3, 0.0, 0.7, 1.9] {
            assert!((normal_cdf(z) + normal_cdf(-z) - 1.0).abs() < 2e-7);
        }
        assert!((normal_cdf(1.96) - 0.975).abs() < 1e-3);
    }
}
