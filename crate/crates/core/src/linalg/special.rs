use crate::error::{Error, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Complementary error function.
///
/// For `|x| < 2` this sums the positive-term series
/// `erf(x) = 2/√π · e^{-x²} · Σ 2ⁿ x^{2n+1} / (1·3···(2n+1))`;
/// beyond that it evaluates the Laplace continued fraction with the modified
/// Lentz method, which keeps full relative precision deep into the tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= 1e-17 * sum {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + 2/(x + …)))))
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = 0.5 * k as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    0.5 * FRAC_2_SQRT_PI * (-x * x).exp() / f
}

/// Inverse of [`erfc`] on `(0, 2)`: bisection to bracket the root, then
/// Newton steps on `ln erfc` until the update is below `1e-13`.
pub fn erfc_inv(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 2.0) {
        return Err(Error::DomainError { value: y, domain: "(0, 2)" });
    }
    if y == 1.0 {
        return Ok(0.0);
    }
    if y > 1.0 {
        return erfc_inv(2.0 - y).map(|x| -x);
    }

    // erfc is decreasing; erfc(27) underflows below the smallest normal.
    let (mut lo, mut hi) = (0.0_f64, 27.0_f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if erfc(mid) > y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    let target = y.ln();
    for _ in 0..50 {
        let e = erfc(x);
        let slope = -FRAC_2_SQRT_PI * (-x * x).exp() / e;
        let step = (e.ln() - target) / slope;
        x -= step;
        if step.abs() <= 1e-13 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetry_points() {
        assert_eq!(erfc(0.0), 1.0);
        assert_eq!(erfc_inv(1.0).unwrap(), 0.0);
    }

    #[test]
    fn known_values() {
        // Reference digits from a 50-digit evaluation.
        assert!((erfc(1.0) - 0.157_299_207_050_285_13).abs() < 1e-15);
        assert!((erfc(0.5) - 0.479_500_122_186_953_46).abs() < 1e-15);
        let e3 = erfc(3.0);
        assert!((e3 - 2.209_049_699_858_544_1e-5).abs() < 1e-15 * 1e-5 * 10.0);
        let e5 = erfc(5.0);
        assert!(((e5 - 1.537_459_794_428_034_9e-12) / e5).abs() < 1e-13);
        assert!((erfc(-1.0) - 1.842_700_792_949_714_9).abs() < 1e-15);
    }

    #[test]
    fn branches_agree_at_switch_point() {
        let below = 1.0 - erf_series(2.0);
        let above = erfc_continued_fraction(2.0);
        assert!(((below - above) / above).abs() < 1e-13);
    }

    #[test]
    fn monotone_decreasing() {
        let mut prev = erfc(-6.0);
        for i in 1..=1200 {
            let x = -6.0 + i as f64 * 0.01;
            let v = erfc(x);
            assert!(v <= prev, "erfc not decreasing at {x}");
            prev = v;
        }
    }

    #[test]
    fn inverse_round_trip_log_grid() {
        for i in 0..1000 {
            // Log-spaced over [1e-10, 1], mirrored into (1, 2 - 1e-10].
            let t = i as f64 / 999.0;
            let y = 10f64.powf(-10.0 + 10.0 * t);
            for y in [y, 2.0 - y] {
                let x = erfc_inv(y).unwrap();
                assert!((erfc(x) - y).abs() <= 1e-12, "y={y}");
            }
        }
    }

    #[test]
    fn inverse_domain() {
        for y in [0.0, 2.0, -0.5, 2.5, f64::NAN] {
            assert!(matches!(erfc_inv(y), Err(Error::DomainError { .. })));
        }
    }
}
