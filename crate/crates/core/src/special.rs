//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! All three shift the argument upward with the recurrence until it clears
//! [`ASYMPTOTIC_THRESHOLD`] and then evaluate the Stirling-type asymptotic
//! series. Log-gamma additionally switches to its Taylor series about 1 and 2
//! near those roots, where the shifted form would lose relative precision.
//!
//! The unchecked functions return NaN outside the domain; the `checked_*`
//! variants turn that into an [`Error::Domain`].

use crate::error::{Error, Result};

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_860_6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_741_8;
const ROOT_SERIES_RADIUS: f64 = 0.3;

/// zeta(k) for k = 2..=40.
const ZETA: [f64; 39] = [
    1.644_934_066_848_226_4,
    1.202_056_903_159_594_3,
    1.082_323_233_711_138_2,
    1.036_927_755_143_370_0,
    1.017_343_061_984_449_1,
    1.008_349_277_381_922_8,
    1.004_077_356_197_944_3,
    1.002_008_392_826_082_2,
    1.000_994_575_127_818_1,
    1.000_494_188_604_119_5,
    1.000_246_086_553_308_0,
    1.000_122_713_347_578_5,
    1.000_061_248_135_058_7,
    1.000_030_588_236_307_0,
    1.000_015_282_259_408_7,
    1.000_007_637_197_637_9,
    1.000_003_817_293_265_0,
    1.000_001_908_212_716_6,
    1.000_000_953_962_033_9,
    1.000_000_476_932_986_8,
    1.000_000_238_450_502_7,
    1.000_000_119_219_926_0,
    1.000_000_059_608_189_1,
    1.000_000_029_803_503_5,
    1.000_000_014_901_554_8,
    1.000_000_007_450_711_8,
    1.000_000_003_725_334_0,
    1.000_000_001_862_659_7,
    1.000_000_000_931_327_4,
    1.000_000_000_465_662_9,
    1.000_000_000_232_831_2,
    1.000_000_000_116_415_5,
    1.000_000_000_058_207_7,
    1.000_000_000_029_103_9,
    1.000_000_000_014_551_9,
    1.000_000_000_007_276_0,
    1.000_000_000_003_638_0,
    1.000_000_000_001_819_0,
    1.000_000_000_000_909_5,
];

/// ln Gamma(1 + z) for |z| <= ROOT_SERIES_RADIUS.
fn ln_gamma_1p(z: f64) -> f64 {
    let mut sum = -EULER_GAMMA * z;
    // (-z)^k
    let mut power = -z;
    for (idx, zeta) in ZETA.iter().enumerate() {
        let k = (idx + 2) as f64;
        power *= -z;
        let term = zeta * power / k;
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

fn ln_gamma_asymptotic(x: f64) -> f64 {
    // Bernoulli coefficients B_{2n} / (2n (2n - 1)).
    const C: [f64; 8] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
        -3617.0 / 122_400.0,
    ];
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for c in C.iter().rev() {
        series = series * inv2 + c;
    }
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series * inv
}

/// ln Gamma(x) for x > 0; NaN otherwise.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) || x.is_infinite() {
        return f64::NAN;
    }
    if (x - 1.0).abs() <= ROOT_SERIES_RADIUS {
        return ln_gamma_1p(x - 1.0);
    }
    if (x - 2.0).abs() <= ROOT_SERIES_RADIUS {
        let z = x - 2.0;
        return ln_gamma_1p(z) + z.ln_1p();
    }
    if x >= ASYMPTOTIC_THRESHOLD {
        return ln_gamma_asymptotic(x);
    }
    let mut z = x;
    let mut product = 1.0;
    while z < ASYMPTOTIC_THRESHOLD {
        product *= z;
        z += 1.0;
    }
    ln_gamma_asymptotic(z) - product.ln()
}

/// Digamma, the derivative of ln Gamma, for x > 0; NaN otherwise.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) || x.is_infinite() {
        return f64::NAN;
    }
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_THRESHOLD {
        shift -= 1.0 / z;
        z += 1.0;
    }
    // B_{2n} / (2n)
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 120.0,
        1.0 / 252.0,
        -1.0 / 240.0,
        1.0 / 132.0,
        -691.0 / 32_760.0,
        1.0 / 12.0,
    ];
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    for c in C.iter().rev() {
        series = series * inv2 + c;
    }
    shift + z.ln() - 0.5 / z - series * inv2
}

/// Trigamma, the second derivative of ln Gamma, for x > 0; NaN otherwise.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) || x.is_infinite() {
        return f64::NAN;
    }
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_THRESHOLD {
        shift += 1.0 / (z * z);
        z += 1.0;
    }
    // B_{2n}
    const B: [f64; 7] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
    ];
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for b in B.iter().rev() {
        series = series * inv2 + b;
    }
    shift + inv + 0.5 * inv2 + series * inv2 * inv
}

fn check_domain(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { function: name, value: x })
    }
}

pub fn checked_ln_gamma(x: f64) -> Result<f64> {
    check_domain("ln_gamma", x)?;
    Ok(ln_gamma(x))
}

pub fn checked_digamma(x: f64) -> Result<f64> {
    check_domain("digamma", x)?;
    Ok(digamma(x))
}

pub fn checked_trigamma(x: f64) -> Result<f64> {
    check_domain("trigamma", x)?;
    Ok(trigamma(x))
}
