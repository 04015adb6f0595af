//! Branch-free `exp`, sigmoid and tanh over slices.
//!
//! The LSTM spends most of its elementwise time in `exp`. These loops have no
//! data-dependent branches, so the compiler vectorizes them.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// 1.5 * 2^52: adding and subtracting it rounds to the nearest integer.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
const CLAMP: f64 = 700.0;

/// `exp(x)` for `x` clamped to `[-700, 700]`, relative error below 1e-15.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = x.clamp(-CLAMP, CLAMP);
    let n = (x * LOG2E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 12 on |r| <= ln2 / 2
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(((n as i64 + 1023) as u64) << 52);
    p * scale
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (exp(2.0 * x) + 1.0)
}

pub fn sigmoid_inplace(values: &mut [f64]) {
    for v in values {
        *v = sigmoid(*v);
    }
}

pub fn tanh_inplace(values: &mut [f64]) {
    for v in values {
        *v = tanh(*v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_std() {
        let mut x = -40.0;
        while x < 40.0 {
            let rel = (exp(x) - x.exp()).abs() / x.exp();
            assert!(rel < 1e-15, "exp({x}): rel {rel:e}");
            assert!((sigmoid(x) - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "tanh({x})");
            x += 0.0137;
        }
    }

    #[test]
    fn saturates_without_overflow() {
        for x in [-1e6, -800.0, 800.0, 1e6, f64::MAX, f64::MIN] {
            let s = sigmoid(x);
            let t = tanh(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
            assert!(t.is_finite() && (-1.0..=1.0).contains(&t));
        }
        assert_eq!(tanh(0.0), 0.0);
    }
}
