//! Branch-free sigmoid and tanh.
//!
//! Both reduce to `exp` of a non-positive argument. The exponential below
//! compiles to straight-line code, so loops over slices vectorize; libm's
//! `exp` is an opaque call and dominates the LSTM cell otherwise.

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// 1.5 * 2^52: adding and subtracting rounds to the nearest integer
const ROUND: f64 = 6_755_399_441_055_744.0;

/// `e^x` for `x <= 0`, within a few ulp; arguments below -708 flush to 0.
#[inline(always)]
pub(crate) fn exp_nonpositive(arg: f64) -> f64 {
    let x = arg.max(-708.0);
    let shifted = x * std::f64::consts::LOG2_E + ROUND;
    let k = shifted - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
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
    // k sits in the low mantissa bits of `shifted`
    let bits = (shifted.to_bits() as i64).wrapping_sub(ROUND.to_bits() as i64);
    let scale = f64::from_bits(((bits + 1023) as u64) << 52);
    if arg < -708.0 {
        0.0
    } else {
        p * scale
    }
}

#[inline(always)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpositive(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn sigmoid_in_place(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = sigmoid(*x));
}

pub(crate) fn tanh_in_place(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = tanh(*x));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / b.abs()
        }
    }

    #[test]
    fn exp_matches_libm() {
        let mut worst: f64 = 0.0;
        for k in 0..=200_000 {
            let x = -700.0 * k as f64 / 200_000.0;
            worst = worst.max(rel(exp_nonpositive(x), x.exp()));
        }
        for x in [0.0f64, -1e-300, -1e-12, -0.5, -0.3465735902799726, -1.0, -745.0] {
            let expected = if x < -708.0 { 0.0 } else { x.exp() };
            worst = worst.max(rel(exp_nonpositive(x), expected));
        }
        assert!(worst < 4e-15, "{worst:e}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
    }

    #[test]
    fn activations_match_reference() {
        for k in -4000..=4000 {
            let x = k as f64 / 100.0;
            let s = 1.0 / (1.0 + (-x).exp());
            assert!(rel(sigmoid(x), s) < 4e-15, "{x}");
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
    }
}
