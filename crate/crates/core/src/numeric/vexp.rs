//! Branch-free `exp` and log-sum-exp for the Sinkhorn inner loops. Written so
//! the compiler can vectorize it; `f64::exp` is an opaque libm call.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// `1.5 * 2^52`: adding it rounds to an integer kept in the low mantissa bits.
const SHIFTER: f64 = 6_755_399_441_055_744.0;
const LANES: usize = 8;

/// `exp(x)` within a few ulp on `[-708, 709]`; 0 below, saturates above.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let t = xc * LOG2E + SHIFTER;
    let n = t - SHIFTER;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2 / 2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
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
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    let v = p * scale;
    if x < -708.0 {
        0.0
    } else {
        v
    }
}

/// `LSE_j(h_j - s * c_j)`. Uses wider registers when the CPU has them; the
/// arithmetic and summation order are the same on every path.
pub fn log_sum_exp_affine(h: &[f64], c: &[f64], s: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { lse_avx512(h, c, s) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { lse_avx2(h, c, s) };
        }
    }
    lse_portable(h, c, s)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn lse_avx512(h: &[f64], c: &[f64], s: f64) -> f64 {
    lse_portable(h, c, s)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn lse_avx2(h: &[f64], c: &[f64], s: f64) -> f64 {
    lse_portable(h, c, s)
}

#[inline(always)]
fn lse_portable(h: &[f64], c: &[f64], s: f64) -> f64 {
    debug_assert_eq!(h.len(), c.len());
    let n = h.len();
    let split = n - n % LANES;
    let mut mx = [f64::NEG_INFINITY; LANES];
    for (hc, cc) in h[..split].chunks_exact(LANES).zip(c[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            let v = hc[l] - s * cc[l];
            mx[l] = if v > mx[l] { v } else { mx[l] };
        }
    }
    let mut max = mx.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for j in split..n {
        max = max.max(h[j] - s * c[j]);
    }
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    let mut acc = [0.0; LANES];
    for (hc, cc) in h[..split].chunks_exact(LANES).zip(c[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += exp(hc[l] - s * cc[l] - max);
        }
    }
    let mut sum: f64 = acc.iter().sum();
    for j in split..n {
        sum += exp(h[j] - s * c[j] - max);
    }
    max + sum.ln()
}
