//! Accurate integer inverse DCT.
//!
//! This is the classic separable Loeffler-Ligtenberg-Moschytz integer
//! algorithm (13-bit constants, 2 extra bits of precision between passes)
//! used as the default "slow integer" IDCT by the IJG codec family. Reference
//! decoders built on it produce bit-identical pixels, which is what lets the
//! conformance fixtures be compared within one level.

const CONST_BITS: i64 = 13;
const PASS1_BITS: i64 = 2;

const FIX_0_298631336: i64 = 2446;
const FIX_0_390180644: i64 = 3196;
const FIX_0_541196100: i64 = 4433;
const FIX_0_765366865: i64 = 6270;
const FIX_0_899976223: i64 = 7373;
const FIX_1_175875602: i64 = 9633;
const FIX_1_501321110: i64 = 12299;
const FIX_1_847759065: i64 = 15137;
const FIX_1_961570560: i64 = 16069;
const FIX_2_053119869: i64 = 16819;
const FIX_2_562915447: i64 = 20995;
const FIX_3_072711026: i64 = 25172;

#[inline]
fn descale(x: i64, n: i64) -> i64 {
    (x + (1 << (n - 1))) >> n
}

/// Post-IDCT range limiting with the reference codec's wrap-around table
/// semantics: +128 level shift, clamp to [0, 255] for in-range values.
#[inline]
fn range_limit(x: i64) -> u8 {
    let idx = x & 1023;
    match idx {
        0..=127 => (idx + 128) as u8,
        128..=511 => 255,
        512..=895 => 0,
        _ => (idx - 896) as u8,
    }
}

/// Shared rotation of the even and odd parts. Returns the eight outputs
/// before descaling.
#[inline]
fn butterfly(v: [i64; 8]) -> [i64; 8] {
    let z2 = v[2];
    let z3 = v[6];
    let z1 = (z2 + z3) * FIX_0_541196100;
    let tmp2 = z1 + z3 * -FIX_1_847759065;
    let tmp3 = z1 + z2 * FIX_0_765366865;

    let tmp0 = (v[0] + v[4]) << CONST_BITS;
    let tmp1 = (v[0] - v[4]) << CONST_BITS;

    let tmp10 = tmp0 + tmp3;
    let tmp13 = tmp0 - tmp3;
    let tmp11 = tmp1 + tmp2;
    let tmp12 = tmp1 - tmp2;

    let mut t0 = v[7];
    let mut t1 = v[5];
    let mut t2 = v[3];
    let mut t3 = v[1];

    let z1 = t0 + t3;
    let z2 = t1 + t2;
    let z3 = t0 + t2;
    let z4 = t1 + t3;
    let z5 = (z3 + z4) * FIX_1_175875602;

    t0 *= FIX_0_298631336;
    t1 *= FIX_2_053119869;
    t2 *= FIX_3_072711026;
    t3 *= FIX_1_501321110;
    let z1 = z1 * -FIX_0_899976223;
    let z2 = z2 * -FIX_2_562915447;
    let z3 = z3 * -FIX_1_961570560 + z5;
    let z4 = z4 * -FIX_0_390180644 + z5;

    t0 += z1 + z3;
    t1 += z2 + z4;
    t2 += z2 + z3;
    t3 += z1 + z4;

    [tmp10 + t3, tmp11 + t2, tmp12 + t1, tmp13 + t0, tmp13 - t0, tmp12 - t1, tmp11 - t2, tmp10 - t3]
}

/// Dequantizes and inverse-transforms one block of natural-order
/// coefficients, writing 8x8 samples into `out` with row pitch `stride`.
pub fn idct_islow(coef: &[i32; 64], quant: &[u16; 64], out: &mut [u8], stride: usize) {
    let mut ws = [0i32; 64];
    for col in 0..8 {
        let q = |r: usize| coef[r * 8 + col] as i64 * quant[r * 8 + col] as i64;
        if (1..8).all(|r| coef[r * 8 + col] == 0) {
            let dc = (q(0) << PASS1_BITS) as i32;
            for r in 0..8 {
                ws[r * 8 + col] = dc;
            }
            continue;
        }
        let v = [q(0), q(1), q(2), q(3), q(4), q(5), q(6), q(7)];
        let o = butterfly(v);
        for r in 0..8 {
            ws[r * 8 + col] = descale(o[r], CONST_BITS - PASS1_BITS) as i32;
        }
    }
    for row in 0..8 {
        let w = &ws[row * 8..row * 8 + 8];
        let dst = &mut out[row * stride..row * stride + 8];
        if w[1..].iter().all(|&x| x == 0) {
            let v = range_limit(descale(w[0] as i64, PASS1_BITS + 3));
            dst.fill(v);
            continue;
        }
        let o = butterfly(std::array::from_fn(|i| w[i] as i64));
        for (d, x) in dst.iter_mut().zip(o) {
            *d = range_limit(descale(x, CONST_BITS + PASS1_BITS + 3));
        }
    }
}
