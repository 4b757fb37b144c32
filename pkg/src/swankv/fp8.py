"""E4M3 8-bit float codec (1 sign, 4 exponent, 3 mantissa bits, bias 7).

Follows the "fn" flavour: no infinities, a single NaN pattern per sign
(``S.1111.111``), largest finite magnitude 448. Encoding rounds to nearest
with ties to even and saturates out-of-range magnitudes to ±448.
"""

import numpy as np

EXP_BIAS = 7
MANTISSA_BITS = 3
MAX_FINITE = 448.0
MIN_NORMAL = 2.0**-6
SUBNORMAL_STEP = 2.0**-9
NAN_CODE = 0x7F
MAX_CODE = 0x7E


def _build_table():
    codes = np.arange(256, dtype=np.uint32)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    exp = (codes >> MANTISSA_BITS) & 0xF
    man = codes & 0x7
    mag = np.where(
        exp == 0,
        man * SUBNORMAL_STEP,
        (1.0 + man / 8.0) * np.exp2(exp.astype(np.float64) - EXP_BIAS),
    )
    mag[(codes & 0x7F) == NAN_CODE] = np.nan
    return np.copysign(mag, sign).astype(np.float32)


DECODE_TABLE = _build_table()
DECODE_TABLE.setflags(write=False)


def decode_fp8(codes):
    """Decode uint8 e4m3 codes to float32 (exact for every code)."""
    return DECODE_TABLE[np.asarray(codes, dtype=np.uint8)]


def encode_fp8(x):
    """Encode float32 values to uint8 e4m3 codes.

    NaN maps to the NaN sentinel (sign preserved); ±Inf and anything at or
    beyond 448 in magnitude saturates to ±448.
    """
    x = np.asarray(x, dtype=np.float32)
    a = np.abs(x).astype(np.float64)
    sign = np.signbit(x).astype(np.uint8) << 7
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        # subnormal range: code is the count of 2^-9 steps; a result of 8
        # lands exactly on the smallest normal code, so no special case.
        sub = np.rint(a / SUBNORMAL_STEP)
        frac, exp2 = np.frexp(a)  # a = frac * 2**exp2, frac in [0.5, 1)
        e = exp2.astype(np.int64) - 1
        # mantissa scaled to [8, 16); rint is round-half-even
        m = np.rint(np.ldexp(frac, 4))
        normal = (e + EXP_BIAS) * 8 + (m - 8)
        code = np.where(a < MIN_NORMAL, sub, normal)
        code = np.where(np.isfinite(a) & (a < MAX_FINITE), code, MAX_CODE)
        code = np.minimum(code, MAX_CODE)
    code = np.where(np.isnan(x), NAN_CODE, code).astype(np.uint8)
    return code | sign


def round_fp8(x):
    """Round float32 values through the codec."""
    return decode_fp8(encode_fp8(x))
