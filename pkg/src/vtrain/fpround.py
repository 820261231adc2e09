"""Reduced-precision grid arithmetic on IEEE-754 doubles.

All persistent training state lives on a "grid": the finite FP32 values
whose low ``32 - b`` mantissa bits are zero, re-expressed exactly as FP64.
``b`` (the rounding amount) ranges from 10 to 32; ``b = 32`` is the full
FP32 value set and smaller ``b`` coarsens the grid by a factor of two per
step. Values are computed in FP64 and pulled onto the grid with ``rnd``.

``direction`` classifies how a value relates to its grid point: a ternary
code (0 = rounded down, 1 = ignore, 2 = rounded up) is produced only when
the value sits further than ``tau`` (relative to its binary exponent) from
the grid point. ``rev`` is the replay half: given a second, slightly
perturbed computation of the same value plus the recorded code, it lands
on the same grid point the original party chose.

Everything here is implemented on the bit representation so that results
are identical across machines. Functions come in scalar and ``*_array``
forms; the array forms take and return ``float64`` ndarrays and are the
ones used in hot paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Ternary rounding-direction codes.
DOWN = 0
IGNORE = 1
UP = 2

MIN_B = 10
MAX_B = 32

# Smallest normal FP32 magnitude; used as the exponent-scale floor so the
# threshold test never works with a vanishing scale.
SCALE_FLOOR = 2.0 ** -126

_SIGN64 = np.uint64(1 << 63)
_MAG64 = np.uint64((1 << 63) - 1)


def _check_b(b_r: int) -> None:
    if not isinstance(b_r, (int, np.integer)) or not MIN_B <= b_r <= MAX_B:
        raise ValueError(f"b_r must be an integer in [{MIN_B}, {MAX_B}], got {b_r!r}")


def tau_bounds(b_r: int) -> tuple[float, float]:
    """Valid [lower, upper] range for the relative threshold at rounding amount b_r."""
    _check_b(b_r)
    return 0.25 * 2.0 ** -23, 0.5 * 2.0 ** (9 - b_r)


def grid_max(b_r: int) -> float:
    """Largest magnitude representable on the b_r grid."""
    _check_b(b_r)
    kept = b_r - 9
    return (2.0 - 2.0 ** -kept) * 2.0 ** 127


@dataclass(frozen=True)
class RoundingParams:
    """Rounding amount, threshold, and working precision for one run.

    ``tau`` is relative: the logging test compares a value's distance from
    its grid point against ``tau * exponent_scale(value)``. ``tau = 0``
    disables the ignore band entirely (every off-grid value gets a code).
    """

    b_r: int
    tau: float
    b_tr: int = 64

    def __post_init__(self) -> None:
        _check_b(self.b_r)
        if self.b_tr != 64:
            raise ValueError("training precision must be 64")
        if self.tau != 0.0:
            lo, hi = tau_bounds(self.b_r)
            if not lo <= self.tau <= hi:
                raise ValueError(
                    f"tau {self.tau!r} outside [{lo!r}, {hi!r}] for b_r={self.b_r}"
                )


def _require_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value")


def _prepare(x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Owned float64 working copy plus its uint64 view, at least 1-d."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64)).copy()
    bits = arr.view(np.uint64)
    return arr, bits, bits & _MAG64


def _rnd_bits(arr: np.ndarray, bits: np.ndarray, mag: np.ndarray, b_r: int) -> np.ndarray:
    """Nearest-grid rounding, ties to even on the kept mantissa bits."""
    kept = b_r - 9
    drop = np.uint64(52 - kept)
    sign = bits & _SIGN64

    # Normal FP32 range: one rounding of the FP64 significand. Working on
    # the magnitude bit pattern lets the mantissa carry roll into the
    # exponent field, which is exactly the right behaviour at binade edges.
    low_mask = np.uint64((1 << int(drop)) - 1)
    half = np.uint64(1 << (int(drop) - 1))
    base = mag >> drop
    low = mag & low_mask
    round_up = (low > half) | ((low == half) & ((base & np.uint64(1)) == np.uint64(1)))
    norm_bits = sign | ((base + round_up.astype(np.uint64)) << drop)
    norm_val = norm_bits.view(np.float64)

    # Below 2^-126 the grid is absolute (FP32-subnormal spacing), so the
    # mantissa-shift trick does not apply. Scaling by a power of two is
    # exact here, as is rint on integers below 2^23.
    in_normal = np.abs(arr) >= SCALE_FLOOR
    q_log2 = (32 - b_r) - 149
    tiny = np.where(in_normal, 0.0, arr)
    sub_val = np.rint(tiny * 2.0 ** -q_log2) * 2.0 ** q_log2

    return np.where(in_normal, norm_val, sub_val)


def rnd_array(x, b_r: int) -> np.ndarray:
    """Round each element onto the b_r grid (nearest, ties to even)."""
    _check_b(b_r)
    arr, bits, mag = _prepare(x)
    _require_finite(arr)
    out = _rnd_bits(arr, bits, mag, b_r)
    if np.any(np.abs(out) > grid_max(b_r)):
        raise ValueError("out of representable range")
    return out.reshape(np.shape(x)) if np.shape(x) else out


def rnd(x: float, b_r: int) -> float:
    """Scalar form of rnd_array."""
    return float(rnd_array(x, b_r)[0])


def epsilon(b_r: int, exponent_scale: float) -> float:
    """Grid spacing at the given exponent scale: exponent_scale * 2^(9 - b_r)."""
    _check_b(b_r)
    return exponent_scale * 2.0 ** (9 - b_r)


def exponent_scale_array(x) -> np.ndarray:
    """2^E per element, where 1 <= |x| / 2^E < 2. Zero maps to 2^-126."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    _require_finite(arr)
    _, e = np.frexp(arr)
    scale = np.ldexp(1.0, e - 1)
    out = np.where(arr == 0.0, SCALE_FLOOR, scale)
    return out.reshape(np.shape(x)) if np.shape(x) else out


def exponent_scale(x: float) -> float:
    """Scalar form of exponent_scale_array."""
    return float(exponent_scale_array(x)[0])


def direction_array(x, b_r: int, tau: float) -> np.ndarray:
    """Ternary code per element: 2 up, 0 down, 1 within tau of the grid.

    The comparison scale is the element's exponent scale floored at
    2^-126, so FP32-subnormal values use the bottom normal binade's scale.
    """
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    r = rnd_array(arr, b_r)
    scale = np.maximum(exponent_scale_array(arr), SCALE_FLOOR)
    logged = np.abs(arr - r) > scale * np.float64(tau)
    out = np.full(arr.shape, IGNORE, dtype=np.uint8)
    out[logged & (arr < r)] = UP
    out[logged & (arr > r)] = DOWN
    return out.reshape(np.shape(x)) if np.shape(x) else out


def direction(x: float, p: RoundingParams) -> int:
    """Scalar form of direction_array."""
    return int(direction_array(x, p.b_r, p.tau)[0])


def grid_neighbors_array(x, b_r: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest grid value <= x and smallest grid value >= x, per element."""
    _check_b(b_r)
    arr, bits, mag = _prepare(x)
    _require_finite(arr)
    if np.any(np.abs(arr) > grid_max(b_r)):
        raise ValueError("out of representable range")

    kept = b_r - 9
    drop = np.uint64(52 - kept)
    sign = bits & _SIGN64
    trunc_mag = (mag >> drop) << drop
    on_grid = trunc_mag == mag
    step = np.uint64(1 << int(drop))
    away_mag = trunc_mag + np.where(on_grid, np.uint64(0), step)
    toward = (sign | trunc_mag).view(np.float64)
    away = (sign | away_mag).view(np.float64)
    pos = arr >= 0.0
    below_n = np.where(pos, toward, away)
    above_n = np.where(pos, away, toward)

    in_normal = np.abs(arr) >= SCALE_FLOOR
    q_log2 = (32 - b_r) - 149
    tiny = np.where(in_normal, 0.0, arr)
    scaled = tiny * 2.0 ** -q_log2
    below_s = np.floor(scaled) * 2.0 ** q_log2
    above_s = np.ceil(scaled) * 2.0 ** q_log2

    below = np.where(in_normal, below_n, below_s)
    above = np.where(in_normal, above_n, above_s)
    if np.shape(x):
        below = below.reshape(np.shape(x))
        above = above.reshape(np.shape(x))
    return below, above


def grid_neighbors(x: float, b_r: int) -> tuple[float, float]:
    """Scalar form of grid_neighbors_array."""
    below, above = grid_neighbors_array(x, b_r)
    return float(below[0]), float(above[0])


def rev_array(x, b_r: int, codes) -> np.ndarray:
    """Replay rounding with recorded codes.

    Where the natural nearest rounding already agrees with the code (or
    the code is 1), this is plain ``rnd``. Where the code points the other
    way, the adjacent grid value on the coded side of x is taken instead.
    """
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    c = np.atleast_1d(np.asarray(codes))
    if c.shape != arr.shape:
        raise ValueError(f"codes shape {c.shape} does not match values shape {arr.shape}")
    if c.size and (c.min() < DOWN or c.max() > UP):
        raise ValueError("invalid direction code")
    r = rnd_array(arr, b_r)
    below, above = grid_neighbors_array(arr, b_r)
    out = r.copy()
    force_down = (c == DOWN) & (arr < r)
    force_up = (c == UP) & (arr > r)
    out[force_down] = below[force_down]
    out[force_up] = above[force_up]
    return out.reshape(np.shape(x)) if np.shape(x) else out


def rev(x: float, b_r: int, c: int) -> float:
    """Scalar form of rev_array."""
    return float(rev_array(x, b_r, np.asarray([c]))[0])


def is_on_grid(x, b_r: int) -> np.ndarray:
    """Boolean per element: finite, exactly FP32-representable, low bits clear."""
    _check_b(b_r)
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    as32 = arr.astype(np.float32)
    exact = np.isfinite(as32) & (as32.astype(np.float64) == arr)
    low_mask = np.uint32((1 << (32 - b_r)) - 1) if b_r < 32 else np.uint32(0)
    clear = (as32.view(np.uint32) & low_mask) == np.uint32(0)
    out = exact & clear
    return out.reshape(np.shape(x)) if np.shape(x) else out
