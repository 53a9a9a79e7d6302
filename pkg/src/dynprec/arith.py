"""Functional model of the dual-precision NFU datapath.

The multiplier is a single partial-product array driven by an 8-bit input
activation and an 8-bit weight word.  In base mode the weight word is one
signed 8-bit value; in half mode it carries two signed 4-bit weights (low
nibble first) and the array rows are grouped so each nibble produces its own
product.  The add-tree is modelled as a tree of wide adders whose carry at the
half boundary is gated off in half mode.

Everything works on Python ints or on numpy integer arrays (elementwise), so
the same code is used by the exhaustive tests and by layer inference.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

BASE_BITS = 8
HALF_BITS = 4
BASE_MIN, BASE_MAX = -(1 << (BASE_BITS - 1)), (1 << (BASE_BITS - 1)) - 1
HALF_MIN, HALF_MAX = -(1 << (HALF_BITS - 1)), (1 << (HALF_BITS - 1)) - 1

# signed product widths: 8x8 -> 16 bits, 8x4 -> 12 bits
BASE_PRODUCT_WIDTH = 2 * BASE_BITS
HALF_PRODUCT_WIDTH = BASE_BITS + HALF_BITS


class PrecisionMode(enum.Enum):
    BASE = "base"
    HALF = "half"

    @property
    def weight_bits(self) -> int:
        return BASE_BITS if self is PrecisionMode.BASE else HALF_BITS


@dataclass(frozen=True)
class BaseOperand:
    value: int

    def __post_init__(self):
        if not BASE_MIN <= self.value <= BASE_MAX:
            raise ValueError(f"base operand {self.value} outside 8-bit range")


@dataclass(frozen=True)
class HalfWeightPair:
    w0: int
    w1: int

    def __post_init__(self):
        for w in (self.w0, self.w1):
            if not HALF_MIN <= w <= HALF_MAX:
                raise ValueError(f"half weight {w} outside 4-bit range")


@dataclass(frozen=True)
class AddTreeConfig:
    """Leaf count and adder widths of one add-tree.

    ``accumulator_width`` defaults to the minimum that cannot overflow:
    ``product_width + log2(fan_in)``.
    """

    fan_in: int = 16
    product_width: int = BASE_PRODUCT_WIDTH
    accumulator_width: int | None = None

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_in & (self.fan_in - 1):
            raise ValueError(f"fan_in must be a power of two, got {self.fan_in}")
        depth = self.fan_in.bit_length() - 1
        if self.accumulator_width is None:
            object.__setattr__(self, "accumulator_width", self.product_width + depth)
        elif self.accumulator_width < self.product_width + depth:
            raise ValueError(
                f"accumulator_width {self.accumulator_width} can overflow; "
                f"need >= {self.product_width + depth}"
            )

    @property
    def depth(self) -> int:
        return self.fan_in.bit_length() - 1

    def halved(self) -> "AddTreeConfig":
        """Per-half config used by the split tree (12-bit products)."""
        return AddTreeConfig(self.fan_in, HALF_PRODUCT_WIDTH)


DEFAULT_TREE = AddTreeConfig()


def _unwrap(x):
    if isinstance(x, BaseOperand):
        return x.value
    return x


def _check_range(x, lo, hi, what):
    arr = np.asarray(x)
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueError(f"{what} outside [{lo}, {hi}]")


def _sign_extend(x, bits):
    """Interpret the low ``bits`` of x as two's complement."""
    mask = (1 << bits) - 1
    half = 1 << (bits - 1)
    return ((x & mask) ^ half) - half


def _pp_array(a, word, mode: PrecisionMode):
    """Shared partial-product array.

    ``word`` is the raw 8-bit weight pattern.  Row i is ``a AND bit_i(word)``.
    Rows 0-3 and rows 4-7 are compressed into two groups, each shifted
    relative to its own nibble.  The MSB row of each signed operand enters
    with negative weight (two's complement); in base mode that is row 7 only,
    in half mode rows 3 and 7.
    """
    lo = 0
    hi = 0
    for i in range(HALF_BITS):
        row_lo = a * ((word >> i) & 1)
        row_hi = a * ((word >> (i + HALF_BITS)) & 1)
        if i == HALF_BITS - 1:
            hi = hi - (row_hi << i)
            lo = lo - (row_lo << i) if mode is PrecisionMode.HALF else lo + (row_lo << i)
        else:
            hi = hi + (row_hi << i)
            lo = lo + (row_lo << i)
    if mode is PrecisionMode.BASE:
        # carry-save groups merged: the high group sits 4 bits up
        return lo + (hi << HALF_BITS)
    return lo, hi


def mul_base(a, w):
    """Exact 8x8 signed product computed on the partial-product array."""
    a, w = _unwrap(a), _unwrap(w)
    _check_range(a, BASE_MIN, BASE_MAX, "activation")
    _check_range(w, BASE_MIN, BASE_MAX, "weight")
    return _pp_array(a, w & 0xFF, PrecisionMode.BASE)


def pack_half_weights(w0, w1):
    """Two signed nibbles -> one 8-bit weight word, w0 in the low nibble."""
    return ((w1 & 0xF) << HALF_BITS) | (w0 & 0xF)


def mul_duplex(a, w):
    """Two 8x4 products sharing the multiplicand ``a``.

    ``w`` is a :class:`HalfWeightPair` or a ``(w0, w1)`` pair of ints/arrays.
    Returns ``(a*w0, a*w1)``.
    """
    a = _unwrap(a)
    if isinstance(w, HalfWeightPair):
        w0, w1 = w.w0, w.w1
    else:
        w0, w1 = w
    _check_range(a, BASE_MIN, BASE_MAX, "activation")
    _check_range(w0, HALF_MIN, HALF_MAX, "half weight")
    _check_range(w1, HALF_MIN, HALF_MAX, "half weight")
    return _pp_array(a, pack_half_weights(w0, w1), PrecisionMode.HALF)


# --- add-trees ---------------------------------------------------------------

def _wide_add(x, y, width, split):
    """One adder of the tree.  With ``split`` the carry out of bit width/2-1
    is masked so the upper and lower halves add independently."""
    mask = (1 << width) - 1
    s = x + y
    if split:
        hw = width // 2
        hmask = (1 << hw) - 1
        carry = ((x & hmask) + (y & hmask)) >> hw
        s = s - (carry << hw)
    return s & mask


def _reduce_tree(words, width, split):
    # words: array (..., fan_in) of unsigned width-bit patterns
    while words.shape[-1] > 1:
        words = _wide_add(words[..., 0::2], words[..., 1::2], width, split)
    return words[..., 0]


def _leaves(leaves, fan_in, what):
    arr = np.asarray(leaves, dtype=np.int64)
    if arr.ndim == 0 or arr.shape[-1] != fan_in:
        raise ValueError(f"{what}: expected {fan_in} leaves, got shape {arr.shape}")
    return arr


def addtree_base(leaves, cfg: AddTreeConfig = DEFAULT_TREE):
    """Sum ``fan_in`` leaves (last axis) through a full-width tree."""
    arr = _leaves(leaves, cfg.fan_in, "addtree_base")
    width = cfg.accumulator_width
    _check_range(arr, -(1 << (cfg.product_width - 1)), (1 << (cfg.product_width - 1)) - 1, "leaf")
    out = _sign_extend(_reduce_tree(arr & ((1 << width) - 1), width, split=False), width)
    assert np.array_equal(out, arr.sum(axis=-1)), "add-tree overflow"
    return out if out.ndim else int(out)


def addtree_split(leaves_lo, leaves_hi, cfg: AddTreeConfig = DEFAULT_TREE):
    """Two independent sums from one tree of carry-gated wide adders.

    Each adder is ``2 * H`` bits wide where ``H`` is the per-half accumulator
    width for 12-bit products; the low lane holds ``leaves_lo`` and the high
    lane ``leaves_hi``.
    """
    half = cfg.halved()
    lo = _leaves(leaves_lo, cfg.fan_in, "addtree_split lo")
    hi = _leaves(leaves_hi, cfg.fan_in, "addtree_split hi")
    lim = 1 << (half.product_width - 1)
    _check_range(lo, -lim, lim - 1, "lo leaf")
    _check_range(hi, -lim, lim - 1, "hi leaf")
    hw = half.accumulator_width
    hmask = (1 << hw) - 1
    words = ((hi & hmask) << hw) | (lo & hmask)
    total = _reduce_tree(words, 2 * hw, split=True)
    s_lo = _sign_extend(total, hw)
    s_hi = _sign_extend(total >> hw, hw)
    assert np.array_equal(s_lo, lo.sum(axis=-1)) and np.array_equal(s_hi, hi.sum(axis=-1)), \
        "split add-tree overflow"
    if np.ndim(s_lo) == 0:
        return int(s_lo), int(s_hi)
    return s_lo, s_hi


# --- dot products ------------------------------------------------------------

def _tiles(x, fan_in):
    n = x.shape[-1]
    pad = (-n) % fan_in
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype)], axis=-1)
    return x.reshape(x.shape[:-1] + (-1, fan_in))


def dot_product(a_vec, w_vec, mode: PrecisionMode, cfg: AddTreeConfig = DEFAULT_TREE):
    """Integer dot product on the NFU.

    Base mode: ``w_vec`` has the same trailing length as ``a_vec`` and one
    accumulator is returned.  Half mode: ``w_vec`` has a trailing axis of
    size 2 (two neurons' 4-bit weights per input) and a pair of accumulators
    is returned, one per neuron.  Inputs are processed ``fan_in`` at a time;
    tile sums are accumulated in a wide register.  Leading axes broadcast.
    """
    a = np.asarray([_unwrap(v) for v in a_vec] if isinstance(a_vec, (list, tuple)) else a_vec,
                   dtype=np.int64)
    w = np.asarray(w_vec, dtype=np.int64)
    if mode is PrecisionMode.BASE:
        if w.shape[-1] != a.shape[-1]:
            raise ValueError(f"length mismatch: {a.shape[-1]} inputs, {w.shape[-1]} weights")
        prod = mul_base(a, w)
        sums = addtree_base(_tiles(np.asarray(prod), cfg.fan_in), cfg)
        out = np.asarray(sums).sum(axis=-1)
        return int(out) if out.ndim == 0 else out
    if w.shape[-1] != 2 or w.ndim < 2 or w.shape[-2] != a.shape[-1]:
        raise ValueError(f"half mode expects weights (..., {a.shape[-1]}, 2), got {w.shape}")
    p0, p1 = mul_duplex(a, (w[..., 0], w[..., 1]))
    s0, s1 = addtree_split(_tiles(np.asarray(p0), cfg.fan_in), _tiles(np.asarray(p1), cfg.fan_in), cfg)
    s0 = np.asarray(s0).sum(axis=-1)
    s1 = np.asarray(s1).sum(axis=-1)
    if s0.ndim == 0:
        return int(s0), int(s1)
    return s0, s1


def matvec(a, codes, mode: PrecisionMode, cfg: AddTreeConfig = DEFAULT_TREE):
    """Layer matvec ``codes @ a`` for a batch of activation vectors.

    ``a``: (frames, n_in) int8-range codes; ``codes``: (n_out, n_in).  In half
    mode neurons are paired (0,1), (2,3), ... so each input feeds a duplex
    multiplier; an odd neuron count is padded with a zero row.
    """
    a = np.asarray(a, dtype=np.int64)
    codes = np.asarray(codes, dtype=np.int64)
    n_out = codes.shape[0]
    if mode is PrecisionMode.BASE:
        return dot_product(a[:, None, :], codes[None, :, :], mode, cfg)
    if n_out % 2:
        codes = np.vstack([codes, np.zeros((1, codes.shape[1]), dtype=np.int64)])
    pairs = codes.reshape(-1, 2, codes.shape[1]).transpose(0, 2, 1)  # (n_out/2, n_in, 2)
    s0, s1 = dot_product(a[:, None, :], pairs[None], mode, cfg)
    out = np.stack([s0, s1], axis=-1).reshape(a.shape[0], -1)
    return out[:, :n_out]
