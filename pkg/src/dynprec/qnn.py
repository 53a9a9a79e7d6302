"""Quantized feed-forward acoustic model.

Weights are kept at two precisions (8-bit and 4-bit codes, quantized
independently from the float model).  Activations are always re-quantized to
8 bits at every layer input.  Integer matvecs go through :mod:`dynprec.arith`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .arith import PrecisionMode, matvec

ACT_MAX = 127


class Activation(enum.Enum):
    RELU = 0
    IDENTITY = 1

    def __call__(self, x):
        return np.maximum(x, 0.0) if self is Activation.RELU else x


@dataclass(frozen=True)
class ContextSpec:
    left: int = 0
    right: int = 0

    def __post_init__(self):
        if self.left < 0 or self.right < 0:
            raise ValueError("context sizes must be non-negative")

    @property
    def width(self) -> int:
        return self.left + self.right + 1


@dataclass
class FloatLayer:
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray
    activation: Activation = Activation.RELU


@dataclass
class FloatModel:
    layers: list[FloatLayer]
    context: ContextSpec = field(default_factory=ContextSpec)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("layer dimensions do not chain")
        for layer in self.layers:
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ValueError("bias length must match layer output")
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise ValueError("final layer must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Float reference forward pass returning log-posteriors."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for layer in self.layers:
            h = layer.activation(h @ layer.weight.T + layer.bias)
        return log_softmax(h)


@dataclass
class QuantLayer:
    codes8: np.ndarray  # int8 codes in [-127, 127]
    scale8: float
    codes4: np.ndarray  # int codes in [-7, 7]
    scale4: float
    bias: np.ndarray  # float64
    activation: Activation
    act_scale: float  # input activation scale (max-abs / 127)

    @property
    def n_out(self) -> int:
        return self.codes8.shape[0]

    @property
    def n_in(self) -> int:
        return self.codes8.shape[1]

    def codes(self, mode: PrecisionMode) -> np.ndarray:
        return self.codes8 if mode is PrecisionMode.BASE else self.codes4

    def scale(self, mode: PrecisionMode) -> float:
        return self.scale8 if mode is PrecisionMode.BASE else self.scale4

    def dequantized(self, mode: PrecisionMode) -> np.ndarray:
        return self.codes(mode).astype(np.float64) * self.scale(mode)


@dataclass
class QuantizedModel:
    layers: list[QuantLayer]
    context: ContextSpec = field(default_factory=ContextSpec)

    def __post_init__(self):
        for layer in self.layers:
            if np.abs(layer.codes8).max(initial=0) > 127 or np.abs(layer.codes4).max(initial=0) > 7:
                raise ValueError("weight codes outside the symmetric range")
            if layer.scale8 <= 0 or layer.scale4 <= 0 or layer.act_scale <= 0:
                raise ValueError("scales must be positive")
            if layer.codes4.shape != layer.codes8.shape:
                raise ValueError("both precision planes must have the same shape")

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def feature_dim(self) -> int:
        return self.input_dim // self.context.width

    def weight_bytes(self, mode: PrecisionMode) -> int:
        n = sum(layer.codes8.size for layer in self.layers)
        return n if mode is PrecisionMode.BASE else (n + 1) // 2


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def quantize_linear(weights, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor quantization with round-half-to-even.

    Returns ``(codes, scale)`` with ``weights ~= codes * scale``.  An all-zero
    tensor gives zero codes and scale 1.
    """
    if bits not in (4, 8):
        raise ValueError(f"unsupported bit width {bits}")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    qmax = (1 << (bits - 1)) - 1
    peak = np.abs(w).max(initial=0.0)
    if peak == 0.0:
        return np.zeros(w.shape, dtype=np.int8), 1.0
    scale = peak / qmax
    codes = np.clip(np.rint(w / scale), -qmax, qmax).astype(np.int8)
    return codes, float(scale)


def quantize_activations(v, scale: float) -> np.ndarray:
    """8-bit symmetric activation codes (always 8-bit, whatever the weights)."""
    if scale <= 0:
        raise ValueError("activation scale must be positive")
    v = np.asarray(v, dtype=np.float64)
    return np.clip(np.rint(v / scale), -ACT_MAX, ACT_MAX).astype(np.int64)


def splice(features: np.ndarray, t: int, ctx: ContextSpec) -> np.ndarray:
    """Concatenate frames ``t-left .. t+right``; edges are replicated."""
    return splice_all(features, ctx, np.array([t]))[0]


def splice_all(features: np.ndarray, ctx: ContextSpec, frames=None) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("feature matrix is empty")
    n = feats.shape[0]
    t = np.arange(n) if frames is None else np.asarray(frames)
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError("frame index out of range")
    offsets = np.arange(-ctx.left, ctx.right + 1)
    idx = np.clip(t[:, None] + offsets[None, :], 0, n - 1)
    return feats[idx].reshape(len(t), -1)


def calibrate_activation_scales(model: FloatModel, samples: np.ndarray) -> list[float]:
    """Max-abs over float-model layer inputs, one scale per layer."""
    h = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    scales = []
    for layer in model.layers:
        peak = float(np.abs(h).max(initial=0.0))
        scales.append(peak / ACT_MAX if peak > 0 else 1.0)
        h = layer.activation(h @ layer.weight.T + layer.bias)
    return scales


def quantize_model(model: FloatModel, calibration_inputs: np.ndarray) -> QuantizedModel:
    """Quantize every layer at 8 and 4 bits and fix activation scales.

    ``calibration_inputs`` are spliced input vectors used for the max-abs
    activation calibration pass.
    """
    act_scales = calibrate_activation_scales(model, calibration_inputs)
    layers = []
    for layer, act_scale in zip(model.layers, act_scales):
        c8, s8 = quantize_linear(layer.weight, 8)
        c4, s4 = quantize_linear(layer.weight, 4)
        layers.append(QuantLayer(c8, s8, c4, s4, np.asarray(layer.bias, dtype=np.float64),
                                 layer.activation, act_scale))
    return QuantizedModel(layers, model.context)


def forward(model: QuantizedModel, spliced: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    """Integer inference for one spliced vector or a (frames, dim) batch.

    Returns log-posterior scores with the same leading shape as the input.
    """
    x = np.asarray(spliced, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != model input dim {model.input_dim}")
    for layer in model.layers:
        a = quantize_activations(x, layer.act_scale)
        acc = matvec(a, layer.codes(mode), mode)
        x = layer.activation(acc * (layer.scale(mode) * layer.act_scale) + layer.bias)
    scores = log_softmax(x)
    return scores[0] if single else scores


def score_frame(model: QuantizedModel, features: np.ndarray, t: int, mode: PrecisionMode) -> np.ndarray:
    return forward(model, splice(features, t, model.context), mode)


def score_utterance(model: QuantizedModel, features: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    """Scores for every frame of an utterance at one precision, (frames, senones).

    Frame scores are independent of each other, so a whole utterance is
    scored in one batch; the decoder then picks per frame which plane to use.
    """
    return forward(model, splice_all(features, model.context), mode)
