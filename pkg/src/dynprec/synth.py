"""Synthetic speech-like task: senone prototypes, lexicon, bigram grammar,
a composed decoding graph and an analytically built acoustic model.

Features for senone ``k`` are ``means[k] + noise * N(0, I)``.  The acoustic
model computes Gaussian log-likelihood logits for the spliced window (centre
frame at full weight, neighbours down-weighted) through a ReLU hidden layer
holding ``[z, -z]`` and an output layer recombining ``relu(z) - relu(-z)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qnn import Activation, ContextSpec, FloatLayer, FloatModel, QuantizedModel, quantize_model, splice_all
from .wfst import EPSILON, Wfst


@dataclass(frozen=True)
class TaskParams:
    seed: int = 0
    senones: int = 64
    dim: int = 16
    noise: float = 3.0
    vocab: int = 50
    avg_word_len: float = 4.0
    utterances: int = 200
    min_words: int = 3
    max_words: int = 8
    successors: int = 8
    p_stay: float = 0.6
    context: int = 1
    neighbour_weight: float = 0.3
    model_floor: float = 0.5
    calibration_frames: int = 2000
    prototype_df: float = 3.0  # Student-t degrees of freedom for prototypes; 0 = Gaussian

    def __post_init__(self):
        if self.senones < 2:
            raise ValueError("need at least 2 senones")
        if self.dim < 1:
            raise ValueError("feature dim must be >= 1")
        if self.vocab < 1:
            raise ValueError("vocabulary must not be empty")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 < self.p_stay < 1:
            raise ValueError("p_stay must be in (0, 1)")
        if self.utterances < 1:
            raise ValueError("need at least one utterance")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("bad words-per-utterance range")
        if self.prototype_df and self.prototype_df <= 2:
            raise ValueError("prototype_df must be 0 (Gaussian) or > 2")
        if self.avg_word_len < 1:
            raise ValueError("avg_word_len must be >= 1")


@dataclass
class Utterance:
    name: str
    features: np.ndarray  # float32 (frames, dim)
    reference: tuple[str, ...]

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticTask:
    params: TaskParams
    means: np.ndarray
    lexicon: dict[int, tuple[int, ...]]  # word id -> senone ids (1-based)
    grammar: dict[int, dict[int, float]]  # grammar state (0 = start) -> {word: cost}
    words: dict[int, str]
    float_model: FloatModel
    model: QuantizedModel
    graph: Wfst
    corpus: list[Utterance] = field(default_factory=list)
    # held-out utterances used for activation scales and threshold seeding
    calibration: list[Utterance] = field(default_factory=list)


def _word_name(i: int) -> str:
    return f"w{i:03d}"


def _prototypes(rng, p: TaskParams) -> np.ndarray:
    if not p.prototype_df:
        return rng.standard_normal((p.senones, p.dim))
    # heavy tails, unit variance: a few large weights stretch the 4-bit scale
    t = rng.standard_t(p.prototype_df, size=(p.senones, p.dim))
    return t / math.sqrt(p.prototype_df / (p.prototype_df - 2))


def _make_lexicon(rng, p: TaskParams) -> dict[int, tuple[int, ...]]:
    lexicon: dict[int, tuple[int, ...]] = {}
    seen = set()
    for w in range(1, p.vocab + 1):
        while True:
            n = max(1, int(rng.poisson(p.avg_word_len - 1)) + 1)
            pron = tuple(int(s) for s in rng.integers(1, p.senones + 1, size=n))
            if pron not in seen:
                break
        seen.add(pron)
        lexicon[w] = pron
    return lexicon


def _make_grammar(rng, p: TaskParams) -> dict[int, dict[int, float]]:
    grammar = {}
    k = min(p.successors, p.vocab)
    for g in range(p.vocab + 1):
        succ = np.sort(rng.choice(np.arange(1, p.vocab + 1), size=k, replace=False))
        probs = rng.dirichlet(np.ones(k))
        grammar[g] = {int(w): float(-math.log(pr)) for w, pr in zip(succ, probs)}
    return grammar


def build_graph(lexicon, grammar, p_stay: float) -> Wfst:
    """Bigram grammar composed with the lexicon and a left-to-right HMM.

    State 0 is the start; state ``w`` (1..V) means "last word was w" and is
    final; each word owns a chain of senone states entered from any grammar
    state that allows it.  The chain's exit back to its word state is an
    epsilon arc.
    """
    vocab = len(lexicon)
    stay = -math.log(p_stay)
    move = -math.log(1.0 - p_stay)
    arcs = []
    chain_start = {}
    nxt = vocab + 1
    for w in sorted(lexicon):
        chain_start[w] = nxt
        nxt += len(lexicon[w])
    for g in sorted(grammar):
        for w, c in grammar[g].items():
            arcs.append((g, chain_start[w], lexicon[w][0], w, c))
    for w in sorted(lexicon):
        pron = lexicon[w]
        base = chain_start[w]
        for i, sen in enumerate(pron):
            s = base + i
            arcs.append((s, s, sen, EPSILON, stay))
            if i + 1 < len(pron):
                arcs.append((s, s + 1, pron[i + 1], EPSILON, move))
            else:
                arcs.append((s, w, EPSILON, EPSILON, move))
    finals = {w: 0.0 for w in lexicon}
    return Wfst.from_arcs(arcs, finals, start=0, num_states=nxt)


def build_float_model(means: np.ndarray, p: TaskParams) -> FloatModel:
    k, d = means.shape
    sigma2 = p.noise ** 2 + p.model_floor ** 2
    ctx = ContextSpec(p.context, p.context)
    weights = np.array([p.neighbour_weight if j else 1.0 for j in range(-p.context, p.context + 1)])
    # logit_k = sum_j c_j (mu_k . x_j - |mu_k|^2 / 2) / sigma2
    a = np.concatenate([c * means for c in weights], axis=1) / sigma2
    b = -weights.sum() * 0.5 * (means ** 2).sum(axis=1) / sigma2
    hidden = FloatLayer(np.vstack([a, -a]), np.concatenate([b, -b]), Activation.RELU)
    eye = np.eye(k)
    out = FloatLayer(np.hstack([eye, -eye]), np.zeros(k), Activation.IDENTITY)
    return FloatModel([hidden, out], ctx)


def _sample_utterance(rng, p: TaskParams, means, lexicon, grammar):
    n_words = int(rng.integers(p.min_words, p.max_words + 1))
    g = 0
    words = []
    senones = []
    for _ in range(n_words):
        succ = list(grammar[g])
        probs = np.exp(-np.array([grammar[g][w] for w in succ]))
        w = succ[int(rng.choice(len(succ), p=probs / probs.sum()))]
        words.append(w)
        for sen in lexicon[w]:
            senones.extend([sen] * int(rng.geometric(1.0 - p.p_stay)))
        g = w
    idx = np.array(senones) - 1
    feats = means[idx] + p.noise * rng.standard_normal((len(idx), p.dim))
    return feats.astype(np.float32), words


def generate_task(params: TaskParams | None = None, **overrides) -> SyntheticTask:
    """Deterministic in ``params.seed``."""
    p = params or TaskParams(**overrides)
    if params is not None and overrides:
        p = TaskParams(**{**params.__dict__, **overrides})
    rng = np.random.default_rng(p.seed)
    means = _prototypes(rng, p)
    lexicon = _make_lexicon(rng, p)
    grammar = _make_grammar(rng, p)
    words = {w: _word_name(w) for w in lexicon}
    graph = build_graph(lexicon, grammar, p.p_stay)
    float_model = build_float_model(means, p)

    # activation calibration on held-out speech from the same generator
    cal_rng = np.random.default_rng([p.seed, 1])
    cal: list[Utterance] = []
    total = 0
    while total < p.calibration_frames:
        feats, ws = _sample_utterance(cal_rng, p, means, lexicon, grammar)
        cal.append(Utterance(f"cal{len(cal)}", feats, tuple(words[w] for w in ws)))
        total += len(feats)
    model = quantize_model(float_model, np.vstack([splice_all(u.features, float_model.context)
                                                   for u in cal]))

    utt_rng = np.random.default_rng([p.seed, 2])
    corpus = []
    width = len(str(p.utterances - 1))
    for i in range(p.utterances):
        feats, ws = _sample_utterance(utt_rng, p, means, lexicon, grammar)
        corpus.append(Utterance(f"utt{i:0{width}d}", feats, tuple(words[w] for w in ws)))
    return SyntheticTask(p, means, lexicon, grammar, words, float_model, model, graph, corpus, cal)
