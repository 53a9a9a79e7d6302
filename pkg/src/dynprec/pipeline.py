"""Streaming decode loop and corpus-level experiments.

Per frame: pick a precision from the previous search step's token count,
score the frame at that precision, expand the search, count tokens, update
the controller and charge the frame's cost.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .arith import PrecisionMode
from .controller import (ControllerConfig, ControllerState, Decision, decide, percentile_threshold,
                         record_and_update)
from .cost import CostLedger, HwConfig, Rollup, sum_ledgers, system_rollup
from .metrics import ZERO, WerCounts, wer
from .qnn import QuantizedModel, score_utterance
from .synth import Utterance
from .wfst import BeamConfig, DecodeError, Wfst, count_tokens, expand_frame, finalize, init_search


class RunMode(enum.Enum):
    DYNAMIC = "dynamic"
    FIXED_BASE = "fixed-base"
    FIXED_HALF = "fixed-half"
    RANDOM = "random-ablation"


@dataclass(frozen=True)
class RunConfig:
    mode: RunMode = RunMode.DYNAMIC
    beam: BeamConfig = field(default_factory=BeamConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    hw: HwConfig = field(default_factory=HwConfig.default)
    seed: int = 0
    random_ratio: float = 0.5


# --- precision policies ------------------------------------------------------

class FixedPolicy:
    def __init__(self, mode: PrecisionMode):
        self.mode = mode
        self._threshold = math.inf if mode is PrecisionMode.HALF else 0.0

    def start_utterance(self):
        pass

    def choose(self, token_count: int) -> Decision:
        return Decision(self.mode, self._threshold, token_count)

    def observe(self, decision: Decision):
        pass


class ControllerPolicy:
    """Token-count threshold policy; state persists across utterances unless
    the config asks for a per-utterance reset."""

    def __init__(self, cfg: ControllerConfig, state: ControllerState | None = None):
        self.cfg = cfg
        self.state = state or ControllerState.initial(cfg)

    def start_utterance(self):
        if self.cfg.per_utterance:
            self.state = ControllerState.initial(self.cfg)

    def choose(self, token_count: int) -> Decision:
        return decide(self.state, token_count)

    def observe(self, decision: Decision):
        record_and_update(self.state, decision, self.cfg)


class RandomPolicy:
    """Half precision on a uniformly random share of frames (ablation)."""

    def __init__(self, ratio: float, seed: int = 0):
        if not 0 <= ratio <= 1:
            raise ValueError("ratio must be in [0, 1]")
        self.ratio = ratio
        self.rng = np.random.default_rng(seed)

    def start_utterance(self):
        pass

    def choose(self, token_count: int) -> Decision:
        half = self.rng.random() < self.ratio
        return Decision(PrecisionMode.HALF if half else PrecisionMode.BASE, math.nan, token_count)

    def observe(self, decision: Decision):
        pass


def make_policy(cfg: RunConfig):
    if cfg.mode is RunMode.FIXED_BASE:
        return FixedPolicy(PrecisionMode.BASE)
    if cfg.mode is RunMode.FIXED_HALF:
        return FixedPolicy(PrecisionMode.HALF)
    if cfg.mode is RunMode.RANDOM:
        return RandomPolicy(cfg.random_ratio, cfg.seed)
    return ControllerPolicy(cfg.controller)


# --- scoring -----------------------------------------------------------------

class ScoreCache:
    """Per-utterance score matrices at both precisions.

    A frame's scores depend only on its spliced features and the precision,
    so each (utterance, precision) is scored once in a batch and reused by
    every run over the same corpus.
    """

    def __init__(self, model: QuantizedModel):
        self.model = model
        self._scores: dict[tuple[str, PrecisionMode], np.ndarray] = {}

    def get(self, utt: Utterance, mode: PrecisionMode) -> np.ndarray:
        key = (utt.name, mode)
        if key not in self._scores:
            self._scores[key] = score_utterance(self.model, utt.features, mode)
        return self._scores[key]


# --- decoding ----------------------------------------------------------------

@dataclass
class UtteranceResult:
    name: str
    reference: tuple[str, ...]
    hypothesis: tuple[str, ...]
    modes: list[PrecisionMode]
    thresholds: list[float]
    token_counts: list[int]
    ledger: CostLedger
    wer: WerCounts
    cost: float = math.nan
    reached_final: bool = True
    error: str | None = None

    @property
    def half_ratio(self) -> float:
        return self.ledger.half_ratio

    @property
    def ok(self) -> bool:
        return self.error is None


def decode_utterance(utt: Utterance, model: QuantizedModel, graph: Wfst, beam: BeamConfig,
                     policy, hw: HwConfig, words: dict[int, str],
                     cache: ScoreCache | None = None) -> UtteranceResult:
    """Frame-synchronous decode with precision chosen per frame.

    The decision for frame t uses the token count left by step t-1; for the
    first frame that is the initial active set (start state plus its epsilon
    closure).
    """
    cache = cache or ScoreCache(model)
    policy.start_utterance()
    active = init_search(graph)
    prev = count_tokens(active)
    modes, thresholds, counts = [], [], []
    ledger = CostLedger()
    error = None
    try:
        for t in range(utt.num_frames):
            d = policy.choose(prev)
            scores = cache.get(utt, d.mode)[t]
            active = expand_frame(graph, active, scores, beam)
            prev = count_tokens(active)
            policy.observe(d)
            ledger.add_frame(d.mode, prev, hw)
            modes.append(d.mode)
            thresholds.append(d.threshold)
            counts.append(prev)
        result = finalize(graph, active, counts)
    except DecodeError as exc:
        error = str(exc)
        result = None
    hyp = tuple(words[w] for w in result.words) if result else ()
    return UtteranceResult(utt.name, utt.reference, hyp, modes, thresholds, counts, ledger,
                           wer(utt.reference, hyp),
                           result.cost if result else math.nan,
                           result.reached_final if result else False, error)


@dataclass
class CorpusReport:
    config: RunConfig
    results: list[UtteranceResult]

    @property
    def wer(self) -> WerCounts:
        total = ZERO
        for r in self.results:
            total = total + r.wer
        return total

    @property
    def ledger(self) -> CostLedger:
        return sum_ledgers(r.ledger for r in self.results)

    @property
    def ledgers(self) -> dict[str, CostLedger]:
        return {r.name: r.ledger for r in self.results}

    @property
    def half_ratio(self) -> float:
        return self.ledger.half_ratio

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.ok]

    @property
    def token_counts(self) -> np.ndarray:
        return np.concatenate([np.asarray(r.token_counts, dtype=np.int64) for r in self.results]) \
            if self.results else np.zeros(0, dtype=np.int64)

    def half_ratio_histogram(self, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
        ratios = [r.half_ratio for r in self.results if r.ledger.frames]
        return np.histogram(ratios, bins=bins, range=(0.0, 1.0))

    def trace_rows(self):
        frame = 0
        for r in self.results:
            for t, (m, th, c) in enumerate(zip(r.modes, r.thresholds, r.token_counts)):
                yield {"utterance": r.name, "frame": frame, "utt_frame": t, "token_count": c,
                       "threshold": float(th), "decision": m.value}
                frame += 1


class Experiment:
    """A corpus bound to a model and graph, with shared score cache."""

    def __init__(self, corpus: list[Utterance], model: QuantizedModel, graph: Wfst,
                 words: dict[int, str]):
        if graph.max_ilabel > model.output_dim:
            raise ValueError("graph uses more senones than the model scores")
        self.corpus = corpus
        self.model = model
        self.graph = graph
        self.words = words
        self.cache = ScoreCache(model)

    @classmethod
    def from_task(cls, task) -> "Experiment":
        return cls(task.corpus, task.model, task.graph, task.words)

    def run(self, cfg: RunConfig, policy=None) -> CorpusReport:
        """Decode every utterance in manifest order with one shared policy."""
        policy = policy or make_policy(cfg)
        results = [decode_utterance(u, self.model, self.graph, cfg.beam, policy, cfg.hw,
                                    self.words, self.cache) for u in self.corpus]
        return CorpusReport(cfg, results)

    def baseline(self, cfg: RunConfig) -> CorpusReport:
        return self.run(replace(cfg, mode=RunMode.FIXED_BASE))

    def rollup(self, report: CorpusReport, baseline: CorpusReport | None = None) -> Rollup:
        baseline = baseline or self.baseline(report.config)
        return system_rollup(baseline.ledgers, report.ledgers)

    def policy_comparison(self, cfg: RunConfig, seeds=(0,)) -> list[dict]:
        """Token-count selection vs random selection at the achieved ratio."""
        dyn = self.run(replace(cfg, mode=RunMode.DYNAMIC))
        rows = [{"policy": "token-count", "seed": "", "half_ratio": dyn.half_ratio,
                 "wer": dyn.wer.rate}]
        for s in seeds:
            rnd = self.run(replace(cfg, mode=RunMode.RANDOM, random_ratio=dyn.half_ratio, seed=s))
            rows.append({"policy": "random", "seed": s, "half_ratio": rnd.half_ratio,
                         "wer": rnd.wer.rate})
        return rows

    def sensitivity_sweep(self, targets, cfg: RunConfig, warm_start: bool = True) -> list[dict]:
        """One dynamic run per half-precision target against a shared
        all-base baseline.

        With ``warm_start`` each run's initial threshold is the all-base
        token count at the target percentile, so the controller starts near
        its operating point instead of walking there one step at a time.
        """
        base = self.baseline(cfg)
        counts = base.token_counts
        rows = []
        for target in targets:
            if not 0 <= target <= 1:
                raise ValueError(f"target {target} outside [0, 1]")
            ctl = replace(cfg.controller, target_ratio=target)
            if warm_start and len(counts):
                ctl = replace(ctl, initial_threshold=percentile_threshold(counts, 100 * target))
            run = self.run(replace(cfg, mode=RunMode.DYNAMIC, controller=ctl))
            roll = self.rollup(run, base)
            rows.append({"target": target, "achieved_ratio": run.half_ratio, "wer": run.wer.rate,
                         "am_time_saving": roll.am_time_saving,
                         "am_energy_saving": roll.am_energy_saving,
                         "sys_time_saving": roll.sys_time_saving,
                         "sys_energy_saving": roll.sys_energy_saving})
        return rows

