from dataclasses import replace

import numpy as np
import pytest

from dynprec.arith import PrecisionMode
from dynprec.controller import ControllerConfig, Decision, percentile_threshold
from dynprec.cost import utterance_cost
from dynprec.io import model_to_bytes
from dynprec.pipeline import (ControllerPolicy, Experiment, FixedPolicy, RandomPolicy, RunConfig, RunMode,
                              ScoreCache, decode_utterance, make_policy)
from dynprec.qnn import score_utterance
from dynprec.synth import TaskParams, Utterance, generate_task
from dynprec.wfst import BeamConfig, Wfst, count_tokens, init_search, serialize_wfst

BASE, HALF = PrecisionMode.BASE, PrecisionMode.HALF


class Recorder:
    """Policy wrapper that logs the count each decision was based on."""

    def __init__(self, inner):
        self.inner, self.seen = inner, []

    def start_utterance(self):
        self.inner.start_utterance()

    def choose(self, count):
        self.seen.append(count)
        return self.inner.choose(count)

    def observe(self, d):
        self.inner.observe(d)


def test_decisions_use_previous_frame_count(small_task):
    utt = small_task.corpus[0]
    rec = Recorder(ControllerPolicy(ControllerConfig(initial_threshold=20, update_period=2)))
    res = decode_utterance(utt, small_task.model, small_task.graph, BeamConfig(), rec, RunConfig().hw,
                           small_task.words)
    assert rec.seen[0] == count_tokens(init_search(small_task.graph))
    assert rec.seen[1:] == res.token_counts[:-1]
    assert len(res.modes) == utt.num_frames


def test_ledger_matches_decisions(small_task):
    exp = Experiment.from_task(small_task)
    cfg = RunConfig(controller=ControllerConfig(initial_threshold=25))
    for r in exp.run(cfg).results:
        assert r.ledger == utterance_cost((m, c, cfg.hw) for m, c in zip(r.modes, r.token_counts))


def test_score_cache_matches_direct_scoring(small_task):
    cache = ScoreCache(small_task.model)
    u = small_task.corpus[1]
    for mode in (BASE, HALF):
        assert np.array_equal(cache.get(u, mode), score_utterance(small_task.model, u.features, mode))
        assert cache.get(u, mode) is cache.get(u, mode)


@pytest.mark.parametrize("threshold, fixed", [(0, RunMode.FIXED_BASE), (float("inf"), RunMode.FIXED_HALF)])
def test_degenerate_thresholds_equal_fixed_modes(small_task, threshold, fixed):
    exp = Experiment.from_task(small_task)
    dyn = exp.run(RunConfig(controller=ControllerConfig(initial_threshold=threshold, delta=0)))
    ref = exp.run(RunConfig(mode=fixed))
    for a, b in zip(dyn.results, ref.results):
        assert (a.hypothesis, a.token_counts, a.modes) == (b.hypothesis, b.token_counts, b.modes)
        assert a.ledger == b.ledger


def test_failures_are_recorded_and_run_continues(small_task):
    # a chain that consumes exactly two frames
    g = Wfst.from_arcs([(0, 1, 1, 1, 0.0), (1, 2, 1, 2, 0.0)], {2: 0.0})
    dim = small_task.params.dim
    corpus = [Utterance("short", np.zeros((2, dim), np.float32), ("w001", "w002")),
              Utterance("long", np.zeros((5, dim), np.float32), ("w001",)),
              Utterance("after", np.zeros((2, dim), np.float32), ("w001", "w002"))]
    exp = Experiment(corpus, small_task.model, g, {1: "w001", 2: "w002"})
    rep = exp.run(RunConfig(mode=RunMode.FIXED_BASE))
    assert rep.failures == ["long"]
    assert rep.results[2].ok and rep.results[2].hypothesis == ("w001", "w002")
    assert rep.results[1].wer.deletions == 1


def test_graph_must_fit_model(small_task):
    g = Wfst.from_arcs([(0, 0, small_task.model.output_dim + 1, 0, 0.0)], {0: 0.0})
    with pytest.raises(ValueError):
        Experiment(small_task.corpus, small_task.model, g, small_task.words)


def test_controller_state_spans_utterances_unless_reset(small_task):
    exp = Experiment.from_task(small_task)
    shared = exp.run(RunConfig(controller=ControllerConfig(initial_threshold=500, update_period=1)))
    reset = exp.run(RunConfig(controller=ControllerConfig(initial_threshold=500, update_period=1,
                                                          per_utterance=True)))
    assert shared.results[1].thresholds[0] == shared.results[0].thresholds[-1] - 1
    assert all(r.thresholds[0] == 500 for r in reset.results)


def test_random_policy_ratio_and_seed():
    a = RandomPolicy(0.3, seed=1)
    b = RandomPolicy(0.3, seed=1)
    modes_a = [a.choose(0).mode for _ in range(20_000)]
    assert modes_a[:200] == [b.choose(0).mode for _ in range(200)]
    assert abs(np.mean([m is HALF for m in modes_a]) - 0.3) < 0.015
    with pytest.raises(ValueError):
        RandomPolicy(1.5)


def test_make_policy_dispatch():
    assert isinstance(make_policy(RunConfig(mode=RunMode.FIXED_BASE)), FixedPolicy)
    assert isinstance(make_policy(RunConfig(mode=RunMode.RANDOM)), RandomPolicy)
    assert isinstance(make_policy(RunConfig()), ControllerPolicy)
    assert FixedPolicy(HALF).choose(3) == Decision(HALF, float("inf"), 3)


def test_report_aggregates(small_task):
    exp = Experiment.from_task(small_task)
    rep = exp.run(RunConfig(controller=ControllerConfig(initial_threshold=25)))
    hist, edges = rep.half_ratio_histogram()
    assert hist.sum() == len(small_task.corpus) and edges[0] == 0 and edges[-1] == 1
    rows = list(rep.trace_rows())
    assert len(rows) == rep.ledger.frames == sum(u.num_frames for u in small_task.corpus)
    assert [r["frame"] for r in rows] == list(range(len(rows)))
    assert rep.wer.ref_len == sum(len(u.reference) for u in small_task.corpus)


def test_sweep_rows(small_task):
    exp = Experiment.from_task(small_task)
    cfg = RunConfig(controller=ControllerConfig(initial_threshold=25))
    rows = exp.sensitivity_sweep([0, 0.5, 1], cfg)
    assert [r["target"] for r in rows] == [0, 0.5, 1]
    assert rows[0]["wer"] == exp.baseline(cfg).wer.rate and rows[0]["am_energy_saving"] == 0
    assert rows[2]["achieved_ratio"] == 1.0
    with pytest.raises(ValueError):
        exp.sensitivity_sweep([1.5], cfg)


# --- task generator --------------------------------------------------------

def test_generation_is_deterministic():
    a, b = generate_task(seed=11, utterances=5), generate_task(seed=11, utterances=5)
    assert model_to_bytes(a.model) == model_to_bytes(b.model)
    assert serialize_wfst(a.graph) == serialize_wfst(b.graph)
    for u, v in zip(a.corpus, b.corpus):
        assert u.name == v.name and u.reference == v.reference
        assert u.features.tobytes() == v.features.tobytes()
    c = generate_task(seed=12, utterances=5)
    assert c.corpus[0].features.tobytes() != a.corpus[0].features.tobytes()


def test_task_structure(small_task):
    p = small_task.params
    assert all(1 <= s <= p.senones for pron in small_task.lexicon.values() for s in pron)
    assert small_task.graph.max_ilabel <= small_task.model.output_dim
    assert set(small_task.graph.finals) == set(small_task.lexicon)
    assert sum(u.num_frames for u in small_task.calibration) >= p.calibration_frames


def test_noiseless_task_decodes_almost_perfectly():
    task = generate_task(seed=4, noise=0.0, utterances=20)
    rep = Experiment.from_task(task).run(RunConfig(mode=RunMode.FIXED_BASE))
    assert rep.wer.rate <= 0.02


def test_noise_raises_median_token_count():
    medians = []
    for noise in (0.5, 1.5, 3.0):
        task = generate_task(seed=2, noise=noise, utterances=20)
        rep = Experiment.from_task(task).run(RunConfig(mode=RunMode.FIXED_BASE))
        medians.append(np.median(rep.token_counts))
    assert medians[0] < medians[1] < medians[2]


@pytest.mark.parametrize("bad", [dict(senones=1), dict(dim=0), dict(vocab=0), dict(noise=-1),
                                 dict(prototype_df=2.0), dict(min_words=5, max_words=3)])
def test_param_validation(bad):
    with pytest.raises(ValueError):
        TaskParams(**bad)


def test_overrides_merge_with_params():
    t = generate_task(TaskParams(seed=1, utterances=3), utterances=2)
    assert t.params.seed == 1 and len(t.corpus) == 2


def test_corpus_ratio_and_histogram_over_100k_frames():
    task = generate_task(utterances=2000)
    held_out = Experiment(task.calibration, task.model, task.graph, task.words)
    start = percentile_threshold(held_out.run(RunConfig(mode=RunMode.FIXED_BASE)).token_counts, 50)
    rep = Experiment.from_task(task).run(RunConfig(controller=ControllerConfig(initial_threshold=start)))
    assert len(rep.token_counts) >= 100_000
    assert 0.48 <= rep.half_ratio <= 0.52
    counts, _ = rep.half_ratio_histogram(bins=10)
    peak = int(np.argmax(counts))
    assert 3 <= peak <= 6
    assert all(np.diff(counts[: peak + 1]) >= 0) and all(np.diff(counts[peak:]) <= 0)
    assert any(r.half_ratio > 0.8 for r in rep.results)
