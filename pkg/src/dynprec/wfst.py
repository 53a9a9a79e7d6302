"""Decoding graph and Viterbi beam search.

Costs live in the tropical semiring (min, +) as negative log probabilities.
Input label 0 and output label 0 are epsilon.  Senone label ``s`` (1-based)
reads acoustic score column ``s - 1``.

Text format, one record per line (``#`` starts a comment)::

    src dst ilabel olabel cost     # arc
    state [final_cost]             # final state, cost defaults to 0

The first state mentioned in the file is the start state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

EPSILON = 0


class WfstError(ValueError):
    pass


class WfstParseError(WfstError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class WfstValidationError(WfstError):
    pass


class DecodeError(RuntimeError):
    """No token survived a frame, or no token is left to finalize."""


def _csr(src: np.ndarray, idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(src[idx], minlength=n)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return offsets, idx  # idx is already grouped by src (arcs are src-sorted)


@dataclass
class Wfst:
    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    ilabel: np.ndarray
    olabel: np.ndarray
    cost: np.ndarray
    final_cost: np.ndarray  # inf where not final

    def __post_init__(self):
        order = np.argsort(self.src, kind="stable")
        self.src = np.asarray(self.src, dtype=np.int64)[order]
        self.dst = np.asarray(self.dst, dtype=np.int64)[order]
        self.ilabel = np.asarray(self.ilabel, dtype=np.int64)[order]
        self.olabel = np.asarray(self.olabel, dtype=np.int64)[order]
        self.cost = np.asarray(self.cost, dtype=np.float64)[order]
        self.final_cost = np.asarray(self.final_cost, dtype=np.float64)
        self.validate()
        arcs = np.arange(len(self.src))
        emit = arcs[self.ilabel != EPSILON]
        eps = arcs[self.ilabel == EPSILON]
        self._emit_off, self._emit_idx = _csr(self.src, emit, self.num_states)
        self._eps_off, self._eps_idx = _csr(self.src, eps, self.num_states)

    @classmethod
    def from_arcs(cls, arcs, finals: dict[int, float], start: int = 0,
                  num_states: int | None = None) -> "Wfst":
        arcs = list(arcs)
        ids = [start, *finals] + [a[0] for a in arcs] + [a[1] for a in arcs]
        n = num_states if num_states is not None else max(ids) + 1
        final_cost = np.full(n, np.inf)
        for s, c in finals.items():
            if not 0 <= s < n:
                raise WfstValidationError(f"final state {s} out of range")
            final_cost[s] = c
        cols = list(zip(*arcs)) if arcs else [(), (), (), (), ()]
        return cls(n, start, *(np.array(c) for c in cols), final_cost)

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    @property
    def finals(self) -> dict[int, float]:
        return {int(s): float(self.final_cost[s]) for s in np.flatnonzero(np.isfinite(self.final_cost))}

    @property
    def max_ilabel(self) -> int:
        return int(self.ilabel.max(initial=0))

    def validate(self) -> None:
        n = self.num_states
        if not 0 <= self.start < n:
            raise WfstValidationError(f"start state {self.start} out of range")
        if len(self.src) and (self.src.min() < 0 or self.src.max() >= n
                              or self.dst.min() < 0 or self.dst.max() >= n):
            raise WfstValidationError("arc endpoint out of range")
        if len(self.cost) and not np.all(np.isfinite(self.cost)):
            raise WfstValidationError("arc costs must be finite")
        if len(self.cost) and self.cost.min() < 0:
            raise WfstValidationError("arc costs must be non-negative")
        if len(self.ilabel) and (self.ilabel.min() < 0 or self.olabel.min() < 0):
            raise WfstValidationError("labels must be non-negative")
        finite = np.isfinite(self.final_cost)
        if not finite.any():
            raise WfstValidationError("no final state")
        if (self.final_cost[finite] < 0).any():
            raise WfstValidationError("final costs must be non-negative")
        has_out = np.bincount(self.src, minlength=n) > 0
        mentioned = np.zeros(n, dtype=bool)
        mentioned[self.dst] = True
        mentioned[self.start] = True
        dangling = np.flatnonzero(mentioned & ~has_out & ~finite)
        if dangling.size:
            raise WfstValidationError(f"dangling state {int(dangling[0])}: no arcs and not final")
        if not finite[self._reachable()].any():
            raise WfstValidationError("no final state reachable from start")

    def _reachable(self) -> np.ndarray:
        seen = np.zeros(self.num_states, dtype=bool)
        seen[self.start] = True
        stack = [self.start]
        order = np.argsort(self.src, kind="stable")
        off = np.concatenate([[0], np.cumsum(np.bincount(self.src, minlength=self.num_states))])
        dst_sorted = self.dst[order]
        while stack:
            s = stack.pop()
            for d in dst_sorted[off[s]:off[s + 1]]:
                if not seen[d]:
                    seen[d] = True
                    stack.append(int(d))
        return seen

    def arcs_from(self, state: int) -> Iterator[tuple[int, int, int, int, float]]:
        """(arc index, dst, ilabel, olabel, cost) in tie-break order."""
        for a in np.flatnonzero(self.src == state):
            yield int(a), int(self.dst[a]), int(self.ilabel[a]), int(self.olabel[a]), float(self.cost[a])


def parse_wfst(text: str) -> Wfst:
    arcs = []
    finals: dict[int, float] = {}
    start = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) == 5:
                s, d, il, ol = (int(p) for p in parts[:4])
                c = float(parts[4])
                arcs.append((s, d, il, ol, c))
                first = s
            elif len(parts) in (1, 2):
                first = int(parts[0])
                finals[first] = float(parts[1]) if len(parts) == 2 else 0.0
            else:
                raise WfstParseError(lineno, f"expected 1, 2 or 5 fields, got {len(parts)}")
        except ValueError as exc:
            if isinstance(exc, WfstParseError):
                raise
            raise WfstParseError(lineno, str(exc)) from None
        if first < 0:
            raise WfstParseError(lineno, "negative state id")
        if start is None:
            start = first
    if start is None:
        raise WfstValidationError("empty graph")
    if not finals:
        raise WfstValidationError("no final state")
    return Wfst.from_arcs(arcs, finals, start)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_wfst(g: Wfst) -> str:
    """Arcs grouped by source with the start state's arcs first."""
    finals = g.finals
    lines = []
    if g.start in finals:
        lines.append(f"{g.start} {_fmt(finals.pop(g.start))}")
    order = sorted(range(g.num_arcs), key=lambda a: (g.src[a] != g.start, g.src[a], a))
    for a in order:
        lines.append(f"{g.src[a]} {g.dst[a]} {g.ilabel[a]} {g.olabel[a]} {_fmt(g.cost[a])}")
    for s, c in finals.items():
        lines.append(f"{s} {_fmt(c)}")
    return "\n".join(lines) + "\n"


def read_symbols(text: str) -> dict[int, str]:
    table = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
            raise WfstParseError(lineno, "symbol lines are 'symbol id'")
        table[int(parts[1])] = parts[0]
    return table


def write_symbols(table: dict[int, str]) -> str:
    return "".join(f"{sym} {i}\n" for i, sym in sorted(table.items()))


# --- search ------------------------------------------------------------------

@dataclass(frozen=True)
class BeamConfig:
    beam_width: float = 12.0
    max_active: int | None = None
    acoustic_scale: float = 1.0

    def __post_init__(self):
        if not self.beam_width > 0:
            raise ValueError("beam_width must be > 0")
        if self.max_active is not None and self.max_active < 1:
            raise ValueError("max_active must be >= 1")


@dataclass(frozen=True)
class Token:
    state: int
    cost: float
    arc: int  # arc taken into this token, -1 for the start token
    frame: int


@dataclass
class ActiveSet:
    """Surviving tokens of one frame, one per state, sorted by state id.

    ``reached_*`` keep every token created in the frame before pruning so
    back-pointers through same-frame epsilon arcs stay resolvable.
    """

    frame: int
    states: np.ndarray
    costs: np.ndarray
    arcs: np.ndarray
    prev: "ActiveSet | None" = field(default=None, repr=False)
    reached_states: np.ndarray | None = field(default=None, repr=False)
    reached_arcs: np.ndarray | None = field(default=None, repr=False)

    @property
    def token_count(self) -> int:
        return len(self.states)

    def __len__(self) -> int:
        return len(self.states)

    def __contains__(self, state: int) -> bool:
        i = np.searchsorted(self.states, state)
        return i < len(self.states) and self.states[i] == state

    def token(self, state: int) -> Token:
        i = np.searchsorted(self.states, state)
        if i >= len(self.states) or self.states[i] != state:
            raise KeyError(state)
        return Token(int(state), float(self.costs[i]), int(self.arcs[i]), self.frame)

    def tokens(self) -> Iterator[Token]:
        for s, c, a in zip(self.states, self.costs, self.arcs):
            yield Token(int(s), float(c), int(a), self.frame)

    def best_cost(self) -> float:
        return float(self.costs.min()) if len(self.costs) else math.inf

    def _arc_into(self, state: int) -> int:
        i = np.searchsorted(self.reached_states, state)
        if i >= len(self.reached_states) or self.reached_states[i] != state:
            raise DecodeError(f"broken back-pointer to state {state} at frame {self.frame}")
        return int(self.reached_arcs[i])


def count_tokens(active: ActiveSet) -> int:
    return active.token_count


def _gather(offsets, index, states):
    """Arc indices leaving ``states`` (in order) and the owning position."""
    starts = offsets[states]
    lens = offsets[states + 1] - starts
    total = int(lens.sum())
    owner = np.repeat(np.arange(len(states)), lens)
    pos = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    return index[pos], owner


def _best_per_dst(dst, cand, arcs):
    """Index of the winning candidate per destination: min cost, then lower
    arc index (arcs are ordered by source state, then file order)."""
    order = np.lexsort((arcs, cand, dst))
    d = dst[order]
    first = np.ones(len(d), dtype=bool)
    first[1:] = d[1:] != d[:-1]
    return order[first]


def _epsilon_closure(g: Wfst, cost: np.ndarray, bp: np.ndarray, seeds: np.ndarray) -> None:
    """Relax epsilon arcs in place until no cost improves.

    Only strict improvements are taken, so zero-cost cycles terminate; the
    iteration count is capped at the number of states.
    """
    frontier = np.unique(seeds)
    for _ in range(g.num_states):
        if not frontier.size:
            return
        arcs, owner = _gather(g._eps_off, g._eps_idx, frontier)
        if not arcs.size:
            return
        cand = cost[frontier[owner]] + g.cost[arcs]
        dst = g.dst[arcs]
        win = _best_per_dst(dst, cand, arcs)
        better = cand[win] < cost[dst[win]]
        win = win[better]
        cost[dst[win]] = cand[win]
        bp[dst[win]] = arcs[win]
        frontier = dst[win]


def _finish(g, frame, cost, bp, cfg: BeamConfig | None, prev) -> ActiveSet:
    reached = np.flatnonzero(np.isfinite(cost))
    if not reached.size:
        raise DecodeError(f"no tokens survive frame {frame}")
    keep = reached
    if cfg is not None:
        c = cost[reached]
        best = c.min()
        keep = reached[c <= best + cfg.beam_width]
        if cfg.max_active is not None and len(keep) > cfg.max_active:
            order = np.lexsort((keep, cost[keep]))[: cfg.max_active]
            keep = np.sort(keep[order])
    return ActiveSet(frame, keep, cost[keep], bp[keep], prev, reached, bp[reached])


def init_search(g: Wfst) -> ActiveSet:
    """Start token at cost 0 plus its epsilon closure."""
    cost = np.full(g.num_states, np.inf)
    bp = np.full(g.num_states, -1, dtype=np.int64)
    cost[g.start] = 0.0
    _epsilon_closure(g, cost, bp, np.array([g.start]))
    return _finish(g, 0, cost, bp, None, None)


def expand_frame(g: Wfst, active: ActiveSet, scores: np.ndarray, cfg: BeamConfig) -> ActiveSet:
    """Consume one frame of acoustic scores (log-posteriors per senone)."""
    if not len(active):
        raise DecodeError("empty active set")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] < g.max_ilabel:
        raise ValueError(f"{scores.shape[-1]} scores but graph uses senone {g.max_ilabel}")
    arcs, owner = _gather(g._emit_off, g._emit_idx, active.states)
    if not arcs.size:
        raise DecodeError(f"no emitting arcs out of the active set at frame {active.frame + 1}")
    acoustic = cfg.acoustic_scale * -scores[g.ilabel[arcs] - 1]
    cand = active.costs[owner] + g.cost[arcs] + acoustic
    dst = g.dst[arcs]
    win = _best_per_dst(dst, cand, arcs)
    cost = np.full(g.num_states, np.inf)
    bp = np.full(g.num_states, -1, dtype=np.int64)
    cost[dst[win]] = cand[win]
    bp[dst[win]] = arcs[win]
    _epsilon_closure(g, cost, bp, dst[win])
    return _finish(g, active.frame + 1, cost, bp, cfg, active)


@dataclass
class DecodeResult:
    words: tuple[int, ...]
    token_counts: list[int]
    cost: float
    reached_final: bool = True
    path_arcs: tuple[int, ...] = ()

    @property
    def num_frames(self) -> int:
        return len(self.token_counts)


def finalize(g: Wfst, active: ActiveSet, token_counts=None) -> DecodeResult:
    """Add final costs, pick the best token and backtrack.

    When no surviving token is final the best non-final token is used and
    ``reached_final`` is False.
    """
    if not len(active):
        raise DecodeError("no token to finalize")
    total = active.costs + g.final_cost[active.states]
    reached_final = bool(np.isfinite(total).any())
    if not reached_final:
        total = active.costs
    i = int(np.argmin(total))  # first minimum -> lowest state id
    state, cost = int(active.states[i]), float(total[i])
    path = []
    cur = active
    while True:
        arc = cur._arc_into(state)
        if arc < 0:
            if cur.prev is not None or state != g.start:
                raise DecodeError("back-pointer chain does not end at the start token")
            break
        path.append(arc)
        state = int(g.src[arc])
        if g.ilabel[arc] != EPSILON:
            cur = cur.prev
    path.reverse()
    words = tuple(int(g.olabel[a]) for a in path if g.olabel[a] != EPSILON)
    counts = list(token_counts) if token_counts is not None else []
    return DecodeResult(words, counts, cost, reached_final, tuple(path))


def decode(g: Wfst, scores: np.ndarray, cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Fixed-score decode of a (frames, senones) matrix."""
    active = init_search(g)
    counts = []
    for frame_scores in np.asarray(scores):
        active = expand_frame(g, active, frame_scores, cfg)
        counts.append(count_tokens(active))
    return finalize(g, active, counts)
