"""Word error rate via Levenshtein alignment."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class WerCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    hyp_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def empty_reference(self) -> bool:
        return self.ref_len == 0

    @property
    def rate(self) -> float:
        """Errors per reference word.  With an empty reference the rate is
        taken against the hypothesis length (1.0 for any output, else 0)."""
        if self.ref_len:
            return self.errors / self.ref_len
        return 1.0 if self.hyp_len else 0.0

    def __add__(self, other: "WerCounts") -> "WerCounts":
        return WerCounts(self.substitutions + other.substitutions,
                         self.deletions + other.deletions,
                         self.insertions + other.insertions,
                         self.ref_len + other.ref_len,
                         self.hyp_len + other.hyp_len)


ZERO = WerCounts(0, 0, 0, 0, 0)


def wer(reference, hypothesis) -> WerCounts:
    """Align with unit edit costs; on equal cost prefer a substitution over
    an insertion/deletion pair."""
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    # dist[i][j] = (edits, substitutions, deletions, insertions)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            e, s, d, ins = prev[j - 1]
            match = ref[i - 1] == hyp[j - 1]
            best = (e + (not match), s + (not match), d, ins)
            e, s, d, ins = prev[j]
            if e + 1 < best[0]:
                best = (e + 1, s, d + 1, ins)
            e, s, d, ins = cur[j - 1]
            if e + 1 < best[0]:
                best = (e + 1, s, d, ins + 1)
            cur.append(best)
        prev = cur
    _, s, d, ins = prev[m]
    return WerCounts(s, d, ins, n, m)
