"""Windowed coincidence matching of timestamp streams and sifted-rate/QBER stats.

Channel indices are 0=H, 1=V, 2=D, 3=A on both sides (basis = channel >> 1,
port bit = channel & 1). The 4x4 coincidence matrix is indexed
[alice_channel][bob_channel].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

CHANNEL_LABELS = ("H", "V", "D", "A")

DEFAULT_WINDOW_PS = 1000  # +/- 1 ns closed interval

# Eq.-style bookkeeping: same-basis "correct" and "error" channel pairs.
CORRECT_PAIRS = ((0, 0), (1, 1), (2, 2), (3, 3))
ERROR_PAIRS = ((0, 1), (1, 0), (2, 3), (3, 2))


class InputError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class CoincidenceSet:
    """Matched record pairs: parallel index arrays plus their time offsets."""

    alice_indices: np.ndarray
    bob_indices: np.ndarray
    delta_ps: np.ndarray  # bob_timestamp - alice_timestamp per pair
    window_ps: int

    def __len__(self) -> int:
        return int(self.alice_indices.size)


@njit(cache=True)
def _match_greedy(ta, tb, window):  # pragma: no cover - exercised via wrapper
    na = ta.size
    nb = tb.size
    cap = min(na, nb)
    out_a = np.empty(cap, dtype=np.int64)
    out_b = np.empty(cap, dtype=np.int64)
    j = 0
    k = 0
    for i in range(na):
        t = ta[i]
        while j < nb and tb[j] < t - window:
            j += 1
        if j < nb and tb[j] <= t + window:
            out_a[k] = i
            out_b[k] = j
            k += 1
            j += 1
    return out_a[:k], out_b[:k]


def match_coincidences(alice_times_ps, bob_times_ps, window_ps: int = DEFAULT_WINDOW_PS) -> CoincidenceSet:
    """Greedy first-come pairing of two sorted timestamp streams.

    Scanning Alice's records in time order, each pairs with the earliest
    still-unmatched Bob record within +/- window (closed interval); every
    record is used at most once.
    """
    ta = np.ascontiguousarray(alice_times_ps, dtype=np.int64)
    tb = np.ascontiguousarray(bob_times_ps, dtype=np.int64)
    if window_ps <= 0:
        raise InputError(f"window must be positive, got {window_ps}")
    if ta.size > 1 and np.any(np.diff(ta) < 0):
        raise InputError("alice stream is not sorted by timestamp")
    if tb.size > 1 and np.any(np.diff(tb) < 0):
        raise InputError("bob stream is not sorted by timestamp")
    ia, ib = _match_greedy(ta, tb, np.int64(window_ps))
    return CoincidenceSet(ia, ib, tb[ib] - ta[ia], int(window_ps))


def match_coincidences_oracle(alice_times_ps, bob_times_ps, window_ps: int) -> CoincidenceSet:
    """Exhaustive per-record version of the same greedy rule, for cross-checking.

    Re-derives the candidate window for every Alice record and scans it from
    the start for the earliest unused Bob record; no shared scan state with the
    production two-pointer implementation.
    """
    import bisect

    ta = [int(t) for t in np.asarray(alice_times_ps, dtype=np.int64)]
    tb = [int(t) for t in np.asarray(bob_times_ps, dtype=np.int64)]
    used = [False] * len(tb)
    pa, pb = [], []
    for i, t in enumerate(ta):
        lo = bisect.bisect_left(tb, t - window_ps)
        for j in range(lo, len(tb)):
            if tb[j] > t + window_ps:
                break
            if not used[j]:
                used[j] = True
                pa.append(i)
                pb.append(j)
                break
    ia = np.array(pa, dtype=np.int64)
    ib = np.array(pb, dtype=np.int64)
    tb_arr = np.asarray(bob_times_ps, dtype=np.int64)
    ta_arr = np.asarray(alice_times_ps, dtype=np.int64)
    delta = tb_arr[ib] - ta_arr[ia] if ia.size else np.zeros(0, np.int64)
    return CoincidenceSet(ia, ib, delta, int(window_ps))


def coincidence_matrix(matches: CoincidenceSet, alice_channels, bob_channels) -> np.ndarray:
    """Tally matched pairs into the 4x4 channel-pair count matrix."""
    ca = np.asarray(alice_channels)
    cb = np.asarray(bob_channels)
    if matches.alice_indices.size:
        if matches.alice_indices.max() >= ca.size or matches.bob_indices.max() >= cb.size:
            raise InputError("coincidence set indexes past the end of a stream")
    ka = ca[matches.alice_indices].astype(np.int64)
    kb = cb[matches.bob_indices].astype(np.int64)
    counts = np.bincount(4 * ka + kb, minlength=16).reshape(4, 4)
    return counts


def sifted_count(matrix: np.ndarray) -> int:
    """Numerator of the sifted rate: all eight same-basis entries."""
    m = np.asarray(matrix)
    return int(sum(m[i, j] for i, j in CORRECT_PAIRS + ERROR_PAIRS))


def error_count(matrix: np.ndarray) -> int:
    m = np.asarray(matrix)
    return int(sum(m[i, j] for i, j in ERROR_PAIRS))


def sifted_rate(matrix: np.ndarray, duration_s: float) -> float:
    """Same-basis coincidences per second; cross-basis entries are excluded."""
    if duration_s <= 0:
        raise InputError(f"duration must be positive, got {duration_s}")
    return sifted_count(matrix) / duration_s


def qber(matrix: np.ndarray) -> float:
    """Error fraction among same-basis coincidences."""
    total = sifted_count(matrix)
    if total <= 0:
        raise DegenerateDataError("no same-basis coincidences; QBER undefined")
    return error_count(matrix) / total


def matrix_to_csv(matrix: np.ndarray) -> str:
    """4x4 matrix as CSV with H,V,D,A row/column labels."""
    m = np.asarray(matrix)
    lines = ["," + ",".join(CHANNEL_LABELS)]
    for i, label in enumerate(CHANNEL_LABELS):
        lines.append(label + "," + ",".join(str(int(m[i, j])) for j in range(4)))
    return "\n".join(lines) + "\n"
