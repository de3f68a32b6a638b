"""Post-processing: Cascade reconciliation, leakage accounting, privacy amplification.

Cascade runs interactively between an initiator (the reference side, whose key
is never modified and who answers parity queries) and a follower who locates
and flips his own erroneous bits. Four passes, block size doubling each pass,
a fresh shared-seed permutation per pass, binary search on odd-parity blocks,
and full back-tracking into earlier passes after every correction. Every
parity bit the initiator places on the channel is counted as leakage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import wire
from ._bits import as_bits, key_hash, clmul_bits, pack_bits_b64, unpack_bits_b64

CASCADE_PASSES = 4
CASCADE_RATE_CONSTANT = 0.73  # pass-1 block size k1 = ceil(0.73 / Q)


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ReconciliationResult:
    corrected_key: np.ndarray
    leak_bits: int
    passes: int
    verified: bool
    corrections: int = 0


@dataclass(frozen=True)
class ToeplitzSeed:
    """Seed bits defining a Toeplitz matrix T[i, j] = bits[i - j + n - 1]."""

    bits: np.ndarray
    n: int  # input length
    l: int  # output length

    def __post_init__(self):
        object.__setattr__(self, "bits", as_bits(self.bits))
        if self.l > self.n:
            raise InputError(f"output length {self.l} exceeds input length {self.n}")
        if self.bits.size != self.n + self.l - 1:
            raise InputError(
                f"seed needs n + l - 1 = {self.n + self.l - 1} bits, got {self.bits.size}"
            )


def random_toeplitz_seed(n: int, l: int, rng: np.random.Generator) -> ToeplitzSeed:
    return ToeplitzSeed(rng.integers(0, 2, n + l - 1, dtype=np.uint8), n, l)


def binary_entropy(q: float) -> float:
    """h2(q) = -q log2 q - (1-q) log2 (1-q), with h2(0) = h2(1) = 0."""
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise InputError(f"binary entropy argument must lie in [0, 1], got {q}")
    if q == 0.0 or q == 1.0:
        return 0.0
    return float(-q * math.log2(q) - (1.0 - q) * math.log2(1.0 - q))


def final_key_length(
    n: int,
    q_est: float,
    leak_bits: int,
    margin_bits: int = 128,
    rate_formula: str = "leak_actual",
) -> int:
    """Secure key length after privacy amplification (asymptotic accounting).

    ``leak_actual``: l = floor(n (1 - h2(Q))) - leak_bits - margin_bits.
    ``asymptotic_two_basis``: l = floor(n (1 - 2 h2(Q))) - margin_bits, the
    textbook rate that charges Shannon-limit reconciliation instead of the
    measured leakage. Both clamp at zero.
    """
    if n <= 0:
        raise InputError(f"key length must be positive, got {n}")
    if rate_formula == "leak_actual":
        l = math.floor(n * (1.0 - binary_entropy(q_est))) - int(leak_bits) - int(margin_bits)
    elif rate_formula == "asymptotic_two_basis":
        l = math.floor(n * (1.0 - 2.0 * binary_entropy(q_est))) - int(margin_bits)
    else:
        raise InputError(f"unknown rate formula {rate_formula!r}")
    return max(0, l)


def toeplitz_hash(key, seed: ToeplitzSeed) -> np.ndarray:
    """Multiply the key by the seed's Toeplitz matrix over GF(2), bit-exactly.

    output_i = XOR_j key_j * seed[i - j + n - 1]; evaluated as a carryless
    polynomial product, so it scales to megabit keys without the explicit
    matrix.
    """
    key = as_bits(key)
    if key.size != seed.n:
        raise InputError(f"key length {key.size} does not match seed n {seed.n}")
    if seed.l == 0:
        return np.zeros(0, dtype=np.uint8)
    prod = clmul_bits(key, seed.bits)
    return prod[seed.n - 1 : seed.n - 1 + seed.l].copy()


def toeplitz_hash_oracle(key, seed: ToeplitzSeed) -> np.ndarray:
    """Direct dense matrix-multiply evaluation, for cross-checking."""
    key = as_bits(key)
    t = np.empty((seed.l, seed.n), dtype=np.uint8)
    for i in range(seed.l):
        for j in range(seed.n):
            t[i, j] = seed.bits[i - j + seed.n - 1]
    return (t @ key.astype(np.int64)) % 2


def _pass_schedule(n: int, q_est: float) -> list[int]:
    k1 = max(1, math.ceil(CASCADE_RATE_CONSTANT / q_est))
    return [min(n, k1 * (1 << j)) for j in range(CASCADE_PASSES)]


def _pass_permutation(session_id: int, pass_index: int, n: int) -> np.ndarray:
    # Counter-based Philox keyed by (session id, pass): both actors derive the
    # same permutation without putting it on the wire.
    bg = np.random.Philox(np.random.SeedSequence((session_id & 0xFFFFFFFFFFFFFFFF, 0xCA5C, pass_index)))
    return np.random.Generator(bg).permutation(n)


def _block_starts(n: int, k: int) -> np.ndarray:
    return np.arange(0, n, k, dtype=np.int64)


def _check_q_est(q_est: float) -> float:
    q_est = float(q_est)
    if not 0.0 < q_est <= 0.11:
        raise InputError(f"cascade expects Q_est in (0, 0.11], got {q_est}")
    return q_est


def cascade_reconcile(
    channel,
    key,
    q_est: float,
    *,
    initiator: bool,
    session_id: int | None = None,
) -> ReconciliationResult:
    """Run one side of the Cascade exchange over an ActorChannel-like object.

    The initiator's key is the reference and is returned unchanged; the
    follower's key is corrected in place of its copy. Raises
    ReconciliationFailed if the final 64-bit hash comparison fails.
    """
    q_est = _check_q_est(q_est)
    key = as_bits(key).copy()
    sid = channel.session_id if session_id is None else session_id
    if initiator:
        return _cascade_initiator(channel, key, q_est, sid)
    return _cascade_follower(channel, key, q_est, sid)


def _cascade_initiator(channel, key, q_est, session_id) -> ReconciliationResult:
    n = key.size
    schedule = _pass_schedule(n, q_est)
    leak = 0
    prefix = {}  # pass -> prefix-xor of the permuted reference key
    while True:
        msg_type, payload = channel.expect(
            wire.EC_START,
            wire.EC_PARITIES_REQUEST,
            wire.EC_QUERY,
            wire.EC_DONE,
        )
        if msg_type == wire.EC_START:
            if payload["n"] != n or payload["schedule"] != list(schedule):
                raise wire.ProtocolViolation(
                    f"cascade parameter mismatch: peer {payload}, local n={n} schedule={schedule}"
                )
        elif msg_type == wire.EC_PARITIES_REQUEST:
            p = int(payload["pass"])
            perm = _pass_permutation(session_id, p, n)
            permuted = key[perm]
            prefix[p] = np.bitwise_xor.accumulate(permuted)
            starts = _block_starts(n, schedule[p])
            parities = np.bitwise_xor.reduceat(permuted, starts)
            leak += parities.size
            channel.send(wire.EC_PARITIES, **{"pass": p}, parities=pack_bits_b64(parities), count=int(parities.size))
        elif msg_type == wire.EC_QUERY:
            items = payload["items"]  # [(pass, lo, hi)], parity of permuted [lo, hi)
            bits = np.empty(len(items), dtype=np.uint8)
            for idx, (p, lo, hi) in enumerate(items):
                pre = prefix[int(p)]
                bits[idx] = pre[hi - 1] ^ (pre[lo - 1] if lo > 0 else 0)
            leak += len(items)
            channel.send(wire.EC_PARITY_REPLY, bits=pack_bits_b64(bits), count=len(items))
        else:  # EC_DONE
            break
    rng = np.random.default_rng(np.random.SeedSequence((session_id & 0xFFFFFFFFFFFFFFFF, 0x7A5)))
    hash_seed = int(rng.integers(0, 1 << 63, dtype=np.int64))
    channel.send(wire.EC_HASH_CHALLENGE, seed=hash_seed)
    _, payload = channel.expect(wire.EC_HASH_RESPONSE)
    ok = int(payload["hash"]) == key_hash(key, hash_seed)
    channel.send(wire.EC_VERIFY, ok=bool(ok))
    if not ok:
        raise wire.ReconciliationFailed("verification hash mismatch after 4 cascade passes")
    return ReconciliationResult(key, leak, CASCADE_PASSES, True, corrections=0)


class _FollowerState:
    """Pass bookkeeping on the corrector's side."""

    def __init__(self, key, schedule, session_id):
        self.key = key
        self.schedule = schedule
        self.session_id = session_id
        self.perms: dict[int, np.ndarray] = {}
        self.starts: dict[int, np.ndarray] = {}
        self.ref_parities: dict[int, np.ndarray] = {}

    def open_pass(self, p: int, ref_parities: np.ndarray) -> None:
        n = self.key.size
        self.perms[p] = _pass_permutation(self.session_id, p, n)
        self.starts[p] = _block_starts(n, self.schedule[p])
        self.ref_parities[p] = ref_parities

    def odd_blocks(self, p: int) -> np.ndarray:
        permuted = self.key[self.perms[p]]
        mine = np.bitwise_xor.reduceat(permuted, self.starts[p])
        return np.flatnonzero(mine ^ self.ref_parities[p])

    def block_bounds(self, p: int, block: int) -> tuple[int, int]:
        starts = self.starts[p]
        lo = int(starts[block])
        hi = int(starts[block + 1]) if block + 1 < starts.size else self.key.size
        return lo, hi


def _cascade_follower(channel, key, q_est, session_id) -> ReconciliationResult:
    n = key.size
    schedule = _pass_schedule(n, q_est)
    state = _FollowerState(key, schedule, session_id)
    leak = 0
    corrections = 0
    channel.send(wire.EC_START, n=n, schedule=list(schedule))

    for p in range(CASCADE_PASSES):
        channel.send(wire.EC_PARITIES_REQUEST, **{"pass": p})
        _, payload = channel.expect(wire.EC_PARITIES)
        count = int(payload["count"])
        leak += count
        state.open_pass(p, unpack_bits_b64(payload["parities"], count))

        while True:
            active_pass = next(
                (q for q in range(p + 1) if state.odd_blocks(q).size), None
            )
            if active_pass is None:
                break
            blocks = state.odd_blocks(active_pass)
            leak += _binary_search_batch(channel, state, active_pass, blocks)
            corrections += blocks.size

    channel.send(wire.EC_DONE)
    _, payload = channel.expect(wire.EC_HASH_CHALLENGE)
    channel.send(wire.EC_HASH_RESPONSE, hash=key_hash(state.key, int(payload["seed"])))
    _, payload = channel.expect(wire.EC_VERIFY)
    if not payload["ok"]:
        raise wire.ReconciliationFailed("verification hash mismatch after 4 cascade passes")
    return ReconciliationResult(state.key, leak, CASCADE_PASSES, True, corrections=corrections)


def _binary_search_batch(channel, state: _FollowerState, p: int, blocks: np.ndarray) -> int:
    """Parallel binary search on odd-parity blocks of one pass; returns parities disclosed.

    All blocks narrow one level per round trip: the reference side reveals the
    parity of each left half, the follower compares against his own and keeps
    the mismatching half. Flips are applied once every search reaches a single
    position; blocks of one pass are disjoint, so batched narrowing is safe.
    """
    perm = state.perms[p]
    permuted = state.key[perm]
    prefix = np.bitwise_xor.accumulate(permuted)

    def my_parity(lo: int, hi: int) -> int:
        return int(prefix[hi - 1] ^ (prefix[lo - 1] if lo > 0 else 0))

    intervals = [state.block_bounds(p, int(b)) for b in blocks]
    disclosed = 0
    while any(hi - lo > 1 for lo, hi in intervals):
        queries = []
        pending = []
        for idx, (lo, hi) in enumerate(intervals):
            if hi - lo <= 1:
                continue
            mid = (lo + hi) // 2
            queries.append((p, lo, mid))
            pending.append(idx)
        channel.send(wire.EC_QUERY, items=queries)
        _, payload = channel.expect(wire.EC_PARITY_REPLY)
        ref_bits = unpack_bits_b64(payload["bits"], int(payload["count"]))
        disclosed += len(queries)
        for bit, idx, (_, lo, mid) in zip(ref_bits, pending, queries):
            hi = intervals[idx][1]
            if my_parity(lo, mid) != int(bit):
                intervals[idx] = (lo, mid)
            else:
                intervals[idx] = (mid, hi)
    for lo, _hi in intervals:
        state.key[perm[lo]] ^= 1
    return disclosed


def reconcile_pair(
    key_a,
    key_b,
    q_est: float,
    session_id: int = 1,
) -> tuple[ReconciliationResult, ReconciliationResult]:
    """Run both cascade actors over an in-process channel pair (test harness)."""
    import threading

    ch_a, ch_b = wire.channel_pair()
    a = wire.ActorChannel(ch_a, session_id, "alice")
    b = wire.ActorChannel(ch_b, session_id, "bob")
    out: dict = {}
    err: dict = {}

    def run(name, chan, key, initiator):
        try:
            out[name] = cascade_reconcile(chan, key, q_est, initiator=initiator)
        except Exception as exc:  # noqa: BLE001 - re-raised below
            err[name] = exc

    ta = threading.Thread(target=run, args=("a", a, key_a, True))
    tb = threading.Thread(target=run, args=("b", b, key_b, False))
    ta.start()
    tb.start()
    ta.join()
    tb.join()
    if err:
        raise next(iter(err.values()))
    return out["a"], out["b"]
