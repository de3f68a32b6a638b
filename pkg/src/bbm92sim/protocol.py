"""BBM92 actor state machines: timetag exchange, sifting, QBER estimation,
security check, reconciliation and privacy amplification over an explicit
classical message channel.

Coincidence identification is centralized at Alice: Bob announces
(index, timestamp, basis) for every detection, Alice matches against her own
records and replies with the matched, same-basis index pairs. Ports and key
bits never appear in basis announcements; key-correlated payloads exist only
in QBER_SAMPLE_REVEAL and the EC parity messages.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import coinc, postproc, wire
from ._bits import pack_bits_b64, unpack_bits_b64
from .sourcesim import DetectionStream

SQRT8 = math.sqrt(8.0)

QBER_THRESHOLD_DEFAULT = 0.11


class InputError(ValueError):
    pass


class ProtocolViolation(wire.ProtocolViolation):
    pass


@dataclass(frozen=True)
class SessionParams:
    window_ps: int = 1000
    sample_fraction: float = 0.1
    qber_threshold: float = QBER_THRESHOLD_DEFAULT
    margin_bits: int = 128
    rate_formula: str = "leak_actual"
    session_id: int = 1
    sample_seed: int = 0xBB92
    ec_min_qber: float = 0.01  # cascade block sizing floor when Q_est ~ 0

    def __post_init__(self):
        if self.window_ps <= 0:
            raise InputError("window_ps must be positive")
        if not 0.0 < self.sample_fraction < 1.0:
            raise InputError("sample_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class SiftedKey:
    """Per-party sifted key: bit values, basis tags, and local record indices."""

    bits: np.ndarray
    bases: np.ndarray
    origin_indices: np.ndarray

    def __post_init__(self):
        if not (self.bits.size == self.bases.size == self.origin_indices.size):
            raise InputError("sifted key field lengths differ")

    def __len__(self) -> int:
        return int(self.bits.size)


@dataclass(frozen=True)
class SecurityVerdict:
    proceed: bool
    s_estimate: float
    v_estimate: float


@dataclass
class SessionReport:
    raw_coincidences: int = 0
    sifted_bits: int = 0
    qber_estimate: float = 0.0
    qber_sifted_full: Optional[float] = None
    aborted: bool = False
    abort_reason: Optional[str] = None
    basis_balance: tuple[int, int] = (0, 0)
    leak_ec: int = 0
    final_key_bits: int = 0
    s_estimate: float = 0.0
    v_estimate: float = 0.0


@dataclass
class ActorResult:
    role: str
    final_key: Optional[np.ndarray]
    sifted: Optional[SiftedKey]
    report: SessionReport


def sift(stream: DetectionStream, indices) -> SiftedKey:
    """Sifted key from one party's stream and the matched same-basis indices.

    Bit encoding: transmitted port (H or D) -> 0, reflected port (V or A) -> 1.
    Indices must be in timestamp order and free of duplicates.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(stream)):
        raise InputError("sift index out of range")
    if np.unique(idx).size != idx.size:
        raise ProtocolViolation("duplicate indices in match result")
    return SiftedKey(stream.bits[idx], stream.bases[idx], idx)


def sample_indices(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = math.ceil(fraction * n)
    if k > n:
        raise InputError(f"sample of {k} exceeds key length {n}")
    return np.sort(rng.choice(n, size=k, replace=False))


def estimate_qber_sample(key_a, key_b, fraction: float, seed: int) -> tuple[float, np.ndarray]:
    """Uniform random-sample QBER estimate; returns (Q_est, disclosed indices).

    The caller removes the disclosed positions from both keys (np.delete).
    """
    a = np.asarray(key_a)
    b = np.asarray(key_b)
    if a.size != b.size:
        raise InputError("keys differ in length")
    if not 0.0 < fraction < 1.0:
        raise InputError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF, 0x5A)))
    idx = sample_indices(a.size, fraction, rng)
    if idx.size == 0:
        raise InputError("empty sample")
    q = float(np.mean(a[idx] != b[idx]))
    return q, idx


def security_check(q_est: float, threshold: float = QBER_THRESHOLD_DEFAULT) -> SecurityVerdict:
    """V = 1 - 2Q, S = 2 sqrt(2) (1 - 2Q); abort above the QBER bound or at S <= 2.

    The threshold is inclusive: Q_est == threshold still proceeds.
    """
    if not 0.0 <= q_est <= 1.0:
        raise InputError(f"Q_est must lie in [0, 1], got {q_est}")
    v = 1.0 - 2.0 * q_est
    s = SQRT8 * v
    return SecurityVerdict(proceed=(q_est <= threshold and s > 2.0), s_estimate=s, v_estimate=v)


def _clamp_ec_qber(q_est: float, params: SessionParams) -> float:
    return min(0.11, max(q_est, params.ec_min_qber))


def _abort(channel: wire.ActorChannel, report: SessionReport, reason: str, **info) -> None:
    report.aborted = True
    report.abort_reason = reason
    channel.send(wire.ABORT, reason=reason, **info)


def _consume_abort(channel: wire.ActorChannel) -> None:
    """Await the peer's terminal ABORT and raise SessionAborted with its reason."""
    msg_type, payload = channel.recv()
    if msg_type != wire.ABORT:
        raise ProtocolViolation(f"expected ABORT after failure verdict, got {msg_type}")
    raise wire.SessionAborted(
        payload.get("reason", "unspecified"),
        **{k: v for k, v in payload.items() if k != "reason"},
    )


def alice_actor(channel: wire.ActorChannel, stream: DetectionStream, params: SessionParams) -> ActorResult:
    report = SessionReport()
    channel.send(
        wire.SESSION_INIT,
        window_ps=params.window_ps,
        sample_fraction=params.sample_fraction,
        qber_threshold=params.qber_threshold,
        margin_bits=params.margin_bits,
        rate_formula=params.rate_formula,
    )

    _, tags = channel.expect(wire.TIMETAGS)
    bob_times = np.asarray(tags["timestamps_ps"], dtype=np.int64)
    bob_bases = unpack_bits_b64(tags["bases"], int(tags["count"]))

    matches = coinc.match_coincidences(stream.times_ps, bob_times, params.window_ps)
    report.raw_coincidences = len(matches)
    same = stream.bases[matches.alice_indices] == bob_bases[matches.bob_indices]
    my_idx = matches.alice_indices[same]
    bob_idx = matches.bob_indices[same]
    channel.send(wire.MATCH_RESULT, bob_indices=bob_idx, count=int(bob_idx.size))

    sifted = sift(stream, my_idx)
    report.sifted_bits = len(sifted)
    zc = int(np.count_nonzero(sifted.bases == 0))
    report.basis_balance = (zc, len(sifted) - zc)
    if len(sifted) == 0:
        _abort(channel, report, "INSUFFICIENT_SIFTED_BITS")
        return ActorResult("alice", None, sifted, report)

    rng = np.random.default_rng(
        np.random.SeedSequence((params.sample_seed & 0xFFFFFFFFFFFFFFFF, params.session_id, 0x5A))
    )
    idx = sample_indices(len(sifted), params.sample_fraction, rng)
    channel.send(wire.QBER_SAMPLE_REQUEST, indices=idx, count=int(idx.size))
    _, reveal = channel.expect(wire.QBER_SAMPLE_REVEAL)
    bob_sample = unpack_bits_b64(reveal["bits"], int(reveal["count"]))
    if bob_sample.size != idx.size:
        raise ProtocolViolation("sample reveal length mismatch")
    q_est = float(np.mean(sifted.bits[idx] != bob_sample)) if idx.size else 0.0
    key = np.delete(sifted.bits, idx)

    verdict = security_check(q_est, params.qber_threshold)
    report.qber_estimate = q_est
    report.s_estimate = verdict.s_estimate
    report.v_estimate = verdict.v_estimate
    channel.send(
        wire.SECURITY_VERDICT,
        qber=q_est,
        s_est=verdict.s_estimate,
        v_est=verdict.v_estimate,
        verdict="proceed" if verdict.proceed else "abort",
    )
    if not verdict.proceed:
        _abort(channel, report, "QBER_THRESHOLD", qber=q_est, s_est=verdict.s_estimate)
        return ActorResult("alice", None, sifted, report)

    try:
        rec = postproc.cascade_reconcile(
            channel, key, _clamp_ec_qber(q_est, params), initiator=True
        )
    except wire.ReconciliationFailed:
        _abort(channel, report, "RECONCILIATION_FAILED")
        return ActorResult("alice", None, sifted, report)
    report.leak_ec = rec.leak_bits

    n = key.size
    length = postproc.final_key_length(
        n, q_est, rec.leak_bits, params.margin_bits, params.rate_formula
    )
    report.final_key_bits = length
    pa_rng = np.random.default_rng(
        np.random.SeedSequence((params.sample_seed & 0xFFFFFFFFFFFFFFFF, params.session_id, 0xFA))
    )
    seed = postproc.random_toeplitz_seed(n, length, pa_rng) if length > 0 else None
    channel.send(
        wire.PA_SEED,
        n=n,
        l=length,
        seed=pack_bits_b64(seed.bits) if seed else "",
        count=(n + length - 1) if length > 0 else 0,
    )
    final = postproc.toeplitz_hash(key, seed) if seed else np.zeros(0, dtype=np.uint8)
    return ActorResult("alice", final, sifted, report)


def bob_actor(channel: wire.ActorChannel, stream: DetectionStream, params: SessionParams) -> ActorResult:
    report = SessionReport()
    _, init = channel.expect(wire.SESSION_INIT)
    if int(init["window_ps"]) != params.window_ps:
        raise ProtocolViolation("window mismatch between actors")

    channel.send(
        wire.TIMETAGS,
        timestamps_ps=stream.times_ps,
        bases=pack_bits_b64(stream.bases),
        count=len(stream),
    )

    try:
        _, match = channel.expect(wire.MATCH_RESULT)
        my_idx = np.asarray(match["bob_indices"], dtype=np.int64)
        sifted = sift(stream, my_idx)
        report.sifted_bits = len(sifted)
        zc = int(np.count_nonzero(sifted.bases == 0))
        report.basis_balance = (zc, len(sifted) - zc)

        _, req = channel.expect(wire.QBER_SAMPLE_REQUEST)
        idx = np.asarray(req["indices"], dtype=np.int64)
        channel.send(
            wire.QBER_SAMPLE_REVEAL,
            bits=pack_bits_b64(sifted.bits[idx]) if idx.size else "",
            count=int(idx.size),
        )
        key = np.delete(sifted.bits, idx)

        _, verdict = channel.expect(wire.SECURITY_VERDICT)
        report.qber_estimate = float(verdict["qber"])
        report.s_estimate = float(verdict["s_est"])
        report.v_estimate = float(verdict["v_est"])
        if verdict["verdict"] != "proceed":
            _consume_abort(channel)

        try:
            rec = postproc.cascade_reconcile(
                channel, key, _clamp_ec_qber(report.qber_estimate, params), initiator=False
            )
        except wire.ReconciliationFailed:
            _consume_abort(channel)
        report.leak_ec = rec.leak_bits
        key = rec.corrected_key

        _, pa = channel.expect(wire.PA_SEED)
        length = int(pa["l"])
        report.final_key_bits = length
        if length > 0:
            seed = postproc.ToeplitzSeed(
                unpack_bits_b64(pa["seed"], int(pa["count"])), int(pa["n"]), length
            )
            final = postproc.toeplitz_hash(key, seed)
        else:
            final = np.zeros(0, dtype=np.uint8)
        return ActorResult("bob", final, sifted, report)
    except wire.SessionAborted as aborted:
        report.aborted = True
        report.abort_reason = aborted.reason
        return ActorResult("bob", None, None, report)


@dataclass
class SessionResult:
    alice_key: Optional[np.ndarray]
    bob_key: Optional[np.ndarray]
    report: SessionReport
    transcript: wire.Transcript
    alice_result: ActorResult = field(repr=False, default=None)
    bob_result: ActorResult = field(repr=False, default=None)


def run_session(
    alice_stream: DetectionStream,
    bob_stream: DetectionStream,
    params: SessionParams,
) -> SessionResult:
    """Execute the full two-actor exchange over an in-process channel.

    Both actors run concurrently in their own threads and communicate only
    through the recorded message channel; the returned report is Alice's view
    plus the full-key QBER computed offline from both sifted keys.
    """
    transcript = wire.Transcript()
    raw_a, raw_b = wire.channel_pair()
    ch_a = wire.ActorChannel(raw_a, params.session_id, "alice", transcript)
    ch_b = wire.ActorChannel(raw_b, params.session_id, "bob", transcript)

    results: dict[str, ActorResult] = {}
    errors: dict[str, BaseException] = {}

    def run(name, fn, chan, stream):
        try:
            results[name] = fn(chan, stream, params)
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            errors[name] = exc

    tb = threading.Thread(target=run, args=("bob", bob_actor, ch_b, bob_stream), daemon=True)
    tb.start()
    run("alice", alice_actor, ch_a, alice_stream)
    tb.join(timeout=300.0)
    if errors:
        raise next(iter(errors.values()))

    a, b = results["alice"], results["bob"]
    report = replace(a.report)
    if a.sifted is not None and b.sifted is not None and len(a.sifted) and len(a.sifted) == len(b.sifted):
        report.qber_sifted_full = float(np.mean(a.sifted.bits != b.sifted.bits))
    return SessionResult(a.final_key, b.final_key, report, transcript, a, b)


# --- transcript auditing -----------------------------------------------------

# Payload fields that carry packed bit arrays, by message type.
_BIT_FIELDS = {
    wire.TIMETAGS: ("bases",),
    wire.QBER_SAMPLE_REVEAL: ("bits",),
    wire.EC_PARITIES: ("parities",),
    wire.EC_PARITY_REPLY: ("bits",),
    wire.PA_SEED: ("seed",),
}

# Message types whose bit payloads are derived from key bits.
KEY_BIT_MESSAGE_TYPES = frozenset(
    {wire.QBER_SAMPLE_REVEAL, wire.EC_PARITIES, wire.EC_PARITY_REPLY, wire.EC_HASH_RESPONSE}
)


def transcript_bit_payloads(transcript: wire.Transcript) -> list[tuple[str, str]]:
    """(message type, field) for every bit-array payload found in a transcript."""
    found = []
    for _, msg in transcript.messages():
        payload = msg["payload"]
        for f in _BIT_FIELDS.get(msg["type"], ()):
            if payload.get(f):
                found.append((msg["type"], f))
        if msg["type"] == wire.EC_HASH_RESPONSE:
            found.append((msg["type"], "hash"))
    return found


def audit_ec_leak(transcript: wire.Transcript) -> int:
    """Count of parity bits placed on the channel, recomputed from the transcript."""
    total = 0
    for _, msg in transcript.messages(wire.EC_PARITIES, wire.EC_PARITY_REPLY):
        total += int(msg["payload"]["count"])
    return total


def sifting_discard_fraction(transcript: wire.Transcript) -> float:
    """Fraction of announced Bob records that did not survive sifting."""
    announced = matched = None
    for _, msg in transcript.messages(wire.TIMETAGS):
        announced = int(msg["payload"]["count"])
    for _, msg in transcript.messages(wire.MATCH_RESULT):
        matched = int(msg["payload"]["count"])
    if not announced:
        raise InputError("transcript has no TIMETAGS message")
    return 1.0 - (matched or 0) / announced
