"""Monte-Carlo photon-pair emission and detection-timestamp simulation.

Two schemes are modeled:

* ``present`` / ``wdm_present``: two time-multiplexed entangled-pair sources
  share one emission stream; which source fired is an unbiased coin flip per
  pair and fixes the measurement basis at both parties (source 1 -> Z,
  source 2 -> X). ``wdm_present`` is the same statistics with the four spatial
  channels relabeled to wavelength channels; nothing else changes.
* ``conventional``: a single collected source (half the emission ring, hence
  half the pair flux) with a beam splitter at each party choosing the basis,
  transmitted -> Z with probability ``bs_transmittance``, else X, plus an
  optional excess loss per photon.

All timestamps are integer picoseconds since session start.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from . import polmath

SCHEMES = ("present", "conventional", "wdm_present")

EPS1, EPS2, SINGLE = 0, 1, 2  # pair-event source tags
DARK = -1  # truth tag for dark counts

BASIS_Z, BASIS_X = 0, 1
BASIS_ANGLES = (0.0, 45.0)  # analyzer angle of the Z and X measurement
PARTY_ALICE, PARTY_BOB = 0, 1

# Alice analyzer angles for fringe scans, by fixed-basis label.
FIXED_BASIS_ANGLES = {"H": 0.0, "V": 90.0, "D": 45.0, "A": 135.0}

_TIMETAG_DTYPE = np.dtype([("party", "u1"), ("channel", "u1"), ("timestamp", "<u8")])


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class SourceConfig:
    pump_power_mw: float
    brightness_mhz_per_mw_nm: float = 0.04
    filter_bandwidth_nm: float = 3.0
    werner_p: float = 1.0
    scheme: str = "present"
    duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.pump_power_mw <= 0:
            raise ConfigError(f"pump power must be > 0, got {self.pump_power_mw}")
        if self.brightness_mhz_per_mw_nm <= 0:
            raise ConfigError(f"brightness must be > 0, got {self.brightness_mhz_per_mw_nm}")
        if self.duration_s <= 0:
            raise ConfigError(f"duration must be > 0, got {self.duration_s}")
        if self.filter_bandwidth_nm <= 0:
            raise ConfigError(f"filter bandwidth must be > 0, got {self.filter_bandwidth_nm}")
        if not 0.0 <= self.werner_p <= 1.0:
            raise ConfigError(f"werner_p must lie in [0, 1], got {self.werner_p}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    dark_rate_hz: float = 0.0  # per channel
    jitter_sigma_ps: float = 0.0
    dead_time_ps: int = 0
    bs_transmittance_alice: float = 0.5  # conventional scheme only
    bs_transmittance_bob: float = 0.5
    bs_excess_loss: float = 0.0

    def __post_init__(self):
        for name in ("efficiency", "bs_transmittance_alice", "bs_transmittance_bob", "bs_excess_loss"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.dark_rate_hz < 0 or self.jitter_sigma_ps < 0 or self.dead_time_ps < 0:
            raise ConfigError("dark_rate_hz, jitter_sigma_ps and dead_time_ps must be >= 0")


@dataclass(frozen=True)
class PairStream:
    """Emission events, columnar: times non-decreasing, one source tag each."""

    times_ps: np.ndarray  # int64
    source_tags: np.ndarray  # uint8: EPS1 / EPS2 / SINGLE

    def __len__(self) -> int:
        return int(self.times_ps.size)


@dataclass(frozen=True)
class DetectionStream:
    """Detector clicks of one party, sorted by timestamp.

    channel: 0=H, 1=V, 2=D, 3=A (basis = channel >> 1, port bit = channel & 1).
    truth_tags holds the originating pair index, or DARK; it is simulation
    ground truth and is never exported to protocol-facing files.
    """

    party: int
    times_ps: np.ndarray  # int64
    channels: np.ndarray  # uint8
    truth_tags: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return int(self.times_ps.size)

    @property
    def bases(self) -> np.ndarray:
        return (self.channels >> 1).astype(np.uint8)

    @property
    def bits(self) -> np.ndarray:
        return (self.channels & 1).astype(np.uint8)


def pair_rate_hz(cfg: SourceConfig) -> float:
    """Detected-pair rate of the collected stream.

    The emission ring supplies R = brightness * pump * bandwidth; the present
    scheme collects all of it (split over the two sources by the coin flip),
    the conventional scheme collects a single source, i.e. half.
    """
    r = cfg.brightness_mhz_per_mw_nm * 1e6 * cfg.pump_power_mw * cfg.filter_bandwidth_nm
    if cfg.scheme == "conventional":
        return r / 2.0
    return r


def _rng(cfg: SourceConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed & 0xFFFFFFFFFFFFFFFF, stage)))


def simulate_pairs(cfg: SourceConfig) -> PairStream:
    """Homogeneous-Poisson pair emission; deterministic given cfg.seed."""
    rng = _rng(cfg, 0)
    duration_ps = int(round(cfg.duration_s * 1e12))
    n = rng.poisson(pair_rate_hz(cfg) * cfg.duration_s)
    times = np.sort(rng.integers(0, duration_ps, size=n, dtype=np.int64))
    if cfg.scheme == "conventional":
        tags = np.full(n, SINGLE, dtype=np.uint8)
    else:
        tags = rng.integers(0, 2, size=n, dtype=np.uint8)  # fair EPS1/EPS2 draw
    return PairStream(times, tags)


def _joint_cdf_table(werner_p: float) -> np.ndarray:
    """cdf[basis_a, basis_b] of the four port outcomes (tt, tr, rt, rr)."""
    rho = polmath.werner_state(werner_p)
    table = np.empty((2, 2, 4))
    for ba in (BASIS_Z, BASIS_X):
        for bb in (BASIS_Z, BASIS_X):
            table[ba, bb] = polmath.joint_outcome_distribution(
                rho, BASIS_ANGLES[ba], BASIS_ANGLES[bb]
            )
    return np.cumsum(table, axis=-1)


@njit(cache=True)
def _dead_time_keep(times, channels, min_gap):  # pragma: no cover - via wrapper
    n = times.size
    keep = np.ones(n, dtype=np.bool_)
    last = np.full(4, np.int64(-(1 << 62)))
    for i in range(n):
        c = channels[i]
        if times[i] - last[c] < min_gap:
            keep[i] = False
        else:
            last[c] = times[i]
    return keep


def _finalize_stream(party, times, channels, truth, dead_time_ps, duration_ps):
    inside = (times >= 0) & (times < duration_ps)
    times, channels, truth = times[inside], channels[inside], truth[inside]
    order = np.argsort(times, kind="stable")
    times, channels, truth = times[order], channels[order], truth[order]
    # min gap of 1 ps keeps per-channel timestamps strictly increasing even
    # with dead_time_ps == 0 (1 ps timetag resolution)
    keep = _dead_time_keep(times, channels, np.int64(max(int(dead_time_ps), 1)))
    return DetectionStream(party, times[keep], channels[keep], truth[keep])


def detect(pairs: PairStream, cfg: SourceConfig, det: DetectorConfig) -> tuple[DetectionStream, DetectionStream]:
    """Measurement and detection chain for one session.

    Per pair: the scheme fixes or draws each party's basis, the joint output
    ports are sampled from the Werner-state projection probabilities at the
    party analyzers, and each photon independently survives the detector
    efficiency (plus beam-splitter excess loss in the conventional scheme).
    Clicks get Gaussian timing jitter, then per-channel dead-time filtering;
    independent dark counts are merged in per channel before the filter.
    """
    times = np.asarray(pairs.times_ps, dtype=np.int64)
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise InputError("pair stream must be sorted by emission time")
    n = times.size
    tags = np.asarray(pairs.source_tags, dtype=np.uint8)
    duration_ps = int(round(cfg.duration_s * 1e12))

    rng = _rng(cfg, 1)
    if cfg.scheme == "conventional":
        basis_a = (rng.random(n) >= det.bs_transmittance_alice).astype(np.uint8)
        basis_b = (rng.random(n) >= det.bs_transmittance_bob).astype(np.uint8)
        surv_a = rng.random(n) >= det.bs_excess_loss
        surv_b = rng.random(n) >= det.bs_excess_loss
    else:
        basis_a = tags
        basis_b = tags
        surv_a = np.ones(n, dtype=bool)
        surv_b = np.ones(n, dtype=bool)

    cdf = _joint_cdf_table(cfg.werner_p)[basis_a, basis_b]
    outcome = (rng.random(n)[:, None] > cdf).sum(axis=1)
    port_a = (outcome >> 1).astype(np.uint8)
    port_b = (outcome & 1).astype(np.uint8)

    if det.efficiency < 1.0:
        surv_a &= rng.random(n) < det.efficiency
        surv_b &= rng.random(n) < det.efficiency

    streams = []
    for party, surv, basis, port in (
        (PARTY_ALICE, surv_a, basis_a, port_a),
        (PARTY_BOB, surv_b, basis_b, port_b),
    ):
        idx = np.flatnonzero(surv)
        t = times[idx]
        if det.jitter_sigma_ps > 0:
            t = t + np.rint(rng.normal(0.0, det.jitter_sigma_ps, idx.size)).astype(np.int64)
        channels = (basis[idx] * 2 + port[idx]).astype(np.uint8)
        truth = idx.astype(np.int64)
        if det.dark_rate_hz > 0:
            dark_t, dark_c = _dark_counts(rng, det.dark_rate_hz, cfg.duration_s, duration_ps)
            t = np.concatenate([t, dark_t])
            channels = np.concatenate([channels, dark_c])
            truth = np.concatenate([truth, np.full(dark_t.size, DARK, dtype=np.int64)])
        streams.append(_finalize_stream(party, t, channels, truth, det.dead_time_ps, duration_ps))
    return streams[0], streams[1]


def _dark_counts(rng, rate_hz, duration_s, duration_ps):
    counts = rng.poisson(rate_hz * duration_s, size=4)
    total = int(counts.sum())
    t = rng.integers(0, duration_ps, size=total, dtype=np.int64)
    c = np.repeat(np.arange(4, dtype=np.uint8), counts)
    return t, c


def run_session(cfg: SourceConfig, det: DetectorConfig) -> tuple[DetectionStream, DetectionStream]:
    """simulate_pairs + detect in one call."""
    return detect(simulate_pairs(cfg), cfg, det)


def _coincidence_count(rng, mean_pairs: float, p_tt: float, efficiency: float) -> int:
    n = rng.poisson(mean_pairs)
    p = p_tt * efficiency * efficiency
    return int(rng.binomial(n, min(max(p, 0.0), 1.0))) if n > 0 else 0


def fringe_scan(
    cfg: SourceConfig,
    det: DetectorConfig,
    fixed_basis: str,
    hwp_angles_deg: Sequence[float],
    dwell_s: float,
) -> polmath.FringeScan:
    """Transmitted-transmitted coincidences vs Bob's HWP angle.

    Alice's analyzer sits at the fixed-basis angle; Bob's analyzer tracks
    2 x HWP angle. One detection session of ``dwell_s`` per point.
    """
    if fixed_basis not in FIXED_BASIS_ANGLES:
        raise InputError(f"fixed_basis must be one of {tuple(FIXED_BASIS_ANGLES)}, got {fixed_basis!r}")
    hwp_angles_deg = list(hwp_angles_deg)
    if not hwp_angles_deg:
        raise InputError("empty HWP angle list")
    rho = polmath.werner_state(cfg.werner_p)
    alpha = FIXED_BASIS_ANGLES[fixed_basis]
    rng = _rng(cfg, 2)
    mean_pairs = pair_rate_hz(cfg) * dwell_s
    samples = []
    for hwp in hwp_angles_deg:
        p_tt = polmath.joint_outcome_distribution(rho, alpha, 2.0 * hwp)[0]
        samples.append((float(hwp), float(_coincidence_count(rng, mean_pairs, p_tt, det.efficiency))))
    return polmath.FringeScan(tuple(samples), fixed_basis)


def chsh_scan(
    cfg: SourceConfig,
    det: DetectorConfig,
    dwell_s: float,
    settings: Sequence[float] = polmath.CHSH_SETTINGS,
) -> dict[tuple[float, float], int]:
    """Transmitted-transmitted counts at the 16 CHSH analyzer combinations."""
    rho = polmath.werner_state(cfg.werner_p)
    rng = _rng(cfg, 3)
    mean_pairs = pair_rate_hz(cfg) * dwell_s
    counts = {}
    for alpha, beta in polmath.chsh_setting_angles(settings):
        p_tt = polmath.joint_outcome_distribution(rho, alpha, beta)[0]
        counts[(alpha, beta)] = _coincidence_count(rng, mean_pairs, p_tt, det.efficiency)
    return counts


def projective_sample(cfg: SourceConfig, projector_pair: tuple[str, str], dwell_s: float) -> int:
    """Poisson count for one tomography projector pair (ideal sampler).

    Mean = dwell x pair rate x Tr[rho Pi_a x Pi_b]; the circular projections
    R and L are available here even though the detection chain has no
    quarter-wave plates.
    """
    la, lb = projector_pair
    states = polmath.TOMOGRAPHY_EIGENSTATES
    if la not in states or lb not in states:
        raise InputError(f"unknown projector pair ({la!r}, {lb!r})")
    prob = polmath.projection_probability(polmath.werner_state(cfg.werner_p), la, lb)
    rng = _rng(cfg, 100 + 6 * states.index(la) + states.index(lb))
    return int(rng.poisson(pair_rate_hz(cfg) * dwell_s * prob))


def tomography_sample(cfg: SourceConfig, dwell_s: float) -> dict[tuple[str, str], int]:
    """Counts for all 36 tomography settings."""
    return {pair: projective_sample(cfg, pair, dwell_s) for pair in polmath.tomography_settings()}


def write_timetags(path, alice: DetectionStream, bob: DetectionStream) -> None:
    """Binary timetag export: little-endian (u8 party, u8 channel, u64 ps) records.

    Both streams are merged in timestamp order. Truth tags are not written.
    """
    n = len(alice) + len(bob)
    rec = np.empty(n, dtype=_TIMETAG_DTYPE)
    rec["party"] = np.concatenate([np.zeros(len(alice), np.uint8), np.ones(len(bob), np.uint8)])
    rec["channel"] = np.concatenate([alice.channels, bob.channels])
    rec["timestamp"] = np.concatenate([alice.times_ps, bob.times_ps]).astype(np.uint64)
    rec = rec[np.argsort(rec["timestamp"], kind="stable")]
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def read_timetags(path) -> tuple[DetectionStream, DetectionStream]:
    with open(path, "rb") as fh:
        rec = np.frombuffer(fh.read(), dtype=_TIMETAG_DTYPE)
    out = []
    for party in (PARTY_ALICE, PARTY_BOB):
        sel = rec[rec["party"] == party]
        out.append(
            DetectionStream(
                party,
                sel["timestamp"].astype(np.int64),
                sel["channel"].copy(),
                np.full(sel.size, DARK, dtype=np.int64),
            )
        )
    return out[0], out[1]


def write_timetags_csv(path, alice: DetectionStream, bob: DetectionStream) -> None:
    """Debug CSV export: party,channel,timestamp_ps."""
    buf = io.StringIO()
    buf.write("party,channel,timestamp_ps\n")
    for party, stream in ((0, alice), (1, bob)):
        for c, t in zip(stream.channels, stream.times_ps):
            buf.write(f"{party},{int(c)},{int(t)}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def ideal_detectors() -> DetectorConfig:
    return DetectorConfig()


def paper_like_detectors() -> DetectorConfig:
    """Detector/BS parameters fitted to approach the reported imbalances.

    The BS transmittance 0.533 reproduces a 1.3:1 Z:X coincidence imbalance
    (T^2/(1-T)^2 = 1.30); the 10% excess loss pushes the scheme rate ratio
    above the ideal 4x. Efficiency, darks, jitter and dead time are typical
    SPCM-class values, not reported measurements.
    """
    return DetectorConfig(
        efficiency=0.6,
        dark_rate_hz=250.0,
        jitter_sigma_ps=150.0,
        dead_time_ps=25_000,
        bs_transmittance_alice=0.533,
        bs_transmittance_bob=0.533,
        bs_excess_loss=0.10,
    )


def with_scheme(cfg: SourceConfig, scheme: str) -> SourceConfig:
    return replace(cfg, scheme=scheme)
