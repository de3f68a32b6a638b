"""Experiment harness: configuration, sweeps, scheme comparison, characterization,
report/CSV emission and the command-line interface.

Subcommands: ``run`` (pump-power sweep through the full key pipeline),
``compare`` (present vs. conventional at sifting level), ``characterize``
(fringe visibilities, CHSH S, tomography fidelity), ``keys`` (end-to-end key
generation between two OS processes over TCP).

Exit codes: 0 success, 2 config error, 3 session abort, 4 reconciliation
failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import subprocess
import sys
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, coinc, polmath, postproc, protocol, sourcesim, wire
from ._bits import pack_key_bytes

CSV_SCHEMA_VERSION = "sweep-csv-v1"

PRESET_DIR = Path(__file__).parent / "presets"
PRESET_NAMES = ("ideal", "paper-like")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    schemes: tuple[str, ...] = ("present",)
    pump_start_mw: float = 1.0
    pump_stop_mw: float = 13.0
    pump_step_mw: float = 2.0
    duration_s: float = 0.05
    seed: int = 1
    brightness_mhz_per_mw_nm: float = 0.04
    filter_bandwidth_nm: float = 3.0
    werner_p: float = 1.0
    detector: sourcesim.DetectorConfig = field(default_factory=sourcesim.DetectorConfig)
    detector_preset: str = "ideal"
    window_ps: int = 1000
    sample_fraction: float = 0.1
    qber_threshold: float = 0.11
    margin_bits: int = 128
    rate_formula: str = "leak_actual"
    characterize_pump_mw: float = 3.0
    characterize_dwell_s: float = 0.111
    fringe_step_deg: float = 4.0
    out_dir: str = "."

    def __post_init__(self):
        if self.pump_step_mw <= 0:
            raise ConfigError("pump_step_mw must be > 0")
        if self.pump_start_mw > self.pump_stop_mw:
            raise ConfigError("pump_start_mw must be <= pump_stop_mw")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be > 0")
        for s in self.schemes:
            if s not in sourcesim.SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}")

    def pump_points_mw(self) -> list[float]:
        n = int(math.floor((self.pump_stop_mw - self.pump_start_mw) / self.pump_step_mw + 1e-9)) + 1
        return [self.pump_start_mw + i * self.pump_step_mw for i in range(n)]

    def source_config(self, pump_mw: float, scheme: str, run_seed: int, duration_s: float | None = None) -> sourcesim.SourceConfig:
        return sourcesim.SourceConfig(
            pump_power_mw=pump_mw,
            brightness_mhz_per_mw_nm=self.brightness_mhz_per_mw_nm,
            filter_bandwidth_nm=self.filter_bandwidth_nm,
            werner_p=self.werner_p,
            scheme=scheme,
            duration_s=self.duration_s if duration_s is None else duration_s,
            seed=run_seed,
        )

    def session_params(self, session_id: int) -> protocol.SessionParams:
        return protocol.SessionParams(
            window_ps=self.window_ps,
            sample_fraction=self.sample_fraction,
            qber_threshold=self.qber_threshold,
            margin_bits=self.margin_bits,
            rate_formula=self.rate_formula,
            session_id=session_id,
            sample_seed=self.seed,
        )

    def config_hash(self) -> str:
        text = repr(sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_seed_for(cfg: ExperimentConfig, scheme: str, pump_mw: float, tag: int = 0) -> int:
    ss = np.random.SeedSequence(
        (cfg.seed & 0xFFFFFFFFFFFFFFFF, sourcesim.SCHEMES.index(scheme), int(round(pump_mw * 1000)), tag)
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- configuration files ------------------------------------------------------


def _preset_path(name: str) -> Path:
    return PRESET_DIR / (name.replace("-", "_") + ".ini")


def load_config(config: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Load the INI config (a path or a built-in preset name) and apply overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if config is not None:
        path = Path(config)
        if not path.exists() and str(config) in PRESET_NAMES:
            path = _preset_path(str(config))
        if not path.exists():
            raise ConfigError(f"config file not found: {config}")
        parser.read(path)

    def get(section, key, conv, default):
        try:
            if parser.has_option(section, key):
                return conv(parser.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
        return default

    det_preset = get("detector", "preset", str, "ideal")
    if det_preset == "paper-like":
        det = sourcesim.paper_like_detectors()
    elif det_preset == "ideal":
        det = sourcesim.ideal_detectors()
    else:
        raise ConfigError(f"unknown detector preset {det_preset!r}")
    det = sourcesim.DetectorConfig(
        efficiency=get("detector", "efficiency", float, det.efficiency),
        dark_rate_hz=get("detector", "dark_rate_hz", float, det.dark_rate_hz),
        jitter_sigma_ps=get("detector", "jitter_sigma_ps", float, det.jitter_sigma_ps),
        dead_time_ps=get("detector", "dead_time_ps", int, det.dead_time_ps),
        bs_transmittance_alice=get("detector", "bs_transmittance_alice", float, det.bs_transmittance_alice),
        bs_transmittance_bob=get("detector", "bs_transmittance_bob", float, det.bs_transmittance_bob),
        bs_excess_loss=get("detector", "bs_excess_loss", float, det.bs_excess_loss),
    )

    schemes = tuple(
        s.strip() for s in get("source", "schemes", str, "present").split(",") if s.strip()
    )
    try:
        cfg = ExperimentConfig(
            schemes=schemes,
            pump_start_mw=get("sweep", "pump_start_mw", float, 1.0),
            pump_stop_mw=get("sweep", "pump_stop_mw", float, 13.0),
            pump_step_mw=get("sweep", "pump_step_mw", float, 2.0),
            duration_s=get("sweep", "duration_s", float, 0.05),
            seed=get("sweep", "seed", int, 1),
            brightness_mhz_per_mw_nm=get("source", "brightness_mhz_per_mw_nm", float, 0.04),
            filter_bandwidth_nm=get("source", "filter_bandwidth_nm", float, 3.0),
            werner_p=get("source", "werner_p", float, 1.0),
            detector=det,
            detector_preset=det_preset,
            window_ps=get("protocol", "window_ps", int, 1000),
            sample_fraction=get("protocol", "sample_fraction", float, 0.1),
            qber_threshold=get("protocol", "qber_threshold", float, 0.11),
            margin_bits=get("protocol", "margin_bits", int, 128),
            rate_formula=get("protocol", "rate_formula", str, "leak_actual"),
            characterize_pump_mw=get("characterize", "pump_mw", float, 3.0),
            characterize_dwell_s=get("characterize", "dwell_s", float, 0.111),
            fringe_step_deg=get("characterize", "fringe_step_deg", float, 4.0),
        )
    except (sourcesim.ConfigError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    if overrides:
        try:
            cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
        except (sourcesim.ConfigError, ConfigError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def write_config(cfg: ExperimentConfig, path: Path) -> None:
    """Write the effective configuration back out (used to hand off to a peer process)."""
    p = configparser.ConfigParser()
    p["source"] = {
        "schemes": ",".join(cfg.schemes),
        "brightness_mhz_per_mw_nm": repr(cfg.brightness_mhz_per_mw_nm),
        "filter_bandwidth_nm": repr(cfg.filter_bandwidth_nm),
        "werner_p": repr(cfg.werner_p),
    }
    d = cfg.detector
    p["detector"] = {
        "preset": cfg.detector_preset,
        "efficiency": repr(d.efficiency),
        "dark_rate_hz": repr(d.dark_rate_hz),
        "jitter_sigma_ps": repr(d.jitter_sigma_ps),
        "dead_time_ps": str(d.dead_time_ps),
        "bs_transmittance_alice": repr(d.bs_transmittance_alice),
        "bs_transmittance_bob": repr(d.bs_transmittance_bob),
        "bs_excess_loss": repr(d.bs_excess_loss),
    }
    p["protocol"] = {
        "window_ps": str(cfg.window_ps),
        "sample_fraction": repr(cfg.sample_fraction),
        "qber_threshold": repr(cfg.qber_threshold),
        "margin_bits": str(cfg.margin_bits),
        "rate_formula": cfg.rate_formula,
    }
    p["sweep"] = {
        "pump_start_mw": repr(cfg.pump_start_mw),
        "pump_stop_mw": repr(cfg.pump_stop_mw),
        "pump_step_mw": repr(cfg.pump_step_mw),
        "duration_s": repr(cfg.duration_s),
        "seed": str(cfg.seed),
    }
    p["characterize"] = {
        "pump_mw": repr(cfg.characterize_pump_mw),
        "dwell_s": repr(cfg.characterize_dwell_s),
        "fringe_step_deg": repr(cfg.fringe_step_deg),
    }
    with open(path, "w", encoding="utf-8") as fh:
        p.write(fh)


# --- fits ----------------------------------------------------------------------


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Ordinary least squares y = slope*x + intercept; returns (slope, intercept, stderr).

    stderr is the standard error of the slope (0 for an exact fit).
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 3:
        raise InputError(f"linear fit needs >= 3 points, got {x.size}")
    if np.unique(x).size < 2:
        raise InputError("linear fit needs >= 2 distinct x values")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    resid = y - (slope * x + intercept)
    if x.size > 2:
        var = float(np.sum(resid**2)) / (x.size - 2)
        stderr = math.sqrt(max(var, 0.0) / sxx)
    else:
        stderr = 0.0
    return slope, float(intercept), stderr


# --- sweeps ----------------------------------------------------------------------


@dataclass
class SweepRow:
    pump_mw: float
    scheme: str
    seed: int
    duration_s: float
    raw_coincidences: int
    sifted_bits: int
    r_sift_bps: float
    qber: float
    v_avg: float
    s_est: float
    balance_z: int
    balance_x: int
    leak_ec_bits: int
    final_key_bits: int
    aborted: bool
    abort_reason: str


SWEEP_COLUMNS = [f.strip() for f in (
    "pump_mw,scheme,seed,duration_s,raw_coincidences,sifted_bits,r_sift_bps,"
    "qber,v_avg,s_est,balance_z,balance_x,leak_ec_bits,final_key_bits,aborted,abort_reason"
).split(",")]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def rows_to_csv(rows: Sequence[SweepRow], cfg: ExperimentConfig) -> str:
    header = (
        f"# bbm92sim {CSV_SCHEMA_VERSION} tool={__version__} config_sha256={cfg.config_hash()}\n"
    )
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        d = asdict(row)
        lines.append(",".join(_fmt(d[c]) for c in SWEEP_COLUMNS))
    return header + "\n".join(lines) + "\n"


def run_point(cfg: ExperimentConfig, pump_mw: float, scheme: str) -> SweepRow:
    """One full pipeline run: simulate, detect, protocol session, post-processing."""
    run_seed = run_seed_for(cfg, scheme, pump_mw)
    scfg = cfg.source_config(pump_mw, scheme, run_seed)
    alice, bob = sourcesim.run_session(scfg, cfg.detector)
    params = cfg.session_params(session_id=run_seed & 0x7FFFFFFFFFFFFFFF)
    result = protocol.run_session(alice, bob, params)
    r = result.report
    qber_full = r.qber_sifted_full if r.qber_sifted_full is not None else r.qber_estimate
    return SweepRow(
        pump_mw=pump_mw,
        scheme=scheme,
        seed=run_seed,
        duration_s=cfg.duration_s,
        raw_coincidences=r.raw_coincidences,
        sifted_bits=r.sifted_bits,
        r_sift_bps=r.sifted_bits / cfg.duration_s,
        qber=qber_full,
        v_avg=1.0 - 2.0 * qber_full,
        s_est=r.s_estimate,
        balance_z=r.basis_balance[0],
        balance_x=r.basis_balance[1],
        leak_ec_bits=r.leak_ec,
        final_key_bits=r.final_key_bits,
        aborted=r.aborted,
        abort_reason=r.abort_reason or "",
    )


def run_experiment(cfg: ExperimentConfig) -> list[SweepRow]:
    """Full sweep: one protocol pipeline run per (pump, scheme); deterministic per seed."""
    rows = []
    for scheme in cfg.schemes:
        for pump in cfg.pump_points_mw():
            rows.append(run_point(cfg, pump, scheme))
    return rows


# --- scheme comparison -----------------------------------------------------------


@dataclass
class SiftingStats:
    pump_mw: float
    scheme: str
    pairs: int
    sifted: int
    r_sift_bps: float
    qber: float
    balance_z: int
    balance_x: int


@dataclass
class CompareReport:
    rows: list[SiftingStats]
    pump_points_mw: list[float]
    rate_ratio_by_pump: list[float]
    mean_rate_ratio: float
    qber_difference_by_pump: list[float]
    balance_ratio: dict[str, float]
    slope_bps_per_mw: dict[str, tuple[float, float]]  # scheme -> (slope, stderr)


def sifting_stats(cfg: ExperimentConfig, pump_mw: float, scheme: str) -> SiftingStats:
    """Sifting-level statistics for one run (no protocol/EC; used by compare)."""
    run_seed = run_seed_for(cfg, scheme, pump_mw)
    scfg = cfg.source_config(pump_mw, scheme, run_seed)
    pairs = sourcesim.simulate_pairs(scfg)
    alice, bob = sourcesim.detect(pairs, scfg, cfg.detector)
    matches = coinc.match_coincidences(alice.times_ps, bob.times_ps, cfg.window_ps)
    matrix = coinc.coincidence_matrix(matches, alice.channels, bob.channels)
    sifted = coinc.sifted_count(matrix)
    q = coinc.qber(matrix) if sifted else 0.0
    bz = int(matrix[0, 0] + matrix[0, 1] + matrix[1, 0] + matrix[1, 1])
    bx = int(matrix[2, 2] + matrix[2, 3] + matrix[3, 2] + matrix[3, 3])
    return SiftingStats(
        pump_mw=pump_mw,
        scheme=scheme,
        pairs=len(pairs),
        sifted=sifted,
        r_sift_bps=sifted / cfg.duration_s,
        qber=q,
        balance_z=bz,
        balance_x=bx,
    )


def compare_schemes(cfg: ExperimentConfig) -> CompareReport:
    """Present-vs-conventional comparison over the pump sweep.

    Emits per-pump rate ratios, QBER differences, Z:X balance ratios and the
    rate-vs-pump linear-fit slopes with standard errors.
    """
    if len(set(cfg.schemes)) < 2:
        raise InputError("compare_schemes needs two schemes in the config")
    schemes = list(dict.fromkeys(cfg.schemes))[:2]
    pumps = cfg.pump_points_mw()
    rows = [sifting_stats(cfg, pump, scheme) for scheme in schemes for pump in pumps]
    by = {(r.scheme, r.pump_mw): r for r in rows}
    s0, s1 = schemes
    ratios, qdiff = [], []
    for pump in pumps:
        a, b = by[(s0, pump)], by[(s1, pump)]
        if b.r_sift_bps <= 0:
            raise InputError(f"zero sifted rate for {s1} at {pump} mW")
        ratios.append(a.r_sift_bps / b.r_sift_bps)
        qdiff.append(a.qber - b.qber)
    balance = {}
    slopes = {}
    for scheme in schemes:
        zz = sum(by[(scheme, p)].balance_z for p in pumps)
        xx = sum(by[(scheme, p)].balance_x for p in pumps)
        balance[scheme] = zz / xx if xx else math.inf
        slope, _, err = linear_fit(pumps, [by[(scheme, p)].r_sift_bps for p in pumps])
        slopes[scheme] = (slope, err)
    return CompareReport(
        rows=rows,
        pump_points_mw=pumps,
        rate_ratio_by_pump=ratios,
        mean_rate_ratio=float(np.mean(ratios)),
        qber_difference_by_pump=qdiff,
        balance_ratio=balance,
        slope_bps_per_mw=slopes,
    )


def compare_to_csv(report: CompareReport, cfg: ExperimentConfig) -> str:
    header = (
        f"# bbm92sim compare-csv-v1 tool={__version__} config_sha256={cfg.config_hash()}\n"
    )
    cols = ["pump_mw", "scheme", "pairs", "sifted", "r_sift_bps", "qber", "balance_z", "balance_x"]
    lines = [",".join(cols)]
    for r in report.rows:
        d = asdict(r)
        lines.append(",".join(_fmt(d[c]) for c in cols))
    return header + "\n".join(lines) + "\n"


def compare_summary_text(report: CompareReport) -> str:
    out = ["scheme comparison summary"]
    out.append(f"pump points (mW): {', '.join(_fmt(p) for p in report.pump_points_mw)}")
    out.append(f"mean sifted-rate ratio: {report.mean_rate_ratio:.4f}")
    out.append(
        "per-pump ratios: " + ", ".join(f"{x:.3f}" for x in report.rate_ratio_by_pump)
    )
    out.append(
        "per-pump QBER difference: " + ", ".join(f"{x:+.5f}" for x in report.qber_difference_by_pump)
    )
    for scheme, ratio in report.balance_ratio.items():
        out.append(f"{scheme} Z:X balance ratio: {ratio:.4f}")
    for scheme, (slope, err) in report.slope_bps_per_mw.items():
        out.append(f"{scheme} rate slope: {slope:.1f} +/- {err:.1f} bps/mW")
    return "\n".join(out) + "\n"


# --- characterization --------------------------------------------------------------


@dataclass
class CharacterizationReport:
    visibilities: dict[str, float]
    s_value: float
    fidelity_phi_plus: float
    density_matrix: list[list[float]]


def run_characterization(cfg: ExperimentConfig) -> CharacterizationReport:
    """Fringe scans in all four bases, the 16-setting CHSH scan, and tomography."""
    run_seed = run_seed_for(cfg, cfg.schemes[0], cfg.characterize_pump_mw, tag=0xC)
    scfg = cfg.source_config(cfg.characterize_pump_mw, cfg.schemes[0], run_seed,
                             duration_s=cfg.characterize_dwell_s)
    angles = np.arange(0.0, 90.0 + cfg.fringe_step_deg, cfg.fringe_step_deg)
    vis = {}
    for basis_index, basis in enumerate(("H", "V", "D", "A")):
        scan = sourcesim.fringe_scan(
            replace(scfg, seed=run_seed + basis_index),
            cfg.detector,
            basis,
            angles,
            cfg.characterize_dwell_s,
        )
        v, _, _, _ = polmath.visibility_fit(scan)
        vis[basis] = v
    counts = sourcesim.chsh_scan(scfg, cfg.detector, cfg.characterize_dwell_s)
    s_value = polmath.chsh_from_counts(counts)
    tomo_counts = sourcesim.tomography_sample(scfg, cfg.characterize_dwell_s)
    rho = polmath.tomography_reconstruct(tomo_counts)
    fid = polmath.fidelity(rho, polmath.bell_state("phi+"))
    return CharacterizationReport(
        visibilities=vis,
        s_value=s_value,
        fidelity_phi_plus=fid,
        density_matrix=polmath.serialize_density_matrix(rho),
    )


def characterization_text(report: CharacterizationReport) -> str:
    out = ["source characterization"]
    for basis, v in report.visibilities.items():
        out.append(f"visibility[{basis}] = {v:.4f}")
    out.append(f"CHSH S = {report.s_value:.4f}")
    out.append(f"fidelity(phi+) = {report.fidelity_phi_plus:.4f}")
    out.append("density matrix (re, im) pairs, row-major HH,HV,VH,VV:")
    for i in range(4):
        row = report.density_matrix[4 * i : 4 * i + 4]
        out.append("  " + "  ".join(f"({re:+.4f},{im:+.4f})" for re, im in row))
    return "\n".join(out) + "\n"


def qber_visibility_sweep(cfg: ExperimentConfig, p_values: Sequence[float]) -> list[tuple[float, float, float]]:
    """(p, measured average visibility, measured QBER) per state-quality point.

    Visibility is the mean of the four fringe-scan fits; QBER comes from a full
    detection + matching run at the characterization pump power.
    """
    rows = []
    for i, p in enumerate(p_values):
        sub = replace(cfg, werner_p=float(p))
        run_seed = run_seed_for(sub, sub.schemes[0], sub.characterize_pump_mw, tag=0xB0 + i)
        scfg = sub.source_config(sub.characterize_pump_mw, sub.schemes[0], run_seed,
                                 duration_s=sub.characterize_dwell_s)
        angles = np.arange(0.0, 90.0 + sub.fringe_step_deg, sub.fringe_step_deg)
        vis = []
        for k, basis in enumerate(("H", "V", "D", "A")):
            scan = sourcesim.fringe_scan(
                replace(scfg, seed=run_seed + k),
                sub.detector, basis, angles, sub.characterize_dwell_s,
            )
            vis.append(polmath.visibility_fit(scan)[0])
        stats = sifting_stats(sub, sub.characterize_pump_mw, sub.schemes[0])
        rows.append((float(p), float(np.mean(vis)), stats.qber))
    return rows


# --- two-process key generation ------------------------------------------------


def _final_key_paths(out_dir: Path, role: str) -> tuple[Path, Path]:
    return out_dir / f"{role}.key", out_dir / f"{role}_report.txt"


def _write_key_artifacts(out_dir: Path, role: str, result: protocol.ActorResult,
                         params: protocol.SessionParams, source_seed: int) -> None:
    key_path, report_path = _final_key_paths(out_dir, role)
    r = result.report
    if result.final_key is not None:
        key_path.write_bytes(pack_key_bytes(result.final_key))
    lines = [
        f"role = {role}",
        f"aborted = {r.aborted}",
        f"abort_reason = {r.abort_reason or ''}",
        f"n_sifted = {r.sifted_bits}",
        f"n_after_sampling = {max(0, r.sifted_bits - math.ceil(params.sample_fraction * r.sifted_bits))}",
        f"qber_estimate = {r.qber_estimate!r}",
        f"s_estimate = {r.s_estimate!r}",
        f"leak_bits = {r.leak_ec}",
        f"final_key_bits = {r.final_key_bits}",
        f"session_id = {params.session_id}",
        f"sample_seed = {params.sample_seed}",
        f"source_seed = {source_seed}",
        f"rate_formula = {params.rate_formula}",
        f"margin_bits = {params.margin_bits}",
    ]
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def keys_session(cfg: ExperimentConfig, role: str, host: str, port: int,
                 out_dir: Path, pump_mw: float | None = None) -> int:
    """One endpoint of the two-process TCP key session. Returns an exit code.

    Both processes deterministically regenerate the same simulated detection
    session from the shared seed; Alice listens, Bob connects.
    """
    pump = pump_mw if pump_mw is not None else cfg.characterize_pump_mw
    scheme = cfg.schemes[0]
    run_seed = run_seed_for(cfg, scheme, pump, tag=0xEE)
    scfg = cfg.source_config(pump, scheme, run_seed)
    alice_stream, bob_stream = sourcesim.run_session(scfg, cfg.detector)
    params = cfg.session_params(session_id=run_seed & 0x7FFFFFFFFFFFFFFF)

    if role == "alice":
        listener = wire.TcpListener(host, port)
        raw = listener.accept()
        chan = wire.ActorChannel(raw, params.session_id, "alice")
        result = protocol.alice_actor(chan, alice_stream, params)
        chan.close()
    else:
        raw = wire.tcp_connect(host, port)
        chan = wire.ActorChannel(raw, params.session_id, "bob")
        result = protocol.bob_actor(chan, bob_stream, params)
        chan.close()

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_key_artifacts(out_dir, role, result, params, run_seed)
    if result.report.aborted:
        return 4 if result.report.abort_reason == "RECONCILIATION_FAILED" else 3
    return 0


def keys_both(cfg: ExperimentConfig, host: str, port: int, out_dir: Path,
              pump_mw: float | None = None) -> int:
    """Spawn the Bob process, run Alice in-process, join, combine exit codes."""
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = out_dir / "effective_config.ini"
    write_config(cfg, effective)
    listener = wire.TcpListener(host, port)
    actual_port = listener.port
    child = subprocess.Popen(
        [
            sys.executable, "-m", "bbm92sim", "keys",
            "--role", "bob",
            "--config", str(effective),
            "--host", host,
            "--port", str(actual_port),
            "--out", str(out_dir),
        ]
        + (["--pump-mw", repr(pump_mw)] if pump_mw is not None else []),
    )
    try:
        pump = pump_mw if pump_mw is not None else cfg.characterize_pump_mw
        scheme = cfg.schemes[0]
        run_seed = run_seed_for(cfg, scheme, pump, tag=0xEE)
        scfg = cfg.source_config(pump, scheme, run_seed)
        alice_stream, _ = sourcesim.run_session(scfg, cfg.detector)
        params = cfg.session_params(session_id=run_seed & 0x7FFFFFFFFFFFFFFF)
        raw = listener.accept()
        chan = wire.ActorChannel(raw, params.session_id, "alice")
        result = protocol.alice_actor(chan, alice_stream, params)
        chan.close()
        _write_key_artifacts(out_dir, "alice", result, params, run_seed)
        alice_code = 0
        if result.report.aborted:
            alice_code = 4 if result.report.abort_reason == "RECONCILIATION_FAILED" else 3
    finally:
        child_code = child.wait(timeout=300)
    return alice_code or child_code


# --- CLI -------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="config file path or preset name (ideal, paper-like)")
    sub.add_argument("--seed", type=int, help="master seed override")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--scheme", choices=sourcesim.SCHEMES, help="single scheme override")
    sub.add_argument("--pump-mw", type=float, help="single pump power (collapses the sweep)")
    sub.add_argument("--duration-s", type=float, help="per-run duration override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbm92sim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"bbm92sim {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("run", "pump sweep through the full key pipeline; writes sweep.csv"),
        ("compare", "present vs conventional comparison; writes compare.csv + summary"),
        ("characterize", "fringe/CHSH/tomography characterization; writes report"),
        ("keys", "end-to-end key generation over TCP between two processes"),
    ):
        sub = subs.add_parser(name, help=doc)
        _add_common(sub)
        if name == "keys":
            sub.add_argument("--role", choices=("both", "alice", "bob"), default="both")
            sub.add_argument("--host", default="127.0.0.1")
            sub.add_argument("--port", type=int, default=0)
    return parser


def _cfg_from_args(args) -> ExperimentConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration_s is not None:
        overrides["duration_s"] = args.duration_s
    if args.scheme is not None:
        overrides["schemes"] = (args.scheme,)
    if args.pump_mw is not None:
        overrides["pump_start_mw"] = args.pump_mw
        overrides["pump_stop_mw"] = args.pump_mw
        overrides["characterize_pump_mw"] = args.pump_mw
    return load_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _cfg_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    try:
        if args.command == "run":
            out_dir.mkdir(parents=True, exist_ok=True)
            rows = run_experiment(cfg)
            path = out_dir / "sweep.csv"
            path.write_text(rows_to_csv(rows, cfg), encoding="utf-8")
            print(f"wrote {path} ({len(rows)} rows)")
            if any(r.aborted for r in rows):
                reasons = {r.abort_reason for r in rows if r.aborted}
                print(f"note: {sum(r.aborted for r in rows)} run(s) aborted: {reasons}")
                return 4 if reasons == {"RECONCILIATION_FAILED"} else 3
            return 0
        if args.command == "compare":
            if len(set(cfg.schemes)) < 2:
                cfg = replace(cfg, schemes=("present", "conventional"))
            out_dir.mkdir(parents=True, exist_ok=True)
            report = compare_schemes(cfg)
            (out_dir / "compare.csv").write_text(compare_to_csv(report, cfg), encoding="utf-8")
            summary = compare_summary_text(report)
            (out_dir / "compare_summary.txt").write_text(summary, encoding="utf-8")
            print(summary, end="")
            return 0
        if args.command == "characterize":
            out_dir.mkdir(parents=True, exist_ok=True)
            report = run_characterization(cfg)
            text = characterization_text(report)
            (out_dir / "characterization.txt").write_text(text, encoding="utf-8")
            print(text, end="")
            return 0
        if args.command == "keys":
            if args.role == "both":
                code = keys_both(cfg, args.host, args.port, out_dir, args.pump_mw)
            else:
                code = keys_session(cfg, args.role, args.host, args.port, out_dir, args.pump_mw)
            if code == 0:
                print(f"key session complete; outputs in {out_dir}")
            else:
                print(f"key session ended with code {code}", file=sys.stderr)
            return code
    except (ConfigError, sourcesim.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    return 0
