"""Two-qubit polarization-state math.

Conventions used throughout the package:

* Density matrices are 4x4 complex numpy arrays, row-major in the product
  basis |HH>, |HV>, |VH>, |VV>.
* All public angles are *analyzer* (polarizer-equivalent) angles in degrees.
  A half-wave plate at theta in front of a PBS acts as an analyzer at 2*theta;
  that doubling is applied only where HWP angles enter (fringe scans, CHSH
  setting tables), never inside this module.
* An analyzer at angle a transmits linear polarization
  |a> = cos(a)|H> + sin(a)|V| and reflects the orthogonal state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

HERMITICITY_TOL = 1e-12
TRACE_TOL = 1e-12
EIGENVALUE_TOL = 1e-10

BELL_LABELS = ("phi+", "phi-", "psi+", "psi-")

# Single-qubit analyzer eigenstates (Jones vectors).
_KET = {
    "H": np.array([1.0, 0.0], dtype=complex),
    "V": np.array([0.0, 1.0], dtype=complex),
    "D": np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0),
    "A": np.array([1.0, -1.0], dtype=complex) / np.sqrt(2.0),
    "R": np.array([1.0, 1.0j], dtype=complex) / np.sqrt(2.0),
    "L": np.array([1.0, -1.0j], dtype=complex) / np.sqrt(2.0),
}

TOMOGRAPHY_EIGENSTATES = ("H", "V", "D", "A", "R", "L")

# Bloch vectors of the six eigenstates; H/V along z, D/A along x, R/L along y.
_BLOCH = {
    "H": (0.0, 0.0, 1.0),
    "V": (0.0, 0.0, -1.0),
    "D": (1.0, 0.0, 0.0),
    "A": (-1.0, 0.0, 0.0),
    "R": (0.0, 1.0, 0.0),
    "L": (0.0, -1.0, 0.0),
}

_PAULI = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)

# Standard optimal CHSH analyzer angles (a, a', b, b') in degrees.
CHSH_SETTINGS = (0.0, 45.0, 22.5, 67.5)

TRANSMITTED = "transmitted"
REFLECTED = "reflected"


class InputError(ValueError):
    """Invalid argument values (bad labels, out-of-range parameters, bad matrices)."""


class DegenerateDataError(ValueError):
    """Data that is structurally valid but cannot support the requested estimate."""


def normalize_angle(angle_deg: float) -> float:
    """Angle folded into [0, 180); analyzers are invariant under 180-degree shifts."""
    return float(angle_deg) % 180.0


def check_density_matrix(rho: np.ndarray) -> np.ndarray:
    """Validate Hermiticity, unit trace and positivity; returns the array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise InputError(f"density matrix must be 4x4, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > HERMITICITY_TOL:
        raise InputError("density matrix is not Hermitian within 1e-12")
    if abs(np.trace(rho).real - 1.0) > TRACE_TOL or abs(np.trace(rho).imag) > TRACE_TOL:
        raise InputError("density matrix trace differs from 1 by more than 1e-12")
    eig = np.linalg.eigvalsh(rho)
    if eig.min() < -EIGENVALUE_TOL:
        raise InputError(f"density matrix has eigenvalue {eig.min():.3e} < -1e-10")
    return rho


def bell_state(label: str) -> np.ndarray:
    """Density matrix of a Bell state; label one of phi+, phi-, psi+, psi-."""
    key = label.strip().lower().replace("φ", "phi").replace("ψ", "psi")
    s = 1.0 / np.sqrt(2.0)
    if key == "phi+":
        psi = np.array([s, 0, 0, s], dtype=complex)
    elif key == "phi-":
        psi = np.array([s, 0, 0, -s], dtype=complex)
    elif key == "psi+":
        psi = np.array([0, s, s, 0], dtype=complex)
    elif key == "psi-":
        psi = np.array([0, s, -s, 0], dtype=complex)
    else:
        raise InputError(f"unknown Bell state label {label!r}; expected one of {BELL_LABELS}")
    return np.outer(psi, psi.conj())


def werner_state(p: float) -> np.ndarray:
    """p * |phi+><phi+| + (1-p)/4 * I. The H-basis fringe visibility equals p."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise InputError(f"werner parameter must lie in [0, 1], got {p}")
    return p * bell_state("phi+") + (1.0 - p) * np.eye(4, dtype=complex) / 4.0


def analyzer_projector(angle_deg: float, port: str = TRANSMITTED) -> np.ndarray:
    """Rank-1 projector for one output port of a linear analyzer."""
    a = np.deg2rad(angle_deg if port == TRANSMITTED else angle_deg + 90.0)
    ket = np.array([np.cos(a), np.sin(a)], dtype=complex)
    if port not in (TRANSMITTED, REFLECTED):
        raise InputError(f"port must be {TRANSMITTED!r} or {REFLECTED!r}, got {port!r}")
    return np.outer(ket, ket.conj())


def joint_outcome_distribution(rho: np.ndarray, alpha_deg: float, beta_deg: float) -> np.ndarray:
    """Probabilities [P_tt, P_tr, P_rt, P_rr] for analyzers at alpha (Alice), beta (Bob)."""
    rho = check_density_matrix(rho)
    pa_t = analyzer_projector(alpha_deg, TRANSMITTED)
    pa_r = analyzer_projector(alpha_deg, REFLECTED)
    pb_t = analyzer_projector(beta_deg, TRANSMITTED)
    pb_r = analyzer_projector(beta_deg, REFLECTED)
    probs = np.array(
        [
            np.trace(rho @ np.kron(pa_t, pb_t)).real,
            np.trace(rho @ np.kron(pa_t, pb_r)).real,
            np.trace(rho @ np.kron(pa_r, pb_t)).real,
            np.trace(rho @ np.kron(pa_r, pb_r)).real,
        ]
    )
    # clip away -1e-17-level eigensolver noise, renormalization stays within 1e-12
    return np.clip(probs, 0.0, None)


def correlation_coefficient(rho: np.ndarray, alpha_deg: float, beta_deg: float) -> float:
    """E = P_tt + P_rr - P_tr - P_rt for the given analyzer pair."""
    p = joint_outcome_distribution(rho, alpha_deg, beta_deg)
    return float(p[0] + p[3] - p[1] - p[2])


def chsh_setting_angles(settings: Sequence[float] = CHSH_SETTINGS) -> list[tuple[float, float]]:
    """The 16 (alice, bob) analyzer-angle combinations of a CHSH scan.

    For each correlation pair the scan visits (x, y), (x, y+90), (x+90, y),
    (x+90, y+90); transmitted-transmitted coincidences are recorded at each.
    """
    a, ap, b, bp = settings
    combos = []
    for x in (a, ap):
        for y in (b, bp):
            for dx in (0.0, 90.0):
                for dy in (0.0, 90.0):
                    combos.append((normalize_angle(x + dx), normalize_angle(y + dy)))
    # dedupe, preserving order (orthogonal complements overlap between pairs)
    seen = set()
    out = []
    for c in combos:
        key = (round(c[0], 9), round(c[1], 9))
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def _counts_key(alpha: float, beta: float) -> tuple[float, float]:
    return (round(normalize_angle(alpha), 9), round(normalize_angle(beta), 9))


def chsh_from_counts(
    counts: Mapping[tuple[float, float], float],
    settings: Sequence[float] = CHSH_SETTINGS,
) -> float:
    """CHSH S from transmitted-transmitted counts of the 16-combination scan.

    counts maps (alice_angle, beta_angle) analyzer pairs to coincidence counts.
    Each correlation E(x, y) is estimated as (N_tt + N_rr - N_tr - N_rt) / N_total
    from the four combinations sharing the (x, y) setting pair.
    """
    table = {_counts_key(*k): float(v) for k, v in counts.items()}
    a, ap, b, bp = settings

    def corr(x: float, y: float) -> float:
        quad = []
        for dx in (0.0, 90.0):
            for dy in (0.0, 90.0):
                key = _counts_key(x + dx, y + dy)
                if key not in table:
                    raise InputError(f"missing CHSH setting {key}")
                quad.append(table[key])
        n_tt, n_tr, n_rt, n_rr = quad
        total = n_tt + n_tr + n_rt + n_rr
        if total <= 0:
            raise DegenerateDataError(f"zero total counts for setting pair ({x}, {y})")
        return (n_tt + n_rr - n_tr - n_rt) / total

    s = corr(a, b) - corr(a, bp) + corr(ap, b) + corr(ap, bp)
    return float(abs(s))


def chsh_value(rho: np.ndarray, settings: Sequence[float] = CHSH_SETTINGS) -> float:
    """Exact-probability CHSH S of a state at the given analyzer settings."""
    a, ap, b, bp = settings
    e = correlation_coefficient
    return float(
        abs(e(rho, a, b) - e(rho, a, bp) + e(rho, ap, b) + e(rho, ap, bp))
    )


@dataclass(frozen=True)
class FringeScan:
    """Coincidence counts versus Bob's HWP angle with Alice's analyzer fixed.

    samples: (hwp_angle_degrees, coincidence_count) pairs.
    fixed_basis: Alice's analyzer, one of H, V, D, A.
    """

    samples: tuple[tuple[float, float], ...]
    fixed_basis: str

    def __post_init__(self):
        if self.fixed_basis not in ("H", "V", "D", "A"):
            raise InputError(f"fixed_basis must be H, V, D or A, got {self.fixed_basis!r}")
        samples = tuple((float(a), float(c)) for a, c in self.samples)
        if len(samples) < 8:
            raise InputError(f"fringe scan needs >= 8 samples, got {len(samples)}")
        angles = [a for a, _ in samples]
        if max(angles) - min(angles) < 90.0:
            raise InputError("fringe scan must span at least 90 degrees of HWP angle")
        if any(c < 0 for _, c in samples):
            raise InputError("coincidence counts must be non-negative")
        object.__setattr__(self, "samples", samples)


def visibility_fit(scan: FringeScan) -> tuple[float, float, float, float]:
    """Fit C(theta) = A * (1 + V cos(4 theta + phi)) to a fringe scan.

    theta is the HWP angle in degrees (the factor 4 is the HWP doubling on top
    of the 2-theta analyzer fringe). Solved as linear least squares in
    (A, A V cos phi, -A V sin phi); no iterative optimizer.

    Returns (V, A, phi_radians, rms_residual); V is clipped to [0, 1].
    """
    angles = np.array([a for a, _ in scan.samples])
    counts = np.array([c for _, c in scan.samples])
    if np.unique(np.round(angles, 9)).size < 4:
        raise DegenerateDataError("fewer than 4 distinct angles; fit underdetermined")
    x = np.deg2rad(4.0 * angles)
    design = np.column_stack([np.ones_like(x), np.cos(x), np.sin(x)])
    (a0, ac, as_), *_ = np.linalg.lstsq(design, counts, rcond=None)
    if a0 <= 0:
        raise DegenerateDataError(f"non-positive fitted amplitude A={a0:.3g}")
    visibility = float(min(np.hypot(ac, as_) / a0, 1.0))
    phase = float(np.arctan2(-as_, ac))
    residual = float(np.sqrt(np.mean((design @ np.array([a0, ac, as_]) - counts) ** 2)))
    return visibility, float(a0), phase, residual


def projector_pair(label_a: str, label_b: str) -> np.ndarray:
    """Two-qubit projector |ab><ab| for eigenstate labels from H,V,D,A,R,L."""
    try:
        ka, kb = _KET[label_a], _KET[label_b]
    except KeyError as exc:
        raise InputError(f"unknown eigenstate label {exc.args[0]!r}") from None
    ket = np.kron(ka, kb)
    return np.outer(ket, ket.conj())


def projection_probability(rho: np.ndarray, label_a: str, label_b: str) -> float:
    """Tr[rho |ab><ab|] for a tomography projector pair."""
    rho = check_density_matrix(rho)
    return float(np.trace(rho @ projector_pair(label_a, label_b)).real)


def tomography_settings() -> list[tuple[str, str]]:
    """The 36 overcomplete projector pairs, (alice, bob) in H,V,D,A,R,L order."""
    return [(a, b) for a in TOMOGRAPHY_EIGENSTATES for b in TOMOGRAPHY_EIGENSTATES]


_BASIS_GROUP = {"H": "Z", "V": "Z", "D": "X", "A": "X", "R": "Y", "L": "Y"}


def tomography_reconstruct(counts: Mapping[tuple[str, str], float]) -> np.ndarray:
    """Density matrix from the 36-setting coincidence counts.

    Linear inversion in the Pauli basis (counts normalized per measurement-basis
    group, since each group of four settings shares one unknown exposure), then
    projection to the closest physical state by truncating negative eigenvalues
    and renormalizing the remainder proportionally.
    """
    table = {}
    for (la, lb), v in counts.items():
        if la not in _BLOCH or lb not in _BLOCH:
            raise InputError(f"unknown projector pair ({la!r}, {lb!r})")
        table[(la, lb)] = float(v)
    missing = [s for s in tomography_settings() if s not in table]
    if missing:
        raise InputError(f"missing tomography settings: {missing[:4]}{'...' if len(missing) > 4 else ''}")

    group_totals: dict[tuple[str, str], float] = {}
    for (la, lb), v in table.items():
        g = (_BASIS_GROUP[la], _BASIS_GROUP[lb])
        group_totals[g] = group_totals.get(g, 0.0) + v
    if any(t <= 0 for t in group_totals.values()):
        raise DegenerateDataError("a measurement-basis group has zero total counts")

    rows = []
    probs = []
    for la, lb in tomography_settings():
        va = np.array([1.0, *_BLOCH[la]])
        vb = np.array([1.0, *_BLOCH[lb]])
        rows.append(np.kron(va, vb) / 4.0)
        probs.append(table[(la, lb)] / group_totals[(_BASIS_GROUP[la], _BASIS_GROUP[lb])])
    coeffs, *_ = np.linalg.lstsq(np.array(rows), np.array(probs), rcond=None)

    rho = np.zeros((4, 4), dtype=complex)
    for mu in range(4):
        for nu in range(4):
            rho += coeffs[4 * mu + nu] * np.kron(_PAULI[mu], _PAULI[nu])
    rho /= 4.0
    rho = (rho + rho.conj().T) / 2.0
    rho /= np.trace(rho).real

    eigval, eigvec = np.linalg.eigh(rho)
    eigval = np.clip(eigval, 0.0, None)
    eigval /= eigval.sum()
    return (eigvec * eigval) @ eigvec.conj().T


def fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    """Uhlmann fidelity F(rho, target) in [0, 1].

    Falls back to the <psi|rho|psi> shortcut when the target is pure (rank 1);
    otherwise evaluates (Tr sqrt(sqrt(rho) target sqrt(rho)))^2.
    """
    rho = check_density_matrix(rho)
    target = check_density_matrix(target)
    tv, tw = np.linalg.eigh(target)
    if tv[-1] > 1.0 - 1e-12:
        psi = tw[:, -1]
        return float(np.clip((psi.conj() @ rho @ psi).real, 0.0, 1.0))
    rv, rw = np.linalg.eigh(rho)
    sqrt_rho = (rw * np.sqrt(np.clip(rv, 0.0, None))) @ rw.conj().T
    inner = sqrt_rho @ target @ sqrt_rho
    iv = np.linalg.eigvalsh(inner)
    f = float(np.sum(np.sqrt(np.clip(iv, 0.0, None))) ** 2)
    return float(np.clip(f, 0.0, 1.0))


def serialize_density_matrix(rho: np.ndarray) -> list[list[float]]:
    """Row-major list of 16 (re, im) pairs in the |HH>,|HV>,|VH>,|VV> ordering."""
    rho = np.asarray(rho, dtype=complex)
    return [[float(z.real), float(z.imag)] for z in rho.ravel()]
