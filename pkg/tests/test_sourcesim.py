import numpy as np
import pytest

from bbm92sim import coinc, sourcesim
from bbm92sim.sourcesim import (
    ConfigError,
    DetectorConfig,
    InputError,
    PairStream,
    SourceConfig,
    detect,
    fringe_scan,
    ideal_detectors,
    pair_rate_hz,
    projective_sample,
    simulate_pairs,
)
from bbm92sim.polmath import visibility_fit

IDEAL = ideal_detectors()


def cfg_at(pump_mw, *, duration_s=0.1, seed=0, p=1.0, scheme="present", **kw):
    return SourceConfig(
        pump_power_mw=pump_mw, werner_p=p, scheme=scheme, duration_s=duration_s, seed=seed, **kw
    )


def same_basis_pairs(alice, bob, window=1000):
    m = coinc.match_coincidences(alice.times_ps, bob.times_ps, window)
    matrix = coinc.coincidence_matrix(m, alice.channels, bob.channels)
    return m, matrix


# --- pair generation ---------------------------------------------------------------


def test_pair_rate_paper_constants():
    # 0.04 MHz/mW/nm x 3 mW x 3 nm = 360 kHz
    assert pair_rate_hz(cfg_at(3.0)) == pytest.approx(360_000.0)
    assert pair_rate_hz(cfg_at(3.0, scheme="conventional")) == pytest.approx(180_000.0)


def test_pair_count_poisson_at_3mw():
    pairs = simulate_pairs(cfg_at(3.0, duration_s=1.0, seed=101))
    assert abs(len(pairs) - 360_000) <= 4 * 600  # 4 sigma of Poisson(360000)
    assert np.all(np.diff(pairs.times_ps) >= 0)


def test_pair_count_short_duration_poisson_limit():
    # Poisson(0.36): empty-run fraction e^-0.36 = 0.6977, 4 sigma over 1e5 runs
    runs = 100_000
    empty = sum(
        1 for i in range(runs) if len(simulate_pairs(cfg_at(3.0, duration_s=1e-6, seed=i))) == 0
    )
    assert empty / runs == pytest.approx(np.exp(-0.36), abs=4 * 0.00145)


def test_source_tag_fair_bernoulli():
    pairs = simulate_pairs(cfg_at(23.15, duration_s=0.4, seed=7))  # ~1.1e6 events
    n = len(pairs)
    assert n > 1_000_000
    frac = np.count_nonzero(pairs.source_tags == sourcesim.EPS1) / n
    assert abs(frac - 0.5) <= 3 * 0.5 / np.sqrt(n)


def test_conventional_tags_single():
    pairs = simulate_pairs(cfg_at(3.0, scheme="conventional", seed=5))
    assert np.all(pairs.source_tags == sourcesim.SINGLE)


def test_wdm_statistically_identical_to_present():
    a = simulate_pairs(cfg_at(3.0, seed=9))
    b = simulate_pairs(cfg_at(3.0, seed=9, scheme="wdm_present"))
    assert np.array_equal(a.times_ps, b.times_ps)
    assert np.array_equal(a.source_tags, b.source_tags)


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg_at(0.0)
    with pytest.raises(ConfigError):
        cfg_at(1.0, duration_s=-1.0)
    with pytest.raises(ConfigError):
        cfg_at(1.0, p=1.5)
    with pytest.raises(ConfigError):
        SourceConfig(pump_power_mw=1.0, scheme="bs_free")
    with pytest.raises(ConfigError):
        DetectorConfig(efficiency=1.2)
    with pytest.raises(ConfigError):
        DetectorConfig(dead_time_ps=-5)


# --- detection ----------------------------------------------------------------------


def test_detect_ideal_limit_every_pair_clicks():
    cfg = cfg_at(3.0, duration_s=0.1, seed=21)
    pairs = simulate_pairs(cfg)
    alice, bob = detect(pairs, cfg, IDEAL)
    assert len(alice) == len(pairs)
    assert len(bob) == len(pairs)
    assert np.array_equal(alice.times_ps, pairs.times_ps)
    assert np.array_equal(bob.times_ps, pairs.times_ps)
    assert np.array_equal(alice.bases, bob.bases)
    assert np.array_equal(alice.bases, pairs.source_tags)  # EPS1 -> Z, EPS2 -> X
    assert np.array_equal(alice.bits, bob.bits)  # p = 1: perfectly correlated


def test_detect_rejects_unsorted_pairs():
    stream = PairStream(np.array([10, 0], np.int64), np.zeros(2, np.uint8))
    with pytest.raises(InputError):
        detect(stream, cfg_at(1.0), IDEAL)


def test_detect_werner_bit_error_rate():
    # oracle: same-basis mismatch fraction (1-p)/2 = 0.05
    cfg = cfg_at(23.15, duration_s=0.4, seed=30, p=0.9)  # ~1.1e6 pairs
    pairs = simulate_pairs(cfg)
    alice, bob = detect(pairs, cfg, IDEAL)
    _, matrix = same_basis_pairs(alice, bob)
    assert coinc.qber(matrix) == pytest.approx(0.05, abs=0.001)


def test_detect_conventional_sifting_ratio():
    # T^2 + (1-T)^2 = 0.5 of coincidences land in the same basis
    cfg = cfg_at(10.0, duration_s=0.2, seed=31, scheme="conventional")
    pairs = simulate_pairs(cfg)
    alice, bob = detect(pairs, cfg, IDEAL)
    _, matrix = same_basis_pairs(alice, bob)
    same = coinc.sifted_count(matrix)
    n = len(pairs)
    assert abs(same - 0.5 * n) <= 3 * np.sqrt(n * 0.25)


def test_detect_present_cross_basis_is_zero():
    cfg = cfg_at(3.0, duration_s=0.1, seed=33, p=0.8)
    pairs = simulate_pairs(cfg)
    alice, bob = detect(pairs, cfg, IDEAL)
    _, matrix = same_basis_pairs(alice, bob)
    cross = matrix.sum() - coinc.sifted_count(matrix)
    assert cross == 0


def test_detect_deterministic_given_seed():
    cfg = cfg_at(3.0, duration_s=0.05, seed=44, p=0.9)
    det = DetectorConfig(efficiency=0.7, dark_rate_hz=500.0, jitter_sigma_ps=120.0, dead_time_ps=3000)
    a1, b1 = detect(simulate_pairs(cfg), cfg, det)
    a2, b2 = detect(simulate_pairs(cfg), cfg, det)
    for x, y in ((a1, a2), (b1, b2)):
        assert np.array_equal(x.times_ps, y.times_ps)
        assert np.array_equal(x.channels, y.channels)
        assert np.array_equal(x.truth_tags, y.truth_tags)


def test_detect_dead_time_enforced_per_channel():
    cfg = cfg_at(12.0, duration_s=0.05, seed=55)
    det = DetectorConfig(efficiency=0.9, dark_rate_hz=2000.0, jitter_sigma_ps=200.0, dead_time_ps=50_000)
    alice, bob = detect(simulate_pairs(cfg), cfg, det)
    for stream in (alice, bob):
        for ch in range(4):
            t = stream.times_ps[stream.channels == ch]
            if t.size > 1:
                assert np.min(np.diff(t)) >= det.dead_time_ps


def test_detect_efficiency_thins_streams():
    cfg = cfg_at(3.0, duration_s=0.1, seed=66)
    det = DetectorConfig(efficiency=0.25)
    alice, bob = detect(simulate_pairs(cfg), cfg, det)
    n = len(simulate_pairs(cfg))
    for stream in (alice, bob):
        assert abs(len(stream) - 0.25 * n) <= 4 * np.sqrt(n * 0.25 * 0.75)


def test_dark_counts_tagged_and_uniform():
    cfg = cfg_at(1.0, duration_s=0.05, seed=67)
    det = DetectorConfig(dark_rate_hz=40_000.0)
    alice, _ = detect(simulate_pairs(cfg), cfg, det)
    darks = alice.truth_tags == sourcesim.DARK
    n_dark = int(np.count_nonzero(darks))
    assert abs(n_dark - 4 * 40_000 * 0.05) <= 4 * np.sqrt(4 * 40_000 * 0.05)
    per_channel = np.bincount(alice.channels[darks], minlength=4)
    assert per_channel.min() > 0.8 * n_dark / 4


def test_accidental_rate_scaling():
    # uncorrelated streams: match rate ~ S_A * S_B * (2 * window), S * tau << 1
    duration = 0.2
    cfg1 = cfg_at(25.0, duration_s=duration, seed=71)
    cfg2 = cfg_at(25.0, duration_s=duration, seed=72)
    alice, _ = detect(simulate_pairs(cfg1), cfg1, IDEAL)
    _, bob = detect(simulate_pairs(cfg2), cfg2, IDEAL)
    window = 1000
    matches = coinc.match_coincidences(alice.times_ps, bob.times_ps, window)
    s_a = len(alice) / duration
    s_b = len(bob) / duration
    expected = s_a * s_b * (2 * window * 1e-12) * duration
    assert expected > 2000  # enough statistics for the 10% check
    assert len(matches) == pytest.approx(expected, rel=0.10)


def test_basis_balance_present_and_conventional():
    cfg = cfg_at(10.0, duration_s=0.1, seed=81)
    alice, bob = detect(simulate_pairs(cfg), cfg, IDEAL)
    _, matrix = same_basis_pairs(alice, bob)
    z = matrix[:2, :2].sum()
    x = matrix[2:, 2:].sum()
    n = z + x
    assert abs(z - n / 2) <= 3 * np.sqrt(n) / 2

    t = 0.533
    cfgc = cfg_at(10.0, duration_s=0.3, seed=82, scheme="conventional")
    detc = DetectorConfig(bs_transmittance_alice=t, bs_transmittance_bob=t)
    alice, bob = detect(simulate_pairs(cfgc), cfgc, detc)
    _, matrix = same_basis_pairs(alice, bob)
    z = matrix[:2, :2].sum()
    x = matrix[2:, 2:].sum()
    expected = t**2 / (1 - t) ** 2
    p_z = t**2 / (t**2 + (1 - t) ** 2)
    sigma_ratio = 3 * np.sqrt(p_z * (1 - p_z) / (z + x)) / (1 - p_z) ** 2
    assert z / x == pytest.approx(expected, abs=sigma_ratio)


# --- scan modes -------------------------------------------------------------------------


ANGLES = np.arange(0.0, 94.0, 4.0)


def test_fringe_scan_pure_state():
    cfg = cfg_at(3.0, seed=90, p=1.0)
    scan = fringe_scan(cfg, IDEAL, "H", ANGLES, dwell_s=0.111)
    v, _, _, _ = visibility_fit(scan)
    assert v == pytest.approx(1.0, abs=0.005)


def test_fringe_scan_matches_source_visibility():
    # oracle: generator p; ~1e4 counts per point in all four bases
    for i, basis in enumerate(("H", "V", "D", "A")):
        cfg = cfg_at(3.0, seed=91 + i, p=0.978)
        scan = fringe_scan(cfg, IDEAL, basis, ANGLES, dwell_s=0.111)
        v, _, _, _ = visibility_fit(scan)
        assert v == pytest.approx(0.978, abs=0.01), basis


def test_fringe_scan_maximally_mixed():
    cfg = cfg_at(3.0, seed=95, p=0.0)
    scan = fringe_scan(cfg, IDEAL, "D", ANGLES, dwell_s=0.111)
    v, _, _, _ = visibility_fit(scan)
    assert v == pytest.approx(0.0, abs=0.02)


def test_fringe_scan_rejects_empty_angles():
    with pytest.raises(InputError):
        fringe_scan(cfg_at(3.0), IDEAL, "H", [], 0.1)
    with pytest.raises(InputError):
        fringe_scan(cfg_at(3.0), IDEAL, "Q", ANGLES, 0.1)


def test_projective_sample_phi_plus():
    cfg = cfg_at(3.0, seed=96, p=1.0)
    dwell = 2000.0 / pair_rate_hz(cfg)  # mean 1000 at probability 1/2
    hh = projective_sample(cfg, ("H", "H"), dwell)
    assert abs(hh - 1000) <= 4 * np.sqrt(1000)
    assert projective_sample(cfg, ("H", "V"), dwell) == 0
    assert projective_sample(cfg, ("R", "R"), dwell) == 0  # <RR|phi+> = 0
    rl = projective_sample(cfg, ("R", "L"), dwell)
    assert abs(rl - 1000) <= 4 * np.sqrt(1000)


def test_projective_sample_rejects_unknown_pair():
    with pytest.raises(InputError):
        projective_sample(cfg_at(3.0), ("H", "Q"), 0.1)


# --- exports -----------------------------------------------------------------------------


def test_timetag_binary_round_trip(tmp_path):
    cfg = cfg_at(3.0, duration_s=0.01, seed=97, p=0.9)
    det = DetectorConfig(efficiency=0.8, dark_rate_hz=1000.0)
    alice, bob = detect(simulate_pairs(cfg), cfg, det)
    path = tmp_path / "tags.bin"
    sourcesim.write_timetags(path, alice, bob)
    assert path.stat().st_size == 10 * (len(alice) + len(bob))  # packed 10-byte records
    ra, rb = sourcesim.read_timetags(path)
    assert np.array_equal(ra.times_ps, alice.times_ps)
    assert np.array_equal(ra.channels, alice.channels)
    assert np.array_equal(rb.times_ps, bob.times_ps)
    assert np.array_equal(rb.channels, bob.channels)
    # ground truth never exported
    assert np.all(ra.truth_tags == sourcesim.DARK)


def test_timetag_csv_export(tmp_path):
    cfg = cfg_at(1.0, duration_s=0.001, seed=98)
    alice, bob = detect(simulate_pairs(cfg), cfg, IDEAL)
    path = tmp_path / "tags.csv"
    sourcesim.write_timetags_csv(path, alice, bob)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "party,channel,timestamp_ps"
    assert len(lines) == 1 + len(alice) + len(bob)
