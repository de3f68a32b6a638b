import math

import numpy as np
import pytest

from bbm92sim import postproc
from bbm92sim.postproc import (
    InputError,
    ToeplitzSeed,
    binary_entropy,
    cascade_reconcile,
    final_key_length,
    random_toeplitz_seed,
    reconcile_pair,
    toeplitz_hash,
    toeplitz_hash_oracle,
)
from bbm92sim import wire
from bbm92sim._bits import clmul_bits, key_hash

# frozen from the high-precision oracle (mpmath, 50 digits); checked below
H2_00644 = 0.3446691300715368


# --- binary entropy -----------------------------------------------------------------


def test_binary_entropy_extremes():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0


def test_binary_entropy_at_paper_qber():
    assert binary_entropy(0.0644) == pytest.approx(H2_00644, abs=1e-12)


def test_binary_entropy_against_high_precision_oracle():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50
    for q in (0.0644, 0.02, 0.10, 0.3):
        qm = mpmath.mpf(str(q))
        expected = float(-qm * mpmath.log(qm, 2) - (1 - qm) * mpmath.log(1 - qm, 2))
        assert binary_entropy(q) == pytest.approx(expected, abs=1e-14)


def test_binary_entropy_out_of_range():
    with pytest.raises(InputError):
        binary_entropy(-0.1)
    with pytest.raises(InputError):
        binary_entropy(1.1)


# --- final key length ----------------------------------------------------------------


def test_final_key_length_noiseless():
    assert final_key_length(1000, 0.0, 0, margin_bits=0) == 1000


def test_final_key_length_worked_example():
    # floor(1e6 * (1 - h2(0.0644))) - 430000 - 128, with h2 from the oracle
    expected = math.floor(1e6 * (1 - H2_00644)) - 430_000 - 128
    assert expected == 225_202
    assert final_key_length(10**6, 0.0644, 430_000, 128) == expected


def test_final_key_length_clamps_at_zero():
    # Shannon-rate leakage at Q past the abort threshold exhausts the key
    n = 10**4
    leak = int(binary_entropy(0.12) * n)
    assert final_key_length(n, 0.12, leak, 10**6) == 0


def test_final_key_length_two_basis_formula():
    n = 10**5
    expected = math.floor(n * (1 - 2 * binary_entropy(0.05))) - 128
    assert final_key_length(n, 0.05, 999_999, 128, rate_formula="asymptotic_two_basis") == expected
    with pytest.raises(InputError):
        final_key_length(n, 0.05, 0, 0, rate_formula="shannon")
    with pytest.raises(InputError):
        final_key_length(0, 0.05, 0, 0)


def test_final_key_length_monotone():
    n = 10**5
    lengths_q = [final_key_length(n, q, 1000) for q in (0.01, 0.03, 0.05, 0.08, 0.11)]
    assert lengths_q == sorted(lengths_q, reverse=True)
    lengths_leak = [final_key_length(n, 0.05, leak) for leak in (0, 10_000, 20_000, 50_000)]
    assert lengths_leak == sorted(lengths_leak, reverse=True)


# --- Toeplitz hashing ------------------------------------------------------------------


def test_toeplitz_zero_key():
    seed = ToeplitzSeed(np.ones(15, dtype=np.uint8), 10, 6)
    assert not toeplitz_hash(np.zeros(10, dtype=np.uint8), seed).any()


def test_toeplitz_worked_example():
    # seed bits 10110 for n=4, l=2: rows [s3 s2 s1 s0] and [s4 s3 s2 s1]
    seed = ToeplitzSeed(np.array([1, 0, 1, 1, 0], dtype=np.uint8), 4, 2)
    out = toeplitz_hash(np.array([1, 0, 1, 0], dtype=np.uint8), seed)
    assert out.tolist() == [1, 1]


def test_toeplitz_seed_validation():
    with pytest.raises(InputError):
        ToeplitzSeed(np.ones(7, dtype=np.uint8), 4, 2)  # needs 5 bits
    with pytest.raises(InputError):
        ToeplitzSeed(np.ones(12, dtype=np.uint8), 4, 9)  # l > n
    seed = ToeplitzSeed(np.ones(5, dtype=np.uint8), 4, 2)
    with pytest.raises(InputError):
        toeplitz_hash(np.ones(5, dtype=np.uint8), seed)


def test_toeplitz_matches_matrix_oracle():
    rng = np.random.default_rng(123)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        l = int(rng.integers(1, min(n, 32) + 1))
        seed = random_toeplitz_seed(n, l, rng)
        key = rng.integers(0, 2, n, dtype=np.uint8)
        assert np.array_equal(toeplitz_hash(key, seed), toeplitz_hash_oracle(key, seed))


def test_toeplitz_linearity():
    rng = np.random.default_rng(321)
    n, l = 96, 48
    for _ in range(1000):
        seed = random_toeplitz_seed(n, l, rng)
        x = rng.integers(0, 2, n, dtype=np.uint8)
        y = rng.integers(0, 2, n, dtype=np.uint8)
        assert np.array_equal(toeplitz_hash(x ^ y, seed), toeplitz_hash(x, seed) ^ toeplitz_hash(y, seed))


def test_toeplitz_seed_sensitivity():
    rng = np.random.default_rng(5)
    n, l = 32, 16
    seed = random_toeplitz_seed(n, l, rng)
    flipped = ToeplitzSeed(seed.bits.copy(), n, l)
    flipped.bits[n - 1] ^= 1  # touches column 0 of every row
    basis = np.zeros(n, dtype=np.uint8)
    basis[0] = 1
    assert not np.array_equal(toeplitz_hash(basis, seed), toeplitz_hash(basis, flipped))


def test_clmul_large_path_matches_convolution_path():
    # 3000 x 2500 crosses the size threshold into the big-integer route;
    # compare against the exact integer convolution
    rng = np.random.default_rng(777)
    a = rng.integers(0, 2, 3000, dtype=np.uint8)
    b = rng.integers(0, 2, 2500, dtype=np.uint8)
    conv = (np.convolve(a.astype(np.int64), b.astype(np.int64)) & 1).astype(np.uint8)
    assert np.array_equal(clmul_bits(a, b), conv)


def test_key_hash_seed_dependence():
    rng = np.random.default_rng(9)
    key = rng.integers(0, 2, 1000, dtype=np.uint8)
    assert key_hash(key, 1) == key_hash(key, 1)
    assert key_hash(key, 1) != key_hash(key, 2)
    other = key.copy()
    other[500] ^= 1
    assert key_hash(key, 1) != key_hash(other, 1)


# --- Cascade ---------------------------------------------------------------------------


def test_cascade_identical_keys_parity_only_leak():
    rng = np.random.default_rng(42)
    n = 1000
    key = rng.integers(0, 2, n, dtype=np.uint8)
    res_a, res_b = reconcile_pair(key, key.copy(), 0.01, session_id=55)
    schedule = postproc._pass_schedule(n, 0.01)
    expected_parities = sum(math.ceil(n / k) for k in schedule)
    assert res_b.corrections == 0
    assert res_b.leak_bits == expected_parities
    assert res_a.leak_bits == expected_parities
    assert res_a.verified and res_b.verified
    assert np.array_equal(res_a.corrected_key, res_b.corrected_key)


def test_cascade_two_planted_errors():
    rng = np.random.default_rng(7)
    n = 64
    key_a = rng.integers(0, 2, n, dtype=np.uint8)
    key_b = key_a.copy()
    key_b[[13, 40]] ^= 1
    res_a, res_b = reconcile_pair(key_a, key_b, 0.05, session_id=9)
    assert np.array_equal(res_b.corrected_key, key_a)  # follower conforms to reference
    assert np.array_equal(res_a.corrected_key, key_a)
    assert res_b.verified


@pytest.mark.parametrize("q", [0.02, 0.0644, 0.10])
def test_cascade_leakage_bound(q):
    # 20 seeded runs per error rate: verified, identical, leak <= 1.35 h2(q) n
    n = 100_000
    bound = 1.35 * binary_entropy(q) * n
    rng = np.random.default_rng(int(q * 10_000))
    for trial in range(20):
        key_a = rng.integers(0, 2, n, dtype=np.uint8)
        errors = rng.choice(n, round(q * n), replace=False)
        key_b = key_a.copy()
        key_b[errors] ^= 1
        res_a, res_b = reconcile_pair(key_a, key_b, q, session_id=1000 + trial)
        assert res_b.verified
        assert np.array_equal(res_b.corrected_key, key_a)
        assert res_b.leak_bits == res_a.leak_bits
        assert res_b.leak_bits <= bound, (trial, res_b.leak_bits, bound)


def test_cascade_rejects_bad_qber():
    key = np.zeros(100, dtype=np.uint8)
    for q in (0.0, -0.1, 0.2):
        with pytest.raises(InputError):
            cascade_reconcile(None, key, q, initiator=True, session_id=1)


class _ScriptedChannel:
    """Replays a fixed list of peer messages; records what the actor sends."""

    def __init__(self, replies, session_id=1):
        self.replies = list(replies)
        self.sent = []
        self.session_id = session_id

    def send(self, msg_type, **payload):
        self.sent.append((msg_type, payload))

    def expect(self, *types, timeout=None):
        return self.replies.pop(0)


def test_cascade_initiator_fails_closed_on_bad_hash():
    key = np.arange(100, dtype=np.uint8) & 1
    schedule = postproc._pass_schedule(key.size, 0.05)
    chan = _ScriptedChannel(
        [
            (wire.EC_START, {"n": key.size, "schedule": list(schedule)}),
            (wire.EC_DONE, {}),
            (wire.EC_HASH_RESPONSE, {"hash": 12345}),  # never the CRC of the key
        ]
    )
    with pytest.raises(wire.ReconciliationFailed):
        cascade_reconcile(chan, key, 0.05, initiator=True, session_id=1)
    assert chan.sent[-1] == (wire.EC_VERIFY, {"ok": False})


def test_cascade_initiator_rejects_parameter_mismatch():
    key = np.zeros(100, dtype=np.uint8)
    chan = _ScriptedChannel([(wire.EC_START, {"n": 99, "schedule": [15, 30, 60, 99]})])
    with pytest.raises(wire.ProtocolViolation):
        cascade_reconcile(chan, key, 0.05, initiator=True, session_id=1)


def test_cascade_philox_permutations_shared():
    p1 = postproc._pass_permutation(77, 0, 1000)
    p2 = postproc._pass_permutation(77, 0, 1000)
    p3 = postproc._pass_permutation(77, 1, 1000)
    assert np.array_equal(p1, p2)
    assert not np.array_equal(p1, p3)
    assert np.array_equal(np.sort(p3), np.arange(1000))
