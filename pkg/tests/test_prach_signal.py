import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leo_rach.ntn_channel import ChannelRealization
from leo_rach.prach_signal import (
    CorrelationWindow,
    PrachConfig,
    PrachConfigError,
    Preamble,
    UserTx,
    complex_noise,
    correlate_windows,
    correlation_magnitudes,
    cyclic_xcorr,
    shifted_preamble,
    snr_to_noise_var,
    superpose_receive,
    synthesize_tx,
    threshold_detect,
    zc_root,
)

CFG = PrachConfig()
PRIMES = [139, 839]


def brute_xcorr(a, b):
    n = len(a)
    return np.array([abs(np.sum(a * np.conj(np.roll(b, -m)))) for m in range(n)])


def test_defaults_give_104_preambles():
    assert CFG.n_preambles == 104
    assert CFG.shifts_per_root == 104
    seqs = {shifted_preamble(CFG.preamble(i), CFG).tobytes() for i in range(CFG.n_preambles)}
    assert len(seqs) == 104


def test_zc_first_elements():
    z = zc_root(1, 839)
    assert z[0] == 1 + 0j
    assert z[1] == pytest.approx(np.exp(-2j * np.pi / 839), abs=1e-14)


@given(st.sampled_from(PRIMES), st.data())
@settings(max_examples=30, deadline=None)
def test_zc_unit_modulus(n_zc, data):
    r = data.draw(st.integers(1, n_zc - 1))
    assert np.max(np.abs(np.abs(zc_root(r, n_zc)) - 1.0)) < 1e-12


@pytest.mark.parametrize("n_zc, r", [(840, 1), (839, 0), (839, 839), (1, 1)])
def test_zc_rejects_bad_inputs(n_zc, r):
    with pytest.raises(PrachConfigError):
        zc_root(r, n_zc)


def test_config_validation():
    with pytest.raises(PrachConfigError):
        PrachConfig(n_zc=840)
    with pytest.raises(PrachConfigError):
        PrachConfig(n_cs=5)  # tau_max + 2 * tau_e_max = 6 does not fit
    with pytest.raises(PrachConfigError):
        PrachConfig(roots=(0,))


def test_fft_correlation_matches_direct_sum():
    rng = np.random.default_rng(3)
    a = complex_noise(rng, 139, 1.0)
    b = complex_noise(rng, 139, 1.0)
    assert np.allclose(cyclic_xcorr(a, b, norm="n") * 139, brute_xcorr(a, b), atol=1e-9)


def test_autocorrelation_sqrt_norm():
    c = cyclic_xcorr(zc_root(1, 839), zc_root(1, 839))
    assert c[0] == pytest.approx(np.sqrt(839), abs=1e-9)
    assert c[0] == pytest.approx(28.9655, abs=1e-4)
    assert np.max(c[1:]) <= 1e-9 * np.sqrt(839)


def test_autocorrelation_n_norm_peak_is_one():
    # sqrt(N) peak rescaled by a further 1/sqrt(N)
    c = cyclic_xcorr(zc_root(1, 839), zc_root(1, 839), norm="n")
    assert c[0] == pytest.approx(1.0, abs=1e-12)


def test_cross_root_constant():
    c = cyclic_xcorr(zc_root(1, 839), zc_root(2, 839))
    assert np.max(np.abs(c - 1.0)) <= 1e-9


def test_xcorr_errors():
    with pytest.raises(ValueError):
        cyclic_xcorr(np.ones(5), np.ones(6))
    with pytest.raises(ValueError):
        cyclic_xcorr(np.ones(5), np.ones(5), norm="max")


def test_zero_shift_is_root():
    assert np.array_equal(shifted_preamble(Preamble(1, 0), CFG), zc_root(1, 839))


@pytest.mark.parametrize("i", [0, 1, 17, 103])
def test_shift_definition(i):
    n = np.arange(839)
    assert np.allclose(shifted_preamble(Preamble(1, i), CFG), zc_root(1, 839)[(n + i * 8) % 839])


def test_invalid_preamble():
    with pytest.raises(PrachConfigError):
        shifted_preamble(Preamble(1, 104), CFG)
    with pytest.raises(PrachConfigError):
        shifted_preamble(Preamble(2, 0), CFG)


def test_tx_identity_and_power():
    p = Preamble(1, 5)
    assert np.array_equal(synthesize_tx(UserTx(p), CFG), shifted_preamble(p, CFG))
    assert np.allclose(np.abs(synthesize_tx(UserTx(p, power=4.0), CFG)), 2.0)


def test_tx_frequency_ramp_one_rotation():
    f = 1.0 / (CFG.n_zc * CFG.sample_period_s)
    p = Preamble(1, 0)
    ratio = synthesize_tx(UserTx(p, freq_precomp_hz=f), CFG) / shifted_preamble(p, CFG)
    n = np.arange(CFG.n_zc)
    assert np.allclose(ratio, np.exp(-2j * np.pi * n / CFG.n_zc))


def test_residual_timing_limit():
    with pytest.raises(PrachConfigError):
        synthesize_tx(UserTx(Preamble(1, 0), residual_timing_samples=3), CFG)


def test_receive_empty_and_identity():
    assert not np.any(superpose_receive([], [], 0.0, CFG))
    u = UserTx(Preamble(1, 9))
    rx = superpose_receive([u], [ChannelRealization.identity(CFG.n_ant)], 0.0, CFG)
    assert rx.shape == (8, 839)
    assert np.allclose(rx, synthesize_tx(u, CFG)[None, :])


def test_receive_superposition():
    u1 = UserTx(Preamble(1, 3))
    u2 = UserTx(Preamble(1, 3), power=2.0)
    ident = ChannelRealization.identity(CFG.n_ant)
    rx = superpose_receive([u1, u2], [ident, ident], 0.0, CFG)
    assert np.allclose(rx[0], synthesize_tx(u1, CFG) + synthesize_tx(u2, CFG))


def test_receive_linearity_with_noise():
    rng = np.random.default_rng(5)
    gains = [rng.standard_normal((8, 2)) + 1j * rng.standard_normal((8, 2)) for _ in range(3)]
    chans = [ChannelRealization(g, (0, 2)) for g in gains]
    users = [UserTx(Preamble(1, i), residual_timing_samples=r) for i, r in [(0, 1), (4, -2), (4, 0)]]
    joint = superpose_receive(users, chans, 0.3, CFG, np.random.default_rng(11))
    parts = sum(superpose_receive([u], [c], 0.0, CFG) for u, c in zip(users, chans))
    noise = complex_noise(np.random.default_rng(11), (8, 839), 0.3)
    assert np.allclose(joint, parts + noise)


def test_receive_errors():
    with pytest.raises(ValueError):
        superpose_receive([UserTx(Preamble(1, 0))], [], 0.0, CFG)
    with pytest.raises(ValueError):
        superpose_receive([], [], -1.0, CFG)


def test_every_preamble_peaks_at_its_lag():
    ident = [ChannelRealization.identity(1)]
    cfg1 = PrachConfig(n_ant=1)
    for i in range(cfg1.n_preambles):
        rx = superpose_receive([UserTx(Preamble(1, i))], ident, 0.0, cfg1)
        c = correlation_magnitudes(rx, 1, cfg1)[0]
        assert int(np.argmax(c)) == i * cfg1.n_cs
        wins = correlate_windows(rx, 1, cfg1)
        peaks = [w.values.max() for w in wins]
        assert int(np.argmax(peaks)) == i
        assert sorted(peaks)[-2] < 1e-9


def test_windows_of_zero_rx():
    wins = correlate_windows(np.zeros((8, 839), complex), 1, CFG)
    assert len(wins) == 104
    assert all(w.shape == (8, 8) and not w.values.any() for w in wins)
    assert [w.preamble_index for w in wins] == list(range(104))


def test_noise_only_window_energy():
    rng = np.random.default_rng(0)
    cfg1 = PrachConfig(n_ant=1)
    var = 2.0
    energy = []
    for _ in range(200):  # 200 draws x 839 lags ~ 1.7e5 samples
        rx = complex_noise(rng, (1, 839), var)
        energy.append(correlation_magnitudes(rx, 1, cfg1) ** 2)
    assert np.mean(energy) == pytest.approx(var / 839, rel=0.02)


def test_threshold_detect():
    assert not threshold_detect(CorrelationWindow(np.zeros((8, 8)), 0), 0.01)
    w = CorrelationWindow(np.full((2, 8), 0.5), 0)
    assert not threshold_detect(w, 0.5)
    assert threshold_detect(w, 0.4999)
    rx = superpose_receive([UserTx(Preamble(1, 2))], [ChannelRealization.identity(8)], 0.0, CFG)
    win = correlate_windows(rx, 1, CFG)[2]
    assert win.values.max() == pytest.approx(1.0)
    assert threshold_detect(win, 0.999)
    with pytest.raises(ValueError):
        threshold_detect(w, -1.0)


def test_window_validation():
    with pytest.raises(ValueError):
        CorrelationWindow(np.ones(8), 0)
    with pytest.raises(ValueError):
        CorrelationWindow(-np.ones((1, 8)), 0)


def test_snr_convention():
    assert snr_to_noise_var(0.0) == 1.0
    assert snr_to_noise_var(10.0) == pytest.approx(0.1)
    assert snr_to_noise_var(-13.0) == pytest.approx(10 ** 1.3)
