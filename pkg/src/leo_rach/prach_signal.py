"""Zadoff-Chu preambles, multi-user multi-antenna reception, ZCZ correlation.

All timing shifts are cyclic modulo the sequence length, so the ideal
ZC correlation algebra holds exactly at the receiver. Correlation lags use
the same sign convention as the transmit model: a sequence read at index
``n + s`` correlates to a peak at lag ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ntn_channel import ChannelRealization

DEFAULT_SAMPLE_PERIOD_US = 800.0 / 839.0


class PrachConfigError(ValueError):
    """Invalid PRACH configuration or preamble."""


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


@dataclass(frozen=True)
class PrachConfig:
    """PRACH layout: ZC length, cyclic shift, roots, antennas and ZCZ budget.

    ``tau_max`` is the channel delay spread and ``tau_e_max`` the worst-case
    timing pre-compensation error, both in samples.
    """

    n_zc: int = 839
    n_cs: int = 8
    roots: tuple[int, ...] = (1,)
    n_ant: int = 8
    sample_period_us: float = DEFAULT_SAMPLE_PERIOD_US
    tau_max: int = 2
    tau_e_max: int = 2

    def __post_init__(self):
        object.__setattr__(self, "roots", tuple(int(r) for r in self.roots))
        if not is_prime(self.n_zc):
            raise PrachConfigError(f"n_zc={self.n_zc} is not prime")
        if not self.roots:
            raise PrachConfigError("at least one root index is required")
        if len(set(self.roots)) != len(self.roots):
            raise PrachConfigError(f"duplicate root indices in {self.roots}")
        for r in self.roots:
            if not 1 <= r <= self.n_zc - 1:
                raise PrachConfigError(f"root {r} outside [1, {self.n_zc - 1}]")
        if self.n_ant < 1:
            raise PrachConfigError("n_ant must be >= 1")
        if self.n_cs < 1 or self.n_cs > self.n_zc:
            raise PrachConfigError(f"n_cs={self.n_cs} outside [1, n_zc]")
        if self.tau_max < 0 or self.tau_e_max < 0:
            raise PrachConfigError("delay budgets must be nonnegative")
        if self.n_cs < self.tau_max + 2 * self.tau_e_max:
            raise PrachConfigError(
                f"n_cs={self.n_cs} violates the ZCZ condition "
                f"n_cs >= tau_max + 2*tau_e_max = {self.tau_max + 2 * self.tau_e_max}"
            )
        if self.sample_period_us <= 0:
            raise PrachConfigError("sample_period_us must be positive")

    @property
    def shifts_per_root(self) -> int:
        return self.n_zc // self.n_cs

    @property
    def n_preambles(self) -> int:
        return len(self.roots) * self.shifts_per_root

    @property
    def sample_period_s(self) -> float:
        return self.sample_period_us * 1e-6

    def preamble(self, index: int) -> "Preamble":
        """Map a flat preamble index in ``[0, n_preambles)`` to (root, shift)."""
        if not 0 <= index < self.n_preambles:
            raise PrachConfigError(f"preamble index {index} outside [0, {self.n_preambles})")
        root_pos, shift = divmod(index, self.shifts_per_root)
        return Preamble(self.roots[root_pos], shift)

    def preamble_index(self, p: "Preamble") -> int:
        validate_preamble(p, self)
        return self.roots.index(p.root) * self.shifts_per_root + p.shift


@dataclass(frozen=True)
class Preamble:
    root: int
    shift: int


def validate_preamble(p: Preamble, cfg: PrachConfig) -> None:
    if p.root not in cfg.roots:
        raise PrachConfigError(f"root {p.root} not configured (roots={cfg.roots})")
    if not 0 <= p.shift <= cfg.shifts_per_root - 1:
        raise PrachConfigError(f"shift {p.shift} outside [0, {cfg.shifts_per_root - 1}]")


@dataclass(frozen=True)
class UserTx:
    """One user's preamble transmission and its residual synchronisation errors."""

    preamble: Preamble
    power: float = 1.0
    ta_precomp_samples: int = 0
    freq_precomp_hz: float = 0.0
    residual_timing_samples: int = 0
    residual_freq_hz: float = 0.0

    def __post_init__(self):
        if not self.power > 0:
            raise PrachConfigError(f"transmit power must be positive, got {self.power}")

    def validate(self, cfg: PrachConfig) -> None:
        validate_preamble(self.preamble, cfg)
        if abs(self.residual_timing_samples) > cfg.tau_e_max:
            raise PrachConfigError(
                f"|residual timing| {abs(self.residual_timing_samples)} exceeds tau_e_max={cfg.tau_e_max}"
            )


@dataclass
class CorrelationWindow:
    """Per-antenna correlation magnitudes over one zero-correlation zone."""

    values: np.ndarray
    preamble_index: int
    root: int = field(default=1)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"window must be 2-D (n_ant, n_cs), got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("correlation magnitudes must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def zc_root(r: int, n_zc: int) -> np.ndarray:
    """Root Zadoff-Chu sequence ``exp(-j*pi*r*n*(n+1)/n_zc)``."""
    if not is_prime(n_zc):
        raise PrachConfigError(f"n_zc={n_zc} is not prime")
    if not 1 <= r < n_zc:
        raise PrachConfigError(f"root {r} outside [1, {n_zc - 1}]")
    n = np.arange(n_zc, dtype=np.int64)
    # reduce the exponent modulo 2*n_zc before scaling to keep phases exact
    phase = (r * n * (n + 1)) % (2 * n_zc)
    return np.exp(-1j * np.pi * phase / n_zc)


def shifted_preamble(p: Preamble, cfg: PrachConfig) -> np.ndarray:
    validate_preamble(p, cfg)
    return np.roll(zc_root(p.root, cfg.n_zc), -p.shift * cfg.n_cs)


def cyclic_xcorr(a: np.ndarray, b: np.ndarray, norm: str = "sqrt_n") -> np.ndarray:
    """Magnitude of ``sum_n a[n] * conj(b[(n+m) mod N])`` for every lag ``m``.

    ``norm='sqrt_n'`` scales by 1/sqrt(N) (ideal-correlation identities),
    ``norm='n'`` by 1/N (receiver form). Works along the last axis.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    n = a.shape[-1]
    if norm == "sqrt_n":
        scale = 1.0 / np.sqrt(n)
    elif norm == "n":
        scale = 1.0 / n
    else:
        raise ValueError(f"unknown norm {norm!r}; expected 'sqrt_n' or 'n'")
    raw = np.fft.ifft(np.conj(np.fft.fft(a, axis=-1)) * np.fft.fft(b, axis=-1), axis=-1)
    return np.abs(raw) * scale


def synthesize_tx(u: UserTx, cfg: PrachConfig) -> np.ndarray:
    u.validate(cfg)
    z = shifted_preamble(u.preamble, cfg)
    s = np.sqrt(u.power) * np.roll(z, -int(u.ta_precomp_samples))
    if u.freq_precomp_hz:
        n = np.arange(cfg.n_zc)
        s = s * np.exp(-2j * np.pi * u.freq_precomp_hz * n * cfg.sample_period_s)
    return s


def superpose_receive(
    users: Sequence[UserTx],
    channels: Sequence[ChannelRealization],
    noise_var: float,
    cfg: PrachConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Received baseband at every antenna, shape ``(n_ant, n_zc)``.

    Each path of each user reads the transmit sequence at ``n + delay +
    residual`` (cyclic), is scaled by its per-antenna gain and rotated by
    the user's residual CFO. Noise is circularly-symmetric complex
    Gaussian with variance ``noise_var`` per sample.
    """
    if len(users) != len(channels):
        raise ValueError(f"{len(users)} users but {len(channels)} channel realizations")
    if noise_var < 0:
        raise ValueError("noise_var must be nonnegative")
    n = np.arange(cfg.n_zc)
    y = np.zeros((cfg.n_ant, cfg.n_zc), dtype=complex)
    for u, ch in zip(users, channels):
        if ch.gains.shape[0] != cfg.n_ant:
            raise ValueError(f"channel has {ch.gains.shape[0]} antennas, config has {cfg.n_ant}")
        s = synthesize_tx(u, cfg)
        contrib = np.zeros_like(y)
        for ell, delay in enumerate(ch.delays):
            shifted = np.roll(s, -(int(delay) + int(u.residual_timing_samples)))
            contrib += ch.gains[:, ell : ell + 1] * shifted[None, :]
        if u.residual_freq_hz:
            contrib *= np.exp(-2j * np.pi * u.residual_freq_hz * n * cfg.sample_period_s)[None, :]
        y += contrib
    if noise_var > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_var > 0")
        y += complex_noise(rng, y.shape, noise_var)
    return y


def complex_noise(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def correlation_magnitudes(rx: np.ndarray, root: int, cfg: PrachConfig) -> np.ndarray:
    """``|c_r^j[m]|`` with 1/N normalization for all lags; shape ``(..., n_zc)``."""
    rx = np.asarray(rx)
    if rx.shape[-1] != cfg.n_zc:
        raise ValueError(f"rx length {rx.shape[-1]} != n_zc {cfg.n_zc}")
    return cyclic_xcorr(rx, zc_root(root, cfg.n_zc), norm="n")


def correlate_windows(rx: np.ndarray, root: int, cfg: PrachConfig) -> list[CorrelationWindow]:
    """Slice the full correlation into one window per cyclic shift of ``root``."""
    rx = np.atleast_2d(rx)
    if rx.shape != (cfg.n_ant, cfg.n_zc):
        raise ValueError(f"rx shape {rx.shape} != ({cfg.n_ant}, {cfg.n_zc})")
    mags = correlation_magnitudes(rx, root, cfg)
    base = cfg.roots.index(root) * cfg.shifts_per_root
    out = []
    for i in range(cfg.shifts_per_root):
        vals = mags[:, i * cfg.n_cs : (i + 1) * cfg.n_cs]
        out.append(CorrelationWindow(vals.copy(), preamble_index=base + i, root=root))
    return out


def window_matrix(root: int, shift: int, cfg: PrachConfig) -> np.ndarray:
    """Matrix ``M`` with ``(rx @ M)[..., k]`` equal to the unnormalized correlation at
    lag ``shift*n_cs + k``; used to evaluate a single window for many receptions."""
    z = zc_root(root, cfg.n_zc)
    n = np.arange(cfg.n_zc)[:, None]
    lags = shift * cfg.n_cs + np.arange(cfg.n_cs)[None, :]
    return np.conj(z[(n + lags) % cfg.n_zc])


def threshold_detect(w: CorrelationWindow, threshold: float) -> bool:
    """Strict ``>`` test of the antenna-averaged window peak against ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    return bool(np.max(np.mean(w.values, axis=0)) > threshold)


def snr_to_noise_var(snr_db: float) -> float:
    """Per-antenna, per-sample noise variance for unit-power preamble symbols."""
    return float(10.0 ** (-snr_db / 10.0))
