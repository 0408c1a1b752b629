"""Tapped-delay-line channel realizations and LEO link geometry."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ChannelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TdlProfile:
    """Tap delays (integer samples) and average tap powers (linear).

    With ``los=True`` the first tap is deterministic in magnitude and only
    its phase is random; the remaining taps are Rayleigh.
    """

    name: str
    delays: tuple[int, ...]
    powers: tuple[float, ...]
    los: bool = False

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))
        object.__setattr__(self, "powers", tuple(float(p) for p in self.powers))
        if not self.delays or len(self.delays) != len(self.powers):
            raise ChannelConfigError("delays and powers must be non-empty and of equal length")
        if self.delays[0] < 0:
            raise ChannelConfigError("tap delays must be >= 0")
        if any(b <= a for a, b in zip(self.delays, self.delays[1:])):
            raise ChannelConfigError(f"tap delays must be strictly increasing, got {self.delays}")
        if any(p < 0 for p in self.powers):
            raise ChannelConfigError("tap powers must be nonnegative")
        if abs(sum(self.powers) - 1.0) > 1e-9:
            raise ChannelConfigError(f"tap powers sum to {sum(self.powers)!r}, expected 1")

    @property
    def tau_max(self) -> int:
        return self.delays[-1]

    @property
    def n_taps(self) -> int:
        return len(self.delays)

    def check_budget(self, n_cs: int, tau_e_max: int) -> None:
        """Raise unless every path stays inside the zero-correlation zone."""
        if self.tau_max + 2 * tau_e_max >= n_cs:
            raise ChannelConfigError(
                f"profile {self.name!r}: max delay {self.tau_max} + 2*{tau_e_max} "
                f"does not fit a ZCZ of {n_cs} samples"
            )


# NLoS role (stands in for TDL-B): three Rayleigh taps.
NLOS_PROFILE = TdlProfile("nlos", delays=(0, 1, 2), powers=(0.65, 0.25, 0.10), los=False)
# LoS-dominant role (stands in for TDL-D): deterministic first tap.
LOS_PROFILE = TdlProfile("los", delays=(0, 1, 2), powers=(0.90, 0.07, 0.03), los=True)

PROFILES = {"nlos": NLOS_PROFILE, "los": LOS_PROFILE, "tdl-b": NLOS_PROFILE, "tdl-d": LOS_PROFILE}


def get_profile(name_or_path: str | Path) -> TdlProfile:
    key = str(name_or_path).lower()
    if key in PROFILES:
        return PROFILES[key]
    path = Path(name_or_path)
    if path.exists():
        return load_profile(path)
    raise ChannelConfigError(f"unknown channel profile {name_or_path!r} (known: {sorted(PROFILES)})")


def load_profile(path: str | Path) -> TdlProfile:
    """Read a profile from an INI-style key-value file.

    Example::

        [profile]
        name = tdl-d-custom
        delays = 0, 1, 2
        powers = 0.9, 0.07, 0.03
        los = true
    """
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if "profile" not in parser:
        raise ChannelConfigError(f"{path}: missing [profile] section")
    sec = parser["profile"]
    unknown = set(sec) - {"name", "delays", "powers", "los"}
    if unknown:
        raise ChannelConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        delays = [int(x) for x in sec["delays"].split(",")]
        powers = [float(x) for x in sec["powers"].split(",")]
    except KeyError as exc:
        raise ChannelConfigError(f"{path}: missing key {exc}") from None
    return TdlProfile(
        name=sec.get("name", Path(path).stem),
        delays=tuple(delays),
        powers=tuple(powers),
        los=sec.getboolean("los", fallback=False),
    )


@dataclass(frozen=True)
class ChannelRealization:
    gains: np.ndarray  # (n_ant, L) complex
    delays: tuple[int, ...]  # shared across antennas

    def __post_init__(self):
        if self.gains.ndim != 2 or self.gains.shape[1] != len(self.delays):
            raise ChannelConfigError(
                f"gains shape {self.gains.shape} inconsistent with {len(self.delays)} delays"
            )

    @classmethod
    def identity(cls, n_ant: int) -> "ChannelRealization":
        return cls(np.ones((n_ant, 1), dtype=complex), (0,))


def sample_channel_gains(
    profile: TdlProfile, n_ant: int, size: tuple[int, ...], rng: np.random.Generator
) -> np.ndarray:
    """Independent tap gains of shape ``(*size, n_ant, n_taps)``.

    Rayleigh taps are CN(0, power); a LoS first tap has magnitude
    sqrt(power) and a uniform random phase per antenna.
    """
    shape = (*size, n_ant, profile.n_taps)
    powers = np.asarray(profile.powers)
    g = np.sqrt(powers / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    if profile.los:
        phase = rng.uniform(0.0, 2.0 * np.pi, shape[:-1])
        g[..., 0] = np.sqrt(powers[0]) * np.exp(1j * phase)
    return g


def sample_channel(profile: TdlProfile, n_ant: int, rng: np.random.Generator) -> ChannelRealization:
    return ChannelRealization(sample_channel_gains(profile, n_ant, (), rng), profile.delays)


def sample_timing_residual(tau_e_max: int, rng: np.random.Generator) -> int:
    if tau_e_max < 0:
        raise ValueError("tau_e_max must be >= 0")
    return int(rng.integers(-tau_e_max, tau_e_max + 1))


@dataclass(frozen=True)
class GeometryModel:
    """Range of one-way feeder-to-user propagation delay over the footprint."""

    one_way_delay_ms_range: tuple[float, float] = (2.0, 6.44)

    def __post_init__(self):
        lo, hi = self.one_way_delay_ms_range
        if lo < 0 or hi < lo:
            raise ChannelConfigError(f"invalid delay range {self.one_way_delay_ms_range}")


def sample_propagation_delay(g: GeometryModel, rng: np.random.Generator) -> float:
    lo, hi = g.one_way_delay_ms_range
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))
