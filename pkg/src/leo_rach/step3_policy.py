"""Opportunistic Step-3 transmission probabilities from collision estimates.

The base station turns each preamble's estimated collision class into a
posterior over the true number of colliders (confusion matrix times a
binomial prior), then picks the transmit probability that maximizes the
chance that exactly one collider sends its Step-3 message.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial

EPS = 1e-12

TRANSMIT = "transmit_step3"
BACKOFF = "backoff"

SCHEMES = ("conventional", "withhold", "proposed")


class PosteriorError(ValueError):
    """The classifier never outputs ``k_hat`` under the given prior."""


def _check_dist(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what} must be a nonnegative vector summing to 1, got {p}")
    return p


@dataclass(frozen=True)
class ClassPrior:
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _check_dist(self.p, "prior"))

    @property
    def k_max(self) -> int:
        return len(self.p) - 1


@dataclass(frozen=True)
class ClassPosterior:
    p: np.ndarray
    conditioned_on: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "p", _check_dist(self.p, "posterior"))

    @classmethod
    def point_mass(cls, k: int, k_max: int) -> "ClassPosterior":
        p = np.zeros(k_max + 1)
        p[k] = 1.0
        return cls(p, k)

    def moments(self) -> tuple[float, float, float]:
        """E[k], E[k(k-1)], E[k(k-1)(k-2)]."""
        k = np.arange(len(self.p), dtype=float)
        return (
            float(np.dot(k, self.p)),
            float(np.dot(k * (k - 1), self.p)),
            float(np.dot(k * (k - 1) * (k - 2), self.p)),
        )


def binomial_prior(d_hat: int, n_pa: int, k_max: int) -> ClassPrior:
    """Collider-count prior when ``d_hat`` users pick uniformly among ``n_pa``
    preambles; the mass of ``k >= k_max`` is folded into class ``k_max``."""
    if d_hat < 0 or n_pa < 1:
        raise ValueError(f"need d_hat >= 0 and n_pa >= 1, got {d_hat}, {n_pa}")
    d_hat = int(d_hat)
    p = np.zeros(k_max + 1)
    q = 1.0 / n_pa
    if q == 1.0:
        p[min(d_hat, k_max)] = 1.0
        return ClassPrior(p)
    for k in range(min(k_max, d_hat + 1)):
        log_pmf = (
            math.lgamma(d_hat + 1) - math.lgamma(k + 1) - math.lgamma(d_hat - k + 1)
            + k * math.log(q) + (d_hat - k) * math.log1p(-q)
        )
        p[k] = math.exp(log_pmf)
    if d_hat >= k_max:
        p[k_max] = max(0.0, 1.0 - p[:k_max].sum())
    return ClassPrior(p / p.sum())


def posterior(q, prior: ClassPrior, k_hat: int) -> ClassPosterior:
    """Bayes update with the confusion matrix ``q[pred, true]`` as likelihood.

    Undefined (NaN) confusion columns contribute no likelihood.
    """
    q = np.nan_to_num(np.asarray(getattr(q, "q", q), dtype=float), nan=0.0)
    if q.shape != (len(prior.p), len(prior.p)):
        raise ValueError(f"confusion matrix shape {q.shape} does not match {len(prior.p)} classes")
    joint = q[k_hat] * prior.p
    total = joint.sum()
    if total <= 0:
        raise PosteriorError(f"classifier never outputs class {k_hat} under this prior")
    return ClassPosterior(joint / total, k_hat)


def success_probability(p_tx: float, post: ClassPosterior) -> float:
    """Exact chance that exactly one collider transmits with probability ``p_tx``."""
    if not 0.0 <= p_tx <= 1.0:
        raise ValueError(f"transmit probability must lie in [0, 1], got {p_tx}")
    k = np.arange(len(post.p))
    terms = k * p_tx * np.power(1.0 - p_tx, np.maximum(k - 1, 0)) * post.p
    return float(terms.sum())


def _success_polynomial(post: ClassPosterior) -> Polynomial:
    one_minus = Polynomial([1.0, -1.0])
    poly = Polynomial([0.0])
    for k, w in enumerate(post.p):
        # negligible weights would leave a near-zero leading coefficient
        # and an ill-conditioned root problem
        if k and w > EPS:
            poly = poly + w * k * Polynomial([0.0, 1.0]) * one_minus ** (k - 1)
    return poly


def taylor_access_prob(post: ClassPosterior) -> float:
    """Closed-form maximizer of the third-order expansion of the success
    probability, with root choice made on the exact objective."""
    m1, m2, m3 = post.moments()
    if m3 <= EPS:
        if m2 <= EPS:
            return 1.0 if m1 > EPS else 0.0
        return float(np.clip(m1 / (2.0 * m2), 0.0, 1.0))
    candidates = [0.0, 1.0]
    disc = 4.0 * m2 * m2 - 6.0 * m3 * m1
    if disc >= 0:
        for sign in (1.0, -1.0):
            r = (2.0 * m2 + sign * math.sqrt(disc)) / (3.0 * m3)
            if 0.0 <= r <= 1.0:
                candidates.insert(0, r)
    return max(candidates, key=lambda c: success_probability(c, post))


def optimal_access_prob(post: ClassPosterior, refine: bool = True) -> float:
    """Step-3 transmit probability for one preamble.

    Starts from :func:`taylor_access_prob`. With ``refine`` the stationary
    points of the exact success polynomial on [0, 1] are also considered,
    which fixes the expansion's error when four or more colliders are
    likely (for a point mass at k = 4 the expansion gives 1/3 instead of
    1/4, and it has no real root for k >= 5).
    """
    p_taylor = taylor_access_prob(post)
    if not refine:
        return p_taylor
    m1, _, _ = post.moments()
    if m1 <= EPS:
        return 0.0
    poly = _success_polynomial(post)
    candidates = [p_taylor, 0.0, 1.0]
    for r in poly.deriv().roots():
        if abs(r.imag) < 1e-9 and -1e-12 <= r.real <= 1.0 + 1e-12:
            candidates.append(float(np.clip(r.real, 0.0, 1.0)))
    best = p_taylor
    best_val = success_probability(p_taylor, post)
    for c in candidates[1:]:
        v = success_probability(c, post)
        if v > best_val + 1e-15:
            best, best_val = c, v
    return float(best)


def estimate_active_users(k_hats: Sequence[int]) -> int:
    return int(np.sum(np.asarray(k_hats, dtype=np.int64)))


@dataclass(frozen=True)
class PolicyEntry:
    preamble_index: int
    k_hat: int
    transmit_prob: float
    grant_id: int
    temp_id: int


@dataclass
class AccessPolicy:
    entries: list[PolicyEntry] = field(default_factory=list)
    d_hat: int = 0

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not 0.0 <= e.transmit_prob <= 1.0:
                raise ValueError(f"transmit probability {e.transmit_prob} outside [0, 1]")
            if e.preamble_index in seen:
                raise ValueError(f"duplicate RAR entry for preamble {e.preamble_index}")
            seen.add(e.preamble_index)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, preamble_index: int) -> PolicyEntry | None:
        for e in self.entries:
            if e.preamble_index == preamble_index:
                return e
        return None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["preamble_index", "k_hat", "P", "grant_id"])
            for e in self.entries:
                w.writerow([e.preamble_index, e.k_hat, repr(e.transmit_prob), e.grant_id])


def build_policy(
    k_hats: Sequence[int],
    q,
    n_pa: int | None = None,
    scheme: str = "proposed",
    refine: bool = True,
    first_grant_id: int = 0,
) -> AccessPolicy:
    """RAR contents for one RACH slot from per-preamble class estimates.

    ``k_hats[i]`` is the estimated class of preamble ``i``. Preambles
    estimated idle get no entry. ``scheme`` selects the response:

    * ``proposed``: every busy preamble, with its optimal transmit probability;
    * ``withhold``: only preambles estimated collision-free (class 1), P = 1;
    * ``conventional``: every busy preamble, P = 1.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    k_hats = np.asarray(k_hats, dtype=np.int64)
    n_pa = len(k_hats) if n_pa is None else n_pa
    d_hat = estimate_active_users(k_hats)
    entries = []
    cache: dict[int, float] = {}
    prior = None
    for idx in np.flatnonzero(k_hats > 0):
        k_hat = int(k_hats[idx])
        if scheme == "withhold" and k_hat >= 2:
            continue
        if scheme == "proposed":
            if k_hat not in cache:
                if prior is None:
                    n_classes = np.shape(getattr(q, "q", q))[0]
                    prior = binomial_prior(d_hat, n_pa, n_classes - 1)
                try:
                    post = posterior(q, prior, k_hat)
                except PosteriorError:
                    post = ClassPosterior(prior.p, k_hat)
                cache[k_hat] = optimal_access_prob(post, refine=refine)
            p_tx = cache[k_hat]
        else:
            p_tx = 1.0
        gid = first_grant_id + len(entries)
        entries.append(PolicyEntry(int(idx), k_hat, float(p_tx), gid, gid))
    return AccessPolicy(entries, d_hat)


def user_decision(entry: PolicyEntry, rng: np.random.Generator) -> str:
    if entry.transmit_prob >= 1.0:
        return TRANSMIT
    if entry.transmit_prob <= 0.0:
        return BACKOFF
    return TRANSMIT if rng.random() < entry.transmit_prob else BACKOFF
