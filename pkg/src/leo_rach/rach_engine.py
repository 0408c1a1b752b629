"""Discrete-event simulation of the 4-step random access procedure.

Each RACH slot, ready users send a preamble. The base station estimates the
number of users on every preamble (oracle counts, threshold detection or
the trained classifier), builds the RAR per scheme, and every attempt is
then resolved on the deterministic message timeline below (all in ms,
``d`` = the user's one-way delay, ``t0`` = slot start)::

    RAR arrives        t_rar = t0 + t_step1 + d + t_detect + t_step2 + d
    RAR window closes          t0 + t_step1 + 2d + rar_window
    Step 3 ends        t_s3  = t_rar + t_proc23 + t_step3
    CR arrives                 t_s3 + d + t_step4 + d
    CR timer expires           t_s3 + cr_window

A failed attempt starts a uniform backoff in ``[0, backoff_window]`` at
the moment the user learns of the failure; the user transmits again in
the first slot at or after the backoff expires.
"""

from __future__ import annotations

import concurrent.futures
import csv
import heapq
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import substream
from .collision_net.evaluation import ConfusionMatrix
from .collision_net.model import Network
from .ntn_channel import GeometryModel, get_profile, sample_channel, sample_propagation_delay, sample_timing_residual
from .prach_signal import (
    PrachConfig,
    UserTx,
    correlate_windows,
    snr_to_noise_var,
    superpose_receive,
    threshold_detect,
)
from .step3_policy import SCHEMES, TRANSMIT, build_policy, user_decision

DETECTORS = ("oracle", "trained_classifier")
PHASES = ("idle", "awaiting_rar", "awaiting_cr", "backed_off", "succeeded", "failed")


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_users: int = 50
    n_slots: int = 2000
    slot_period_ms: float = 5.0
    max_retries: int = 10
    t_step1_ms: float = 1.0
    t_detect_ms: float = 2.0
    t_step2_ms: float = 1.0
    t_proc23_ms: float = 3.0
    t_step3_ms: float = 3.0
    t_step4_ms: float = 1.0
    rar_window_ms: float = 10.0
    cr_window_ms: float = 64.0
    backoff_window_ms: float = 20.0
    scheme: str = "proposed"
    detector: str = "oracle"
    snr_db: float = 10.0
    seed: int = 0
    # PRACH / channel used by the classifier-in-the-loop detector
    n_zc: int = 839
    n_cs: int = 8
    roots: tuple[int, ...] = (1,)
    n_ant: int = 8
    tau_e_max: int = 2
    channel_profile: str = "los"
    k_max: int = 6
    detect_threshold: float = 0.2
    # geometry and traffic
    delay_range_ms: tuple[float, float] = (2.0, 6.44)
    one_way_delay_ms: float | None = None
    arrival: str = "backlogged"
    arrival_rate_per_ms: float = 0.1
    # test hook: every attempt uses this preamble instead of a random one
    force_preamble: int | None = None
    refine_access_prob: bool = True

    def __post_init__(self):
        object.__setattr__(self, "roots", tuple(int(r) for r in self.roots))
        object.__setattr__(self, "delay_range_ms", tuple(float(v) for v in self.delay_range_ms))
        durations = (
            "slot_period_ms", "t_step1_ms", "t_detect_ms", "t_step2_ms", "t_proc23_ms",
            "t_step3_ms", "t_step4_ms", "rar_window_ms", "cr_window_ms", "backoff_window_ms",
        )
        for name in durations:
            if not getattr(self, name) > 0:
                raise SimConfigError(f"{name} must be > 0")
        if self.n_slots < 1:
            raise SimConfigError("n_slots must be >= 1")
        if self.n_users < 0:
            raise SimConfigError("n_users must be >= 0")
        if self.max_retries < 1:
            raise SimConfigError("max_retries must be >= 1")
        if self.scheme not in SCHEMES:
            raise SimConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.detector not in DETECTORS:
            raise SimConfigError(f"detector must be one of {DETECTORS}, got {self.detector!r}")
        if self.arrival not in ("backlogged", "poisson"):
            raise SimConfigError(f"arrival must be 'backlogged' or 'poisson', got {self.arrival!r}")
        if self.k_max < 1:
            raise SimConfigError("k_max must be >= 1")

    @property
    def prach(self) -> PrachConfig:
        return PrachConfig(n_zc=self.n_zc, n_cs=self.n_cs, roots=self.roots, n_ant=self.n_ant, tau_e_max=self.tau_e_max)

    @property
    def n_preambles(self) -> int:
        return len(self.roots) * (self.n_zc // self.n_cs)

    @property
    def horizon_ms(self) -> float:
        return self.n_slots * self.slot_period_ms

    def single_attempt_delay(self, one_way_ms: float) -> float:
        """Delay of an uncontested first-attempt success for a user at ``one_way_ms``."""
        return (
            4.0 * one_way_ms + self.t_step1_ms + self.t_detect_ms + self.t_step2_ms
            + self.t_proc23_ms + self.t_step3_ms + self.t_step4_ms
        )


@dataclass
class UserState:
    id: int
    one_way_delay_ms: float
    arrival_ms: float = 0.0
    phase: str = "idle"
    attempt_count: int = 0
    chosen_preamble: int | None = None
    first_attempt_time_ms: float | None = None
    outcome_time_ms: float | None = None
    ready_ms: float = 0.0
    attempts: list[dict] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.phase in ("succeeded", "failed")

    @property
    def delay_ms(self) -> float | None:
        if self.outcome_time_ms is None or self.first_attempt_time_ms is None:
            return None
        return self.outcome_time_ms - self.first_attempt_time_ms


@dataclass
class SimMetrics:
    avg_delay_ms: float
    avg_delay_success_ms: float
    n_success: int
    n_failed: int
    n_in_flight: int
    pusch_utilization: float
    grants_issued: int
    grants_used: int
    no_grants: bool = False


@dataclass
class ScenarioResult:
    metrics: SimMetrics
    users: list[UserState]
    config: SimConfig


def resolve_step3(transmitters: Sequence[int]) -> tuple[int | None, bool]:
    """(successful user or None, grant wasted). Two or more senders collide."""
    if len(transmitters) == 1:
        return transmitters[0], False
    return None, len(transmitters) == 0


def compute_metrics(users: Sequence[UserState], grants_issued: int, grants_used: int) -> SimMetrics:
    """Delay means cover users that reached a terminal state; users still
    mid-procedure are only reflected in ``n_in_flight``."""
    done = [u.delay_ms for u in users if u.terminal]
    ok = [u.delay_ms for u in users if u.phase == "succeeded"]
    no_grants = grants_issued == 0
    return SimMetrics(
        avg_delay_ms=float(np.mean(done)) if done else float("nan"),
        avg_delay_success_ms=float(np.mean(ok)) if ok else float("nan"),
        n_success=len(ok),
        n_failed=sum(u.phase == "failed" for u in users),
        n_in_flight=sum(not u.terminal for u in users),
        pusch_utilization=1.0 if no_grants else grants_used / grants_issued,
        grants_issued=grants_issued,
        grants_used=grants_used,
        no_grants=no_grants,
    )


class _ClassifierFrontEnd:
    """Synthesizes the slot's received signal and estimates per-preamble classes."""

    def __init__(self, cfg: SimConfig, net: Network | None, rng: np.random.Generator):
        self.cfg = cfg
        self.prach = cfg.prach
        self.profile = get_profile(cfg.channel_profile)
        self.profile.check_budget(self.prach.n_cs, self.prach.tau_e_max)
        self.net = net
        self.noise_var = snr_to_noise_var(cfg.snr_db)
        self.rng = rng

    def windows(self, choices: dict[int, int]) -> np.ndarray:
        users, channels = [], []
        for pre in choices.values():
            users.append(
                UserTx(
                    self.prach.preamble(pre),
                    ta_precomp_samples=self.prach.tau_e_max,
                    residual_timing_samples=sample_timing_residual(self.prach.tau_e_max, self.rng),
                )
            )
            channels.append(sample_channel(self.profile, self.prach.n_ant, self.rng))
        out = []
        for root in self.prach.roots:
            rx = superpose_receive(
                [u for u in users if u.preamble.root == root],
                [c for u, c in zip(users, channels) if u.preamble.root == root],
                self.noise_var,
                self.prach,
                self.rng,
            )
            out.extend(correlate_windows(rx, root, self.prach))
        return out

    def classify(self, choices: dict[int, int]) -> np.ndarray:
        wins = self.windows(choices)
        x = np.stack([w.values for w in wins])
        return np.argmax(self.net.logits(x), axis=1)

    def threshold(self, choices: dict[int, int]) -> np.ndarray:
        return np.array([int(threshold_detect(w, self.cfg.detect_threshold)) for w in self.windows(choices)])


def run_scenario(
    cfg: SimConfig,
    weights: Network | None = None,
    q: ConfusionMatrix | np.ndarray | None = None,
) -> ScenarioResult:
    learned = cfg.detector == "trained_classifier"
    if learned and cfg.scheme in ("withhold", "proposed"):
        if weights is None or q is None:
            raise SimConfigError(
                f"detector 'trained_classifier' with scheme {cfg.scheme!r} needs classifier weights and a confusion matrix"
            )
        if weights.arch.k_max != cfg.k_max or weights.arch.n_ant != cfg.n_ant or weights.arch.n_cs != cfg.n_cs:
            raise SimConfigError(
                f"classifier (n_ant={weights.arch.n_ant}, n_cs={weights.arch.n_cs}, K={weights.arch.k_max}) "
                f"does not match config (n_ant={cfg.n_ant}, n_cs={cfg.n_cs}, K={cfg.k_max})"
            )
    n_classes = cfg.k_max + 1
    if q is None:
        q = ConfusionMatrix.identity(n_classes)
    if np.shape(getattr(q, "q", q)) != (n_classes, n_classes):
        raise SimConfigError(f"confusion matrix must be {n_classes}x{n_classes}")
    n_pa = cfg.n_preambles
    if cfg.force_preamble is not None and not 0 <= cfg.force_preamble < n_pa:
        raise SimConfigError(f"force_preamble {cfg.force_preamble} outside [0, {n_pa})")

    proto = substream(cfg.seed, "protocol")
    geo_rng = substream(cfg.seed, "geometry")
    front = _ClassifierFrontEnd(cfg, weights, substream(cfg.seed, "channel")) if learned else None
    geometry = GeometryModel(cfg.delay_range_ms)

    users = []
    t_arr = 0.0
    for uid in range(cfg.n_users):
        d = cfg.one_way_delay_ms if cfg.one_way_delay_ms is not None else sample_propagation_delay(geometry, geo_rng)
        if cfg.arrival == "poisson":
            t_arr += float(geo_rng.exponential(1.0 / cfg.arrival_rate_per_ms))
        users.append(UserState(uid, d, arrival_ms=t_arr, ready_ms=t_arr))

    horizon = cfg.horizon_ms
    events: list[tuple[float, int, int, str, float]] = []
    seq = 0

    def schedule(t: float, uid: int, action: str, payload: float = 0.0) -> None:
        nonlocal seq
        heapq.heappush(events, (t, seq, uid, action, payload))
        seq += 1

    def apply_until(t: float) -> None:
        while events and events[0][0] <= t:
            when, _, uid, action, payload = heapq.heappop(events)
            u = users[uid]
            if action == "success":
                u.phase, u.outcome_time_ms = "succeeded", when
            elif action == "awaiting_cr":
                u.phase = "awaiting_cr"
            elif action == "fail":
                if u.attempt_count >= cfg.max_retries:
                    u.phase, u.outcome_time_ms = "failed", when
                else:
                    u.phase, u.ready_ms = "backed_off", payload

    def fail_at(u: UserState, t: float, record: dict) -> None:
        record["outcome"] = "fail"
        record["detected_ms"] = t
        backoff = float(proto.uniform(0.0, cfg.backoff_window_ms))
        schedule(t, u.id, "fail", t + backoff)

    grants_issued = grants_used = 0
    for s in range(cfg.n_slots):
        t0 = s * cfg.slot_period_ms
        apply_until(t0)
        senders = [u for u in users if u.phase in ("idle", "backed_off") and u.ready_ms <= t0]
        # a learned detector can false-alarm on an empty slot, so it runs every slot
        if not senders and not learned:
            continue
        choices: dict[int, int] = {}
        for u in senders:
            pre = cfg.force_preamble if cfg.force_preamble is not None else int(proto.integers(n_pa))
            choices[u.id] = pre
            u.chosen_preamble = pre
            u.attempt_count += 1
            u.phase = "awaiting_rar"
            if u.first_attempt_time_ms is None:
                u.first_attempt_time_ms = t0
        counts = np.bincount(np.fromiter(choices.values(), dtype=np.int64, count=len(choices)), minlength=n_pa)

        if not learned:
            k_hats = np.minimum(counts, cfg.k_max)
            if cfg.scheme == "conventional":
                k_hats = (counts > 0).astype(np.int64)
        elif cfg.scheme == "conventional":
            k_hats = front.threshold(choices)
        else:
            k_hats = front.classify(choices)
        policy = build_policy(
            k_hats, q, n_pa=n_pa, scheme=cfg.scheme, refine=cfg.refine_access_prob, first_grant_id=grants_issued
        )
        by_pre = {e.preamble_index: e for e in policy.entries}
        grants_issued += len(policy)

        on_grant: dict[int, list[int]] = {e.grant_id: [] for e in policy.entries}
        pending: list[tuple[UserState, dict, float]] = []
        for u in senders:
            d = u.one_way_delay_ms
            pre = choices[u.id]
            record = {"slot": s, "t0_ms": t0, "preamble": pre, "k_true": int(counts[pre])}
            u.attempts.append(record)
            entry = by_pre.get(pre)
            t_rar = t0 + cfg.t_step1_ms + 2 * d + cfg.t_detect_ms + cfg.t_step2_ms
            rar_close = t0 + cfg.t_step1_ms + 2 * d + cfg.rar_window_ms
            if entry is None or t_rar > rar_close:
                record["rar"] = False
                fail_at(u, rar_close, record)
                continue
            record["rar"] = True
            record["k_hat"] = entry.k_hat
            record["P"] = entry.transmit_prob
            if user_decision(entry, proto) != TRANSMIT:
                record["decision"] = "backoff"
                fail_at(u, t_rar, record)
                continue
            record["decision"] = "transmit"
            on_grant[entry.grant_id].append(u.id)
            pending.append((u, record, t_rar))

        winners = set()
        for gid, txs in on_grant.items():
            winner, _ = resolve_step3(txs)
            if winner is not None:
                winners.add(winner)
                grants_used += 1
        for u, record, t_rar in pending:
            d = u.one_way_delay_ms
            t_s3 = t_rar + cfg.t_proc23_ms + cfg.t_step3_ms
            schedule(t_rar, u.id, "awaiting_cr")
            t_cr = t_s3 + 2 * d + cfg.t_step4_ms
            if u.id in winners and t_cr <= t_s3 + cfg.cr_window_ms:
                record["outcome"] = "success"
                schedule(t_cr, u.id, "success")
            else:
                fail_at(u, t_s3 + cfg.cr_window_ms, record)

    apply_until(horizon)
    return ScenarioResult(compute_metrics(users, grants_issued, grants_used), users, cfg)


METRIC_COLUMNS = (
    "scheme", "detector", "n_users", "rep", "avg_delay_ms", "n_success", "pusch_utilization",
    "avg_delay_success_ms", "n_failed", "n_in_flight", "grants_issued", "no_grants",
)
SUMMARY_COLUMNS = (
    "scheme", "detector", "n_users", "n_reps",
    "avg_delay_ms_mean", "avg_delay_ms_se",
    "n_success_mean", "n_success_se",
    "pusch_utilization_mean", "pusch_utilization_se",
)


def metrics_row(cfg: SimConfig, rep: int, m: SimMetrics) -> dict:
    return {
        "scheme": cfg.scheme,
        "detector": cfg.detector,
        "n_users": cfg.n_users,
        "rep": rep,
        "avg_delay_ms": m.avg_delay_ms,
        "n_success": m.n_success,
        "pusch_utilization": m.pusch_utilization,
        "avg_delay_success_ms": m.avg_delay_success_ms,
        "n_failed": m.n_failed,
        "n_in_flight": m.n_in_flight,
        "grants_issued": m.grants_issued,
        "no_grants": int(m.no_grants),
    }


def cell_seed(seed: int, user_index: int, rep: int) -> int:
    """Scenario seed for one (user count, repetition) cell.

    Schemes in the same cell share it, so they see the same user delays.
    """
    return int(np.random.SeedSequence([int(seed), int(user_index), int(rep)]).generate_state(1)[0])


def _run_cell(args) -> dict:
    cfg, rep, weights, q = args
    return metrics_row(cfg, rep, run_scenario(cfg, weights, q).metrics)


def sweep(
    template: SimConfig,
    user_counts: Sequence[int],
    n_reps: int,
    seed: int,
    schemes: Sequence[str] = SCHEMES,
    weights: Network | None = None,
    q: ConfusionMatrix | None = None,
    workers: int = 1,
) -> list[dict]:
    """Per-repetition metric rows over schemes x user counts x reps,
    in that nesting order."""
    if not user_counts or not schemes or n_reps < 1:
        raise ValueError("user_counts and schemes must be non-empty and n_reps >= 1")
    jobs = []
    for scheme in schemes:
        for ui, n_users in enumerate(user_counts):
            for rep in range(n_reps):
                cfg = replace(template, scheme=scheme, n_users=int(n_users), seed=cell_seed(seed, ui, rep))
                jobs.append((cfg, rep, weights, q))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def summarize(rows: Iterable[dict]) -> list[dict]:
    """Mean and standard error across repetitions for every (scheme, n_users) cell."""
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["scheme"], r["detector"], r["n_users"]), []).append(r)
    out = []
    for (scheme, detector, n_users), rs in cells.items():
        row = {"scheme": scheme, "detector": detector, "n_users": n_users, "n_reps": len(rs)}
        for col in ("avg_delay_ms", "n_success", "pusch_utilization"):
            vals = np.array([r[col] for r in rs], dtype=float)
            vals = vals[~np.isnan(vals)]
            row[f"{col}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{col}_se"] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def write_csv(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_trace(users: Sequence[UserState], path: str | Path) -> None:
    """One JSON object per user: final state plus every attempt."""
    with open(path, "w") as fh:
        for u in users:
            rec = {f.name: getattr(u, f.name) for f in fields(u)}
            rec["delay_ms"] = u.delay_ms
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_from_dict(d: dict) -> SimConfig:
    known = {f.name for f in fields(SimConfig)}
    unknown = set(d) - known
    if unknown:
        raise SimConfigError(f"unknown simulation keys: {sorted(unknown)}")
    return SimConfig(**d)


def config_to_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["roots"] = list(cfg.roots)
    d["delay_range_ms"] = list(cfg.delay_range_ms)
    return d
