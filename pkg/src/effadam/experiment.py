"""Run configurations, the algorithm registry, and the toy-experiment drivers.

Two engines produce identical metrics for the same config:

* ``reference`` drives ``transport.Cluster`` with one ``WorkerState`` per
  worker and real encoded messages;
* ``lockstep`` keeps the workers of each config stacked in ``(N, d)``
  arrays and advances several configs that share a case and noise stream
  together, drawing the noise once per round. Messages are not serialized;
  the ledger uses the closed-form payload lengths.

Both call the same kernels from ``effadam.node`` on the same values, so the
iterates agree bit for bit (checked in the test suite).
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from effadam.linalg import RandomStream
from effadam.node import (
    HyperParams,
    adam_moments,
    average_rows,
    compensate,
    log_sum_bound,
    log_sum_bound_horizon,
    log_sum_term,
    make_server,
    make_worker,
    moment_bound_excess,
    sgdm_moments,
)
from effadam.problems import LeastSquaresProblem, make_case
from effadam.quantize import (
    Identity,
    LogGrid,
    NormUniform,
    QuantizerKind,
    Terngrad,
    is_stochastic,
    message_bits,
    parse_kind,
    range_violations,
)
from effadam.transport import Cluster

CSV_COLUMNS = (
    "run_id",
    "algo",
    "case_seed",
    "t",
    "grad_norm_sq",
    "loss",
    "uplink_bits_cum",
    "downlink_bits_cum",
)

FULL_ALPHA_GRID = tuple(round(i * 1e-5, 10) for i in range(1, 101))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Wiring:
    optimizer: str
    uplink: QuantizerKind
    downlink: QuantizerKind
    worker_ef: bool
    server_ef: bool


def _registry(nu_k: int, lg_k: int, lg_K: int) -> dict[str, Wiring]:
    nu, lg, f32, tern = NormUniform(nu_k), LogGrid(lg_k, lg_K), Identity(), Terngrad()
    return {
        "Ours_full": Wiring("adam", f32, f32, False, False),
        "Ours_com1": Wiring("adam", nu, nu, True, True),
        "Ours_com1_err": Wiring("adam", nu, nu, False, False),
        "Ours_com2": Wiring("adam", lg, lg, True, True),
        "Ours_com2_err": Wiring("adam", lg, lg, False, False),
        "Sgdm_full": Wiring("sgdm", f32, f32, False, False),
        "Zheng": Wiring("sgdm", NormUniform(1), NormUniform(1), True, True),
        "Sgdm_terngrad": Wiring("sgdm", tern, tern, False, False),
        "Dadam_full": Wiring("adam", f32, f32, False, False),
        "Dadam_terngrad": Wiring("adam", tern, tern, False, False),
        # worker-side error feedback; server sends quantized iterate deltas without it
        "ChenApprox": Wiring("adam", nu, lg, True, False),
    }


ALGORITHMS = tuple(_registry(1, -17, -11))


@dataclass(frozen=True)
class RunConfig:
    """One simulated run. ``algo="custom"`` takes the wiring from
    ``optimizer``/``uplink``/``downlink``/``error_feedback``."""

    algo: str = "Ours_full"
    alpha: float = 1e-4
    beta: float = 0.9
    theta: float = 0.99
    epsilon: float = 1e-8
    schedule: str = "constant"
    momentum: float = 0.9
    N: int = 10
    T: int = 5000
    d: int = 500
    noise_variance: float = 0.1
    case_seed: int = 0
    noise_seed: int = 0
    nu_k: int = 1
    lg_k: int = -17
    lg_K: int = -11
    error_feedback: Optional[bool] = None
    optimizer: Optional[str] = None
    uplink: Optional[str] = None
    downlink: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.T < 0 or self.N < 1 or self.d < 1:
            raise ConfigError("need T >= 0, N >= 1, d >= 1")
        if self.algo == "custom":
            if self.uplink is None or self.downlink is None:
                raise ConfigError("custom runs need explicit uplink and downlink quantizers")
            if (self.optimizer or "adam") not in ("adam", "sgdm"):
                raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        elif self.algo in ALGORITHMS:
            if self.uplink is not None or self.downlink is not None or self.optimizer is not None:
                raise ConfigError(f"{self.algo} fixes its optimizer and quantizers; use algo='custom'")
            w = _registry(self.nu_k, self.lg_k, self.lg_K)[self.algo]
            if self.error_feedback is not None:
                if w.worker_ef != w.server_ef or self.error_feedback != w.worker_ef:
                    raise ConfigError(f"error_feedback={self.error_feedback} contradicts {self.algo}")
        else:
            raise ConfigError(f"unknown algorithm {self.algo!r}")
        try:
            self.hyperparams()
            self.wiring()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def wiring(self) -> Wiring:
        if self.algo == "custom":
            ef = True if self.error_feedback is None else self.error_feedback
            return Wiring(self.optimizer or "adam", parse_kind(self.uplink), parse_kind(self.downlink), ef, ef)
        return _registry(self.nu_k, self.lg_k, self.lg_K)[self.algo]

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            alpha=self.alpha,
            beta=self.beta,
            theta=self.theta,
            epsilon=self.epsilon,
            T=max(self.T, 1),
            schedule=self.schedule,
            momentum=self.momentum,
        )

    @property
    def run_id(self) -> str:
        return f"{self.algo}_a{self.alpha:g}_c{self.case_seed}_s{self.noise_seed}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    algo: str
    case_seed: int
    t: int
    grad_norm_sq: float
    loss: float
    uplink_bits_cum: int
    downlink_bits_cum: int

    def as_csv_fields(self) -> list[str]:
        return [
            self.run_id,
            self.algo,
            str(self.case_seed),
            str(self.t),
            repr(self.grad_norm_sq),
            repr(self.loss),
            str(self.uplink_bits_cum),
            str(self.downlink_bits_cum),
        ]


@dataclass
class InvariantReport:
    """Worst observed margins of the runtime invariants (negative margin = violated)."""

    moment_excess: float = -math.inf
    v_floor_margin: float = math.inf
    log_sum_margin: float = math.inf
    log_sum_horizon_margin: float = math.inf
    server_conservation: float = 0.0
    system_conservation: float = 0.0
    checkpoints: int = 0


@dataclass
class RunResult:
    """Per-round metrics of one run, indexed by t = 1..T (state after round t)."""

    config: RunConfig
    grad_norm_sq: np.ndarray
    loss: np.ndarray
    uplink_bits: np.ndarray
    downlink_bits: np.ndarray
    initial_grad_norm_sq: float
    violations: int = 0
    invariants: Optional[InvariantReport] = None

    def __len__(self) -> int:
        return len(self.grad_norm_sq)

    def __iter__(self) -> Iterator[MetricsRow]:
        c = self.config
        for i in range(len(self)):
            yield MetricsRow(
                c.run_id,
                c.algo,
                c.case_seed,
                i + 1,
                float(self.grad_norm_sq[i]),
                float(self.loss[i]),
                int(self.uplink_bits[i]),
                int(self.downlink_bits[i]),
            )

    @property
    def final_grad_norm_sq(self) -> float:
        return float(self.grad_norm_sq[-1]) if len(self) else self.initial_grad_norm_sq

    def grad_norm_sq_at_uplink_bits(self, bits: int) -> float:
        """Gradient norm at the last round whose cumulative uplink is <= ``bits``."""
        i = int(np.searchsorted(self.uplink_bits, bits, side="right"))
        return self.initial_grad_norm_sq if i == 0 else float(self.grad_norm_sq[i - 1])


@functools.lru_cache(maxsize=8)
def cached_case(seed: int, d: int, noise_variance: float) -> LeastSquaresProblem:
    return make_case(seed, d, noise_variance)


def problem_for(config: RunConfig) -> LeastSquaresProblem:
    return cached_case(config.case_seed, config.d, config.noise_variance)


def noise_stream(config: RunConfig) -> RandomStream:
    return RandomStream(config.noise_seed, (config.case_seed, 0))


def _uplink_streams(config: RunConfig) -> list[RandomStream]:
    root = RandomStream(config.noise_seed, (config.case_seed,))
    return [root.child(1, i) for i in range(config.N)]


def _downlink_stream(config: RunConfig) -> RandomStream:
    return RandomStream(config.noise_seed, (config.case_seed, 2))


class _RowStreams:
    """Duck-typed stream that draws each row of a stacked array from its own stream."""

    def __init__(self, streams: Sequence[RandomStream]):
        self.streams = list(streams)

    def uniform(self, shape) -> np.ndarray:
        n, d = shape
        if n != len(self.streams):
            raise ValueError("row count does not match the number of streams")
        return np.stack([s.uniform(d) for s in self.streams])


class _Monitor:
    def __init__(self, lane: "_Lane", checkpoint_every: int):
        self.lane = lane
        self.every = checkpoint_every
        N, d = lane.config.N, lane.config.d
        self.report = InvariantReport()
        self.log_sum = np.zeros(N)
        self.g_max = np.zeros(N)
        self.x1 = lane.x.copy()
        self.sum_mean = np.zeros(d)
        self.sum_raw = np.zeros(d)

    def observe(self, t: int, G, raw, mean) -> None:
        lane, h, rep = self.lane, self.lane.h, self.report
        if lane.wiring.optimizer == "adam":
            rep.moment_excess = max(rep.moment_excess, moment_bound_excess(lane.M, lane.V, h))
            rep.v_floor_margin = min(rep.v_floor_margin, float(np.min(lane.V)) - h.theta_t**t * h.epsilon)
            self.log_sum += log_sum_term(G, lane.V, h)
            self.g_max = np.maximum(self.g_max, np.linalg.norm(G, axis=1))
            d = lane.config.d
            for i in range(lane.config.N):
                bound = log_sum_bound(float(self.g_max[i]), t, d, h)
                rep.log_sum_margin = min(rep.log_sum_margin, bound - float(self.log_sum[i]))
                if h.schedule == "horizon" and t <= h.T:
                    closed = log_sum_bound_horizon(float(self.g_max[i]), d, h)
                    rep.log_sum_horizon_margin = min(rep.log_sum_horizon_margin, closed - float(self.log_sum[i]))
        self.sum_mean = self.sum_mean + mean
        self.sum_raw = self.sum_raw + average_rows(raw)
        if t % self.every == 0:
            self._checkpoint()

    def _checkpoint(self) -> None:
        lane, rep = self.lane, self.report
        ref = self.x1 - self.sum_mean
        lhs = lane.x - lane.e
        rep.server_conservation = max(rep.server_conservation, _rel_err(lhs, ref))
        ref_sys = self.x1 - self.sum_raw
        lhs_sys = lane.x - lane.e - average_rows(lane.E)
        rep.system_conservation = max(rep.system_conservation, _rel_err(lhs_sys, ref_sys))
        rep.checkpoints += 1


def _rel_err(a, b) -> float:
    scale = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / scale


class _Lane:
    """State of one config inside the lockstep engine."""

    def __init__(self, config: RunConfig, problem: LeastSquaresProblem, monitor_every: int = 0):
        self.config = config
        self.problem = problem
        self.h = config.hyperparams()
        self.wiring = w = config.wiring()
        N, d, T = config.N, config.d, config.T
        self.x = np.zeros(d)
        self.M = np.zeros((N, d))
        self.V = np.full((N, d), self.h.epsilon)
        self.E = np.zeros((N, d))
        self.e = np.zeros(d)
        self.up_stream = _RowStreams(_uplink_streams(config)) if is_stochastic(w.uplink) else None
        self.down_stream = _downlink_stream(config) if is_stochastic(w.downlink) else None
        self.up_bits = N * message_bits(w.uplink, d)
        self.down_bits = message_bits(w.downlink, d)
        self.violations = 0
        self.r, self.c = problem.residual_and_gradient(self.x)
        self.initial = float(self.c @ self.c)
        self.gns = np.empty(T)
        self.loss = np.empty(T)
        self.monitor = _Monitor(self, monitor_every) if monitor_every else None

    def advance(self, t: int, Z: np.ndarray) -> None:
        w, h = self.wiring, self.h
        G = self.c[None, :] - Z
        if w.optimizer == "adam":
            self.M, self.V, raw = adam_moments(self.M, self.V, G, h)
        else:
            self.M, raw = sgdm_moments(self.M, G, h)
        if isinstance(w.uplink, LogGrid):
            self.violations += range_violations(w.uplink, raw + self.E if w.worker_ef else raw)
        Q, self.E = compensate(w.uplink, raw, self.E, w.worker_ef, self.up_stream)
        mean = average_rows(Q)
        if isinstance(w.downlink, LogGrid):
            self.violations += range_violations(w.downlink, mean + self.e if w.server_ef else mean)
        q, self.e = compensate(w.downlink, mean, self.e, w.server_ef, self.down_stream)
        self.x = self.x - q
        self.r, self.c = self.problem.residual_and_gradient(self.x)
        self.gns[t - 1] = self.c @ self.c
        self.loss[t - 1] = self.r @ self.r
        if self.monitor is not None:
            self.monitor.observe(t, G, raw, mean)

    def result(self) -> RunResult:
        T = self.config.T
        rounds = np.arange(1, T + 1, dtype=np.int64)
        return RunResult(
            self.config,
            self.gns,
            self.loss,
            rounds * self.up_bits,
            rounds * self.down_bits,
            self.initial,
            self.violations,
            self.monitor.report if self.monitor else None,
        )


def _batch_key(c: RunConfig):
    return (c.case_seed, c.noise_seed, c.N, c.T, c.d, c.noise_variance)


def run_batch(
    configs: Sequence[RunConfig],
    problem: Optional[LeastSquaresProblem] = None,
    monitor_every: int = 0,
) -> list[RunResult]:
    """Advance several configs in lockstep, sharing the gradient noise draws.

    All configs must agree on case, noise seed, N, T and d. Each result is
    identical to running its config alone.
    """
    if not configs:
        return []
    key = _batch_key(configs[0])
    if any(_batch_key(c) != key for c in configs):
        raise ConfigError("batched configs must share case, noise seed, N, T and d")
    base = configs[0]
    problem = problem if problem is not None else problem_for(base)
    if problem.d != base.d:
        raise ConfigError("problem dimension does not match config.d")
    lanes = [_Lane(c, problem, monitor_every) for c in configs]
    noise = noise_stream(base)
    for t in range(1, base.T + 1):
        Z = problem.noise_block(noise, base.N)
        for lane in lanes:
            lane.advance(t, Z)
    return [lane.result() for lane in lanes]


def run_reference(
    config: RunConfig,
    problem: Optional[LeastSquaresProblem] = None,
    on_round=None,
) -> RunResult:
    """Message-passing run through ``transport.Cluster``.

    ``on_round(trace, cluster)`` is called after every round.
    """
    problem = problem if problem is not None else problem_for(config)
    h, w = config.hyperparams(), config.wiring()
    N, d, T = config.N, config.d, config.T
    x1 = np.zeros(d)
    ups = _uplink_streams(config)
    workers = [
        make_worker(
            x1,
            w.uplink,
            h,
            error_feedback=w.worker_ef,
            optimizer=w.optimizer,
            stream=ups[i] if is_stochastic(w.uplink) else None,
        )
        for i in range(N)
    ]
    server = make_server(
        x1,
        w.downlink,
        error_feedback=w.server_ef,
        stream=_downlink_stream(config) if is_stochastic(w.downlink) else None,
    )
    cluster = Cluster(workers, server)
    noise = noise_stream(config)
    r, c = problem.residual_and_gradient(x1)
    initial = float(c @ c)
    gns, loss = np.empty(T), np.empty(T)
    up, down = np.empty(T, dtype=np.int64), np.empty(T, dtype=np.int64)
    for t in range(1, T + 1):
        G = c[None, :] - problem.noise_block(noise, N)
        trace = cluster.round(h, list(G))
        r, c = problem.residual_and_gradient(cluster.server.x)
        gns[t - 1] = c @ c
        loss[t - 1] = r @ r
        up[t - 1] = cluster.ledger.uplink_bits
        down[t - 1] = cluster.ledger.downlink_bits
        if on_round is not None:
            on_round(trace, cluster)
    violations = cluster.server.violations + sum(wk.violations for wk in cluster.workers)
    return RunResult(config, gns, loss, up, down, initial, violations)


def run(config: RunConfig, engine: str = "lockstep", problem: Optional[LeastSquaresProblem] = None) -> RunResult:
    """Run one config; iterate the result for its ``MetricsRow`` stream."""
    if engine == "lockstep":
        return run_batch([config], problem)[0]
    if engine == "reference":
        return run_reference(config, problem)
    raise ValueError(f"unknown engine {engine!r}")


def write_csv(results: Iterable[RunResult], fh, header: bool = True) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(CSV_COLUMNS)
    for res in results:
        for row in res:
            writer.writerow(row.as_csv_fields())


def csv_text(results: Iterable[RunResult]) -> str:
    buf = io.StringIO()
    write_csv(results, buf)
    return buf.getvalue()


def read_csv(fh) -> list[MetricsRow]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [
        MetricsRow(
            r["run_id"],
            r["algo"],
            int(r["case_seed"]),
            int(r["t"]),
            float(r["grad_norm_sq"]),
            float(r["loss"]),
            int(r["uplink_bits_cum"]),
            int(r["downlink_bits_cum"]),
        )
        for r in reader
    ]


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    """Aggregates of one config over several cases."""

    config: RunConfig
    runs: list[RunResult]
    median: np.ndarray = field(init=False)
    mean: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.runs:
            raise ValueError("a suite needs at least one case")
        stack = np.stack([r.grad_norm_sq for r in self.runs])
        self.median = np.median(stack, axis=0)
        self.mean = np.mean(stack, axis=0)

    @property
    def finals(self) -> np.ndarray:
        return np.array([r.final_grad_norm_sq for r in self.runs])

    @property
    def median_final(self) -> float:
        return float(np.median(self.finals))

    @property
    def mean_final(self) -> float:
        return float(np.mean(self.finals))

    def median_at_uplink_bits(self, bits: int) -> float:
        return float(np.median([r.grad_norm_sq_at_uplink_bits(bits) for r in self.runs]))


def run_suites(
    configs: Sequence[RunConfig], case_seeds: Sequence[int], progress=None
) -> list[SuiteResult]:
    """Run every config on every case; configs sharing a case run in lockstep."""
    if not case_seeds:
        raise ValueError("need at least one case")
    per_config: list[list[RunResult]] = [[] for _ in configs]
    for cs in case_seeds:
        batch = [replace(c, case_seed=cs) for c in configs]
        groups: dict = {}
        for i, c in enumerate(batch):
            groups.setdefault(_batch_key(c), []).append(i)
        for idx in groups.values():
            for i, res in zip(idx, run_batch([batch[i] for i in idx])):
                per_config[i].append(res)
        if progress is not None:
            progress(cs)
    return [SuiteResult(c, runs) for c, runs in zip(configs, per_config)]


def run_suite(base: RunConfig, case_seeds: Sequence[int]) -> SuiteResult:
    return run_suites([base], case_seeds)[0]


@dataclass
class GridResult:
    best_alpha: float
    table: list[tuple[float, float, float]]  # (alpha, mean final, median final)
    suites: dict[float, SuiteResult]

    @property
    def best(self) -> SuiteResult:
        return self.suites[self.best_alpha]


def select_alpha(table: Sequence[tuple[float, float, float]]) -> float:
    """Smallest mean final grad norm; ties go to the smaller alpha."""
    best = None
    for alpha, mean_final, _ in sorted(table):
        if best is None or mean_final < best[1]:
            best = (alpha, mean_final)
    return best[0]


def grid_search_many(
    bases: Sequence[RunConfig], alphas: Sequence[float], case_seeds: Sequence[int], progress=None
) -> list[GridResult]:
    """Grid-search alpha for several base configs at once (one lockstep batch per case)."""
    if not alphas:
        raise ValueError("alpha grid is empty")
    grid = sorted(set(float(a) for a in alphas))
    configs = [replace(b, alpha=a) for b in bases for a in grid]
    suites = run_suites(configs, case_seeds, progress)
    out = []
    for j in range(len(bases)):
        chunk = suites[j * len(grid) : (j + 1) * len(grid)]
        table = [(a, s.mean_final, s.median_final) for a, s in zip(grid, chunk)]
        out.append(GridResult(select_alpha(table), table, dict(zip(grid, chunk))))
    return out


def grid_search(base: RunConfig, alphas: Sequence[float], case_seeds: Sequence[int]) -> GridResult:
    return grid_search_many([base], alphas, case_seeds)[0]


@dataclass(frozen=True)
class EmpiricalConstants:
    """Problem constants measured along a full-precision run (G is empirical)."""

    G: float
    L: float
    F_gap: float


def empirical_constants(config: RunConfig) -> EmpiricalConstants:
    """G = largest stochastic gradient norm seen along ``Ours_full`` with the
    config's alpha and seeds; L from power iteration; F_gap = loss(x_1), the
    noiseless loss vanishing at the minimizer."""
    cfg = replace(config, algo="Ours_full", optimizer=None, uplink=None, downlink=None, error_feedback=None)
    problem = problem_for(cfg)
    lane = _Lane(cfg, problem, monitor_every=max(cfg.T, 1))
    noise = noise_stream(cfg)
    for t in range(1, cfg.T + 1):
        lane.advance(t, problem.noise_block(noise, cfg.N))
    G = float(np.max(lane.monitor.g_max))
    return EmpiricalConstants(G, problem.lipschitz(), problem.loss(np.zeros(cfg.d)))
