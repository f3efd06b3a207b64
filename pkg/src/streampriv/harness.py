"""Seeded simulation harness: client fleets, relays and the aggregator in one process.

Two engines share one workload model.  ``vector`` draws every client's
sampling and randomization coins as numpy arrays and skips the wire; it
is what parameter sweeps use.  ``agents`` runs real :class:`ClientAgent`
objects that XOR-split their answers through in-process relays to an
:class:`Aggregator`, so bytes on the wire and the join path are exercised.

Workload: each client holds one categorical value per epoch, falling in
bucket ``k`` with probability ``yes_fraction[k]`` (or in no bucket).  With
``exact_truth`` the per-stratum bucket counts are the rounded expected
counts rather than Bernoulli draws.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator, Sequence

import numpy as np

from .aggregator import Aggregator, estimate_bits
from .client import ClientAgent, ClientConfig, LocalStore
from .errors import ScenarioError, StreamPrivError
from .privacy import RRCoins, eps_dp, eps_zk, max_sampling_within
from .query import Budget, BucketSpec, ExecutionParams, Predicate, Query, iter_key_values
from .transport import MESSAGE_ID_LEN, PlainMessage, Relay, ShareMessage, encode_frame, serialize_message

log = logging.getLogger(__name__)

ENGINES = ("vector", "agents")
SWEEPABLE = ("s", "p", "q", "n_clients", "yes_fraction")


@dataclass(frozen=True)
class Scenario:
    n_clients: int = 10_000
    yes_fraction: tuple[float, ...] = (0.6,)
    strata: tuple[int, ...] = ()
    stratum_yes: tuple[float, ...] = ()
    s: float = 1.0
    p: float = 0.9
    q: float = 0.6
    budget_kind: str | None = None
    epsilon: float | None = None
    error_target: float | None = None
    confidence_level: float = 0.95
    inverted: bool = False
    exact_truth: bool = True
    epochs: int = 1
    runs: int = 1
    seed: int = 0
    loss_rate: float = 0.0
    engine: str = "vector"
    n_proxies: int = 2
    answer_frequency_ms: int = 1000
    window_length_ms: int = 1000
    slide_interval_ms: int = 1000

    def problems(self) -> list[str]:
        out = []
        if self.n_clients < 1:
            out.append("n_clients must be positive")
        if not self.yes_fraction:
            out.append("yes_fraction needs at least one bucket")
        if any(not 0.0 <= y <= 1.0 for y in self.yes_fraction + self.stratum_yes):
            out.append("fractions must lie in [0, 1]")
        if sum(self.yes_fraction) > 1.0 + 1e-12:
            out.append("bucket fractions sum above 1")
        if self.strata and sum(self.strata) != self.n_clients:
            out.append("strata counts must sum to n_clients")
        if self.stratum_yes and (len(self.stratum_yes) != len(self.strata) or len(self.yes_fraction) != 1):
            out.append("stratum_yes needs one entry per stratum and a single-bucket query")
        if self.engine not in ENGINES:
            out.append(f"engine must be one of {ENGINES}")
        if not 0.0 <= self.loss_rate < 1.0:
            out.append("loss_rate must lie in [0, 1)")
        if (self.budget_kind is None) != (self.epsilon is None):
            out.append("budget_kind and epsilon go together")
        if self.epochs < 1 or self.runs < 1:
            out.append("epochs and runs must be positive")
        if self.n_proxies < 2:
            out.append("need at least two proxies")
        if self.engine == "vector" and not (
                self.answer_frequency_ms == self.window_length_ms == self.slide_interval_ms):
            out.append("the vector engine runs tumbling windows of one epoch (f = w = delta)")
        try:
            self.params()
        except (ValueError, StreamPrivError) as exc:
            out.append(str(exc))
        return out

    def validate(self) -> "Scenario":
        bad = self.problems()
        if bad:
            raise ScenarioError("invalid scenario: " + "; ".join(bad))
        return self

    @property
    def coins(self) -> RRCoins:
        return RRCoins(self.p, self.q)

    @property
    def budget(self) -> Budget | None:
        if self.budget_kind is None:
            return None
        return Budget(self.budget_kind, self.epsilon, self.error_target, self.confidence_level)

    def params(self) -> ExecutionParams:
        s = self.s if self.budget is None else max_sampling_within(self.budget, self.coins)
        return ExecutionParams(s, self.p, self.q, test_mode=self.p >= 1.0)

    def stratum_sizes(self) -> dict[int, int]:
        if not self.strata:
            return {0: self.n_clients}
        return {i + 1: c for i, c in enumerate(self.strata)}

    def bucket_probs(self, stratum: int) -> tuple[float, ...]:
        if self.stratum_yes:
            return (self.stratum_yes[stratum - 1],)
        return self.yes_fraction

    def query(self) -> Query:
        n = len(self.yes_fraction)
        return Query(1, Predicate(()), BucketSpec.from_edges("value", range(n + 1)),
                     self.answer_frequency_ms, self.window_length_ms, self.slide_interval_ms,
                     self.inverted)


@dataclass(frozen=True)
class ExperimentResult:
    run: int
    window_start_ms: int
    window_end_ms: int
    bucket: int
    actual: float
    estimate: float
    half_width: float
    loss: float
    covered: bool
    participants: int
    s: float
    eps_zk: float
    eps_dp: float
    bytes_on_wire: int
    wall_time_s: float


RESULT_FIELDS = [f.name for f in fields(ExperimentResult)]


def _parse_floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(",", " ").split())


def _parse_ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


_SCALAR_PARSERS = {
    "n_clients": int, "s": float, "p": float, "q": float, "epsilon": float,
    "error_target": float, "confidence_level": float, "epochs": int, "runs": int,
    "seed": int, "loss_rate": float, "engine": str, "n_proxies": int,
    "answer_frequency_ms": int, "window_length_ms": int, "slide_interval_ms": int,
    "budget_kind": str,
}
_ALIASES = {"f": "answer_frequency_ms", "w": "window_length_ms", "delta": "slide_interval_ms",
            "confidence": "confidence_level", "yes": "yes_fraction"}


def parse_scenario(text: str) -> Scenario:
    """Scenario from a key=value block; unknown keys are rejected."""
    kw: dict = {}
    for key, value in iter_key_values(text):
        key = _ALIASES.get(key, key)
        try:
            if key == "yes_fraction":
                kw[key] = _parse_floats(value)
            elif key == "stratum_yes":
                kw[key] = _parse_floats(value)
            elif key == "strata":
                kw[key] = _parse_ints(value)
            elif key in ("inverted", "exact_truth"):
                kw[key] = value.strip().lower() in ("1", "true", "yes")
            elif key == "budget":
                kind, eps = value.split()
                kw["budget_kind"], kw["epsilon"] = kind, float(eps)
            elif key in _SCALAR_PARSERS:
                kw[key] = _SCALAR_PARSERS[key](value.strip())
            else:
                raise ScenarioError(f"unknown scenario key {key!r}")
        except ScenarioError:
            raise
        except ValueError as exc:
            raise ScenarioError(f"bad value for {key}: {value!r}") from exc
    if "strata" in kw and "n_clients" not in kw:
        kw["n_clients"] = sum(kw["strata"])
    return Scenario(**kw).validate()


def format_scenario(sc: Scenario) -> str:
    lines = []
    for k, v in asdict(sc).items():
        if v is None or v == ():
            continue
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ workload


def _categories(sc: Scenario, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-client bucket index (-1 for none) and stratum id."""
    cats, strata = [], []
    for sid, count in sc.stratum_sizes().items():
        probs = np.asarray(sc.bucket_probs(sid))
        if sc.exact_truth:
            per = np.round(probs * count).astype(int)
            c = np.full(count, -1)
            c[: per.sum()] = np.repeat(np.arange(len(probs)), per)
            rng.shuffle(c)
        else:
            full = np.append(probs, max(0.0, 1.0 - probs.sum()))
            c = rng.choice(len(full), size=count, p=full / full.sum())
            c[c == len(probs)] = -1
        cats.append(c)
        strata.append(np.full(count, sid))
    return np.concatenate(cats), np.concatenate(strata)


def _one_hot(cats: np.ndarray, n: int) -> np.ndarray:
    return cats[:, None] == np.arange(n)[None, :]


def _privacy(params: ExecutionParams) -> tuple[float, float]:
    if params.p >= 1.0 or not 0.0 < params.s:
        return math.inf, math.inf
    coins = RRCoins(params.p, params.q)
    zk = eps_zk(params.s, coins) if params.s < 1.0 else math.inf
    return zk, eps_dp(params.s, coins)


def wire_bytes_per_message(n_buckets: int, n_proxies: int) -> int:
    """Frame bytes one dispatched answer puts on the wire, over all proxies."""
    body = len(serialize_message(PlainMessage(0, 0, 0, n_buckets, bytes((n_buckets + 7) // 8))))
    frame = len(encode_frame(ShareMessage(bytes(MESSAGE_ID_LEN), 1, n_proxies, bytes(body))))
    return frame * n_proxies


# ------------------------------------------------------------------- engines


def _run_seeds(sc: Scenario) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(sc.seed).spawn(sc.runs)


def _vector_run(sc: Scenario, run: int, seq: np.random.SeedSequence) -> Iterator[ExperimentResult]:
    rng = np.random.default_rng(seq)
    params = sc.params()
    coins = RRCoins(params.p, params.q)
    zk, dp = _privacy(params)
    n = len(sc.yes_fraction)
    cats, strata = _categories(sc, rng)
    truth = _one_hot(cats, n)
    if sc.inverted:
        truth = ~truth
    actual = truth.sum(axis=0)
    population = sc.stratum_sizes()
    msg_bytes = wire_bytes_per_message(n, sc.n_proxies)
    deliver = (1.0 - sc.loss_rate) ** sc.n_proxies
    f = sc.answer_frequency_ms
    for epoch in range(sc.epochs):
        t0 = time.perf_counter()
        # every client draws its coins whether or not it is sampled, so runs
        # that differ only in s, p or q share their randomness (nested samples)
        sent = rng.random(len(cats)) < params.s
        keep = rng.random(truth.shape) < coins.p
        noise = rng.random(truth.shape) < coins.q
        bits = np.where(keep, truth, noise)[sent]
        arrived = (rng.random(len(cats)) < deliver)[sent]
        buckets, _ = estimate_bits(bits[arrived], strata[sent][arrived], coins, population,
                                   sc.confidence_level, report_inverted=sc.inverted)
        wall = time.perf_counter() - t0
        for b in buckets:
            yield _result(run, epoch * f, (epoch + 1) * f, b, float(actual[b["index"]]),
                          int(arrived.sum()), params.s, zk, dp, int(sent.sum()) * msg_bytes, wall)


def _result(run, start, end, b, actual, participants, s, zk, dp, nbytes, wall) -> ExperimentResult:
    est, hw = b["estimate"], b["half_width"]
    loss = abs((actual - est) / actual) if actual else math.nan
    return ExperimentResult(run, start, end, b["index"], actual, est, hw, loss,
                            bool(abs(est - actual) <= hw), participants, s, zk, dp, nbytes, wall)


class LossyRelay(Relay):
    """In-process relay that silently drops a fraction of frames."""

    def __init__(self, name: str, loss_rate: float, rng: np.random.Generator, capacity: int = 10_000_000):
        super().__init__(name, capacity)
        self.loss_rate = loss_rate
        self.rng = rng
        self.dropped = 0

    def forward(self, share) -> None:
        if self.loss_rate and self.rng.random() < self.loss_rate:
            self.dropped += 1
            return
        super().forward(share)


def _agents_run(sc: Scenario, run: int, seq: np.random.SeedSequence) -> Iterator[ExperimentResult]:
    agent_seq, work_seq, net_seq = seq.spawn(3)
    rng = np.random.default_rng(work_seq)
    net_rng = np.random.default_rng(net_seq)
    query = sc.query()
    n = query.n_buckets
    cats, strata = _categories(sc, rng)
    truth = _one_hot(cats, n)
    if sc.inverted:
        truth = ~truth
    relays = [LossyRelay(f"relay{i + 1}", sc.loss_rate, net_rng) for i in range(sc.n_proxies)]
    agg = Aggregator(coins=sc.coins, n_proxies=sc.n_proxies, confidence_level=sc.confidence_level)
    agents = []
    for i, (seed, sid) in enumerate(zip(agent_seq.spawn(len(cats)), strata)):
        cfg = ClientConfig(f"client-{i}", int(sid), relays, rng_seed=seed)
        agents.append(ClientAgent(cfg, LocalStore(capacity=64), sleep=lambda _: None))
        agg.register_client(int(sid))
    if sc.budget is not None:
        agg.publish_query(query, sc.budget, now_ms=0)
    else:
        agg.publish_with_params(query, sc.params(), now_ms=0)
    for a in agents:
        a.subscribe(agg.board, 0)
    f, w = sc.answer_frequency_ms, sc.window_length_ms
    epochs_per_window = max(1, round(w / f))
    actual = truth.sum(axis=0) * epochs_per_window
    values = np.where(cats >= 0, cats + 0.5, -1.0)
    sent_before = 0
    for epoch in range(sc.epochs + epochs_per_window - 1):
        now = (epoch + 1) * f
        t0 = time.perf_counter()
        for a, v in zip(agents, values):
            a.store.append(now - f, {"value": float(v)})
            a.tick(now)
        agg.poll(relays, now)
        estimates = agg.advance(now)
        wall = time.perf_counter() - t0
        sent_now = sum(a.bytes_sent for a in agents)
        params = agg.pipelines[query.query_id].params
        zk, dp = _privacy(params)
        for est in estimates:
            if est.start_ms < 0:
                continue
            for b in est.buckets:
                yield _result(run, est.start_ms, est.end_ms, asdict(b), float(actual[b.index]),
                              est.participants, params.s, zk, dp, sent_now - sent_before, wall)
        sent_before = sent_now


def run_scenario(sc: Scenario) -> Iterator[ExperimentResult]:
    """One result per window, bucket and run; deterministic for a fixed seed."""
    sc.validate()
    engine = _vector_run if sc.engine == "vector" else _agents_run
    for run, seq in enumerate(_run_seeds(sc)):
        yield from engine(sc, run, seq)


# -------------------------------------------------------------------- sweeps


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def results_csv(results: Sequence[ExperimentResult], timing: bool = False) -> str:
    """CSV of results.  Wall time is left out unless ``timing`` so that a
    fixed seed gives byte-identical output."""
    cols = RESULT_FIELDS if timing else [k for k in RESULT_FIELDS if k != "wall_time_s"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for r in results:
        wr.writerow([_fmt(getattr(r, k)) for k in cols])
    return buf.getvalue()


SWEEP_FIELDS = ["param", "value", "run", "loss", "half_width", "coverage", "eps_zk", "eps_dp",
                "ratio", "bytes_on_wire"]


def with_param(base: Scenario, param: str, value: float) -> Scenario:
    if param not in SWEEPABLE:
        raise ScenarioError(f"cannot sweep {param!r}; choose one of {SWEEPABLE}")
    if param == "yes_fraction":
        return replace(base, yes_fraction=(float(value),) + base.yes_fraction[1:])
    if param == "n_clients":
        n = int(value)
        if base.strata:
            total = sum(base.strata)
            strata = [max(1, round(c * n / total)) for c in base.strata]
            strata[-1] += n - sum(strata)
            return replace(base, n_clients=n, strata=tuple(strata))
        return replace(base, n_clients=n)
    return replace(base, **{param: float(value)})


def sweep(param: str, values: Sequence[float], base: Scenario) -> list[dict]:
    """One row per value per run: mean loss, bounds, coverage, and epsilons.

    Every value reuses the same run seeds so curves compare like with like.
    """
    rows = []
    for value in values:
        sc = with_param(base, param, value).validate()
        by_run: dict[int, list[ExperimentResult]] = {}
        for r in run_scenario(sc):
            by_run.setdefault(r.run, []).append(r)
        for run, rs in sorted(by_run.items()):
            zk, dp = rs[0].eps_zk, rs[0].eps_dp
            rows.append(dict(
                param=param, value=float(value), run=run,
                loss=float(np.nanmean([r.loss for r in rs])),
                half_width=float(np.mean([r.half_width for r in rs])),
                coverage=float(np.mean([r.covered for r in rs])),
                eps_zk=zk, eps_dp=dp,
                ratio=zk / dp if math.isfinite(zk) and math.isfinite(dp) else math.nan,
                bytes_on_wire=int(sum(r.bytes_on_wire for r in rs if r.bucket == 0)),
            ))
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SWEEP_FIELDS)
    for row in rows:
        wr.writerow([_fmt(row[k]) for k in SWEEP_FIELDS])
    return buf.getvalue()


def mean_curve(rows: Sequence[dict], column: str = "loss") -> tuple[np.ndarray, np.ndarray]:
    """Seed-averaged ``column`` per swept value, in value order."""
    vals = sorted({r["value"] for r in rows})
    means = [float(np.mean([r[column] for r in rows if r["value"] == v])) for v in vals]
    return np.array(vals), np.array(means)
