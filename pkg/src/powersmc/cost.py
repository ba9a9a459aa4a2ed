"""Token-eval accounting and the closed-form compute/latency model.

One token-eval is a single cached forward step for one sequence, so a decode
step at batch size ``b`` costs ``b`` token-evals and, given a batch throughput
multiplier ``s(b)``, takes time proportional to ``b / s(b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from powersmc.errors import InputError

REGIMES = ("global", "last-block")


@dataclass
class CostLedger:
    """Empirical token-eval counter.

    ``token_evals`` counts only sequences that actually needed a model call.
    ``worst_case_evals`` counts every sequence handed to a batched step,
    absorbed or not, which is the all-active convention of the SMC cost
    formula.
    """

    token_evals: int = 0
    worst_case_evals: int = 0
    batch_sizes: list = field(default_factory=list)
    suffix_lengths: list = field(default_factory=list)

    def record_step(self, active: int, total: int | None = None) -> None:
        if active < 0:
            raise InputError("batch size must be non-negative")
        total = active if total is None else total
        if total < active:
            raise InputError("total batch cannot be smaller than the active batch")
        self.token_evals += active
        self.worst_case_evals += total
        if active:
            self.batch_sizes.append(active)

    def record_serial(self, n_tokens: int) -> None:
        """Record ``n_tokens`` batch-1 decode steps."""
        if n_tokens < 0:
            raise InputError("token count must be non-negative")
        self.token_evals += n_tokens
        self.worst_case_evals += n_tokens
        self.batch_sizes.extend([1] * n_tokens)

    def record_suffix(self, length: int) -> None:
        self.record_serial(length)
        self.suffix_lengths.append(length)

    @property
    def num_steps(self) -> int:
        return len(self.batch_sizes)

    def latency_units(self, throughput: "ThroughputTable") -> float:
        """Wall-clock proxy: sum over recorded steps of b / s(b)."""
        sizes, counts = np.unique(np.asarray(self.batch_sizes, dtype=np.int64), return_counts=True)
        return float(sum(c * b / throughput(int(b)) for b, c in zip(sizes, counts)))

    def check(self) -> None:
        if self.token_evals != sum(self.batch_sizes):
            raise AssertionError("ledger total disagrees with recorded batch sizes")


class ThroughputTable:
    """Tabulated batch throughput multiplier s(b)."""

    def __init__(self, table: Mapping[int, float]):
        entries = sorted((int(b), float(s)) for b, s in table.items())
        if not entries or entries[0] != (1, 1.0):
            raise InputError("throughput table must contain s(1) = 1")
        prev = 0.0
        for b, s in entries:
            if not 1.0 <= s <= b:
                raise InputError(f"s({b}) = {s} outside [1, {b}]")
            if s < prev:
                raise InputError("throughput multiplier must be nondecreasing")
            prev = s
        self._table = dict(entries)

    @classmethod
    def perfect(cls, sizes: Iterable[int]) -> "ThroughputTable":
        return cls({1: 1.0, **{int(b): float(b) for b in sizes}})

    @classmethod
    def flat(cls, sizes: Iterable[int]) -> "ThroughputTable":
        return cls({1: 1.0, **{int(b): 1.0 for b in sizes}})

    def __call__(self, b: int) -> float:
        try:
            return self._table[int(b)]
        except KeyError:
            raise InputError(f"throughput multiplier not tabulated at batch size {b}") from None

    def __contains__(self, b: int) -> bool:
        return int(b) in self._table

    def as_dict(self) -> dict:
        return {str(b): s for b, s in self._table.items()}


@dataclass(frozen=True)
class CostParams:
    T: int
    B: int
    M: int
    N: int
    s: ThroughputTable | None = None

    def __post_init__(self):
        if min(self.T, self.B, self.N) < 1 or self.M < 0:
            raise InputError("need T, B, N >= 1 and M >= 0")
        if self.T % self.B:
            raise InputError(f"block length {self.B} does not divide horizon {self.T}")

    @property
    def K(self) -> int:
        return self.T // self.B


def smc_cost(N: int, T: int) -> int:
    if N < 1 or T < 1:
        raise InputError("N and T must be positive")
    return N * T


def global_factor(K: int, M: int) -> float:
    return 1.0 + M * (K + 1) / 4.0


def lastblock_factor(M: int) -> float:
    return 1.0 + M / 2.0


def mh_cost_global(T: int, B: int, M: int) -> float:
    """Expected MH token-evals when every move edits uniformly over the full prefix."""
    if T % B:
        raise InputError(f"block length {B} does not divide horizon {T}")
    return T * global_factor(T // B, M)


def mh_cost_lastblock(T: int, M: int) -> float:
    if T < 0 or M < 0:
        raise InputError("T and M must be non-negative")
    return T * lastblock_factor(M)


def overhead_floor(M: int) -> float:
    if M < 0:
        raise InputError("M must be non-negative")
    return lastblock_factor(M)


def compute_ratio(params: CostParams) -> float:
    """Expected global-edit MH compute over SMC compute."""
    return global_factor(params.K, params.M) / params.N


def wallclock_ratio(params: CostParams, regime: str = "global") -> float:
    """MH at batch 1 against SMC at batch N."""
    if params.s is None:
        raise InputError("wall-clock ratio needs a throughput table")
    s_n = params.s(params.N)
    if regime == "global":
        factor = global_factor(params.K, params.M)
    elif regime == "last-block":
        factor = lastblock_factor(params.M)
    else:
        raise InputError(f"unknown regime {regime!r}")
    return factor * s_n / params.N


@dataclass(frozen=True)
class ReconcileReport:
    regime: str
    analytic: float
    empirical_mean: float
    relative_error: float
    tolerance: float
    passed: bool
    num_runs: int

    def as_dict(self) -> dict:
        return {
            "regime": self.regime,
            "analytic": self.analytic,
            "empirical_mean": self.empirical_mean,
            "relative_error": self.relative_error,
            "pass": self.passed,
            "tolerance": self.tolerance,
            "num_runs": self.num_runs,
        }


LedgerLike = Union[CostLedger, float, int]


def reconcile(
    ledgers: LedgerLike | Sequence[LedgerLike],
    analytic: float,
    *,
    regime: str = "smc",
    tolerance: float | None = None,
    exact: bool = False,
) -> ReconcileReport:
    """Compare empirical token-evals with an analytic expectation.

    ``exact=True`` demands equality (deterministic counts); otherwise the
    relative error must fall below ``tolerance`` (default 5%).
    """
    if isinstance(ledgers, (CostLedger, int, float)):
        ledgers = [ledgers]
    values = [l.token_evals if isinstance(l, CostLedger) else l for l in ledgers]
    if not values:
        raise InputError("no ledgers to reconcile")
    mean = float(np.mean(values))
    rel = abs(mean - analytic) / abs(analytic) if analytic else abs(mean)
    tol = 0.0 if exact else (0.05 if tolerance is None else tolerance)
    passed = rel == 0.0 if exact else rel < tol
    return ReconcileReport(regime, float(analytic), mean, rel, tol, bool(passed), len(values))
