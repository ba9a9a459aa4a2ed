"""Exact power targets by enumeration, and Rényi-entropy diagnostics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from powersmc.errors import CapacityError, DomainError, InputError, ModelSpecError
from powersmc.lm import ToyModel, advance, next_logprobs

ENUMERATION_BUDGET = 10 ** 7


def seq_key(seq: Sequence[int]) -> str:
    return "-".join(str(int(t)) for t in seq)


def parse_seq(key: str) -> tuple:
    key = key.strip()
    return tuple(int(t) for t in key.split("-")) if key else ()


@dataclass
class ExactTarget:
    """Complete sequences with their base and target log-masses.

    ``label`` is ``"power"`` for the sequence power target; tables produced by
    :func:`temperature_joint` reuse the shape with ``label="temperature"``.
    """

    alpha: float
    sequences: list
    log_p: np.ndarray
    log_pi: np.ndarray
    log_Z: float
    label: str = "power"
    _index: dict = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def index(self) -> dict:
        if self._index is None:
            self._index = {s: i for i, s in enumerate(self.sequences)}
        return self._index

    def masses(self) -> dict:
        return dict(zip(self.sequences, np.exp(self.log_pi)))

    def base_masses(self) -> dict:
        return dict(zip(self.sequences, np.exp(self.log_p)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "log_p", "log_pi_alpha"])
        for s, lp, lpi in zip(self.sequences, self.log_p, self.log_pi):
            w.writerow([seq_key(s), repr(float(lp)), repr(float(lpi))])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"alpha": self.alpha, "log_Z_alpha": self.log_Z, "num_sequences": len(self)}

    @classmethod
    def from_csv(cls, text: str, sidecar: dict | None = None) -> "ExactTarget":
        reader = csv.DictReader(io.StringIO(text))
        missing = {"sequence", "log_p", "log_pi_alpha"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"target CSV lacks columns {sorted(missing)}")
        seqs, lp, lpi = [], [], []
        for row in reader:
            seqs.append(parse_seq(row["sequence"]))
            lp.append(float(row["log_p"]))
            lpi.append(float(row["log_pi_alpha"]))
        sidecar = sidecar or {}
        return cls(float(sidecar.get("alpha", np.nan)), seqs, np.array(lp), np.array(lpi),
                   float(sidecar.get("log_Z_alpha", np.nan)))

    @classmethod
    def load(cls, path) -> "ExactTarget":
        path = Path(path)
        if not path.exists():
            raise InputError(f"{path} not found")
        side = path.with_suffix(".json")
        sidecar = json.loads(side.read_text()) if side.exists() else None
        return cls.from_csv(path.read_text(), sidecar)


def _enumerate(model: ToyModel, row_transform=None, budget: int = ENUMERATION_BUDGET):
    """Depth-first walk over complete sequences in ascending token order."""
    V = model.vocab.size
    worst = sum(V ** k for k in range(model.t_cap))
    if worst > budget:
        raise CapacityError(f"up to {worst} sequences exceeds enumeration budget {budget}")
    seqs, logps = [], []
    eos = model.eos_id
    stack = [((), model.initial_state(), 0.0)]
    while stack:
        prefix, state, lp = stack.pop()
        row = next_logprobs(model, state)
        if row_transform is not None:
            row = row_transform(row)
        children = []
        for tok in range(model.n_symbols):
            if row[tok] == -np.inf:
                continue
            if tok == eos:
                seqs.append(prefix + (tok,))
                logps.append(lp + row[tok])
            else:
                children.append((prefix + (tok,), advance(model, state, tok), lp + row[tok]))
        stack.extend(reversed(children))
    order = sorted(range(len(seqs)), key=lambda i: seqs[i])
    return [seqs[i] for i in order], np.array([logps[i] for i in order], dtype=np.float64)


def _check_closure(log_mass: np.ndarray, what: str) -> None:
    total = float(np.exp(logsumexp(log_mass))) if log_mass.size else 0.0
    if abs(total - 1.0) > 1e-9:
        raise ModelSpecError(f"{what} mass sums to {total}; sequences do not all terminate")


def enumerate_target(model: ToyModel, alpha: float, budget: int = ENUMERATION_BUDGET) -> ExactTarget:
    """Brute-force the power target over every EOS-terminated sequence."""
    if alpha < 1:
        raise DomainError("alpha must be at least 1")
    seqs, log_p = _enumerate(model, budget=budget)
    _check_closure(log_p, "base")
    if alpha == 1:
        return ExactTarget(1.0, seqs, log_p, log_p.copy(), 0.0)
    scaled = alpha * log_p
    log_Z = float(logsumexp(scaled))
    log_pi = scaled - log_Z
    _check_closure(log_pi, "target")
    return ExactTarget(float(alpha), seqs, log_p, log_pi, log_Z)


def temperature_joint(model: ToyModel, tau: float, budget: int = ENUMERATION_BUDGET) -> ExactTarget:
    """Exact joint of ancestral sampling with every conditional at temperature ``tau``."""
    if tau <= 0:
        raise DomainError("temperature must be positive")
    beta = 1.0 / tau
    base_seqs, log_p = _enumerate(model, budget=budget)
    _check_closure(log_p, "base")

    def temper(row):
        scaled = beta * row
        return scaled - logsumexp(scaled)

    seqs, log_q = _enumerate(model, temper, budget=budget)
    if seqs != base_seqs:
        raise AssertionError("tempered enumeration changed the support")
    _check_closure(log_q, "tempered")
    return ExactTarget(beta, seqs, log_p, log_q, 0.0, label="temperature")


def power_normalizer(row: np.ndarray, alpha: float) -> float:
    """log sum_v p(v)^alpha for a normalized log-probability row."""
    return float(logsumexp(alpha * np.asarray(row, dtype=np.float64)))


def renyi_entropy(row: np.ndarray, alpha: float) -> float:
    if alpha <= 0 or alpha == 1:
        raise DomainError("Renyi entropy needs alpha > 0 and alpha != 1")
    return power_normalizer(row, alpha) / (1.0 - alpha)


@dataclass
class RenyiReport:
    alpha: float
    entropies: np.ndarray
    log_normalizers: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.log_normalizers))

    @property
    def entropy_total(self) -> float:
        return float(np.sum(self.entropies))


def path_weight_decomposition(model: ToyModel, alpha: float, prefix: Sequence[int]) -> RenyiReport:
    """Per-step Rényi entropy and log power normalizer along ``prefix``.

    Under the locally optimal proposal the SIS log-weight of a particle on
    this path equals ``report.total``.
    """
    if alpha <= 0 or alpha == 1:
        raise DomainError("path decomposition needs alpha > 0 and alpha != 1")
    state = model.initial_state()
    h, logz = [], []
    for tok in prefix:
        row = next_logprobs(model, state)
        if not 0 <= int(tok) < model.n_symbols or row[int(tok)] == -np.inf:
            raise InputError(f"token {tok} is not reachable at step {state.step}")
        if state.absorbed:
            break
        lz = power_normalizer(row, alpha)
        logz.append(lz)
        h.append(lz / (1.0 - alpha))
        state = advance(model, state, tok)
    return RenyiReport(float(alpha), np.array(h), np.array(logz))


def tv_distance(empirical, target: ExactTarget) -> float:
    """Total variation between a normalized weighted sample set and a table.

    Sampled sequences missing from the table count entirely as discrepancy.
    """
    if hasattr(empirical, "masses"):
        empirical = empirical.masses()
    emp = dict(empirical)
    total = sum(emp.values())
    if abs(total - 1.0) > 1e-9 or any(m < 0 for m in emp.values()):
        raise InputError(f"empirical masses sum to {total}, not 1")
    tgt = np.exp(target.log_pi)
    diff = 0.0
    for s, m in zip(target.sequences, tgt):
        diff += abs(emp.pop(s, 0.0) - m)
    diff += sum(emp.values())
    return float(min(1.0, max(0.0, 0.5 * diff)))
