"""Block-structured Metropolis-Hastings baseline for the power target.

The chain grows ``B`` tokens at a time from the base model. After each
extension it makes ``M`` independence-style moves: pick an edit index,
regenerate the suffix from the base model at temperature ``tau_prop`` up to
the current block end (or EOS), and accept with the Hastings ratio for the
prefix power target p(y)^alpha. A move that regenerates ``L`` tokens costs
``L`` batch-1 token-evals.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from powersmc.cost import REGIMES, CostLedger
from powersmc.errors import InputError
from powersmc.lm import ToyModel, advance, next_logprobs, sequence_logprob
from powersmc.smc import ProposalPolicy, WeightedSampleSet


@dataclass(frozen=True)
class MHConfig:
    block: int
    moves: int
    horizon: int
    regime: str = "global"
    tau_prop: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.block < 1 or self.horizon < 1:
            raise InputError("block length and horizon must be positive")
        if self.horizon % self.block:
            raise InputError(f"block length {self.block} does not divide horizon {self.horizon}")
        if self.moves < 0:
            raise InputError("moves per block must be non-negative")
        if self.regime not in REGIMES:
            raise InputError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not self.tau_prop > 0:
            raise InputError("proposal temperature must be positive")
        if self.seed < 0:
            raise InputError("seed must be unsigned")

    @property
    def n_blocks(self) -> int:
        return self.horizon // self.block


@dataclass(frozen=True)
class MoveRecord:
    block: int
    move: int
    edit_index: int
    suffix_len: int
    accepted: bool
    log_p_old: float
    log_p_new: float


@dataclass
class ChainState:
    sequence: tuple = ()
    log_p: float = 0.0
    block: int = 0
    extension_tokens: int = 0
    moves: list = field(default_factory=list)
    visits: Counter = field(default_factory=Counter)
    # per position: decode state before token j, log p of y_{<j}, proposal log q of token j
    _states: list = field(default_factory=list, repr=False)
    _cum: list = field(default_factory=lambda: [0.0], repr=False)
    _logq: list = field(default_factory=list, repr=False)

    @classmethod
    def start(cls, model: ToyModel) -> "ChainState":
        return cls(_states=[model.initial_state()])

    def __len__(self):
        return len(self.sequence)

    @property
    def terminated(self) -> bool:
        return bool(self.sequence) and self._states[-1].absorbed

    @property
    def acceptance_rate(self) -> float:
        return sum(m.accepted for m in self.moves) / len(self.moves) if self.moves else float("nan")

    @property
    def suffix_total(self) -> int:
        return sum(m.suffix_len for m in self.moves)

    def visit_samples(self, model: ToyModel) -> WeightedSampleSet:
        visits = self.visits or Counter({self.sequence: 1})
        seqs = sorted(visits)
        return WeightedSampleSet(
            seqs,
            np.log(np.array([visits[s] for s in seqs], dtype=np.float64)),
            np.array([sequence_logprob(model, s) for s in seqs]),
            np.array([bool(s) and s[-1] == model.eos_id for s in seqs]),
        )

    def moves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "move", "edit_index", "suffix_len", "accepted", "log_p_old", "log_p_new"])
        for m in self.moves:
            w.writerow([m.block, m.move, m.edit_index, m.suffix_len, int(m.accepted),
                        repr(m.log_p_old), repr(m.log_p_new)])
        return buf.getvalue()


class _Sampler:
    """Inverse-CDF token draws with per-row caching of the proposal CDF."""

    def __init__(self, model: ToyModel, beta: float):
        self.model = model
        self.policy = ProposalPolicy(beta)
        self._cache: dict = {}

    def _lookup(self, row):
        hit = self._cache.get(id(row))
        if hit is None or hit[0] is not row:
            lq = row if self.policy.beta == 1.0 else self.policy.log_probs(row)
            cdf = np.cumsum(np.exp(lq))
            last = int(np.flatnonzero(lq > -np.inf)[-1])
            hit = (row, lq, cdf, last)
            self._cache[id(row)] = hit
        return hit

    def log_q(self, row, tok: int) -> float:
        return float(self._lookup(row)[1][tok])

    def draw(self, row, u: float) -> int:
        _, _, cdf, last = self._lookup(row)
        return min(int(np.searchsorted(cdf, u, side="right")), last)


def _generate(chain, start, limit, model, draw: _Sampler, score: _Sampler, rng):
    """Tokens from position ``start`` until length ``limit`` or EOS."""
    state = chain._states[start]
    cum = chain._cum[start]
    toks, states, cums, logqs = [], [], [], []
    pos = start
    while pos < limit and not state.absorbed:
        row = next_logprobs(model, state)
        tok = draw.draw(row, rng.random())
        logqs.append(score.log_q(row, tok))
        cum = cum + row[tok]
        toks.append(tok)
        state = advance(model, state, tok)
        states.append(state)
        cums.append(cum)
        pos += 1
    return toks, states, cums, logqs


def _splice(chain: ChainState, j: int, gen) -> None:
    toks, states, cums, logqs = gen
    chain.sequence = chain.sequence[:j] + tuple(toks)
    chain._states = chain._states[:j + 1] + states
    chain._cum = chain._cum[:j + 1] + cums
    chain._logq = chain._logq[:j] + logqs
    chain.log_p = float(chain._cum[-1])


def extend_block(chain: ChainState, model: ToyModel, config: MHConfig, ledger: CostLedger,
                 rng: np.random.Generator) -> ChainState:
    """Append up to ``B`` base-model tokens (fewer if EOS arrives)."""
    if chain.block >= config.n_blocks:
        raise InputError("chain already spans the full horizon")
    chain.block += 1
    base = _Sampler(model, 1.0)
    score = base if config.tau_prop == 1.0 else _Sampler(model, 1.0 / config.tau_prop)
    n = len(chain)
    gen = _generate(chain, n, chain.block * config.block, model, base, score, rng)
    _splice(chain, n, gen)
    ledger.record_serial(len(gen[0]))
    chain.extension_tokens += len(gen[0])
    return chain


def _edit_range(length: int, regime: str, block: int | None) -> tuple[int, int]:
    if regime == "global":
        return 0, length
    if block is None:
        raise InputError("last-block edits need the block length")
    return max(0, length - block), length


def draw_edit_index(chain: ChainState, regime: str, rng: np.random.Generator,
                    block: int | None = None) -> int:
    """Uniform over the whole sequence (global) or its last ``block`` positions."""
    if not len(chain):
        raise InputError("cannot edit an empty chain")
    lo, hi = _edit_range(len(chain), regime, block)
    return int(lo + rng.integers(hi - lo))


def mh_move(chain: ChainState, model: ToyModel, alpha: float, config: MHConfig,
            ledger: CostLedger, rng: np.random.Generator, move: int = 0,
            _samplers: tuple | None = None) -> ChainState:
    """One regenerate-suffix proposal with its accept/reject decision."""
    draw = score = None
    if _samplers is not None:
        draw, score = _samplers
    else:
        draw = score = _Sampler(model, 1.0 / config.tau_prop)
    n = len(chain)
    j = draw_edit_index(chain, config.regime, rng, config.block)
    gen = _generate(chain, j, chain.block * config.block, model, draw, score, rng)
    new_len = j + len(gen[0])
    ledger.record_suffix(len(gen[0]))
    logp_old = chain.log_p
    logp_new = float(gen[2][-1]) if gen[0] else chain._cum[j]
    lo_new, hi_new = _edit_range(new_len, config.regime, config.block)
    if lo_new <= j < hi_new:
        lo_old, hi_old = _edit_range(n, config.regime, config.block)
        log_ratio = (alpha * (logp_new - logp_old)
                     + sum(chain._logq[j:]) - sum(gen[3])
                     + math.log(hi_old - lo_old) - math.log(hi_new - lo_new))
        accepted = math.log1p(-rng.random()) < log_ratio
    else:
        rng.random()
        accepted = False
    chain.moves.append(MoveRecord(chain.block, move, j, len(gen[0]), bool(accepted), logp_old, logp_new))
    if accepted:
        _splice(chain, j, gen)
    return chain


class MHResult(NamedTuple):
    sequence: tuple
    chain: ChainState
    ledger: CostLedger


def run_mh_power(model: ToyModel, alpha: float, config: MHConfig) -> MHResult:
    """K extensions, each followed by M moves; visits are tallied during the final block."""
    if alpha < 1:
        raise InputError("alpha must be at least 1")
    rng = np.random.default_rng([config.seed, 4])
    ledger = CostLedger()
    chain = ChainState.start(model)
    sampler = _Sampler(model, 1.0 / config.tau_prop)
    for k in range(1, config.n_blocks + 1):
        extend_block(chain, model, config, ledger, rng)
        for m in range(1, config.moves + 1):
            mh_move(chain, model, alpha, config, ledger, rng, move=m, _samplers=(sampler, sampler))
            if k == config.n_blocks:
                chain.visits[chain.sequence] += 1
    return MHResult(chain.sequence, chain, ledger)
