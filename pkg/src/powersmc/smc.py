"""Sequential Monte Carlo for the sequence power target p(y)^alpha / Z.

Particles advance one token per step under a prefix-only proposal
q ∝ p^beta, get multiplied by p(token)^alpha / q(token), and are resampled
whenever the effective sample size drops below ``kappa * N``. EOS is
absorbing: a finished particle keeps its prefix and weight and costs no
model call.

Randomness is keyed by ``(seed, stream, counter)``: proposal uniforms come
from stream ``PROPOSAL`` at counter ``t`` (particle ``i`` reads slot ``i``),
resampling offsets from ``RESAMPLE`` at the event number, and the final
categorical draw from ``OUTPUT``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from powersmc.cost import CostLedger
from powersmc.errors import InputError, ModelSpecError, NumericalError, SupportError
from powersmc.lm import DecodeState, ToyModel, advance, batched_step, reindex_states, state_from_prefix
from powersmc.resampling import SCHEMES, ess, normalize_log_weights, resample
from powersmc.target import seq_key

PROPOSAL, RESAMPLE, OUTPUT = 1, 2, 3


def stream(seed: int, tag: int, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, int(counter)])


# ---------------------------------------------------------------------------
# proposal and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProposalPolicy:
    """q ∝ p^beta, optionally mixed with ``floor`` mass spread uniformly."""

    beta: float = 1.0
    floor: float = 0.0

    def __post_init__(self):
        if not self.beta > 0 or not np.isfinite(self.beta):
            raise InputError("proposal exponent must be positive and finite")
        if not 0.0 <= self.floor < 1.0:
            raise InputError("proposal floor must lie in [0, 1)")

    @property
    def tau(self) -> float:
        return 1.0 / self.beta

    def log_probs(self, rows: np.ndarray) -> np.ndarray:
        """Normalized proposal log-probabilities for one row or a stack of rows."""
        rows = np.asarray(rows, dtype=np.float64)
        if np.any(np.max(rows, axis=-1) == -np.inf):
            raise ModelSpecError("row puts no mass on any token")
        scaled = self.beta * rows
        lq = scaled - logsumexp(scaled, axis=-1, keepdims=True)
        if self.floor:
            a = rows.shape[-1]
            lq = np.logaddexp(math.log1p(-self.floor) + lq, math.log(self.floor / a))
        return lq


def _invert_rows(log_q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """First token (ascending id) whose cumulative proposal mass exceeds u."""
    q = np.exp(log_q)
    cdf = np.cumsum(q, axis=1)
    tok = np.sum(cdf <= u[:, None], axis=1)
    overflow = tok >= q.shape[1]
    if np.any(overflow):
        last = q.shape[1] - 1 - np.argmax(q[:, ::-1] > 0, axis=1)
        tok = np.where(overflow, last, tok)
    return tok


def propose_token(row: np.ndarray, policy: ProposalPolicy, rng: np.random.Generator):
    """Draw one token from q ∝ p^beta by inverse CDF; returns (token, log q(token))."""
    lq = policy.log_probs(np.asarray(row)[None, :])
    tok = int(_invert_rows(lq, np.array([rng.random()]))[0])
    return tok, float(lq[0, tok])


def incremental_logweight(log_p_token: float, log_q_token: float, alpha_stage: float) -> float:
    """alpha * log p(token) - log q(token)."""
    if log_q_token == -np.inf:
        raise SupportError("sampled token has zero proposal probability")
    return alpha_stage * log_p_token - log_q_token


def incremental_logweights(log_p: np.ndarray, log_q: np.ndarray, alpha_stage: float) -> np.ndarray:
    if np.any(log_q == -np.inf):
        raise SupportError("sampled token has zero proposal probability")
    return alpha_stage * log_p - log_q


def log_second_moment(row: np.ndarray, alpha: float, policy: ProposalPolicy) -> float:
    """log E_q[w^2] = log sum_v p(v)^(2 alpha) / q(v), exact over the row's support."""
    row = np.asarray(row, dtype=np.float64)
    lq = policy.log_probs(row)
    support = row > -np.inf
    if np.any(lq[support] == -np.inf):
        return np.inf
    return float(logsumexp(2.0 * alpha * row[support] - lq[support]))


# ---------------------------------------------------------------------------
# schedules and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RampSchedule:
    """Exponents 1 = a_0 < ... < a_L = alpha switched on after token t_l.

    ``boundaries[0]`` is 0; stage ``l`` covers tokens ``t_l + 1 .. t_{l+1}``.
    """

    alphas: tuple
    boundaries: tuple

    def __post_init__(self):
        a, b = self.alphas, self.boundaries
        if len(a) != len(b) or len(a) < 2:
            raise InputError("ramp needs matching exponents and boundaries, at least two stages")
        if a[0] != 1.0:
            raise InputError("ramp must start at exponent 1")
        if any(x >= y for x, y in zip(a, a[1:])):
            raise InputError("ramp exponents must increase strictly")
        if b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise InputError("ramp boundaries must start at 0 and increase strictly")

    @classmethod
    def linear(cls, alpha: float, t_ramp: int = 100, n_stages: int | None = None) -> "RampSchedule":
        """a_l = 1 + (alpha - 1) l / L with boundaries spread over tokens 1..t_ramp."""
        L = t_ramp if n_stages is None else n_stages
        if alpha <= 1 or L < 1 or L > t_ramp:
            raise InputError("linear ramp needs alpha > 1 and 1 <= L <= t_ramp")
        alphas = tuple(1.0 + (alpha - 1.0) * l / L for l in range(L))
        alphas = alphas + (float(alpha),)
        bounds = tuple(int(round(l * t_ramp / L)) for l in range(L + 1))
        return cls(alphas, bounds)

    @property
    def final_alpha(self) -> float:
        return float(self.alphas[-1])

    @property
    def last_boundary(self) -> int:
        return int(self.boundaries[-1])

    def stage_alpha(self, t: int) -> float:
        """Exponent in force while emitting token ``t``."""
        l = int(np.searchsorted(self.boundaries, t, side="left")) - 1
        return float(self.alphas[max(l, 0)])

    def dalpha_after(self, t: int) -> float:
        l = int(np.searchsorted(self.boundaries, t, side="left"))
        if 0 < l < len(self.boundaries) and self.boundaries[l] == t:
            return float(self.alphas[l] - self.alphas[l - 1])
        return 0.0


@dataclass(frozen=True)
class EngineConfig:
    n_particles: int = 64
    alpha: float = 4.0
    kappa: float = 0.5
    t_max: int | None = None
    resampler: str = "systematic"
    seed: int = 0
    ramp: RampSchedule | None = None
    proposal: ProposalPolicy | None = None
    resample: bool = True
    # experimental ablation: ESS over unfinished particles only
    ess_exclude_done: bool = False
    verify_states: bool = False

    def __post_init__(self):
        if self.n_particles < 1:
            raise InputError("need at least one particle")
        if self.alpha < 1:
            raise InputError("alpha must be at least 1")
        if not 0 < self.kappa < 1:
            raise InputError("kappa must lie in (0, 1)")
        if self.resampler not in SCHEMES:
            raise InputError(f"unknown resampler {self.resampler!r}")
        if self.seed < 0:
            raise InputError("seed must be unsigned")
        if self.t_max is not None and self.t_max < 1:
            raise InputError("t_max must be positive")
        if self.ramp is not None and abs(self.ramp.final_alpha - self.alpha) > 1e-12:
            raise InputError("ramp must end at the target alpha")

    def horizon(self, model: ToyModel) -> int:
        return model.t_cap if self.t_max is None else self.t_max

    def stage_alpha(self, t: int) -> float:
        return self.alpha if self.ramp is None else self.ramp.stage_alpha(t)

    def policy(self, alpha_stage: float) -> ProposalPolicy:
        return self.proposal if self.proposal is not None else ProposalPolicy(alpha_stage)


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------

@dataclass
class Particle:
    prefix: tuple
    log_weight: float
    done: bool
    state: DecodeState
    cum_logp: float


@dataclass(frozen=True)
class ResampleEvent:
    step: int
    ess: float
    ancestors: tuple


@dataclass
class WeightedSampleSet:
    sequences: list
    log_weights: np.ndarray
    log_p: np.ndarray
    terminated: np.ndarray

    def __len__(self):
        return len(self.sequences)

    def normalized_weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    def masses(self) -> dict:
        out: dict = {}
        for s, w in zip(self.sequences, self.normalized_weights()):
            out[s] = out.get(s, 0.0) + float(w)
        return out

    def log_normalizer(self) -> float:
        """log of (1/N) sum_i exp(log W_i)."""
        return float(logsumexp(self.log_weights) - math.log(len(self)))

    def normalizer_stderr(self) -> float:
        m = float(np.max(self.log_weights))
        w = np.exp(self.log_weights - m)
        return float(math.exp(m) * np.std(w, ddof=1) / math.sqrt(len(w))) if len(w) > 1 else float("nan")

    def to_csv(self) -> str:
        """Aggregated by sequence: ExactTarget columns plus weight and terminated flag.

        ``log_pi_alpha`` is the log of the empirical target mass.
        """
        masses = self.masses()
        info = {}
        for s, lp, term in zip(self.sequences, self.log_p, self.terminated):
            info.setdefault(s, (float(lp), bool(term)))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "log_p", "log_pi_alpha", "weight", "terminated"])
        for s in sorted(masses):
            m = masses[s]
            lp, term = info[s]
            w.writerow([seq_key(s), repr(lp), repr(math.log(m)) if m > 0 else "-inf",
                        repr(m), int(term)])
        return buf.getvalue()


@dataclass
class Ensemble:
    prefixes: list
    log_weights: np.ndarray
    done: np.ndarray
    cum_logp: np.ndarray
    states: list
    t: int = 0
    resample_log: list = field(default_factory=list)
    last_ess: float = float("nan")

    @classmethod
    def initial(cls, model: ToyModel, n: int) -> "Ensemble":
        return cls(
            prefixes=[() for _ in range(n)],
            log_weights=np.zeros(n),
            done=np.zeros(n, dtype=bool),
            cum_logp=np.zeros(n),
            states=[model.initial_state() for _ in range(n)],
        )

    @property
    def n(self) -> int:
        return len(self.prefixes)

    def particle(self, i: int) -> Particle:
        return Particle(self.prefixes[i], float(self.log_weights[i]), bool(self.done[i]),
                        self.states[i], float(self.cum_logp[i]))

    @property
    def particles(self) -> list:
        return [self.particle(i) for i in range(self.n)]

    def normalized_weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    def ess(self, exclude_done: bool = False) -> float:
        if exclude_done:
            live = ~self.done
            if not live.any():
                return float(self.n)
            return ess(normalize_log_weights(self.log_weights[live]))
        return ess(self.normalized_weights())

    def sample_set(self) -> WeightedSampleSet:
        return WeightedSampleSet(list(self.prefixes), self.log_weights.copy(),
                                 self.cum_logp.copy(), self.done.copy())


@dataclass(frozen=True)
class TraceRow:
    step: int
    ess: float
    resampled: bool
    alpha_stage: float
    log_normalizer_increment: float
    num_done: int


@dataclass
class DiagnosticsTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def num_resamples(self) -> int:
        return sum(r.resampled for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "ess", "resampled", "alpha_stage", "log_normalizer_increment", "num_done"])
        for r in self.rows:
            w.writerow([r.step, repr(r.ess), int(r.resampled), repr(r.alpha_stage),
                        repr(r.log_normalizer_increment), r.num_done])
        return buf.getvalue()


def estimate_normalizer(trace: DiagnosticsTrace, log: bool = False) -> float:
    """Product over steps of the weighted mean incremental weight.

    Resampling resets are already folded into the per-step increments, so the
    product is the usual unbiased SMC estimate of Z_alpha.
    """
    if not trace.rows:
        raise InputError("empty trace")
    total = math.fsum(r.log_normalizer_increment for r in trace.rows)
    return total if log else math.exp(total)


# ---------------------------------------------------------------------------
# engine steps
# ---------------------------------------------------------------------------

def smc_step(ens: Ensemble, model: ToyModel, config: EngineConfig, ledger: CostLedger | None = None) -> Ensemble:
    """Advance every unfinished particle by one token (in place)."""
    t = ens.t + 1
    if t > config.horizon(model):
        raise InputError(f"step {t} beyond horizon {config.horizon(model)}")
    alpha_stage = config.stage_alpha(t)
    u = stream(config.seed, PROPOSAL, t).random(ens.n)
    active = np.flatnonzero(~ens.done)
    if active.size:
        live_states = [ens.states[i] for i in active]
        rows = np.stack(batched_step(model, live_states, None))
        if ledger is not None:
            ledger.record_step(active.size, ens.n)
        lq = config.policy(alpha_stage).log_probs(rows)
        tokens = _invert_rows(lq, u[active])
        ar = np.arange(active.size)
        log_q = lq[ar, tokens]
        log_p = rows[ar, tokens]
        ens.log_weights[active] += incremental_logweights(log_p, log_q, alpha_stage)
        ens.cum_logp[active] += log_p
        for i, tok in zip(active.tolist(), tokens.tolist()):
            ens.prefixes[i] = ens.prefixes[i] + (tok,)
            ens.states[i] = advance(model, ens.states[i], tok)
        ens.done[active] = tokens == model.eos_id
    elif ledger is not None:
        ledger.record_step(0, ens.n)
    ens.t = t
    return ens


def apply_ramp_boundary(ens: Ensemble, dalpha: float) -> Ensemble:
    """Move the target from p^a to p^(a + dalpha) by reweighting with the full prefix likelihood."""
    if dalpha < 0:
        raise InputError("ramp increments must be non-negative")
    if dalpha:
        ens.log_weights += dalpha * ens.cum_logp
    return ens


def maybe_resample(ens: Ensemble, config: EngineConfig, model: ToyModel | None = None):
    """Resample when ESS < kappa N; returns (fired, ensemble)."""
    e = ens.ess(config.ess_exclude_done)
    ens.last_ess = e
    if not e < config.kappa * ens.n:
        return False, ens
    rng = stream(config.seed, RESAMPLE, len(ens.resample_log))
    anc = resample(ens.normalized_weights(), config.resampler, rng)
    ens.prefixes = [ens.prefixes[a] for a in anc]
    ens.done = ens.done[anc]
    ens.cum_logp = ens.cum_logp[anc]
    ens.states = reindex_states(ens.states, anc)
    ens.log_weights = np.zeros(ens.n)
    ens.resample_log.append(ResampleEvent(ens.t, e, tuple(int(a) for a in anc)))
    if config.verify_states and model is not None:
        for prefix, state in zip(ens.prefixes, ens.states):
            if state != state_from_prefix(model, prefix):
                raise NumericalError("decode state diverged from its prefix after resampling")
    return True, ens


def _run(model: ToyModel, config: EngineConfig, allow_resample: bool,
         on_resample: Callable[[Ensemble], None] | None = None):
    horizon = config.horizon(model)
    if config.ramp is not None and config.ramp.last_boundary > horizon:
        raise InputError("ramp extends beyond the horizon; the final target would not be reached")
    ens = Ensemble.initial(model, config.n_particles)
    ledger = CostLedger()
    trace = DiagnosticsTrace()
    log_n = math.log(ens.n)
    prev = log_n
    for t in range(1, horizon + 1):
        alpha_stage = config.stage_alpha(t)
        smc_step(ens, model, config, ledger)
        if config.ramp is not None:
            apply_ramp_boundary(ens, config.ramp.dalpha_after(t))
        lse = float(logsumexp(ens.log_weights))
        if lse == -np.inf or np.isnan(lse):
            raise NumericalError(f"all particle weights vanished at step {t}")
        fired = False
        if allow_resample:
            fired, ens = maybe_resample(ens, config, model)
            e = ens.last_ess
        else:
            e = ens.ess(config.ess_exclude_done)
        trace.rows.append(TraceRow(t, e, fired, alpha_stage, lse - prev, int(ens.done.sum())))
        prev = log_n if fired else lse
        if fired and on_resample is not None:
            on_resample(ens)
    return ens, ledger, trace


class SMCResult(NamedTuple):
    sample: tuple
    ensemble: Ensemble
    trace: DiagnosticsTrace
    ledger: CostLedger


class SISResult(NamedTuple):
    samples: WeightedSampleSet
    normalizer: float
    ensemble: Ensemble
    trace: DiagnosticsTrace
    ledger: CostLedger


def run_power_smc(model: ToyModel, config: EngineConfig,
                  on_resample: Callable[[Ensemble], None] | None = None) -> SMCResult:
    ens, ledger, trace = _run(model, config, config.resample, on_resample)
    u = stream(config.seed, OUTPUT).random()
    cdf = np.cumsum(ens.normalized_weights())
    idx = min(int(np.searchsorted(cdf, u, side="right")), ens.n - 1)
    return SMCResult(ens.prefixes[idx], ens, trace, ledger)


def run_sis(model: ToyModel, config: EngineConfig) -> SISResult:
    """Same recursion with resampling disabled; weights accumulate over whole paths."""
    ens, ledger, trace = _run(model, config, allow_resample=False)
    samples = ens.sample_set()
    return SISResult(samples, math.exp(samples.log_normalizer()), ens, trace, ledger)
