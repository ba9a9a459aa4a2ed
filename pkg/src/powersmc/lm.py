"""Autoregressive toy models with exact next-token log-probabilities.

Every model emits log-probability rows over ``V + 1`` symbols (``V`` ordinary
tokens plus EOS) and carries a small incremental :class:`DecodeState`, the
stand-in for a transformer KV cache. At step ``t_cap`` the row is forced to
put all mass on EOS, so every trajectory terminates and the set of complete
sequences can be enumerated exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from powersmc.cost import CostLedger
from powersmc.errors import InputError, ModelSpecError, StateError

VARIANTS = ("tabular-explicit", "ngram", "synthetic-logit")
BOS = -1
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Vocabulary:
    size: int
    eos_id: int

    def __post_init__(self):
        if self.size < 1:
            raise ModelSpecError("vocabulary needs at least one ordinary token")
        if not 0 <= self.eos_id <= self.size:
            raise ModelSpecError(f"eos_id {self.eos_id} outside alphabet of {self.size + 1}")

    @property
    def n_symbols(self) -> int:
        return self.size + 1


@dataclass
class DecodeState:
    """Per-particle incremental state.

    ``step`` is the 1-based index of the next token to be emitted. ``window``
    and ``digest`` hold the variant-specific context (a truncated prefix, the
    last ``n - 1`` tokens, or a rolling hash).
    """

    step: int = 1
    window: tuple = ()
    digest: int = 0
    absorbed: bool = False


def log_normalize(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class ToyModel:
    """Base class. Subclasses provide the unforced row and the context update."""

    variant = ""

    def __init__(self, vocab: Vocabulary, t_cap: int, seed: int = 0):
        if t_cap < 1:
            raise ModelSpecError("t_cap must be at least 1")
        if seed < 0:
            raise ModelSpecError("seed must be unsigned")
        self.vocab = vocab
        self.t_cap = int(t_cap)
        self.seed = int(seed)
        eos_row = np.full(vocab.n_symbols, -np.inf)
        eos_row[vocab.eos_id] = 0.0
        self._eos_row = _readonly(eos_row)

    @property
    def n_symbols(self) -> int:
        return self.vocab.n_symbols

    @property
    def eos_id(self) -> int:
        return self.vocab.eos_id

    def initial_state(self) -> DecodeState:
        return DecodeState(step=1, window=self._initial_window(), digest=self._initial_digest())

    def _initial_window(self) -> tuple:
        return ()

    def _initial_digest(self) -> int:
        return 0

    def _row(self, state: DecodeState) -> np.ndarray:
        raise NotImplementedError

    def _fold(self, state: DecodeState, token: int) -> tuple[tuple, int]:
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def to_spec(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "vocab_size": self.vocab.size,
            "eos_id": self.vocab.eos_id,
            "t_cap": self.t_cap,
            "params": self.params(),
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}(V={self.vocab.size}, eos={self.eos_id}, t_cap={self.t_cap})"


class TabularModel(ToyModel):
    """Explicit conditional tables keyed by the ordinary-token prefix.

    Prefixes without an entry fall back to ``default``; a model with no
    default must list a row for every reachable prefix.
    """

    variant = "tabular-explicit"

    def __init__(self, vocab, t_cap, rows: dict, default=None, seed: int = 0):
        super().__init__(vocab, t_cap, seed)
        self._rows = {}
        for prefix, probs in rows.items():
            prefix = tuple(int(t) for t in prefix)
            for tok in prefix:
                if not 0 <= tok < vocab.n_symbols or tok == vocab.eos_id:
                    raise ModelSpecError(f"row key {prefix} contains a non-ordinary token")
            self._rows[prefix] = self._check_row(probs)
        self._default = None if default is None else self._check_row(default)
        self._depth = max((len(k) for k in self._rows), default=0)

    def _check_row(self, probs) -> np.ndarray:
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (self.n_symbols,):
            raise ModelSpecError(f"row has {p.size} entries, alphabet has {self.n_symbols}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ModelSpecError("row entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ModelSpecError(f"row sums to {p.sum()}, not 1")
        with np.errstate(divide="ignore"):
            return _readonly(log_normalize(np.log(p)))

    def _row(self, state):
        row = self._rows.get(state.window, self._default)
        if row is None:
            raise ModelSpecError(f"no row for prefix {state.window} and no default row")
        return row

    def _fold(self, state, token):
        w = state.window
        if len(w) <= self._depth:
            w = w + (token,)
        return w, 0

    def params(self):
        def probs(row):
            return [float(v) for v in np.exp(row)]

        out = {"rows": {"-".join(map(str, k)): probs(r) for k, r in self._rows.items()}}
        if self._default is not None:
            out["default"] = probs(self._default)
        return out


class NgramModel(ToyModel):
    """Count-based n-gram model with add-k smoothing and suffix backoff.

    The row for a context uses the longest suffix of the last ``order - 1``
    tokens that was observed in training. Training pairs stop at the first EOS
    of each corpus sequence.
    """

    variant = "ngram"

    def __init__(self, vocab, t_cap, order: int, corpus: Sequence[Sequence[int]],
                 smoothing: float = 0.0, seed: int = 0):
        super().__init__(vocab, t_cap, seed)
        if order < 1:
            raise ModelSpecError("n-gram order must be at least 1")
        if smoothing < 0:
            raise ModelSpecError("smoothing must be non-negative")
        self.order = int(order)
        self.smoothing = float(smoothing)
        self.corpus = [tuple(int(t) for t in seq) for seq in corpus]
        A = self.n_symbols
        counts: dict[tuple, np.ndarray] = {}
        for seq in self.corpus:
            padded = (BOS,) * (self.order - 1) + seq
            for i, tok in enumerate(seq):
                if not 0 <= tok < A:
                    raise ModelSpecError(f"corpus token {tok} outside alphabet")
                ctx = padded[i:i + self.order - 1]
                for cut in range(len(ctx) + 1):
                    counts.setdefault(ctx[cut:], np.zeros(A))[tok] += 1
                if tok == vocab.eos_id:
                    break
        self._counts = counts
        self._cache: dict[tuple, np.ndarray] = {}

    def _initial_window(self):
        return (BOS,) * (self.order - 1)

    def _row(self, state):
        ctx = state.window
        row = self._cache.get(ctx)
        if row is not None:
            return row
        for cut in range(len(ctx) + 1):
            c = self._counts.get(ctx[cut:])
            if c is not None:
                break
        else:
            c = np.zeros(self.n_symbols)
        c = c + self.smoothing
        if c.sum() == 0:
            c = np.ones(self.n_symbols)
        with np.errstate(divide="ignore"):
            row = _readonly(log_normalize(np.log(c / c.sum())))
        self._cache[ctx] = row
        return row

    def _fold(self, state, token):
        if self.order == 1:
            return (), 0
        return (state.window + (token,))[1:], 0

    def params(self):
        return {"order": self.order, "corpus": [list(s) for s in self.corpus],
                "smoothing": self.smoothing}


class SyntheticLogitModel(ToyModel):
    """Pseudo-random logits derived from a rolling hash of the prefix.

    Each ordinary logit is ``scale * (2u - 1)`` with ``u`` a hash of
    (digest, token); the EOS logit additionally gets ``eos_bias + eos_slope * t``.
    """

    variant = "synthetic-logit"

    def __init__(self, vocab, t_cap, scale: float = 2.0, eos_bias: float = 0.0,
                 eos_slope: float = 0.0, seed: int = 0):
        super().__init__(vocab, t_cap, seed)
        self.scale = float(scale)
        self.eos_bias = float(eos_bias)
        self.eos_slope = float(eos_slope)
        self._row_cached = lru_cache(maxsize=1 << 16)(self._compute_row)

    def _initial_digest(self):
        return splitmix64(self.seed)

    def _compute_row(self, digest: int, step: int) -> np.ndarray:
        u = np.array([splitmix64(digest ^ ((v + 1) * 0xD1B54A32D192ED03 & _MASK64)) >> 11
                      for v in range(self.n_symbols)], dtype=np.float64) * 2.0 ** -53
        logits = self.scale * (2.0 * u - 1.0)
        logits[self.eos_id] += self.eos_bias + self.eos_slope * step
        return _readonly(log_normalize(logits))

    def _row(self, state):
        return self._row_cached(state.digest, state.step)

    def _fold(self, state, token):
        return (), splitmix64(state.digest ^ ((token + 1) * 0x9E3779B97F4A7C15 & _MASK64))

    def params(self):
        return {"scale": self.scale, "eos_bias": self.eos_bias, "eos_slope": self.eos_slope}


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def next_logprobs(model: ToyModel, state: DecodeState) -> np.ndarray:
    """Normalized next-token log-probabilities (read-only array)."""
    if state.absorbed:
        if state.step > model.t_cap + 1:
            raise StateError(f"absorbed state at step {state.step} beyond t_cap + 1")
        return model._eos_row
    if state.step < 1 or state.step > model.t_cap:
        raise StateError(f"step {state.step} outside 1..{model.t_cap}")
    if state.step == model.t_cap:
        return model._eos_row
    return model._row(state)


def advance(model: ToyModel, state: DecodeState, token: int) -> DecodeState:
    token = int(token)
    if not 0 <= token < model.n_symbols:
        raise InputError(f"token {token} outside alphabet of {model.n_symbols}")
    if state.absorbed:
        if token != model.eos_id:
            raise StateError("absorbed state only accepts EOS")
        return replace(state)
    if state.step < 1 or state.step > model.t_cap:
        raise StateError(f"step {state.step} outside 1..{model.t_cap}")
    if token == model.eos_id:
        return replace(state, step=state.step + 1, absorbed=True)
    if state.step == model.t_cap:
        raise StateError("only EOS may be emitted at t_cap")
    window, digest = model._fold(state, token)
    return DecodeState(step=state.step + 1, window=window, digest=digest)


def state_from_prefix(model: ToyModel, prefix: Iterable[int]) -> DecodeState:
    """Recompute a decode state from scratch."""
    state = model.initial_state()
    for tok in prefix:
        state = advance(model, state, tok)
    return state


def batched_step(model: ToyModel, states: Sequence[DecodeState], ledger: CostLedger | None = None):
    """One row per state; absorbed states cost no token-eval."""
    if not states:
        raise InputError("batched_step needs at least one state")
    rows = [next_logprobs(model, s) for s in states]
    if ledger is not None:
        ledger.record_step(sum(not s.absorbed for s in states), len(states))
    return rows


def reindex_states(states: Sequence[DecodeState], ancestors: Sequence[int]) -> list[DecodeState]:
    """Independent copies ``states[a]`` for each ancestor index ``a``."""
    n = len(states)
    out = []
    for a in ancestors:
        a = int(a)
        if not 0 <= a < n:
            raise InputError(f"ancestor index {a} out of bounds for {n} states")
        out.append(replace(states[a]))
    return out


def sequence_logprob(model: ToyModel, y: Sequence[int]) -> float:
    """Sum of per-step log-conditionals along ``y``."""
    y = [int(t) for t in y]
    if y and y[-1] != model.eos_id and len(y) > model.t_cap:
        raise InputError("unterminated sequence longer than t_cap")
    state = model.initial_state()
    total = 0.0
    for tok in y:
        if not 0 <= tok < model.n_symbols:
            raise InputError(f"token {tok} outside alphabet of {model.n_symbols}")
        total += next_logprobs(model, state)[tok]
        state = advance(model, state, tok)
    return float(total)


# ---------------------------------------------------------------------------
# construction and specification files
# ---------------------------------------------------------------------------

def _parse_prefix_key(key: str) -> tuple:
    key = key.strip()
    return tuple(int(t) for t in key.split("-")) if key else ()


def model_from_spec(spec: dict) -> ToyModel:
    try:
        variant = spec["variant"]
        vocab = Vocabulary(int(spec["vocab_size"]), int(spec["eos_id"]))
        t_cap = int(spec["t_cap"])
        seed = int(spec.get("seed", 0))
        params = spec.get("params", {}) or {}
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelSpecError(f"malformed model spec: {exc}") from None
    if variant == "tabular-explicit":
        rows = {_parse_prefix_key(k): v for k, v in params.get("rows", {}).items()}
        return TabularModel(vocab, t_cap, rows, params.get("default"), seed=seed)
    if variant == "ngram":
        if "order" not in params:
            raise ModelSpecError("ngram params need an order")
        return NgramModel(vocab, t_cap, int(params["order"]), params.get("corpus", []),
                          float(params.get("smoothing", 0.0)), seed=seed)
    if variant == "synthetic-logit":
        return SyntheticLogitModel(vocab, t_cap, float(params.get("scale", 2.0)),
                                   float(params.get("eos_bias", 0.0)),
                                   float(params.get("eos_slope", 0.0)), seed=seed)
    raise ModelSpecError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")


def load_model(path) -> ToyModel:
    try:
        spec = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"model spec {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"model spec {path} is not valid JSON: {exc}") from None
    return model_from_spec(spec)


def random_tabular(vocab_size: int, t_cap: int, seed: int = 0, concentration: float = 1.0,
                   eos_id: int | None = None) -> TabularModel:
    """Tabular model with an independent Dirichlet row for every reachable prefix."""
    eos_id = vocab_size if eos_id is None else eos_id
    vocab = Vocabulary(vocab_size, eos_id)
    rng = np.random.default_rng(seed)
    ordinary = [v for v in range(vocab.n_symbols) if v != eos_id]
    rows = {}
    frontier = [()]
    for _ in range(t_cap - 1):
        nxt = []
        for prefix in frontier:
            rows[prefix] = rng.dirichlet(np.full(vocab.n_symbols, concentration))
            nxt.extend(prefix + (v,) for v in ordinary)
        frontier = nxt
    return TabularModel(vocab, t_cap, rows, seed=seed)


def uniform_model(vocab_size: int, t_cap: int, allow_eos: bool = True) -> TabularModel:
    """Every row uniform; with ``allow_eos=False`` EOS appears only at t_cap."""
    A = vocab_size + 1
    row = np.full(A, 1.0 / A) if allow_eos else np.r_[np.full(vocab_size, 1.0 / vocab_size), 0.0]
    return TabularModel(Vocabulary(vocab_size, vocab_size), t_cap, {}, default=row)


def two_sequence_model(p_long: float = 0.75) -> TabularModel:
    """Two complete sequences: ``(0, EOS)`` with mass ``p_long`` and ``(EOS,)``."""
    return TabularModel(Vocabulary(1, 1), 2, {(): [p_long, 1.0 - p_long]})


def mismatch_model() -> TabularModel:
    """Two ordinary steps, then forced EOS.

    Token 0 is likely but leads to a flat continuation; token 1 is less likely
    but leads to a confident one, so per-token temperature and the sequence
    power target disagree.
    """
    vocab = Vocabulary(2, 2)
    rows = {
        (): [0.6, 0.4, 0.0],
        (0,): [0.5, 0.5, 0.0],
        (1,): [0.95, 0.05, 0.0],
    }
    return TabularModel(vocab, 3, rows)
