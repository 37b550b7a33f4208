"""Keyword-constrained generation guided by HMM backward probabilities.

The constraint "every keyword appears as a contiguous token run" is a DFA:
the product of one KMP/Aho-Corasick matcher per keyword, with the fully
matched state absorbing.  :func:`build_guidance` computes, for every hidden
state, DFA state and number of remaining emissions, the probability that the
HMM drives the DFA into acceptance in time.  :func:`guided_generate`
multiplies the base next-token distribution by that probability.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .compression import QuantizedModel
from .hmm import HmmModel


@dataclass(frozen=True)
class KeywordDfa:
    transitions: np.ndarray  # [n_states, vocab_size] next state
    accepting: np.ndarray  # [n_states] bool
    keywords: tuple[tuple[int, ...], ...]
    start: int = 0

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[1]

    def run(self, tokens: Sequence[int]) -> int:
        s = self.start
        for t in tokens:
            s = int(self.transitions[s, t])
        return s

    def accepts(self, tokens: Sequence[int]) -> bool:
        return bool(self.accepting[self.run(tokens)])


def _kmp_matcher(keyword: Sequence[int], vocab_size: int) -> np.ndarray:
    """Table [len+1, V]: state = length of the longest keyword prefix that is a suffix of the input."""
    m = len(keyword)
    table = np.zeros((m + 1, vocab_size), dtype=np.int64)
    table[0, keyword[0]] = 1
    fail = 0
    for j in range(1, m):
        table[j] = table[fail]
        table[j, keyword[j]] = j + 1
        fail = table[fail, keyword[j]]
    table[m] = m  # keyword seen: absorbing
    return table


def build_keyword_dfa(keywords: Sequence[Sequence[int]], vocab_size: int,
                      horizon: Optional[int] = None) -> KeywordDfa:
    """Reachable part of the product of per-keyword matchers."""
    if not keywords:
        raise ValueError("at least one keyword is required")
    kws = tuple(tuple(int(t) for t in k) for k in keywords)
    for k in kws:
        if not k:
            raise ValueError("keywords must be nonempty")
        if min(k) < 0 or max(k) >= vocab_size:
            raise ValueError(f"keyword {k} has token IDs outside [0, {vocab_size})")
        if horizon is not None and len(k) > horizon:
            warnings.warn(f"keyword {k} is longer than the generation horizon {horizon}", stacklevel=2)

    matchers = [_kmp_matcher(k, vocab_size) for k in kws]
    done = tuple(len(k) for k in kws)
    start = tuple(0 for _ in kws)
    index = {start: 0}
    order = [start]
    rows = []
    queue = deque([start])
    while queue:
        state = queue.popleft()
        nxt = np.stack([m[s] for m, s in zip(matchers, state)], axis=1)  # [V, n_keywords]
        row = np.empty(vocab_size, dtype=np.int64)
        for x in range(vocab_size):
            key = tuple(int(v) for v in nxt[x])
            if key not in index:
                index[key] = len(order)
                order.append(key)
                queue.append(key)
            row[x] = index[key]
        rows.append(row)
    transitions = np.stack(rows)
    accepting = np.array([s == done for s in order])
    return KeywordDfa(transitions, accepting, kws)


def neutral_dfa(vocab_size: int) -> KeywordDfa:
    """Single accepting state: no constraint."""
    return KeywordDfa(np.zeros((1, vocab_size), dtype=np.int64), np.array([True]), ())


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidanceTable:
    """``values[t, z, s]``: P(DFA accepts within t more emissions | hidden z emits next, DFA in s)."""

    values: np.ndarray

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1


def _as_model(model: Union[HmmModel, QuantizedModel]) -> HmmModel:
    return model.to_model() if isinstance(model, QuantizedModel) else model


def _lookahead(model: HmmModel, dfa: KeywordDfa, nxt_value: np.ndarray) -> np.ndarray:
    """[N, S, V]: sum_z' a[z, z'] * value(z', delta(s, x))."""
    moved = model.transition @ nxt_value  # [N, S]
    return moved[:, dfa.transitions]


def build_guidance(model: Union[HmmModel, QuantizedModel], dfa: KeywordDfa, horizon: int) -> GuidanceTable:
    model = _as_model(model)
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if dfa.vocab_size != model.vocab_size:
        raise ValueError("DFA and model vocabularies differ")
    N, S = model.hidden_size, dfa.n_states
    values = np.empty((horizon + 1, N, S))
    values[0] = dfa.accepting[None, :].astype(float)
    for t in range(1, horizon + 1):
        ahead = _lookahead(model, dfa, values[t - 1])  # [N, S, V]
        values[t] = np.einsum("zv,zsv->zs", model.emission, ahead)
    return GuidanceTable(values)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class GenerationResult:
    tokens: list[int]
    accepted: bool
    failed: bool = False  # no token could still satisfy the constraint


def _guide_factor(model: HmmModel, belief: np.ndarray, dfa: KeywordDfa, s: int,
                  value_next: np.ndarray) -> np.ndarray:
    """P_model(accept in time | prefix, next token x), per x; 0 where the model gives x no mass."""
    joint = belief[:, None] * model.emission  # [N, V]
    moved = model.transition @ value_next  # [N, S]
    reach = moved[:, dfa.transitions[s]]  # [N, V]
    num = (joint * reach).sum(axis=0)
    den = joint.sum(axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _filter(model: HmmModel, belief: np.ndarray, x: int) -> np.ndarray:
    b = (belief * model.emission[:, x]) @ model.transition
    tot = b.sum()
    return b / tot if tot > 0 else b


def next_token_weights(base: HmmModel, base_belief: np.ndarray, dfa: KeywordDfa, s: int,
                       table: Optional[GuidanceTable], remaining: int,
                       guide: Optional[HmmModel] = None, guide_belief: Optional[np.ndarray] = None) -> np.ndarray:
    """Unnormalized next-token weights: base predictive probability times guidance factor.

    ``remaining`` counts emissions left including this one.  With
    ``table=None`` the weights are the base distribution itself.
    """
    p = base_belief @ base.emission
    if table is None:
        return p
    g_model = base if guide is None else guide
    g_belief = base_belief if guide_belief is None else guide_belief
    return p * _guide_factor(g_model, g_belief, dfa, s, table.values[remaining - 1])


def guided_generate(model: Union[HmmModel, QuantizedModel], dfa: KeywordDfa,
                    table: Optional[GuidanceTable], max_len: int, seed,
                    guide: Union[HmmModel, QuantizedModel, None] = None) -> GenerationResult:
    """Sample ``max_len`` tokens from ``model``, steered towards DFA acceptance.

    ``table`` comes from :func:`build_guidance` on ``guide`` (default: the
    base model itself); ``None`` gives plain ancestral sampling.
    """
    base = _as_model(model)
    guide_m = None if guide is None else _as_model(guide)
    if table is not None and table.horizon < max_len:
        raise ValueError(f"guidance horizon {table.horizon} shorter than max_len {max_len}")
    rng = np.random.default_rng(seed)
    belief = base.initial.copy()
    g_belief = None if guide_m is None else guide_m.initial.copy()
    s = dfa.start
    tokens: list[int] = []
    for t in range(max_len):
        w = next_token_weights(base, belief, dfa, s, table, max_len - t, guide_m, g_belief)
        tot = w.sum()
        if not tot > 0:
            return GenerationResult(tokens, bool(dfa.accepting[s]), failed=True)
        cdf = np.cumsum(w / tot)
        x = int(min(np.searchsorted(cdf, rng.random(), side="right"), w.size - 1))
        tokens.append(x)
        s = int(dfa.transitions[s, x])
        belief = _filter(base, belief, x)
        if guide_m is not None:
            g_belief = _filter(guide_m, g_belief, x)
    return GenerationResult(tokens, bool(dfa.accepting[s]))


def trial_seeds(seed: int, trials: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([int(seed), 3]).spawn(trials)


def success_rate(model: Union[HmmModel, QuantizedModel], dfa: KeywordDfa, trials: int, max_len: int,
                 seed: int, guided: bool = True,
                 guide: Union[HmmModel, QuantizedModel, None] = None) -> float:
    """Fraction of ``trials`` generations accepted by ``dfa``.

    Trial ``i`` uses the ``i``-th child of the run seed, so guided and
    unguided runs with the same seed are paired draw for draw.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    table = build_guidance(guide if guide is not None else model, dfa, max_len) if guided else None
    hits = 0
    for child in trial_seeds(seed, trials):
        res = guided_generate(model, dfa, table, max_len, child, guide=guide if guided else None)
        hits += res.accepted
    return hits / trials
