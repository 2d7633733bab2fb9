"""CTC loss, a brute-force verification oracle, greedy decoding, and the
shared linear posterior head.

The loss is the exact sum over all monotonic alignments, computed with a
log-space forward-backward recursion (pairwise logaddexp, no scaling
factors). The brute-force oracle enumerates every raw label sequence and
never touches the DP, so the two paths verify each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, CtcInfeasibleError

BLANK_ID = 0


@dataclass(frozen=True)
class Vocabulary:
    """Token id space: blank is 0, phonemes follow, language-id tokens form
    a contiguous tail block."""

    phonemes: tuple[str, ...]
    languages: tuple[str, ...]

    def __post_init__(self):
        if not self.phonemes:
            raise ConfigError("vocabulary needs at least one phoneme")
        symbols = self.symbols
        if len(set(symbols)) != len(symbols):
            raise ConfigError("vocabulary symbols must be unique")

    @property
    def symbols(self) -> tuple[str, ...]:
        return ("<blank>",) + self.phonemes + tuple(f"<{lang}>" for lang in self.languages)

    @property
    def size(self) -> int:
        return 1 + len(self.phonemes) + len(self.languages)

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    @property
    def first_lid_id(self) -> int:
        return 1 + len(self.phonemes)

    def phoneme_token(self, phoneme_index: int) -> int:
        if not 0 <= phoneme_index < len(self.phonemes):
            raise ConfigError(f"phoneme index {phoneme_index} out of range")
        return 1 + phoneme_index

    def lid_token(self, language) -> int:
        if isinstance(language, str):
            try:
                return self.first_lid_id + self.languages.index(language)
            except ValueError:
                raise ConfigError(f"unknown language id {language!r}") from None
        if not 0 <= int(language) < len(self.languages):
            raise ConfigError(f"unknown language id {language!r}")
        return self.first_lid_id + int(language)

    def is_lid(self, token: int) -> bool:
        return self.first_lid_id <= token < self.size

    def language_of(self, token: int) -> str:
        if not self.is_lid(token):
            raise ConfigError(f"token {token} is not a language-id token")
        return self.languages[token - self.first_lid_id]

    def strip_lid(self, tokens) -> list[int]:
        return [t for t in tokens if not self.is_lid(t)]

    def to_dict(self) -> dict:
        return {"phonemes": list(self.phonemes), "languages": list(self.languages)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        unknown = set(d) - {"phonemes", "languages"}
        if unknown:
            raise ConfigError(f"unknown vocabulary keys: {sorted(unknown)}")
        return cls(tuple(d["phonemes"]), tuple(d["languages"]))


@dataclass
class CtcPosterior:
    """Per-layer log-probabilities produced by the shared head."""

    layer: int
    log_probs: tz.Tensor


@dataclass
class CtcLossResult:
    loss: tz.Tensor
    grad: np.ndarray = field(repr=False)


def _validate_targets(targets, n_classes: int, blank: int):
    targets = [int(t) for t in targets]
    if not targets:
        raise ConfigError("ctc targets must be nonempty")
    for t in targets:
        if t == blank:
            raise ConfigError("ctc targets may not contain the blank token")
        if not 0 <= t < n_classes:
            raise ConfigError(f"target token {t} outside vocabulary of size {n_classes}")
    return targets


def min_frames(targets, blank: int = BLANK_ID) -> int:
    """Shortest frame sequence that can emit ``targets`` (repeats need a
    separating blank)."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _extended(targets, blank):
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    return ext


def _forward_backward(log_probs: np.ndarray, targets, blank: int):
    """Log-space alpha/beta recursions; returns (loss, dloss/dlog_probs)."""
    t_len, n_classes = log_probs.shape
    ext = _extended(targets, blank)
    s_len = ext.size
    emit = log_probs[:, ext]  # T x S
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    neg_inf = -np.inf
    alpha = np.full((t_len, s_len), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, np.concatenate(([neg_inf], prev[:-1])))
        skip = np.concatenate(([neg_inf, neg_inf], prev[:-2]))
        acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + emit[t]

    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if s_len > 1 else alpha[-1, -1]
    if not np.isfinite(log_p):
        raise CtcInfeasibleError(
            f"no feasible alignment: {t_len} frames for {len(targets)} targets"
        )

    beta = np.full((t_len, s_len), neg_inf)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = np.logaddexp(nxt, np.concatenate((nxt[1:], [neg_inf])))
        skip = np.concatenate((nxt[2:], [neg_inf, neg_inf]))
        skip = np.where(np.concatenate((can_skip[2:], [False, False])), skip, neg_inf)
        beta[t] = np.logaddexp(acc, skip)

    gamma = alpha + beta  # log prob of all paths through state s at time t
    per_label = np.full((t_len, n_classes), neg_inf)
    rows = np.repeat(np.arange(t_len), s_len)
    cols = np.tile(ext, t_len)
    np.logaddexp.at(per_label, (rows, cols), gamma.reshape(-1))
    with np.errstate(under="ignore"):
        grad = -np.exp(per_label - log_p)
    return -log_p, grad


def ctc_loss(log_probs, targets, blank: int = BLANK_ID) -> CtcLossResult:
    """Exact CTC negative log-likelihood in nats.

    ``log_probs`` is a T' x V matrix of row-normalized log-probabilities
    (tensor or array). Returns the scalar loss wired into the autodiff
    graph plus the gradient with respect to ``log_probs`` as an array.
    Raises CtcInfeasibleError when T' is too short to emit the targets.
    """
    lp = log_probs if isinstance(log_probs, tz.Tensor) else tz.Tensor(log_probs)
    if lp.values.ndim != 2:
        raise ConfigError(f"ctc_loss expects a T x V matrix, got shape {lp.values.shape}")
    t_len, n_classes = lp.values.shape
    targets = _validate_targets(targets, n_classes, blank)
    if min_frames(targets, blank) > t_len:
        raise CtcInfeasibleError(
            f"{t_len} frames cannot emit {len(targets)} targets "
            f"(needs at least {min_frames(targets, blank)})"
        )
    loss64, grad64 = _forward_backward(lp.values.astype(np.float64), targets, blank)

    def backward_fn(g):
        return (float(g) * grad64,)

    loss = tz._op(np.asarray(loss64, dtype=lp.values.dtype), (lp,), backward_fn)
    return CtcLossResult(loss=loss, grad=grad64)


def ctc_brute_force(probs: np.ndarray, targets, blank: int = BLANK_ID, guard: int = 10_000_000) -> float:
    """Total target probability by enumerating every raw label sequence.

    Collapses adjacent repeats, then deletes blanks, and sums the product
    probabilities of every sequence that matches. Exponential in T', hence
    the instance-size guard.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t_len, n_classes = probs.shape
    if n_classes**t_len > guard:
        raise ConfigError(f"brute-force instance too large: {n_classes}^{t_len} > {guard}")
    targets = _validate_targets(targets, n_classes, blank)
    rows = probs.tolist()
    total = 0.0
    collapsed: list[int] = []

    def recurse(t: int, last: int, p: float):
        nonlocal total
        if t == t_len:
            if collapsed == targets:
                total += p
            return
        row = rows[t]
        for s in range(n_classes):
            pushed = s != last and s != blank
            if pushed:
                collapsed.append(s)
            recurse(t + 1, s, p * row[s])
            if pushed:
                collapsed.pop()

    recurse(0, -1, 1.0)
    return total


def collapse_frames(frame_ids, blank: int = BLANK_ID) -> list[int]:
    """Collapse adjacent repeats, then delete blanks."""
    out: list[int] = []
    last = -1
    for s in frame_ids:
        s = int(s)
        if s != last and s != blank:
            out.append(s)
        last = s
    return out


def ctc_greedy_decode(log_probs, blank: int = BLANK_ID) -> list[int]:
    """Per-frame argmax, then collapse. Ties break toward the lower id."""
    lp = log_probs.values if isinstance(log_probs, tz.Tensor) else np.asarray(log_probs)
    return collapse_frames(lp.argmax(axis=1), blank)


def ctc_head(hidden, w, b, layer: int) -> CtcPosterior:
    """Shared linear head + log-softmax; the same (w, b) tensors are reused
    at every tap layer and at the final layer."""
    hv = hidden.values if isinstance(hidden, tz.Tensor) else np.asarray(hidden)
    wv = w.values if isinstance(w, tz.Tensor) else np.asarray(w)
    if hv.shape[1] != wv.shape[0]:
        raise ConfigError(f"ctc_head width mismatch: hidden {hv.shape[1]} vs head {wv.shape[0]}")
    return CtcPosterior(layer=layer, log_probs=tz.log_softmax_rows(tz.linear(hidden, w, b)))
