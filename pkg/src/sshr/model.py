"""Full model assembly: input projection, language-summary frame splice,
posterior-query cross-attention taps, shared CTC head, combined loss, and
the versioned checkpoint format.

Layer indices in configs are 1-based. The language-summary frame is the
mean over time of layer i's output, prepended to the frame sequence, so
every layer after i (and the final posterior) works on length T+1.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .ctc import CtcPosterior, Vocabulary, ctc_head, ctc_loss
from .encoder import EncoderStack, StackConfig, cross_attention_layer, self_attention_layer
from .errors import ConfigError, SshrError

CHECKPOINT_MAGIC = b"SSHR1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class SshrConfig:
    """Everything needed to rebuild a model bit-for-bit."""

    stack: StackConfig
    feature_dim: int
    vocab: Vocabulary
    lid_extract_layer: int | None = None
    lid_in_targets: bool = False
    cross_taps: tuple[int, ...] = ()
    loss_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigError(f"loss weight {self.loss_weight} outside [0, 1]")
        taps = tuple(int(j) for j in self.cross_taps)
        if list(taps) != sorted(set(taps)):
            raise ConfigError("cross_taps must be strictly increasing")
        object.__setattr__(self, "cross_taps", taps)
        if not taps and self.loss_weight != 0.0:
            raise ConfigError("loss weight must be 0 when there are no cross taps")
        depth = self.stack.surviving_depth
        if self.lid_extract_layer is not None:
            if not 1 <= self.lid_extract_layer < depth:
                raise ConfigError(
                    f"lid_extract_layer {self.lid_extract_layer} outside [1, {depth - 1}]"
                )
            if not self.lid_in_targets:
                raise ConfigError("lid_extract_layer requires lid_in_targets")

    def to_dict(self) -> dict:
        return {
            "stack": self.stack.to_dict(),
            "feature_dim": self.feature_dim,
            "vocab": self.vocab.to_dict(),
            "lid_extract_layer": self.lid_extract_layer,
            "lid_in_targets": self.lid_in_targets,
            "cross_taps": list(self.cross_taps),
            "loss_weight": self.loss_weight,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SshrConfig":
        known = {
            "stack", "feature_dim", "vocab", "lid_extract_layer",
            "lid_in_targets", "cross_taps", "loss_weight", "seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(
            stack=StackConfig.from_dict(d["stack"]),
            feature_dim=int(d["feature_dim"]),
            vocab=Vocabulary.from_dict(d["vocab"]),
            lid_extract_layer=None if d.get("lid_extract_layer") is None else int(d["lid_extract_layer"]),
            lid_in_targets=bool(d.get("lid_in_targets", False)),
            cross_taps=tuple(d.get("cross_taps", ())),
            loss_weight=float(d.get("loss_weight", 0.0)),
            seed=int(d.get("seed", 0)),
        )


def default_model_config(vocab: Vocabulary, feature_dim: int, seed: int = 0) -> dict:
    """Baseline (B0) configuration at desk scale: 8 layers of width 64."""
    return {
        "stack": {
            "depth": 8,
            "hidden": 64,
            "heads": 4,
            "ffn": 256,
            "surgery": {"kind": "none", "n": 0},
        },
        "feature_dim": feature_dim,
        "vocab": vocab.to_dict(),
        "lid_extract_layer": None,
        "lid_in_targets": False,
        "cross_taps": [],
        "loss_weight": 0.0,
        "seed": seed,
    }


@dataclass
class ForwardOutput:
    final: CtcPosterior
    intermediates: list[CtcPosterior]
    seq_len: int
    activations: list[np.ndarray] | None = None


def extract_and_splice_lid_frame(x: tz.Tensor) -> tz.Tensor:
    """Prepend the mean-over-time row, turning T x H into (T+1) x H."""
    return tz.prepend_row(tz.mean_over_time(x), x)


def make_targets(transcript, language, cfg: SshrConfig) -> list[int]:
    """Vocabulary token ids for an utterance: phoneme tokens, with the
    language-id token prepended when the config scores it."""
    if not len(transcript):
        raise ConfigError("transcript must be nonempty")
    tokens = [cfg.vocab.phoneme_token(int(p)) for p in transcript]
    if cfg.lid_in_targets:
        return [cfg.vocab.lid_token(language)] + tokens
    return tokens


def total_loss(final: CtcPosterior, intermediates, targets, w: float, tap_targets=None) -> tz.Tensor:
    """Combined objective: (1-w) * final CTC + w * mean of tap CTC losses.

    ``tap_targets`` may supply one target sequence per tap (defaults to
    ``targets`` for every tap). With no taps, w must be 0 and the final
    loss is returned untouched.
    """
    intermediates = list(intermediates)
    k = len(intermediates)
    if k == 0 and w != 0.0:
        raise ConfigError("loss weight must be 0 when there are no intermediate posteriors")
    final_loss = ctc_loss(final.log_probs, targets).loss
    if k == 0 or w == 0.0:
        return final_loss
    if tap_targets is None:
        tap_targets = [targets] * k
    if len(tap_targets) != k:
        raise ConfigError(f"expected {k} tap target sequences, got {len(tap_targets)}")
    tap_sum = None
    for posterior, tt in zip(intermediates, tap_targets):
        term = ctc_loss(posterior.log_probs, tt).loss
        tap_sum = term if tap_sum is None else tz.add(tap_sum, term)
    tap_mean = tz.scale(tap_sum, 1.0 / k)
    if w == 1.0:
        return tap_mean
    return tz.add(tz.scale(final_loss, 1.0 - w), tz.scale(tap_mean, w))


class SshrModel:
    """Encoder stack + shared CTC head behind a single forward interface."""

    def __init__(self, cfg: SshrConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        vocab_size = cfg.vocab.size
        self.stack = EncoderStack(cfg.stack, cfg.cross_taps, vocab_size, cfg.seed, dtype)
        depth = self.stack.depth
        if cfg.lid_extract_layer is not None and cfg.lid_extract_layer >= depth:
            raise ConfigError("lid_extract_layer outside the post-surgery stack")
        from .encoder import _init_weight  # same init streams as the stack

        h = cfg.stack.hidden
        self.params: "OrderedDict[str, tz.Tensor]" = OrderedDict()
        self.w_in = tz.param(_init_weight(cfg.seed, "input.w", cfg.feature_dim, h, dtype), "input.w")
        self.b_in = tz.param(np.zeros(h, dtype=dtype), "input.b")
        self.params["input.w"] = self.w_in
        self.params["input.b"] = self.b_in
        for name, t in self.stack.named_params():
            self.params[name] = t
        # shared normalization in front of the shared head, so tap and
        # final posteriors see the same input scale (pre-norm stacks leave
        # the residual stream unnormalized)
        self.head_norm_gain = tz.param(np.ones(h, dtype=dtype), "head_norm.gain")
        self.head_norm_bias = tz.param(np.zeros(h, dtype=dtype), "head_norm.bias")
        self.params["head_norm.gain"] = self.head_norm_gain
        self.params["head_norm.bias"] = self.head_norm_bias
        self.w_head = tz.param(_init_weight(cfg.seed, "head.w", h, vocab_size, dtype), "head.w")
        self.b_head = tz.param(np.zeros(vocab_size, dtype=dtype), "head.b")
        self.params["head.w"] = self.w_head
        self.params["head.b"] = self.b_head
        self._pos_cache: dict[int, np.ndarray] = {}

    def _head(self, x: tz.Tensor, layer: int) -> CtcPosterior:
        normed = tz.layer_norm(x, self.head_norm_gain, self.head_norm_bias)
        return ctc_head(normed, self.w_head, self.b_head, layer=layer)

    @property
    def depth(self) -> int:
        return self.stack.depth

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def _positions(self, length: int) -> np.ndarray:
        table = self._pos_cache.get(length)
        if table is None:
            table = tz.sinusoidal_positions(length, self.cfg.stack.hidden, self.dtype)
            self._pos_cache[length] = table
        return table

    def forward(self, features: np.ndarray, retain_activations: bool = False) -> ForwardOutput:
        """Run one utterance; returns posteriors at the final layer and at
        every tap, plus per-layer activations when asked.

        Retained activations are the outputs each stage hands onward: index
        0 is the projected-and-positioned input, index d is layer d's
        output (taken before the splice when d is the extraction layer).
        """
        feats = np.asarray(features, dtype=self.dtype)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.feature_dim:
            raise ConfigError(
                f"features must be T x {self.cfg.feature_dim}, got {feats.shape}"
            )
        t_len = feats.shape[0]
        if t_len < 1:
            raise ConfigError("empty utterance")
        x = tz.linear(tz.Tensor(feats), self.w_in, self.b_in)
        x = tz.add(x, tz.Tensor(self._positions(t_len)))
        acts = [x.values] if retain_activations else None
        lid_layer = self.cfg.lid_extract_layer
        taps = set(self.cfg.cross_taps)
        posteriors: dict[int, CtcPosterior] = {}
        intermediates: list[CtcPosterior] = []
        heads = self.cfg.stack.heads
        for pos, (spec, lp) in enumerate(zip(self.stack.specs, self.stack.layers), start=1):
            try:
                if spec.kind == "cross_attention":
                    tap = posteriors[spec.source]
                    x = cross_attention_layer(tz.exp(tap.log_probs), x, lp, heads)
                else:
                    x = self_attention_layer(x, lp, heads)
                if acts is not None:
                    acts.append(x.values)
                if lid_layer == pos:
                    x = extract_and_splice_lid_frame(x)
                if pos in taps:
                    posterior = self._head(x, layer=pos)
                    posteriors[pos] = posterior
                    intermediates.append(posterior)
            except SshrError as err:
                raise type(err)(f"layer {pos}: {err}") from err
        final = self._head(x, layer=self.depth)
        return ForwardOutput(
            final=final,
            intermediates=intermediates,
            seq_len=x.values.shape[0],
            activations=acts,
        )

    def targets_for(self, transcript, language) -> list[int]:
        return make_targets(transcript, language, self.cfg)

    def tap_targets_for(self, transcript, language) -> list[list[int]]:
        """Per-tap targets: language-prefixed once the tap sees the spliced
        sequence, plain phoneme targets before the splice."""
        lid_layer = self.cfg.lid_extract_layer
        plain = [self.cfg.vocab.phoneme_token(int(p)) for p in transcript]
        out = []
        for j in self.cfg.cross_taps:
            spliced = lid_layer is not None and j >= lid_layer
            if spliced and self.cfg.lid_in_targets:
                out.append([self.cfg.vocab.lid_token(language)] + plain)
            else:
                out.append(plain)
        return out

    def utterance_loss(self, features, transcript, language) -> tz.Tensor:
        out = self.forward(features)
        targets = self.targets_for(transcript, language)
        tap_targets = self.tap_targets_for(transcript, language)
        return total_loss(out.final, out.intermediates, targets, self.cfg.loss_weight, tap_targets)

    def decode(self, features) -> list[int]:
        from .ctc import ctc_greedy_decode

        with tz.no_grad():
            out = self.forward(features)
        return ctc_greedy_decode(out.final.log_probs)

    # -- checkpoint format ---------------------------------------------
    # magic "SSHR1", u32 LE config-JSON length, canonical config JSON,
    # u32 LE blob count, then per parameter (declaration order):
    #   u16 LE name length, name utf-8, u8 rank, u32 LE extents,
    #   float32 LE row-major data.

    def save_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        cfg_bytes = canonical_json(self.cfg.to_dict()).encode("utf-8")
        buf.write(struct.pack("<I", len(cfg_bytes)))
        buf.write(cfg_bytes)
        buf.write(struct.pack("<I", len(self.params)))
        for name, t in self.params.items():
            name_bytes = name.encode("utf-8")
            buf.write(struct.pack("<H", len(name_bytes)))
            buf.write(name_bytes)
            arr = np.ascontiguousarray(t.values, dtype="<f4")
            buf.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                buf.write(struct.pack("<I", extent))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.save_bytes())

    @classmethod
    def load_bytes(cls, raw: bytes) -> "SshrModel":
        view = io.BytesIO(raw)
        if view.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ConfigError("not a model checkpoint (bad magic)")
        (cfg_len,) = struct.unpack("<I", view.read(4))
        cfg = SshrConfig.from_dict(json.loads(view.read(cfg_len).decode("utf-8")))
        model = cls(cfg)
        (count,) = struct.unpack("<I", view.read(4))
        if count != len(model.params):
            raise ConfigError(f"checkpoint has {count} blobs, model expects {len(model.params)}")
        for name, t in model.params.items():
            (name_len,) = struct.unpack("<H", view.read(2))
            stored = view.read(name_len).decode("utf-8")
            if stored != name:
                raise ConfigError(f"checkpoint blob {stored!r} does not match parameter {name!r}")
            (rank,) = struct.unpack("<B", view.read(1))
            shape = tuple(struct.unpack("<I", view.read(4))[0] for _ in range(rank))
            if shape != t.values.shape:
                raise ConfigError(f"blob {name!r} shape {shape} != expected {t.values.shape}")
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 4
            data = np.frombuffer(view.read(n_bytes), dtype="<f4").reshape(shape)
            t.values = data.astype(np.float32)
        return model

    @classmethod
    def load(cls, path) -> "SshrModel":
        with open(path, "rb") as fh:
            return cls.load_bytes(fh.read())
