"""Deterministic fine-tuning loop: Adam, gradient accumulation, eval-time
metrics, and checkpointing.

Every source of randomness flows from the training seed, so two runs with
identical configs produce byte-identical checkpoints and metric logs.
Utterances whose frame count cannot emit their targets are skipped and
counted, never fatal.
"""

from __future__ import annotations

import json
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tz
from .datagen import load_split
from .errors import ConfigError, CtcInfeasibleError
from .evalkit import evaluate_model
from .model import SshrConfig, SshrModel


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    warmup_steps: int = 100
    grad_accum: int = 1
    batch_size: int = 8
    seed: int = 1
    checkpoint_interval: int = 1000
    eval_interval: int = 250

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        for name in ("lr", "warmup_steps", "batch_size", "checkpoint_interval", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train config {name} must be positive")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: "OrderedDict[str, tz.Tensor]"):
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}


def adam_step(
    params: "OrderedDict[str, tz.Tensor]",
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update; missing grads count as zero."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        elif g.shape != p.values.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter {name} shape {p.values.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.values = p.values - lr * update
    return state


def _batch_stream(utterances, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(utterances))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield [utterances[i] for i in order[start : start + batch_size]]


def train(model_cfg, train_cfg, corpus_dir, out_dir) -> dict:
    """Run fine-tuning; writes checkpoints and metrics.jsonl into out_dir.

    Returns a summary with the final checkpoint path, last dev metrics, and
    the count of skipped infeasible utterances.
    """
    cfg = model_cfg if isinstance(model_cfg, SshrConfig) else SshrConfig.from_dict(model_cfg)
    tcfg = train_cfg if isinstance(train_cfg, TrainConfig) else TrainConfig.from_dict(train_cfg)
    os.makedirs(out_dir, exist_ok=True)
    train_utts = load_split(corpus_dir, "train")
    dev_utts = load_split(corpus_dir, "dev")
    model = SshrModel(cfg)
    state = AdamState(model.params)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed & 0xFFFFFFFF, 0xA1]))
    batches = _batch_stream(train_utts, min(tcfg.batch_size, len(train_utts)), rng)
    accum_seed = 1.0 / tcfg.grad_accum

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    skipped = 0
    losses_since_eval: list[float] = []
    last_eval: dict = {}
    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        for step in range(1, tcfg.steps + 1):
            lr_t = tcfg.lr * min(1.0, step / tcfg.warmup_steps)
            model.zero_grads()
            step_losses = []
            for _ in range(tcfg.grad_accum):
                batch = next(batches)
                terms = []
                for utt in batch:
                    try:
                        terms.append(model.utterance_loss(utt.features, utt.transcript, utt.lang))
                    except CtcInfeasibleError:
                        skipped += 1
                if not terms:
                    continue
                micro = terms[0]
                for term in terms[1:]:
                    micro = tz.add(micro, term)
                micro = tz.scale(micro, 1.0 / len(terms))
                tz.backward(micro, seed=np.asarray(accum_seed, dtype=micro.values.dtype))
                step_losses.append(micro.item())
            if step_losses:
                losses_since_eval.append(sum(step_losses) / len(step_losses))
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, state, lr_t)
            if step % tcfg.eval_interval == 0 or step == tcfg.steps:
                dev = evaluate_model(model, dev_utts)
                mean_loss = sum(losses_since_eval) / max(1, len(losses_since_eval))
                losses_since_eval = []
                last_eval = {
                    "step": step,
                    "loss": round(mean_loss, 6),
                    "dev_per": round(dev["per"], 6),
                    "dev_lid_acc": None if dev["lid_acc"] is None else round(dev["lid_acc"], 6),
                }
                metrics_fh.write(json.dumps(last_eval, sort_keys=True))
                metrics_fh.write("\n")
            if tcfg.checkpoint_interval and step % tcfg.checkpoint_interval == 0:
                model.save(os.path.join(out_dir, f"ckpt_{step:06d}.sshr"))
    final_path = os.path.join(out_dir, "final.sshr")
    model.save(final_path)
    return {
        "checkpoint": final_path,
        "metrics": metrics_path,
        "skipped_utterances": skipped,
        "last_eval": last_eval,
        "steps": tcfg.steps,
    }


def run_single_experiment(model_cfg: dict, train_cfg: dict, corpus_dir, run_dir) -> dict:
    """Train one configuration, then score dev and test; the unit of work
    the ablation ladder fans out."""
    started = time.perf_counter()
    summary = train(model_cfg, train_cfg, corpus_dir, run_dir)
    model = SshrModel.load(summary["checkpoint"])
    dev = evaluate_model(model, load_split(corpus_dir, "dev"))
    test = evaluate_model(model, load_split(corpus_dir, "test"))
    result = {
        "dev_per": dev["per"],
        "test_per": test["per"],
        "lid_acc": test["lid_acc"],
        "skipped_utterances": summary["skipped_utterances"],
        "wall_clock_sec": time.perf_counter() - started,
    }
    with open(os.path.join(run_dir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in result.items() if k != "wall_clock_sec"}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return result
