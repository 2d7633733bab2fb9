"""Metrics and the ablation-ladder harness.

Error rates are pooled over the corpus: total edit distance divided by
total reference length, with language-id tokens stripped from both sides
first so every variant is scored over identical reference material.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

from .ctc import Vocabulary
from .errors import ConfigError
from .model import canonical_json

# Published full-scale reference numbers for each ladder variant, attached
# to reports as context only; toy runs do not target them.
REFERENCE_RESULTS = {
    "B0": [("table1", "cv_per", 6.70), ("table1", "ml_cer", 16.08), ("table1", "ml_wer", 50.14)],
    "C1": [("table1", "cv_per", 6.39), ("table2", "cv_per", 6.38), ("table1", "ml_cer", 15.08), ("table1", "ml_wer", 47.81)],
    "C2": [("table1", "cv_per", 6.25), ("table3", "cv_per", 6.25), ("table1", "ml_cer", 15.22), ("table1", "ml_wer", 47.79)],
    "C3": [("table1", "cv_per", 6.12), ("table4", "cv_per", 6.12), ("table1", "ml_cer", 14.73), ("table1", "ml_wer", 46.92)],
    "C4": [("table1", "cv_per", 6.09), ("table1", "ml_cer", 14.05), ("table1", "ml_wer", 45.38)],
    "D2": [("table2", "cv_per", 6.68)],
    "D3": [("table2", "cv_per", 6.51)],
    "E1": [("table3", "cv_per", 6.44)],
    "E2": [("table3", "cv_per", 6.52)],
    "E3": [("table3", "cv_per", 6.26)],
    "F2": [("table4", "cv_per", 6.13)],
}

# Published full-scale fine-tuning settings, for context only.
REFERENCE_FINETUNE_SETTINGS = {
    "common_voice": {"peak_lr": 5e-5, "steps": 20000, "grad_accum": 4},
    "ml_superb": {"peak_lr": 3e-5, "steps": 80000, "grad_accum": 4},
}


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs (two-row DP)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def error_rate(refs, hyps, vocab: Vocabulary | None = None) -> float:
    """Pooled token error rate; strips language-id tokens from both sides
    when a vocabulary is given."""
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ConfigError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if vocab is not None:
        refs = [vocab.strip_lid(r) for r in refs]
        hyps = [vocab.strip_lid(h) for h in hyps]
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ConfigError("empty reference corpus")
    total_edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    return total_edits / total_ref


def error_rate_by_group(refs, hyps, groups, vocab: Vocabulary | None = None) -> dict:
    """Pooled rate within each group (e.g. language); the macro average over
    groups is available next to the pooled headline number."""
    refs, hyps, groups = list(refs), list(hyps), list(groups)
    if not len(refs) == len(hyps) == len(groups):
        raise ConfigError("refs/hyps/groups length mismatch")
    out = {}
    for group in sorted(set(groups)):
        idx = [i for i, g in enumerate(groups) if g == group]
        out[group] = error_rate([refs[i] for i in idx], [hyps[i] for i in idx], vocab)
    return out


def lid_accuracy(decoded, languages, vocab: Vocabulary) -> float:
    """Fraction of utterances whose first decoded token is the correct
    language-id token; a missing token scores as wrong."""
    decoded, languages = list(decoded), list(languages)
    if len(decoded) != len(languages):
        raise ConfigError("decoded/language count mismatch")
    if not decoded:
        return 0.0
    hits = 0
    for hyp, lang in zip(decoded, languages):
        if hyp and vocab.is_lid(hyp[0]) and hyp[0] == vocab.lid_token(lang):
            hits += 1
    return hits / len(decoded)


def evaluate_model(model, utterances) -> dict:
    """Greedy-decode a split; returns pooled PER (the headline), the
    per-language rates with their macro average, and LID accuracy when the
    model scores it."""
    vocab = model.cfg.vocab
    refs, hyps, langs = [], [], []
    for utt in utterances:
        refs.append([vocab.phoneme_token(p) for p in utt.transcript])
        hyps.append(model.decode(utt.features))
        langs.append(utt.lang)
    per = error_rate(refs, hyps, vocab)
    by_lang = error_rate_by_group(refs, hyps, langs, vocab)
    lid = lid_accuracy(hyps, langs, vocab) if model.cfg.lid_in_targets else None
    return {
        "per": per,
        "per_by_language": by_lang,
        "macro_per": sum(by_lang.values()) / len(by_lang),
        "lid_acc": lid,
    }


# ---------------------------------------------------------------------------
# ablation ladder


@dataclass
class ExperimentResult:
    variant: str
    seed: int
    config_hash: str
    dev_per: float
    test_per: float
    lid_acc: float | None
    wall_clock_sec: float = field(default=0.0, compare=False)


VARIANT_IDS = ("B0", "C1", "C2", "C3", "C4", "D2", "D3", "E1", "E2", "E3", "F2")
DEFAULT_LADDER = ("B0", "C1", "C2", "C3", "C4")


def apply_variant(model_cfg: dict, variant: str) -> dict:
    """Rewrite a baseline model-config dict into the given ladder variant.

    B0 is the plain encoder + CTC. C1 adds the language-summary frame, C2
    only trims the stack, C3 only adds posterior-query cross-attention
    taps, and C4 combines all three. D2 scores the language token without
    the frame, D3 extracts the frame at a low layer, E1/E2/E3 are the
    alternative surgeries, F2 is a single tap near the top.
    """
    cfg = json.loads(json.dumps(model_cfg))  # deep copy
    depth = int(cfg["stack"]["depth"])
    trim = max(1, round(depth * 3 / 24))  # final-layer count, scaled from depth 24
    lid_layer = max(1, round(depth * 8 / 24))  # extraction layer, scaled from layer 8 of 24
    full_taps = default_taps(depth)
    trimmed_taps = default_taps(depth - trim)
    cfg["stack"]["surgery"] = {"kind": "none", "n": 0}
    cfg["lid_extract_layer"] = None
    cfg["lid_in_targets"] = False
    cfg["cross_taps"] = []
    cfg["loss_weight"] = 0.0
    if variant == "B0":
        return cfg
    if variant == "C1":
        cfg["lid_extract_layer"] = lid_layer
        cfg["lid_in_targets"] = True
        return cfg
    if variant == "C2":
        cfg["stack"]["surgery"] = {"kind": "delete_last", "n": trim}
        return cfg
    if variant == "C3":
        cfg["cross_taps"] = full_taps
        cfg["loss_weight"] = 0.5
        return cfg
    if variant == "C4":
        cfg["stack"]["surgery"] = {"kind": "delete_last", "n": trim}
        cfg["lid_extract_layer"] = lid_layer
        cfg["lid_in_targets"] = True
        cfg["cross_taps"] = trimmed_taps
        cfg["loss_weight"] = 0.5
        return cfg
    if variant == "D2":
        cfg["lid_in_targets"] = True
        return cfg
    if variant == "D3":
        cfg["lid_extract_layer"] = max(1, round(depth * 3 / 24))  # low extraction layer
        cfg["lid_in_targets"] = True
        return cfg
    if variant == "F2":
        cfg["cross_taps"] = default_taps(depth)[-1:]  # single tap near the top
        cfg["loss_weight"] = 0.5
        return cfg
    if variant == "E1":
        cfg["stack"]["surgery"] = {"kind": "random_init_last", "n": trim}
        return cfg
    if variant == "E2":
        cfg["stack"]["surgery"] = {"kind": "replace_last_with_middle", "n": trim}
        return cfg
    if variant == "E3":
        cfg["stack"]["surgery"] = {"kind": "delete_last", "n": trim + 1}
        return cfg
    raise ConfigError(f"unknown ladder variant {variant!r}")


def default_taps(depth: int) -> list[int]:
    """Tap positions placed relative to the top of the (post-surgery)
    stack, every other layer: {depth-3, depth-1}. Taps that would fall on
    layer 1 or leave no layer above them are dropped."""
    taps = sorted({depth - 3, depth - 1})
    return [j for j in taps if 2 <= j <= depth - 1]


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(canonical_json(cfg_dict).encode("utf-8")).hexdigest()[:12]


def primary_reference(variant: str):
    refs = REFERENCE_RESULTS.get(variant)
    if not refs:
        return None, None
    table, _, value = refs[0]
    return value, table


def run_ablation(
    ladder,
    seeds,
    corpus_dir,
    out_dir,
    model_cfg: dict,
    train_cfg: dict,
    jobs: int = 1,
) -> list[ExperimentResult]:
    """Train and evaluate every (variant, seed) pair; failures are recorded
    per variant and do not stop the remaining runs.

    ``ladder`` entries are builtin variant ids or (id, model_cfg) pairs for
    custom variants.
    """
    from .trainer import run_single_experiment  # local import: trainer uses these metrics

    os.makedirs(out_dir, exist_ok=True)
    pairs = [(v, apply_variant(model_cfg, v)) if isinstance(v, str) else (v[0], v[1]) for v in ladder]
    tasks = []
    for variant, variant_cfg in pairs:
        for seed in seeds:
            run_dir = os.path.join(out_dir, variant, f"seed{seed}")
            tasks.append((variant, int(seed), variant_cfg, run_dir))

    results: list[ExperimentResult] = []
    failures: list[dict] = []

    def consume(task, outcome):
        variant, seed, variant_cfg, _ = task
        if isinstance(outcome, Exception):
            failures.append({"variant": variant, "seed": seed, "error": str(outcome)})
            return
        results.append(
            ExperimentResult(
                variant=variant,
                seed=seed,
                config_hash=config_hash(variant_cfg),
                dev_per=outcome["dev_per"],
                test_per=outcome["test_per"],
                lid_acc=outcome["lid_acc"],
                wall_clock_sec=outcome["wall_clock_sec"],
            )
        )

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(run_single_experiment, cfg, dict(train_cfg, seed=seed), corpus_dir, run_dir)
                for (_, seed, cfg, run_dir) in tasks
            ]
            for task, fut in zip(tasks, futures):
                try:
                    consume(task, fut.result())
                except Exception as err:  # noqa: BLE001 - per-variant isolation
                    consume(task, err)
    else:
        for task in tasks:
            variant, seed, cfg, run_dir = task
            try:
                consume(task, run_single_experiment(cfg, dict(train_cfg, seed=seed), corpus_dir, run_dir))
            except Exception as err:  # noqa: BLE001 - per-variant isolation
                consume(task, err)

    variant_ids = [vid for vid, _ in pairs]
    order = {v: i for i, v in enumerate(variant_ids)}
    results.sort(key=lambda r: (order[r.variant], r.seed))
    write_ablation_report(results, failures, variant_ids, out_dir)
    return results


def write_ablation_report(results, failures, ladder, out_dir):
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "dev_per", "test_per", "lid_acc", "paper_ref_value", "paper_ref_table"])
        for r in results:
            ref_value, ref_table = primary_reference(r.variant)
            writer.writerow(
                [
                    r.variant,
                    r.seed,
                    f"{r.dev_per:.6f}",
                    f"{r.test_per:.6f}",
                    "" if r.lid_acc is None else f"{r.lid_acc:.6f}",
                    "" if ref_value is None else ref_value,
                    "" if ref_table is None else ref_table,
                ]
            )

    summary: dict = {"ladder": list(ladder), "variants": {}, "failures": failures}
    baseline_mean = None
    for variant in ladder:
        rows = [r for r in results if r.variant == variant]
        if not rows:
            continue
        pers = [r.test_per for r in rows]
        mean = sum(pers) / len(pers)
        sd = math.sqrt(sum((p - mean) ** 2 for p in pers) / len(pers)) if len(pers) > 1 else 0.0
        if variant == ladder[0]:
            baseline_mean = mean
        entry = {
            "seeds": [r.seed for r in rows],
            "config_hash": rows[0].config_hash,
            "dev_per": [r.dev_per for r in rows],
            "test_per": pers,
            "test_per_mean": mean,
            "test_per_sd": sd,
            "lid_acc": [r.lid_acc for r in rows],
            "reference": [
                {"table": t, "metric": m, "value": v} for t, m, v in REFERENCE_RESULTS.get(variant, [])
            ],
        }
        if baseline_mean and baseline_mean > 0:
            # toy-scale relative change vs the ladder's first row, context only
            entry["relative_change_vs_baseline"] = (baseline_mean - mean) / baseline_mean
        summary["variants"][variant] = entry
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
