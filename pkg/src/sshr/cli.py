"""Single executable for the whole workflow.

Subcommands: ``datagen``, ``train``, ``eval``, ``probe``, ``ablate``,
``gradcheck``. Exit codes: 0 success, 1 validation error, 2 runtime
failure. All randomness flows from ``--seed``; every run writes one
``run_manifest.json`` (the only output allowed to differ between identical
runs, via its timestamps). ``SSHR_LOG`` picks the log level.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys

from . import __version__
from .ctc import Vocabulary
from .datagen import default_corpus_spec, generate_corpus, load_corpus_spec, load_split
from .errors import ConfigError, CorruptDataError, SshrError
from .evalkit import DEFAULT_LADDER, apply_variant, evaluate_model, run_ablation
from .gradcheck import gradcheck_suite
from .model import SshrModel, default_model_config
from .probe import lid_probe, kmeans, mutual_information, probe_all_layers, write_report, collect_layer_data, ProbeReport
from .trainer import TrainConfig, train

log = logging.getLogger("sshr")


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad flags, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p, out_default=None):
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness in this run")
    if out_default is None:
        p.add_argument("--out", required=True, help="run directory for every output")
    else:
        p.add_argument("--out", default=out_default, help="run directory for every output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sshr", description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"sshr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate the synthetic corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--config", default=None, help="JSON file of corpus knobs (strict keys)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="fine-tune a model on a generated corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--config", required=True, help="JSON file with model/train/data sections")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--config", required=True, help="JSON file: checkpoint/corpus_dir/split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="layer-wise LID-accuracy and cluster/phoneme MI curves",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--config", required=True, help="JSON file: checkpoint/corpus_dir/split")
    p.add_argument("--k", type=int, default=0, help="k-means clusters (0 = 4 x phoneme inventory)")
    p.add_argument("--layer", type=int, default=None, help="probe a single layer instead of all")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="train and score a ladder of model variants",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--config", required=True, help="JSON file with model/train/data sections")
    p.add_argument("--ladder", default="default", help="ladder name or JSON file of variants")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per variant (seed, seed+1, ...)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of every gradient rule",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, out_default="sshr_gradcheck")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None


def _strict_merge(base: dict, override: dict, context: str) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {context}.{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _strict_merge(base[key], value, f"{context}.{key}")
        else:
            merged[key] = value
    return merged


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class _Run:
    """Collects the manifest for one CLI invocation."""

    def __init__(self, command: str, seed: int, out_dir: str):
        self.command = command
        self.seed = seed
        self.out_dir = out_dir
        self.started = _utc_now()
        self.outputs: list[str] = []
        self.resolved_config: dict = {}
        os.makedirs(out_dir, exist_ok=True)

    def record(self, path) -> str:
        self.outputs.append(os.path.relpath(path, self.out_dir))
        return path

    def finish(self):
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "version": __version__,
            "resolved_config": self.resolved_config,
            "started_at": self.started,
            "finished_at": _utc_now(),
            "outputs": sorted(self.outputs),
        }
        with open(os.path.join(self.out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")


def _resolve_corpus_config(raw: dict | None, seed: int) -> dict:
    defaults = {
        "n_languages": 4,
        "phonemes_per_language": 10,
        "shared_phonemes": 4,
        "feature_dim": 16,
        "noise_sigma": 0.3,
        "counts": {"train": 200, "dev": 40, "test": 40},
        "min_phonemes": 10,
        "max_phonemes": 16,
        "min_frames_per_phoneme": 3,
        "max_frames_per_phoneme": 5,
    }
    resolved = _strict_merge(defaults, raw or {}, "corpus")
    resolved["seed"] = seed
    return resolved


def cmd_datagen(args) -> int:
    run = _Run("datagen", args.seed, args.out)
    raw = _load_json(args.config) if args.config else None
    resolved = _resolve_corpus_config(raw, args.seed)
    run.resolved_config = resolved
    spec_kwargs = dict(resolved)
    spec = default_corpus_spec(
        seed=spec_kwargs.pop("seed"),
        counts=spec_kwargs.pop("counts"),
        **spec_kwargs,
    )
    summary = generate_corpus(spec, args.out)
    for split in summary["splits"]:
        run.record(os.path.join(args.out, f"manifest.{split}.jsonl"))
        run.record(os.path.join(args.out, f"{split}.feats"))
        run.record(os.path.join(args.out, f"{split}.align"))
    run.record(os.path.join(args.out, "corpus.json"))
    run.finish()
    log.info("datagen: wrote %s", summary["splits"])
    return 0


def _resolve_train_sections(raw: dict, seed: int):
    known = {"model", "train", "data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    data = raw.get("data", {})
    if set(data) - {"corpus_dir"}:
        raise ConfigError(f"unknown key data.{sorted(set(data) - {'corpus_dir'})[0]}")
    corpus_dir = data.get("corpus_dir")
    if not corpus_dir:
        raise ConfigError("config data.corpus_dir is required")
    spec = load_corpus_spec(corpus_dir)
    vocab = Vocabulary(phonemes=spec.phoneme_symbols, languages=spec.language_names)
    base_model = default_model_config(vocab, spec.feature_dim, seed)
    model_section = dict(raw.get("model", {}))
    if "seed" in model_section:
        raise ConfigError("model.seed is set by --seed")
    if "vocab" in model_section or "feature_dim" in model_section:
        raise ConfigError("model vocab/feature_dim come from the corpus")
    variant = model_section.pop("variant", None)
    model_cfg = _strict_merge(base_model, model_section, "model")
    if variant is not None:
        model_cfg = apply_variant(model_cfg, variant)
    train_section = dict(raw.get("train", {}))
    if "seed" in train_section:
        raise ConfigError("train.seed is set by --seed")
    train_cfg = TrainConfig.from_dict({**train_section, "seed": seed}).to_dict()
    return model_cfg, train_cfg, corpus_dir


def cmd_train(args) -> int:
    run = _Run("train", args.seed, args.out)
    raw = _load_json(args.config)
    model_cfg, train_cfg, corpus_dir = _resolve_train_sections(raw, args.seed)
    run.resolved_config = {"model": model_cfg, "train": train_cfg, "data": {"corpus_dir": corpus_dir}}
    summary = train(model_cfg, train_cfg, corpus_dir, args.out)
    run.record(summary["checkpoint"])
    run.record(summary["metrics"])
    run.finish()
    log.info("train: final checkpoint %s, last eval %s", summary["checkpoint"], summary["last_eval"])
    return 0


def _load_eval_config(path):
    raw = _load_json(path)
    known = {"checkpoint", "corpus_dir", "split"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    for key in ("checkpoint", "corpus_dir"):
        if key not in raw:
            raise ConfigError(f"eval config requires {key}")
    return raw["checkpoint"], raw["corpus_dir"], raw.get("split", "test")


def cmd_eval(args) -> int:
    run = _Run("eval", args.seed, args.out)
    checkpoint, corpus_dir, split = _load_eval_config(args.config)
    run.resolved_config = {"checkpoint": checkpoint, "corpus_dir": corpus_dir, "split": split}
    model = SshrModel.load(checkpoint)
    utts = load_split(corpus_dir, split)
    scores = evaluate_model(model, utts)
    payload = {"split": split, "n_utterances": len(utts), **scores}
    out_path = os.path.join(args.out, "eval.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    run.record(out_path)
    run.finish()
    log.info("eval: %s", payload)
    return 0


def cmd_probe(args) -> int:
    run = _Run("probe", args.seed, args.out)
    checkpoint, corpus_dir, split = _load_eval_config(args.config)
    model = SshrModel.load(checkpoint)
    utts = load_split(corpus_dir, split)
    k = args.k if args.k > 0 else 4 * len(model.cfg.vocab.phonemes)
    run.resolved_config = {
        "checkpoint": checkpoint, "corpus_dir": corpus_dir, "split": split,
        "k": k, "layer": args.layer,
    }
    if args.layer is None:
        report = probe_all_layers(model, utts, k=k, seed=args.seed,
                                  checkpoint_id=checkpoint, probe_set_id=split)
    else:
        pooled, frames, lang_labels, frame_labels = collect_layer_data(model, utts)
        if not 0 <= args.layer <= model.depth:
            raise ConfigError(f"--layer {args.layer} outside [0, {model.depth}]")
        d = args.layer
        acc = lid_probe(pooled[d], lang_labels, split_seed=args.seed)
        km = kmeans(frames[d], k, seed=args.seed + d)
        mi = mutual_information(km.assignments, frame_labels)
        report = ProbeReport(
            rows=[{"layer": d, "lid_acc": acc, "mi_nats": mi}],
            metadata={"checkpoint": checkpoint, "probe_set": split, "k": k, "seed": args.seed,
                      "n_utterances": len(utts)},
        )
    json_path, csv_path = write_report(report, args.out)
    run.record(json_path)
    run.record(csv_path)
    run.finish()
    log.info("probe: wrote %s", csv_path)
    return 0


def _load_ladder(name_or_path):
    if name_or_path == "default":
        return list(DEFAULT_LADDER)
    raw = _load_json(name_or_path)
    if not isinstance(raw, list) or not raw:
        raise ConfigError("ladder file must be a nonempty JSON list")
    ladder = []
    for item in raw:
        if isinstance(item, str):
            ladder.append(item)
        elif isinstance(item, dict):
            unknown = set(item) - {"id", "variant", "model"}
            if unknown:
                raise ConfigError(f"unknown ladder entry keys: {sorted(unknown)}")
            if "id" not in item:
                raise ConfigError("ladder entries need an 'id'")
            ladder.append(item)
        else:
            raise ConfigError("ladder entries must be strings or objects")
    return ladder


def cmd_ablate(args) -> int:
    run = _Run("ablate", args.seed, args.out)
    raw = _load_json(args.config)
    model_cfg, train_cfg, corpus_dir = _resolve_train_sections(raw, args.seed)
    ladder_spec = _load_ladder(args.ladder)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = [args.seed + i for i in range(args.seeds)]
    ladder = []
    for item in ladder_spec:
        if isinstance(item, str):
            ladder.append((item, apply_variant(model_cfg, item)))
        else:
            cfg = apply_variant(model_cfg, item["variant"]) if item.get("variant") else dict(model_cfg)
            cfg = _strict_merge(cfg, item.get("model", {}), f"ladder.{item['id']}.model")
            ladder.append((item["id"], cfg))
    run.resolved_config = {
        "ladder": [{"id": vid, "model": cfg} for vid, cfg in ladder],
        "train": train_cfg,
        "data": {"corpus_dir": corpus_dir},
        "seeds": seeds,
        "jobs": args.jobs,
    }
    results = run_ablation(ladder, seeds, corpus_dir, args.out, model_cfg, train_cfg, jobs=args.jobs)
    run.record(os.path.join(args.out, "ablation.csv"))
    run.record(os.path.join(args.out, "summary.json"))
    run.finish()
    log.info("ablate: %d runs finished", len(results))
    return 0


def cmd_gradcheck(args) -> int:
    run = _Run("gradcheck", args.seed, args.out)
    report = gradcheck_suite(seed=args.seed)
    run.resolved_config = {"seed": args.seed}
    out_path = os.path.join(args.out, "gradcheck.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    run.record(out_path)
    run.finish()
    for name, entry in sorted(report["checks"].items()):
        log.info("gradcheck %-24s rel_err=%.3g %s", name, entry["max_rel_err"],
                 "ok" if entry["passed"] else "FAIL")
    if not report["all_passed"]:
        log.error("gradcheck: worst relative error %.3g exceeds %.1g", report["worst_rel_err"], report["tolerance"])
        return 2
    log.info("gradcheck: all checks passed (worst %.3g)", report["worst_rel_err"])
    return 0


def main(argv=None) -> int:
    level = os.environ.get("SSHR_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print(f"sshr: invalid SSHR_LOG={level!r} (use error, info, debug)", file=sys.stderr)
        return 1
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if getattr(args, "seed", 0) < 0:
            raise ConfigError("--seed must be a non-negative integer")
        return args.func(args)
    except (ConfigError, CorruptDataError) as err:
        print(f"sshr {args.command}: {err}", file=sys.stderr)
        return 1
    except SshrError as err:
        print(f"sshr {args.command}: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"sshr {args.command}: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
