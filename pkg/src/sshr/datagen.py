"""Deterministic synthetic multilingual corpus.

Each language owns a phoneme inventory (with some phonemes shared across
languages), a prototype vector per phoneme, and a language-specific affine
transform (rotation + bias). An utterance is a phoneme sequence rendered as
``transform(prototype) + N(0, sigma^2)`` per frame, together with the
ground-truth per-frame alignment.

On-disk layout per corpus directory:

* ``corpus.json`` - generator spec, prototypes and transforms included.
* ``manifest.<split>.jsonl`` - one object per utterance with keys
  id/lang/n_frames/transcript/feat_file/offset_bytes.
* ``<split>.feats`` - raw little-endian float32, row-major T x F per
  utterance, concatenated; CRC32 footer (4 bytes LE) over the payload.
* ``<split>.align`` - parallel little-endian uint16 phoneme ids per frame.

Generation draws one PRNG stream per utterance from (seed, language,
split, index), so parallel generation cannot change the output.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptDataError

SPLITS = ("train", "dev", "test")
MAX_TRANSFORM_CONDITION = 1e6


@dataclass(frozen=True)
class LanguageSpec:
    """One language: inventory, prototypes, affine transform, durations."""

    name: str
    phoneme_ids: tuple[int, ...]
    prototypes: np.ndarray  # |inventory| x F, rows follow phoneme_ids
    rotation: np.ndarray  # F x F
    bias: np.ndarray  # F
    min_phonemes: int
    max_phonemes: int
    min_frames_per_phoneme: int
    max_frames_per_phoneme: int

    def __post_init__(self):
        if not self.phoneme_ids:
            raise ConfigError(f"language {self.name!r} has an empty inventory")
        if self.prototypes.shape[0] != len(self.phoneme_ids):
            raise ConfigError(f"language {self.name!r}: prototype rows != inventory size")
        if not (1 <= self.min_phonemes <= self.max_phonemes):
            raise ConfigError(f"language {self.name!r}: bad utterance length bounds")
        if not (1 <= self.min_frames_per_phoneme <= self.max_frames_per_phoneme):
            raise ConfigError(f"language {self.name!r}: bad duration bounds")
        cond = np.linalg.cond(self.rotation)
        if not np.isfinite(cond) or cond > MAX_TRANSFORM_CONDITION:
            raise ConfigError(f"language {self.name!r}: transform condition {cond:.3g} too large")

    def realized_prototypes(self) -> np.ndarray:
        """Prototypes pushed through this language's affine transform."""
        return self.prototypes @ self.rotation.T + self.bias


@dataclass(frozen=True)
class CorpusSpec:
    feature_dim: int
    phoneme_symbols: tuple[str, ...]
    languages: tuple[LanguageSpec, ...]
    noise_sigma: float
    counts: dict = field(default_factory=dict)  # split -> utterances per language
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        for split, count in self.counts.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
            if count < 1:
                raise ConfigError(f"split {split!r} needs at least one utterance per language")
        for lang in self.languages:
            for pid in lang.phoneme_ids:
                if not 0 <= pid < len(self.phoneme_symbols):
                    raise ConfigError(f"language {lang.name!r}: phoneme id {pid} out of range")

    @property
    def language_names(self) -> tuple[str, ...]:
        return tuple(lang.name for lang in self.languages)

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "phoneme_symbols": list(self.phoneme_symbols),
            "noise_sigma": self.noise_sigma,
            "counts": dict(self.counts),
            "seed": self.seed,
            "languages": [
                {
                    "name": lang.name,
                    "phoneme_ids": list(lang.phoneme_ids),
                    "prototypes": lang.prototypes.tolist(),
                    "rotation": lang.rotation.tolist(),
                    "bias": lang.bias.tolist(),
                    "min_phonemes": lang.min_phonemes,
                    "max_phonemes": lang.max_phonemes,
                    "min_frames_per_phoneme": lang.min_frames_per_phoneme,
                    "max_frames_per_phoneme": lang.max_frames_per_phoneme,
                }
                for lang in self.languages
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {"feature_dim", "phoneme_symbols", "noise_sigma", "counts", "seed", "languages"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
        langs = []
        for entry in d["languages"]:
            langs.append(
                LanguageSpec(
                    name=entry["name"],
                    phoneme_ids=tuple(entry["phoneme_ids"]),
                    prototypes=np.asarray(entry["prototypes"], dtype=np.float64),
                    rotation=np.asarray(entry["rotation"], dtype=np.float64),
                    bias=np.asarray(entry["bias"], dtype=np.float64),
                    min_phonemes=int(entry["min_phonemes"]),
                    max_phonemes=int(entry["max_phonemes"]),
                    min_frames_per_phoneme=int(entry["min_frames_per_phoneme"]),
                    max_frames_per_phoneme=int(entry["max_frames_per_phoneme"]),
                )
            )
        return cls(
            feature_dim=int(d["feature_dim"]),
            phoneme_symbols=tuple(d["phoneme_symbols"]),
            languages=tuple(langs),
            noise_sigma=float(d["noise_sigma"]),
            counts={k: int(v) for k, v in d["counts"].items()},
            seed=int(d["seed"]),
        )


def default_corpus_spec(
    seed: int = 0,
    n_languages: int = 4,
    phonemes_per_language: int = 10,
    shared_phonemes: int = 4,
    feature_dim: int = 16,
    noise_sigma: float = 0.3,
    counts=None,
    min_phonemes: int = 10,
    max_phonemes: int = 16,
    min_frames_per_phoneme: int = 3,
    max_frames_per_phoneme: int = 5,
) -> CorpusSpec:
    """The stock corpus: 4 languages x 10 phonemes with 4 shared, F=16,
    sigma=0.3, 200/40/40 utterances per language."""
    if shared_phonemes > phonemes_per_language:
        raise ConfigError("shared phonemes cannot exceed the per-language inventory")
    counts = dict(counts) if counts else {"train": 200, "dev": 40, "test": 40}
    unique = phonemes_per_language - shared_phonemes
    n_phonemes = shared_phonemes + n_languages * unique
    symbols = tuple(f"p{i:02d}" for i in range(n_phonemes))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    prototypes = rng.normal(0.0, 1.0, (n_phonemes, feature_dim))
    languages = []
    for li in range(n_languages):
        ids = tuple(range(shared_phonemes)) + tuple(
            shared_phonemes + li * unique + u for u in range(unique)
        )
        lang_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1, li]))
        q, r = np.linalg.qr(lang_rng.normal(0.0, 1.0, (feature_dim, feature_dim)))
        q *= np.sign(np.diag(r))  # fix reflection ambiguity for determinism
        bias = lang_rng.normal(0.0, 1.0, feature_dim)
        languages.append(
            LanguageSpec(
                name=f"L{li}",
                phoneme_ids=ids,
                prototypes=prototypes[list(ids)],
                rotation=q,
                bias=bias,
                min_phonemes=min_phonemes,
                max_phonemes=max_phonemes,
                min_frames_per_phoneme=min_frames_per_phoneme,
                max_frames_per_phoneme=max_frames_per_phoneme,
            )
        )
    return CorpusSpec(
        feature_dim=feature_dim,
        phoneme_symbols=symbols,
        languages=tuple(languages),
        noise_sigma=noise_sigma,
        counts=counts,
        seed=seed,
    )


@dataclass
class Utterance:
    """One synthetic sample; features are read from disk on first access."""

    id: str
    lang: str
    n_frames: int
    transcript: tuple[int, ...]  # global phoneme ids
    alignment: np.ndarray  # per-frame phoneme id, length n_frames
    feat_path: str = ""
    offset_bytes: int = 0
    feature_dim: int = 0
    _features: np.ndarray | None = field(default=None, repr=False)

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            with open(self.feat_path, "rb") as fh:
                fh.seek(self.offset_bytes)
                raw = fh.read(self.n_frames * self.feature_dim * 4)
            if len(raw) != self.n_frames * self.feature_dim * 4:
                raise CorruptDataError(f"utterance {self.id}: feature shard truncated")
            self._features = np.frombuffer(raw, dtype="<f4").reshape(self.n_frames, self.feature_dim).astype(np.float32)
        return self._features


def _sample_utterance(spec: CorpusSpec, lang: LanguageSpec, rng: np.random.Generator):
    n_ph = int(rng.integers(lang.min_phonemes, lang.max_phonemes + 1))
    inventory = np.asarray(lang.phoneme_ids)
    realized = lang.realized_prototypes()
    transcript = []
    prev = -1
    for _ in range(n_ph):
        # no adjacent repeats, so collapsing the alignment recovers the transcript
        choices = inventory[inventory != prev] if prev >= 0 else inventory
        pid = int(choices[rng.integers(len(choices))])
        transcript.append(pid)
        prev = pid
    frames = []
    alignment = []
    for pid in transcript:
        dur = int(rng.integers(lang.min_frames_per_phoneme, lang.max_frames_per_phoneme + 1))
        proto = realized[lang.phoneme_ids.index(pid)]
        block = np.tile(proto, (dur, 1))
        if spec.noise_sigma > 0:
            block = block + rng.normal(0.0, spec.noise_sigma, block.shape)
        frames.append(block)
        alignment.extend([pid] * dur)
    features = np.concatenate(frames, axis=0).astype(np.float32)
    return tuple(transcript), features, np.asarray(alignment, dtype=np.uint16)


def generate_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write the corpus to ``out_dir``; byte-identical for identical specs."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    summary = {"out_dir": str(out_dir), "splits": {}}
    for split_idx, split in enumerate(SPLITS):
        count = spec.counts.get(split, 0)
        if count == 0:
            continue
        feat_name = f"{split}.feats"
        rows = []
        feat_payload = bytearray()
        align_payload = bytearray()
        offset = 0
        for lang_idx, lang in enumerate(spec.languages):
            for k in range(count):
                rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, 0xD0, lang_idx, split_idx, k])
                )
                transcript, features, alignment = _sample_utterance(spec, lang, rng)
                rows.append(
                    {
                        "id": f"{lang.name}-{split}-{k:04d}",
                        "lang": lang.name,
                        "n_frames": int(features.shape[0]),
                        "transcript": " ".join(spec.phoneme_symbols[p] for p in transcript),
                        "feat_file": feat_name,
                        "offset_bytes": offset,
                    }
                )
                blob = features.astype("<f4").tobytes()
                feat_payload.extend(blob)
                align_payload.extend(alignment.astype("<u2").tobytes())
                offset += len(blob)
        with open(os.path.join(out_dir, feat_name), "wb") as fh:
            fh.write(bytes(feat_payload))
            fh.write(struct_crc(bytes(feat_payload)))
        with open(os.path.join(out_dir, f"{split}.align"), "wb") as fh:
            fh.write(bytes(align_payload))
        with open(os.path.join(out_dir, f"manifest.{split}.jsonl"), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
                fh.write("\n")
        summary["splits"][split] = len(rows)
    return summary


def struct_crc(payload: bytes) -> bytes:
    return (zlib.crc32(payload) & 0xFFFFFFFF).to_bytes(4, "little")


def _verify_crc(path):
    crc = 0
    size = os.path.getsize(path)
    if size < 4:
        raise CorruptDataError(f"{path}: too small to hold a checksum")
    payload = size - 4
    with open(path, "rb") as fh:
        remaining = payload
        while remaining > 0:
            chunk = fh.read(min(1 << 20, remaining))
            if not chunk:
                raise CorruptDataError(f"{path}: unexpected end of file")
            crc = zlib.crc32(chunk, crc)
            remaining -= len(chunk)
        stored = int.from_bytes(fh.read(4), "little")
    if (crc & 0xFFFFFFFF) != stored:
        raise CorruptDataError(f"{path}: checksum mismatch")
    return payload


def load_corpus_spec(corpus_dir) -> CorpusSpec:
    path = os.path.join(corpus_dir, "corpus.json")
    with open(path, "r", encoding="utf-8") as fh:
        return CorpusSpec.from_dict(json.load(fh))


def load_manifest(manifest_path) -> list[Utterance]:
    """Load one split; features stay on disk until accessed.

    Verifies the feature shard checksum, per-utterance byte ranges, and
    alignment consistency; corrupt data names the offending utterance.
    """
    corpus_dir = os.path.dirname(os.path.abspath(manifest_path))
    spec = load_corpus_spec(corpus_dir)
    symbol_to_id = {s: i for i, s in enumerate(spec.phoneme_symbols)}
    f_dim = spec.feature_dim
    utterances: list[Utterance] = []
    payload_sizes: dict[str, int] = {}
    align_data: dict[str, bytes] = {}
    align_cursor: dict[str, int] = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            feat_path = os.path.join(corpus_dir, row["feat_file"])
            if row["feat_file"] not in payload_sizes:
                payload_sizes[row["feat_file"]] = _verify_crc(feat_path)
                align_path = os.path.splitext(feat_path)[0] + ".align"
                with open(align_path, "rb") as afh:
                    align_data[row["feat_file"]] = afh.read()
                align_cursor[row["feat_file"]] = 0
            n_frames = int(row["n_frames"])
            offset = int(row["offset_bytes"])
            end = offset + n_frames * f_dim * 4
            if end > payload_sizes[row["feat_file"]]:
                raise CorruptDataError(f"utterance {row['id']}: byte range exceeds shard payload")
            cursor = align_cursor[row["feat_file"]]
            align_bytes = align_data[row["feat_file"]][cursor : cursor + n_frames * 2]
            if len(align_bytes) != n_frames * 2:
                raise CorruptDataError(f"utterance {row['id']}: alignment shard truncated")
            align_cursor[row["feat_file"]] = cursor + n_frames * 2
            alignment = np.frombuffer(align_bytes, dtype="<u2")
            transcript = tuple(symbol_to_id[s] for s in row["transcript"].split())
            if collapse_alignment(alignment) != list(transcript):
                raise CorruptDataError(f"utterance {row['id']}: alignment does not collapse to transcript")
            utterances.append(
                Utterance(
                    id=row["id"],
                    lang=row["lang"],
                    n_frames=n_frames,
                    transcript=transcript,
                    alignment=alignment,
                    feat_path=feat_path,
                    offset_bytes=offset,
                    feature_dim=f_dim,
                )
            )
    return utterances


def load_split(corpus_dir, split: str) -> list[Utterance]:
    return load_manifest(os.path.join(corpus_dir, f"manifest.{split}.jsonl"))


def collapse_alignment(alignment) -> list[int]:
    """Run-collapse a per-frame phoneme sequence."""
    out: list[int] = []
    prev = None
    for pid in alignment:
        pid = int(pid)
        if pid != prev:
            out.append(pid)
        prev = pid
    return out


def oracle_transcribe(spec: CorpusSpec, lang_name: str, features: np.ndarray) -> list[int]:
    """Nearest-prototype frame classifier followed by run collapse.

    With sigma=0 this recovers every transcript exactly, which pins the
    corpus as separable by construction.
    """
    lang = next((l for l in spec.languages if l.name == lang_name), None)
    if lang is None:
        raise ConfigError(f"unknown language {lang_name!r}")
    realized = lang.realized_prototypes()
    d2 = ((features[:, None, :] - realized[None, :, :]) ** 2).sum(axis=2)
    frame_ids = [lang.phoneme_ids[j] for j in d2.argmin(axis=1)]
    return collapse_alignment(frame_ids)
