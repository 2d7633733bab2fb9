import numpy as np
import pytest

from sshr.ctc import Vocabulary
from sshr.datagen import default_corpus_spec, generate_corpus
from sshr.model import SshrConfig, default_model_config


def tiny_vocab(n_phonemes=5, n_langs=2) -> Vocabulary:
    return Vocabulary(
        tuple(f"p{i:02d}" for i in range(n_phonemes)),
        tuple(f"L{i}" for i in range(n_langs)),
    )


def tiny_model_config(vocab=None, depth=3, hidden=8, heads=2, ffn=16, feature_dim=4, seed=0, **over):
    vocab = vocab or tiny_vocab()
    cfg = default_model_config(vocab, feature_dim, seed)
    cfg["stack"].update({"depth": depth, "hidden": hidden, "heads": heads, "ffn": ffn})
    cfg.update(over)
    return SshrConfig.from_dict(cfg)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A fast corpus for trainer/CLI tests: 4 languages, 20/6/6 per language."""
    out = tmp_path_factory.mktemp("corpus_small")
    spec = default_corpus_spec(seed=101, counts={"train": 20, "dev": 6, "test": 6})
    generate_corpus(spec, out)
    return out


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    from sshr.datagen import load_corpus_spec

    spec = load_corpus_spec(small_corpus)
    return Vocabulary(spec.phoneme_symbols, spec.language_names)


def rand_log_softmax(rng, t, v, dtype=np.float64):
    x = rng.normal(0.0, 1.0, (t, v))
    x = x - np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) - x.max(axis=1, keepdims=True)
    return x.astype(dtype)
