"""Zero-shot scoring from contrastive embeddings only.

Quality scoring softmax-normalizes the image's similarity to a good/bad
prompt pair; the ensemble averages over pairs. Style scoring uses raw
cosines (single prompt or per-style ensemble mean), which is what rank-based
multilabel evaluation consumes.

The pair score is computed so that swapping the pair's roles yields the exact
complement: the branch with the larger similarity evaluates 1/(1+e^-d) and
the mirrored call reuses that value's exact complement (Sterbenz), so the two
scores always sum to exactly 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import tokenizer as tok
from .model import ModelConfig, ModelParams, encode_text_unimodal
from .prompts import PromptBank

CACHE_HASH_KEY = "meta/checkpoint_sha256"


@dataclass
class PromptPairEmbedding:
    good: np.ndarray
    bad: np.ndarray
    good_text: str
    bad_text: str

    def __post_init__(self):
        for name, v in (("good", self.good), ("bad", self.bad)):
            if abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) > 1e-6:
                raise ValueError(f"prompt pair '{name}' embedding is not unit-norm")


@dataclass
class StylePromptEmbeddings:
    single: dict[str, np.ndarray]
    ensemble: dict[str, list[np.ndarray]]

    def style_names(self) -> list[str]:
        return list(self.single)


def _check_unit(name: str, v: np.ndarray) -> None:
    if abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) > 1e-6:
        raise ValueError(f"{name}: expected a unit-norm vector")


def zsl_iaa_single(v: np.ndarray, pair: PromptPairEmbedding | tuple) -> float:
    """Softmax-normalized preference for the 'good' prompt, in (0, 1).

    Depends on the two similarities only through their difference.
    """
    if isinstance(pair, PromptPairEmbedding):
        pg, pb = pair.good, pair.bad
    else:
        pg, pb = pair
    v = np.asarray(v, dtype=np.float64)
    _check_unit("zsl_iaa_single image embedding", v)
    a = float(v @ np.asarray(pg, dtype=np.float64))
    b = float(v @ np.asarray(pb, dtype=np.float64))
    d = b - a
    if d <= 0:
        return 1.0 / (1.0 + math.exp(d))
    return 1.0 - 1.0 / (1.0 + math.exp(-d))


def zsl_iaa_ensemble(v: np.ndarray, pairs) -> float:
    """Arithmetic mean of the per-pair scores, clamped into their span."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("zsl_iaa_ensemble: empty pair list")
    scores = [zsl_iaa_single(v, p) for p in pairs]
    m = math.fsum(scores) / len(scores)
    return min(max(m, min(scores)), max(scores))


def zsl_style_scores(v: np.ndarray, styles: StylePromptEmbeddings,
                     mode: str = "ensemble") -> dict[str, float]:
    """Per-style cosine scores for one unit image embedding."""
    v = np.asarray(v, dtype=np.float64)
    _check_unit("zsl_style_scores image embedding", v)
    if mode not in ("single", "ensemble"):
        raise ValueError(f"zsl_style_scores: unknown mode {mode!r}")
    out: dict[str, float] = {}
    for name in styles.style_names():
        if mode == "single":
            out[name] = float(v @ np.asarray(styles.single[name], dtype=np.float64))
        else:
            cosines = [float(v @ np.asarray(p, dtype=np.float64))
                       for p in styles.ensemble[name]]
            m = math.fsum(cosines) / len(cosines)
            out[name] = min(max(m, min(cosines)), max(cosines))
    return out


def style_score_for(v: np.ndarray, styles: StylePromptEmbeddings, name: str,
                    mode: str = "ensemble") -> float:
    if name not in styles.single:
        raise ValueError(f"unknown style {name!r}")
    return zsl_style_scores(v, styles, mode)[name]


# ---------------------------------------------------------------------------
# prompt embedding computation and caching
# ---------------------------------------------------------------------------

def embed_prompt(text: str, params: ModelParams, cfg: ModelConfig,
                 vocab: tok.Vocabulary) -> np.ndarray:
    """Unit-norm frozen text embedding of a prompt (CLS output)."""
    with ad.no_grad():
        seq = tok.encode(text, vocab, "contrastive", cfg.max_text_length)
        state = encode_text_unimodal(seq, params, cfg)
        return ad.l2_normalize(state.cls_output).data.copy()


def embed_bank(bank: PromptBank, params: ModelParams, cfg: ModelConfig,
               vocab: tok.Vocabulary) -> dict[str, np.ndarray]:
    return {text: embed_prompt(text, params, cfg, vocab) for text in bank.all_texts()}


def pair_embeddings(bank: PromptBank, table: dict[str, np.ndarray]) -> list[PromptPairEmbedding]:
    return [PromptPairEmbedding(good=table[g], bad=table[b], good_text=g, bad_text=b)
            for g, b in bank.iaa_pairs]


def style_embeddings(bank: PromptBank, table: dict[str, np.ndarray]) -> StylePromptEmbeddings:
    return StylePromptEmbeddings(
        single={name: table[bank.style_single[name]] for name in bank.style_names},
        ensemble={name: [table[p] for p in bank.style_prompts[name]]
                  for name in bank.style_names})


def save_prompt_cache(table: dict[str, np.ndarray], checkpoint_hash: bytes,
                      path: str) -> None:
    tensors: dict[str, np.ndarray] = dict(table)
    tensors[CACHE_HASH_KEY] = np.frombuffer(checkpoint_hash, dtype=np.uint8).astype(np.float64)
    ckpt.save(tensors, path)


def load_prompt_cache(path: str, checkpoint_hash: bytes | None = None
                      ) -> dict[str, np.ndarray]:
    tensors = ckpt.load(path)
    stored = tensors.pop(CACHE_HASH_KEY, None)
    if checkpoint_hash is not None:
        if stored is None:
            raise ckpt.CheckpointError(f"{path}: prompt cache carries no checkpoint hash")
        if bytes(stored.astype(np.uint8)) != checkpoint_hash:
            raise ckpt.CheckpointError(f"{path}: prompt cache was built for a different "
                                       "checkpoint")
    return tensors
