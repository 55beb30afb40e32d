"""Text encoders behind a common batch interface.

Two backends: a dependency-free feature-hashing encoder that is fully
deterministic across machines, and a pretrained CLIP text tower loaded
through transformers when the weights are available locally.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from typing import Sequence

import numpy as np


class EncoderLoadError(RuntimeError):
    """The requested encoder backend could not be constructed."""


@dataclasses.dataclass
class TruncationWarning:
    prompt: str
    kept_tokens: int


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashedNgramEncoder:
    """Deterministic bag-of-features embedding via feature hashing.

    Word unigrams, word bigrams, and character trigrams are hashed
    (sha256) onto signed coordinates of a fixed-width vector, which is
    then normalized to unit length. Identical text maps to identical
    bytes on every platform; token overlap yields higher dot products,
    which is the property the knowledge graph consumes.
    """

    version = "hash-v1"
    max_tokens = 256

    def __init__(self, dim: int = 512):
        if dim < 8:
            raise EncoderLoadError("hash encoder needs dim >= 8")
        self.dim = dim
        self.encoder_id = f"{self.version}/{dim}"
        self.warnings: list[TruncationWarning] = []

    def _features(self, text: str) -> list[tuple[str, float]]:
        tokens = _TOKEN_RE.findall(text.lower())
        if len(tokens) > self.max_tokens:
            self.warnings.append(TruncationWarning(text, self.max_tokens))
            tokens = tokens[: self.max_tokens]
        feats = [(f"w:{t}", 1.0) for t in tokens]
        feats += [(f"b:{a}_{b}", 0.75) for a, b in zip(tokens, tokens[1:])]
        for t in tokens:
            padded = f"^{t}$"
            feats += [(f"c:{padded[i : i + 3]}", 0.5) for i in range(len(padded) - 2)]
        return feats

    def encode_batch(self, prompts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(prompts), self.dim))
        for row, text in enumerate(prompts):
            for feature, weight in self._features(text):
                digest = hashlib.sha256(feature.encode("utf-8")).digest()
                index = int.from_bytes(digest[:8], "little") % self.dim
                sign = 1.0 if digest[8] % 2 == 0 else -1.0
                out[row, index] += sign * weight
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class ClipTextEncoder:
    """Pretrained contrastive text tower (512-wide) via transformers."""

    max_tokens = 77

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPTextModelWithProjection, CLIPTokenizer
        except ImportError as err:
            raise EncoderLoadError(f"transformers/torch not installed: {err}") from None
        try:
            self._tokenizer = CLIPTokenizer.from_pretrained(model_id)
            self._model = CLIPTextModelWithProjection.from_pretrained(model_id)
        except Exception as err:
            raise EncoderLoadError(f"could not load {model_id!r}: {err}") from None
        self._model.eval()
        self._torch = torch
        self.dim = int(self._model.config.projection_dim)
        config_digest = hashlib.sha256(self._model.config.to_json_string().encode()).hexdigest()[:12]
        self.encoder_id = f"clip:{model_id}@{config_digest}"
        self.warnings: list[TruncationWarning] = []

    def encode_batch(self, prompts: Sequence[str]) -> np.ndarray:
        for text in prompts:
            if len(self._tokenizer(text)["input_ids"]) > self.max_tokens:
                self.warnings.append(TruncationWarning(text, self.max_tokens))
        tokens = self._tokenizer(
            list(prompts), padding=True, truncation=True, max_length=self.max_tokens, return_tensors="pt"
        )
        with self._torch.no_grad():
            features = self._model(**tokens).text_embeds
        return features.double().numpy()


def load_encoder(spec: str, dim: int = 512):
    """Build an encoder from its identifier.

    ``hash`` (optionally ``hash/<dim>``) selects the built-in hashing
    encoder; ``clip:<model>`` loads a pretrained text tower.
    """
    if spec == "hash":
        return HashedNgramEncoder(dim)
    if spec.startswith("hash/"):
        return HashedNgramEncoder(int(spec.split("/", 1)[1]))
    if spec.startswith("clip:"):
        return ClipTextEncoder(spec.split(":", 1)[1])
    raise EncoderLoadError(f"unknown encoder {spec!r}; expected 'hash', 'hash/<dim>', or 'clip:<model>'")
