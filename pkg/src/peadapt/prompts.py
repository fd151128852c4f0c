"""Muscle-movement class descriptions, prompt text construction, learnable
multi-modal prompt tokens, and the text-to-vision coupling map."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

EXPRESSION_CLASSES = (
    "Happiness",
    "Sadness",
    "Neutral",
    "Anger",
    "Surprise",
    "Disgust",
    "Fear",
)

# Canonical action-unit descriptions, one per expression class.
AU_DESCRIPTIONS = {
    "Happiness": "Cheek Raiser, Lip Corner Puller.",
    "Sadness": "Inner Brow Raiser, Brow Lowerer, Lip Corner Depressor",
    "Neutral": "Relaxed Muscles, Even Eyebrows, Closed Lips, Calm Eyes, Smooth Forehead",
    "Anger": "Brow Lowerer, Upper Lid Raiser, Lid Tightener, Lip Tightener",
    "Surprise": "Inner Brow Raiser, Outer Brow Raiser, Upper Lid Raiser, Jaw Drop",
    "Disgust": "Nose Wrinkler, Lip Corner Depressor, Lower Lip Depressor",
    "Fear": (
        "Inner Brow Raiser, Outer Brow Raiser, Brow Lowerer, Upper Lid Raiser, "
        "Lid Tightener, Lip Stretcher, Jaw Drop"
    ),
}

TEXT_MODES = ("class_name", "au_description", "chatgpt_file", "coop_template")
LEARN_MODES = ("none", "text_only", "coupled")


def load_description_file(path: str | Path) -> dict[str, str]:
    """Parse a plain-text description file, one "ClassName<TAB>description" line
    per class. All seven classes must be present."""
    table: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'ClassName<TAB>description'")
        name, desc = line.split("\t", 1)
        name, desc = name.strip(), desc.strip()
        if name not in EXPRESSION_CLASSES:
            raise ValueError(f"{path}:{lineno}: unknown class {name!r}")
        if not desc:
            raise ValueError(f"{path}:{lineno}: empty description for {name}")
        table[name] = desc
    missing = [c for c in EXPRESSION_CLASSES if c not in table]
    if missing:
        raise ValueError(f"{path}: missing descriptions for {', '.join(missing)}")
    return table


def build_au_prompt(
    class_name: str,
    mode: str = "au_description",
    table: dict[str, str] | None = None,
    description_file: str | Path | None = None,
) -> str:
    """Deterministic prompt text for one expression class.

    Modes: class_name (the label itself), au_description (the canonical
    muscle-movement text), chatgpt_file (descriptions from a user-supplied
    file), coop_template ("a photo of a <class>.").
    """
    if mode not in TEXT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}, expected one of {TEXT_MODES}")
    if table is None:
        table = AU_DESCRIPTIONS
    if class_name not in table:
        raise KeyError(f"unknown expression class {class_name!r}")
    if mode == "class_name":
        return class_name
    if mode == "au_description":
        return table[class_name]
    if mode == "coop_template":
        return f"a photo of a {class_name.lower()}."
    if description_file is None:
        raise ValueError("mode 'chatgpt_file' requires description_file")
    return load_description_file(description_file)[class_name]


def class_prompts(
    mode: str = "au_description", description_file: str | Path | None = None
) -> list[str]:
    """Prompt texts for all seven classes in canonical order."""
    return class_prompts_for(EXPRESSION_CLASSES, mode=mode, description_file=description_file)


def class_prompts_for(
    classes, mode: str = "au_description", description_file: str | Path | None = None
) -> list[str]:
    """Prompt texts for a class subset, preserving the given order."""
    return [
        build_au_prompt(c, mode=mode, description_file=description_file)
        for c in classes
    ]


@dataclass(frozen=True)
class PromptConfig:
    """Prompt-side knobs: what text to use and which tokens are learnable.

    depth counts encoder layers receiving prompt injection; 1 means input
    only, J > 1 swaps in fresh learnable tokens before each of the first J
    blocks.
    """

    text_mode: str = "au_description"
    learn_mode: str = "coupled"
    n_tokens: int = 2
    depth: int = 1
    description_file: str | None = None

    def __post_init__(self) -> None:
        if self.text_mode not in TEXT_MODES:
            raise ValueError(f"unknown text_mode {self.text_mode!r}")
        if self.learn_mode not in LEARN_MODES:
            raise ValueError(f"unknown learn_mode {self.learn_mode!r}")
        if self.n_tokens < 1:
            raise ValueError(f"n_tokens must be positive, got {self.n_tokens}")
        if self.depth < 1:
            raise ValueError(f"depth must be positive, got {self.depth}")


class PromptCoupler(nn.Module):
    """Single affine map from text-prompt space to vision-prompt space,
    shared across tokens."""

    def __init__(self, text_dim: int, vision_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.proj = nn.Linear(text_dim, vision_dim)
        if generator is not None:
            with torch.no_grad():
                bound = 1.0 / (text_dim**0.5)
                self.proj.weight.uniform_(-bound, bound, generator=generator)
                self.proj.bias.zero_()

    def forward(self, p_t: Tensor) -> Tensor:
        if p_t.shape[-1] != self.proj.in_features:
            raise ValueError(
                f"coupling expects text dim {self.proj.in_features}, got {p_t.shape[-1]}"
            )
        return self.proj(p_t)


class MultiModalPrompts(nn.Module):
    """Learnable text prompt tokens with derived vision tokens.

    text_tokens has shape (depth, n_tokens, text_dim). Vision tokens are
    never independent parameters: they are recomputed from the text tokens
    through the coupling map on every access, so gradients from the vision
    branch reach the text tokens and any text-token update is reflected
    immediately.
    """

    def __init__(
        self,
        config: PromptConfig,
        text_dim: int,
        vision_dim: int,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.config = config
        if config.learn_mode == "none":
            self.text_tokens = None
            self.coupler = None
            return
        init = torch.empty(config.depth, config.n_tokens, text_dim)
        init.normal_(mean=0.0, std=0.02, generator=generator)
        self.text_tokens = nn.Parameter(init)
        self.coupler = (
            PromptCoupler(text_dim, vision_dim, generator)
            if config.learn_mode == "coupled"
            else None
        )

    @property
    def n_text(self) -> int:
        return 0 if self.text_tokens is None else self.config.n_tokens

    @property
    def n_vision(self) -> int:
        return 0 if self.coupler is None else self.config.n_tokens

    def depth_for(self, n_layers: int) -> int:
        return 0 if self.text_tokens is None else min(self.config.depth, n_layers)

    def text_layer(self, layer: int) -> Tensor:
        """(n_tokens, text_dim) learnable tokens for one injection depth."""
        if self.text_tokens is None:
            raise RuntimeError("learn_mode 'none' has no text tokens")
        return self.text_tokens[layer]

    def vision_layer(self, layer: int) -> Tensor:
        """(n_tokens, vision_dim) tokens derived from the text tokens."""
        if self.coupler is None:
            raise RuntimeError("vision tokens require learn_mode 'coupled'")
        return self.coupler(self.text_tokens[layer])


def inject_prompts(embeddings: Tensor, tokens: Tensor) -> Tensor:
    """Prepend prompt tokens to a token-embedding sequence.

    embeddings: (L, d) or (B, L, d); tokens: (N, d). The original rows keep
    their values and order after the N prepended rows.
    """
    if tokens.shape[-1] != embeddings.shape[-1]:
        raise ValueError(
            f"prompt dim {tokens.shape[-1]} does not match embedding dim "
            f"{embeddings.shape[-1]}"
        )
    if tokens.shape[0] == 0:
        return embeddings
    if embeddings.dim() == 2:
        return torch.cat([tokens, embeddings], dim=0)
    if embeddings.dim() == 3:
        batch = tokens.unsqueeze(0).expand(embeddings.shape[0], -1, -1)
        return torch.cat([batch, embeddings], dim=1)
    raise ValueError(f"expected (L, d) or (B, L, d), got shape {tuple(embeddings.shape)}")


_WORD_RE = re.compile(r"[a-z0-9]+")


class WordTokenizer:
    """Word-level tokenizer with a fixed vocabulary built from the canonical
    description table, the class names, and a few template words.

    Layout per sequence: [bos, words..., eos, pad...]. Unknown words map to
    an unk id. Texts longer than the context are truncated with a warning.
    """

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def __init__(self, extra_texts: tuple[str, ...] = ()):
        corpus = list(AU_DESCRIPTIONS.values()) + list(EXPRESSION_CLASSES)
        corpus.append("a photo of a")
        corpus.extend(extra_texts)
        words = sorted({w for text in corpus for w in _WORD_RE.findall(text.lower())})
        self.vocab = {w: i + 4 for i, w in enumerate(words)}
        self.vocab_size = 4 + len(words)

    def encode(self, text: str, context_length: int) -> list[int]:
        words = _WORD_RE.findall(text.lower())
        if not words:
            raise ValueError(f"prompt text has no tokens: {text!r}")
        if context_length < 3:
            raise ValueError(f"context_length must be >= 3, got {context_length}")
        budget = context_length - 2
        if len(words) > budget:
            warnings.warn(
                f"prompt truncated from {len(words)} to {budget} words", stacklevel=2
            )
            words = words[:budget]
        ids = [self.bos_id]
        ids.extend(self.vocab.get(w, self.unk_id) for w in words)
        ids.append(self.eos_id)
        ids.extend([self.pad_id] * (context_length - len(ids)))
        return ids
