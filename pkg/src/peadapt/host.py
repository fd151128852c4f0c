"""Frozen dual encoder (vision transformer over frame patches, text
transformer over token embeddings) with adapter insertion points, prompt
injection, freezing, and parameter auditing.

The backbone is frozen at construction; only adapters and prompt tokens
train. Block composition keeps the standard residual stream, so zero-init
adapters leave the frozen model's outputs untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from .adapters import (
    CELL_KINDS,
    SCALE_PLACEMENTS,
    AdapterConfig,
    BottleneckAdapter,
    TemporalDynamicAdapter,
    count_params,
)
from .prompts import (
    EXPRESSION_CLASSES,
    MultiModalPrompts,
    PromptConfig,
    WordTokenizer,
    class_prompts,
    inject_prompts,
)

TDA_STREAMS = ("class_token", "all_tokens")


@dataclass(frozen=True)
class HostConfig:
    """Architecture shape of the dual encoder."""

    vision_dim: int = 64
    text_dim: int = 64
    joint_dim: int = 32
    layers_vision: int = 2
    layers_text: int = 2
    heads_vision: int = 4
    heads_text: int = 4
    patch_size: int = 16
    image_size: int = 64
    frames: int = 8
    vocab_size: int = 128
    context_length: int = 32
    mlp_ratio: int = 4
    temperature: float = 0.07
    temperature_trainable: bool = False
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        for name in ("vision_dim", "text_dim", "joint_dim", "layers_vision", "layers_text",
                     "frames", "vocab_size", "context_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.vision_dim % self.heads_vision != 0:
            raise ValueError("vision_dim must be divisible by heads_vision")
        if self.text_dim % self.heads_text != 0:
            raise ValueError("text_dim must be divisible by heads_text")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size * self.image_size) // (self.patch_size * self.patch_size)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def toy(cls, **overrides) -> "HostConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "HostConfig":
        base = dict(
            vision_dim=768,
            text_dim=512,
            joint_dim=512,
            layers_vision=12,
            layers_text=12,
            heads_vision=12,
            heads_text=8,
            patch_size=16,
            image_size=224,
            frames=16,
            vocab_size=49408,
            context_length=77,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class AdapterFlags:
    """Which adapter families exist and how they are configured.

    literal_eq6 drops the plain attention term from the attention residual,
    keeping only input + adapter(attention); the default keeps the standard
    input + attention + adapter composition.
    """

    sha_vision: bool = True
    tda: bool = True
    sha_text: bool = True
    ta: bool = True
    reduction: int = 8
    scale_placement: str = "post_up_projection"
    cell_kind: str = "gru"
    scale_width: int = 1
    literal_eq6: bool = False
    tda_stream: str = "class_token"
    share_across_layers: bool = False

    def __post_init__(self) -> None:
        if self.tda_stream not in TDA_STREAMS:
            raise ValueError(f"unknown tda_stream {self.tda_stream!r}, expected {TDA_STREAMS}")
        if self.scale_placement not in SCALE_PLACEMENTS:
            raise ValueError(f"unknown scale_placement {self.scale_placement!r}")
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"unknown cell_kind {self.cell_kind!r}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be positive, got {self.reduction}")


class Attention(nn.Module):
    """Multi-head self-attention with an explicit softmax so attention
    probabilities can be recorded (and their gradients retained) on demand."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, sink: list | None = None) -> Tensor:
        b, length, dim = x.shape
        qkv = self.qkv(x).reshape(b, length, 3, self.heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)  # (3, b, heads, L, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        if sink is not None:
            if attn.requires_grad:
                attn.retain_grad()
            sink.append(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        return self.proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block exposed as two branches so the host can
    weave adapter deltas into the residual stream."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def attn_branch(self, x: Tensor, sink: list | None = None) -> Tensor:
        return self.attn(self.ln_1(x), sink)

    def mlp_branch(self, x: Tensor) -> Tensor:
        return self.mlp(self.ln_2(x))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: HostConfig):
        super().__init__()
        d = cfg.vision_dim
        patch_in = 3 * cfg.patch_size * cfg.patch_size
        self.patch_embed = nn.Linear(patch_in, d)
        self.class_embedding = nn.Parameter(torch.zeros(d))
        self.pos_embedding = nn.Parameter(torch.zeros(1 + cfg.patches_per_frame, d))
        self.ln_pre = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(
            [EncoderBlock(d, cfg.heads_vision, cfg.mlp_ratio) for _ in range(cfg.layers_vision)]
        )
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.zeros(d, cfg.joint_dim))


class TextEncoder(nn.Module):
    def __init__(self, cfg: HostConfig):
        super().__init__()
        d = cfg.text_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        self.pos_embedding = nn.Parameter(torch.zeros(cfg.context_length, d))
        self.blocks = nn.ModuleList(
            [EncoderBlock(d, cfg.heads_text, cfg.mlp_ratio) for _ in range(cfg.layers_text)]
        )
        self.ln_final = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.zeros(d, cfg.joint_dim))


def _repeat_or_new(make, n: int, shared: bool) -> nn.ModuleList:
    if shared:
        one = make()
        return nn.ModuleList([one for _ in range(n)])
    return nn.ModuleList([make() for _ in range(n)])


class AdapterBundle(nn.Module):
    """All trainable adapter families, one slot per encoder layer. Disabled
    families are simply absent."""

    def __init__(self, cfg: HostConfig, flags: AdapterFlags, generator: torch.Generator | None):
        super().__init__()
        self.flags = flags
        vis_cfg = AdapterConfig(model_dim=cfg.vision_dim, reduction=flags.reduction)
        txt_cfg = AdapterConfig(model_dim=cfg.text_dim, reduction=flags.reduction)
        tda_cfg = AdapterConfig(
            model_dim=cfg.vision_dim,
            reduction=flags.reduction,
            scale_placement=flags.scale_placement,
            cell_kind=flags.cell_kind,
            scale_width=flags.scale_width,
        )
        shared = flags.share_across_layers
        if flags.sha_vision:
            self.sha_vision = _repeat_or_new(
                lambda: BottleneckAdapter(vis_cfg, generator), cfg.layers_vision, shared
            )
        if flags.tda:
            self.tda = _repeat_or_new(
                lambda: TemporalDynamicAdapter(tda_cfg, generator), cfg.layers_vision, shared
            )
        if flags.sha_text:
            self.sha_text = _repeat_or_new(
                lambda: BottleneckAdapter(txt_cfg, generator), cfg.layers_text, shared
            )
        if flags.ta:
            self.ta = _repeat_or_new(
                lambda: BottleneckAdapter(txt_cfg, generator), cfg.layers_text, shared
            )

    def get(self, family: str, layer: int):
        lst = getattr(self, family, None)
        return None if lst is None else lst[layer]


@dataclass
class ParameterAudit:
    trainable: int
    frozen: int
    total: int
    fraction: float
    breakdown: dict[str, int] = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [
            f"trainable: {self.trainable:,}",
            f"frozen:    {self.frozen:,}",
            f"total:     {self.total:,}",
            f"fraction:  {self.fraction:.4%}",
        ]
        for name, n in self.breakdown.items():
            lines.append(f"  {name}: {n:,}")
        return "\n".join(lines)


class DualEncoderModel(nn.Module):
    """Frozen dual encoder plus trainable adapters and prompts.

    Vision path: patchify -> linear embed -> [class; patches] + positions ->
    pre-norm -> prepend vision prompt tokens -> blocks (attention adapter on
    the attention branch, temporal adapter on the MLP branch's frame stream)
    -> per-frame class token -> post-norm -> temporal mean -> joint
    projection -> L2 normalize.

    Text path: tokenize -> embed + positions -> prepend text prompt tokens ->
    blocks (attention adapter, feature adapter on the MLP branch) ->
    end-of-sequence pooling -> final norm -> joint projection -> L2
    normalize.
    """

    def __init__(
        self,
        config: HostConfig | None = None,
        flags: AdapterFlags | None = None,
        prompt_config: PromptConfig | None = None,
        tokenizer: WordTokenizer | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config or HostConfig()
        self.flags = flags or AdapterFlags()
        self.prompt_config = prompt_config or PromptConfig()
        self.tokenizer = tokenizer or WordTokenizer()
        if self.tokenizer.vocab_size > self.config.vocab_size:
            raise ValueError(
                f"tokenizer vocabulary ({self.tokenizer.vocab_size}) exceeds "
                f"config.vocab_size ({self.config.vocab_size})"
            )
        g = torch.Generator().manual_seed(seed)
        self.vision = VisionEncoder(self.config)
        self.text = TextEncoder(self.config)
        self.temperature = nn.Parameter(
            torch.tensor(float(self.config.temperature)),
            requires_grad=self.config.temperature_trainable,
        )
        self._init_backbone(g)
        self.bundle = AdapterBundle(self.config, self.flags, g)
        self.prompts = MultiModalPrompts(
            self.prompt_config, self.config.text_dim, self.config.vision_dim, g
        )
        self.freeze_backbone()
        if self.config.precision == "float64":
            self.double()
        self.last_vision_attention: list[Tensor] | None = None

    # -- construction ------------------------------------------------------

    def _init_backbone(self, g: torch.Generator) -> None:
        def fan_in_(linear: nn.Linear) -> None:
            bound = 1.0 / math.sqrt(linear.in_features)
            with torch.no_grad():
                linear.weight.uniform_(-bound, bound, generator=g)
                linear.bias.uniform_(-bound, bound, generator=g)

        with torch.no_grad():
            fan_in_(self.vision.patch_embed)
            self.vision.class_embedding.normal_(std=0.02, generator=g)
            self.vision.pos_embedding.normal_(std=0.02, generator=g)
            self.vision.proj.normal_(std=self.config.vision_dim**-0.5, generator=g)
            self.text.token_embedding.weight.normal_(std=0.02, generator=g)
            self.text.pos_embedding.normal_(std=0.02, generator=g)
            self.text.proj.normal_(std=self.config.text_dim**-0.5, generator=g)
        for enc in (self.vision, self.text):
            for blk in enc.blocks:
                fan_in_(blk.attn.qkv)
                fan_in_(blk.attn.proj)
                fan_in_(blk.mlp[0])
                fan_in_(blk.mlp[2])

    def freeze_backbone(self) -> None:
        """Disable gradients for every backbone parameter. Adapters and
        prompts are untouched. There is no inverse operation."""
        for p in self.vision.parameters():
            p.requires_grad_(False)
        for p in self.text.parameters():
            p.requires_grad_(False)
        if not self.config.temperature_trainable:
            self.temperature.requires_grad_(False)

    def unfreeze_backbone(self) -> None:
        raise NotImplementedError(
            "the backbone stays frozen; training it is not supported"
        )

    # -- prompt geometry ----------------------------------------------------

    @property
    def n_vision_prompts(self) -> int:
        return self.prompts.n_vision

    @property
    def vision_class_index(self) -> int:
        return self.prompts.n_vision

    def default_prompts(self) -> list[str]:
        return class_prompts(
            mode=self.prompt_config.text_mode,
            description_file=self.prompt_config.description_file,
        )

    # -- block composition ---------------------------------------------------

    def forward_vision_block(self, layer: int, x: Tensor, sink: list | None = None) -> Tensor:
        """One vision block over x: (B, T, L, d) with adapters woven in."""
        if not 0 <= layer < self.config.layers_vision:
            raise IndexError(f"vision layer {layer} out of range")
        if x.dim() != 4 or x.shape[-1] != self.config.vision_dim:
            raise ValueError(f"expected (B, T, L, {self.config.vision_dim}), got {tuple(x.shape)}")
        blk = self.vision.blocks[layer]
        b, t, length, d = x.shape
        a = blk.attn_branch(x.reshape(b * t, length, d), sink).reshape(b, t, length, d)
        sha = self.bundle.get("sha_vision", layer)
        if sha is not None:
            delta = sha(a)
            h1 = x + delta if self.flags.literal_eq6 else x + a + delta
        else:
            h1 = x + a
        m = blk.mlp_branch(h1.reshape(b * t, length, d)).reshape(b, t, length, d)
        h2 = h1 + m
        tda = self.bundle.get("tda", layer)
        if tda is not None:
            if self.flags.tda_stream == "class_token":
                cls = self.vision_class_index
                delta = tda(m[:, :, cls, :])  # (B, T, d)
                h2 = h2.index_add(2, torch.tensor([cls], device=x.device), delta.unsqueeze(2))
            else:
                stream = m.permute(0, 2, 1, 3).reshape(b * length, t, d)
                delta = tda(stream).reshape(b, length, t, d).permute(0, 2, 1, 3)
                h2 = h2 + delta
        return h2

    def forward_text_block(self, layer: int, x: Tensor, sink: list | None = None) -> Tensor:
        """One text block over x: (C, L, d) with adapters woven in."""
        if not 0 <= layer < self.config.layers_text:
            raise IndexError(f"text layer {layer} out of range")
        blk = self.text.blocks[layer]
        a = blk.attn_branch(x, sink)
        sha = self.bundle.get("sha_text", layer)
        if sha is not None:
            delta = sha(a)
            h1 = x + delta if self.flags.literal_eq6 else x + a + delta
        else:
            h1 = x + a
        m = blk.mlp_branch(h1)
        h2 = h1 + m
        ta = self.bundle.get("ta", layer)
        if ta is not None:
            h2 = h2 + ta(m)
        return h2

    # -- encoders ------------------------------------------------------------

    def patchify(self, clips: Tensor) -> Tensor:
        """(B, T, H, W, 3) -> (B, T, M, P*P*3), patches row-major, each
        flattened in (row, col, channel) order."""
        cfg = self.config
        b, t, h, w, c = clips.shape
        p = cfg.patch_size
        grid = h // p
        x = clips.reshape(b, t, grid, p, grid, p, c)
        x = x.permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, t, grid * grid, p * p * c)

    def encode_video(self, clips: Tensor, record_attention: bool = False) -> Tensor:
        """(B, T, H, W, 3) normalized frames -> (B, joint_dim), rows L2-unit."""
        cfg = self.config
        if clips.dim() != 5 or clips.shape[-1] != 3:
            raise ValueError(f"expected (B, T, H, W, 3), got {tuple(clips.shape)}")
        if clips.shape[1] != cfg.frames:
            raise ValueError(f"expected {cfg.frames} frames, got {clips.shape[1]}")
        if clips.shape[2] != cfg.image_size or clips.shape[3] != cfg.image_size:
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} frames, "
                f"got {clips.shape[2]}x{clips.shape[3]}"
            )
        clips = clips.to(cfg.dtype)
        b, t = clips.shape[:2]
        tok = self.vision.patch_embed(self.patchify(clips))
        cls = self.vision.class_embedding.expand(b, t, 1, -1)
        x = torch.cat([cls, tok], dim=2) + self.vision.pos_embedding
        x = self.vision.ln_pre(x)
        n = self.prompts.n_vision
        if n:
            pv = self.prompts.vision_layer(0).to(cfg.dtype)
            x = torch.cat([pv.expand(b, t, n, -1), x], dim=2)
        sink: list | None = [] if record_attention else None
        depth = self.prompts.depth_for(cfg.layers_vision) if n else 0
        for i in range(cfg.layers_vision):
            if n and 0 < i < depth:
                pv = self.prompts.vision_layer(i).to(cfg.dtype)
                x = torch.cat([pv.expand(b, t, n, -1), x[:, :, n:, :]], dim=2)
            x = self.forward_vision_block(i, x, sink)
        if record_attention:
            self.last_vision_attention = sink
        v = self.vision.ln_post(x[:, :, self.vision_class_index, :])  # (B, T, d)
        f = v.mean(dim=1) @ self.vision.proj
        return f / f.norm(dim=-1, keepdim=True)

    def encode_text(self, texts: list[str] | None = None, record_attention: bool = False) -> Tensor:
        """Prompt texts -> (C, joint_dim), rows L2-unit."""
        if texts is None:
            texts = self.default_prompts()
        if not texts:
            raise ValueError("encode_text needs at least one prompt")
        ids = torch.tensor(
            [self.tokenizer.encode(t, self.config.context_length) for t in texts],
            dtype=torch.long,
        )
        return self.encode_token_ids(ids, record_attention=record_attention)

    def encode_token_ids(self, ids: Tensor, record_attention: bool = False) -> Tensor:
        cfg = self.config
        if ids.dim() != 2 or ids.shape[1] > cfg.context_length:
            raise ValueError(
                f"expected (C, L<= {cfg.context_length}) token ids, got {tuple(ids.shape)}"
            )
        if (ids >= cfg.vocab_size).any() or (ids < 0).any():
            raise ValueError("token id out of vocabulary range")
        c, length = ids.shape
        eos_hits = ids == self.tokenizer.eos_id
        if not bool(eos_hits.any(dim=1).all()):
            raise ValueError("every token sequence must contain an end-of-sequence id")
        x = self.text.token_embedding(ids) + self.text.pos_embedding[:length]
        n = self.prompts.n_text
        if n:
            pt = self.prompts.text_layer(0).to(cfg.dtype)
            x = torch.cat([pt.expand(c, n, -1), x], dim=1)
        eos_pos = eos_hits.float().argmax(dim=1) + n
        sink: list | None = [] if record_attention else None
        depth = self.prompts.depth_for(cfg.layers_text) if n else 0
        for i in range(cfg.layers_text):
            if n and 0 < i < depth:
                pt = self.prompts.text_layer(i).to(cfg.dtype)
                x = torch.cat([pt.expand(c, n, -1), x[:, n:, :]], dim=1)
            x = self.forward_text_block(i, x, sink)
        pooled = self.text.ln_final(x)[torch.arange(c), eos_pos]
        f = pooled @ self.text.proj
        return f / f.norm(dim=-1, keepdim=True)

    # -- classification -------------------------------------------------------

    def forward(self, clips: Tensor, texts: list[str] | None = None) -> Tensor:
        """Cosine-similarity logits (B, C), already divided by temperature."""
        f_v = self.encode_video(clips)
        f_t = self.encode_text(texts)
        return f_v @ f_t.T / self.temperature

    def predict_proba(self, clips: Tensor, texts: list[str] | None = None) -> Tensor:
        return torch.softmax(self.forward(clips, texts), dim=-1)

    # -- audit -----------------------------------------------------------------

    def audit_trainable(self) -> ParameterAudit:
        breakdown: dict[str, int] = {}
        for family in ("sha_vision", "tda", "sha_text", "ta"):
            lst = getattr(self.bundle, family, None)
            if lst is not None:
                breakdown[family] = count_params(lst)
        prompt_count = count_params(self.prompts)
        if prompt_count:
            breakdown["prompts"] = prompt_count
        if self.temperature.requires_grad:
            breakdown["temperature"] = self.temperature.numel()
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        total = sum(p.numel() for p in self.parameters())
        return ParameterAudit(
            trainable=trainable,
            frozen=total - trainable,
            total=total,
            fraction=trainable / total if total else 0.0,
            breakdown=breakdown,
        )

    def trainable_parameters(self) -> dict[str, list[nn.Parameter]]:
        """Trainable parameters split into adapter and prompt groups."""
        adapter, prompt = [], []
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            (prompt if name.startswith("prompts.") else adapter).append(p)
        return {"adapters": adapter, "prompts": prompt}
