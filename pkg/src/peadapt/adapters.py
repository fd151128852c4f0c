"""Bottleneck adapters, recurrent temporal adapters, and dynamic scaling.

All adapters return the *delta* to be added to the host stream; residual
composition is the host's responsibility. With the default initialization
(zero up-projection, zero scale weight with unit bias) every delta is exactly
zero, so inserting adapters leaves the frozen model's behaviour unchanged
until training starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

SCALE_PLACEMENTS = ("none", "input_level", "recurrent_output", "post_up_projection")
CELL_KINDS = ("vanilla", "rnn", "lstm", "gru")


@dataclass(frozen=True)
class AdapterConfig:
    """Shape and variant axes for one adapter instance.

    ``hidden_dim`` is derived as ``model_dim // reduction`` and must be at
    least 1. ``scale_placement`` and ``cell_kind`` only matter for temporal
    adapters.
    """

    model_dim: int
    reduction: int = 8
    scale_placement: str = "post_up_projection"
    cell_kind: str = "gru"
    scale_width: int = 1

    def __post_init__(self) -> None:
        if self.model_dim < 1:
            raise ValueError(f"model_dim must be positive, got {self.model_dim}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be positive, got {self.reduction}")
        if self.hidden_dim < 1:
            raise ValueError(
                f"model_dim // reduction must be >= 1, got "
                f"{self.model_dim} // {self.reduction} == 0"
            )
        if self.scale_placement not in SCALE_PLACEMENTS:
            raise ValueError(
                f"unknown scale_placement {self.scale_placement!r}, "
                f"expected one of {SCALE_PLACEMENTS}"
            )
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(
                f"unknown cell_kind {self.cell_kind!r}, expected one of {CELL_KINDS}"
            )
        if self.scale_width < 1:
            raise ValueError(f"scale_width must be positive, got {self.scale_width}")

    @property
    def hidden_dim(self) -> int:
        return self.model_dim // self.reduction


def _check_last_dim(x: Tensor, expected: int, who: str) -> None:
    if x.shape[-1] != expected:
        raise ValueError(
            f"{who}: expected feature dim {expected}, got {x.shape[-1]} "
            f"(input shape {tuple(x.shape)})"
        )


def _seeded_uniform_(t: Tensor, bound: float, generator: torch.Generator | None) -> None:
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)


class BottleneckAdapter(nn.Module):
    """Down-project / GELU / up-project bottleneck.

    ``forward`` maps ``(..., d) -> (..., d)`` and returns the additive delta
    only. Down weights get a fan-in-scaled uniform init; up weights and all
    biases start at zero so the delta is zero at initialization.
    """

    def __init__(self, config: AdapterConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        d, h = config.model_dim, config.hidden_dim
        self.down = nn.Linear(d, h)
        self.up = nn.Linear(h, d)
        self.act = nn.GELU()
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        _seeded_uniform_(self.down.weight, 1.0 / math.sqrt(self.config.model_dim), generator)
        with torch.no_grad():
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        _check_last_dim(x, self.config.model_dim, type(self).__name__)
        return self.up(self.act(self.down(x)))


class VanillaCell(nn.Module):
    """Stateless pass-through; stands in where no recurrence is wanted."""

    def __init__(self, hidden_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.hidden_dim = hidden_dim

    def forward(self, x: Tensor) -> Tensor:
        return x


class ElmanCell(nn.Module):
    """Plain recurrent cell: h_t = tanh(W x_t + U h_{t-1} + b)."""

    def __init__(self, hidden_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.hidden_dim = hidden_dim
        h = hidden_dim
        self.w_ih = nn.Parameter(torch.empty(h, h))
        self.w_hh = nn.Parameter(torch.empty(h, h))
        self.bias = nn.Parameter(torch.empty(h))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.hidden_dim)
        for p in (self.w_ih, self.w_hh, self.bias):
            _seeded_uniform_(p, bound, generator)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, T, h) -> (B, T, h)
        h = x.new_zeros(x.shape[0], self.hidden_dim)
        outs = []
        for t in range(x.shape[1]):
            h = torch.tanh(x[:, t] @ self.w_ih.T + h @ self.w_hh.T + self.bias)
            outs.append(h)
        return torch.stack(outs, dim=1)


class GRUCell(nn.Module):
    """Gated recurrent cell with update gate z, reset gate r, candidate n.

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    n_t = tanh(W_n x_t + U_n (r_t * h_{t-1}) + b_n)
    h_t = z_t * h_{t-1} + (1 - z_t) * n_t
    """

    def __init__(self, hidden_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.hidden_dim = hidden_dim
        h = hidden_dim
        self.w_ih = nn.Parameter(torch.empty(3 * h, h))  # rows: [z; r; n]
        self.w_hh = nn.Parameter(torch.empty(3 * h, h))
        self.bias = nn.Parameter(torch.empty(3 * h))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.hidden_dim)
        for p in (self.w_ih, self.w_hh, self.bias):
            _seeded_uniform_(p, bound, generator)

    def forward(self, x: Tensor) -> Tensor:
        h_dim = self.hidden_dim
        h = x.new_zeros(x.shape[0], h_dim)
        outs = []
        for t in range(x.shape[1]):
            gi = x[:, t] @ self.w_ih.T + self.bias
            gh = h @ self.w_hh.T
            z = torch.sigmoid(gi[:, :h_dim] + gh[:, :h_dim])
            r = torch.sigmoid(gi[:, h_dim : 2 * h_dim] + gh[:, h_dim : 2 * h_dim])
            n = torch.tanh(gi[:, 2 * h_dim :] + r * gh[:, 2 * h_dim :])
            h = z * h + (1.0 - z) * n
            outs.append(h)
        return torch.stack(outs, dim=1)


class LSTMCell(nn.Module):
    """Long short-term memory cell with input/forget/cell/output gates."""

    def __init__(self, hidden_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.hidden_dim = hidden_dim
        h = hidden_dim
        self.w_ih = nn.Parameter(torch.empty(4 * h, h))  # rows: [i; f; g; o]
        self.w_hh = nn.Parameter(torch.empty(4 * h, h))
        self.bias = nn.Parameter(torch.empty(4 * h))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.hidden_dim)
        for p in (self.w_ih, self.w_hh, self.bias):
            _seeded_uniform_(p, bound, generator)

    def forward(self, x: Tensor) -> Tensor:
        hd = self.hidden_dim
        h = x.new_zeros(x.shape[0], hd)
        c = x.new_zeros(x.shape[0], hd)
        outs = []
        for t in range(x.shape[1]):
            gates = x[:, t] @ self.w_ih.T + h @ self.w_hh.T + self.bias
            i = torch.sigmoid(gates[:, :hd])
            f = torch.sigmoid(gates[:, hd : 2 * hd])
            g = torch.tanh(gates[:, 2 * hd : 3 * hd])
            o = torch.sigmoid(gates[:, 3 * hd :])
            c = f * c + i * g
            h = o * torch.tanh(c)
            outs.append(h)
        return torch.stack(outs, dim=1)


_CELLS = {"vanilla": VanillaCell, "rnn": ElmanCell, "lstm": LSTMCell, "gru": GRUCell}


def make_cell(kind: str, hidden_dim: int, generator: torch.Generator | None = None) -> nn.Module:
    if kind not in _CELLS:
        raise ValueError(f"unknown cell_kind {kind!r}, expected one of {CELL_KINDS}")
    return _CELLS[kind](hidden_dim, generator)


class TemporalDynamicAdapter(nn.Module):
    """Recurrent bottleneck over a frame-feature sequence with learned scaling.

    The input is a per-frame feature sequence ``(T, d)`` or a batch of them
    ``(B, T, d)``. The core path is down-project -> recurrent cell -> GELU ->
    up-project; a rectified linear head on the raw input produces per-frame
    nonnegative scale factors that multiply the path at the configured
    placement. Returns the delta only.

    Scale initialization is weight=0, bias=1, so scale factors start at 1 and
    the zero up-projection keeps the initial delta at zero.
    """

    def __init__(self, config: AdapterConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        d, h = config.model_dim, config.hidden_dim
        self.down = nn.Linear(d, h)
        self.cell = make_cell(config.cell_kind, h, generator)
        self.up = nn.Linear(h, d)
        self.scale = nn.Linear(d, config.scale_width)
        self.act = nn.GELU()
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        _seeded_uniform_(self.down.weight, 1.0 / math.sqrt(self.config.model_dim), generator)
        with torch.no_grad():
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()
            self.scale.weight.zero_()
            self.scale.bias.fill_(1.0)
        if hasattr(self.cell, "reset_parameters"):
            self.cell.reset_parameters(generator)

    def dynamic_scale(self, x: Tensor) -> Tensor:
        """Per-frame nonnegative scale factors, ``(..., T, scale_width)``.

        Computed from the raw (MLP-branch) features, independent of the
        recurrent state.
        """
        _check_last_dim(x, self.config.model_dim, "dynamic_scale")
        return torch.relu(self.scale(x))

    def forward(self, x: Tensor) -> Tensor:
        _check_last_dim(x, self.config.model_dim, type(self).__name__)
        if x.dim() not in (2, 3):
            raise ValueError(
                f"expected (T, d) or (B, T, d) input, got shape {tuple(x.shape)}"
            )
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] == 0:
            raise ValueError("temporal adapter requires at least one frame, got T=0")

        placement = self.config.scale_placement
        s = self.dynamic_scale(x) if placement != "none" else None

        if placement == "input_level":
            hidden = self.cell(self.down(x * s))
            out = self.up(self.act(hidden))
        elif placement == "recurrent_output":
            hidden = self.cell(self.down(x))
            out = self.up(self.act(hidden * s))
        elif placement == "post_up_projection":
            hidden = self.cell(self.down(x))
            out = self.up(self.act(hidden)) * s
        else:  # "none"
            hidden = self.cell(self.down(x))
            out = self.up(self.act(hidden))
        return out.squeeze(0) if squeeze else out


def count_params(module: nn.Module) -> int:
    """Exact number of scalar parameters in a module (shared tensors once)."""
    seen: set[int] = set()
    total = 0
    for p in module.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.numel()
    return total
