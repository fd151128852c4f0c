"""Plain-text run configuration: ``section.key = value`` files, environment
overrides, and command-line ``--set`` pairs merged over preset defaults.

Precedence, lowest to highest: dataclass defaults, preset, config file,
``PEADAPT_*`` environment variables, ``--set`` pairs. Every key is validated
against the schema derived from the config dataclasses; unknown keys are
rejected. The resolved config can be echoed back as canonical text.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .data import AugmentConfig
from .host import AdapterFlags, HostConfig
from .prompts import PromptConfig
from .training import TrainingConfig

ENV_PREFIX = "PEADAPT_"

SECTIONS: dict[str, type] = {
    "host": HostConfig,
    "train": TrainingConfig,
    "adapter": AdapterFlags,
    "augment": AugmentConfig,
    "prompt": PromptConfig,
}

# free-standing keys that do not belong to a config dataclass
EXTRA_KEYS: dict[str, type] = {
    "data.root": str,
    "run.out": str,
    "run.seed": int,
    "run.preset": str,
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _cast(key: str, raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    if raw.lower() in ("none", "null"):
        return None
    return raw


def schema() -> dict[str, type]:
    """key -> value type, derived from the config dataclasses' defaults."""
    table: dict[str, type] = dict(EXTRA_KEYS)
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            default = f.default
            kind = str if default is None else type(default)
            table[f"{section}.{f.name}"] = kind
    return table


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; blanks and #-comments are ignored."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing config file {path}")
    pairs: dict[str, str] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_set_pairs(pairs) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set needs key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def env_overrides(env: dict | None = None) -> dict[str, str]:
    """PEADAPT_<SECTION>_<FIELD>=value -> {"section.field": value}. Section
    names contain no underscores, so the first underscore splits the key."""
    env = os.environ if env is None else env
    out: dict[str, str] = {}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "_" not in rest:
            raise ValueError(f"{name}: expected {ENV_PREFIX}<SECTION>_<FIELD>")
        section, field = rest.split("_", 1)
        out[f"{section.lower()}.{field.lower()}"] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    host: HostConfig
    train: TrainingConfig
    flags: AdapterFlags
    augment: AugmentConfig
    prompt: PromptConfig
    data_root: str | None
    out_dir: str
    seed: int
    preset: str

    def to_text(self) -> str:
        """Canonical echo of every key, one ``key = value`` line each."""
        lines = []
        for section, obj in (
            ("adapter", self.flags), ("augment", self.augment),
            ("host", self.host), ("prompt", self.prompt), ("train", self.train),
        ):
            for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
                value = getattr(obj, f.name)
                lines.append(f"{section}.{f.name} = {_render(value)}")
        lines.append(f"data.root = {_render(self.data_root)}")
        lines.append(f"run.out = {self.out_dir}")
        lines.append(f"run.preset = {self.preset}")
        lines.append(f"run.seed = {self.seed}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def resolve_config(
    config_file: str | Path | None = None,
    set_pairs=(),
    env: dict | None = None,
    preset: str | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Merge all sources into one validated RunConfig."""
    table = schema()
    merged: dict[str, object] = {}

    def apply(pairs: dict[str, str], source: str) -> None:
        for key, raw in pairs.items():
            if key not in table:
                close = [k for k in table if k.endswith("." + key.split(".")[-1])]
                hint = f" (did you mean {close[0]}?)" if close else ""
                raise ValueError(f"unknown config key {key!r} from {source}{hint}")
            merged[key] = _cast(key, raw, table[key])

    if config_file is not None:
        apply(parse_config_file(config_file), f"file {config_file}")
    apply(env_overrides(env), "environment")
    apply(parse_set_pairs(set_pairs), "--set")
    if preset is not None:
        merged["run.preset"] = preset
    if seed is not None:
        merged["run.seed"] = seed
        merged.setdefault("train.seed", seed)

    chosen_preset = str(merged.get("run.preset", "toy"))
    if chosen_preset not in ("toy", "full"):
        raise ValueError(f"run.preset must be toy or full, got {chosen_preset!r}")

    def section_kwargs(section: str) -> dict:
        prefix = section + "."
        return {k[len(prefix):]: v for k, v in merged.items() if k.startswith(prefix)}

    host_kwargs = section_kwargs("host")
    host = HostConfig.full(**host_kwargs) if chosen_preset == "full" else HostConfig(**host_kwargs)
    return RunConfig(
        host=host,
        train=TrainingConfig(**section_kwargs("train")),
        flags=AdapterFlags(**section_kwargs("adapter")),
        augment=AugmentConfig(**section_kwargs("augment")),
        prompt=PromptConfig(**section_kwargs("prompt")),
        data_root=merged.get("data.root"),
        out_dir=str(merged.get("run.out", "runs/default")),
        seed=int(merged.get("run.seed", 0)),
        preset=chosen_preset,
    )


def code_digest() -> str:
    """Stable digest over the package's source files, for run manifests."""
    pkg_dir = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(pkg_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
