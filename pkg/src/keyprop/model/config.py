"""Architecture hyperparameters."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

ABLATIONS = ("none", "no_deformable", "gif_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Two-stream model configuration.

    ``ablation`` switches off exchange paths without changing the parameter
    set: ``no_deformable`` drops the deformable write, so keyframe context
    reaches the target only through GIF attention and the write op;
    ``gif_only`` drops the write op as well, so neither the GIF stream nor the
    keyframes influence the decoded target.
    """

    stride: int = 4
    lif_channels: int = 32
    gif_dim: int = 32
    key_dim: int = 32
    grid: int = 4
    read_heads: int = 4
    write_heads: int = 4
    attn_heads: int = 4
    intra_blocks: int = 4
    cross_blocks: int = 2
    use_ffc: bool = True
    input_channels: int = 4
    ff_mult: int = 4
    ablation: str = "none"
    block_order: str = ""

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def stages(self) -> int:
        return self.stride.bit_length() - 1

    def order(self) -> str:
        """Block sequence, ``I`` = intra-frame, ``C`` = cross-frame.

        Default: intra blocks split as evenly as possible into ``cross_blocks``
        groups, each group followed by a cross-frame block, so the stack ends
        with a cross-frame block.
        """
        if self.block_order:
            return self.block_order
        if self.cross_blocks == 0:
            return "I" * self.intra_blocks
        base, extra = divmod(self.intra_blocks, self.cross_blocks)
        return "".join("I" * (base + (g < extra)) + "C" for g in range(self.cross_blocks))

    def validate(self) -> "ModelConfig":
        s = self.stride
        if s < 2 or s & (s - 1):
            raise ConfigError(f"stride must be a power of two >= 2, got {s}")
        if self.input_channels != 4:
            raise ConfigError("input frames carry masked RGB plus the mask: input_channels must be 4")
        c, d = self.lif_channels, self.gif_dim
        if c % (1 << (self.stages - 1)):
            raise ConfigError(f"lif_channels {c} must be divisible by 2^(stages-1)")
        if c // (1 << (self.stages - 1)) < 1:
            raise ConfigError("encoder stage width would drop below one channel")
        for name, dim, heads in (
            ("gif_dim", d, self.read_heads),
            ("gif_dim", d, self.attn_heads),
            ("key_dim", self.key_dim, self.attn_heads),
            ("lif_channels", c, self.write_heads),
        ):
            if heads < 1 or dim % heads:
                raise ConfigError(f"{name} {dim} is not divisible by {heads} heads")
        if self.use_ffc and c % 2:
            raise ConfigError("FFC blocks need an even lif_channels")
        if self.grid < 1:
            raise ConfigError("grid must be positive")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        order = self.order()
        if set(order) - {"I", "C"}:
            raise ConfigError(f"block_order may only contain I and C, got {order!r}")
        if order.count("I") != self.intra_blocks or order.count("C") != self.cross_blocks:
            raise ConfigError(f"block_order {order!r} does not match block counts")
        return self

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def check_input(self, h: int, w: int):
        s, m = self.stride, self.grid
        if h % s or w % s:
            raise ConfigError(f"input extents {(h, w)} are not divisible by the stride {s}")
        if (h // s) % m or (w // s) % m:
            raise ConfigError(f"LIF extents {(h // s, w // s)} are not divisible by the grid {m}")


def parse_value(text: str):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def read_config_file(path) -> dict:
    """UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = parse_value(v)
    return out


def model_config_from(values: dict) -> ModelConfig:
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kw = {}
    for k, v in values.items():
        if k in fields:
            kw[k] = bool(v) if k == "use_ffc" else (str(v) if k in ("ablation", "block_order") else v)
    return ModelConfig(**kw).validate()
