"""Checkpoint persistence on top of the tensor archive."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .. import archive
from ..tensor import Tensor
from .config import ABLATIONS, ConfigError, ModelConfig
from .network import param_shapes

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    step: int = 0
    opt: dict = field(default_factory=dict)  # "<param>.m" / "<param>.v" -> ndarray
    train: dict = field(default_factory=dict)  # scalar training settings

    @classmethod
    def from_tensors(cls, config, params: dict, step=0, opt=None, train=None) -> "Checkpoint":
        arrays = {k: np.array(v.data if isinstance(v, Tensor) else v, copy=True) for k, v in params.items()}
        state = {k: np.array(v, copy=True) for k, v in (opt or {}).items()}
        return cls(config, arrays, step, state, dict(train or {}))

    def tensors(self, requires_grad: bool = True) -> dict:
        return {k: Tensor(v.copy(), requires_grad=requires_grad, name=k) for k, v in self.params.items()}


def _config_entries(cfg: ModelConfig) -> dict:
    out = {"config.version": np.array(FORMAT_VERSION, dtype=np.float64)}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "ablation":
            out["config.ablation"] = np.array(ABLATIONS.index(v), dtype=np.float64)
        elif f.name == "block_order":
            out["config.block_order"] = np.array([1.0 if ch == "C" else 0.0 for ch in cfg.order()])
        else:
            out[f"config.{f.name}"] = np.array(float(v))
    return out


def _config_from_entries(e: dict) -> ModelConfig:
    version = int(e.get("config.version", np.array(-1)).item()) if "config.version" in e else -1
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    kw = {}
    for f in dataclasses.fields(ModelConfig):
        key = f"config.{f.name}"
        if key not in e:
            raise CheckpointError(f"checkpoint lacks {key}")
        v = e[key]
        if f.name == "ablation":
            kw[f.name] = ABLATIONS[int(v.item())]
        elif f.name == "block_order":
            kw[f.name] = "".join("C" if x > 0.5 else "I" for x in v.ravel())
        elif f.name == "use_ffc":
            kw[f.name] = bool(v.item())
        else:
            kw[f.name] = int(v.item())
    # an order equal to the derived default is stored back as "" so the
    # loaded config compares equal to the one that was saved
    if kw["block_order"] == ModelConfig(**{**kw, "block_order": ""}).order():
        kw["block_order"] = ""
    try:
        return ModelConfig(**kw).validate()
    except ConfigError as err:
        raise CheckpointError(f"invalid stored config: {err}") from None


def checkpoint_save(ckpt: Checkpoint, path):
    entries = _config_entries(ckpt.config)
    for k, v in ckpt.params.items():
        entries[f"param.{k}"] = v
    for k, v in ckpt.opt.items():
        entries[f"opt.{k}"] = v
    for k, v in ckpt.train.items():
        entries[f"train.{k}"] = np.array(float(v))
    entries["step"] = np.array(float(ckpt.step))
    archive.save(path, entries)


def _strip(e: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in e.items() if k.startswith(prefix)}


def checkpoint_load(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read and validate a checkpoint.

    Parameters must match the shapes implied by the stored config exactly.
    With ``expect`` the stored parameters must also fit that config, which is
    how a checkpoint trained at one width is refused by a model of another.
    """
    try:
        e = archive.load(path)
    except archive.ArchiveError as err:
        raise CheckpointError(f"{path}: {err}") from None
    cfg = _config_from_entries(e)
    params = _strip(e, "param.")
    opt = _strip(e, "opt.")
    train = {k: v.item() for k, v in _strip(e, "train.").items()}
    if "step" not in e:
        raise CheckpointError(f"{path}: missing step entry")
    _check_params(params, cfg, "stored config")
    if expect is not None:
        _check_params(params, expect.validate(), "expected config")
        if expect.order() != cfg.order() or expect.ablation != cfg.ablation:
            raise CheckpointError(
                f"checkpoint layout {cfg.order()}/{cfg.ablation} differs from expected "
                f"{expect.order()}/{expect.ablation}"
            )
    for k, v in opt.items():
        base = k.rsplit(".", 1)[0]
        if base not in params or v.shape != params[base].shape:
            raise CheckpointError(f"optimizer state {k!r} does not match any parameter")
    return Checkpoint(cfg, params, int(e["step"].item()), opt, train)


def _check_params(params: dict, cfg: ModelConfig, what: str):
    shapes = param_shapes(cfg)
    missing = sorted(set(shapes) - set(params))
    extra = sorted(set(params) - set(shapes))
    if missing or extra:
        raise CheckpointError(
            f"parameters do not fit the {what}: missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
            f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''}"
        )
    for k, (shape, _) in shapes.items():
        if params[k].shape != shape:
            raise CheckpointError(f"parameter {k!r} has shape {params[k].shape}, the {what} needs {shape}")
