"""Model definitions: conv backbone, per-scale injection heads, linear
classification head.

The backbone is a small stack of conv blocks (optionally residual) standing in
for full-scale feature extractors; its global-average-pooled output is the
hidden feature that both the injection heads and the classification head read.
Injection heads are two linear layers with ReLU and dropout, and their output
rows are always L2-normalized so cosine targets see unit vectors in train and
eval mode alike.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import engine
from .engine import Tensor
from .errors import NoConvLayer, ShapeMismatch, UnknownScale
from .seeding import derive_rng

GROUP_BACKBONE = "backbone"
GROUP_MLP = "mlp"


def inject_group(scale: str) -> str:
    return f"inject.{scale}"


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 128)
    residual: tuple[bool, ...] = (False, False, False)
    resolution: int = 64
    in_channels: int = 3

    def __post_init__(self) -> None:
        if not self.channels:
            raise ValueError("backbone needs at least one block")
        if len(self.residual) != len(self.channels):
            raise ValueError("one residual flag per block required")
        if self.resolution % (2 ** len(self.channels)):
            raise ValueError(
                f"resolution {self.resolution} not divisible by "
                f"2^{len(self.channels)} pooling stages"
            )
        prev = self.channels[0]
        for c, res in zip(self.channels, self.residual):
            if res and c != prev:
                raise ValueError("residual blocks need matching channel counts")
            prev = c

    @property
    def hidden_dim(self) -> int:
        return self.channels[-1]

    @property
    def feature_extent(self) -> int:
        return self.resolution // (2 ** len(self.channels))


def tiny(resolution: int = 64) -> BackboneConfig:
    # channel widths sized for single-core training at desk scale
    return BackboneConfig(channels=(16, 32, 64), residual=(False,) * 3,
                          resolution=resolution)


def tiny_res(resolution: int = 64) -> BackboneConfig:
    return BackboneConfig(channels=(32, 32, 32), residual=(True,) * 3,
                          resolution=resolution)


PRESETS = {"tiny": tiny, "tiny-res": tiny_res}


@dataclass(frozen=True)
class InjectionHeadConfig:
    scale: str
    out_dim: int
    hidden_dim: int
    activation: str = "relu"
    dropout_p: float = 0.1

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.hidden_dim, self.out_dim)


class ModelState:
    """Backbone + injection heads + classification head with freeze flags.

    Parameters live in an insertion-ordered dict keyed by dotted names whose
    first component is the parameter group ("backbone", "inject.<scale>",
    "mlp"); freezing a group drops its tensors' requires_grad so optimizers
    and backward skip them.
    """

    def __init__(
        self,
        backbone: BackboneConfig,
        scale_dims: Mapping[str, int],
        n_categories: int,
        seed: int = 0,
        head_dropout: float = 0.1,
    ):
        self.backbone = backbone
        self.n_categories = int(n_categories)
        self.seed = int(seed)
        self.heads: dict[str, InjectionHeadConfig] = {
            scale: InjectionHeadConfig(
                scale=scale,
                out_dim=int(dim),
                hidden_dim=max(backbone.hidden_dim // 2, 8),
                dropout_p=head_dropout,
            )
            for scale, dim in scale_dims.items()
        }
        self.frozen: set[str] = set()
        self.params: dict[str, Tensor] = {}
        self._build()

    # -- construction -----------------------------------------------------

    def _param(self, name: str, shape: tuple[int, ...], fan_in: int | None) -> None:
        if fan_in is None:
            data = np.zeros(shape, dtype=np.float32)
        else:
            rng = derive_rng(self.seed, "param", name)
            std = np.sqrt(2.0 / fan_in)
            data = rng.normal(0.0, std, size=shape).astype(np.float32)
        self.params[name] = Tensor(data, requires_grad=True)

    def _build(self) -> None:
        cfg = self.backbone
        in_ch = cfg.in_channels
        if cfg.residual[0]:
            self._param("backbone.stem.w", (cfg.channels[0], in_ch, 3, 3), in_ch * 9)
            self._param("backbone.stem.b", (cfg.channels[0],), None)
            in_ch = cfg.channels[0]
        for i, (ch, res) in enumerate(zip(cfg.channels, cfg.residual)):
            if res:
                self._param(f"backbone.b{i}.c1.w", (ch, in_ch, 3, 3), in_ch * 9)
                self._param(f"backbone.b{i}.c1.b", (ch,), None)
                self._param(f"backbone.b{i}.c2.w", (ch, ch, 3, 3), ch * 9)
                self._param(f"backbone.b{i}.c2.b", (ch,), None)
            else:
                self._param(f"backbone.b{i}.w", (ch, in_ch, 3, 3), in_ch * 9)
                self._param(f"backbone.b{i}.b", (ch,), None)
            in_ch = ch
        d_h = cfg.hidden_dim
        for scale, head in self.heads.items():
            # bias-free: head output direction is then invariant to positive
            # rescaling of the hidden feature, which the cosine targets rely on
            g = inject_group(scale)
            self._param(f"{g}.l1.w", (d_h, head.hidden_dim), d_h)
            self._param(f"{g}.l2.w", (head.hidden_dim, head.out_dim), head.hidden_dim)
        self._param("mlp.w", (d_h, self.n_categories), d_h)
        self._param("mlp.b", (self.n_categories,), None)

    # -- parameter groups ---------------------------------------------------

    def group_params(self, group: str) -> dict[str, Tensor]:
        prefix = group + "."
        return {n: p for n, p in self.params.items() if n.startswith(prefix)}

    def freeze(self, group: str) -> None:
        found = self.group_params(group)
        if not found:
            raise KeyError(f"no parameters under group {group!r}")
        self.frozen.add(group)
        for p in found.values():
            p.requires_grad = False

    def unfreeze(self, group: str) -> None:
        self.frozen.discard(group)
        for p in self.group_params(group).values():
            p.requires_grad = True

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def group_hash(self, group: str) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name, p in sorted(self.group_params(group).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()


def _as_batch(images, cfg: BackboneConfig) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    expected = (cfg.in_channels, cfg.resolution, cfg.resolution)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"image batch {x.shape}, expected (N, {expected})")
    return x


def forward_hidden(
    model: ModelState,
    images,
    train: bool = False,
    capture: dict | None = None,
) -> Tensor:
    """Backbone forward up to the pooled hidden feature (batch, d_h).

    ``capture['feature_map']`` receives the last conv activation map (the
    tensor feeding global average pooling) when a dict is passed.
    """
    cfg = model.backbone
    if not cfg.channels:
        raise NoConvLayer("backbone has no conv blocks")
    x = _as_batch(images, cfg)
    p = model.params
    if cfg.residual[0]:
        x = engine.relu(
            engine.bias_add(
                engine.conv2d(x, p["backbone.stem.w"], padding=1),
                p["backbone.stem.b"],
            )
        )
    for i, res in enumerate(cfg.residual):
        if res:
            x = engine.maxpool2d(x, 2)
            y = engine.relu(
                engine.bias_add(
                    engine.conv2d(x, p[f"backbone.b{i}.c1.w"], padding=1),
                    p[f"backbone.b{i}.c1.b"],
                )
            )
            y = engine.bias_add(
                engine.conv2d(y, p[f"backbone.b{i}.c2.w"], padding=1),
                p[f"backbone.b{i}.c2.b"],
            )
            x = engine.relu(engine.add(x, y))
        else:
            x = engine.relu(
                engine.bias_add(
                    engine.conv2d(x, p[f"backbone.b{i}.w"], padding=1),
                    p[f"backbone.b{i}.b"],
                )
            )
            x = engine.maxpool2d(x, 2)
    if capture is not None:
        capture["feature_map"] = x
    return engine.global_avg_pool(x)


def forward_injection(
    model: ModelState,
    nu: Tensor,
    scale: str,
    train: bool = False,
    dropout_seed: int = 0,
) -> Tensor:
    """Project hidden features into a knowledge scale's space; rows unit-norm."""
    if scale not in model.heads:
        raise UnknownScale(f"no injection head for scale {scale!r}")
    head = model.heads[scale]
    g = inject_group(scale)
    p = model.params
    h = engine.relu(engine.matmul(nu, p[f"{g}.l1.w"]))
    h = engine.dropout(h, head.dropout_p, train=train, seed=dropout_seed)
    out = engine.matmul(h, p[f"{g}.l2.w"])
    return engine.l2_normalize_rows(out)


def forward_mlp(model: ModelState, nu: Tensor) -> Tensor:
    """Classification logits (batch, n_categories); softmax left to the loss."""
    if nu.shape[1] != model.backbone.hidden_dim:
        raise ShapeMismatch(
            f"hidden features {nu.shape}, expected width {model.backbone.hidden_dim}"
        )
    return engine.bias_add(
        engine.matmul(nu, model.params["mlp.w"]), model.params["mlp.b"]
    )


# -- persistence ---------------------------------------------------------------


def _sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_model(model: ModelState, path: str | Path) -> None:
    """KINJ1 checkpoint plus a JSON sidecar describing the architecture."""
    engine.save_checkpoint(model.params, path)
    sidecar = {
        "backbone": {
            "channels": list(model.backbone.channels),
            "residual": list(model.backbone.residual),
            "resolution": model.backbone.resolution,
            "in_channels": model.backbone.in_channels,
        },
        "scale_dims": {s: h.out_dim for s, h in model.heads.items()},
        "head_dropout": {s: h.dropout_p for s, h in model.heads.items()},
        "n_categories": model.n_categories,
        "seed": model.seed,
        "frozen": sorted(model.frozen),
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_model(path: str | Path) -> ModelState:
    sidecar = json.loads(_sidecar_path(path).read_text())
    cfg = BackboneConfig(
        channels=tuple(sidecar["backbone"]["channels"]),
        residual=tuple(sidecar["backbone"]["residual"]),
        resolution=sidecar["backbone"]["resolution"],
        in_channels=sidecar["backbone"]["in_channels"],
    )
    dropouts = sidecar.get("head_dropout", {})
    model = ModelState(
        backbone=cfg,
        scale_dims=sidecar["scale_dims"],
        n_categories=sidecar["n_categories"],
        seed=sidecar["seed"],
    )
    for scale, p in dropouts.items():
        head = model.heads[scale]
        model.heads[scale] = InjectionHeadConfig(
            scale=head.scale,
            out_dim=head.out_dim,
            hidden_dim=head.hidden_dim,
            dropout_p=p,
        )
    loaded = engine.load_checkpoint(path)
    if set(loaded) != set(model.params):
        raise ShapeMismatch("checkpoint parameter names do not match architecture")
    for name, arr in loaded.items():
        if arr.shape != model.params[name].shape:
            raise ShapeMismatch(
                f"checkpoint {name}: shape {arr.shape} vs {model.params[name].shape}"
            )
        model.params[name].data = arr.astype(np.float32)
    for group in sidecar.get("frozen", []):
        model.freeze(group)
    return model
