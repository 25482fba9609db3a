"""Split U-Net: client front-end, server body, client back-end.

The front-end is the first conv+BN+ReLU unit; the back-end is the final
conv producing class logits, followed by softmax/argmax. Everything in
between (remaining down blocks, bottleneck, up blocks with skips) lives on
the server.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import (
    NonFiniteError,
    ShapeError,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    dice_per_sample,
    maxpool2d,
    relu,
    softmax_channels,
    upsample_nearest2x,
)

CHECKPOINT_FORMAT_VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")

Params = dict  # name -> np.ndarray, insertion-ordered


class ConfigError(ValueError):
    """Invalid architecture / run configuration; message names the field."""


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 32
    num_classes: int = 5
    in_channels: int = 1
    down_filters: tuple = (8, 16)
    bottleneck_filters: int = 32
    up_filters: tuple = (16, 8)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "down_filters", tuple(int(f) for f in self.down_filters))
        object.__setattr__(self, "up_filters", tuple(int(f) for f in self.up_filters))

    def validate(self) -> "ArchConfig":
        if not self.down_filters:
            raise ConfigError("architecture.down_filters: need at least one down block")
        if len(self.down_filters) != len(self.up_filters):
            raise ConfigError("architecture.up_filters: must have the same length as down_filters")
        if self.input_size <= 0 or self.input_size % (2 ** len(self.down_filters)):
            raise ConfigError(
                f"architecture.input_size: {self.input_size} not divisible by 2^{len(self.down_filters)}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("architecture.kernel_size: must be a positive odd integer")
        if self.num_classes < 2:
            raise ConfigError("architecture.num_classes: need at least 2 classes")
        for name in ("down_filters", "up_filters"):
            if any(f <= 0 for f in getattr(self, name)):
                raise ConfigError(f"architecture.{name}: filter counts must be positive")
        if self.bottleneck_filters <= 0 or self.in_channels <= 0:
            raise ConfigError("architecture: bottleneck_filters and in_channels must be positive")
        return self

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "num_classes": self.num_classes,
                "in_channels": self.in_channels, "down_filters": list(self.down_filters),
                "bottleneck_filters": self.bottleneck_filters, "up_filters": list(self.up_filters),
                "kernel_size": self.kernel_size}


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


@dataclass
class SplitModelWeights:
    front_end: Params
    server: Params
    back_end: Params

    def client(self) -> Params:
        """W^C: the front-end and back-end collections merged (FE first)."""
        return {**self.front_end, **self.back_end}

    def with_client(self, client: Params) -> "SplitModelWeights":
        fe = {k: client[k] for k in self.front_end}
        be = {k: client[k] for k in self.back_end}
        return SplitModelWeights(fe, self.server, be)

    def copy(self) -> "SplitModelWeights":
        return SplitModelWeights(_copy(self.front_end), _copy(self.server), _copy(self.back_end))

    def parts(self) -> tuple:
        return self.front_end, self.server, self.back_end

    def all_params(self) -> Params:
        return {**self.front_end, **self.server, **self.back_end}

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.all_params().values())


def _copy(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}


# ------------------------------------------------------------------ layout

def _conv_shapes(cfg: ArchConfig) -> list[tuple[str, str, int, int]]:
    """(stage, layer prefix, in_channels, out_channels) for every conv+BN unit."""
    down, up = cfg.down_filters, cfg.up_filters
    units = [("front_end", "fe", cfg.in_channels, down[0]),
             ("server", "down0.u2", down[0], down[0])]
    for i in range(1, len(down)):
        units.append(("server", f"down{i}.u1", down[i - 1], down[i]))
        units.append(("server", f"down{i}.u2", down[i], down[i]))
    units.append(("server", "bottleneck.u1", down[-1], cfg.bottleneck_filters))
    units.append(("server", "bottleneck.u2", cfg.bottleneck_filters, cfg.bottleneck_filters))
    prev = cfg.bottleneck_filters
    for j, f in enumerate(up):
        skip = down[len(down) - 1 - j]
        units.append(("server", f"up{j}.u1", prev + skip, f))
        units.append(("server", f"up{j}.u2", f, f))
        prev = f
    return units


def build_split_unet(cfg: ArchConfig, seed: int) -> SplitModelWeights:
    """He-uniform conv kernels, zero biases, BN gamma=1 / beta=0."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x5EED])
    k = cfg.kernel_size
    stages: dict[str, Params] = {"front_end": {}, "server": {}, "back_end": {}}

    def conv(dest: Params, prefix: str, cin: int, cout: int) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        dest[f"{prefix}.conv.weight"] = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        dest[f"{prefix}.conv.bias"] = np.zeros(cout)

    for stage, prefix, cin, cout in _conv_shapes(cfg):
        dest = stages[stage]
        conv(dest, prefix, cin, cout)
        dest[f"{prefix}.bn.gamma"] = np.ones(cout)
        dest[f"{prefix}.bn.beta"] = np.zeros(cout)
        dest[f"{prefix}.bn.running_mean"] = np.zeros(cout)
        dest[f"{prefix}.bn.running_var"] = np.ones(cout)
    conv(stages["back_end"], "be", cfg.up_filters[-1], cfg.num_classes)
    return SplitModelWeights(stages["front_end"], stages["server"], stages["back_end"])


def count_trainable(weights: SplitModelWeights) -> int:
    return sum(a.size for name, a in weights.all_params().items() if not is_buffer(name))


def as_leaves(params: Params, requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap trainable arrays as graph leaves (no copy; Adam updates them in place)."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items() if not is_buffer(k)}


# ----------------------------------------------------------------- forward

def _unit(params: Params, leaves: dict[str, Tensor], prefix: str, x: Tensor, training: bool) -> Tensor:
    y = conv2d(x, leaves[f"{prefix}.conv.weight"], leaves[f"{prefix}.conv.bias"])
    y = batchnorm2d(y, leaves[f"{prefix}.bn.gamma"], leaves[f"{prefix}.bn.beta"],
                    params[f"{prefix}.bn.running_mean"], params[f"{prefix}.bn.running_var"], training)
    return relu(y)


def _leaves_for(params: Params, leaves: Optional[dict]) -> dict:
    return leaves if leaves is not None else as_leaves(params, requires_grad=False)


def _expect_channels(x: Tensor, channels: int, size: Optional[int], stage: str) -> None:
    if x.data.ndim != 4 or x.shape[1] != channels or (size is not None and x.shape[2:] != (size, size)):
        want = f"(N, {channels}, {size}, {size})" if size else f"(N, {channels}, H, W)"
        raise ShapeError(f"{stage}: expected input {want}, got {x.shape}")


def forward_front(fe: Params, x: Tensor, training: bool, leaves: Optional[dict] = None) -> Tensor:
    """First conv+BN+ReLU on the client; the result is what goes uplink."""
    cin = fe["fe.conv.weight"].shape[1]
    _expect_channels(x, cin, None, "forward_front")
    if np.ptp(x.data) == 0:
        raise ShapeError("forward_front: constant input batch is degenerate for batch normalisation")
    return _unit(fe, _leaves_for(fe, leaves), "fe", x, training)


def forward_server(server: Params, features: Tensor, training: bool, leaves: Optional[dict] = None) -> Tensor:
    p = _leaves_for(server, leaves)
    depth = sum(1 for k in server if k.startswith("down") and k.endswith(".u1.conv.weight")) + 1
    _expect_channels(features, server["down0.u2.conv.weight"].shape[1], None, "forward_server")
    skips = []
    x = _unit(server, p, "down0.u2", features, training)
    for i in range(1, depth):
        skips.append(x)
        x = maxpool2d(x)
        x = _unit(server, p, f"down{i}.u1", x, training)
        x = _unit(server, p, f"down{i}.u2", x, training)
    skips.append(x)
    x = maxpool2d(x)
    x = _unit(server, p, "bottleneck.u1", x, training)
    x = _unit(server, p, "bottleneck.u2", x, training)
    for j in range(depth):
        x = concat_channels(upsample_nearest2x(x), skips[depth - 1 - j])
        x = _unit(server, p, f"up{j}.u1", x, training)
        x = _unit(server, p, f"up{j}.u2", x, training)
    return x


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax (ties -> lowest index); pixels with non-finite scores fall to class 0."""
    bad = ~np.isfinite(probs).all(axis=1)
    pred = np.argmax(np.where(np.isfinite(probs), probs, -np.inf), axis=1)
    pred[bad] = 0
    return pred.astype(np.int64)


def forward_back(be: Params, features: Tensor, leaves: Optional[dict] = None,
                 predict: bool = True) -> tuple[Tensor, Optional[np.ndarray]]:
    _expect_channels(features, be["be.conv.weight"].shape[1], None, "forward_back")
    p = _leaves_for(be, leaves)
    probs = softmax_channels(conv2d(features, p["be.conv.weight"], p["be.conv.bias"]))
    return probs, (predict_labels(probs.data) if predict else None)


def forward_monolithic(weights: SplitModelWeights, x: Tensor, training: bool,
                       leaves: Optional[dict] = None) -> Tensor:
    """Unsplit forward over the same layer sequence, one graph end to end."""
    fe, server, be = weights.parts()
    leaves = leaves if leaves is not None else {}
    f = forward_front(fe, x, training, leaves.get("front_end"))
    s = forward_server(server, f, training, leaves.get("server"))
    probs, _ = forward_back(be, s, leaves.get("back_end"), predict=False)
    return probs


def one_hot(masks: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) int labels -> (N, C, H, W) float one-hot."""
    return (masks[:, None, :, :] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(np.float64)


class IdentityLink:
    """A link that delivers every payload unchanged."""

    def up(self, kind: str, body):
        return body

    def down(self, kind: str, body):
        return body


def split_eval_probs(weights: SplitModelWeights, images: np.ndarray, link=None) -> np.ndarray:
    """Eval-mode split forward; features cross ``link`` as in training."""
    link = link or IdentityLink()
    fe, server, be = weights.parts()
    f = forward_front(fe, Tensor(images), training=False).data
    f = link.up("features", f)
    s = forward_server(server, Tensor(f), training=False).data
    s = link.down("features", s)
    probs, _ = forward_back(be, Tensor(s), predict=False)
    return probs.data


def per_sample_losses(weights: SplitModelWeights, images: np.ndarray, masks: np.ndarray,
                      link=None, chunk: int = 16) -> np.ndarray:
    """Dice loss of each sample, eval mode, routed through ``link``.

    Samples are forwarded in chunks; eval-mode BN makes every sample
    independent of its chunk-mates, and noise draws are consumed in
    row-major order either way. Non-finite forward results give NaN losses.
    """
    if len(images) == 0:
        raise ValueError("per_sample_losses: empty sample list")
    num_classes = weights.back_end["be.conv.weight"].shape[0]
    out = []
    for start in range(0, len(images), chunk):
        x, m = images[start:start + chunk], masks[start:start + chunk]
        try:
            with np.errstate(all="ignore"):
                probs = split_eval_probs(weights, x, link)
                out.append(dice_per_sample(probs, one_hot(m, num_classes)))
        except NonFiniteError:
            out.append(np.full(len(x), np.nan))
    return np.concatenate(out)


# ------------------------------------------------------------------- adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Params, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Buffers and missing grads are skipped."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None or is_buffer(name):
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def leaf_grads(leaves: dict[str, Tensor]) -> dict:
    return {k: t.grad for k, t in leaves.items()}


# ------------------------------------------------------------- checkpoints

def save_checkpoint(weights: SplitModelWeights, cfg: ArchConfig, path: Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64 blob)."""
    path = Path(path)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for stage, params in zip(("front_end", "server", "back_end"), weights.parts()):
        for name, arr in params.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"stage": stage, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    manifest = {"format_version": CHECKPOINT_FORMAT_VERSION, "architecture": cfg.to_dict(),
                "blob": blob_path.name, "total_bytes": offset, "params": entries}
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path, blob_path


def load_checkpoint(path: Path, cfg: ArchConfig) -> SplitModelWeights:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"checkpoint format_version {manifest.get('format_version')!r} unsupported")
    reference = build_split_unet(cfg, seed=0)
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ConfigError("checkpoint blob size does not match manifest")
    stages: dict[str, Params] = {"front_end": {}, "server": {}, "back_end": {}}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64).reshape(e["shape"])
        stages[e["stage"]][e["name"]] = arr
    loaded = SplitModelWeights(stages["front_end"], stages["server"], stages["back_end"])
    for ref, got in zip(reference.parts(), loaded.parts()):
        if list(ref) != list(got) or any(ref[k].shape != got[k].shape for k in ref):
            raise ConfigError("checkpoint parameters do not match the architecture config")
    return loaded
