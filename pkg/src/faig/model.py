"""Functional SR networks (SRCNN-style and SRResNet without BN).

Parameters live in a :class:`ModelParams` value, an ordered mapping from layer
name to a ``Conv(weight, bias)`` pair. The network is evaluated with
``torch.nn.functional`` so that any point on a path between two parameter
sets can be materialized and differentiated directly.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

ARCHS = ("srcnn9", "srresnet_nobn")


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "srresnet_nobn"
    channels: int = 64
    num_blocks: int = 16
    scale: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.scale not in (1, 2, 4):
            raise ValueError(f"scale must be 1, 2 or 4, got {self.scale}")
        if self.channels < 1 or self.num_blocks < 1:
            raise ValueError("channels and num_blocks must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")

    def to_dict(self) -> dict:
        return dict(arch=self.arch, channels=self.channels, num_blocks=self.num_blocks,
                    scale=self.scale, kernel_size=self.kernel_size)


class Conv(NamedTuple):
    weight: torch.Tensor
    bias: torch.Tensor


class FilterId(NamedTuple):
    layer: str
    out_ch: int
    in_ch: int
    flat_index: int


@dataclass(frozen=True)
class FilterSet:
    ids: tuple[FilterId, ...]
    total: int
    scores: tuple[float, ...] | None = None

    def __post_init__(self):
        if len({f.flat_index for f in self.ids}) != len(self.ids):
            raise ValueError("duplicate filters in FilterSet")

    @property
    def fraction(self) -> float:
        return len(self.ids) / self.total

    @property
    def indices(self) -> np.ndarray:
        return np.array([f.flat_index for f in self.ids], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)


def layer_shapes(spec: ModelSpec) -> list[tuple[str, int, int]]:
    """``(name, out_ch, in_ch)`` for every conv layer, in execution order."""
    c = spec.channels
    if spec.arch == "srcnn9":
        return ([("conv1", c, 3)] + [(f"conv{i}", c, c) for i in range(2, 9)]
                + [("conv9", 3 * spec.scale ** 2, c)])
    shapes = [("head", c, 3)]
    for b in range(spec.num_blocks):
        shapes += [(f"body{b}.conv1", c, c), (f"body{b}.conv2", c, c)]
    shapes.append(("trunk", c, c))
    for u in range(_num_upsamplers(spec.scale)):
        shapes.append((f"up{u}", 4 * c, c))
    shapes.append(("tail", 3, c))
    return shapes


def _num_upsamplers(scale: int) -> int:
    return {1: 0, 2: 1, 4: 2}[scale]


@dataclass
class ModelParams:
    spec: ModelSpec
    layers: dict[str, Conv] = field(default_factory=dict)

    def tensors(self) -> list[torch.Tensor]:
        return [t for conv in self.layers.values() for t in conv]

    def clone(self) -> "ModelParams":
        return ModelParams(self.spec, {k: Conv(v.weight.detach().clone(), v.bias.detach().clone())
                                       for k, v in self.layers.items()})

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.spec, {k: Conv(v.weight.detach().to(dtype), v.bias.detach().to(dtype))
                                       for k, v in self.layers.items()})

    def weight_vector(self) -> torch.Tensor:
        """All conv weights flattened in canonical order; filter ``f`` occupies ``[f*K*K, (f+1)*K*K)``."""
        return torch.cat([c.weight.detach().reshape(-1) for c in self.layers.values()])

    def bias_vector(self) -> torch.Tensor:
        return torch.cat([c.bias.detach().reshape(-1) for c in self.layers.values()])

    def with_weight_vector(self, vec: torch.Tensor) -> "ModelParams":
        out, pos = {}, 0
        for name, conv in self.layers.items():
            n = conv.weight.numel()
            out[name] = Conv(vec[pos:pos + n].reshape(conv.weight.shape).clone(), conv.bias.detach().clone())
            pos += n
        if pos != vec.numel():
            raise ValueError(f"weight vector has {vec.numel()} entries, expected {pos}")
        return ModelParams(self.spec, out)

    def equal(self, other: "ModelParams") -> bool:
        return (self.spec == other.spec and self.layers.keys() == other.layers.keys()
                and all(torch.equal(a, b) for a, b in zip(self.tensors(), other.tensors())))

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for name, conv in self.layers.items():
            h.update(name.encode())
            for t in conv:
                h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


def build(spec: ModelSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> ModelParams:
    """Kaiming (fan-in, ReLU gain) weights and zero biases."""
    gen = torch.Generator().manual_seed(seed)
    k = spec.kernel_size
    layers = {}
    for name, out_ch, in_ch in layer_shapes(spec):
        std = math.sqrt(2.0 / (in_ch * k * k))
        w = torch.randn(out_ch, in_ch, k, k, generator=gen, dtype=torch.float64) * std
        if spec.arch == "srresnet_nobn" and name.endswith("conv2"):
            # keep residual branches small at init so deep stacks stay stable
            w = w * 0.1
        layers[name] = Conv(w.to(dtype), torch.zeros(out_ch, dtype=dtype))
    return ModelParams(spec, layers)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(params.spec, {k: Conv(torch.zeros_like(v.weight), torch.zeros_like(v.bias))
                                     for k, v in params.layers.items()})


def _conv(x: torch.Tensor, conv: Conv) -> torch.Tensor:
    return F.conv2d(x, conv.weight, conv.bias, padding=conv.weight.shape[-1] // 2)


def apply(spec: ModelSpec, layers: Mapping[str, Conv], x: torch.Tensor) -> torch.Tensor:
    """Network evaluation on a batch ``(B, 3, H, W)``; ``layers`` may be any pytree of tensors."""
    if spec.arch == "srcnn9":
        h = x
        for i in range(1, 9):
            h = F.relu(_conv(h, layers[f"conv{i}"]))
        h = _conv(h, layers["conv9"])
        return F.pixel_shuffle(h, spec.scale) if spec.scale > 1 else h
    head = _conv(x, layers["head"])
    h = head
    for b in range(spec.num_blocks):
        h = h + _conv(F.relu(_conv(h, layers[f"body{b}.conv1"])), layers[f"body{b}.conv2"])
    h = _conv(h, layers["trunk"]) + head
    for u in range(_num_upsamplers(spec.scale)):
        h = F.relu(F.pixel_shuffle(_conv(h, layers[f"up{u}"]), 2))
    return _conv(h, layers["tail"])


def as_batch(x) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x
    single = t.dim() == 3
    if single:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != 3:
        raise ValueError(f"expected 3-channel input, got shape {tuple(t.shape)}")
    return t, single


def forward(params: ModelParams, x) -> torch.Tensor:
    """Super-resolve ``x`` of shape ``(3, H, W)`` or ``(B, 3, H, W)``."""
    t, single = as_batch(x)
    dtype = next(iter(params.layers.values())).weight.dtype
    out = apply(params.spec, params.layers, t.to(dtype))
    return out[0] if single else out


def _pair_tensors(samples, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    if not isinstance(samples, (list, tuple)):
        samples = [samples]
    lr = torch.from_numpy(np.stack([s.lr for s in samples])).to(dtype)
    hr = torch.from_numpy(np.stack([s.hr for s in samples])).to(dtype)
    return lr, hr


def loss(params: ModelParams, sample) -> torch.Tensor:
    """Mean squared error between ``forward(params, lr)`` and ``hr``.

    ``sample`` is a PairedSample or a list of same-sized samples (batch mean).
    """
    dtype = next(iter(params.layers.values())).weight.dtype
    lr, hr = _pair_tensors(sample, dtype)
    return F.mse_loss(apply(params.spec, params.layers, lr), hr)


def grad_params(params: ModelParams, sample) -> ModelParams:
    leaves = [t.detach().requires_grad_(True) for t in params.tensors()]
    live = _from_leaves(params, leaves)
    grads = torch.autograd.grad(loss(live, sample), leaves)
    return _from_leaves(params, [g.detach() for g in grads])


def _from_leaves(template: ModelParams, leaves: Sequence[torch.Tensor]) -> ModelParams:
    it = iter(leaves)
    return ModelParams(template.spec, {k: Conv(next(it), next(it)) for k in template.layers})


def enumerate_filters(spec: ModelSpec) -> list[FilterId]:
    out, idx = [], 0
    for name, out_ch, in_ch in layer_shapes(spec):
        for o in range(out_ch):
            for i in range(in_ch):
                out.append(FilterId(name, o, i, idx))
                idx += 1
    return out


def filter_count(spec: ModelSpec) -> int:
    return sum(o * i for _, o, i in layer_shapes(spec))


def filter_layer_offsets(spec: ModelSpec) -> dict[str, tuple[int, int, int]]:
    """layer -> (first flat index, out_ch, in_ch)."""
    offsets, pos = {}, 0
    for name, o, i in layer_shapes(spec):
        offsets[name] = (pos, o, i)
        pos += o * i
    return offsets


def filter_id(spec: ModelSpec, flat_index: int) -> FilterId:
    for name, (start, o, i) in filter_layer_offsets(spec).items():
        if start <= flat_index < start + o * i:
            local = flat_index - start
            return FilterId(name, local // i, local % i, flat_index)
    raise IndexError(f"filter index {flat_index} out of range")


def flat_index(spec: ModelSpec, layer: str, out_ch: int, in_ch: int) -> int:
    offsets = filter_layer_offsets(spec)
    if layer not in offsets:
        raise ValueError(f"no conv layer named {layer!r}")
    start, o, i = offsets[layer]
    if not (0 <= out_ch < o and 0 <= in_ch < i):
        raise ValueError(f"filter ({out_ch}, {in_ch}) outside layer {layer} of shape {o}x{i}")
    return start + out_ch * i + in_ch


def filterset_from_indices(spec: ModelSpec, indices: Iterable[int],
                           scores: Sequence[float] | None = None) -> FilterSet:
    ids = tuple(filter_id(spec, int(i)) for i in indices)
    return FilterSet(ids, filter_count(spec), tuple(float(s) for s in scores) if scores is not None else None)


def filter_mask(spec: ModelSpec, filters: FilterSet | Iterable[int]) -> torch.Tensor:
    """Boolean mask over the flat weight vector selecting the K*K scalars of each filter."""
    idx = filters.indices if isinstance(filters, FilterSet) else np.fromiter(filters, dtype=np.int64)
    sel = torch.zeros(filter_count(spec), dtype=torch.bool)
    sel[torch.from_numpy(idx)] = True
    return sel.repeat_interleave(spec.kernel_size ** 2)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, seed: int | None = None,
                    config_digest: str = "", extra: dict | None = None) -> None:
    """Write an ``.npz`` of little-endian float32 arrays plus a JSON manifest, atomically."""
    arrays = {}
    for name, conv in params.layers.items():
        arrays[f"{name}.weight"] = conv.weight.detach().cpu().numpy().astype("<f4")
        arrays[f"{name}.bias"] = conv.bias.detach().cpu().numpy().astype("<f4")
    manifest = dict(spec=params.spec.to_dict(), seed=seed, config_digest=config_digest,
                    layers=list(params.layers), **(extra or {}))
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(path) as data:
        manifest = json.loads(data["__manifest__"].tobytes().decode())
        spec = ModelSpec(**manifest["spec"])
        layers = {name: Conv(torch.from_numpy(data[f"{name}.weight"].astype(np.float32)),
                             torch.from_numpy(data[f"{name}.bias"].astype(np.float32)))
                  for name in manifest["layers"]}
    return ModelParams(spec, layers), manifest


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
