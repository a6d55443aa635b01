"""Minimal layers, an Adam optimiser and checkpoint files on top of ``autodiff``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Value


def parameter(data, dtype=None) -> Value:
    return Value(data, requires_grad=True, dtype=dtype)


class Module:
    """Container whose trainable parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Value):
                if attr.requires_grad:
                    yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(full + ".")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Value) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> dict[str, Value]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, scale: float = 1.0):
        std = 0.0 if zero else scale / np.sqrt(n_in)
        self.weight = parameter(rng.normal(0.0, 1.0, (n_in, n_out)) * std)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x) -> Value:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Stack of linear layers with GELU between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False,
                 final_act: bool = False):
        self.layers = [Linear(a, b, rng, zero=zero_last and i == len(dims) - 2)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.final_act = final_act

    def forward(self, x) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_act:
                x = ad.gelu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x) -> Value:
        return ad.layernorm(x) * self.gamma + self.beta


class Attention(Module):
    """Multi-head scaled dot-product attention with an output projection.

    ``forward(xq, xkv)`` takes ``(..., Nq, D)`` queries and ``(..., Nk, D)``
    keys/values and returns ``(..., Nq, D)`` (no residual).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_out: bool = True):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng, zero=zero_out)

    def _split(self, x: Value) -> Value:
        *lead, n, d = x.shape
        h = self.heads
        x = ad.reshape(x, tuple(lead) + (n, h, d // h))
        nd = len(lead)
        return ad.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    def weights(self, xq, xkv) -> Value:
        q, k = self._split(self.wq(xq)), self._split(self.wk(xkv))
        dk = q.shape[-1]
        return ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk)), axis=-1)

    def forward(self, xq, xkv) -> Value:
        a = self.weights(xq, xkv)
        o = ad.matmul(a, self._split(self.wv(xkv)))
        nd = o.ndim - 3
        o = ad.transpose(o, tuple(range(nd)) + (nd + 1, nd, nd + 2))
        o = ad.reshape(o, o.shape[:-2] + (o.shape[-2] * o.shape[-1],))
        return self.out(o)


class FFN(Module):
    """Pre-norm feed-forward block with residual."""

    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 2):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng, zero=True)

    def forward(self, x) -> Value:
        return x + self.fc2(ad.gelu(self.fc1(self.norm(x))))


def clip_grad_norm(params: dict[str, Value], max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return total


class Adam:
    def __init__(self, params: dict[str, Value], lr: float = 1e-3, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.wd:
                g = g + self.wd * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def save_checkpoint(path: str | Path, params: dict[str, Value], extra: dict | None = None) -> None:
    """Write ``<path>.bin`` (concatenated float64 tensors) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"dtype": "float64-le", "tensors": entries, "extra": extra or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out, manifest.get("extra", {})


def load_into(params: dict[str, Value], arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
        p.data = arrays[k].astype(p.dtype)
