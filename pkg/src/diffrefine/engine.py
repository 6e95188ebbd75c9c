"""Thin training engine over torch: layers, losses, optimizer, finite-difference
gradient checks and a small versioned checkpoint format.
"""
from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgument, InvalidData

CHECKPOINT_MAGIC = b"GCKP"
CHECKPOINT_VERSION = 1


def configure(threads: int = 1) -> None:
    """Pin torch to a fixed thread count with deterministic kernels."""
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch RNG state without disturbing the caller's."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def conv2d_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Zero-padded 2D cross-correlation on a ``(batch, channels, height, width)`` tensor."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgument("conv2d expects 4D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise InvalidArgument(f"channel mismatch: input {x.shape[1]}, kernel {weight.shape[1]}")
    if weight.shape[2] % 2 == 0 or weight.shape[3] % 2 == 0:
        raise InvalidArgument(f"kernel sizes must be odd, got {tuple(weight.shape[2:])}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def as_distribution(h: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-sample shift-by-min and normalize over the spatial dims (differentiable)."""
    flat = h.flatten(1)
    flat = flat - flat.min(dim=1, keepdim=True).values
    return flat / (flat.sum(dim=1, keepdim=True) + eps)


def kl_consistency(target: torch.Tensor, pred: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Mean over the batch of KL(target || pred) between normalized heatmaps."""
    p = as_distribution(target, eps)
    q = as_distribution(pred, eps)
    return torch.sum(p * (torch.log(p + eps) - torch.log(q + eps)), dim=1).mean()


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def finite_difference_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor,
                           step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` with respect to ``tensor`` (in place perturbation)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def gradient_check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                   step: float = 1e-5, atol: float = 1e-8) -> dict[str, float]:
    """Compare autograd against central differences; returns max relative error per tensor.

    Relative error is ``|a - n| / max(|a|, |n|, atol)`` elementwise, so tiny
    gradients do not blow the ratio up.
    """
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise InvalidArgument("gradient checks need float64 tensors")
        t.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    errors = {}
    for (name, t), a in zip(tensors.items(), analytic):
        if a is None:
            a = torch.zeros_like(t)
        n = finite_difference_grad(fn, t, step)
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, atol))
        errors[name] = float(((a - n).abs() / denom).max())
    return errors


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, state: dict[str, np.ndarray | torch.Tensor],
                    meta: dict | None = None) -> None:
    """Write ``state`` as name-keyed little-endian float32 records plus a JSON trailer."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(state))
    for name in sorted(state):
        arr = state[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        buf += struct.pack("<H", len(key)) + key
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    trailer = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(trailer)) + trailer
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidData(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidData(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    (mlen,) = struct.unpack_from("<I", data, pos)
    meta = json.loads(data[pos + 4:pos + 4 + mlen].decode("utf-8"))
    return state, meta


def module_state(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_state(module: nn.Module, state: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    if set(own) != set(state):
        raise InvalidData(f"checkpoint keys do not match model: {sorted(set(own) ^ set(state))}")
    module.load_state_dict({k: torch.as_tensor(state[k], dtype=own[k].dtype) for k in own})
