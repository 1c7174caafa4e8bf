"""Parameter containers shared by the attention blocks and the denoisers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io
from .tensor import Tensor, matmul


class Module:
    """Holds named parameter tensors and child modules in insertion order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def param(array) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    scale = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return param(rng.normal(0.0, scale, size=(fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return param(np.zeros(shape))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def save_checkpoint(directory, state: dict[str, np.ndarray], precision: str = "f64") -> None:
    """Write every array as a PMV1 file plus ``manifest.txt`` (name file per line)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(state.items()):
        fname = f"p{i:04d}.pmv"
        io.save_pmv(d / fname, arr, precision)
        lines.append(f"{name} {fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    state = {}
    for line in (d / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, fname = line.split()
        state[name] = io.load_pmv(d / fname)
    return state
