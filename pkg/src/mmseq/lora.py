"""Low-rank adapters for ``x @ W + b`` linear maps.

Weights are stored input-major (``W`` is ``[in, out]``); the adapter keeps
the usual ``A: [r, in]``, ``B: [out, r]`` so the delta applied to a row
vector is ``(alpha / r) * x @ A.T @ B.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import Tensor, matmul, parameter, scale, transpose


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} must lie in [1, min(in={d_in}, out={d_out})]")
        A = parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (rank, d_in)))
        B = parameter(np.zeros((d_out, rank)))
        return cls(A, B, float(alpha))

    def delta(self, x: Tensor) -> Tensor:
        return scale(matmul(matmul(x, transpose(self.A)), transpose(self.B)), self.scaling)

    def delta_weight(self) -> np.ndarray:
        """Dense ``[in, out]`` update equivalent to this adapter."""
        return self.scaling * (self.B.data @ self.A.data).T


def lora_forward(x: Tensor, weight: Tensor, bias: Tensor | None, adapter: LoraAdapter | None) -> Tensor:
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    if adapter is not None:
        y = y + adapter.delta(x)
    return y


def merge_lora(weight, adapter: LoraAdapter) -> np.ndarray:
    """W' = W + (alpha/r) (B A)^T in the input-major layout."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=np.float64)
    return w + adapter.delta_weight()
