"""Non-local self-attention ("relational") block.

Positions of an NCHW feature map are flattened row-major into ``H*W``
tokens.  Queries and keys come from 1x1 convolutions with half the input
channels; attention is the row softmax of ``q_i . k_j``; the attended values
go through an output 1x1 embedding and are added back to the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import softmax_rows
from .tensor import Tensor, as_tensor, matmul, reshape, transpose


@dataclass
class RelationalParams:
    wq: Tensor  # (C/2, C)
    wk: Tensor  # (C/2, C)
    wv: Tensor  # (Cv, C)
    we: Tensor  # (C, Cv)

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.we]


def _tokens(u: Tensor, w: Tensor) -> Tensor:
    """1x1 conv without bias, returned as tokens of shape (N, H*W, out)."""
    n, c, h, wd = u.shape
    flat = reshape(u, (n, c, h * wd))                # N, C, P
    return transpose(matmul(w, flat), (0, 2, 1))     # N, P, out


def _check(u: Tensor, wq: Tensor, wk: Tensor) -> None:
    if u.ndim != 4:
        raise ValueError(f"relational block input must be NCHW, got {u.shape}")
    c = u.shape[1]
    if c % 2:
        raise ValueError(f"relational block needs an even channel count, got {c}")
    for name, w in (("wq", wq), ("wk", wk)):
        if w.shape != (c // 2, c):
            raise ValueError(f"{name} must have shape {(c // 2, c)}, got {w.shape}")


def attention_weights(u, wq, wk) -> Tensor:
    """Row-stochastic ``(N, P, P)`` matrix ``softmax_j(q(u_i) . k(u_j))``."""
    u, wq, wk = as_tensor(u), as_tensor(wq), as_tensor(wk)
    _check(u, wq, wk)
    q = _tokens(u, wq)
    k = _tokens(u, wk)
    return softmax_rows(matmul(q, transpose(k, (0, 2, 1))))


def non_local_mean(u, wq, wk, wv) -> Tensor:
    """Attention-weighted average of ``v(u_j)``, returned as ``(N, Cv, H, W)``."""
    u, wv = as_tensor(u), as_tensor(wv)
    attn = attention_weights(u, wq, wk)
    v = _tokens(u, wv)                                # N, P, Cv
    n, _, h, w = u.shape
    y = matmul(attn, v)                               # N, P, Cv
    return reshape(transpose(y, (0, 2, 1)), (n, wv.shape[0], h, w))


def relational_block_forward(u, p: RelationalParams) -> Tensor:
    """``e(non_local_mean(u)) + u``; output shape equals input shape."""
    u = as_tensor(u)
    if p.we.shape[0] != u.shape[1]:
        raise ValueError(
            f"output embedding has {p.we.shape[0]} channels but the block input has {u.shape[1]}"
        )
    y = non_local_mean(u, p.wq, p.wk, p.wv)
    n, cv, h, w = y.shape
    e = matmul(p.we, reshape(y, (n, cv, h * w)))
    return reshape(e, u.shape) + u


def init_relational_params(channels: int, rng: np.random.Generator,
                           value_channels: int | None = None) -> RelationalParams:
    """Fan-in uniform init for q, k, v; the output embedding starts at zero."""
    if channels % 2:
        raise ValueError(f"relational block needs an even channel count, got {channels}")
    half = channels // 2
    cv = half if value_channels is None else value_channels
    bound = np.sqrt(3.0 / channels)

    def u(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return RelationalParams(
        wq=u((half, channels)),
        wk=u((half, channels)),
        wv=u((cv, channels)),
        we=Tensor(np.zeros((channels, cv)), requires_grad=True),
    )
