"""Construction of hypercomplex layer weights as sums of Kronecker products.

A weight matrix of shape (d_out, d_in) is assembled as

    H = sum_i  A_i (x) F_i,        i = 1..n

where the n learnable (n x n) matrices ``A_i`` encode the multiplication
rules of the underlying algebra and the learnable blocks ``F_i`` carry the
actual parameters. Convolutional filter banks use the same expansion on the
channel dimensions only, independently per spatial offset. The construction
cuts the parameter count to roughly 1/n of a dense layer of equal shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, record_op


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two rank-2 tensors, differentiable in both."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"kron needs rank-2 operands, got {a.shape} and {b.shape}")
    m, p = a.data.shape
    q, r = b.data.shape
    out = Tensor(np.kron(a.data, b.data))

    def bwd(dout):
        d4 = dout.reshape(m, q, p, r)
        da = np.einsum("ikjl,kl->ij", d4, b.data)
        db = np.einsum("ikjl,ij->kl", d4, a.data)
        return da, db

    record_op(out, (a, b), bwd)
    return out


@dataclass
class ParamCount:
    ph_params: int
    dense_equivalent: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.ph_params, self.dense_equivalent)


class PHWeightSpec:
    """The (n, A, F) bundle behind one hypercomplex layer.

    ``A`` is stacked as a single (n, n, n) tensor (one n x n matrix per
    summand) and ``F`` as (n, d_out/n, d_in/n) for dense layers or
    (n, c_out/n, c_in/n, k, k) for convolutions. Both are learnable.
    """

    def __init__(self, n: int, A: Tensor, F: Tensor):
        if n < 1:
            raise ShapeError(f"algebra dimension n must be >= 1, got {n}")
        if A.data.shape != (n, n, n):
            raise ShapeError(f"A must be stacked (n, n, n) = ({n},{n},{n}), got {A.shape}")
        if F.data.ndim not in (3, 5) or F.data.shape[0] != n:
            raise ShapeError(f"F must be (n, d_out/n, d_in/n[, k, k]), got {F.shape}")
        if F.data.ndim == 5 and F.data.shape[3] != F.data.shape[4]:
            raise ShapeError(f"conv blocks need square kernels, got {F.shape}")
        self.n = n
        self.A = A
        self.F = F

    @property
    def conv(self) -> bool:
        return self.F.data.ndim == 5

    @property
    def d_out(self) -> int:
        return self.n * self.F.data.shape[1]

    @property
    def d_in(self) -> int:
        return self.n * self.F.data.shape[2]

    @property
    def kernel_size(self) -> int:
        return self.F.data.shape[3] if self.conv else 1

    @classmethod
    def create(cls, n: int, d_out: int, d_in: int, rng: np.random.Generator,
               kernel_size: Optional[int] = None) -> "PHWeightSpec":
        """Fresh learnable spec with Glorot-matched initialization.

        F blocks are uniform in +-sqrt(6/(fan_in+fan_out))*sqrt(n) and A
        entries uniform in +-1/sqrt(n), keeping Var(H) close to a Glorot
        dense layer so the ungated baseline is a fair comparator.
        """
        if d_out % n or d_in % n:
            raise ShapeError(
                f"dims must be divisible by n={n}: d_out={d_out}, d_in={d_in}")
        k = kernel_size
        if k is None:
            fan_in, fan_out = d_in, d_out
            fshape = (n, d_out // n, d_in // n)
        else:
            fan_in, fan_out = d_in * k * k, d_out * k * k
            fshape = (n, d_out // n, d_in // n, k, k)
        fb = np.sqrt(6.0 / (fan_in + fan_out)) * np.sqrt(n)
        ab = 1.0 / np.sqrt(n)
        A = Tensor(rng.uniform(-ab, ab, size=(n, n, n)), requires_grad=True)
        F = Tensor(rng.uniform(-fb, fb, size=fshape), requires_grad=True)
        return cls(n, A, F)


def _sum_kron(A: Tensor, F: Tensor, weights: Optional[Tensor]):
    """Fused sum_i w_i * kron(A_i, F_i[..., u, v]) over all spatial offsets.

    One tape node instead of n*k*k small ones; the expansion acts on channel
    dimensions only.
    """
    n = A.data.shape[0]
    conv = F.data.ndim == 5
    w = weights.data if weights is not None else None
    if weights is not None and weights.data.shape != (n,):
        raise ShapeError(f"summand weights must have shape ({n},), got {weights.shape}")

    if conv:
        sub = "sab,scduv->acbduv"
        dsub_a = "acbduv,scduv->sab"
        dsub_f = "acbduv,sab->scduv"
        dsub_w = "acbduv,sab,scduv->s"
        wsub = "s,sab,scduv->acbduv"
    else:
        sub = "sab,scd->acbd"
        dsub_a = "acbd,scd->sab"
        dsub_f = "acbd,sab->scd"
        dsub_w = "acbd,sab,scd->s"
        wsub = "s,sab,scd->acbd"

    if w is None:
        full = np.einsum(sub, A.data, F.data)
    else:
        full = np.einsum(wsub, w, A.data, F.data)
    bo, bi = F.data.shape[1], F.data.shape[2]
    if conv:
        k = F.data.shape[3]
        out_shape = (n * bo, n * bi, k, k)
        expand_shape = (n, bo, n, bi, k, k)
    else:
        out_shape = (n * bo, n * bi)
        expand_shape = (n, bo, n, bi)
    out = Tensor(full.reshape(out_shape))

    inputs = (A, F) if weights is None else (A, F, weights)

    def bwd(dout):
        d = dout.reshape(expand_shape)
        if w is None:
            da = np.einsum(dsub_a, d, F.data)
            df = np.einsum(dsub_f, d, A.data)
            return da, df
        da = np.einsum(dsub_a, d, F.data) * w[:, None, None]
        fscale = w.reshape((n,) + (1,) * (F.data.ndim - 1))
        df = np.einsum(dsub_f, d, A.data) * fscale
        dw = np.einsum(dsub_w, d, A.data, F.data)
        return da, df, dw

    record_op(out, inputs, bwd)
    return out


def build_dense_H(spec: PHWeightSpec, weights: Optional[Tensor] = None) -> Tensor:
    """Materialize the (d_out, d_in) weight matrix sum_i A_i (x) F_i.

    ``weights`` optionally scales each Kronecker summand (the weighted
    variant; ones recover the plain sum exactly).
    """
    if spec.conv:
        raise ShapeError("spec is convolutional; use build_conv_kernel")
    return _sum_kron(spec.A, spec.F, weights)


def build_conv_kernel(spec: PHWeightSpec, weights: Optional[Tensor] = None) -> Tensor:
    """Materialize a (c_out, c_in, k, k) filter bank.

    Per spatial offset (u, v) the channel matrix equals
    sum_i A_i (x) F_i[:, :, u, v]; there is no mixing across offsets.
    """
    if not spec.conv:
        raise ShapeError("spec is dense; use build_dense_H")
    return _sum_kron(spec.A, spec.F, weights)


def count_params(spec: PHWeightSpec) -> ParamCount:
    """Learnable scalars in the spec vs. a dense layer of identical shape."""
    n, k = spec.n, spec.kernel_size
    ph = n * (spec.d_out // n) * (spec.d_in // n) * k * k + n * n * n
    dense = spec.d_out * spec.d_in * k * k
    return ParamCount(ph_params=ph, dense_equivalent=dense)
