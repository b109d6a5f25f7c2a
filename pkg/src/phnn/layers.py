"""Hypercomplex layers and the identity-initialized residual wrappers.

Every layer materializes its weight from a :class:`PHWeightSpec` on each
forward pass, so gradients flow to the algebra matrices A_i and the blocks
F_i. Residual gating comes in three modes:

* ``phydi``  - the whole residual branch is multiplied by a learnable scalar
  initialized to 0, making the block the exact identity at construction.
* ``wkp``    - each Kronecker summand inside the layer gets its own learnable
  weight initialized to 1 (weights the algebra components, not the branch;
  no identity at init).
* ``none``   - plain ungated residual.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .algebra import PHWeightSpec, build_conv_kernel, build_dense_H
from .tensor import ShapeError, Tensor

GATE_MODES = ("phydi", "wkp", "none")


class Layer:
    def named_params(self):
        yield from ()

    def ph_specs(self):
        """Every PHWeightSpec reachable from this layer (for parameter accounting)."""
        if hasattr(self, "spec"):
            yield self.spec
        for attr in vars(self).values():
            if isinstance(attr, Layer):
                yield from attr.ph_specs()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class PHM(Layer):
    """Dense hypercomplex layer: y = x H^T + b with H = sum_i A_i (x) F_i."""

    def __init__(self, d_in: int, d_out: int, n: int, rng: np.random.Generator,
                 summand_weights: bool = False, shared_A: Optional[Tensor] = None):
        self.spec = PHWeightSpec.create(n, d_out, d_in, rng)
        self.owns_A = shared_A is None
        if shared_A is not None:
            self.spec = PHWeightSpec(n, shared_A, self.spec.F)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        self.kron_w = Tensor(np.ones(n), requires_grad=True) if summand_weights else None

    @property
    def d_in(self):
        return self.spec.d_in

    @property
    def d_out(self):
        return self.spec.d_out

    def weight(self) -> Tensor:
        return build_dense_H(self.spec, weights=self.kron_w)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.d_in:
            raise ShapeError(f"PHM expects last dim {self.d_in}, got {x.shape}")
        h = self.weight()
        flat = x if x.data.ndim == 2 else T.reshape(x, (-1, self.d_in))
        y = T.add_bias(T.matmul(flat, T.transpose(h, (1, 0))), self.bias)
        if x.data.ndim == 2:
            return y
        return T.reshape(y, x.data.shape[:-1] + (self.d_out,))

    def named_params(self):
        if self.owns_A:
            yield "A", self.spec.A
        yield "F", self.spec.F
        yield "bias", self.bias
        if self.kron_w is not None:
            yield "kron_w", self.kron_w


class PHC(Layer):
    """Convolutional hypercomplex layer; the Kronecker expansion acts on channels."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, n: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 summand_weights: bool = False, shared_A: Optional[Tensor] = None):
        self.spec = PHWeightSpec.create(n, c_out, c_in, rng, kernel_size=kernel_size)
        self.owns_A = shared_A is None
        if shared_A is not None:
            self.spec = PHWeightSpec(n, shared_A, self.spec.F)
        self.stride = stride
        self.padding = padding
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.kron_w = Tensor(np.ones(n), requires_grad=True) if summand_weights else None

    @property
    def c_in(self):
        return self.spec.d_in

    @property
    def c_out(self):
        return self.spec.d_out

    def kernel(self) -> Tensor:
        return build_conv_kernel(self.spec, weights=self.kron_w)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.c_in:
            raise ShapeError(f"PHC expects {self.c_in} channels, got {x.shape}")
        return T.add_bias(T.conv2d(x, self.kernel(), self.stride, self.padding), self.bias)

    def named_params(self):
        if self.owns_A:
            yield "A", self.spec.A
        yield "F", self.spec.F
        yield "bias", self.bias
        if self.kron_w is not None:
            yield "kron_w", self.kron_w


class GatedResidual(Layer):
    """x + alpha * inner(x), with the gate semantics of the chosen mode.

    For ``phydi`` the scalar gate starts at 0 so the block is the exact
    identity; for ``wkp``/``none`` the branch is added ungated (wkp layers
    carry their per-summand weights internally).
    """

    def __init__(self, inner: Layer, gate_mode: str = "phydi"):
        if gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
        self.inner = inner
        self.gate_mode = gate_mode
        self.alpha = Tensor(0.0, requires_grad=True) if gate_mode == "phydi" else None

    def forward(self, x: Tensor) -> Tensor:
        branch = self.inner(x)
        if branch.data.shape != x.data.shape:
            raise ShapeError(
                f"residual branch changed shape {x.shape} -> {branch.shape}")
        if self.alpha is not None:
            branch = T.scale(branch, self.alpha)
        return T.add(x, branch)

    def named_params(self):
        for name, p in self.inner.named_params():
            yield f"inner.{name}", p
        if self.alpha is not None:
            yield "alpha", self.alpha


class LayerNorm(Layer):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def named_params(self):
        yield "gain", self.gain
        yield "bias", self.bias


class BasicBlock(Layer):
    """Two 3x3 hypercomplex convs inside a residual; projection shortcut when
    the block downsamples or changes width (the gate never touches the shortcut)."""

    def __init__(self, c_in: int, c_out: int, n: int, rng: np.random.Generator,
                 stride: int = 1, gate_mode: str = "none",
                 shared_A: Optional[Tensor] = None):
        if gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
        wkp = gate_mode == "wkp"
        self.conv1 = PHC(c_in, c_out, 3, n, rng, stride=stride, padding=1,
                         summand_weights=wkp, shared_A=shared_A)
        self.conv2 = PHC(c_out, c_out, 3, n, rng, stride=1, padding=1,
                         summand_weights=wkp, shared_A=shared_A)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = PHC(c_in, c_out, 1, n, rng, stride=stride, padding=0,
                            shared_A=shared_A)
        self.gate_mode = gate_mode
        self.alpha = Tensor(0.0, requires_grad=True) if gate_mode == "phydi" else None

    def forward(self, x: Tensor) -> Tensor:
        branch = self.conv2(T.relu(self.conv1(x)))
        shortcut = self.proj(x) if self.proj is not None else x
        if branch.data.shape != shortcut.data.shape:
            raise ShapeError(f"shortcut {shortcut.shape} vs branch {branch.shape}")
        if self.alpha is not None:
            branch = T.scale(branch, self.alpha)
        return T.add(shortcut, branch)

    def named_params(self):
        for tag, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("proj", self.proj)):
            if layer is None:
                continue
            for name, p in layer.named_params():
                yield f"{tag}.{name}", p
        if self.alpha is not None:
            yield "alpha", self.alpha


class BottleneckBlock(Layer):
    """1x1 reduce, 3x3, 1x1 expand (x4); three convs per block."""

    expansion = 4

    def __init__(self, c_in: int, c_mid: int, n: int, rng: np.random.Generator,
                 stride: int = 1, gate_mode: str = "none"):
        if gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
        wkp = gate_mode == "wkp"
        c_out = c_mid * self.expansion
        self.conv1 = PHC(c_in, c_mid, 1, n, rng, summand_weights=wkp)
        self.conv2 = PHC(c_mid, c_mid, 3, n, rng, stride=stride, padding=1, summand_weights=wkp)
        self.conv3 = PHC(c_mid, c_out, 1, n, rng, summand_weights=wkp)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = PHC(c_in, c_out, 1, n, rng, stride=stride, padding=0)
        self.gate_mode = gate_mode
        self.alpha = Tensor(0.0, requires_grad=True) if gate_mode == "phydi" else None
        self.c_out = c_out

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        branch = self.conv3(h)
        shortcut = self.proj(x) if self.proj is not None else x
        if branch.data.shape != shortcut.data.shape:
            raise ShapeError(f"shortcut {shortcut.shape} vs branch {branch.shape}")
        if self.alpha is not None:
            branch = T.scale(branch, self.alpha)
        return T.add(shortcut, branch)

    def named_params(self):
        for tag, layer in (("conv1", self.conv1), ("conv2", self.conv2),
                           ("conv3", self.conv3), ("proj", self.proj)):
            if layer is None:
                continue
            for name, p in layer.named_params():
                yield f"{tag}.{name}", p
        if self.alpha is not None:
            yield "alpha", self.alpha


_MASK_CACHE: dict = {}


def causal_mask(t: int) -> np.ndarray:
    """Additive attention mask: ~-inf above the diagonal (realized as -1e30
    to keep float64 softmax free of NaN)."""
    if t not in _MASK_CACHE:
        _MASK_CACHE[t] = np.triu(np.full((t, t), -1e30), k=1)
    return _MASK_CACHE[t]


class PHAttention(Layer):
    """Multi-head scaled dot-product attention with all four projections
    hypercomplex."""

    def __init__(self, d: int, heads: int, n: int, rng: np.random.Generator,
                 shared_A: Optional[Tensor] = None):
        if d % heads:
            raise ShapeError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.proj_q = PHM(d, d, n, rng, shared_A=shared_A)
        self.proj_k = PHM(d, d, n, rng, shared_A=shared_A)
        self.proj_v = PHM(d, d, n, rng, shared_A=shared_A)
        self.proj_o = PHM(d, d, n, rng, shared_A=shared_A)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[2] != self.d:
            raise ShapeError(f"attention expects (batch, seq, {self.d}), got {x.shape}")
        B, S, d = x.data.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return T.transpose(T.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

        q = split(self.proj_q(x))
        k = split(self.proj_k(x))
        v = split(self.proj_v(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.scale(scores, Tensor(1.0 / np.sqrt(dh)))
        if mask is not None:
            scores = T.add_const(scores, mask[None, None, :, :])
        probs = T.softmax(scores, axis=-1)
        ctx = T.matmul(probs, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
        return self.proj_o(merged)

    def named_params(self):
        for tag, layer in (("q", self.proj_q), ("k", self.proj_k),
                           ("v", self.proj_v), ("o", self.proj_o)):
            for name, p in layer.named_params():
                yield f"{tag}.{name}", p


TRANSFORMER_VARIANTS = ("postnorm", "prenorm", "phydi")


class TransformerLayer(Layer):
    """One encoder layer in one of three arrangements.

    postnorm:  x' = LN2(x + FFN(LN1(x + Att(x))))   (both residuals from x)
    prenorm:   x' = x + Att(LN1(x));  x'' = x' + FFN(LN2(x'))
    phydi:     x' = x + a * FFN(x + a * Att(x)), no normalization; the single
               learnable gate a starts at 0, so the layer is the identity.

    The feed-forward sub-layer is a single hypercomplex dense map d -> d.
    """

    def __init__(self, d: int, heads: int, n: int, variant: str,
                 rng: np.random.Generator, shared_A: Optional[Tensor] = None):
        if variant not in TRANSFORMER_VARIANTS:
            raise ValueError(f"variant must be one of {TRANSFORMER_VARIANTS}, got {variant!r}")
        self.variant = variant
        self.attn = PHAttention(d, heads, n, rng, shared_A=shared_A)
        self.ffn = PHM(d, d, n, rng, shared_A=shared_A)
        self.norm1 = LayerNorm(d) if variant != "phydi" else None
        self.norm2 = LayerNorm(d) if variant != "phydi" else None
        self.alpha = Tensor(0.0, requires_grad=True) if variant == "phydi" else None

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if x.data.ndim != 3:
            raise ShapeError(f"transformer layer expects rank-3 input, got {x.shape}")
        if self.variant == "postnorm":
            t = self.norm1(T.add(x, self.attn(x, mask)))
            return self.norm2(T.add(x, self.ffn(t)))
        if self.variant == "prenorm":
            x = T.add(x, self.attn(self.norm1(x), mask))
            return T.add(x, self.ffn(self.norm2(x)))
        inner = T.add(x, T.scale(self.attn(x, mask), self.alpha))
        return T.add(x, T.scale(self.ffn(inner), self.alpha))

    def named_params(self):
        for name, p in self.attn.named_params():
            yield f"attn.{name}", p
        for name, p in self.ffn.named_params():
            yield f"ffn.{name}", p
        if self.norm1 is not None:
            for name, p in self.norm1.named_params():
                yield f"norm1.{name}", p
            for name, p in self.norm2.named_params():
                yield f"norm2.{name}", p
        if self.alpha is not None:
            yield "alpha", self.alpha


class Embedding(Layer):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator, scale: float = 0.1):
        self.weight = Tensor(rng.normal(0.0, scale, size=(vocab, d)), requires_grad=True)

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.weight, ids)

    def named_params(self):
        yield "weight", self.weight


class Dense(Layer):
    """Plain real-valued affine map, used for vocabulary heads."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        b = np.sqrt(6.0 / (d_in + d_out))
        self.weight = Tensor(rng.uniform(-b, b, size=(d_out, d_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        d_in = self.weight.data.shape[1]
        flat = x if x.data.ndim == 2 else T.reshape(x, (-1, d_in))
        y = T.add_bias(T.matmul(flat, T.transpose(self.weight, (1, 0))), self.bias)
        if x.data.ndim == 2:
            return y
        return T.reshape(y, x.data.shape[:-1] + (self.weight.data.shape[0],))

    def named_params(self):
        yield "weight", self.weight
        yield "bias", self.bias


def sinusoidal_positions(seq_len: int, d: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (seq_len, d); d must be even."""
    if d % 2:
        raise ShapeError(f"positional table needs an even dim, got {d}")
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((seq_len, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table
