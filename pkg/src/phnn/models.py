"""Model assembly: residual conv nets and transformer encoders, plus checkpoints.

Architectures follow the standard residual-network shapes (basic blocks for
depth 18, bottlenecks for 50/152, stage counts [2,2,2,2]/[3,4,6,3]/[3,8,36,3])
with a small-image 3x3 stem and no max-pool. Desk-scale variants override the
stage counts and channel schedule explicitly. Transformer models are causal
encoder-only language models with sinusoidal positions.

Checkpoints are little-endian binary blobs: magic, version, a length-prefixed
JSON header (config + name/shape/offset table), then raw float64 data. Round
trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .algebra import ParamCount, count_params
from .layers import (
    BasicBlock,
    BottleneckBlock,
    Dense,
    Embedding,
    PHC,
    PHM,
    TransformerLayer,
    causal_mask,
    sinusoidal_positions,
)
from .tensor import ShapeError, Tensor

RESNET_STAGES = {18: (2, 2, 2, 2), 50: (3, 4, 6, 3), 152: (3, 8, 36, 3)}
RESNET_VARIANTS = ("standard", "wkp", "phydi")
TRANSFORMER_VARIANTS = ("postnorm", "prenorm", "phydi")

CHECKPOINT_MAGIC = b"PHNN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    family: str
    n: int = 2
    init_variant: str = "standard"
    share_A: bool = False
    # residual-net fields
    depth: Optional[int] = None
    blocks: Optional[tuple] = None
    widths: tuple = (64, 128, 256, 512)
    bottleneck: Optional[bool] = None
    num_classes: int = 10
    in_channels: int = 3
    stem_stride: int = 1
    # transformer fields
    d_model: int = 64
    heads: int = 4
    vocab_size: int = 2000
    seq_len: int = 64
    tie_output: bool = False

    def __post_init__(self):
        if self.family not in ("phresnet", "phtransformer"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.family == "phresnet":
            if self.init_variant not in RESNET_VARIANTS:
                raise ValueError(
                    f"resnet variant must be one of {RESNET_VARIANTS}, got {self.init_variant!r}")
            if self.blocks is None:
                if self.depth not in RESNET_STAGES:
                    raise ValueError(
                        f"depth {self.depth} has no standard stage counts; "
                        f"pass explicit blocks for desk profiles")
                self.blocks = RESNET_STAGES[self.depth]
            self.blocks = tuple(int(b) for b in self.blocks)
            if len(self.blocks) != 4 or any(b < 0 for b in self.blocks):
                raise ValueError(f"blocks must be 4 non-negative counts, got {self.blocks}")
            if self.bottleneck is None:
                self.bottleneck = self.depth in (50, 152)
            self.widths = tuple(int(w) for w in self.widths)
            for w in self.widths:
                if w % self.n:
                    raise ValueError(f"width {w} not divisible by n={self.n}")
        else:
            if self.init_variant not in TRANSFORMER_VARIANTS:
                raise ValueError(
                    f"transformer variant must be one of {TRANSFORMER_VARIANTS}, "
                    f"got {self.init_variant!r}")
            if self.depth is None or self.depth < 0:
                raise ValueError(f"transformer needs a non-negative depth, got {self.depth}")
            if self.d_model % self.n:
                raise ValueError(f"d_model {self.d_model} not divisible by n={self.n}")
            if self.d_model % self.heads:
                raise ValueError(f"d_model {self.d_model} not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("blocks", "widths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _pad_to_multiple(x: int, n: int) -> int:
    return ((x + n - 1) // n) * n


class Model:
    """A built network: ordered layers plus a flat name -> tensor registry."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.registry: dict[str, Tensor] = {}
        self._ph_specs = []          # specs of every hypercomplex layer, for counting

    def _register(self, prefix: str, layer):
        for name, p in layer.named_params():
            full = f"{prefix}.{name}"
            if full in self.registry:
                raise ValueError(f"duplicate parameter name {full}")
            self.registry[full] = p
        self._ph_specs.extend(layer.ph_specs())

    def parameters(self):
        return self.registry.items()

    def param_count(self) -> int:
        seen, total = set(), 0
        for p in self.registry.values():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.data.size
        return total

    def ph_ratio(self) -> ParamCount:
        """Aggregate parameters vs a dense-equivalent network.

        Hypercomplex layers contribute their Kronecker factorization count on
        one side and a full dense weight on the other; everything else (biases,
        gates, norms, embeddings, plain heads) counts equally on both.
        """
        ph = dense = 0
        spec_tensors = set()
        counted_A = set()
        for spec in self._ph_specs:
            pc = count_params(spec)
            dense += pc.dense_equivalent
            ph += pc.ph_params - spec.n ** 3
            if id(spec.A) not in counted_A:        # shared algebra counts once
                counted_A.add(id(spec.A))
                ph += spec.n ** 3
            spec_tensors.add(id(spec.A))
            spec_tensors.add(id(spec.F))
        seen = set(spec_tensors)
        for p in self.registry.values():
            if id(p) in seen:
                continue
            seen.add(id(p))
            ph += p.data.size
            dense += p.data.size
        return ParamCount(ph_params=ph, dense_equivalent=dense)

    def gate_values(self) -> list:
        """(name, value) for every residual gate and summand-weight vector."""
        out = []
        for name, p in self.registry.items():
            if name.endswith("alpha"):
                out.append((name, float(p.data)))
            elif name.endswith("kron_w"):
                out.append((name, [float(v) for v in p.data]))
        return out


class ResNetModel(Model):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        n = config.n
        gate = {"standard": "none", "wkp": "wkp", "phydi": "phydi"}[config.init_variant]
        self.shared_A = None
        if config.share_A:
            ab = 1.0 / np.sqrt(n)
            self.shared_A = Tensor(rng.uniform(-ab, ab, size=(n, n, n)), requires_grad=True)
            self.registry["shared.A"] = self.shared_A

        self.stem_in = _pad_to_multiple(config.in_channels, n)
        self.stem = PHC(self.stem_in, config.widths[0], 3, n, rng,
                        stride=config.stem_stride, padding=1, shared_A=self.shared_A)
        self._register("stem", self.stem)

        expansion = BottleneckBlock.expansion if config.bottleneck else 1
        self.stages: list[list] = []
        c_prev = config.widths[0]
        for s, (count, width) in enumerate(zip(config.blocks, config.widths)):
            stage = []
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                if config.bottleneck:
                    block = BottleneckBlock(c_prev, width, n, rng, stride=stride, gate_mode=gate)
                    c_prev = width * expansion
                else:
                    block = BasicBlock(c_prev, width, n, rng, stride=stride, gate_mode=gate)
                    c_prev = width
                self._register(f"stage{s}.block{b}", block)
                stage.append(block)
            self.stages.append(stage)

        self.feature_dim = c_prev
        self.head_out = _pad_to_multiple(config.num_classes, n)
        self.head = PHM(self.feature_dim, self.head_out, n, rng, shared_A=self.shared_A)
        self._register("head", self.head)

    def _trunk(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"expected NCHW images, got {x.shape}")
        if x.data.shape[1] != self.stem_in:
            x = T.pad_channels(x, self.stem_in)
        h = T.relu(self.stem(x))
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return h

    def pre_head(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        return T.global_avg_pool(self._trunk(x))

    def forward(self, images) -> Tensor:
        logits = self.head(self.pre_head(images))
        if self.head_out != self.config.num_classes:
            logits = T.slice_cols(logits, self.config.num_classes)
        return logits

    __call__ = forward

    def structure(self) -> dict:
        blocks = tuple(len(s) for s in self.stages)
        kinds = {type(b) for stage in self.stages for b in stage}
        return {
            "family": "phresnet",
            "n": self.stem.spec.n,
            "init_variant": self.config.init_variant,
            "blocks": blocks,
            "widths": tuple(self.config.widths),
            "bottleneck": kinds == {BottleneckBlock} if kinds else self.config.bottleneck,
        }


class TransformerModel(Model):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        n, d = config.n, config.d_model
        self.shared_A = None
        if config.share_A:
            ab = 1.0 / np.sqrt(n)
            self.shared_A = Tensor(rng.uniform(-ab, ab, size=(n, n, n)), requires_grad=True)
            self.registry["shared.A"] = self.shared_A

        self.embedding = Embedding(config.vocab_size, d, rng)
        self._register("embedding", self.embedding)
        self.positions = sinusoidal_positions(config.seq_len, d)
        self.layers = []
        for i in range(config.depth):
            layer = TransformerLayer(d, config.heads, n, config.init_variant, rng,
                                     shared_A=self.shared_A)
            self._register(f"layer{i}", layer)
            self.layers.append(layer)
        self.head = None
        if not config.tie_output:
            self.head = Dense(d, config.vocab_size, rng)
            self._register("head", self.head)

    def pre_head(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"expected (batch, seq) token ids, got {ids.shape}")
        if ids.shape[1] > self.config.seq_len:
            raise ShapeError(
                f"sequence length {ids.shape[1]} exceeds model maximum {self.config.seq_len}")
        h = T.add_const(self.embedding(ids), self.positions[: ids.shape[1]])
        mask = causal_mask(ids.shape[1])
        for layer in self.layers:
            h = layer(h, mask=mask)
        return h

    def forward(self, ids: np.ndarray) -> Tensor:
        h = self.pre_head(ids)
        if self.head is not None:
            return self.head(h)
        flat = T.reshape(h, (-1, self.config.d_model))
        logits = T.matmul(flat, T.transpose(self.embedding.weight, (1, 0)))
        return T.reshape(logits, (h.data.shape[0], h.data.shape[1], self.config.vocab_size))

    __call__ = forward

    def structure(self) -> dict:
        return {
            "family": "phtransformer",
            "n": self.config.n,
            "init_variant": self.config.init_variant,
            "depth": len(self.layers),
            "d_model": self.config.d_model,
            "heads": self.config.heads,
            "vocab_size": self.config.vocab_size,
        }


def build_phresnet(config: ModelConfig, seed: int = 0) -> ResNetModel:
    if config.family != "phresnet":
        raise ValueError(f"config family is {config.family!r}, not phresnet")
    return ResNetModel(config, np.random.default_rng(seed))


def build_phtransformer(config: ModelConfig, seed: int = 0) -> TransformerModel:
    if config.family != "phtransformer":
        raise ValueError(f"config family is {config.family!r}, not phtransformer")
    return TransformerModel(config, np.random.default_rng(seed))


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    if config.family == "phresnet":
        return build_phresnet(config, seed)
    return build_phtransformer(config, seed)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path):
    entries = []
    offset = 0
    seen: dict[int, str] = {}
    blobs = []
    for name, p in model.parameters():
        if id(p.data) in seen:
            entries.append({"name": name, "shape": list(p.data.shape),
                            "alias": seen[id(p.data)]})
            continue
        seen[id(p.data)] = name
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": model.config.to_dict(), "params": entries, "dtype": "<f8"},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    hlen = struct.unpack("<Q", blob[8:16])[0]
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, seed=0)
    payload = blob[16 + hlen:]
    names = set()
    for entry in header["params"]:
        name = entry["name"]
        names.add(name)
        if name not in model.registry:
            raise CheckpointError(f"{path}: unknown parameter {name} for this config")
        p = model.registry[name]
        shape = tuple(entry["shape"])
        if p.data.shape != shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: file {shape} vs model {p.data.shape}")
        if "alias" in entry:
            continue  # shared storage, filled by its first occurrence
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape)
        p.data[...] = arr
    missing = set(model.registry) - names
    if missing:
        raise CheckpointError(f"{path}: file lacks parameters {sorted(missing)[:3]}")
    return model
