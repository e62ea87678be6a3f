"""The six U-Net family networks built on :mod:`horizon_forge.tensor`.

Parameters live in a flat, insertion-ordered :class:`Weights` mapping from
layer path (``"enc1.conv1.kernel"``) to :class:`Tensor`. ``forward`` walks the
same paths, so the wiring of each architecture can be audited by listing
the keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ARCH_IDS = ("unet", "unet_compressed", "unetpp", "attn_unet", "cfa_s_unet", "cfa_unet")
DEFAULT_BASE = {
    "unet": 64,
    "unet_compressed": 16,
    "unetpp": 64,
    "attn_unet": 64,
    "cfa_s_unet": 64,
    "cfa_unet": 64,
}
GATED = {"attn_unet": "plain", "cfa_s_unet": "spatial_only", "cfa_unet": "full"}


@dataclass(frozen=True)
class ModelSpec:
    arch_id: str
    levels: int = 4
    base_channels: int | None = None
    input_shape: tuple[int, int, int] = (128, 128, 1)
    dropout: float = 0.2

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ValueError(f"unknown arch_id {self.arch_id!r}; valid: {', '.join(ARCH_IDS)}")
        if self.base_channels is None:
            object.__setattr__(self, "base_channels", DEFAULT_BASE[self.arch_id])
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.levels != 4:
            raise ValueError("only L=4 encoder levels are supported")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        h, w, c = self.input_shape
        step = 2 ** self.levels
        if h % step or w % step:
            raise ValueError(f"input extents {h}x{w} must be divisible by {step}")
        if c < 1:
            raise ValueError("input needs at least one channel")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def channels(self) -> list[int]:
        """Channel count per level, top (0) to bottleneck (L)."""
        return [self.base_channels * 2 ** i for i in range(self.levels + 1)]


@dataclass
class Weights:
    spec: ModelSpec
    seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def learnable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def conv_kernels(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k.endswith(".kernel")}

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.learnable().values()))

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def copy(self) -> "Weights":
        out = Weights(self.spec, self.seed)
        for k, t in self.tensors.items():
            out.tensors[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
        return out

    def astype(self, dtype) -> "Weights":
        out = self.copy()
        for t in out.tensors.values():
            t.data = t.data.astype(dtype)
        return out

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


class Scope(Mapping[str, Tensor]):
    """Read-only view of the weights under one path prefix."""

    def __init__(self, weights: Weights, prefix: str):
        self.weights = weights
        self.prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self.weights.tensors[f"{self.prefix}.{key}"]

    def __iter__(self):
        n = len(self.prefix) + 1
        return (k[n:] for k in self.weights.tensors if k.startswith(self.prefix + "."))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def scope(self, sub: str) -> "Scope":
        return Scope(self.weights, f"{self.prefix}.{sub}")

    def get(self, key, default=None):
        return self.weights.tensors.get(f"{self.prefix}.{key}", default)


# ---------------------------------------------------------------- building blocks

def conv_block(x: Tensor, params: Mapping[str, Tensor], train: bool = False) -> Tensor:
    """Two (3x3 conv -> batchnorm -> relu) units."""
    for unit in (1, 2):
        k = params[f"conv{unit}.kernel"]
        if k.shape[1] != x.shape[1]:
            raise ShapeError(f"conv{unit} expects {k.shape[1]} channels, got {x.shape[1]}")
        x = T.conv2d(x, k, params[f"conv{unit}.bias"])
        x = T.batchnorm2d(x, params[f"bn{unit}.gamma"], params[f"bn{unit}.beta"],
                          params[f"bn{unit}.running_mean"].data, params[f"bn{unit}.running_var"].data,
                          train=train)
        x = T.relu(x)
    return x


@dataclass
class GateParams:
    """Projections of one attention gate, each a (kernel, bias) pair."""

    theta_x: tuple[Tensor, Tensor]
    theta_g: tuple[Tensor, Tensor]
    psi: tuple[Tensor, Tensor]
    theta_spatial: tuple[Tensor, Tensor] | None = None
    theta_edge: tuple[Tensor, Tensor] | None = None

    def __post_init__(self):
        if self.psi[0].shape[0] != 1:
            raise ShapeError("psi must emit exactly one channel")
        if self.theta_x[0].shape[0] != self.theta_g[0].shape[0]:
            raise ShapeError("theta_x and theta_g must emit the same number of channels")

    @property
    def inter_channels(self) -> int:
        return self.theta_x[0].shape[0]

    @classmethod
    def from_scope(cls, p: Mapping[str, Tensor]) -> "GateParams":
        def pair(name):
            k = p.get(f"{name}.kernel")
            return None if k is None else (k, p[f"{name}.bias"])

        return cls(pair("theta_x"), pair("theta_g"), pair("psi"), pair("theta_spatial"), pair("theta_edge"))


def _check_gate_extents(x_enc: Tensor, g: Tensor) -> None:
    if (g.shape[2] * 2, g.shape[3] * 2) != x_enc.shape[2:]:
        raise ShapeError(f"gating signal {g.shape} must have half the extent of {x_enc.shape}")


def _gate_tail(h_x: Tensor, g: Tensor, params: GateParams, x_enc: Tensor) -> tuple[Tensor, Tensor]:
    # 1x1 conv commutes with nearest upsampling, so project g at low resolution first
    h_g = T.upsample_nearest2x(T.conv2d(g, *params.theta_g))
    a = T.relu(T.add(h_x, h_g))
    alpha = T.sigmoid(T.conv2d(a, *params.psi))
    return T.mul(x_enc, alpha), alpha


def attention_gate(x_enc: Tensor, g: Tensor, params: GateParams) -> tuple[Tensor, Tensor]:
    """Additive attention gate; returns (gated features, alpha)."""
    _check_gate_extents(x_enc, g)
    return _gate_tail(T.conv2d(x_enc, *params.theta_x), g, params, x_enc)


def sobel_features(x: Tensor) -> Tensor:
    return T.sobel(x)


def cfa_gate(x_enc: Tensor, g: Tensor, params: GateParams, mode: str = "full") -> tuple[Tensor, Tensor]:
    """Context-fusion gate: semantic 1x1 + spatial 3x3 (+ Sobel-fed 1x1) heads, summed."""
    if mode not in ("spatial_only", "full"):
        raise ValueError(f"unknown cfa mode {mode!r}")
    _check_gate_extents(x_enc, g)
    h = T.add(T.conv2d(x_enc, *params.theta_x), T.conv2d(x_enc, *params.theta_spatial))
    if mode == "full":
        h = T.add(h, T.conv2d(sobel_features(x_enc), *params.theta_edge))
    return _gate_tail(h, g, params, x_enc)


def nested_skip_node(same_level: Sequence[Tensor], below: Tensor, params: Mapping[str, Tensor],
                     train: bool = False) -> Tensor:
    """Dense skip node: ConvBlock(concat[x^{l,0..j-1}, Up(x^{l+1,j-1})])."""
    if not same_level:
        raise ValueError("a nested skip node needs at least one same-level input")
    up = T.conv2d_transpose(below, params["up.kernel"], params["up.bias"])
    return conv_block(T.concat_channels(*same_level, up), _Sub(params, "block"), train)


class _Sub(Mapping[str, Tensor]):
    def __init__(self, parent: Mapping[str, Tensor], prefix: str):
        self.parent, self.prefix = parent, prefix

    def __getitem__(self, key):
        return self.parent[f"{self.prefix}.{key}"]

    def __iter__(self):
        n = len(self.prefix) + 1
        return (k[n:] for k in self.parent if k.startswith(self.prefix + "."))

    def __len__(self):
        return sum(1 for _ in self)


# ---------------------------------------------------------------- construction

class _Builder:
    def __init__(self, spec: ModelSpec, seed: int):
        self.w = Weights(spec, seed)
        self.rng = np.random.default_rng(seed)

    def _add(self, path: str, data: np.ndarray, learnable: bool = True) -> None:
        self.w.tensors[path] = Tensor(data.astype(np.float32), requires_grad=learnable, name=path)

    def conv(self, path: str, in_c: int, out_c: int, k: int) -> None:
        limit = np.sqrt(6.0 / (in_c * k * k))
        self._add(f"{path}.kernel", self.rng.uniform(-limit, limit, (out_c, in_c, k, k)))
        self._add(f"{path}.bias", np.zeros(out_c))

    def upconv(self, path: str, in_c: int, out_c: int) -> None:
        # each output pixel sees one tap per input channel
        limit = np.sqrt(6.0 / in_c)
        self._add(f"{path}.kernel", self.rng.uniform(-limit, limit, (in_c, out_c, 2, 2)))
        self._add(f"{path}.bias", np.zeros(out_c))

    def bn(self, path: str, c: int) -> None:
        self._add(f"{path}.gamma", np.ones(c))
        self._add(f"{path}.beta", np.zeros(c))
        self._add(f"{path}.running_mean", np.zeros(c), learnable=False)
        self._add(f"{path}.running_var", np.ones(c), learnable=False)

    def block(self, path: str, in_c: int, out_c: int) -> None:
        self.conv(f"{path}.conv1", in_c, out_c, 3)
        self.bn(f"{path}.bn1", out_c)
        self.conv(f"{path}.conv2", out_c, out_c, 3)
        self.bn(f"{path}.bn2", out_c)

    def gate(self, path: str, enc_c: int, g_c: int, mode: str) -> None:
        inter = max(enc_c // 2, 1)
        self.conv(f"{path}.theta_x", enc_c, inter, 1)
        self.conv(f"{path}.theta_g", g_c, inter, 1)
        self.conv(f"{path}.psi", inter, 1, 1)
        if mode in ("spatial_only", "full"):
            self.conv(f"{path}.theta_spatial", enc_c, inter, 3)
        if mode == "full":
            self.conv(f"{path}.theta_edge", 2 * enc_c, inter, 1)


def build_model(spec: ModelSpec, seed: int = 0) -> Weights:
    """Deterministically initialize every parameter of ``spec`` from ``seed``.

    Conv kernels are He-uniform, biases zero, batch-norm affine ones/zeros.
    """
    b = _Builder(spec, seed)
    ch = spec.channels
    L = spec.levels
    in_c = spec.input_shape[2]
    for l in range(L):
        b.block(f"enc{l}", in_c if l == 0 else ch[l - 1], ch[l])
    b.block("bottleneck", ch[L - 1], ch[L])
    if spec.arch_id == "unetpp":
        for j in range(1, L + 1):
            for l in range(L + 1 - j):
                b.upconv(f"node{l}_{j}.up", ch[l + 1], ch[l])
                b.block(f"node{l}_{j}.block", (j + 1) * ch[l], ch[l])
    else:
        mode = GATED.get(spec.arch_id)
        for l in reversed(range(L)):
            b.upconv(f"dec{l}.up", ch[l + 1], ch[l])
            if mode is not None:
                b.gate(f"gate{l}", ch[l], ch[l + 1], mode)
            b.block(f"dec{l}.block", 2 * ch[l], ch[l])
    b.conv("head", ch[0], 1, 1)
    return b.w


# ---------------------------------------------------------------- inference

def forward(weights: Weights, patch, train: bool = False, rng: np.random.Generator | None = None,
            alphas: list | None = None) -> Tensor:
    """Probability map (n, 1, H, W) for a patch batch (n, C, H, W).

    ``train`` switches batch-norm to batch statistics and enables dropout
    (which then needs ``rng``). Attention maps are appended to ``alphas``
    when a list is given.
    """
    spec = weights.spec
    x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=weights.dtype))
    h, w, c = spec.input_shape
    if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ShapeError(f"{spec.arch_id} expects patches shaped (n, {c}, {h}, {w}), got {x.shape}")
    if train and spec.dropout > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    W = weights.scope
    L = spec.levels

    def drop(t):
        return T.dropout(t, spec.dropout, rng) if train else t

    enc = []
    z = x
    for l in range(L):
        x_enc = drop(conv_block(z, W(f"enc{l}"), train))
        enc.append(x_enc)
        z = T.maxpool2d(x_enc)
    d = conv_block(z, W("bottleneck"), train)

    if spec.arch_id == "unetpp":
        grid: dict[tuple[int, int], Tensor] = {(l, 0): e for l, e in enumerate(enc)}
        grid[(L, 0)] = d
        for j in range(1, L + 1):
            for l in range(L + 1 - j):
                same = [grid[(l, k)] for k in range(j)]
                grid[(l, j)] = nested_skip_node(same, grid[(l + 1, j - 1)], W(f"node{l}_{j}"), train)
        top = grid[(0, L)]
    else:
        mode = GATED.get(spec.arch_id)
        for l in reversed(range(L)):
            skip = enc[l]
            if mode is not None:
                gp = GateParams.from_scope(W(f"gate{l}"))
                if mode == "plain":
                    skip, alpha = attention_gate(skip, d, gp)
                else:
                    skip, alpha = cfa_gate(skip, d, gp, mode)
                if alphas is not None:
                    alphas.append(alpha)
            up = T.conv2d_transpose(d, W(f"dec{l}")["up.kernel"], W(f"dec{l}")["up.bias"])
            d = conv_block(T.concat_channels(up, skip), W(f"dec{l}").scope("block"), train)
        top = d
    head = W("head")
    return T.sigmoid(T.conv2d(top, head["kernel"], head["bias"]))


def node_count(weights: Weights) -> int:
    """Number of dense skip nodes (U-Net++) in the weights."""
    return len({k.split(".")[0] for k in weights if k.startswith("node")})


# ---------------------------------------------------------------- persistence

MAGIC = b"HFWT"
FORMAT_VERSION = 1


def save_weights(weights: Weights, path: str | Path) -> None:
    """Binary weight file: magic, version, JSON header, then (path, shape, f32 LE data) records."""
    header = json.dumps({**asdict(weights.spec), "seed": weights.seed}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header,
              struct.pack("<I", len(weights.tensors))]
    for name, t in weights.tensors.items():
        key = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<HB?", len(key), arr.ndim, t.requires_grad))
        chunks.append(key)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> Weights:
    raw = Path(path).read_bytes()
    try:
        return _parse_weights(raw, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt weight file ({exc})") from exc


def _parse_weights(raw: bytes, path) -> Weights:
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a weight file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    off = 10
    meta = json.loads(raw[off:off + hlen])
    off += hlen
    seed = meta.pop("seed")
    meta["input_shape"] = tuple(meta["input_shape"])
    weights = Weights(ModelSpec(**meta), seed)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    for _ in range(count):
        klen, ndim, learnable = struct.unpack_from("<HB?", raw, off)
        off += 4
        key = raw[off:off + klen].decode()
        off += klen
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 4
        if off + size > len(raw):
            raise ValueError(f"{path}: truncated weight file")
        data = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        off += size
        weights.tensors[key] = Tensor(data, requires_grad=learnable, name=key)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in weight file")
    return weights
