"""MLP over positionally encoded coordinates and feature channels.

The model stores its parameters as one flat vector so the optimizer and
the checkpoint see a single array; layers are views cut out of it.
"""

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .feature import FeatureSet, feature_tensor

logger = logging.getLogger("sharpfield.nnet")

PathLike = Union[str, Path]

ACTIVATIONS = ("softplus", "relu", "sine")
MAGIC = b"SNM1"
TRAILER = b"TRL1"
# magic and the seven u32 header fields
PARAMS_OFFSET = 4 + 7 * 4


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpArch:
    """``n_channels = 0`` gives a plain coordinate MLP without feature inputs."""

    input_dim: int
    n_channels: int
    hidden_layers: int = 4
    width: int = 256
    activation: str = "softplus"
    beta: float = 100.0
    omega0: float = 30.0
    pe_frequencies: int = 0

    def __post_init__(self):
        if self.input_dim not in (2, 3):
            raise ShapeError(f"input dimension must be 2 or 3, got {self.input_dim}")
        if self.n_channels < 0 or self.hidden_layers < 1 or self.width < 1:
            raise ShapeError("channels must be >= 0, hidden layers and width >= 1")
        if self.pe_frequencies < 0:
            raise ShapeError("positional encoding frequencies must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation '{self.activation}'")
        if not self.beta > 0.0 or not self.omega0 > 0.0:
            raise ShapeError("softplus beta and sine omega0 must be positive")

    @property
    def encoded_dim(self) -> int:
        return self.input_dim * (1 + 2 * self.pe_frequencies)

    @property
    def in_features(self) -> int:
        return self.encoded_dim + self.n_channels

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = [(self.in_features, self.width)]
        shapes += [(self.width, self.width)] * (self.hidden_layers - 1)
        shapes.append((self.width, 1))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    @property
    def activation_param(self) -> float:
        return self.omega0 if self.activation == "sine" else self.beta

    @property
    def needs_second_order_warning(self) -> bool:
        return self.activation == "relu"


@dataclass
class MlpModel:
    arch: MlpArch
    params: np.ndarray
    feature_scale: float = 1.0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != self.arch.n_params:
            raise ShapeError(f"expected {self.arch.n_params} parameters, got {self.params.size}")
        if not np.all(np.isfinite(self.params)):
            raise ShapeError("model parameters must be finite")

    @classmethod
    def initialize(cls, arch: MlpArch, seed: int = 0, feature_scale: float = 1.0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        chunks = []
        for layer, (fan_in, fan_out) in enumerate(arch.layer_shapes):
            if arch.activation == "sine":
                bound = 1.0 / fan_in if layer == 0 else math.sqrt(6.0 / fan_in) / arch.omega0
            else:
                bound = 1.0 / math.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(rng.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), size=fan_out))
        return cls(arch, np.concatenate(chunks), feature_scale)

    def copy(self) -> "MlpModel":
        return MlpModel(self.arch, self.params.copy(), self.feature_scale)


def unpack(arch: MlpArch, theta: Tensor) -> list[tuple[Tensor, Tensor]]:
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_shapes:
        w = ad.reshape(theta[offset : offset + fan_in * fan_out], (fan_in, fan_out))
        offset += fan_in * fan_out
        b = theta[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def positional_encode(x, L: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(L):
        scaled = (2.0**k) * math.pi * x
        parts += [np.sin(scaled), np.cos(scaled)]
    return np.concatenate(parts, axis=-1)


def positional_encode_tensor(X: Tensor, L: int) -> Tensor:
    if L == 0:
        return X
    parts = [X]
    for k in range(L):
        scaled = X * ((2.0**k) * math.pi)
        parts += [ad.sin(scaled), ad.cos(scaled)]
    return ad.concat(parts, axis=1)


def _activate(arch: MlpArch, z: Tensor) -> Tensor:
    if arch.activation == "softplus":
        return ad.softplus(z, arch.beta)
    if arch.activation == "relu":
        return ad.relu(z)
    return ad.sin(z * arch.omega0)


def forward_tensor(arch: MlpArch, theta: Tensor, X: Tensor, F: Optional[Tensor] = None) -> Tensor:
    """Network output ``(P,)`` for coordinates ``X`` and already scaled features ``F``."""
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ShapeError(f"expected coordinates (P, {arch.input_dim}), got {X.shape}")
    h = positional_encode_tensor(X, arch.pe_frequencies)
    if arch.n_channels:
        if F is None or F.shape != (X.shape[0], arch.n_channels):
            got = None if F is None else F.shape
            raise ShapeError(f"expected features ({X.shape[0]}, {arch.n_channels}), got {got}")
        h = ad.concat([h, F], axis=1)
    layers = unpack(arch, theta)
    for w, b in layers[:-1]:
        h = _activate(arch, h @ w + b)
    w, b = layers[-1]
    return ad.reshape(h @ w + b, (-1,))


def field_tensor(
    model: MlpModel,
    X: Tensor,
    fs: Optional[FeatureSet],
    theta: Optional[Tensor] = None,
    V: Optional[Tensor] = None,
) -> Tensor:
    """``Phi(x, scale * f(x))`` for query rows ``X``."""
    theta = Tensor(model.params) if theta is None else theta
    F = None
    if model.arch.n_channels:
        if fs is None:
            raise ShapeError("this model needs a feature set")
        F = feature_tensor(X, fs, V) * model.feature_scale
    return forward_tensor(model.arch, theta, X, F)


def forward(m: MlpModel, x, feat=None) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    F = None
    if feat is not None:
        F = Tensor(np.asarray(feat, dtype=np.float64).reshape(1, -1) * m.feature_scale)
    with ad.no_grad():
        return float(forward_tensor(m.arch, Tensor(m.params), Tensor(x), F).data[0])


def grad_wrt_input(m: MlpModel, x, feat=None) -> tuple[np.ndarray, np.ndarray]:
    """``(dPhi/dx, dPhi/dfeat)`` with ``feat`` the unscaled channel values."""
    xt = ad.leaf(np.asarray(x, dtype=np.float64).reshape(1, -1))
    raw = np.zeros((1, m.arch.n_channels)) if feat is None else np.asarray(feat, dtype=np.float64).reshape(1, -1)
    ft = ad.leaf(raw)
    F = ft * m.feature_scale if m.arch.n_channels else None
    out = forward_tensor(m.arch, Tensor(m.params), xt, F)
    gx, gf = ad.grad(ad.tsum(out), [xt, ft])
    return gx.data[0].copy(), gf.data[0].copy()


def evaluate_field(
    m: MlpModel, fs: Optional[FeatureSet], points: np.ndarray, with_grad: bool = False
) -> Union[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Field values at ``points`` and, optionally, their spatial gradients."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, m.arch.input_dim)
    if not with_grad:
        with ad.no_grad():
            return field_tensor(m, Tensor(points), fs).data.copy()
    X = ad.leaf(points)
    out = field_tensor(m, X, fs)
    (g,) = ad.grad(ad.tsum(out), [X])
    return out.data.copy(), g.data.copy()


def loss_backward(loss: Tensor, inputs: list[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss, second-order paths included."""
    return [g.data for g in ad.grad(loss, inputs)]


def warn_if_second_order(arch: MlpArch, needs_second_order: bool):
    if needs_second_order and arch.needs_second_order_warning:
        logger.warning("relu networks have zero second derivatives almost everywhere; "
                       "gradient-based loss terms will not train the weights through them")


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    skipped: int = 0
    last_skipped: bool = False


def adam_step(
    theta: np.ndarray, grads: np.ndarray, state: AdamState, lr: Optional[float] = None
) -> tuple[np.ndarray, AdamState]:
    if grads.shape != theta.shape:
        raise ShapeError(f"gradient shape {grads.shape} does not match {theta.shape}")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        state.last_skipped = True
        logger.warning(f"Skipping Adam step {state.step + 1}: non-finite gradient")
        return theta, state
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    lr = state.lr if lr is None else lr
    state.step += 1
    state.last_skipped = False
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# -- checkpoint ---------------------------------------------------------------


@dataclass
class CheckpointInfo:
    seed: Optional[int] = None
    config_hash: str = ""


def save_checkpoint(path: PathLike, model: MlpModel, seed: Optional[int] = None, config_hash: str = ""):
    """Little-endian: magic, seven u32 header fields, the parameters and the
    feature scale, then a trailer with the seed, the config hash and the
    activation parameter (softplus beta or sine omega0)."""
    arch = model.arch
    header = struct.pack(
        "<7I",
        arch.input_dim,
        arch.n_channels,
        arch.hidden_layers,
        arch.width,
        ACTIVATIONS.index(arch.activation),
        arch.pe_frequencies,
        64,
    )
    digest = bytes.fromhex(config_hash) if config_hash else bytes(32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(model.params.astype("<f8").tobytes())
        fh.write(struct.pack("<d", model.feature_scale))
        fh.write(TRAILER)
        fh.write(struct.pack("<q", -1 if seed is None else seed))
        fh.write(digest.ljust(32, b"\0")[:32])
        fh.write(struct.pack("<d", arch.activation_param))
    logger.debug(f"Saved checkpoint {path} ({arch.n_params} parameters)")


def load_checkpoint(path: PathLike) -> tuple[MlpModel, CheckpointInfo]:
    """Files without a trailer get the default beta / omega0 of their activation."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        d, n_ch, layers, width, act_id, L, bits = struct.unpack_from("<7I", blob, 4)
        if bits != 64:
            raise CheckpointError(f"{path}: unsupported float width {bits}")
        arch = MlpArch(d, n_ch, layers, width, ACTIVATIONS[act_id], pe_frequencies=L)
        offset = PARAMS_OFFSET
        params = np.frombuffer(blob, dtype="<f8", count=arch.n_params, offset=offset).astype(np.float64)
        offset += 8 * arch.n_params
        (scale,) = struct.unpack_from("<d", blob, offset)
        offset += 8
    except (struct.error, IndexError, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from e

    info = CheckpointInfo()
    if blob[offset : offset + 4] == TRAILER:
        try:
            (seed,) = struct.unpack_from("<q", blob, offset + 4)
            digest = blob[offset + 12 : offset + 44]
            (act_param,) = struct.unpack_from("<d", blob, offset + 44)
        except struct.error as e:
            raise CheckpointError(f"{path}: truncated checkpoint trailer") from e
        info.seed = None if seed < 0 else seed
        info.config_hash = "" if digest == bytes(32) else digest.hex()
        try:
            arch = replace(arch, **{"omega0" if arch.activation == "sine" else "beta": act_param})
        except ShapeError as e:
            raise CheckpointError(f"{path}: {e}") from e
    return MlpModel(arch, params, scale), info
