"""PPNN and the black-box ConvResNet next-step models.

Both predict an increment ``u_{t+1} - u_t``. The black-box model is the
trainable ConvResNet alone; PPNN adds a fixed PDE-preserving branch that
integrates the discretised governing equations on a coarse grid and feeds the
upsampled coarse increment both into the residual sum and into the network.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import FormatError, TruncatedFileError, BadMagicError, VersionMismatchError, atomic_write_bytes
from .field import Field, Grid2D, ParamVector, resample_array
from .physics import integrate_array, make_spec

FUSIONS = ("add+input", "input-only", "add-only")


@dataclass(frozen=True)
class ModelConfig:
    fine_grid: Grid2D
    coarse_grid: Grid2D
    dt_learn: float
    pde_system: str | None = None  # None -> black-box
    channels: int = 2
    n_params: int = 1
    hidden_channels: int = 48
    n_resblocks: int = 3
    res_kernel: int = 5
    encoder_kernel: int = 6
    encoder_stride: int = 2
    encoder_layers: int = 2
    encoder_padding: int = 2
    shuffle_factor: int = 4
    decoder_kernel: int = 5
    substeps: int = 1
    laplacian_order: int = 6
    pde_fusion: str = "add+input"
    feature_scale: float = 1.0
    decoder_init_scale: float = 0.01
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.encoder_stride ** self.encoder_layers != self.shuffle_factor:
            raise ValueError("shuffle_factor must equal the product of encoder strides")
        if not self.coarse_grid.same_domain(self.fine_grid):
            raise ValueError("coarse and fine grids must cover the same domain")
        if self.hidden_channels % self.shuffle_factor ** 2:
            raise ValueError("hidden_channels must be divisible by shuffle_factor**2")
        if self.pde_fusion not in FUSIONS:
            raise ValueError(f"pde_fusion must be one of {FUSIONS}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.fine_grid.nx % self.shuffle_factor or self.fine_grid.ny % self.shuffle_factor:
            raise ValueError("fine grid size must be divisible by shuffle_factor")

    @property
    def is_ppnn(self) -> bool:
        return self.pde_system is not None

    @property
    def feeds_feature(self) -> bool:
        return self.is_ppnn and self.pde_fusion != "add-only"

    @property
    def adds_pde(self) -> bool:
        return self.is_ppnn and self.pde_fusion != "input-only"

    @property
    def in_channels(self) -> int:
        return self.channels + self.n_params + (self.channels if self.feeds_feature else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["fine_grid"] = Grid2D(**d["fine_grid"])
        d["coarse_grid"] = Grid2D(**d["coarse_grid"])
        return cls(**d)

    def fingerprint(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, tensor name, slice index)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), index])


def init_weights(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in uniform conv kernels, zero biases, unit/zero layer norms, N(0, 1e-2) rank-1 vectors.

    Every tensor, and every input-channel slice of a kernel, draws from its own
    stream keyed by name, so a PPNN and a black-box model built with the same
    seed share all common weights exactly; only the extra feature-channel
    slices of the first encoder kernel differ. The decoder kernel is further
    multiplied by ``decoder_init_scale``.
    """
    w: dict[str, np.ndarray] = {}

    def conv(name, c_out, c_in, k, gain=1.0):
        bound = gain / np.sqrt(c_in * k * k)
        unit = np.stack([_stream(seed, f"{name}.w", c).uniform(-1.0, 1.0, (c_out, k, k))
                         for c in range(c_in)], axis=1)
        w[f"{name}.w"] = bound * unit
        w[f"{name}.b"] = np.zeros(c_out)

    ny, nx = cfg.fine_grid.shape
    for k in range(cfg.n_params):
        w[f"param{k}.col"] = _stream(seed, f"param{k}.col").normal(0.0, 1e-2, (ny, 1))
        w[f"param{k}.row"] = _stream(seed, f"param{k}.row").normal(0.0, 1e-2, (1, nx))
    c_in = cfg.in_channels
    for k in range(cfg.encoder_layers):
        conv(f"enc{k}", cfg.hidden_channels, c_in, cfg.encoder_kernel)
        c_in = cfg.hidden_channels
    h = cfg.hidden_channels
    for k in range(cfg.n_resblocks):
        conv(f"res{k}", h, h, cfg.res_kernel)
        w[f"res{k}.ln_g"] = np.ones((h, 1, 1))
        w[f"res{k}.ln_b"] = np.zeros((h, 1, 1))
    conv("dec", cfg.channels, h // cfg.shuffle_factor ** 2, cfg.decoder_kernel, cfg.decoder_init_scale)
    return {k: v.astype(dtype) for k, v in w.items()}


class NextStepModel:
    """Trainable ConvResNet plus, for PPNN, the fixed coarse-grid PDE branch."""

    def __init__(self, cfg: ModelConfig, weights: dict[str, np.ndarray] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        weights = init_weights(cfg, seed, dtype) if weights is None else weights
        self.params = {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True)
                       for k, v in weights.items()}
        self._spec = make_spec(cfg.pde_system, 1.0, cfg.laplacian_order) if cfg.is_ppnn else None

    @property
    def label(self) -> str:
        if not self.cfg.is_ppnn:
            return "blackbox"
        return "ppnn" if self.cfg.pde_system != "rd_diffusion" else "ppnn-partial"

    def weights(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # --- PDE-preserving branch (no trainable weights) ---
    def pde_increment(self, u: np.ndarray, params: np.ndarray) -> np.ndarray:
        """Upsampled coarse-grid Euler increment for a batch ``(B, C, ny, nx)``.

        Raises :class:`~ppnn.field.DivergenceError` if the coarse solve blows up.
        """
        cfg = self.cfg
        u = np.asarray(u, dtype=np.float64)
        params = np.asarray(params, dtype=np.float64).reshape(len(u), -1)
        coef = params[:, 0][:, None, None, None]
        uc = resample_array(u, cfg.fine_grid, cfg.coarse_grid, "linear")
        uc_next = integrate_array(self._spec, uc, cfg.coarse_grid, cfg.dt_learn, cfg.substeps, coef)
        return resample_array(uc_next - uc, cfg.coarse_grid, cfg.fine_grid, "cubic")

    # --- trainable branch ---
    def trainable_forward(self, u, params, feature=None) -> Tensor:
        """Network increment for a batch; ``feature`` is the PDE increment (PPNN only)."""
        cfg, p = self.cfg, self.params
        u = np.asarray(u, dtype=self.dtype)
        if u.ndim == 3:
            u = u[None]
        if u.shape[1] != cfg.channels:
            raise ValueError(f"state has {u.shape[1]} channels, model expects {cfg.channels}")
        params = np.asarray(params, dtype=self.dtype).reshape(len(u), cfg.n_params)
        parts = [Tensor(u)]
        for k in range(cfg.n_params):
            parts.append(ad.rank1_param_map(params[:, k], p[f"param{k}.col"], p[f"param{k}.row"]))
        if cfg.feeds_feature:
            if feature is None:
                raise ValueError("PPNN trainable branch needs the PDE feature")
            parts.append(Tensor(np.asarray(feature, dtype=self.dtype).reshape(u.shape) * cfg.feature_scale))
        x = ad.concat_channels(parts)
        for k in range(cfg.encoder_layers):
            x = ad.relu(ad.conv2d(x, p[f"enc{k}.w"], p[f"enc{k}.b"], cfg.encoder_stride,
                                  cfg.encoder_padding))
        for k in range(cfg.n_resblocks):
            y = ad.conv2d(x, p[f"res{k}.w"], p[f"res{k}.b"], 1, cfg.res_kernel // 2)
            y = ad.layer_norm(ad.relu(y), p[f"res{k}.ln_g"], p[f"res{k}.ln_b"], cfg.ln_eps)
            x = ad.add(x, y)
        x = ad.pixel_shuffle(x, cfg.shuffle_factor)
        return ad.conv2d(x, p["dec.w"], p["dec.b"], 1, cfg.decoder_kernel // 2)

    def predict_increment(self, u: np.ndarray, params: np.ndarray,
                          feature: np.ndarray | None = None) -> Tensor:
        """Full increment as a graph node; ``feature`` may be precomputed."""
        if self.cfg.is_ppnn and feature is None:
            feature = self.pde_increment(u, params)
        nn = self.trainable_forward(u, params, feature)
        if self.cfg.adds_pde:
            return ad.add(nn, Tensor(np.asarray(feature, dtype=self.dtype)))
        return nn

    def step_array(self, u: np.ndarray, params: np.ndarray) -> np.ndarray:
        """One model step on a float64 batch ``(B, C, ny, nx)``."""
        u = np.asarray(u, dtype=np.float64)
        inc = np.zeros_like(u)
        feature = None
        if self.cfg.is_ppnn:
            feature = self.pde_increment(u, params)
            if self.cfg.adds_pde:
                inc += feature
        inc += self.trainable_forward(u, params, feature).data
        return u + inc

    def step(self, u: Field, params: ParamVector) -> Field:
        out = self.step_array(u.data[None], np.array([params.values]))[0]
        return u.with_data(out)

    def pde_branch(self, u: Field, params: ParamVector) -> tuple[Field, Field]:
        """``(delta_pde, feature)`` for one field; they coincide by design."""
        if not self.cfg.is_ppnn:
            raise ValueError("black-box model has no PDE branch")
        d = u.with_data(self.pde_increment(u.data[None], np.array([params.values]))[0])
        return d, d


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> NextStepModel:
    return NextStepModel(cfg, seed=seed, dtype=dtype)


def zero_trainable(model: NextStepModel) -> None:
    """Zero every trainable tensor, leaving only the PDE branch active."""
    for t in model.params.values():
        t.data = np.zeros_like(t.data)


# --- checkpoint container -------------------------------------------------------------
#
#   magic "PPCK" | u32 version | u64 config fingerprint | u32 tensor count
#   per tensor: u16 name length | name (utf-8) | u8 ndim | ndim x u32 dims | f32 payload
#   little-endian. The model config itself sits in ``<path>.json``.

CK_MAGIC = b"PPCK"
CK_VERSION = 1


class FingerprintMismatchError(FormatError):
    code = "fingerprint-mismatch"


class MissingTensorError(FormatError):
    code = "missing-tensor"


def encode_checkpoint(cfg: ModelConfig, weights: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sIQI", CK_MAGIC, CK_VERSION, cfg.fingerprint(), len(weights))]
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, cfg: ModelConfig) -> dict[str, np.ndarray]:
    if buf[:4] != CK_MAGIC:
        raise BadMagicError("not a PPCK checkpoint (bad magic)")
    if len(buf) < 20:
        raise TruncatedFileError("checkpoint header truncated")
    _, version, fp, count = struct.unpack_from("<4sIQI", buf)
    if version != CK_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CK_VERSION}")
    if fp != cfg.fingerprint():
        raise FingerprintMismatchError("checkpoint was written for a different model configuration")
    off = 20
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(dims))
            if off + 4 * size > len(buf):
                raise TruncatedFileError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(buf, "<f4", size, off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise TruncatedFileError("checkpoint truncated") from exc
    expected = init_weights(cfg, 0)
    missing = sorted(set(expected) - set(out))
    if missing:
        raise MissingTensorError(f"checkpoint lacks tensors {missing}")
    for name, arr in expected.items():
        if out[name].shape != arr.shape:
            raise FormatError(f"tensor {name!r} has shape {out[name].shape}, expected {arr.shape}")
    return out


def config_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: NextStepModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model.cfg, model.weights()))
    doc = {"model": model.cfg.to_dict(), **(extra or {})}
    atomic_write_bytes(config_path(path), (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(path: str | os.PathLike, cfg: ModelConfig | None = None) -> NextStepModel:
    """Load weights; without ``cfg`` the config is read from the JSON sidecar."""
    if cfg is None:
        cfg = ModelConfig.from_dict(json.loads(config_path(path).read_text())["model"])
    weights = decode_checkpoint(Path(path).read_bytes(), cfg)
    return NextStepModel(cfg, weights)
