"""PointNet-style point-cloud autoencoder: model, inference paths, training, file format.

The encoder is a stack of per-point affine+ReLU layers followed by a max pool
over points, so it accepts any point count and is invariant to permutations
and to duplicated points. The decoder is an MLP from the latent vector to
``k_out`` points.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import diff
from ._validation import ValidationError, as_generator, check_cloud
from .degrade import jit_noise, make_shape, normalize_shape, plane_cut
from .geom3d import sample_uniform_rotation

__all__ = [
    "DescriptorModel",
    "TrainConfig",
    "init_model",
    "encode",
    "encode_batch",
    "decode",
    "encode_tensor",
    "decode_tensor",
    "chamfer_tensor",
    "train",
    "save_model",
    "load_model",
    "ModelFormatError",
    "BadMagicError",
    "DimensionMismatchError",
    "TruncatedModelError",
]

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"PLRM"
MODEL_VERSION = 1


@dataclass
class DescriptorModel:
    """Encoder and decoder weights, stored as float32 ``(W, b)`` pairs."""

    encoder: list
    decoder: list
    latent_dim: int
    k_out: int

    def __post_init__(self):
        if self.encoder[0][0].shape[0] != 3 or self.encoder[-1][0].shape[1] != self.latent_dim:
            raise ValidationError("encoder must map 3 -> latent_dim")
        if self.decoder[0][0].shape[0] != self.latent_dim or self.decoder[-1][0].shape[1] != 3 * self.k_out:
            raise ValidationError("decoder must map latent_dim -> 3 * k_out")
        self._cache = {}

    @property
    def layers(self) -> list:
        return self.encoder + self.decoder

    def weights(self, dtype) -> tuple[list, list]:
        """Weights cast to ``dtype`` (cached; casting float32 up is exact)."""
        key = np.dtype(dtype).str
        if key not in self._cache:
            cast = lambda layers: [(w.astype(dtype), b.astype(dtype)) for w, b in layers]  # noqa: E731
            self._cache[key] = (cast(self.encoder), cast(self.decoder))
        return self._cache[key]

    def invalidate(self) -> None:
        self._cache = {}

    def equals(self, other: DescriptorModel) -> bool:
        if (self.latent_dim, self.k_out) != (other.latent_dim, other.k_out):
            return False
        if len(self.encoder) != len(other.encoder) or len(self.decoder) != len(other.decoder):
            return False
        return all(np.array_equal(a, c) and np.array_equal(b, d) and a.dtype == c.dtype
                   for (a, b), (c, d) in zip(self.layers, other.layers))


def init_model(latent_dim: int = 128, k_out: int = 512, encoder_widths=(32, 64),
               decoder_widths=(512, 1024), seed=0) -> DescriptorModel:
    """Kaiming-uniform (fan-in) initialisation from a seeded stream."""
    rng = as_generator(seed)

    def stack(dims):
        layers = []
        for fin, fout in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / fin)
            w = rng.uniform(-bound, bound, (fin, fout)).astype(np.float32)
            b = rng.uniform(-1 / math.sqrt(fin), 1 / math.sqrt(fin), fout).astype(np.float32)
            layers.append((w, b))
        return layers

    enc = stack([3, *encoder_widths, latent_dim])
    dec = stack([latent_dim, *decoder_widths, 3 * k_out])
    # keep the initial reconstruction small so the first Chamfer gradients are sane
    dec[-1] = (dec[-1][0] * np.float32(0.1), dec[-1][1] * np.float32(0.1))
    return DescriptorModel(enc, dec, latent_dim, k_out)


# -- inference (plain numpy) -----------------------------------------------------

def encode_batch(model: DescriptorModel, clouds: np.ndarray, dtype=np.float32,
                 chunk: int = 4) -> np.ndarray:
    """Encode a stack of equally sized clouds ``(B, k, 3) -> (B, l)``."""
    clouds = np.asarray(clouds)
    if clouds.ndim != 3 or clouds.shape[2] != 3:
        raise ValidationError(f"expected (B, k, 3) clouds, got {clouds.shape}")
    enc, _ = model.weights(dtype)
    b_total, k, _ = clouds.shape
    out = np.empty((b_total, model.latent_dim), dtype=dtype)
    for s in range(0, b_total, chunk):
        h = clouds[s:s + chunk].reshape(-1, 3).astype(dtype, copy=False)
        for w, b in enc:
            h = h @ w
            h += b
            np.maximum(h, 0, out=h)
        out[s:s + chunk] = h.reshape(-1, k, model.latent_dim).max(axis=1)
    return out


def encode(model: DescriptorModel, x, dtype=np.float64) -> np.ndarray:
    """Latent vector of one cloud (any point count)."""
    x = check_cloud(x)
    return encode_batch(model, x[None], dtype=dtype)[0]


def decode(model: DescriptorModel, z, dtype=np.float64) -> np.ndarray:
    """Template cloud ``(k_out, 3)`` for latent ``z``."""
    z = np.asarray(z, dtype=dtype)
    if z.shape != (model.latent_dim,):
        raise ValidationError(f"latent must have length {model.latent_dim}, got shape {z.shape}")
    _, dec = model.weights(dtype)
    h = z[None]
    for i, (w, b) in enumerate(dec):
        h = h @ w + b
        if i < len(dec) - 1:
            h = np.maximum(h, 0)
    return h.reshape(model.k_out, 3)


# -- differentiable paths -----------------------------------------------------

def _tensor_layers(layers, trainable: bool, prefix: str):
    if trainable:
        return [(diff.Tensor(w, requires_grad=True, name=f"{prefix}{i}.W"),
                 diff.Tensor(b, requires_grad=True, name=f"{prefix}{i}.b"))
                for i, (w, b) in enumerate(layers)]
    return [(diff.Tensor(w), diff.Tensor(b)) for w, b in layers]


def encode_tensor(x: diff.Tensor, layers) -> diff.Tensor:
    """``(..., k, 3) -> (..., l)`` on the tape; ``layers`` are Tensor pairs."""
    h = x
    for w, b in layers:
        h = diff.relu(diff.affine(h, w, b))
    return diff.max_pool_points(h)


def decode_tensor(z: diff.Tensor, layers, k_out: int) -> diff.Tensor:
    """``(..., l) -> (..., k_out, 3)`` on the tape."""
    h = z
    for i, (w, b) in enumerate(layers):
        h = diff.affine(h, w, b)
        if i < len(layers) - 1:
            h = diff.relu(h)
    return diff.reshape(h, z.shape[:-1] + (k_out, 3))


def _pairwise_nn(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour indices both ways for batched clouds ``(B, m, 3)``, ``(B, n, 3)``."""
    lead = p.shape[:-2]
    pf = p.reshape(-1, *p.shape[-2:])
    qf = q.reshape(-1, *q.shape[-2:])
    a = np.empty(pf.shape[:2], dtype=np.intp)
    b = np.empty(qf.shape[:2], dtype=np.intp)
    for i in range(len(pf)):
        a[i] = cKDTree(qf[i]).query(pf[i])[1]
        b[i] = cKDTree(pf[i]).query(qf[i])[1]
    return a.reshape(lead + a.shape[1:]), b.reshape(lead + b.shape[1:])


def chamfer_tensor(p: diff.Tensor, q) -> diff.Tensor:
    """Mean over the batch of the bidirectional Chamfer distance.

    Nearest-neighbour assignments are treated as constants (they are piecewise
    constant in the inputs).
    """
    q = diff.as_tensor(q)
    p_to_q, q_to_p = _pairwise_nn(p.data, q.data)
    d_pq = diff.row_norm(diff.sub(p, diff.gather_rows(q, p_to_q)))
    d_qp = diff.row_norm(diff.sub(q, diff.gather_rows(p, q_to_p)))
    return diff.add(diff.mean(d_pq), diff.mean(d_qp))


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Autoencoder training settings; defaults give a laptop-scale run."""

    epochs: int = 40
    batch_size: int = 32
    samples_per_epoch: int = 2048
    lr: float = 1e-3
    lr_factor: float = 2.0
    lr_patience: int = 10
    weight_decay: float = 1e-2
    latent_dim: int = 128
    k_out: int = 512
    n_points: int = 512
    encoder_widths: tuple = (32, 64)
    decoder_widths: tuple = (512, 1024)
    shapes: tuple = ("asym-lamp", "bent-arrow", "three-prong", "helix-block", "airplane")
    shape_variation: float = 0.15
    noise_max: float = 0.03
    visibility: tuple = (0.7, 1.0)
    validation_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "samples_per_epoch", "latent_dim", "k_out",
                     "n_points", "lr_patience"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"TrainConfig.{name} must be positive")
        if not self.lr > 0:
            raise ValidationError("TrainConfig.lr must be positive")
        if len(set(self.shapes)) < 2:
            raise ValidationError("training needs at least 2 distinct shapes")
        self.encoder_widths = tuple(self.encoder_widths)
        self.decoder_widths = tuple(self.decoder_widths)
        self.shapes = tuple(self.shapes)
        self.visibility = tuple(self.visibility)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def degrade_for_training(x: np.ndarray, rng, noise_max: float, visibility: tuple) -> np.ndarray:
    """Jitter, plane cut with random visibility, then center and normalize."""
    stds = rng.uniform(0.0, noise_max, 3)
    y = jit_noise(x, np.diag(stds**2), rng)
    y = plane_cut(y, rng.uniform(*visibility), rng)
    return normalize_shape(y)


def _pad(x: np.ndarray, k: int) -> np.ndarray:
    """Repeat leading points up to ``k`` rows (max-pool encoders ignore duplicates)."""
    if len(x) >= k:
        return x[:k]
    reps = np.resize(np.arange(len(x)), k)
    return x[reps]


def make_training_batch(cfg: TrainConfig, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` (degraded source, clean posed target) pairs, stacked."""
    rotations = sample_uniform_rotation(rng, size=n)
    src, tgt = [], []
    for rot in rotations:
        name = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        target = make_shape(name, cfg.n_points, rng, variation=cfg.shape_variation) @ rot.T
        source = degrade_for_training(target, rng, cfg.noise_max, cfg.visibility)
        src.append(_pad(source, cfg.n_points))
        tgt.append(target)
    return np.stack(src), np.stack(tgt)


@dataclass
class TrainResult:
    model: DescriptorModel
    history: list = field(default_factory=list)
    validation: float = math.nan


def _batch_loss(enc, dec, k_out, src, tgt):
    z = encode_tensor(diff.Tensor(src), enc)
    return chamfer_tensor(decode_tensor(z, dec, k_out), tgt)


def evaluate_reconstruction(model: DescriptorModel, sources, targets) -> float:
    """Mean Chamfer distance between ``decode(encode(source))`` and ``target``."""
    z = encode_batch(model, np.asarray(sources), dtype=np.float64)
    rec = np.stack([decode(model, zi) for zi in z])
    tgt = np.asarray(targets)
    a, b = _pairwise_nn(rec, tgt)
    d1 = np.linalg.norm(rec - np.take_along_axis(tgt, a[..., None], axis=1), axis=-1).mean(axis=1)
    d2 = np.linalg.norm(tgt - np.take_along_axis(rec, b[..., None], axis=1), axis=-1).mean(axis=1)
    return float(np.mean(d1 + d2))


def train(cfg: TrainConfig | None = None, log_path=None, time_budget: float | None = None,
          progress=None) -> TrainResult:
    """Train the autoencoder to restore clean posed shapes from degraded ones.

    Each epoch draws ``samples_per_epoch`` fresh (degraded input, clean target)
    pairs. The lr is divided by ``lr_factor`` when the epoch loss has not
    improved for ``lr_patience`` epochs.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg.latent_dim, cfg.k_out, cfg.encoder_widths, cfg.decoder_widths,
                       seed=rng.integers(2**63 - 1))
    enc = _tensor_layers(model.encoder, True, "enc")
    dec = _tensor_layers(model.decoder, True, "dec")
    params = [t for pair in enc + dec for t in pair]
    opt = diff.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    val_rng = np.random.default_rng([cfg.seed, 1])
    val_src, val_tgt = make_training_batch(cfg, cfg.validation_size, val_rng)

    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        ep_rng = np.random.default_rng([cfg.seed, 2, epoch])
        src, tgt = make_training_batch(cfg, cfg.samples_per_epoch, ep_rng)
        src = src.astype(np.float32)
        tgt = tgt.astype(np.float32)
        total = 0.0
        for s in range(0, len(src), cfg.batch_size):
            with diff.Tape() as tape:
                loss = _batch_loss(enc, dec, cfg.k_out, src[s:s + cfg.batch_size],
                                   tgt[s:s + cfg.batch_size])
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            opt.step(tape.backward(loss))
            total += value * len(src[s:s + cfg.batch_size])
        epoch_loss = total / len(src)
        lr_used = opt.lr
        diff.plateau_schedule(opt.state, epoch_loss, factor=cfg.lr_factor,
                              patience_lr=cfg.lr_patience, patience_stop=10**9)
        history.append({"epoch": epoch, "loss": epoch_loss, "lr": lr_used})
        logger.info("epoch %d loss %.5f lr %.2e", epoch, epoch_loss, lr_used)
        if progress is not None:
            progress(history[-1])
        if time_budget is not None and time.perf_counter() - start > time_budget:
            logger.warning("training stopped by time budget after epoch %d", epoch)
            break

    model.encoder = [(w.data.astype(np.float32), b.data.astype(np.float32)) for w, b in enc]
    model.decoder = [(w.data.astype(np.float32), b.data.astype(np.float32)) for w, b in dec]
    model.invalidate()
    result = TrainResult(model, history, evaluate_reconstruction(model, val_src, val_tgt))
    if log_path is not None:
        write_train_log(log_path, history)
    return result


def write_train_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["lr"])])


# -- file format ----------------------------------------------------------------

class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class DimensionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


def save_model(model: DescriptorModel, path) -> None:
    """Write the ``PLRM`` binary format (little-endian, float32 weights)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HIIII", MODEL_VERSION, model.latent_dim, model.k_out,
                             len(model.layers), len(model.encoder)))
        for w, b in model.layers:
            fh.write(struct.pack("<II", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path) -> DescriptorModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: not a model file (magic {data[:4]!r})")
    header = struct.calcsize("<HIIII")
    if len(data) < 4 + header:
        raise TruncatedModelError(f"{path}: truncated header")
    version, latent, k_out, n_layers, n_enc = struct.unpack_from("<HIIII", data, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    if not 0 < n_enc < n_layers:
        raise DimensionMismatchError(f"{path}: {n_enc} encoder layers of {n_layers}")
    off = 4 + header
    layers = []
    prev = 3
    for i in range(n_layers):
        where = f"encoder layer {i}" if i < n_enc else f"decoder layer {i - n_enc}"
        if len(data) < off + 8:
            raise TruncatedModelError(f"{path}: truncated at {where} shape")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        expected_rows = latent if i == n_enc else prev
        if rows != expected_rows:
            raise DimensionMismatchError(f"{path}: {where} has {rows} inputs, expected {expected_rows}")
        need = 4 * (rows * cols + cols)
        if len(data) < off + need:
            raise TruncatedModelError(f"{path}: truncated weights in {where}")
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        b = np.frombuffer(data, dtype="<f4", count=cols, offset=off + 4 * rows * cols)
        off += need
        layers.append((w.astype(np.float32), b.astype(np.float32)))
        prev = cols
    if layers[n_enc - 1][0].shape[1] != latent:
        raise DimensionMismatchError(f"{path}: encoder output {layers[n_enc - 1][0].shape[1]} != latent {latent}")
    if prev != 3 * k_out:
        raise DimensionMismatchError(f"{path}: decoder output {prev} != 3 * k_out ({3 * k_out})")
    if off != len(data):
        raise ModelFormatError(f"{path}: {len(data) - off} trailing bytes")
    return DescriptorModel(layers[:n_enc], layers[n_enc:], latent, k_out)
