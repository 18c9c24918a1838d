"""Spatial tokenizer: a quantized convolutional autoencoder.

The encoder downsamples a reflectivity map by 2^alpha and projects to a
small latent; each latent vector snaps to its nearest codebook entry, and
the decoder reconstructs the map from the selected entries. Training uses a
magnitude-weighted absolute error in sigmoid space so that rare, intense
echoes keep their amplitude through the bottleneck, plus the usual two
squared-error vector-quantization terms (straight-through gradients).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from tokencast import kernels, nn
from tokencast.backend import blas_single_thread
from tokencast.checkpoint import content_hash, load_checkpoint, save_checkpoint
from tokencast.grid import (
    PreprocessSpec,
    ReflectivityField,
    _quantize_array,
    derive_seed,
)
from tokencast.synthetic import DatasetManifest


class TokenizerError(ValueError):
    """Contract violation in tokenizer operations."""


@dataclass(frozen=True)
class TokenizerConfig:
    """Architecture and loss settings.

    ``alpha`` is the number of 2x down/upsampling steps, so one token
    summarises a patch of 2^alpha x 2^alpha pixels. ``logit_lo/hi`` define
    the affine map from [0, dbz_max] dBZ onto the sigmoid operating range
    used by the reconstruction loss; they are stored with the checkpoint.
    """

    alpha: int = 3
    bottleneck_channels: int = 8
    codebook_size: int = 64
    base_channels: int = 16
    max_channels: int = 64
    use_adversarial: bool = False
    commitment_beta: float = 0.25
    dynamic_range_levels: int = 601
    recon_loss: str = "mwae"
    dbz_max: float = 60.0
    logit_lo: float = -4.0
    logit_hi: float = 4.0
    codebook_init_scale: float = 0.25
    revive_dead_codes: bool = False
    revive_after_steps: int = 250
    adv_weight: float = 0.1
    adv_start_step: int = 500

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be at least 1")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        if self.bottleneck_channels < 1:
            raise ValueError("bottleneck needs at least 1 channel")
        if self.recon_loss not in ("mwae", "mae"):
            raise ValueError("recon_loss must be 'mwae' or 'mae'")

    @property
    def patch_size(self) -> int:
        return 2**self.alpha

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.max_channels)


@dataclass
class Codebook:
    """K latent vectors plus diagnostic usage counts."""

    vectors: np.ndarray
    usage_counts: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.vectors).all():
            raise TokenizerError("codebook contains non-finite vectors")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 5000
    batch_size: int = 8
    crop: int = 32
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 50
    val_every: int = 1000
    val_frames_cap: int = 32


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mwae_loss(x: np.ndarray, y: np.ndarray) -> float:
    """Magnitude-weighted absolute error between two logit-space arrays.

    Computes ``sum_i |sigmoid(x_i) - sigmoid(y_i)| * sigmoid(x_i)`` in
    float64. ``x`` is the target: the weight term makes errors on
    high-magnitude target pixels cost more, which is what pushes the
    autoencoder to keep intense rainfall intact.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise TokenizerError(f"shape mismatch {x.shape} vs {y.shape}")
    sx = _sigmoid(x)
    sy = _sigmoid(y)
    return float((np.abs(sx - sy) * sx).sum())


def mae_loss(x: np.ndarray, y: np.ndarray) -> float:
    """Plain absolute-error sum in the same units, for paired baselines."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise TokenizerError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.abs(x - y).sum())


def _recon_loss_and_grad(x: np.ndarray, y: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Mean-normalized training loss and d(loss)/dy, float32."""
    n = x.size
    if kind == "mwae":
        sx = _sigmoid(x)
        sy = _sigmoid(y)
        diff = sx - sy
        loss = float((np.abs(diff) * sx).mean())
        dy = (-np.sign(diff) * sx * sy * (1.0 - sy)) / n
    else:
        diff = x - y
        loss = float(np.abs(diff).mean())
        dy = -np.sign(diff) / n
    return loss, dy.astype(x.dtype)


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------


def quantize(latents: np.ndarray, codebook: Codebook | np.ndarray):
    """Snap latents to their nearest codebook vectors (Euclidean, exact).

    Accepts latents of shape (h, w, d) or (n, d). Returns
    ``(indices, quantized, codebook_loss, commitment_loss)`` where indices
    follow the input's leading shape. Distances are evaluated in float64
    and ties resolve to the lowest index. The two returned scalars are the
    squared-error terms of the vector-quantization objective; they are
    numerically equal forward values and differ only in which side the
    gradient flows to during training (codebook vs encoder).
    """
    vectors = codebook.vectors if isinstance(codebook, Codebook) else codebook
    lead = latents.shape[:-1]
    d = latents.shape[-1]
    if d != vectors.shape[1]:
        raise TokenizerError(f"latent dim {d} != codebook dim {vectors.shape[1]}")
    flat = latents.reshape(-1, d)
    idx = kernels.nearest_code(flat, vectors)
    zq = vectors[idx]
    sq = float(((zq.astype(np.float64) - flat.astype(np.float64)) ** 2).mean())
    return idx.reshape(lead).astype(np.int32), zq.reshape(latents.shape), sq, sq


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class TokenizerModel:
    """Encoder/decoder conv stacks plus the codebook array."""

    def __init__(self, config: TokenizerConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        a = config.alpha
        d = config.bottleneck_channels
        enc: list[tuple[str, object]] = [("stem", nn.Conv2d(1, config.channels(0), rng=rng, dtype=dtype))]
        enc.append(("stem_act", nn.LeakyReLU()))
        for lvl in range(a):
            enc.append((f"down{lvl}", nn.Conv2d(config.channels(lvl), config.channels(lvl + 1), stride=2, rng=rng, dtype=dtype)))
            enc.append((f"down{lvl}_act", nn.LeakyReLU()))
        enc.append(("mid", nn.Conv2d(config.channels(a), config.channels(a), rng=rng, dtype=dtype)))
        enc.append(("mid_act", nn.LeakyReLU()))
        enc.append(("head", nn.Conv2d(config.channels(a), d, k=1, pad=0, rng=rng, dtype=dtype)))

        dec: list[tuple[str, object]] = [("head", nn.Conv2d(d, config.channels(a), k=1, pad=0, rng=rng, dtype=dtype))]
        dec.append(("head_act", nn.LeakyReLU()))
        dec.append(("mid", nn.Conv2d(config.channels(a), config.channels(a), rng=rng, dtype=dtype)))
        dec.append(("mid_act", nn.LeakyReLU()))
        for lvl in reversed(range(a)):
            dec.append((f"up{lvl}_rs", nn.Upsample2x()))
            dec.append((f"up{lvl}", nn.Conv2d(config.channels(lvl + 1), config.channels(lvl), rng=rng, dtype=dtype)))
            dec.append((f"up{lvl}_act", nn.LeakyReLU()))
        dec.append(("out", nn.Conv2d(config.channels(0), 1, rng=rng, dtype=dtype, bias_init=config.logit_lo)))

        self.enc_layers = enc
        self.dec_layers = dec
        self.codebook = Codebook(
            vectors=rng.uniform(-config.codebook_init_scale, config.codebook_init_scale, (config.codebook_size, d)).astype(dtype),
            usage_counts=np.zeros(config.codebook_size, dtype=np.int64),
        )

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layers in (("enc", self.enc_layers), ("dec", self.dec_layers)):
            for name, layer in layers:
                for pname, arr in layer.params().items():
                    out[f"{prefix}.{name}.{pname}"] = arr
        out["codebook"] = self.codebook.vectors
        return out

    @staticmethod
    def _chain_forward(layers, x):
        caches = []
        for _, layer in layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    @staticmethod
    def _chain_backward(layers, caches, dy, grads, prefix):
        for (name, layer), cache in zip(reversed(layers), reversed(caches)):
            dy, g = layer.backward(cache, dy)
            for k, v in g.items():
                grads[f"{prefix}.{name}.{k}"] = v
        return dy

    # dBZ <-> model units -------------------------------------------------
    def dbz_to_units(self, dbz: np.ndarray) -> np.ndarray:
        c = self.config
        return (c.logit_lo + (np.asarray(dbz, dtype=np.float32) / c.dbz_max) * (c.logit_hi - c.logit_lo)).astype(np.float32)

    def units_to_dbz(self, units: np.ndarray) -> np.ndarray:
        c = self.config
        return (units - c.logit_lo) / (c.logit_hi - c.logit_lo) * c.dbz_max

    def encode_units(self, x: np.ndarray):
        """x (B,1,H,W) in model units -> latents (B,d,h,w) + caches."""
        return self._chain_forward(self.enc_layers, x)

    def decode_units(self, zq: np.ndarray):
        """zq (B,d,h,w) -> reconstruction (B,1,H,W) in model units + caches."""
        return self._chain_forward(self.dec_layers, zq)


class PatchDiscriminator:
    """Small strided conv stack emitting per-patch real/fake logits."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.layers = [
            ("c0", nn.Conv2d(1, 32, stride=2, rng=rng, dtype=dtype)),
            ("a0", nn.LeakyReLU(0.2)),
            ("c1", nn.Conv2d(32, 64, stride=2, rng=rng, dtype=dtype)),
            ("a1", nn.LeakyReLU(0.2)),
            ("c2", nn.Conv2d(64, 1, rng=rng, dtype=dtype)),
        ]

    def params(self):
        out = {}
        for name, layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"disc.{name}.{pname}"] = arr
        return out

    def forward(self, x):
        return TokenizerModel._chain_forward(self.layers, x)

    def backward(self, caches, dy, grads):
        return TokenizerModel._chain_backward(self.layers, caches, dy, grads, "disc")


def _bce_logits(z: np.ndarray, target: float) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on logits; returns (mean loss, dloss/dz)."""
    loss = float((np.logaddexp(0.0, z) - target * z).mean())
    dz = (_sigmoid(z.astype(np.float64)) - target) / z.size
    return loss, dz.astype(z.dtype)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


class TokenizerCheckpoint:
    """A trained (or fresh) tokenizer: config, parameters, codebook, meta."""

    def __init__(self, model: TokenizerModel, step: int = 0, meta: dict | None = None):
        self.model = model
        self.config = model.config
        self.step = step
        self.meta = meta or {}

    @classmethod
    def fresh(cls, config: TokenizerConfig, seed: int = 0) -> "TokenizerCheckpoint":
        return cls(TokenizerModel(config, np.random.default_rng(seed)))

    def content_hash(self) -> str:
        return content_hash("tokenizer", asdict(self.config), self.model.params())

    def save(self, path: str | Path) -> Path:
        arrays = dict(self.model.params())
        arrays["usage_counts"] = self.model.codebook.usage_counts
        meta = dict(self.meta)
        meta["step"] = self.step
        return save_checkpoint(path, "tokenizer", asdict(self.config), arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "TokenizerCheckpoint":
        kind, config, arrays, meta = load_checkpoint(path)
        if kind != "tokenizer":
            raise TokenizerError(f"{path} holds a {kind!r} checkpoint, expected tokenizer")
        cfg = TokenizerConfig(**config)
        model = TokenizerModel(cfg, np.random.default_rng(0))
        params = model.params()
        for name, arr in params.items():
            params[name][...] = arrays[name]
        model.codebook.usage_counts[...] = arrays["usage_counts"]
        ckpt = cls(model, step=int(meta.get("step", 0)), meta=meta)
        return ckpt


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def compression_ratio(config: TokenizerConfig, input_hw: tuple[int, int], dynamic_range_levels: int | None = None) -> float:
    """Information ratio between the raw grid and its token representation."""
    h, w = input_hw
    p = config.patch_size
    if h % p or w % p:
        raise TokenizerError(f"dims {input_hw} not divisible by patch size {p}")
    levels = dynamic_range_levels if dynamic_range_levels is not None else config.dynamic_range_levels
    return (h * w * levels) / ((h // p) * (w // p) * config.codebook_size)


def _check_divisible(shape: tuple[int, int], patch: int) -> None:
    h, w = shape
    if h % patch or w % patch:
        ph = (patch - h % patch) % patch
        pw = (patch - w % patch) % patch
        raise TokenizerError(
            f"field shape {shape} not divisible by patch size {patch}; pad to {(h + ph, w + pw)}"
        )


def encode_frames(ckpt: TokenizerCheckpoint, frames: np.ndarray, batch: int = 32) -> np.ndarray:
    """Encode (N,H,W) dBZ frames to (N,h,w) token indices."""
    model = ckpt.model
    _check_divisible(frames.shape[1:], ckpt.config.patch_size)
    out = []
    for i in range(0, frames.shape[0], batch):
        x = model.dbz_to_units(frames[i : i + batch])[:, None, :, :]
        z, _ = model.encode_units(x)
        idx, _, _, _ = quantize(z.transpose(0, 2, 3, 1), model.codebook)
        out.append(idx)
    return np.concatenate(out, axis=0)


def decode_grids(ckpt: TokenizerCheckpoint, grids: np.ndarray, preprocess: PreprocessSpec = PreprocessSpec(), batch: int = 32) -> np.ndarray:
    """Decode (N,h,w) token indices to (N,H,W) preprocessed dBZ frames."""
    model = ckpt.model
    k = ckpt.config.codebook_size
    if grids.min() < 0 or grids.max() >= k:
        raise TokenizerError(f"token index out of range [0, {k})")
    out = []
    for i in range(0, grids.shape[0], batch):
        zq = model.codebook.vectors[grids[i : i + batch]].transpose(0, 3, 1, 2)
        y, _ = model.decode_units(np.ascontiguousarray(zq))
        dbz = model.units_to_dbz(y[:, 0])
        out.append(_quantize_array(dbz, preprocess))
    return np.concatenate(out, axis=0)


def encode(fld: ReflectivityField, ckpt: TokenizerCheckpoint) -> np.ndarray:
    """Token grid, shape (H/2^alpha, W/2^alpha), for one field."""
    return encode_frames(ckpt, fld.values[None])[0]


def decode(tokens: np.ndarray, ckpt: TokenizerCheckpoint, preprocess: PreprocessSpec = PreprocessSpec()) -> ReflectivityField:
    """Reconstruct a field from one token grid; output is clipped/quantized."""
    return ReflectivityField(decode_grids(ckpt, tokens[None], preprocess)[0])


def reconstruct_frames(ckpt: TokenizerCheckpoint, frames: np.ndarray, preprocess: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """encode + decode of (N,H,W) frames; the tokenizer's best effort."""
    return decode_grids(ckpt, encode_frames(ckpt, frames), preprocess)


def codebook_utilization(ckpt: TokenizerCheckpoint, frames: np.ndarray) -> float:
    """Fraction of codebook entries selected at least once over ``frames``."""
    if frames.size == 0:
        raise TokenizerError("empty dataset")
    idx = encode_frames(ckpt, frames)
    used = np.zeros(ckpt.config.codebook_size, dtype=bool)
    used[idx.reshape(-1)] = True
    return float(used.sum()) / ckpt.config.codebook_size


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _val_mwae(model: TokenizerModel, frames: np.ndarray, batch: int = 16) -> float:
    """Mean-per-element MWAE of reconstructions in model units."""
    total = 0.0
    count = 0
    for i in range(0, frames.shape[0], batch):
        x = model.dbz_to_units(frames[i : i + batch])[:, None]
        z, _ = model.encode_units(x)
        _, zq, _, _ = quantize(z.transpose(0, 2, 3, 1), model.codebook)
        y, _ = model.decode_units(np.ascontiguousarray(zq.transpose(0, 3, 1, 2)))
        total += mwae_loss(x, y)
        count += x.size
    return total / count


def _sample_crops(
    rng: np.random.Generator,
    sequences: list[np.ndarray],
    batch_size: int,
    crop: int,
) -> np.ndarray:
    out = np.empty((batch_size, crop, crop), dtype=np.float32)
    for i in range(batch_size):
        seq = sequences[int(rng.integers(0, len(sequences)))]
        t = int(rng.integers(0, seq.shape[0]))
        oy = int(rng.integers(0, seq.shape[1] - crop + 1))
        ox = int(rng.integers(0, seq.shape[2] - crop + 1))
        frame = seq[t, oy : oy + crop, ox : ox + crop]
        k = int(rng.integers(0, 4))
        if k:
            frame = np.rot90(frame, k)
        if rng.integers(0, 2):
            frame = frame[:, ::-1]
        out[i] = frame
    return out


def train_tokenizer(
    manifest: DatasetManifest | str | Path,
    config: TokenizerConfig = TokenizerConfig(),
    schedule: TrainSchedule = TrainSchedule(),
    log_path: str | Path | None = None,
) -> TokenizerCheckpoint:
    """Train a tokenizer on the train split of a dataset manifest.

    Deterministic given the schedule seed. Aborts on a non-finite
    reconstruction loss and returns the last finite-step parameters. The
    held-out MWAE at initialization and at the end is stored in the
    checkpoint meta.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    train_seqs = [s.values for s in manifest.load_split("train")]
    val_seqs = [s.values for s in manifest.load_split("val")]
    if not train_seqs:
        raise TokenizerError("manifest has no train sequences")
    if schedule.crop % config.patch_size:
        raise TokenizerError(f"crop {schedule.crop} not divisible by patch size {config.patch_size}")
    val_frames = (
        np.concatenate([s for s in val_seqs], axis=0)[: schedule.val_frames_cap]
        if val_seqs
        else np.concatenate(train_seqs, axis=0)[: schedule.val_frames_cap]
    )

    rng_init = np.random.default_rng(schedule.seed)
    rng_batch = np.random.default_rng(derive_seed(schedule.seed, 1))
    model = TokenizerModel(config, rng_init)
    disc = PatchDiscriminator(np.random.default_rng(derive_seed(schedule.seed, 2))) if config.use_adversarial else None

    params = model.params()
    opt = nn.Adam(params, lr=schedule.lr)
    opt_disc = nn.Adam(disc.params(), lr=schedule.lr) if disc else None

    init_val = _val_mwae(model, val_frames)
    beta = config.commitment_beta
    k_codes = config.codebook_size
    seen_codes = np.zeros(k_codes, dtype=bool)
    last_used = np.zeros(k_codes, dtype=np.int64)
    records: list[dict] = []
    snapshot = nn.l2_snapshot(params)
    aborted = False

    with blas_single_thread():
        for step in range(1, schedule.steps + 1):
            crops = _sample_crops(rng_batch, train_seqs, schedule.batch_size, schedule.crop)
            x = model.dbz_to_units(crops)[:, None]

            z, enc_caches = model.encode_units(x)
            z_nhwc = z.transpose(0, 2, 3, 1)
            idx, zq_nhwc, cb_loss, commit_loss = quantize(z_nhwc, model.codebook)
            flat_idx = idx.reshape(-1)
            zq = np.ascontiguousarray(zq_nhwc.transpose(0, 3, 1, 2))
            y, dec_caches = model.decode_units(zq)

            recon, dy = _recon_loss_and_grad(x, y, config.recon_loss)
            if not math.isfinite(recon):
                nn.restore_snapshot(params, snapshot)
                aborted = True
                records.append({"step": step, "event": "divergence_abort"})
                break
            snapshot = nn.l2_snapshot(params)

            adv_d = adv_g = None
            grads: dict[str, np.ndarray] = {}
            if disc is not None:
                dgrads: dict[str, np.ndarray] = {}
                logit_r, cache_r = disc.forward(x)
                loss_r, dz_r = _bce_logits(logit_r, 1.0)
                disc.backward(cache_r, dz_r, dgrads)
                g1 = {k: v.copy() for k, v in dgrads.items()}
                logit_f, cache_f = disc.forward(y)
                loss_f, dz_f = _bce_logits(logit_f, 0.0)
                disc.backward(cache_f, dz_f, dgrads)
                opt_disc.step({k: g1[k] + dgrads[k] for k in dgrads})
                adv_d = loss_r + loss_f
                if step >= config.adv_start_step:
                    logit_f, cache_f = disc.forward(y)
                    adv_g, dz_g = _bce_logits(logit_f, 1.0)
                    dy_adv = disc.backward(cache_f, dz_g, {})
                    dy = dy + config.adv_weight * dy_adv

            dzq = model._chain_backward(model.dec_layers, dec_caches, dy, grads, "dec")
            # straight-through estimator plus commitment pull on the encoder
            dz = dzq + (beta * 2.0 / z.size) * (z - zq)
            model._chain_backward(model.enc_layers, enc_caches, dz, grads, "enc")

            dcb = np.zeros_like(model.codebook.vectors)
            flat_z = z_nhwc.reshape(-1, z_nhwc.shape[-1])
            np.add.at(dcb, flat_idx, (2.0 / z.size) * (model.codebook.vectors[flat_idx] - flat_z))
            grads["codebook"] = dcb
            opt.step(grads)

            counts = np.bincount(flat_idx, minlength=k_codes)
            model.codebook.usage_counts += counts
            seen_codes |= counts > 0
            last_used[counts > 0] = step
            if config.revive_dead_codes and step % config.revive_after_steps == 0:
                dead = np.where(last_used < step - config.revive_after_steps)[0]
                if dead.size:
                    picks = rng_batch.integers(0, flat_z.shape[0], size=dead.size)
                    noise = rng_batch.normal(0.0, 0.01, size=(dead.size, flat_z.shape[1]))
                    model.codebook.vectors[dead] = (flat_z[picks] + noise).astype(model.codebook.vectors.dtype)
                    last_used[dead] = step

            rec = {
                "step": step,
                "recon": recon,
                "codebook": cb_loss,
                "commitment": commit_loss,
                "utilization": float(seen_codes.sum()) / k_codes,
            }
            if adv_d is not None:
                rec["adv_d"] = adv_d
                rec["adv_g"] = adv_g
            if schedule.val_every and (step % schedule.val_every == 0 or step == schedule.steps):
                rec["val_mwae"] = _val_mwae(model, val_frames)
            records.append(rec)

    final_val = _val_mwae(model, val_frames)
    ckpt = TokenizerCheckpoint(
        model,
        step=len(records),
        meta={
            "init_val_mwae": init_val,
            "final_val_mwae": final_val,
            "aborted": aborted,
            "recon_loss": config.recon_loss,
            "seed": schedule.seed,
        },
    )
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return ckpt
