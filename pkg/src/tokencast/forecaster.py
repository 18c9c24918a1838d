"""Causal next-token forecaster over spatiotemporal token sequences.

Token grids from consecutive frames are flattened oldest-frame-first and
row-major within each frame; a decoder-only transformer predicts a
categorical distribution over the codebook for every next position.
Positions are encoded with fixed sinusoids, so the parameter count is
independent of the context geometry.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from tokencast import nn
from tokencast.backend import blas_single_thread
from tokencast.checkpoint import content_hash, load_checkpoint, save_checkpoint
from tokencast.grid import derive_seed
from tokencast.synthetic import DatasetManifest
from tokencast.tokenizer import TokenizerCheckpoint, encode_frames


class ForecasterError(ValueError):
    """Contract violation in forecaster operations."""


@dataclass(frozen=True)
class ForecasterConfig:
    """Geometry and transformer size; context_length = T * tokens_h * tokens_w."""

    vocab_size: int = 64
    context_frames: int = 4
    tokens_h: int = 4
    tokens_w: int = 4
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 128

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        for f in ("vocab_size", "context_frames", "tokens_h", "tokens_w", "n_layers", "n_heads"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    @property
    def context_length(self) -> int:
        return self.context_frames * self.tokens_h * self.tokens_w


# ---------------------------------------------------------------------------
# token ordering
# ---------------------------------------------------------------------------


def flatten_spatiotemporal(grids: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Flatten token grids, oldest frame first, row-major within a frame.

    ``out[t*h*w + r*w + c] == grids[t][r, c]``.
    """
    grids = [np.asarray(g) for g in grids]
    if not grids:
        raise ForecasterError("no grids to flatten")
    shape = grids[0].shape
    for g in grids:
        if g.shape != shape or g.ndim != 2:
            raise ForecasterError(f"grid shapes disagree: {g.shape} vs {shape}")
    return np.stack(grids, axis=0).reshape(-1)


def unflatten_spatiotemporal(tokens: np.ndarray, layout: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten_spatiotemporal`; layout is (T, h, w)."""
    t, h, w = layout
    tokens = np.asarray(tokens)
    if tokens.size != t * h * w:
        raise ForecasterError(f"{tokens.size} tokens cannot fill layout {layout}")
    return tokens.reshape(t, h, w)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


def _sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((max_len, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(np.float32)


class _Block:
    """Pre-norm transformer block: attention + MLP with residuals."""

    def __init__(self, dim, n_heads, rng, dtype=np.float32):
        self.dim = dim
        self.n_heads = n_heads
        self.hd = dim // n_heads
        self.ln1 = nn.LayerNorm(dim, dtype=dtype)
        self.qkv = nn.Linear(dim, 3 * dim, rng=rng, dtype=dtype, w_scale=0.02)
        self.proj = nn.Linear(dim, dim, rng=rng, dtype=dtype, w_scale=0.02)
        self.ln2 = nn.LayerNorm(dim, dtype=dtype)
        self.fc1 = nn.Linear(dim, 4 * dim, rng=rng, dtype=dtype, w_scale=0.02)
        self.fc2 = nn.Linear(4 * dim, dim, rng=rng, dtype=dtype, w_scale=0.02)

    def params(self):
        out = {}
        for name, layer in (("ln1", self.ln1), ("qkv", self.qkv), ("proj", self.proj), ("ln2", self.ln2), ("fc1", self.fc1), ("fc2", self.fc2)):
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def _split_heads(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.hd).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        b, nh, t, hd = x.shape
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, nh * hd)

    def forward(self, x):
        b, t, d = x.shape
        xh, c_ln1 = self.ln1.forward(x)
        qkv, c_qkv = self.qkv.forward(xh)
        q, k, v = (self._split_heads(a) for a in np.split(qkv, 3, axis=-1))
        att = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.hd).astype(np.float32)
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        att = np.where(mask, np.float32(-1e30), att)
        amax = att.max(axis=-1, keepdims=True)
        ea = np.exp(att - amax)
        a = ea / ea.sum(axis=-1, keepdims=True)
        o = a @ v
        om = self._merge_heads(o)
        y, c_proj = self.proj.forward(om)
        x1 = x + y

        xh2, c_ln2 = self.ln2.forward(x1)
        u, c_fc1 = self.fc1.forward(xh2)
        h, _ = nn.gelu(u)
        y2, c_fc2 = self.fc2.forward(h)
        out = x1 + y2
        cache = (c_ln1, c_qkv, q, k, v, a, c_proj, c_ln2, c_fc1, u, c_fc2)
        return out, cache

    def backward(self, cache, dout, grads, prefix):
        c_ln1, c_qkv, q, k, v, a, c_proj, c_ln2, c_fc1, u, c_fc2 = cache

        dy2 = dout
        dh, g_fc2 = self.fc2.backward(c_fc2, dy2)
        du = nn.gelu_backward(u, dh)
        dxh2, g_fc1 = self.fc1.backward(c_fc1, du)
        dx1, g_ln2 = self.ln2.backward(c_ln2, dxh2)
        dx1 = dx1 + dout

        dom, g_proj = self.proj.backward(c_proj, dx1)
        do = self._split_heads(dom)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        datt = a * (da - (da * a).sum(axis=-1, keepdims=True))
        datt = datt / np.sqrt(self.hd).astype(np.float32)
        dq = datt @ k
        dk = datt.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [self._merge_heads(dq), self._merge_heads(dk), self._merge_heads(dv)], axis=-1
        )
        dxh, g_qkv = self.qkv.backward(c_qkv, dqkv)
        dx, g_ln1 = self.ln1.backward(c_ln1, dxh)
        dx = dx + dx1

        for name, g in (("ln1", g_ln1), ("qkv", g_qkv), ("proj", g_proj), ("ln2", g_ln2), ("fc1", g_fc1), ("fc2", g_fc2)):
            for pname, arr in g.items():
                grads[f"{prefix}.{name}.{pname}"] = arr
        return dx

    # incremental decoding ------------------------------------------------
    def step(self, x, k_cache, v_cache, pos):
        """One new position; x is (B, 1, D), caches are (B, nh, maxT, hd)."""
        xh, _ = self.ln1.forward(x)
        qkv, _ = self.qkv.forward(xh)
        q, k, v = (self._split_heads(a) for a in np.split(qkv, 3, axis=-1))
        k_cache[:, :, pos : pos + 1] = k
        v_cache[:, :, pos : pos + 1] = v
        ks = k_cache[:, :, : pos + 1]
        vs = v_cache[:, :, : pos + 1]
        att = q @ ks.transpose(0, 1, 3, 2) / np.sqrt(self.hd).astype(np.float32)
        att = att - att.max(axis=-1, keepdims=True)
        ea = np.exp(att)
        a = ea / ea.sum(axis=-1, keepdims=True)
        o = a @ vs
        y, _ = self.proj.forward(self._merge_heads(o))
        x1 = x + y
        xh2, _ = self.ln2.forward(x1)
        u, _ = self.fc1.forward(xh2)
        h, _ = nn.gelu(u)
        y2, _ = self.fc2.forward(h)
        return x1 + y2


class ForecasterModel:
    """GPT-style decoder-only transformer over codebook indices."""

    def __init__(self, config: ForecasterConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.wte = nn.Embedding(config.vocab_size, config.embed_dim, rng=rng, dtype=dtype)
        self.pe = _sinusoidal_positions(config.context_length, config.embed_dim)
        self.blocks = [_Block(config.embed_dim, config.n_heads, rng, dtype) for _ in range(config.n_layers)]
        self.ln_f = nn.LayerNorm(config.embed_dim, dtype=dtype)
        self.head = nn.Linear(config.embed_dim, config.vocab_size, rng=rng, dtype=dtype, w_scale=0.02)

    def params(self) -> dict[str, np.ndarray]:
        out = {"wte.table": self.wte.table}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.params().items():
                out[f"block{i}.{name}"] = arr
        for pname, arr in self.ln_f.params().items():
            out[f"ln_f.{pname}"] = arr
        for pname, arr in self.head.params().items():
            out[f"head.{pname}"] = arr
        return out

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params().values())

    def forward(self, tokens: np.ndarray, want_cache: bool = False):
        """tokens (B, L) int -> logits (B, L, K); optionally keep caches."""
        b, t = tokens.shape
        if t > self.config.context_length:
            raise ForecasterError(f"sequence length {t} exceeds context {self.config.context_length}")
        emb, c_emb = self.wte.forward(tokens)
        x = emb + self.pe[None, :t]
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x)
            caches.append(c)
        xf, c_lnf = self.ln_f.forward(x)
        logits, c_head = self.head.forward(xf)
        if want_cache:
            return logits, (c_emb, caches, c_lnf, c_head)
        return logits

    def backward(self, cache, dlogits) -> dict[str, np.ndarray]:
        c_emb, caches, c_lnf, c_head = cache
        grads: dict[str, np.ndarray] = {}
        dxf, g_head = self.head.backward(c_head, dlogits)
        for pname, arr in g_head.items():
            grads[f"head.{pname}"] = arr
        dx, g_lnf = self.ln_f.backward(c_lnf, dxf)
        for pname, arr in g_lnf.items():
            grads[f"ln_f.{pname}"] = arr
        for i in reversed(range(len(self.blocks))):
            dx = self.blocks[i].backward(caches[i], dx, grads, f"block{i}")
        _, g_emb = self.wte.backward(c_emb, dx)
        grads["wte.table"] = g_emb["table"]
        return grads

    # incremental decoding ------------------------------------------------
    def new_cache(self, batch: int = 1):
        cfg = self.config
        shape = (batch, cfg.n_heads, cfg.context_length, cfg.embed_dim // cfg.n_heads)
        return {
            "k": [np.zeros(shape, dtype=np.float32) for _ in self.blocks],
            "v": [np.zeros(shape, dtype=np.float32) for _ in self.blocks],
            "len": 0,
        }

    def decode_step(self, cache, tokens: np.ndarray) -> np.ndarray:
        """Append one token per batch row; returns next-token logits (B, K)."""
        pos = cache["len"]
        if pos >= self.config.context_length:
            raise ForecasterError("cache full: context length exceeded")
        emb, _ = self.wte.forward(tokens[:, None])
        x = emb + self.pe[None, pos : pos + 1]
        for i, blk in enumerate(self.blocks):
            x = blk.step(x, cache["k"][i], cache["v"][i], pos)
        cache["len"] = pos + 1
        xf, _ = self.ln_f.forward(x)
        logits, _ = self.head.forward(xf)
        return logits[:, 0]

    def prefill(self, cache, tokens: np.ndarray) -> np.ndarray:
        """Feed a (B, L) prefix through an empty cache; returns last logits (B, K)."""
        if cache["len"] != 0:
            raise ForecasterError("prefill requires an empty cache")
        b, t = tokens.shape
        if t > self.config.context_length:
            raise ForecasterError(f"prefix length {t} exceeds context {self.config.context_length}")
        emb, _ = self.wte.forward(tokens)
        x = emb + self.pe[None, :t]
        for i, blk in enumerate(self.blocks):
            x, c = blk.forward(x)
            cache["k"][i][:, :, :t] = c[3]  # cache layout matches _Block.forward's (q, k, v, ...)
            cache["v"][i][:, :, :t] = c[4]
        cache["len"] = t
        xf, _ = self.ln_f.forward(x[:, -1:])
        logits, _ = self.head.forward(xf)
        return logits[:, 0]


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


class ForecasterCheckpoint:
    def __init__(self, model: ForecasterModel, step: int = 0, meta: dict | None = None):
        self.model = model
        self.config = model.config
        self.step = step
        self.meta = meta or {}

    @property
    def tokenizer_hash(self) -> str | None:
        return self.meta.get("tokenizer_hash")

    @classmethod
    def fresh(cls, config: ForecasterConfig, seed: int = 0) -> "ForecasterCheckpoint":
        return cls(ForecasterModel(config, np.random.default_rng(seed)))

    def content_hash(self) -> str:
        return content_hash("forecaster", asdict(self.config), self.model.params())

    def save(self, path: str | Path) -> Path:
        meta = dict(self.meta)
        meta["step"] = self.step
        return save_checkpoint(path, "forecaster", asdict(self.config), self.model.params(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "ForecasterCheckpoint":
        kind, config, arrays, meta = load_checkpoint(path)
        if kind != "forecaster":
            raise ForecasterError(f"{path} holds a {kind!r} checkpoint, expected forecaster")
        model = ForecasterModel(ForecasterConfig(**config), np.random.default_rng(0))
        params = model.params()
        for name in params:
            params[name][...] = arrays[name]
        return cls(model, step=int(meta.get("step", 0)), meta=meta)


# ---------------------------------------------------------------------------
# inference-facing ops
# ---------------------------------------------------------------------------


def next_token_distribution(ctx: np.ndarray, ckpt: ForecasterCheckpoint) -> np.ndarray:
    """Probability vector over the vocabulary for the next token.

    ``ctx`` is a 1-D index sequence of length 1..context_length. The result
    is non-negative and sums to one; it depends only on the given prefix.
    """
    ctx = np.asarray(ctx)
    if ctx.ndim != 1 or not (1 <= ctx.size <= ckpt.config.context_length):
        raise ForecasterError(
            f"context must be 1-D with length in [1, {ckpt.config.context_length}], got shape {ctx.shape}"
        )
    if ctx.min() < 0 or ctx.max() >= ckpt.config.vocab_size:
        raise ForecasterError("token index out of vocabulary range")
    logits = ckpt.model.forward(ctx[None, :])[0, -1].astype(np.float64)
    return nn.softmax(logits)


def cross_entropy_and_grad(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token cross-entropy over positions 0..L-2 and its gradient."""
    b, t, k = logits.shape
    lg = logits[:, :-1].astype(np.float64)
    tg = targets[:, 1:]
    lg = lg - lg.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(lg).sum(axis=-1, keepdims=True))
    logp = lg - logz
    n = b * (t - 1)
    loss = -logp.reshape(n, k)[np.arange(n), tg.reshape(-1)].mean()
    dsoft = np.exp(logp)
    dsoft.reshape(n, k)[np.arange(n), tg.reshape(-1)] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = (dsoft / n).astype(logits.dtype)
    return float(loss), dlogits


def heldout_cross_entropy(ckpt: ForecasterCheckpoint, windows: np.ndarray, batch: int = 16) -> float:
    """Mean next-token cross-entropy over (N, context_length) windows."""
    total = 0.0
    count = 0
    for i in range(0, windows.shape[0], batch):
        w = windows[i : i + batch]
        logits = ckpt.model.forward(w)
        loss, _ = cross_entropy_and_grad(logits, w)
        total += loss * w.shape[0]
        count += w.shape[0]
    return total / count


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForecasterSchedule:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0
    log_every: int = 50
    val_every: int = 500
    val_windows_cap: int = 128


def build_token_windows(
    token_grids: list[np.ndarray],
    config: ForecasterConfig,
) -> tuple[list[tuple[int, int, int, int]], list[np.ndarray]]:
    """Enumerate (seq, t0, oy, ox) windows over per-sequence token grids.

    Every contiguous run of ``context_frames`` frames contributes one window
    per spatial offset of the model's token window, stride one token.
    """
    t_need, wh, ww = config.context_frames, config.tokens_h, config.tokens_w
    index = []
    for s, grids in enumerate(token_grids):
        nt, gh, gw = grids.shape
        if gh < wh or gw < ww:
            continue
        for t0 in range(nt - t_need + 1):
            for oy in range(gh - wh + 1):
                for ox in range(gw - ww + 1):
                    index.append((s, t0, oy, ox))
    return index, token_grids


def _window_tokens(token_grids, item, config: ForecasterConfig) -> np.ndarray:
    s, t0, oy, ox = item
    t_need, wh, ww = config.context_frames, config.tokens_h, config.tokens_w
    block = token_grids[s][t0 : t0 + t_need, oy : oy + wh, ox : ox + ww]
    return block.reshape(-1)


def train_forecaster(
    manifest: DatasetManifest | str | Path,
    tokenizer_ckpt: TokenizerCheckpoint,
    config: ForecasterConfig = ForecasterConfig(),
    schedule: ForecasterSchedule = ForecasterSchedule(),
    log_path: str | Path | None = None,
) -> ForecasterCheckpoint:
    """Train the forecaster on token windows from a frozen tokenizer.

    The tokenizer is only read (its content hash is recorded in the
    checkpoint); training is deterministic given the schedule seed.
    """
    if config.vocab_size != tokenizer_ckpt.config.codebook_size:
        raise ForecasterError(
            f"vocab_size {config.vocab_size} != tokenizer codebook {tokenizer_ckpt.config.codebook_size}"
        )
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)

    def encode_split(split):
        grids = []
        for seq in manifest.load_split(split):
            grids.append(encode_frames(tokenizer_ckpt, seq.values))
        return grids

    train_grids = encode_split("train")
    val_grids = encode_split("val")
    if not train_grids:
        raise ForecasterError("manifest has no train sequences")
    index, train_grids = build_token_windows(train_grids, config)
    if not index:
        raise ForecasterError("no training windows: token grids smaller than the model window")

    val_windows = []
    for grids in val_grids:
        nt, gh, gw = grids.shape
        oy, ox = (gh - config.tokens_h) // 2, (gw - config.tokens_w) // 2
        for t0 in range(nt - config.context_frames + 1):
            val_windows.append(
                grids[t0 : t0 + config.context_frames, oy : oy + config.tokens_h, ox : ox + config.tokens_w].reshape(-1)
            )
    val_windows = np.stack(val_windows[: schedule.val_windows_cap]) if val_windows else None

    rng = np.random.default_rng(schedule.seed)
    model = ForecasterModel(config, rng)
    params = model.params()
    opt = nn.Adam(params, lr=schedule.lr)
    ckpt = ForecasterCheckpoint(model)

    init_val = heldout_cross_entropy(ckpt, val_windows) if val_windows is not None else None
    order_rng = np.random.default_rng(derive_seed(schedule.seed, 1))
    records = []
    snapshot = nn.l2_snapshot(params)
    aborted = False

    with blas_single_thread():
        for step in range(1, schedule.steps + 1):
            picks = order_rng.integers(0, len(index), size=schedule.batch_size)
            batch = np.stack([_window_tokens(train_grids, index[p], config) for p in picks]).astype(np.int64)
            logits, cache = model.forward(batch, want_cache=True)
            loss, dlogits = cross_entropy_and_grad(logits, batch)
            if not math.isfinite(loss):
                nn.restore_snapshot(params, snapshot)
                aborted = True
                records.append({"step": step, "event": "divergence_abort"})
                break
            snapshot = nn.l2_snapshot(params)
            grads = model.backward(cache, dlogits)
            opt.step(grads)
            rec = {"step": step, "loss": loss}
            if val_windows is not None and schedule.val_every and (step % schedule.val_every == 0 or step == schedule.steps):
                rec["val_loss"] = heldout_cross_entropy(ckpt, val_windows)
            records.append(rec)

    final_val = heldout_cross_entropy(ckpt, val_windows) if val_windows is not None else None
    ckpt.step = len(records)
    ckpt.meta = {
        "tokenizer_hash": tokenizer_ckpt.content_hash(),
        "init_val_loss": init_val,
        "final_val_loss": final_val,
        "aborted": aborted,
        "seed": schedule.seed,
    }
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return ckpt
