"""Ensemble nowcast inference: encode context, generate tokens, decode.

Future token grids are generated autoregressively in row-major order. For
domains larger than the model's token window the context window slides
across the domain: each target token is predicted from the model-sized
spatiotemporal block whose last-frame window holds the target at the
bottom-right-most valid slot (clamped at domain edges), so every
already-generated neighbour that fits is in context and ungenerated
positions never are. Ensemble members redo the generation with independent
derived seeds and multinomial draws.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from tokencast.backend import blas_single_thread
from tokencast.forecaster import ForecasterCheckpoint, ForecasterError, flatten_spatiotemporal
from tokencast.grid import PreprocessSpec, RadarSequence, derive_seed
from tokencast.nn import softmax
from tokencast.tokenizer import TokenizerCheckpoint, decode_grids, encode_frames


class InferenceError(ValueError):
    """Contract violation in nowcast generation."""


class CheckpointCompatError(InferenceError):
    """Forecaster was trained against a different tokenizer."""


@dataclass(frozen=True)
class Sampling:
    """Token selection rule applied to the forecaster's output distribution."""

    mode: str = "multinomial"
    top_k: int | None = None
    temperature: float | None = None

    def __post_init__(self):
        if self.mode not in ("multinomial", "greedy", "top_k", "temperature"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "top_k" and (self.top_k is None or self.top_k < 1):
            raise ValueError("top_k sampling needs top_k >= 1")
        if self.mode == "temperature" and (self.temperature is None or self.temperature <= 0):
            raise ValueError("temperature sampling needs temperature > 0")


@dataclass(frozen=True)
class NowcastRequest:
    """Context frames plus generation settings for one ensemble nowcast."""

    context: RadarSequence
    lead_steps: int
    n_members: int = 1
    sampling: Sampling = Sampling()
    seed: int = 0

    def __post_init__(self):
        if self.lead_steps < 1 or self.n_members < 1:
            raise ValueError("lead_steps and n_members must be at least 1")


@dataclass
class EnsembleNowcast:
    """n members x m lead steps of decoded fields plus generation metadata."""

    members: np.ndarray  # (n, m, H, W) dBZ
    token_grids: np.ndarray  # (n, m, gh, gw) int32
    member_seeds: list[int]
    timestep_minutes: int
    placements: list[tuple[tuple[int, int], tuple[int, int]]]
    step_seconds: list[float] = field(default_factory=list)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def lead_minutes(self) -> list[int]:
        return [(i + 1) * self.timestep_minutes for i in range(self.members.shape[1])]

    def member_sequence(self, i: int) -> RadarSequence:
        return RadarSequence(self.members[i], timestep_minutes=self.timestep_minutes)


def sample_token(probs: np.ndarray, sampling: Sampling, rng: np.random.Generator) -> int:
    """Draw one codebook index from a probability vector.

    multinomial: inverse-CDF draw with one uniform from ``rng``; greedy:
    argmax with ties to the lowest index; temperature: p^(1/tau)
    renormalized then drawn; top_k: all but the k largest zeroed then
    renormalized and drawn.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or (p < 0).any() or not np.isfinite(p).all():
        raise InferenceError("invalid probability vector")
    if sampling.mode == "greedy":
        return int(np.argmax(p))
    if sampling.mode == "temperature":
        p = np.power(p, 1.0 / sampling.temperature)
    elif sampling.mode == "top_k":
        k = min(sampling.top_k, p.size)
        keep = np.argsort(-p, kind="stable")[:k]
        masked = np.zeros_like(p)
        masked[keep] = p[keep]
        p = masked
    total = p.sum()
    if total <= 0:
        raise InferenceError("probability vector is not normalizable")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1))


def window_placements(
    domain_hw: tuple[int, int], window_hw: tuple[int, int]
) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """((target_r, target_c), (window_r, window_c)) for every domain token.

    Targets are visited row-major; the window top-left puts the target at
    its bottom-right-most in-window slot, which clamps to (0, 0) near the
    top/left edges. One placement per target, so a frame always costs
    domain_h * domain_w generation calls.
    """
    gh, gw = domain_hw
    wh, ww = window_hw
    if gh < wh or gw < ww:
        raise InferenceError(f"domain {domain_hw} smaller than model window {window_hw}")
    out = []
    for r in range(gh):
        for c in range(gw):
            wr = min(max(r - wh + 1, 0), gh - wh)
            wc = min(max(c - ww + 1, 0), gw - ww)
            out.append(((r, c), (wr, wc)))
    return out


def _probs_from_logits(logits: np.ndarray) -> np.ndarray:
    return softmax(logits.astype(np.float64))


def generate_next_frame(
    token_history: list[np.ndarray],
    fc_ckpt: ForecasterCheckpoint,
    sampling: Sampling,
    rng: np.random.Generator,
) -> np.ndarray:
    """Generate the next token grid from the T-1 most recent grids.

    The domain is the history grids' shape. When it equals the model
    window the frame is generated with one cached autoregressive pass;
    larger domains use the sliding window placements.
    """
    cfg = fc_ckpt.config
    need = cfg.context_frames - 1
    if len(token_history) != need:
        raise InferenceError(f"need {need} history grids, got {len(token_history)}")
    gh, gw = token_history[0].shape
    wh, ww = cfg.tokens_h, cfg.tokens_w
    placements = window_placements((gh, gw), (wh, ww))
    model = fc_ckpt.model

    if (gh, gw) == (wh, ww):
        cache = model.new_cache(1)
        prefix = flatten_spatiotemporal(token_history).astype(np.int64)
        logits = model.prefill(cache, prefix[None, :])
        new = np.empty((gh, gw), dtype=np.int32)
        for (r, c), _ in placements:
            tok = sample_token(_probs_from_logits(logits[0]), sampling, rng)
            new[r, c] = tok
            if (r, c) != (gh - 1, gw - 1):
                logits = model.decode_step(cache, np.array([tok], dtype=np.int64))
        return new

    new = np.full((gh, gw), -1, dtype=np.int32)
    for (r, c), (wr, wc) in placements:
        hist_block = [g[wr : wr + wh, wc : wc + ww] for g in token_history]
        ctx = flatten_spatiotemporal(hist_block)
        in_window = (r - wr) * ww + (c - wc)
        if in_window:
            frame_prefix = new[wr : wr + wh, wc : wc + ww].reshape(-1)[:in_window]
            if (frame_prefix < 0).any():
                raise InferenceError("window placement exposed ungenerated context")
            ctx = np.concatenate([ctx, frame_prefix])
        logits = model.forward(ctx[None, :].astype(np.int64))[0, -1]
        new[r, c] = sample_token(_probs_from_logits(logits), sampling, rng)
    return new


def check_compatible(tok_ckpt: TokenizerCheckpoint, fc_ckpt: ForecasterCheckpoint) -> None:
    expected = fc_ckpt.tokenizer_hash
    if expected is None:
        return
    actual = tok_ckpt.content_hash()
    if actual != expected:
        raise CheckpointCompatError(
            f"forecaster was trained against tokenizer {expected[:12]}..., got {actual[:12]}..."
        )


def nowcast(
    req: NowcastRequest,
    tok_ckpt: TokenizerCheckpoint,
    fc_ckpt: ForecasterCheckpoint,
    preprocess: PreprocessSpec = PreprocessSpec(),
    allow_hash_mismatch: bool = False,
) -> EnsembleNowcast:
    """Produce an ensemble nowcast from T-1 context frames.

    Member ``i`` runs with ``derive_seed(req.seed, i)``; members share no
    state, so member i of an n-member run is bit-identical to member 0 of
    a 1-member run seeded with the derived value.
    """
    cfg = fc_ckpt.config
    if cfg.vocab_size != tok_ckpt.config.codebook_size:
        raise CheckpointCompatError(
            f"forecaster vocab {cfg.vocab_size} != tokenizer codebook {tok_ckpt.config.codebook_size}"
        )
    if not allow_hash_mismatch:
        check_compatible(tok_ckpt, fc_ckpt)
    need = cfg.context_frames - 1
    if len(req.context) != need:
        raise InferenceError(f"context must hold exactly {need} frames, got {len(req.context)}")

    context_grids = [g for g in encode_frames(tok_ckpt, req.context.values)]
    gh, gw = context_grids[0].shape
    placements = window_placements((gh, gw), (cfg.tokens_h, cfg.tokens_w))

    n, m = req.n_members, req.lead_steps
    token_grids = np.empty((n, m, gh, gw), dtype=np.int32)
    member_seeds = [derive_seed(req.seed, i) for i in range(n)]
    step_seconds = [0.0] * m
    with blas_single_thread():
        for i in range(n):
            rng = np.random.default_rng(member_seeds[i])
            history = list(context_grids)
            for step in range(m):
                t0 = time.perf_counter()
                new = generate_next_frame(history, fc_ckpt, req.sampling, rng)
                step_seconds[step] += time.perf_counter() - t0
                token_grids[i, step] = new
                history = history[1:] + [new]

    flat = token_grids.reshape(n * m, gh, gw)
    fields = decode_grids(tok_ckpt, flat, preprocess)
    members = fields.reshape(n, m, fields.shape[1], fields.shape[2])
    return EnsembleNowcast(
        members=members,
        token_grids=token_grids,
        member_seeds=member_seeds,
        timestep_minutes=req.context.timestep_minutes,
        placements=placements,
        step_seconds=step_seconds,
    )
