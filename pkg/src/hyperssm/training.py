"""Optimisation: AdamW, warmup, clipping, the triplet training loop, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import geometry as geo
from .autograd import Tensor
from .encoder import EncoderConfig, HyperbolicEncoder, ManifoldConfig, SentenceEncoder, Vocab, build_vocab
from .evaluation import calibrate_threshold, embed_entities, pair_scores, report_from_scores
from .geometry import ManifoldKind
from .hierarchy import LabeledPair, NegativeSampler, Taxonomy, sample_triplets
from .objectives import LossConfig, batch_contrastive_loss, hyperbolic_loss

log = logging.getLogger(__name__)

MIN_C = 1e-4
MAGIC = b"HIMCKPT1"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss was NaN on two consecutive steps."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_target: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    stabilize_every: int = 100
    dropout: float = 0.2
    seed: int = 0
    hard_fraction: float = 0.5
    triplets_per_epoch: int | None = None
    curvature_lr_scale: float = 0.1
    scale_lr_scale: float = 10.0
    manifold: ManifoldConfig = field(default_factory=ManifoldConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.manifold, dict):
            self.manifold = ManifoldConfig(**self.manifold)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ValueError("epochs >= 0, batch_size >= 1, warmup_steps >= 0 required")
        if self.lr_target < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr and weight decay must be >= 0, clip_norm > 0")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings tuned for the single-core desk profile (see the decisions log)."""
        kw = dict(batch_size=32, lr_target=1e-3, hard_fraction=0.8)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["manifold"]["kind"] = ManifoldKind(self.manifold.kind).value
        return d


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


# -----------------------------------------------------------------------------
# optimiser pieces
# -----------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_target`` over ``warmup_steps``, then constant."""
    if cfg.warmup_steps == 0:
        return cfg.lr_target
    return cfg.lr_target * min(1.0, step / cfg.warmup_steps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    no_decay: Sequence[str] = (),
    lr_scale: dict[str, float] | None = None,
) -> bool:
    """One AdamW update in place. Returns False (and changes nothing) on non-finite grads.

    Decay is decoupled: ``p -= lr * wd * p`` alongside the Adam step, skipped
    for names in ``no_decay``. ``lr_scale`` multiplies the rate of individual
    parameters. A ``curvature`` entry is clamped to >= 1e-4.
    """
    lr_scale = lr_scale or {}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return False
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        rate = lr * lr_scale.get(name, 1.0)
        if weight_decay and name not in no_decay:
            p.data = p.data - rate * weight_decay * p.data
        p.data = p.data - rate * update
    if "curvature" in params:
        params["curvature"].data = np.maximum(params["curvature"].data, MIN_C)
    return True


# -----------------------------------------------------------------------------
# model construction
# -----------------------------------------------------------------------------


def build_model(
    texts: Sequence[str],
    manifold: ManifoldConfig | None = None,
    seed: int = 0,
    encoder_config: EncoderConfig | None = None,
    **encoder_overrides,
) -> HyperbolicEncoder:
    """Vocabulary from ``texts`` plus a freshly initialised (desk profile) encoder."""
    vocab = build_vocab(texts)
    if encoder_config is None:
        enc_cfg = EncoderConfig.desk(len(vocab), **encoder_overrides)
    else:
        enc_cfg = dataclasses.replace(encoder_config, vocab_size=len(vocab), **encoder_overrides)
    return HyperbolicEncoder(SentenceEncoder(enc_cfg, vocab, seed=seed), manifold or ManifoldConfig())


# -----------------------------------------------------------------------------
# training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: HyperbolicEncoder
    state: OptimizerState
    history: list[dict]
    epoch: int = 0
    rng: np.random.Generator | None = None
    stabilize_checks: list[bool] = field(default_factory=list)


def _grads_by_name(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }


def stabilize(model: HyperbolicEncoder, cached: np.ndarray | None) -> np.ndarray | None:
    """Re-clamp ``c``, validate ``gamma`` and pull cached points back onto the manifold."""
    model.curvature.data = np.maximum(model.curvature.data, MIN_C)
    if not np.isfinite(model.scale.data):
        raise TrainingDiverged("gamma became non-finite")
    if cached is None or model.kind is ManifoldKind.EUCLIDEAN:
        return cached
    return geo.stabilize_point(cached, model.c, model.kind)


def triplet_loss(model: HyperbolicEncoder, tax: Taxonomy, batch, cfg: TrainConfig, rng, train=True):
    """Encode the distinct entities of a triplet batch once and score the hinges."""
    nodes = sorted({n for t in batch for n in (t.anchor, t.positive, t.negative)})
    row = {n: i for i, n in enumerate(nodes)}
    ids, mask = model.encoder.tokenize([tax.label(n) for n in nodes])
    emb = model.embed(ids, mask, train=train, rng=rng)
    a = emb[[row[t.anchor] for t in batch]]
    p = emb[[row[t.positive] for t in batch]]
    n = emb[[row[t.negative] for t in batch]]
    c = model.curvature if model.manifold.learn_curvature else model.c
    loss = hyperbolic_loss(a, p, n, c, model.kind, cfg.loss)
    return loss, emb


def validation_f1(model: HyperbolicEncoder, tax: Taxonomy, pairs: Sequence[LabeledPair]) -> float:
    """Best-threshold F1 on ``pairs`` (the threshold is calibrated on the same pairs)."""
    scores = pair_scores(model, tax, pairs, embed_entities(model, tax))
    labels = [p.label for p in pairs]
    if all(labels) or not any(labels):
        return float("nan")
    thr, _ = calibrate_threshold(scores, labels)
    return report_from_scores(scores, pairs, thr).f1


def train(
    model: HyperbolicEncoder,
    tax: Taxonomy,
    train_pairs: Sequence[tuple[str, str]],
    cfg: TrainConfig,
    val_pairs: Sequence[LabeledPair] | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume: TrainResult | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Triplet training with warmup, clipping, AdamW and periodic stabilisation.

    ``train_pairs`` are the (descendant, ancestor) positives anchors may use.
    One epoch draws ``triplets_per_epoch`` triplets (default: one per train
    pair), resampled every epoch. ``resume`` continues a previous result at
    its next epoch; combined with checkpoints this reproduces an
    uninterrupted run exactly. Per-epoch metrics are appended to
    ``metrics_path`` as JSON lines.
    """
    model.encoder.config = dataclasses.replace(model.encoder.config, dropout=cfg.dropout)
    if resume is not None:
        state, history, start, rng = resume.state, list(resume.history), resume.epoch, resume.rng
    else:
        state, history, start = OptimizerState(), [], 0
        rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, state, history, start, rng)
    params = model.trainable()
    no_decay = ("curvature", "scale")
    lr_scale = {"curvature": cfg.curvature_lr_scale, "scale": cfg.scale_lr_scale}
    sampler = NegativeSampler(tax)
    per_epoch = cfg.triplets_per_epoch or len(train_pairs)
    steps_per_epoch = max(1, math.ceil(per_epoch / cfg.batch_size))
    cached = None
    t0 = time.perf_counter() - (history[-1]["wallclock_s"] if history else 0.0)
    for epoch in range(start, cfg.epochs):
        triplets = sample_triplets(tax, per_epoch, cfg.hard_fraction, rng, train_pairs, sampler)
        losses = []
        nan_streak = 0
        good = _snapshot(model, state)
        for s in range(steps_per_epoch):
            batch = triplets[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if not batch:
                break
            for p in params.values():
                p.grad = None
            with ag.Tape() as tape:
                loss, emb = triplet_loss(model, tax, batch, cfg, rng)
            if not np.isfinite(loss.data):
                nan_streak += 1
                log.warning("non-finite loss at step %d", state.step)
                if nan_streak >= 2:
                    _restore(model, state, good)
                    if checkpoint_path is not None:
                        save_checkpoint(model, result, checkpoint_path, cfg)
                    raise TrainingDiverged(f"loss NaN twice in a row at step {state.step}")
                continue
            nan_streak = 0
            good = _snapshot(model, state)
            ag.backward(loss, tape)
            grads, _ = clip_gradients(_grads_by_name(params), cfg.clip_norm)
            optimizer_step(params, grads, state, lr_at(state.step, cfg), cfg.weight_decay,
                           no_decay=no_decay, lr_scale=lr_scale)
            cached = emb.data
            if cfg.stabilize_every and state.step % cfg.stabilize_every == 0:
                cached = stabilize(model, cached)
                result.stabilize_checks.append(geo.check_on_manifold(cached, model.c, model.kind))
            losses.append(float(loss.data))
            if on_step is not None:
                on_step(state.step, float(loss.data))
        val_f1 = validation_f1(model, tax, val_pairs) if val_pairs else None
        record = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_f1": val_f1,
            "c": model.c,
            "gamma": model.gamma,
            "wallclock_s": round(time.perf_counter() - t0, 3),
        }
        history.append(record)
        log.info("epoch %d loss %.4f val_f1 %s c %.4f gamma %.4f", record["epoch"],
                 record["train_loss"], val_f1, model.c, model.gamma)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        result.epoch = epoch + 1
        if checkpoint_path is not None:
            save_checkpoint(model, result, checkpoint_path, cfg)
    return result


def _snapshot(model: HyperbolicEncoder, state: OptimizerState):
    return (
        {k: p.data.copy() for k, p in model.parameters().items()},
        {k: v.copy() for k, v in state.m.items()},
        {k: v.copy() for k, v in state.v.items()},
        state.step,
    )


def _restore(model: HyperbolicEncoder, state: OptimizerState, snap) -> None:
    params, m, v, step = snap
    for k, p in model.parameters().items():
        p.data = params[k]
    state.m, state.v, state.step = m, v, step


# -----------------------------------------------------------------------------
# sentence-pair pretraining
# -----------------------------------------------------------------------------


def pretrain(
    encoder: SentenceEncoder,
    pairs: Sequence[tuple[str, str]],
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
) -> list[dict]:
    """In-batch contrastive training on ``(text_a, text_b)`` pairs in unit-norm space."""
    if len(pairs) < 2:
        raise ValueError("pretraining needs at least two sentence pairs")
    encoder.config = dataclasses.replace(encoder.config, dropout=cfg.dropout)
    rng = np.random.default_rng(cfg.seed)
    params = dict(encoder.params)
    state = OptimizerState()
    history = []
    half = max(1, cfg.batch_size // 2)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(order), half):
            chunk = [pairs[i] for i in order[s : s + half]]
            if len(chunk) < 2 and len(order) >= 2:
                chunk = chunk + [pairs[order[0]]]
            k = len(chunk)
            texts = [a for a, _ in chunk] + [b for _, b in chunk]
            positive = np.concatenate([np.arange(k, 2 * k), np.arange(k)])
            for p in params.values():
                p.grad = None
            with ag.Tape() as tape:
                ids, mask = encoder.tokenize(texts)
                u, _ = geo.squash_normalize(encoder.forward(ids, mask, train=True, rng=rng))
                loss = batch_contrastive_loss(u, positive, cfg.loss.temperature)
            ag.backward(loss, tape)
            grads, _ = clip_gradients(_grads_by_name(params), cfg.clip_norm)
            optimizer_step(params, grads, state, lr_at(state.step, cfg), cfg.weight_decay)
            losses.append(float(loss.data))
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                  "wallclock_s": round(time.perf_counter() - t0, 3)}
        history.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
    return history


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------


def _tensors_for(model: HyperbolicEncoder, state: OptimizerState | None) -> dict[str, np.ndarray]:
    out = {k: p.data for k, p in model.parameters().items()}
    if state is not None:
        for k in sorted(state.m):
            out[f"opt.m.{k}"] = state.m[k]
            out[f"opt.v.{k}"] = state.v[k]
    return out


def save_checkpoint(
    model: HyperbolicEncoder,
    result: TrainResult | OptimizerState | None,
    path: str | Path,
    cfg: TrainConfig | None = None,
) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE payloads``.

    The header holds the model/train config, vocabulary, tensor manifest,
    optimiser step counters, RNG state and metric history. The file is
    written to a temporary name and renamed, so readers never see a partial
    checkpoint.
    """
    if isinstance(result, TrainResult):
        state, history, epoch, rng = result.state, result.history, result.epoch, result.rng
    else:
        state, history, epoch, rng = result, [], 0, None
    tensors = _tensors_for(model, state)
    manifest, offset = [], 0
    for name, arr in tensors.items():
        nbytes = arr.size * 8
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                         "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": CKPT_VERSION,
        "config": model.config_dict(),
        "train_config": cfg.to_dict() if cfg is not None else None,
        "vocab": model.encoder.vocab.tokens,
        "manifest": manifest,
        "optimizer": None if state is None else {"step": state.step, "skipped": state.skipped},
        "rng": None if rng is None else rng.bit_generator.state,
        "epoch": epoch,
        "history": history,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[TrainResult, dict]:
    """Inverse of :func:`save_checkpoint`; returns the result and the raw header."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    body = raw[16 + hlen :]
    expected = sum(e["nbytes"] for e in header["manifest"])
    if len(body) != expected:
        raise CheckpointError(f"payload is {len(body)} bytes, manifest expects {expected}")
    tensors = {}
    for e in header["manifest"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).astype(float).reshape(e["shape"])

    enc_cfg = EncoderConfig(**header["config"]["encoder"])
    man_cfg = ManifoldConfig(**header["config"]["manifold"])
    vocab = Vocab(list(header["vocab"]))
    model_params = {
        k: Tensor(v.copy(), requires_grad=True, name=k)
        for k, v in tensors.items()
        if not k.startswith("opt.") and k not in ("curvature", "scale")
    }
    model = HyperbolicEncoder(SentenceEncoder(enc_cfg, vocab, params=model_params), man_cfg)
    model.curvature.data = tensors["curvature"].copy()
    model.scale.data = tensors["scale"].copy()
    state = OptimizerState()
    if header["optimizer"] is not None:
        state.step = header["optimizer"]["step"]
        state.skipped = header["optimizer"]["skipped"]
        for k, v in tensors.items():
            if k.startswith("opt.m."):
                state.m[k[6:]] = v.copy()
            elif k.startswith("opt.v."):
                state.v[k[6:]] = v.copy()
    rng = None
    if header["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    result = TrainResult(model, state, list(header["history"]), header["epoch"], rng)
    return result, header
