"""Optimization loop: AdamW with decoupled weight decay, linear-warmup
cosine schedule, EMA shadow weights, evaluation metrics, and a small
deterministic fit() harness used by the CLI and the acceptance suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from .data import collate
from .errors import ConfigError, DataError, NumericError
from .tensor import GradTape, softmax_cross_entropy


@dataclass
class TrainConfig:
    total_iters: int = 1000
    warmup_iters: int = 100
    lr_max: float = 1e-3
    lr_min: float = 2e-5
    weight_decay: float = 0.05
    batch_size: int = 32
    ema_momentum: float = 1e-4
    ema_enabled: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.lr_min <= self.lr_max):
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.warmup_iters > self.total_iters:
            raise ConfigError(f"warmup_iters {self.warmup_iters} exceeds total_iters {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class TrainState:
    """Parameters plus Adam moments, EMA shadow, and the step counter."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.ema = ({k: p.data.copy() for k, p in params.items()}
                    if cfg.ema_enabled else None)
        self.step = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> lr_max, then cosine anneal lr_max -> lr_min."""
    if step < 0 or step > cfg.total_iters:
        raise ConfigError(f"step {step} outside [0, {cfg.total_iters}]")
    if cfg.warmup_iters > 0 and step <= cfg.warmup_iters:
        return cfg.lr_max * (step / cfg.warmup_iters)
    span = max(1, cfg.total_iters - cfg.warmup_iters)
    progress = (step - cfg.warmup_iters) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def train_step(state: TrainState, batch, model_cfg, cfg: TrainConfig, decay=None) -> float:
    """One forward/backward/AdamW update; returns the scalar loss."""
    params = state.params
    for p in params.values():
        p.zero_grad()
    with GradTape() as tape:
        logits = M.forward(batch, params, model_cfg)
        loss = softmax_cross_entropy(logits, batch.labels)
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise NumericError(f"non-finite loss {loss_value} at step {state.step}")
    tape.backward(loss)

    if decay is None:
        decay = M.decay_mask(params)
    lr = lr_at(min(state.step, cfg.total_iters), cfg)
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if decay[name] and cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update
    if state.ema is not None:
        mom = cfg.ema_momentum
        for name, p in params.items():
            shadow = state.ema[name]
            shadow += mom * (p.data - shadow)
    state.step = t
    return loss_value


def evaluate(params, batches, model_cfg) -> dict:
    """Top-1 accuracy, mean loss, and a confusion matrix over all batches."""
    total = 0
    correct = 0
    loss_sum = 0.0
    confusion = np.zeros((model_cfg.num_classes, model_cfg.num_classes), dtype=np.int64)
    for batch in batches:
        logits = M.forward(batch, params, model_cfg)
        loss = softmax_cross_entropy(logits, batch.labels)
        preds = logits.data.argmax(axis=1)
        total += batch.size
        correct += int((preds == batch.labels).sum())
        loss_sum += loss.item() * batch.size
        np.add.at(confusion, (batch.labels, preds), 1)
    if total == 0:
        raise DataError("empty dataset")
    return {
        "top1": 100.0 * correct / total,
        "loss": loss_sum / total,
        "confusion": confusion,
    }


# ---------------------------------------------------------------------------
# fit harness
# ---------------------------------------------------------------------------

def _identity_encode(sample, rng, train, index):
    return np.asarray(sample, dtype=np.uint8)


def eval_batches(samples, labels, model_cfg, batch_size, encode_fn=None, eval_seed=0):
    """Deterministic evaluation batches: per-sample rng fixed by index."""
    encode_fn = encode_fn or _identity_encode
    seqs = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(eval_seed, i)))
        seqs.append(encode_fn(s, rng, False, i))
    batches = []
    for start in range(0, len(seqs), batch_size):
        chunk = slice(start, start + batch_size)
        batches.append(collate(seqs[chunk], labels[chunk],
                               max_input_bytes=model_cfg.max_input_bytes))
    return batches


def fit(model_cfg, cfg: TrainConfig, samples, labels, val_samples=None, val_labels=None,
        *, encode_fn=None, state=None, eval_every=0, early_stop_top1=None,
        metrics_path=None, verbose=False):
    """Train for cfg.total_iters steps with reproducible data order.

    encode_fn(sample, rng, train, index) -> uint8 array lets callers attach
    augmentation, obfuscation, byte-order, or camera pipelines. Returns
    (state, history) where history is a list of metric dicts.
    """
    encode_fn = encode_fn or _identity_encode
    labels = np.asarray(labels, dtype=np.int64)
    n = len(samples)
    if n == 0:
        raise DataError("no training samples")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, order_rng, noise_rng = (np.random.default_rng(s) for s in seeds)
    if state is None:
        params = M.init_params(model_cfg, init_rng)
        state = TrainState(params, cfg)
    decay = M.decay_mask(state.params)

    val = None
    if val_samples is not None:
        val = eval_batches(val_samples, np.asarray(val_labels, dtype=np.int64),
                           model_cfg, cfg.batch_size, encode_fn)

    history = []
    metrics_file = open(metrics_path, "a") if metrics_path else None

    def log_eval(step):
        metrics = evaluate(state.params, val, model_cfg)
        record = {"step": step, "split": "val",
                  "top1": metrics["top1"], "loss": metrics["loss"]}
        history.append(record)
        if metrics_file:
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()
        if verbose:
            print(f"step {step}: val top1 {metrics['top1']:.2f} loss {metrics['loss']:.4f}")
        return metrics["top1"]

    try:
        order = order_rng.permutation(n)
        cursor = 0
        while state.step < cfg.total_iters:
            if cursor + cfg.batch_size > n:
                order = order_rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            seqs = [encode_fn(samples[i], noise_rng, True, int(i)) for i in idx]
            batch = collate(seqs, labels[idx], max_input_bytes=model_cfg.max_input_bytes)
            loss = train_step(state, batch, model_cfg, cfg, decay)
            if verbose and state.step % 50 == 0:
                print(f"step {state.step}: train loss {loss:.4f}")
            if val is not None and eval_every and state.step % eval_every == 0:
                top1 = log_eval(state.step)
                if early_stop_top1 is not None and top1 >= early_stop_top1:
                    break
        if val is not None and (not history or history[-1]["step"] != state.step):
            log_eval(state.step)
    finally:
        if metrics_file:
            metrics_file.close()
    return state, history
