"""Pre-training loop: Adam with decoupled weight decay, linear warmup
then linear decay to zero, global-norm gradient clipping.

All randomness (batch composition, masking, dropout) is keyed by
(seed, step), so an interrupted run resumed from a checkpoint replays
the exact same trajectory.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, NonFiniteLoss
from .model import (TransformerParams, backward, forward, save_checkpoint,
                    task_accuracies, cwp_loss, dup_loss, mlm_loss, total_loss)

log = logging.getLogger("asmlm.trainer")

METRICS_HEADER = ["step", "loss", "mlm_loss", "cwp_loss", "dup_loss",
                  "mlm_acc", "cwp_acc", "dup_acc", "lr", "seconds"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 2000
    learning_rate: float = 1e-4
    warmup_steps: int | None = None  # default: 10% of total_steps
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    gradient_clip_norm: float = 1.0
    seed: int = 0
    task_set: tuple = ("MLM", "CWP", "DUP")
    eval_every: int = 0       # 0 disables periodic held-out evaluation
    checkpoint_every: int = 0  # 0: only a final checkpoint is written

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = self.total_steps // 10
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.warmup_steps > self.total_steps:
            raise InvalidConfig("warmup_steps must be <= total_steps")


@dataclass
class TrainMetrics:
    step: int
    loss: float
    mlm_loss: float
    cwp_loss: float
    dup_loss: float
    mlm_acc: float
    cwp_acc: float
    dup_acc: float
    lr: float
    seconds: float  # measured wall-clock; not serialized (see write_metrics)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """1-based step; linear warmup to the peak then linear decay to 0."""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def _decayable(name: str) -> bool:
    base = name.rsplit(".", 1)[-1]
    return not (base.endswith("_g") or base.endswith("_b")
                or base in ("bq", "bk", "bv", "bo", "ffn_b1", "ffn_b2", "mlm_bias"))


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """In-place global-norm clipping; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if clip_norm > 0 and total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total


def init_opt_state(params: TransformerParams) -> dict:
    state = {}
    for name, arr in params.tensors.items():
        state["adam_m." + name] = np.zeros_like(arr)
        state["adam_v." + name] = np.zeros_like(arr)
    return state


def adam_step(params: TransformerParams, grads: dict, opt_state: dict,
              step: int, lr: float, cfg: TrainConfig) -> None:
    """One AdamW update (decoupled weight decay, biases and layer-norm
    parameters excluded from decay). step is 1-based."""
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for name, p in params.tensors.items():
        g = grads[name]
        m = opt_state["adam_m." + name]
        v = opt_state["adam_v." + name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if cfg.weight_decay and _decayable(name):
            update = update + cfg.weight_decay * p
        p -= lr * update


def train(params: TransformerParams, stream, cfg: TrainConfig,
          ckpt_dir=None, start_step: int = 0, opt_state: dict | None = None,
          heldout_batches=None):
    """Run the optimization loop over `stream` (an iterable of
    MaskedBatch whose first element corresponds to step start_step+1).

    Returns (params, history). Raises NonFiniteLoss on a non-finite
    total loss, after noting the last good checkpoint.
    """
    if opt_state is None:
        opt_state = init_opt_state(params)
    task_set = frozenset(cfg.task_set) & params.config.task_set
    history: list[TrainMetrics] = []
    last = {"CWP": 0.0, "DUP": 0.0}
    last_ckpt = None
    step = start_step
    for batch in stream:
        step += 1
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, step, 2]) \
            if params.config.dropout_rate > 0 else None
        loss, grads, out = backward(params, batch, task_set,
                                    train_mode=True, rng=rng)
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, last_ckpt)
        clip_gradients(grads, cfg.gradient_clip_norm)
        lr = lr_at(step, cfg)
        adam_step(params, grads, opt_state, step, lr, cfg)

        acc = task_accuracies(out, batch)
        for key in ("CWP", "DUP"):
            if acc[key] is not None:
                last[key] = acc[key]
        history.append(TrainMetrics(
            step=step, loss=loss,
            mlm_loss=mlm_loss(out, batch) if "MLM" in task_set else 0.0,
            cwp_loss=cwp_loss(out, batch) if "CWP" in task_set else 0.0,
            dup_loss=dup_loss(out, batch) if "DUP" in task_set else 0.0,
            mlm_acc=acc["MLM"] if acc["MLM"] is not None else 0.0,
            cwp_acc=last["CWP"], dup_acc=last["DUP"],
            lr=lr, seconds=time.perf_counter() - t0))

        if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir, params, step, cfg.seed, opt_state)
            last_ckpt = ckpt_dir
        if cfg.eval_every and heldout_batches and step % cfg.eval_every == 0:
            ev = evaluate_heldout(params, heldout_batches)
            log.info("step %d heldout: %s", step, ev)
        if step % 200 == 0 or step == cfg.total_steps:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
    if ckpt_dir:
        save_checkpoint(ckpt_dir, params, step, cfg.seed, opt_state)
    return params, history


def evaluate_heldout(params: TransformerParams, batches) -> dict:
    """Inference-mode losses and accuracies over held-out batches.

    The split feeding `batches` must be function-disjoint from training;
    that is the caller's contract.
    """
    task_set = params.config.task_set
    tot = {"loss": 0.0, "mlm_loss": 0.0, "cwp_loss": 0.0, "dup_loss": 0.0}
    counts = {"MLM": [0, 0], "CWP": [0, 0], "DUP": [0, 0]}
    n = 0
    from .sampler import TASK_CWP, TASK_DUP
    for batch in batches:
        out = forward(params, batch, train_mode=False)
        tot["loss"] += total_loss(out, batch, task_set)
        tot["mlm_loss"] += mlm_loss(out, batch)
        tot["cwp_loss"] += cwp_loss(out, batch)
        tot["dup_loss"] += dup_loss(out, batch)
        sup = batch.mlm_targets >= 0
        if sup.any():
            pred = out.mlm_logits[sup].argmax(axis=-1)
            counts["MLM"][0] += int((pred == batch.mlm_targets[sup]).sum())
            counts["MLM"][1] += int(sup.sum())
        for key, logit, kind in (("CWP", out.cwp_logit, TASK_CWP),
                                 ("DUP", out.dup_logit, TASK_DUP)):
            rows = batch.task_kinds == kind
            if rows.any():
                hit = (logit[rows] > 0).astype(int) == batch.task_labels[rows]
                counts[key][0] += int(hit.sum())
                counts[key][1] += int(rows.sum())
        n += 1
    result = {k: v / max(n, 1) for k, v in tot.items()}
    for key, (hits, total) in counts.items():
        result[key.lower() + "_acc"] = hits / total if total else float("nan")
    return result


def write_metrics(path, history, include_timing: bool = False) -> None:
    """metrics.csv with the fixed header.

    The seconds column is written as 0.000 unless include_timing is set:
    output files are contractually byte-identical across same-seed runs,
    and wall-clock is not. Measured timing stays on the TrainMetrics
    objects and in the log.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for m in history:
            writer.writerow([
                m.step,
                f"{m.loss:.6f}", f"{m.mlm_loss:.6f}",
                f"{m.cwp_loss:.6f}", f"{m.dup_loss:.6f}",
                f"{m.mlm_acc:.4f}", f"{m.cwp_acc:.4f}", f"{m.dup_acc:.4f}",
                f"{m.lr:.8e}",
                f"{m.seconds:.3f}" if include_timing else "0.000",
            ])
