"""Bidirectional transformer encoder with MLM, CWP and DUP heads.

Everything is plain numpy in float64; the backward pass is written by
hand so gradients are exact and checkable against finite differences.

Block structure (pre-layer-norm):

    u   = LN1(x)
    h   = x + Wo(MultiHeadAttention(u))
    v2  = LN2(h)
    out = h + FFN(v2)

MLM logits are computed from the last layer's LN2 output, projected
through the (tied) token embedding matrix plus a free bias.  The CWP and
DUP heads are single linear units on the last layer's hidden state at
position 0 ([CLS]).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .sampler import MaskedBatch, TASK_CWP, TASK_DUP

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

ALL_TASKS = frozenset({"MLM", "CWP", "DUP"})


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 128
    num_layers: int = 12
    num_heads: int = 8
    ffn_dim: int = 512
    max_len: int = 40
    dropout_rate: float = 0.1
    task_set: frozenset = field(default_factory=lambda: ALL_TASKS)

    def __post_init__(self):
        tasks = frozenset(self.task_set)
        object.__setattr__(self, "task_set", tasks)
        if self.hidden_dim % self.num_heads != 0:
            raise InvalidConfig(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise InvalidConfig("num_layers must be >= 1")
        if self.ffn_dim < self.hidden_dim:
            raise InvalidConfig("ffn_dim must be >= hidden_dim")
        if not tasks or "MLM" not in tasks:
            raise InvalidConfig("task_set must contain MLM")
        if not tasks <= ALL_TASKS:
            raise InvalidConfig(f"unknown tasks: {sorted(tasks - ALL_TASKS)}")
        if self.vocab_size < 8:
            raise InvalidConfig("vocab_size must cover the 7 reserved ids")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["task_set"] = sorted(self.task_set)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["task_set"] = frozenset(d.get("task_set", sorted(ALL_TASKS)))
        return cls(**d)


class TransformerParams:
    """Named tensor bag; iteration order is the checkpoint layout order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    def copy(self) -> "TransformerParams":
        return TransformerParams(self.config,
                                 {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


@dataclass
class ForwardOutput:
    hidden_states: list  # L+1 arrays [B, T, H]; entry 0 is the embedding sum
    mlm_logits: np.ndarray  # [B, T, K]
    cwp_logit: np.ndarray   # [B]
    dup_logit: np.ndarray   # [B]


def _truncated_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    h, f, k = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    shapes = {
        "tok_emb": (k, h),
        "pos_emb": (cfg.max_len, h),
        "seg_emb": (2, h),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1_g": (h,), p + "ln1_b": (h,),
            p + "wq": (h, h), p + "bq": (h,),
            p + "wk": (h, h), p + "bk": (h,),
            p + "wv": (h, h), p + "bv": (h,),
            p + "wo": (h, h), p + "bo": (h,),
            p + "ln2_g": (h,), p + "ln2_b": (h,),
            p + "ffn_w1": (h, f), p + "ffn_b1": (f,),
            p + "ffn_w2": (f, h), p + "ffn_b2": (h,),
        })
    shapes.update({
        "mlm_bias": (k,),
        "cwp_w": (h,), "cwp_b": (),
        "dup_w": (h,), "dup_b": (),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> TransformerParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    biases = {"bq", "bk", "bv", "bo", "ffn_b1", "ffn_b2", "mlm_bias"}
    for name, shape in param_shapes(cfg).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif base.endswith("_b") or base in biases:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = _truncated_normal(rng, shape)
    return TransformerParams(cfg, tensors)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(d_out, gain, cache):
    xhat, inv = cache
    d_g = (d_out * xhat).sum(axis=tuple(range(d_out.ndim - 1)))
    d_b = d_out.sum(axis=tuple(range(d_out.ndim - 1)))
    d_xhat = d_out * gain
    d_x = inv * (d_xhat - d_xhat.mean(axis=-1, keepdims=True)
                 - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True))
    return d_x, d_g, d_b


def _gelu(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(d_out, x, t):
    sech2 = 1.0 - t * t
    return d_out * (0.5 * (1.0 + t)
                    + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x))


def _split_heads(x, num_heads):
    b, t, h = x.shape
    return x.reshape(b, t, num_heads, h // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, a, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, a * dh)


def _forward_cache(params: TransformerParams, batch: MaskedBatch,
                   train_mode: bool, rng):
    cfg = params.config
    ids, seg = batch.input_ids, batch.segment_ids
    if ids.max() >= cfg.vocab_size:
        raise ShapeMismatch("token id outside vocabulary")
    if ids.shape[1] > cfg.max_len:
        raise ShapeMismatch(f"sequence length {ids.shape[1]} > max_len {cfg.max_len}")
    if not np.isin(seg, (0, 1)).all():
        raise ShapeMismatch("segment ids must be 0 or 1")
    if train_mode and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("train_mode with dropout needs an rng")

    p = params.tensors
    t_len = ids.shape[1]
    x = p["tok_emb"][ids] + p["pos_emb"][:t_len] + p["seg_emb"][seg]
    key_mask = batch.attention_mask[:, None, None, :].astype(bool)
    scale = 1.0 / math.sqrt(cfg.hidden_dim // cfg.num_heads)
    keep = 1.0 - cfg.dropout_rate

    hidden = [x]
    layer_caches = []
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        u, ln1c = _layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = u @ p[pre + "wq"] + p[pre + "bq"]
        k = u @ p[pre + "wk"] + p[pre + "bk"]
        v = u @ p[pre + "wv"] + p[pre + "bv"]
        qh, kh, vh = (_split_heads(z, cfg.num_heads) for z in (q, k, v))
        scores = np.where(key_mask, qh @ kh.transpose(0, 1, 3, 2) * scale, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        if train_mode and cfg.dropout_rate > 0:
            att_mask = (rng.random(att.shape) >= cfg.dropout_rate) / keep
            att_d = att * att_mask
        else:
            att_mask = None
            att_d = att
        ctx = _merge_heads(att_d @ vh)
        h = x + ctx @ p[pre + "wo"] + p[pre + "bo"]
        v2, ln2c = _layer_norm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
        f1 = v2 @ p[pre + "ffn_w1"] + p[pre + "ffn_b1"]
        g, gt = _gelu(f1)
        f2 = g @ p[pre + "ffn_w2"] + p[pre + "ffn_b2"]
        if train_mode and cfg.dropout_rate > 0:
            ffn_mask = (rng.random(f2.shape) >= cfg.dropout_rate) / keep
            f2 = f2 * ffn_mask
        else:
            ffn_mask = None
        out = h + f2
        layer_caches.append(dict(x=x, u=u, ln1c=ln1c, qh=qh, kh=kh, vh=vh,
                                 att=att, att_mask=att_mask, att_d=att_d,
                                 ctx=ctx, h=h, v2=v2, ln2c=ln2c, f1=f1, g=g,
                                 gt=gt, ffn_mask=ffn_mask))
        hidden.append(out)
        x = out

    mlm_base = layer_caches[-1]["v2"]
    mlm_logits = mlm_base @ p["tok_emb"].T + p["mlm_bias"]
    cls = hidden[-1][:, 0, :]
    cwp_logit = cls @ p["cwp_w"] + p["cwp_b"]
    dup_logit = cls @ p["dup_w"] + p["dup_b"]
    output = ForwardOutput(hidden, mlm_logits, cwp_logit, dup_logit)
    cache = dict(layers=layer_caches, mlm_base=mlm_base, cls=cls, scale=scale)
    return output, cache


def forward(params: TransformerParams, batch: MaskedBatch,
            train_mode: bool = False, rng=None) -> ForwardOutput:
    output, _ = _forward_cache(params, batch, train_mode, rng)
    return output


# -- losses ------------------------------------------------------------

def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mlm_loss(out: ForwardOutput, batch: MaskedBatch) -> float:
    sup = batch.mlm_targets >= 0
    if not sup.any():
        return 0.0
    logp = _log_softmax(out.mlm_logits[sup])
    targets = batch.mlm_targets[sup]
    return float(-logp[np.arange(len(targets)), targets].mean())


def _bce(logits, labels) -> float:
    # max(z,0) - y*z + log(1 + exp(-|z|)), numerically stable
    z, y = logits, labels.astype(float)
    return float((np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean())


def cwp_loss(out: ForwardOutput, batch: MaskedBatch) -> float:
    rows = batch.task_kinds == TASK_CWP
    if not rows.any():
        return 0.0
    return _bce(out.cwp_logit[rows], batch.task_labels[rows])


def dup_loss(out: ForwardOutput, batch: MaskedBatch) -> float:
    rows = batch.task_kinds == TASK_DUP
    if not rows.any():
        return 0.0
    return _bce(out.dup_logit[rows], batch.task_labels[rows])


def total_loss(out: ForwardOutput, batch: MaskedBatch, task_set) -> float:
    loss = 0.0
    if "MLM" in task_set:
        loss += mlm_loss(out, batch)
    if "CWP" in task_set:
        loss += cwp_loss(out, batch)
    if "DUP" in task_set:
        loss += dup_loss(out, batch)
    return loss


def task_accuracies(out: ForwardOutput, batch: MaskedBatch) -> dict:
    """MLM accuracy over supervised positions, CWP/DUP over their rows;
    None where a task has no rows in the batch."""
    acc = {}
    sup = batch.mlm_targets >= 0
    if sup.any():
        pred = out.mlm_logits[sup].argmax(axis=-1)
        acc["MLM"] = float((pred == batch.mlm_targets[sup]).mean())
    else:
        acc["MLM"] = None
    for name, logit, kind in (("CWP", out.cwp_logit, TASK_CWP),
                              ("DUP", out.dup_logit, TASK_DUP)):
        rows = batch.task_kinds == kind
        if rows.any():
            acc[name] = float(((logit[rows] > 0).astype(int)
                               == batch.task_labels[rows]).mean())
        else:
            acc[name] = None
    return acc


# -- backward ----------------------------------------------------------

def backward(params: TransformerParams, batch: MaskedBatch, task_set,
             train_mode: bool = False, rng=None):
    """Analytic gradients of the combined loss.

    Returns (loss, grads, output) where grads maps every parameter name
    to an array of the same shape (zero where a tensor has no influence).
    """
    out, cache = _forward_cache(params, batch, train_mode, rng)
    cfg = params.config
    p = params.tensors
    grads = params.zeros_like()
    loss = total_loss(out, batch, task_set)

    b, t_len, _ = out.mlm_logits.shape
    d_mlm_logits = np.zeros_like(out.mlm_logits)
    if "MLM" in task_set:
        sup = batch.mlm_targets >= 0
        n_sup = int(sup.sum())
        if n_sup:
            logits = out.mlm_logits[sup]
            probs = np.exp(_log_softmax(logits))
            probs[np.arange(n_sup), batch.mlm_targets[sup]] -= 1.0
            d_mlm_logits[sup] = probs / n_sup

    d_cls = np.zeros_like(cache["cls"])
    for name, logit, kind in (("CWP", out.cwp_logit, TASK_CWP),
                              ("DUP", out.dup_logit, TASK_DUP)):
        if name not in task_set:
            continue
        rows = batch.task_kinds == kind
        n = int(rows.sum())
        if not n:
            continue
        d_logit = np.zeros_like(logit)
        z = logit[rows]
        d_logit[rows] = (1.0 / (1.0 + np.exp(-z))
                         - batch.task_labels[rows]) / n
        w_name, b_name = name.lower() + "_w", name.lower() + "_b"
        grads[w_name] += cache["cls"].T @ d_logit
        grads[b_name] += d_logit.sum()
        d_cls += d_logit[:, None] * p[w_name]

    # MLM head: logits = mlm_base @ tok_emb.T + mlm_bias (tied weights)
    mlm_base = cache["mlm_base"]
    grads["mlm_bias"] += d_mlm_logits.sum(axis=(0, 1))
    k = cfg.vocab_size
    h_dim = cfg.hidden_dim
    grads["tok_emb"] += (d_mlm_logits.reshape(-1, k).T
                         @ mlm_base.reshape(-1, h_dim))
    d_v2_extra = d_mlm_logits @ p["tok_emb"]

    d_out = np.zeros_like(cache["layers"][-1]["h"])
    d_out[:, 0, :] += d_cls
    keep = 1.0 - cfg.dropout_rate

    for i in reversed(range(cfg.num_layers)):
        c = cache["layers"][i]
        pre = f"layers.{i}."
        # out = h + dropout(FFN(v2))
        d_f2 = d_out if c["ffn_mask"] is None else d_out * c["ffn_mask"]
        d_h = d_out.copy()
        flat = lambda a: a.reshape(-1, a.shape[-1])
        grads[pre + "ffn_w2"] += flat(c["g"]).T @ flat(d_f2)
        grads[pre + "ffn_b2"] += d_f2.sum(axis=(0, 1))
        d_g = d_f2 @ p[pre + "ffn_w2"].T
        d_f1 = _gelu_backward(d_g, c["f1"], c["gt"])
        grads[pre + "ffn_w1"] += flat(c["v2"]).T @ flat(d_f1)
        grads[pre + "ffn_b1"] += d_f1.sum(axis=(0, 1))
        d_v2 = d_f1 @ p[pre + "ffn_w1"].T
        if i == cfg.num_layers - 1:
            d_v2 = d_v2 + d_v2_extra
        d_h_ln, d_g2, d_b2 = _layer_norm_backward(d_v2, p[pre + "ln2_g"], c["ln2c"])
        grads[pre + "ln2_g"] += d_g2
        grads[pre + "ln2_b"] += d_b2
        d_h += d_h_ln
        # h = x + ctx @ wo + bo
        d_x = d_h.copy()
        grads[pre + "wo"] += flat(c["ctx"]).T @ flat(d_h)
        grads[pre + "bo"] += d_h.sum(axis=(0, 1))
        d_ctx = d_h @ p[pre + "wo"].T
        d_ctx_h = _split_heads(d_ctx, cfg.num_heads)
        d_att_d = d_ctx_h @ c["vh"].transpose(0, 1, 3, 2)
        d_vh = c["att_d"].transpose(0, 1, 3, 2) @ d_ctx_h
        d_att = d_att_d if c["att_mask"] is None else d_att_d * c["att_mask"]
        att = c["att"]
        d_scores = att * (d_att - (d_att * att).sum(axis=-1, keepdims=True))
        d_qh = d_scores @ c["kh"] * cache["scale"]
        d_kh = d_scores.transpose(0, 1, 3, 2) @ c["qh"] * cache["scale"]
        d_q, d_k, d_v = (_merge_heads(z) for z in (d_qh, d_kh, d_vh))
        d_u = np.zeros_like(c["u"])
        for d_z, w_name, b_name in ((d_q, "wq", "bq"), (d_k, "wk", "bk"),
                                    (d_v, "wv", "bv")):
            grads[pre + w_name] += flat(c["u"]).T @ flat(d_z)
            grads[pre + b_name] += d_z.sum(axis=(0, 1))
            d_u += d_z @ p[pre + w_name].T
        d_x_ln, d_g1, d_b1 = _layer_norm_backward(d_u, p[pre + "ln1_g"], c["ln1c"])
        grads[pre + "ln1_g"] += d_g1
        grads[pre + "ln1_b"] += d_b1
        d_x += d_x_ln
        d_out = d_x

    # embedding sum: tok_emb[ids] + pos_emb[:T] + seg_emb[seg]
    ids, seg = batch.input_ids, batch.segment_ids
    np.add.at(grads["tok_emb"], ids, d_out)
    grads["pos_emb"][:t_len] += d_out.sum(axis=0)
    np.add.at(grads["seg_emb"], seg, d_out)
    return loss, grads, out


# -- checkpoints -------------------------------------------------------

def save_checkpoint(ckpt_dir, params: TransformerParams, step: int, seed: int,
                    opt_state: dict | None = None) -> None:
    """manifest.json plus params.bin (little-endian float64, concatenated
    in manifest order); optimizer state, when given, goes to opt.bin."""
    os.makedirs(ckpt_dir, exist_ok=True)

    def write_bin(path, tensors):
        index, offset = [], 0
        with open(path, "wb") as fh:
            for name, arr in tensors.items():
                data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                fh.write(data)
                index.append({"name": name, "shape": list(arr.shape),
                              "dtype": "float64", "offset": offset})
                offset += len(data)
        return index

    manifest = {
        "config": params.config.to_json_dict(),
        "seed": seed,
        "step": step,
        "tensors": write_bin(os.path.join(ckpt_dir, "params.bin"), params.tensors),
    }
    if opt_state is not None:
        manifest["opt_tensors"] = write_bin(os.path.join(ckpt_dir, "opt.bin"),
                                            opt_state)
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_bin(path, index):
    with open(path, "rb") as fh:
        data = fh.read()
    tensors = {}
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count,
                            offset=entry["offset"]).astype(np.float64)
        tensors[entry["name"]] = arr.reshape(shape)
    return tensors


def load_checkpoint(ckpt_dir):
    """Returns (params, step, seed, opt_state_or_None)."""
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = ModelConfig.from_json_dict(manifest["config"])
    tensors = _read_bin(os.path.join(ckpt_dir, "params.bin"), manifest["tensors"])
    params = TransformerParams(cfg, tensors)
    opt_state = None
    if "opt_tensors" in manifest:
        opt_state = _read_bin(os.path.join(ckpt_dir, "opt.bin"),
                              manifest["opt_tensors"])
    return params, manifest["step"], manifest["seed"], opt_state


def checkpoint_hash(ckpt_dir) -> str:
    digest = hashlib.sha256()
    with open(os.path.join(ckpt_dir, "params.bin"), "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()[:16]
