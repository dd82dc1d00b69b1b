"""Training: classification loss, the combined objective, Adam on the
flat parameter buffer, the epoch loop with best-validation snapshotting,
and byte-stable checkpoint files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .config import from_plain, to_plain
from .data import Dataset, Normalizer
from .decoupling import DecouplingConfig, EmbeddingTriple, decoupling_loss
from .encoders import TabularSchema
from .errors import ConfigError, ContractError, NumericsError, ShapeError, TrainingAbort
from .layers import ParameterStore
from .models import VARIANTS, ModelConfig, build_variant
from .tensor import Tensor

__all__ = [
    "TrainConfig", "TrainResult", "cross_entropy", "total_loss",
    "Adam", "adam_step", "clip_grad_norm", "train",
    "save_checkpoint", "load_checkpoint",
]

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-4
    lambda_decoupling: float = 1.0
    grad_clip_norm: float = 1.0  # 0 disables clipping
    seed: int = 0
    model_variant: str = "dafted"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2; singleton batches are dropped")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda_decoupling < 0.0:
            raise ConfigError("lambda_decoupling must be >= 0")
        if self.grad_clip_norm < 0.0:
            raise ConfigError("grad_clip_norm must be >= 0 (0 disables)")
        if self.model_variant not in VARIANTS:
            raise ConfigError(
                f"unknown model variant {self.model_variant!r}; valid: {VARIANTS}"
            )


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    Computed on max-shifted logits; the shift is a constant so it cancels
    between the log-sum-exp and the picked logit.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D (n, classes), got {logits.data.shape}")
    n, c = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows of logits")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}); got range "
                         f"[{labels.min()}, {labels.max()}]")
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = logits - shift
    lse = T.log(T.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels.astype(np.intp)]
    return (lse - picked).mean()


def total_loss(logits: Tensor, labels: np.ndarray, triple: Optional[EmbeddingTriple],
               lam: float, dec_cfg: DecouplingConfig) -> Tuple[Tensor, Dict[str, float]]:
    """Classification loss plus ``lam`` times the decoupling loss.

    ``lam == 0`` (or a missing triple) short-circuits: the decoupling graph
    is never built, so the training trajectory is bit-identical to a model
    with the decoupling term removed.
    """
    ce = cross_entropy(logits, labels)
    if lam != 0.0 and triple is not None:
        dec = decoupling_loss(triple, labels, dec_cfg)
        loss = ce + lam * dec
        parts = {"total": float(loss.data), "ce": float(ce.data),
                 "decoupling": float(dec.data)}
    else:
        loss = ce
        parts = {"total": float(ce.data), "ce": float(ce.data), "decoupling": 0.0}
    return loss, parts


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = _ADAM_BETA1, beta2: float = _ADAM_BETA2,
              eps: float = _ADAM_EPS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update as a pure function.

    ``t`` is the 1-based step index. Returns new (param, m, v) arrays.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ContractError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}")
    if t < 1:
        raise ContractError(f"adam_step t must be >= 1, got {t}")
    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m_new / (1.0 - beta1 ** t)
    v_hat = v_new / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m_new, v_new


class Adam:
    """Adam over a frozen ParameterStore's flat buffers."""

    def __init__(self, store: ParameterStore, lr: float,
                 beta1: float = _ADAM_BETA1, beta2: float = _ADAM_BETA2,
                 eps: float = _ADAM_EPS):
        if store.flat is None:
            raise ContractError("optimizer requires a frozen ParameterStore")
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros_like(store.flat)
        self.v = np.zeros_like(store.flat)
        self.t = 0

    def step(self) -> None:
        g = self.store.flat_grad
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        self.store.flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> Tuple[float, bool]:
    """Scale the whole flat gradient to global L2 norm ``max_norm`` if it
    exceeds it. Returns (pre-clip norm, whether clipping fired)."""
    g = store.flat_grad
    norm = float(np.sqrt(g @ g))
    if max_norm > 0.0 and norm > max_norm:
        g *= max_norm / norm
        return norm, True
    return norm, False


@dataclass
class TrainResult:
    """What a finished run hands back: the model holds the best-validation
    parameters; ``final_flat`` keeps the last-epoch parameters for
    trajectory comparisons."""
    model: object
    report: dict
    best_val_loss: float
    best_epoch: int
    final_flat: np.ndarray
    normalizer: Optional[Normalizer] = None


def _forward_batch(model, ds: Dataset, idx: np.ndarray, rng):
    return model(ds.x_num[idx], ds.x_cat[idx], ds.series[idx], rng=rng)


def _batch_loss(model, ds, idx, rng, lam, dec_cfg):
    logits, triple = _forward_batch(model, ds, idx, rng)
    return total_loss(logits, ds.y[idx], triple, lam, dec_cfg)


def _diagnose_nonfinite(model, ds, idx, rng, lam, dec_cfg, where: str):
    """Re-run the failing batch with per-op finiteness checks to name the
    first operation that produced a non-finite value."""
    try:
        with T.nan_guard():
            _batch_loss(model, ds, idx, rng, lam, dec_cfg)
    except NumericsError as exc:
        raise TrainingAbort(f"non-finite loss during {where}: {exc}",
                            component=str(exc)) from exc
    raise TrainingAbort(f"non-finite loss during {where}", component="loss")


def _val_chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def _dataset_loss(model, ds: Dataset, lam: float, dec_cfg: DecouplingConfig,
                  batch_size: int) -> Dict[str, float]:
    """Deterministic forward-only loss over a dataset in fixed-order chunks
    of the training batch size (the contrastive terms are batch-defined, so
    the chunking is part of the loss's meaning)."""
    sums = {"total": 0.0, "ce": 0.0, "decoupling": 0.0}
    n = len(ds)
    with T.no_grad():
        for idx in _val_chunks(n, batch_size):
            loss, parts = _batch_loss(model, ds, idx, None, lam, dec_cfg)
            if not np.isfinite(loss.data):
                _diagnose_nonfinite(model, ds, idx, None, lam, dec_cfg, "validation")
            w = len(idx) / n
            for k in sums:
                sums[k] += parts[k] * w
    return sums


def predict_proba_dataset(model, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    """Forward-only class probabilities for every sample, in dataset order."""
    out = []
    with T.no_grad():
        for idx in _val_chunks(len(ds), batch_size):
            logits, _ = _forward_batch(model, ds, idx, None)
            out.append(T.softmax(logits, axis=1).data)
    return np.concatenate(out, axis=0)


def train(train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig,
          train_cfg: TrainConfig, schema: TabularSchema) -> TrainResult:
    """Run the full training loop and return the best-validation model.

    Validation loss is measured after every epoch; the parameter snapshot
    with the lowest value is restored into the returned model. With
    ``epochs == 0`` the initial parameters are returned and the report is
    flagged ``untrained``.
    """
    if train_ds.series.shape[1:] != val_ds.series.shape[1:]:
        raise ShapeError(
            f"train/val series shapes differ: {train_ds.series.shape[1:]} "
            f"vs {val_ds.series.shape[1:]}")
    n_series, t_len = train_ds.series.shape[1], train_ds.series.shape[2]
    model = build_variant(train_cfg.model_variant, model_cfg, schema,
                          n_series, t_len, seed=train_cfg.seed)
    lam = train_cfg.lambda_decoupling if model.trains_decoupling else 0.0
    dec_cfg = model_cfg.decoupling
    opt = Adam(model.store, train_cfg.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 202]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 303]))

    n = len(train_ds)
    bs = train_cfg.batch_size
    curves = {"train_loss": [], "val_loss": [], "val_ce": [], "val_decoupling": []}
    clip_events = 0
    best_val = np.inf
    best_epoch = -1
    best_flat = model.store.flat.copy()

    for epoch in range(train_cfg.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            if len(idx) < 2:
                continue
            model.store.zero_grad()
            loss, parts = _batch_loss(model, train_ds, idx, dropout_rng, lam, dec_cfg)
            if not np.isfinite(loss.data):
                _diagnose_nonfinite(model, train_ds, idx, None, lam, dec_cfg,
                                    f"epoch {epoch}")
            T.backward(loss)
            _, clipped = clip_grad_norm(model.store, train_cfg.grad_clip_norm)
            clip_events += int(clipped)
            opt.step()
            epoch_loss += parts["total"] * len(idx)
            seen += len(idx)
        curves["train_loss"].append(epoch_loss / max(seen, 1))
        val = _dataset_loss(model, val_ds, lam, dec_cfg, bs)
        curves["val_loss"].append(val["total"])
        curves["val_ce"].append(val["ce"])
        curves["val_decoupling"].append(val["decoupling"])
        if val["total"] < best_val:
            best_val = val["total"]
            best_epoch = epoch
            best_flat[:] = model.store.flat

    untrained = train_cfg.epochs == 0
    if untrained:
        val = _dataset_loss(model, val_ds, lam, dec_cfg, bs)
        best_val = val["total"]
        best_epoch = -1
        curves["val_loss"].append(val["total"])
        curves["val_ce"].append(val["ce"])
        curves["val_decoupling"].append(val["decoupling"])

    final_flat = model.store.flat.copy()
    model.store.flat[:] = best_flat

    report = {
        "variant": model.variant,
        "n_params": model.store.n_params,
        "config": {"model": to_plain(model_cfg), "train": to_plain(train_cfg)},
        "effective_lambda": lam,
        "epochs_run": train_cfg.epochs,
        "untrained": untrained,
        "grad_clip": {
            "max_norm": train_cfg.grad_clip_norm,
            "enabled": train_cfg.grad_clip_norm > 0.0,
            "events": clip_events,
            "triggered": clip_events > 0,
        },
        "curves": curves,
        "best": {"epoch": best_epoch, "val_loss": best_val},
    }
    return TrainResult(model=model, report=report, best_val_loss=best_val,
                       best_epoch=best_epoch, final_flat=final_flat)


# ---------------------------------------------------------------------------
# checkpoints: a deliberately boring binary format that is byte-stable
# (np.savez embeds timestamps via zip, so it cannot be)

_CKPT_MAGIC = b"DAFTCKPT1\n"


def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], config: dict,
                    meta: dict) -> None:
    """Write float64 arrays plus JSON config/meta. Identical inputs yield
    identical bytes."""
    names = sorted(arrays)
    header = {
        "arrays": [[n, list(arrays[n].shape)] for n in names],
        "config": config,
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ContractError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, header["config"], header["meta"]


def save_run_checkpoint(path: str, result: TrainResult, model_cfg: ModelConfig,
                        train_cfg: TrainConfig, schema: TabularSchema,
                        normalizer: Optional[Normalizer] = None) -> None:
    """Checkpoint a finished run: best parameters, normalizer buffers, and
    enough config echo to rebuild the model exactly."""
    arrays = {f"param.{k}": v for k, v in result.model.store.state().items()}
    if normalizer is not None:
        arrays.update(normalizer.state())
    model = result.model
    config = {
        "model": to_plain(model_cfg),
        "train": to_plain(train_cfg),
        "schema": to_plain(schema),
        "n_series": model.n_series,
        "t_len": model.t_len,
    }
    meta = {
        "format": 1,
        "variant": model.variant,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "has_normalizer": normalizer is not None,
    }
    save_checkpoint(path, arrays, config, meta)


def load_run_checkpoint(path: str):
    """Rebuild the model (and normalizer, if saved) from a run checkpoint.

    Returns (model, normalizer_or_none, config_dict, meta_dict).
    """
    arrays, config, meta = load_checkpoint(path)
    model_cfg = from_plain(ModelConfig, config["model"], where="model")
    train_cfg = from_plain(TrainConfig, config["train"], where="train")
    schema = from_plain(TabularSchema, config["schema"], where="schema")
    model = build_variant(train_cfg.model_variant, model_cfg, schema,
                          config["n_series"], config["t_len"], seed=train_cfg.seed)
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    model.store.load(params)
    normalizer = None
    if meta.get("has_normalizer"):
        normalizer = Normalizer.from_state({k: v for k, v in arrays.items()
                                            if k.startswith("norm.")})
    return model, normalizer, config, meta
