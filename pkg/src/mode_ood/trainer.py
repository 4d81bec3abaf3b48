"""Desk-scale training loop for the two objective modes.

The encoder is one affine map shared across spatial positions (a 1x1
convolution), trained jointly with the attention heads by SGD with
momentum, weight decay, and a cosine-decayed learning rate. ``MODE-T``
regularizes the global supervised-contrastive baseline with the local
objective (weight ``lam``); ``MODE-F`` finetunes a given model on the
local objective alone.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import alpa
from .errors import ContractError, FormatError, CorruptionError, NumericError
from .features import FeatureDataset, FeatureMap, _philox

MDL_MAGIC = b"MODEMDL1"
MDL_VERSION = 1

MODE_T = "MODE-T"
MODE_F = "MODE-F"

# Offset mixed into the config seed to derive the fixed baseline projection
# head, so it never collides with the streams used for init/shuffling.
_BASE_HEAD_SEED_OFFSET = 0x5EED


@dataclass
class EncoderParams:
    """Per-position affine map: (E_raw, E) weight plus (E,) bias."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ContractError("encoder weight must be (E_raw, E) with matching bias")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ContractError("encoder parameters must be finite")

    @classmethod
    def identity(cls, dim: int) -> "EncoderParams":
        return cls(np.eye(dim), np.zeros(dim))

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Apply to (..., E_raw) arrays position-wise."""
        return values @ self.w + self.b


@dataclass
class TrainConfig:
    mode: str = MODE_F
    lam: float = 1.0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_n: int = 8
    tau: float = alpa.DEFAULT_TAU
    e_dim: int = alpa.DEFAULT_HEAD_DIM
    enc_dim: int | None = None          # None: E = E_raw
    view_noise_sigma: float | None = None  # None: 0.05 x mean channel std
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_T, MODE_F):
            raise ContractError(f"mode must be {MODE_T} or {MODE_F}, got {self.mode!r}")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.lam < 0:
            raise ContractError("lam must be non-negative")
        if self.batch_n < 2:
            raise ContractError("batch_n must be >= 2")


@dataclass
class TrainedModel:
    encoder: EncoderParams
    heads: alpa.ProjectionHeads
    loss_history: list = field(default_factory=list)

    def encode(self, fmap: FeatureMap) -> np.ndarray:
        """Encoded (H, W, E) values of one raw feature map."""
        return self.encoder.apply(fmap.values)


def init_model(e_raw: int, e_enc: int, e_head: int, seed: int) -> TrainedModel:
    """Fresh model: identity encoder when square, else fan-in uniform."""
    rng = _philox(seed)
    if e_raw == e_enc:
        enc = EncoderParams.identity(e_raw)
    else:
        scale = 1.0 / np.sqrt(e_raw)
        enc = EncoderParams(rng.uniform(-scale, scale, size=(e_raw, e_enc)), np.zeros(e_enc))
    heads = alpa.init_heads(e_enc, e_head, seed + 1)
    return TrainedModel(enc, heads)


def make_views(instance: FeatureMap, sigma: float, rng: np.random.Generator,
               shift: bool = True) -> tuple[FeatureMap, FeatureMap]:
    """Two stochastic views: additive Gaussian noise + 0/1 cyclic grid shift."""
    if sigma < 0:
        raise ContractError("sigma must be >= 0")

    def one_view() -> FeatureMap:
        vals = instance.values + sigma * rng.standard_normal(instance.shape)
        if shift:
            dr, dc = rng.integers(0, 2, size=2)
            vals = np.roll(vals, (int(dr), int(dc)), axis=(0, 1))
        return FeatureMap(vals, instance.label)

    return one_view(), one_view()


def sgd_step(params: dict, grads: dict, state: dict, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v. In place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        v = state.setdefault(name, np.zeros_like(p))
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


def _model_params(model: TrainedModel) -> dict:
    h = model.heads
    return {
        "w_enc": model.encoder.w, "b_enc": model.encoder.b,
        "w_k": h.w_k, "b_k": h.b_k, "w_q": h.w_q, "b_q": h.b_q,
        "w_v": h.w_v, "b_v": h.b_v,
    }


def base_projection_head(e_enc: int, e_head: int, seed: int) -> np.ndarray:
    """Fixed (not trained) projection used by the baseline global loss."""
    rng = _philox(seed + _BASE_HEAD_SEED_OFFSET)
    return rng.uniform(-1.0 / np.sqrt(e_enc), 1.0 / np.sqrt(e_enc), size=(e_enc, e_head))


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    """Cosine decay without restarts, floor 0."""
    if epochs <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * epoch / (epochs - 1)))


def train(dataset: FeatureDataset, cfg: TrainConfig, init: TrainedModel | None = None,
          base_only: bool = False) -> TrainedModel:
    """Run the full optimization loop; deterministic given (dataset, cfg, init)."""
    if any(m.label < 0 for m in dataset):
        raise ContractError("training dataset must be fully labeled")
    if cfg.mode == MODE_F and init is None:
        raise ContractError("MODE-F finetunes a pretrained model: init is required")
    h, w, e_raw = dataset.shape
    e_enc = cfg.enc_dim or e_raw
    if init is not None:
        model = TrainedModel(
            EncoderParams(init.encoder.w.copy(), init.encoder.b.copy()),
            alpa.ProjectionHeads(
                init.heads.w_k.copy(), init.heads.w_q.copy(), init.heads.w_v.copy(),
                init.heads.b_k.copy(), init.heads.b_q.copy(), init.heads.b_v.copy(),
            ),
            list(init.loss_history),
        )
    else:
        model = init_model(e_raw, e_enc, cfg.e_dim, cfg.seed)
    if cfg.epochs <= 0:
        return model

    sigma = cfg.view_noise_sigma
    if sigma is None:
        stacked = dataset.stacked()
        sigma = 0.05 * float(stacked.std(axis=(0, 1, 2)).mean())
    base_head = base_projection_head(model.encoder.w.shape[1], cfg.e_dim, cfg.seed)
    rng = _philox(cfg.seed)
    params = _model_params(model)
    state: dict = {}
    n = len(dataset)
    raw = dataset.stacked().reshape(n, h * w, e_raw)
    labels_all = dataset.labels()

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_n):
            idx = perm[start : start + cfg.batch_n]
            if len(idx) < 2:
                break
            feats_raw = np.empty((2 * len(idx), h * w, e_raw))
            labels = np.empty(2 * len(idx), dtype=np.int64)
            for t, i in enumerate(idx):
                va, vb = make_views(dataset[int(i)], sigma, rng)
                feats_raw[2 * t] = va.positions()
                feats_raw[2 * t + 1] = vb.positions()
                labels[2 * t] = labels[2 * t + 1] = labels_all[i]
            loss, grads = _batch_loss_and_grads(
                feats_raw, labels, model, cfg, base_head, base_only
            )
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_n}")
            sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss)
        model.loss_history.append(float(np.mean(losses)) if losses else float("nan"))
    return model


def _batch_loss_and_grads(feats_raw, labels, model, cfg, base_head, base_only):
    encoded = model.encoder.apply(feats_raw)
    grads = {name: np.zeros_like(p) for name, p in _model_params(model).items()}
    if base_only:
        loss, d_enc = alpa.supcon_loss_and_grads(encoded, labels, base_head, cfg.tau)
    elif cfg.mode == MODE_F:
        loss, head_grads, d_enc = alpa.alpa_loss_and_grads(encoded, labels, model.heads, cfg.tau)
        for k, v in head_grads.items():
            grads[k] += v
    else:  # MODE-T: base + lam * local objective
        base_loss, d_enc = alpa.supcon_loss_and_grads(encoded, labels, base_head, cfg.tau)
        alpa_val, head_grads, d_enc_alpa = alpa.alpa_loss_and_grads(
            encoded, labels, model.heads, cfg.tau
        )
        loss = base_loss + cfg.lam * alpa_val
        d_enc = d_enc + cfg.lam * d_enc_alpa
        for k, v in head_grads.items():
            grads[k] += cfg.lam * v
    flat_in = feats_raw.reshape(-1, feats_raw.shape[-1])
    flat_d = d_enc.reshape(-1, d_enc.shape[-1])
    grads["w_enc"] += flat_in.T @ flat_d
    grads["b_enc"] += flat_d.sum(axis=0)
    return loss, grads


def combined_loss_and_grads(feats_raw, labels, encoder: EncoderParams,
                            heads: alpa.ProjectionHeads, tau: float, mode: str,
                            lam: float = 1.0, base_head: np.ndarray | None = None):
    """Loss and exact gradients of the combined objective.

    ``mode`` is "finetune" or "train" (the latter needs ``base_head``).
    Returns (loss, grads dict keyed like the trainable parameters).
    """
    feats_raw = np.asarray(feats_raw, dtype=np.float64)
    encoded = encoder.apply(feats_raw)
    grads = {
        "w_enc": np.zeros_like(encoder.w), "b_enc": np.zeros_like(encoder.b),
        "w_k": np.zeros_like(heads.w_k), "b_k": np.zeros_like(heads.b_k),
        "w_q": np.zeros_like(heads.w_q), "b_q": np.zeros_like(heads.b_q),
        "w_v": np.zeros_like(heads.w_v), "b_v": np.zeros_like(heads.b_v),
    }
    alpa_val, head_grads, d_enc = alpa.alpa_loss_and_grads(encoded, labels, heads, tau)
    if mode == "finetune":
        loss = alpa_val
        for k, v in head_grads.items():
            grads[k] += v
    elif mode == "train":
        if base_head is None:
            raise ContractError("train mode needs base_head")
        base_loss, d_enc_base = alpa.supcon_loss_and_grads(encoded, labels, base_head, tau)
        loss = base_loss + lam * alpa_val
        d_enc = d_enc_base + lam * d_enc
        for k, v in head_grads.items():
            grads[k] += lam * v
    else:
        raise ContractError(f"unknown mode {mode!r}")
    flat_in = feats_raw.reshape(-1, feats_raw.shape[-1])
    flat_d = d_enc.reshape(-1, d_enc.shape[-1])
    grads["w_enc"] += flat_in.T @ flat_d
    grads["b_enc"] += flat_d.sum(axis=0)
    return loss, grads


def save_model(model: TrainedModel, path) -> None:
    """Persist as .mdl: magic, version, dims, then f32 LE row-major tensors."""
    e_raw, e_enc = model.encoder.w.shape
    e_head = model.heads.e
    order = [
        model.encoder.w, model.encoder.b,
        model.heads.w_k, model.heads.b_k,
        model.heads.w_q, model.heads.b_q,
        model.heads.w_v, model.heads.b_v,
    ]
    with open(path, "wb") as fh:
        fh.write(MDL_MAGIC)
        fh.write(struct.pack("<4I", MDL_VERSION, e_raw, e_enc, e_head))
        for arr in order:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MDL_MAGIC:
        raise FormatError(f"{path}: bad magic, not a .mdl file")
    version, e_raw, e_enc, e_head = struct.unpack_from("<4I", data, 8)
    if version != MDL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shapes = [
        (e_raw, e_enc), (e_enc,),
        (e_enc, e_head), (e_head,), (e_enc, e_head), (e_head,), (e_enc, e_head), (e_head,),
    ]
    off = 24
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise CorruptionError(f"{path}: truncated model payload")
        tensors.append(np.frombuffer(data, dtype="<f4", count=n, offset=off)
                       .astype(np.float64).reshape(shape))
        off += 4 * n
    enc = EncoderParams(tensors[0], tensors[1])
    heads = alpa.ProjectionHeads(tensors[2], tensors[4], tensors[6],
                                 tensors[3], tensors[5], tensors[7])
    return TrainedModel(enc, heads)
