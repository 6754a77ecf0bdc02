"""Two-phase training: (1) encoder pretraining on labeled single volumes,
(2) frozen-encoder training of the fusion/baseline heads on pairs.

Phase 2 runs the encoder in eval mode, so per-volume features are computed
once and cached unless synchronized augmentation is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import CnnLstm, InitialOnly, SiameseSubtract
from .core import Cohort, Rng, Volume, volume_read
from .encoder import Encoder, EncoderConfig
from .errors import DataError, ParamError
from .fusion import ClassifierHead, TafNet
from .nnkit import Module, Tensor, binary_cross_entropy, load_checkpoint, state_hash
from .preprocess import augment_pair


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 1
    class_weighting: bool = True
    seed: int = 0
    phase: str = "finetune"
    augment: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.lr <= 0:
            raise ParamError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ParamError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParamError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.phase not in ("pretrain", "finetune"):
            raise ParamError(f"phase must be pretrain|finetune, got {self.phase!r}")


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, named_params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [t for _, t in named_params]
        self.lr, self.weight_decay = lr, weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data = p.data - self.lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            )


def class_weights(labels: np.ndarray, enabled: bool) -> np.ndarray:
    """Per-sample weights: positives get N_neg / N_pos, negatives 1."""
    labels = np.asarray(labels, dtype=np.float64)
    if not enabled:
        return np.ones_like(labels)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.ones_like(labels)
    w_pos = n_neg / n_pos
    return np.where(labels > 0.5, w_pos, 1.0)


def _as_array(item) -> np.ndarray:
    if isinstance(item, Volume):
        return item.data.astype(np.float64)
    if isinstance(item, np.ndarray):
        return item.astype(np.float64)
    return volume_read(item).data.astype(np.float64)


def _batches(n: int, batch_size: int, rng: Rng | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class PretrainClassifier(Module):
    """Encoder plus a temporary single-volume classification head."""

    def __init__(self, encoder: Encoder, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.head = ClassifierHead(encoder.cfg.feature_channels, seed=seed)

    def forward(self, x: Tensor) -> Tensor:
        f, _ = self.encoder.encode(x)
        return self.head.forward(f)


@dataclass
class PretrainResult:
    state: dict
    val_auc: float
    epoch_losses: list[float] = field(default_factory=list)
    val_auc_history: list[float] = field(default_factory=list)

    def encoder_state(self) -> dict:
        return {k: v for k, v in self.state.items() if k.startswith("encoder.")}


def pretrain(encoder: Encoder, dataset, cfg: TrainConfig) -> PretrainResult:
    """Phase 1: train encoder + temporary head on labeled single volumes.

    `dataset` is a sequence of (volume-or-path, label). A stratified
    val_fraction split is held out; validation AUC is tracked per epoch.
    """
    records = list(dataset)
    if not records:
        raise DataError("pretrain dataset is empty")
    from .evalstats import auc  # local import; evalstats orchestrates training too

    rng = Rng(cfg.seed)
    labels = np.array([int(lbl) for _, lbl in records])
    val_idx: list[int] = []
    for cls in (0, 1):
        cls_idx = np.flatnonzero(labels == cls)
        if cls_idx.size == 0:
            continue
        cls_idx = rng.permutation(cls_idx)
        n_val = max(1, round(cfg.val_fraction * cls_idx.size)) if cls_idx.size > 1 else 0
        val_idx.extend(cls_idx[:n_val].tolist())
    val_mask = np.zeros(len(records), dtype=bool)
    val_mask[val_idx] = True
    train_recs = [records[i] for i in np.flatnonzero(~val_mask)]
    val_recs = [records[i] for i in np.flatnonzero(val_mask)]
    if not train_recs:
        raise DataError("pretrain dataset too small for a train/val split")

    volumes = [_as_array(v) for v, _ in train_recs]
    y_train = np.array([float(lbl) for _, lbl in train_recs])
    weights = class_weights(y_train, cfg.class_weighting)
    model = PretrainClassifier(encoder, seed=cfg.seed + 1)
    opt = AdamW(list(model.named_parameters()), cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    aug_rng = rng.spawn(17)

    losses, val_history = [], []
    val_auc = float("nan")
    for _epoch in range(cfg.epochs):
        model.train()
        batch_losses = []
        for idx in _batches(len(train_recs), cfg.batch_size, rng):
            arrs = []
            for i in idx:
                arr = volumes[i]
                if cfg.augment:
                    vol = Volume(arr.astype(np.float32))
                    a, _, _ = augment_pair(vol, vol, aug_rng, enabled=True)
                    arr = a.data.astype(np.float64)
                arrs.append(arr)
            x = Tensor(np.stack(arrs)[:, None])
            model.zero_grad()
            loss = binary_cross_entropy(model.forward(x), y_train[idx], weights[idx])
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
        if val_recs:
            probs = _score_volumes(model, [v for v, _ in val_recs], cfg.batch_size)
            val_auc = auc(list(zip(probs, [int(lbl) for _, lbl in val_recs])))
            val_history.append(val_auc)
    model.eval()
    model.is_trained = True
    return PretrainResult(
        state=model.state_dict(),
        val_auc=val_auc,
        epoch_losses=losses,
        val_auc_history=val_history,
    )


def _score_volumes(model: PretrainClassifier, items, batch_size: int) -> np.ndarray:
    model.eval()
    arrs = [_as_array(v) for v in items]
    out = []
    for idx in _batches(len(arrs), batch_size, None):
        x = Tensor(np.stack([arrs[i] for i in idx])[:, None])
        out.append(model.forward(x).data)
    return np.concatenate(out)


MODEL_KINDS = ("tafnet", "siamese_sub", "cnn_lstm", "initial_only")


def build_pair_model(kind: str, channels: int, seed: int = 0,
                     lstm_hidden: int = 64, head_hidden: int = 64,
                     head_dropout: float = 0.3, heads: int = 4) -> Module:
    if kind == "tafnet":
        return TafNet(channels=channels, heads=heads, head_hidden=head_hidden,
                      head_dropout=head_dropout, seed=seed)
    if kind == "siamese_sub":
        return SiameseSubtract(channels, head_hidden, head_dropout, seed=seed)
    if kind == "cnn_lstm":
        return CnnLstm(channels, lstm_hidden, head_hidden, seed=seed)
    if kind == "initial_only":
        return InitialOnly(channels, head_hidden, head_dropout, seed=seed)
    raise ParamError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def compute_features(encoder: Encoder, paths, batch_size: int = 8) -> dict[str, np.ndarray]:
    """Eval-mode encoder features for each unique volume path."""
    encoder.eval()
    unique = sorted(set(paths))
    features: dict[str, np.ndarray] = {}
    for idx in _batches(len(unique), batch_size, None):
        batch_paths = [unique[i] for i in idx]
        x = Tensor(np.stack([_as_array(p) for p in batch_paths])[:, None])
        f, _ = encoder.encode(x)
        for p, fmap in zip(batch_paths, f.data):
            features[p] = fmap
    return features


def cohort_features(encoder: Encoder, cohort: Cohort, batch_size: int = 8) -> dict[str, np.ndarray]:
    paths = [p.baseline_ref for p in cohort.pairs] + [p.followup_ref for p in cohort.pairs]
    return compute_features(encoder, paths, batch_size)


def train_pair_head(model: Module, features: dict[str, np.ndarray], pairs,
                    cfg: TrainConfig) -> list[float]:
    """Train a pair model on cached encoder features; returns epoch losses."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("no training pairs")
    y = np.array([float(p.label) for p in pairs])
    weights = class_weights(y, cfg.class_weighting)
    rng = Rng(cfg.seed)
    opt = AdamW(list(model.named_parameters()), cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    losses = []
    for _epoch in range(cfg.epochs):
        model.train()
        batch_losses = []
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            f_bl = Tensor(np.stack([features[pairs[i].baseline_ref] for i in idx]))
            f_fu = Tensor(np.stack([features[pairs[i].followup_ref] for i in idx]))
            model.zero_grad()
            loss = binary_cross_entropy(
                model.forward_features(f_bl, f_fu), y[idx], weights[idx]
            )
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
    model.eval()
    model.is_trained = True
    return losses


def score_pairs(model: Module, features: dict[str, np.ndarray], pairs,
                batch_size: int = 8) -> np.ndarray:
    model.eval()
    pairs = list(pairs)
    out = []
    for idx in _batches(len(pairs), batch_size, None):
        f_bl = Tensor(np.stack([features[pairs[i].baseline_ref] for i in idx]))
        f_fu = Tensor(np.stack([features[pairs[i].followup_ref] for i in idx]))
        out.append(model.forward_features(f_bl, f_fu).data)
    return np.concatenate(out)


@dataclass
class FinetuneResult:
    state: dict
    epoch_losses: list[float]
    encoder_hash_before: str
    encoder_hash_after: str
    model: Module


def finetune(encoder_ckpt, model_kind: str, pairs, cfg: TrainConfig,
             encoder_cfg: EncoderConfig | None = None,
             features: dict[str, np.ndarray] | None = None,
             lstm_hidden: int = 64) -> FinetuneResult:
    """Phase 2: freeze the pretrained encoder, train the pair model.

    The encoder section hash is recorded before and after training; the
    freeze contract requires them to be identical. Pass `features` to reuse
    a cache computed with the same checkpoint.
    """
    ckpt = load_checkpoint(encoder_ckpt)
    enc_entries = {k: v for k, v in ckpt.items() if k.startswith("encoder.")}
    if not enc_entries:
        raise DataError(f"{encoder_ckpt} has no 'encoder.' section")
    encoder = Encoder(encoder_cfg or EncoderConfig(), seed=0)
    encoder.load_state_dict({k[len("encoder."):]: v for k, v in enc_entries.items()})
    encoder.freeze().eval()
    hash_before = state_hash(
        {f"encoder.{k}": v for k, v in encoder.state_dict().items()}, "encoder."
    )

    pairs = list(pairs)
    if not pairs:
        raise DataError("no finetune pairs")
    model = build_pair_model(model_kind, encoder.cfg.feature_channels,
                             seed=cfg.seed + 1, lstm_hidden=lstm_hidden)

    if cfg.augment:
        losses = _train_with_augment(model, encoder, pairs, cfg)
    else:
        if features is None:
            features = cohort_features(encoder, Cohort(tuple(pairs)), cfg.batch_size)
        losses = train_pair_head(model, features, pairs, cfg)

    enc_state = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    hash_after = state_hash(enc_state, "encoder.")
    state = dict(enc_state)
    state.update(model.state_dict())
    return FinetuneResult(
        state=state,
        epoch_losses=losses,
        encoder_hash_before=hash_before,
        encoder_hash_after=hash_after,
        model=model,
    )


def _train_with_augment(model: Module, encoder: Encoder, pairs, cfg: TrainConfig) -> list[float]:
    """Slow path: synchronized pair augmentation, re-encoding every batch."""
    raw = {
        path: volume_read(path)
        for p in pairs
        for path in (p.baseline_ref, p.followup_ref)
    }
    y = np.array([float(p.label) for p in pairs])
    weights = class_weights(y, cfg.class_weighting)
    rng = Rng(cfg.seed)
    aug_rng = rng.spawn(17)
    opt = AdamW(list(model.named_parameters()), cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    losses = []
    for _epoch in range(cfg.epochs):
        model.train()
        batch_losses = []
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            bls, fus = [], []
            for i in idx:
                bl, fu, _ = augment_pair(
                    raw[pairs[i].baseline_ref], raw[pairs[i].followup_ref],
                    aug_rng, enabled=True,
                )
                bls.append(bl.data.astype(np.float64))
                fus.append(fu.data.astype(np.float64))
            f_bl, _ = encoder.encode(Tensor(np.stack(bls)[:, None]))
            f_fu, _ = encoder.encode(Tensor(np.stack(fus)[:, None]))
            model.zero_grad()
            loss = binary_cross_entropy(
                model.forward_features(Tensor(f_bl.data), Tensor(f_fu.data)),
                y[idx], weights[idx],
            )
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
    model.eval()
    model.is_trained = True
    return losses
