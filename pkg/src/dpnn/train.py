"""Two-stage training (projection pretraining, end-to-end fine-tuning) and k-fold evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import CLASSES, stratified_holdout, stratified_kfold
from .errors import ConfigError, ContractError
from .losses import LOSS_VARIANTS, MSE_ONLY, MSE_SSIM, SsimConfig, cross_entropy, pretrain_loss
from .model import CompressionNet, Dpnn, N_CLASSES, load_state, param_groups, state_dict, xavier_init
from .optim import AdamConfig, AdamState, adam_step, make_groups
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {"loss_variant": MSE_SSIM, "pretrained": True},
    "bl1": {"loss_variant": MSE_ONLY, "pretrained": True},
    "bl2": {"loss_variant": MSE_SSIM, "pretrained": False},
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    batch_size: int = 10
    loss_variant: str = MSE_SSIM
    pretrained: bool = True
    patience: int = 10
    min_delta: float = 1e-4
    max_epochs: int = 200
    val_fraction: float = 0.2
    seed: int = 0
    pretrain_decay: bool = False
    ssim: SsimConfig = field(default_factory=SsimConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"train.stage must be pretrain or finetune, got {self.stage!r}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"train.loss_variant must be one of {LOSS_VARIANTS}")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if not self.min_delta >= 0:
            raise ConfigError("train.min_delta must be >= 0")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in (0, 1)")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """The full model and its two ablations differ only in loss_variant and pretrained."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[variant])


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


# -- early stopping -------------------------------------------------------------


@dataclass
class EarlyStopState:
    best_val: float = math.inf
    best_epoch: int = -1
    stale_epochs: int = 0
    started: bool = False

    def update(self, epoch: int, val: float, min_delta: float) -> bool:
        """Record one epoch; True when this epoch is the new minimum."""
        if not self.started:
            self.started = True
            self.best_val, self.best_epoch = val, epoch
            return True
        if val < self.best_val - min_delta:
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1
        if val < self.best_val:
            self.best_val, self.best_epoch = val, epoch
            return True
        return False

    def should_stop(self, patience: int) -> bool:
        return self.stale_epochs >= patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    history: list[EpochRecord]
    best_epoch: int
    initial_val_loss: float

    def history_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g}" for r in self.history]
        return "\n".join(rows) + "\n"


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def _fit(module, groups, loss_fn, n_train, n_val, cfg: TrainConfig, val_metrics=None) -> TrainResult:
    """Shared epoch loop: seeded shuffling, Adam steps, validation-based early stopping."""
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    params = [p for g in groups for p in g.params]
    opt_state = AdamState()
    stop = EarlyStopState()
    history: list[EpochRecord] = []

    def validate():
        module.eval()
        total = 0.0
        with no_grad():
            for idx in _batches(n_val, cfg.batch_size, None):
                total += loss_fn(idx, "val").item() * len(idx)
        return total / n_val

    initial = validate()
    if val_metrics:
        val_metrics()
    best_state = state_dict(module)
    for epoch in range(1, cfg.max_epochs + 1):
        module.train()
        running = 0.0
        for idx in _batches(n_train, cfg.batch_size, rng):
            for p in params:
                p.grad = None
            loss = loss_fn(idx, "train")
            backward(loss, params)
            adam_step(groups, opt_state)
            running += loss.item() * len(idx)
        val = validate()
        acc = val_metrics() if val_metrics else None
        history.append(EpochRecord(epoch, running / n_train, val, acc))
        log.debug("epoch %d train %.6f val %.6f", epoch, running / n_train, val)
        if stop.update(epoch, val, cfg.min_delta):
            best_state = state_dict(module)
        if stop.should_stop(cfg.patience):
            break
    load_state(module, best_state)
    module.eval()
    return TrainResult(best_state, history, stop.best_epoch, initial)


def pretrain(net: CompressionNet, volumes: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Fit the compression part to projection targets under the (MSE - SSIM) or MSE-only loss.

    ``volumes`` is ``[N, D, H, W]`` and ``targets`` ``[N, H, W]``. A seeded
    random ``val_fraction`` of the pairs drives early stopping.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(volumes) == 0:
        raise ContractError("pretraining needs at least one (volume, target) pair")
    if len(targets) != len(volumes) or targets.shape[1:] != volumes.shape[2:]:
        raise ContractError(f"targets {targets.shape} do not match volumes {volumes.shape}")
    if cfg.stage != "pretrain":
        raise ContractError("pretrain() needs cfg.stage == 'pretrain'")
    order = np.random.default_rng(derive_seed(cfg.seed, 0)).permutation(len(volumes))
    n_val = int(round(cfg.val_fraction * len(volumes)))
    if n_val < 1 or n_val >= len(volumes):
        raise ContractError(f"validation split of {len(volumes)} pairs is empty or leaves no training data")
    val_idx, tr_idx = order[:n_val], order[n_val:]
    splits = {
        "train": (volumes[tr_idx], targets[tr_idx, None]),
        "val": (volumes[val_idx], targets[val_idx, None]),
    }

    def loss_fn(idx, split):
        x, g = splits[split]
        return pretrain_loss(net(Tensor(x[idx])), g[idx], cfg.ssim, cfg.loss_variant)

    groups = make_groups(dict(net.named_parameters("compression.")), None, "pretrain", cfg.adam, cfg.pretrain_decay)
    return _fit(net, groups, loss_fn, len(tr_idx), n_val, cfg)


def init_dpnn(model: Dpnn, cfg: TrainConfig, compression_state: dict | None) -> None:
    """Xavier-initialize, then load pretrained compression weights unless running without pretraining."""
    xavier_init(model, derive_seed(cfg.seed, 2))
    if cfg.pretrained:
        if compression_state is None:
            raise ContractError("pretrained fine-tuning needs a compression checkpoint")
        load_state(model.compression, _strip(compression_state, "compression."))
        log.info("compression part initialized from pretrained checkpoint")
    else:
        log.info("compression part randomly initialized (Xavier), no pretraining")


def _strip(state: dict, prefix: str) -> dict:
    return {k[len(prefix):] if k.startswith(prefix) else k: v for k, v in state.items()}


def finetune(
    model: Dpnn,
    volumes: np.ndarray,
    labels: Sequence[int],
    cfg: TrainConfig,
    compression_state: dict | None = None,
) -> TrainResult:
    """End-to-end cross-entropy training with a stratified inner validation split."""
    volumes = np.asarray(volumes, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(volumes) != len(labels):
        raise ContractError("volumes and labels differ in length")
    missing = set(range(N_CLASSES)) - set(labels.tolist())
    if missing:
        raise ContractError(f"training split lacks classes {[CLASSES[c] for c in sorted(missing)]}")
    tr_idx, val_idx = stratified_holdout(labels.tolist(), cfg.val_fraction, derive_seed(cfg.seed, 3))
    if not val_idx:
        raise ContractError("inner validation split is empty")
    init_dpnn(model, cfg, compression_state)
    splits = {"train": (volumes[tr_idx], labels[tr_idx]), "val": (volumes[val_idx], labels[val_idx])}

    val_preds: list[np.ndarray] = []

    def loss_fn(idx, split):
        x, y = splits[split]
        _, probs = model(Tensor(x[idx]))
        if split == "val":
            val_preds.append(probs.data.argmax(axis=1))
        return cross_entropy(probs, y[idx])

    def val_accuracy():
        acc = float(np.mean(np.concatenate(val_preds) == splits["val"][1]))
        val_preds.clear()
        return acc

    groups = param_groups(model, "finetune", cfg.adam)
    return _fit(model, groups, loss_fn, len(tr_idx), len(val_idx), cfg, val_accuracy)


def predict(model: Dpnn, volumes: np.ndarray, batch_size: int = 10) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for idx in _batches(len(volumes), batch_size, None):
            _, probs = model(Tensor(volumes[idx]))
            out.append(probs.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def project(model: Dpnn | CompressionNet, volumes: np.ndarray, batch_size: int = 10) -> np.ndarray:
    net = model.compression if isinstance(model, Dpnn) else model
    net.eval()
    maps = []
    with no_grad():
        for idx in _batches(len(volumes), batch_size, None):
            maps.append(net(Tensor(volumes[idx])).data[:, 0])
    return np.concatenate(maps)


# -- metrics ----------------------------------------------------------------------

METRICS = ("TPR", "TNR", "PPV", "NPV")


def confusion(preds: Sequence[int], labels: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ContractError("preds and labels differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, y in zip(preds, labels):
        cm[int(y), int(p)] += 1
    return cm


def per_class_metrics(cm: np.ndarray) -> dict[str, dict[str, float | None]]:
    """One-vs-rest TPR/TNR/PPV/NPV in percent; None marks a zero denominator."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    out = {}
    for c, name in enumerate(CLASSES[: cm.shape[0]]):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp

        def ratio(a, b):
            return None if a + b == 0 else 100.0 * a / (a + b)

        out[name] = {"TPR": ratio(tp, fn), "TNR": ratio(tn, fp), "PPV": ratio(tp, fp), "NPV": ratio(tn, fn)}
    return out


def mean_metrics(reports: list[dict]) -> dict[str, dict[str, float | None]]:
    out = {}
    for name in reports[0]:
        out[name] = {}
        for m in METRICS:
            vals = [r[name][m] for r in reports if r[name][m] is not None]
            out[name][m] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class MetricsReport:
    fold_metrics: list[dict]
    fold_confusions: list[np.ndarray]
    fold_accuracies: list[float]
    mean: dict
    pooled: dict
    pooled_confusion: np.ndarray

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @classmethod
    def from_confusions(cls, cms: list[np.ndarray]) -> "MetricsReport":
        fold_metrics = [per_class_metrics(cm) for cm in cms]
        pooled_cm = np.sum(cms, axis=0)
        return cls(
            fold_metrics=fold_metrics,
            fold_confusions=[np.asarray(cm) for cm in cms],
            fold_accuracies=[float(np.trace(cm) / cm.sum()) for cm in cms],
            mean=mean_metrics(fold_metrics),
            pooled=per_class_metrics(pooled_cm),
            pooled_confusion=pooled_cm,
        )

    def table(self, title: str = "DPNN") -> str:
        """Classes x {TPR, TNR, PPV, NPV} in percent, fold-mean and pooled rows."""

        def fmt(v):
            return "   n/a" if v is None else f"{v:6.2f}"

        head1 = f"{'':24}|" + "|".join(f"{name:^31}" for name in CLASSES) + "|"
        head2 = f"{'Model':24}|" + "|".join("  " + " ".join(f"{m:>6}" for m in METRICS) + "  " for _ in CLASSES) + "|"
        rule = "-" * len(head1)
        lines = [rule, head1, head2, rule]
        for label, block in ((f"{title} (fold mean)", self.mean), (f"{title} (pooled)", self.pooled)):
            cells = "|".join("  " + " ".join(fmt(block[n][m]) for m in METRICS) + "  " for n in CLASSES)
            lines.append(f"{label:24}|{cells}|")
        lines.append(rule)
        accs = ", ".join(f"{a:.4f}" for a in self.fold_accuracies)
        lines.append(f"accuracy per fold: {accs}; mean {self.mean_accuracy:.4f}")
        lines.append("pooled confusion (rows=true, cols=pred, order " + "/".join(CLASSES) + "):")
        lines += ["  " + " ".join(f"{v:5d}" for v in row) for row in self.pooled_confusion]
        return "\n".join(lines) + "\n"

    def keyvalue(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"

        lines = [f"folds={len(self.fold_metrics)}", f"mean_accuracy={self.mean_accuracy:.6f}"]
        for f, (acc, cm, met) in enumerate(zip(self.fold_accuracies, self.fold_confusions, self.fold_metrics)):
            lines.append(f"fold{f}.accuracy={acc:.6f}")
            lines.append(f"fold{f}.confusion=" + ";".join(",".join(str(v) for v in row) for row in cm))
            lines += [f"fold{f}.{n}.{m}={fmt(met[n][m])}" for n in CLASSES for m in METRICS]
        lines += [f"mean.{n}.{m}={fmt(self.mean[n][m])}" for n in CLASSES for m in METRICS]
        lines += [f"pooled.{n}.{m}={fmt(self.pooled[n][m])}" for n in CLASSES for m in METRICS]
        lines.append("pooled.confusion=" + ";".join(",".join(str(v) for v in row) for row in self.pooled_confusion))
        return "\n".join(lines) + "\n"


@dataclass
class CrossvalResult:
    report: MetricsReport
    histories: list[TrainResult]
    folds: list[list[int]]


def crossval(
    build_model,
    volumes: np.ndarray,
    labels: Sequence[int],
    cfg: TrainConfig,
    k: int = 5,
    compression_state: dict | None = None,
) -> CrossvalResult:
    """Stratified k-fold: fine-tune on k-1 folds (with inner validation), test on the held-out fold.

    ``build_model`` is a zero-argument factory returning a fresh ``Dpnn``.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    split = stratified_kfold(labels.tolist(), k, cfg.seed)
    cms, histories = [], []
    for f in range(split.k):
        train_idx, test_idx = split.train_test(f)
        fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, 100 + f))
        model = build_model()
        result = finetune(model, volumes[train_idx], labels[train_idx], fold_cfg, compression_state)
        preds = predict(model, volumes[test_idx], cfg.batch_size)
        cm = confusion(preds, labels[test_idx])
        log.info("fold %d/%d: accuracy %.4f (best epoch %d)", f + 1, split.k, np.trace(cm) / cm.sum(), result.best_epoch)
        cms.append(cm)
        histories.append(result)
    return CrossvalResult(MetricsReport.from_confusions(cms), histories, split.folds)
