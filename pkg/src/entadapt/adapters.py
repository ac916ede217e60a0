"""Test-time adaptation estimators: entropy minimization over channel-wise modulations,
statistics replacement, pseudo-labeling, the label oracle, and the full-parameter ablation.

All adapters are sklearn-style: hyperparameters in the constructor, `fit(X)`
on unlabeled target images, `predict`/`predict_proba` afterwards. Fitting
never mutates the wrapped network; adapted state lives in the estimator
(`modulation_`, `stats_`, `log_`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .evaluation import prediction_entropy
from .networks import Network, predict_probs
from .optim import AdamState, adam_step, schedule_lr
from .tensor import Tensor
from .validation import check_images, check_labels

__all__ = [
    "AdaptationConfig",
    "AdaptationLog",
    "BatchNormAdapter",
    "EntropyAdapter",
    "FullModelEntropyAdapter",
    "ModulationSet",
    "OracleAdapter",
    "PseudoLabelAdapter",
    "SourceClassifier",
    "estimate_population_stats",
    "init_modulation",
]


# ---------------------------------------------------------------------------
# Modulation parameters
# ---------------------------------------------------------------------------


@dataclass
class ModulationSet:
    """One scale/shift pair per modulated channel per layer."""

    slots: dict[str, tuple[Tensor, Tensor]]

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, (gamma, beta) in self.slots.items():
            params[f"mod.{name}.gamma"] = gamma
            params[f"mod.{name}.beta"] = beta
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag


def init_modulation(net: Network, layers=None) -> ModulationSet:
    """Identity modulation (gamma 1, beta 0) for every slot, or a named subset."""
    channels = net.norm_channels()
    if layers is None:
        selected = channels
    else:
        unknown = set(layers) - set(channels)
        if unknown:
            raise ValueError(f"unknown modulation layers: {sorted(unknown)}")
        selected = {name: channels[name] for name in layers}
    return ModulationSet(
        {
            name: (Tensor(np.ones(c, np.float32)), Tensor(np.zeros(c, np.float32)))
            for name, c in selected.items()
        }
    )


# ---------------------------------------------------------------------------
# Statistics estimation
# ---------------------------------------------------------------------------


def estimate_population_stats(
    net: Network, images: np.ndarray, batch_size: int = 128
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-channel mean/population variance of every norm layer's input over
    the whole set, streamed with f64 accumulators.

    The harvesting pass runs the frozen model with identity modulation and
    batch statistics active, so deeper layers see inputs normalized the same
    way the adapted network will normalize them. Harvesting under the stored
    source statistics instead is self-inconsistent: replacing the stats of
    layer 1 changes what layer 2 sees, and under strong shift the compounded
    mismatch collapses the network.
    """
    if images.shape[0] == 0:
        raise ValueError("cannot estimate statistics from an empty dataset")
    sums: dict[str, np.ndarray] = {}
    sumsqs: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}

    def capture(name: str, data: np.ndarray) -> None:
        d64 = data.astype(np.float64)
        if name not in sums:
            sums[name] = np.zeros(data.shape[1], np.float64)
            sumsqs[name] = np.zeros(data.shape[1], np.float64)
            counts[name] = 0
        sums[name] += d64.sum(axis=(0, 2, 3))
        sumsqs[name] += (d64**2).sum(axis=(0, 2, 3))
        counts[name] += data.shape[0] * data.shape[2] * data.shape[3]

    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            net.forward(images[start : start + batch_size], stats_mode="batch", capture=capture)

    stats = {}
    for name in sums:
        mean = sums[name] / counts[name]
        var = np.maximum(sumsqs[name] / counts[name] - mean**2, 0.0)
        stats[name] = (mean.astype(np.float32), var.astype(np.float32))
    return stats


# ---------------------------------------------------------------------------
# Adaptation loop
# ---------------------------------------------------------------------------


@dataclass
class AdaptationConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 1
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    stats_mode: str = "oneshot"  # "oneshot" (default) or "streaming"
    modulated_layers: tuple | None = None
    eval_every_epoch: bool = False

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.stats_mode not in ("oneshot", "streaming"):
            raise ValueError(f"unknown stats mode {self.stats_mode!r}")


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    batch_entropy: float


@dataclass
class EpochRecord:
    epoch: int
    mean_entropy: float
    error_rate: float | None


@dataclass
class AdaptationLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)


class _StreamingStats:
    """Population accumulators fed by the training batches themselves."""

    def __init__(self):
        self.sums: dict[str, np.ndarray] = {}
        self.sumsqs: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}

    def capture(self, name: str, data: np.ndarray) -> None:
        d64 = data.astype(np.float64)
        if name not in self.sums:
            self.sums[name] = np.zeros(data.shape[1], np.float64)
            self.sumsqs[name] = np.zeros(data.shape[1], np.float64)
            self.counts[name] = 0
        self.sums[name] += d64.sum(axis=(0, 2, 3))
        self.sumsqs[name] += (d64**2).sum(axis=(0, 2, 3))
        self.counts[name] += data.shape[0] * data.shape[2] * data.shape[3]

    def estimates(self):
        stats = {}
        for name in self.sums:
            mean = self.sums[name] / self.counts[name]
            var = np.maximum(self.sumsqs[name] / self.counts[name] - mean**2, 0.0)
            stats[name] = (mean.astype(np.float32), var.astype(np.float32))
        return stats


def _run_adaptation(net: Network, X: np.ndarray, y, config: AdaptationConfig, method: str, threshold: float | None):
    """Shared loop: statistics replacement, one ModulationSet (or a theta copy)
    trained by Adam on the method's loss, then a final inference pass."""
    from .datasets import BatchPlan, Dataset, batches  # local import avoids a cycle

    config.validate()
    if X.shape[0] == 0:
        raise ValueError("adaptation needs a non-empty dataset")

    full_theta = method == "entropy_full_theta"
    work_net = net.copy() if full_theta else net
    modulation = None if full_theta else init_modulation(net, config.modulated_layers)

    streaming = config.stats_mode == "streaming" and config.epochs > 0
    stream = _StreamingStats() if streaming else None
    stats = None if streaming else estimate_population_stats(net, X, config.batch_size)

    if full_theta:
        params = work_net.parameters()
        work_net.set_trainable(True)
    else:
        params = modulation.parameters()
        modulation.set_trainable(True)
    slots = None if modulation is None else modulation.slots

    dataset = Dataset(X, y if y is not None else None, name="adaptation")
    n_batches = (X.shape[0] + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    adam = AdamState()
    log = AdaptationLog()

    def epoch_eval(epoch: int) -> None:
        probs = predict_probs(
            work_net,
            X,
            config.batch_size,
            modulation=slots,
            stats_override=stream.estimates() if streaming else stats,
        )
        error = None
        if y is not None:
            error = 100.0 * float((probs.argmax(axis=1) != y).mean())
        log.epochs.append(EpochRecord(epoch, float(prediction_entropy(probs).mean()), error))

    if config.eval_every_epoch and not streaming:
        epoch_eval(0)

    step = 0
    for epoch in range(config.epochs):
        plan = BatchPlan(config.batch_size, seed=config.seed * 99991 + epoch)
        for _, bx, by in batches(dataset, plan):
            lr = schedule_lr(config.schedule, config.learning_rate, step, total_steps)
            if streaming:
                logits = work_net.forward(
                    bx, stats_mode="batch", modulation=slots, capture=stream.capture
                )
            else:
                logits = work_net.forward(
                    bx, stats_mode="stored", modulation=slots, stats_override=stats
                )
            probs = T.softmax_probs(logits.detach()).data
            batch_entropy = float(prediction_entropy(probs).mean())

            loss = None
            if method in ("entropy", "entropy_full_theta"):
                loss = T.entropy_loss(logits)
            elif method == "oracle":
                loss = T.cross_entropy_loss(logits, by)
            elif method == "pseudo":
                confident = probs.max(axis=1) > threshold
                if confident.any():
                    hard = probs.argmax(axis=1)
                    loss = T.cross_entropy_loss(
                        logits, hard, sample_mask=confident.astype(np.float32)
                    )
            else:
                raise ValueError(f"unknown adaptation method {method!r}")

            if loss is not None:
                if not np.isfinite(loss.item()):
                    raise T.NonFiniteError(f"non-finite adaptation loss at step {step}")
                grads = T.backward(loss, params)
                adam_step(
                    params, grads, adam, lr, config.beta1, config.beta2, config.eps
                )
            log.steps.append(StepRecord(step, epoch, lr, batch_entropy))
            step += 1
        if config.eval_every_epoch:
            epoch_eval(epoch + 1)

    if full_theta:
        work_net.set_trainable(False)
    else:
        modulation.set_trainable(False)
    if streaming:
        stats = stream.estimates() if stream.sums else estimate_population_stats(net, X, config.batch_size)

    final_probs = predict_probs(
        work_net, X, config.batch_size, modulation=slots, stats_override=stats
    )
    return work_net, modulation, stats, log, final_probs


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


class SourceClassifier(BaseEstimator):
    """The frozen source model behind the common estimator interface."""

    def __init__(self, network: Network):
        self.network = network

    def fit(self, X=None, y=None):
        self.fitted_probs_ = None
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = check_images(X, self.network.input_shape)
        return predict_probs(self.network, X)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        y = check_labels(y, np.asarray(X).shape[0], self.network.num_classes)
        return float((self.predict(X) == y).mean())


class _AdapterBase(BaseEstimator):
    """Shared fitted-state handling; subclasses define the adaptation method."""

    network: Network

    _method = ""

    def _config(self) -> AdaptationConfig:
        raise NotImplementedError

    def _threshold(self) -> float | None:
        return None

    def fit(self, X, y=None):
        """Adapt to the (unlabeled) target images X."""
        X = check_images(X, self.network.input_shape)
        if y is not None:
            y = check_labels(y, X.shape[0], self.network.num_classes)
        net, modulation, stats, log, probs = _run_adaptation(
            self.network, X, y, self._config(), self._method, self._threshold()
        )
        self.adapted_network_ = net
        self.modulation_ = modulation
        self.stats_ = stats
        self.log_ = log
        self.fitted_probs_ = probs
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "stats_"):
            raise NotFittedError(f"{type(self).__name__} must be fitted before predicting")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = check_images(X, self.network.input_shape)
        slots = None if self.modulation_ is None else self.modulation_.slots
        return predict_probs(
            self.adapted_network_, X, modulation=slots, stats_override=self.stats_
        )

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        y = check_labels(y, np.asarray(X).shape[0], self.network.num_classes)
        return float((self.predict(X) == y).mean())


class BatchNormAdapter(_AdapterBase):
    """Statistics replacement only: no gradient steps, modulation left at identity."""

    def __init__(self, network: Network, batch_size: int = 128):
        self.network = network
        self.batch_size = batch_size

    _method = "entropy"  # irrelevant at zero epochs; shares the common loop

    def _config(self) -> AdaptationConfig:
        return AdaptationConfig(batch_size=self.batch_size, epochs=0)


class EntropyAdapter(_AdapterBase):
    """Minimizes mean prediction entropy over one shared ModulationSet."""

    _method = "entropy"

    def __init__(
        self,
        network: Network,
        learning_rate: float = 1e-3,
        batch_size: int = 128,
        epochs: int = 1,
        schedule: str = "cosine",
        seed: int = 0,
        stats_mode: str = "oneshot",
        modulated_layers=None,
        eval_every_epoch: bool = False,
    ):
        self.network = network
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.seed = seed
        self.stats_mode = stats_mode
        self.modulated_layers = modulated_layers
        self.eval_every_epoch = eval_every_epoch

    def _config(self) -> AdaptationConfig:
        return AdaptationConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            schedule=self.schedule,
            seed=self.seed,
            stats_mode=self.stats_mode,
            modulated_layers=self.modulated_layers,
            eval_every_epoch=self.eval_every_epoch,
        )


class PseudoLabelAdapter(EntropyAdapter):
    """Self-training on argmax targets for predictions above the confidence threshold."""

    _method = "pseudo"

    def __init__(
        self,
        network: Network,
        threshold: float = 0.9,
        learning_rate: float = 1e-3,
        batch_size: int = 128,
        epochs: int = 1,
        schedule: str = "cosine",
        seed: int = 0,
        stats_mode: str = "oneshot",
        modulated_layers=None,
        eval_every_epoch: bool = False,
    ):
        super().__init__(
            network,
            learning_rate,
            batch_size,
            epochs,
            schedule,
            seed,
            stats_mode,
            modulated_layers,
            eval_every_epoch,
        )
        self.threshold = threshold

    def _threshold(self) -> float:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        return self.threshold


class OracleAdapter(EntropyAdapter):
    """Upper bound: optimizes the same modulations against true target labels."""

    _method = "oracle"

    def fit(self, X, y=None):
        if y is None:
            raise ValueError("the oracle adapter needs target labels")
        return super().fit(X, y)


class FullModelEntropyAdapter(EntropyAdapter):
    """Ablation: entropy minimization over all model parameters (on a copy)."""

    _method = "entropy_full_theta"
