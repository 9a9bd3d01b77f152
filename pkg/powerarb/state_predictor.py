"""Logistic shortage/surplus predictor fitted by batch gradient descent."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import PredictorConfig
from .errors import DegenerateLabels, DimensionMismatch, InvalidConfig, NonFiniteFeature
from .market_data import MarketTable

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-6


def sigmoid(z):
    """Numerically stable logistic function."""
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=np.float64)))


@dataclass
class StatePredictor:
    """Standardized logistic regression; predicts the probability of Shortage."""

    weights: np.ndarray
    bias: float
    feature_names: List[str]
    means: np.ndarray
    stds: np.ndarray
    training_losses: List[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        n = len(self.feature_names)
        if not (len(self.weights) == len(self.means) == len(self.stds) == n):
            raise DimensionMismatch(
                f"Predictor has {n} features but {len(self.weights)} weights"
            )
        if np.any(self.stds <= 0):
            raise InvalidConfig("Standardization stddev must be > 0", key="stds")

    def __eq__(self, other) -> bool:
        if not isinstance(other, StatePredictor):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and self.bias == other.bias
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.stds, other.stds)
        )

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.means) / self.stds

    def to_key_value_text(self) -> str:
        """Flat ``key = value`` form, exact to 17 significant digits."""
        lines = [f"features = {','.join(self.feature_names)}", f"bias = {self.bias:.17g}"]
        for name, w, m, s in zip(self.feature_names, self.weights, self.means, self.stds):
            lines.append(f"{name}.weight = {w:.17g}")
            lines.append(f"{name}.mean = {m:.17g}")
            lines.append(f"{name}.std = {s:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_key_value_text(cls, text: str) -> "StatePredictor":
        values = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        names = [n for n in values.get("features", "").split(",") if n]
        try:
            return cls(
                weights=np.array([float(values[f"{n}.weight"]) for n in names]),
                bias=float(values["bias"]),
                feature_names=names,
                means=np.array([float(values[f"{n}.mean"]) for n in names]),
                stds=np.array([float(values[f"{n}.std"]) for n in names]),
            )
        except KeyError as e:
            raise InvalidConfig(f"Predictor file lacks key {e}", key=str(e)) from None


def logistic_loss_and_gradient(
    weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray, l2: float
) -> Tuple[float, np.ndarray, float]:
    """Mean log-loss plus L2 penalty, with its analytic gradient."""
    z = x @ weights + bias
    # log(1 + e^z) - y z, stable for large |z|
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * weights @ weights)
    residual = sigmoid(z) - y
    grad_w = x.T @ residual / len(y) + l2 * weights
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def lipschitz_bound(x: np.ndarray, l2: float) -> float:
    """Upper bound on the gradient's Lipschitz constant for standardized data."""
    augmented = np.hstack([x, np.ones((len(x), 1))])
    spectral = np.linalg.norm(augmented, ord=2) ** 2 / len(x)
    return 0.25 * spectral + l2


def fit_logistic_arrays(
    x: np.ndarray,
    y: np.ndarray,
    feature_names: Sequence[str],
    config: Optional[PredictorConfig] = None,
) -> StatePredictor:
    """Fit on raw arrays; ``y`` holds 1 for Shortage and 0 for Surplus."""
    config = config or PredictorConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(feature_names) or len(x) != len(y):
        raise DimensionMismatch(
            f"Design matrix {x.shape} does not match {len(feature_names)} features"
        )
    if not np.all(np.isfinite(x)):
        row, col = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteFeature(
            f"Non-finite value in '{feature_names[col]}' at row {row}",
            key=feature_names[col],
        )
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("Training labels hold a single class")

    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    xs = (x - means) / stds

    step = min(config.learning_rate, 1.0 / lipschitz_bound(xs, config.l2))
    if step < config.learning_rate:
        logger.debug(f"Learning rate capped at 1/L = {step:.4g}")

    weights = np.zeros(xs.shape[1])
    bias = 0.0
    losses = []
    for iteration in range(config.iterations):
        loss, grad_w, grad_b = logistic_loss_and_gradient(weights, bias, xs, y, config.l2)
        losses.append(loss)
        if np.sqrt(grad_w @ grad_w + grad_b * grad_b) < GRADIENT_TOLERANCE:
            logger.debug(f"Logistic fit converged after {iteration} iterations")
            break
        weights = weights - step * grad_w
        bias = bias - step * grad_b

    predictor = StatePredictor(
        weights=weights,
        bias=float(bias),
        feature_names=list(feature_names),
        means=means,
        stds=stds,
    )
    predictor.training_losses = losses
    return predictor


def labelled_rows(table: MarketTable, features: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Feature matrix and Shortage labels, Balanced rows excluded."""
    codes = table.column("regulation_code")
    mask = codes != 0
    return table.matrix(features)[mask], (codes[mask] > 0).astype(np.float64)


def fit_state_predictor(
    train: MarketTable,
    features: Sequence[str],
    config: Optional[PredictorConfig] = None,
) -> StatePredictor:
    """Fit the shortage predictor on the non-Balanced rows of ``train``."""
    x, y = labelled_rows(train, features)
    predictor = fit_logistic_arrays(x, y, features, config)
    logger.info(
        f"State predictor fitted on {len(y)} rows, final loss "
        f"{predictor.training_losses[-1]:.5f}"
    )
    return predictor


def predict_state_prob(p: StatePredictor, features) -> float:
    """Probability of Shortage for one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (len(p.feature_names),):
        raise DimensionMismatch(
            f"Expected {len(p.feature_names)} features, got {x.size}"
        )
    return float(sigmoid(p.standardize(x) @ p.weights + p.bias))


def predict_table(p: StatePredictor, table: MarketTable) -> np.ndarray:
    """Shortage probability for every row of ``table``."""
    x = table.matrix(p.feature_names)
    return sigmoid(p.standardize(x) @ p.weights + p.bias)


def predictor_accuracy(p: StatePredictor, table: MarketTable, threshold: float = 0.5) -> float:
    """Share of non-Balanced rows whose state is called correctly."""
    x, y = labelled_rows(table, p.feature_names)
    if not len(y):
        return float("nan")
    calls = sigmoid(p.standardize(x) @ p.weights + p.bias) >= threshold
    return float(np.mean(calls == (y > 0.5)))
