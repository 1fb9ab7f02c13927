import json
import numpy as np
from ..errors import ValidationError, DimensionMismatchError


class ToyClassifier:
    """
    Linear classifier: logits = features @ weights.T + bias, weights is K x C
    """

    def __init__(self, weights, bias, config: dict | None = None):
        self.weights: np.ndarray = np.asarray(weights, dtype=np.float64)
        self.bias: np.ndarray = np.asarray(bias, dtype=np.float64).reshape(-1)
        self.config: dict = dict(config or {})

        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.bias):
            raise DimensionMismatchError("weights must be K x C with a K-vector bias")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("classifier parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.dim:
            raise DimensionMismatchError(
                f"features have dimension {features.shape[-1]}, classifier expects {self.dim}"
            )
        return features @ self.weights.T + self.bias

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=-1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "config": self.config,
        }

    def save(self, filename: str) -> None:
        with open(filename, "w") as f:
            json.dump(self.to_dict(), f)

    @staticmethod
    def load(filename: str) -> "ToyClassifier":
        with open(filename) as f:
            data = json.load(f)
        return ToyClassifier(data["weights"], data["bias"], data.get("config", {}))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def loss_and_gradient(weights, bias, features, labels) -> tuple:
    """
    Mean cross-entropy of the softmax of the linear logits, and its gradient with
    respect to (weights, bias)
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    M = len(labels)

    log_probs = _log_softmax(features @ weights.T + bias)
    loss = -np.mean(log_probs[np.arange(M), labels])

    residual = np.exp(log_probs)
    residual[np.arange(M), labels] -= 1.0
    residual /= M

    return float(loss), residual.T @ features, np.sum(residual, axis=0)


def train_classifier(
    features,
    labels,
    num_classes: int | None = None,
    learning_rate: float = 0.5,
    epochs: int = 300,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> ToyClassifier:
    """
    Full-batch gradient descent on the cross-entropy. A step that doesn't decrease
    the loss is rejected and the learning rate halved, so the accepted losses are
    strictly decreasing; training stops early when the decrease falls below
    tolerance
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if len(features) != len(labels):
        raise DimensionMismatchError(f"{len(features)} features for {len(labels)} labels")
    if len(np.unique(labels)) < 2:
        raise ValidationError("training a classifier needs at least 2 classes")
    if epochs < 1:
        raise ValidationError(f"epochs must be at least 1, got {epochs}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1

    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 0.01, (num_classes, features.shape[1]))
    bias = np.zeros(num_classes)
    loss, grad_w, grad_b = loss_and_gradient(weights, bias, features, labels)
    losses = [loss]
    lr = learning_rate

    for epoch in range(epochs):
        candidate_w = weights - lr * grad_w
        candidate_b = bias - lr * grad_b
        candidate_loss, candidate_grad_w, candidate_grad_b = loss_and_gradient(
            candidate_w, candidate_b, features, labels
        )

        if candidate_loss < loss:
            improvement = loss - candidate_loss
            weights, bias = candidate_w, candidate_b
            loss, grad_w, grad_b = candidate_loss, candidate_grad_w, candidate_grad_b
            losses.append(loss)
            if improvement < tolerance:
                break
        else:
            lr /= 2
            if lr < 1e-10:
                break

    return ToyClassifier(
        weights,
        bias,
        {
            "learning_rate": learning_rate,
            "epochs": epochs,
            "seed": seed,
            "epochs_run": epoch + 1,
            "losses": losses,
        },
    )
