import numpy as np
from ..errors import ValidationError, DimensionMismatchError


def _check(preds, labels) -> tuple:
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(preds) != len(labels):
        raise DimensionMismatchError(f"{len(preds)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValidationError("can't evaluate empty predictions")
    return preds, labels


def overall_accuracy(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    return float(np.mean(preds == labels))


def per_class_accuracy(preds, labels) -> dict:
    """
    Accuracy of each class present in labels
    """
    preds, labels = _check(preds, labels)
    return {
        int(c): float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)
    }


def mean_class_accuracy(preds, labels) -> float:
    return float(np.mean(list(per_class_accuracy(preds, labels).values())))


def part_ious(preds, labels, valid_parts) -> list:
    """
    IoU of each valid part of one instance (a part absent from both is counted as 1)
    """
    preds, labels = _check(preds, labels)
    ious = []
    for part in valid_parts:
        intersection = np.count_nonzero((preds == part) & (labels == part))
        union = np.count_nonzero((preds == part) | (labels == part))
        ious.append(1.0 if union == 0 else intersection / union)
    return ious


def instance_miou(preds: list, labels: list, valid_parts: list) -> float:
    """
    Mean over instances of the mean IoU over the instance valid parts
    """
    if len(preds) != len(labels) or len(preds) != len(valid_parts):
        raise DimensionMismatchError("one prediction, label and part list per instance")
    if len(preds) == 0:
        raise ValidationError("can't evaluate empty predictions")

    return float(
        np.mean(
            [
                np.mean(part_ious(p, l, parts))
                for p, l, parts in zip(preds, labels, valid_parts)
            ]
        )
    )


def masked_argmax(logits, mask) -> np.ndarray:
    """
    Row-wise argmax restricted to the entries where mask is True
    """
    logits = np.asarray(logits, dtype=np.float64)
    return np.argmax(np.where(mask, logits, -np.inf), axis=-1)


def evaluate_metrics(preds, labels, task: str, valid_parts: list | None = None) -> dict:
    """
    - cls: OA and mAcc over flat predictions
    - seg: preds and labels are lists of per-instance point labels, valid_parts the
      list of valid parts of each instance; gives point OA and mIoU_I
    """
    if task == "cls":
        return {
            "OA": overall_accuracy(preds, labels),
            "mAcc": mean_class_accuracy(preds, labels),
        }
    if task == "seg":
        if valid_parts is None:
            raise ValidationError("segmentation metrics need the valid parts of each instance")
        return {
            "OA": overall_accuracy(np.concatenate(preds), np.concatenate(labels)),
            "mIoU_I": instance_miou(preds, labels, valid_parts),
        }

    raise ValidationError(f"unknown task for metrics: {task}")
