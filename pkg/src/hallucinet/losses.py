"""Classification and distillation losses, all batch-averaged.

Inputs of shape ``[C]`` are treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, log, mul, reshape, square, tempered_softmax, tsum


class NotOneHotError(ValueError):
    pass


class TemperatureMismatchError(ValueError):
    pass


@dataclass
class SoftTargets:
    probs: Tensor
    temperature: float


def _batched(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 1:
        return reshape(x, (1, x.shape[0]))
    return x


def soften(logits, T: float) -> SoftTargets:
    return SoftTargets(tempered_softmax(_batched(logits), T), float(T))


def one_hot(indices, num_classes: int, dtype=np.float32) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    out = np.zeros((indices.size, num_classes), dtype=dtype)
    out[np.arange(indices.size), indices] = 1
    return out


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def cross_entropy(y_true, y_pred) -> Tensor:
    """Mean over the batch of -sum_l y_l log(y_hat_l), log clamped at 1e-12."""
    y_true = np.asarray(y_true.data if isinstance(y_true, Tensor) else y_true)
    if y_true.ndim == 1:
        y_true = y_true.reshape(1, -1)
    y_pred = _batched(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"cross_entropy: shape mismatch {y_true.shape} vs {y_pred.shape}")
    binary = np.all((y_true == 0) | (y_true == 1))
    if not binary or not np.all(y_true.sum(axis=1) == 1):
        raise NotOneHotError("cross_entropy targets must be one-hot rows")
    target = Tensor(y_true, dtype=y_pred.dtype)
    per_sample = tsum(mul(target, log(y_pred)), axis=1)
    return mul(per_sample.mean(), -1.0)


def _check_temps(a: SoftTargets, b: SoftTargets) -> None:
    if a.temperature != b.temperature:
        raise TemperatureMismatchError(
            f"soft targets produced at different temperatures: {a.temperature} vs {b.temperature}"
        )


def hallucination_loss(s_teacher: SoftTargets, s_hall: SoftTargets) -> Tensor:
    """Squared L2 distance between soft targets, averaged over the batch."""
    _check_temps(s_teacher, s_hall)
    t, h = _batched(s_teacher.probs), _batched(s_hall.probs)
    _check_same_shape(t, h, "hallucination_loss")
    return tsum(square(t - h), axis=1).mean()


def kl_loss(s_teacher: SoftTargets, s_hall: SoftTargets) -> Tensor:
    """D_KL(teacher || hallucination); the teacher side carries no gradient."""
    _check_temps(s_teacher, s_hall)
    t, h = _batched(s_teacher.probs), _batched(s_hall.probs)
    _check_same_shape(t, h, "kl_loss")
    t = t.detach()
    t_log_t = np.where(t.data > 0, t.data * np.log(np.maximum(t.data, 1e-12)), 0.0).sum(axis=1)
    cross = tsum(mul(t, log(h)), axis=1)
    return (Tensor(t_log_t.astype(h.dtype)) - cross).mean()


def _hard_targets(teacher_logits: Tensor, labels, num_classes: int) -> np.ndarray:
    if labels is None:
        # first maximal index, matching predict()'s tie rule
        return one_hot(np.argmax(teacher_logits.data, axis=1), num_classes)
    return one_hot(labels, num_classes)


def kd_loss(teacher_logits, student_logits, lam: float, T: float, labels=None) -> Tensor:
    """lam * T^2 * KL(soft teacher || soft student) + (1 - lam) * hard-label CE.

    The hard targets are the teacher's argmax unless ``labels`` (ground truth)
    is given.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    teacher_logits, student_logits = _batched(teacher_logits), _batched(student_logits)
    _check_same_shape(teacher_logits, student_logits, "kd_loss")
    terms = []
    if lam > 0:
        kl = kl_loss(soften(teacher_logits, T), soften(student_logits, T))
        terms.append(mul(kl, lam * T * T))
    if lam < 1:
        targets = _hard_targets(teacher_logits, labels, teacher_logits.shape[1])
        ce = cross_entropy(targets, tempered_softmax(student_logits, 1.0))
        terms.append(mul(ce, 1.0 - lam))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def gd_loss(teacher_logits, student_logits, alpha: float, lam: float, T: float, labels=None) -> Tensor:
    """alpha * kd_loss + (1 - alpha) * hallucination_loss at temperature T."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    teacher_logits, student_logits = _batched(teacher_logits), _batched(student_logits)
    _check_same_shape(teacher_logits, student_logits, "gd_loss")
    terms = []
    if alpha > 0:
        terms.append(mul(kd_loss(teacher_logits, student_logits, lam, T, labels), alpha))
    if alpha < 1:
        hall = hallucination_loss(soften(teacher_logits, T), soften(student_logits, T))
        terms.append(mul(hall, 1.0 - alpha))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]
