"""Selective sample retention: score, select, remember.

A sample's importance is the Euclidean norm of the cross-entropy
gradient over all head parameters, measured at a caller-chosen
parameter snapshot. The top-p per (task, class) survive into an
append-only exemplar memory and are never re-scored or re-selected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Sample
from .errors import ConfigError, ProtocolError
from .trainer import Classifier, ce_loss_and_grads, softmax


@dataclass(eq=False)
class ScoredSample:
    sample: Sample
    score: float


def importance_score(classifier: Classifier, sample: Sample) -> float:
    """Gradient norm of the single-sample CE loss at the current head.

    The head gradient is outer(p - onehot, e) for the weights and
    (p - onehot) for the bias, so its norm factorizes as
    ||p - onehot|| * sqrt(||e||^2 + 1).
    """
    if sample.y not in classifier.class_index:
        raise ProtocolError(f"class {sample.y} is not registered in the head")
    emb = classifier.encoder.encode(sample.x)
    probs = softmax((classifier.weights @ emb
                     + classifier.bias)[None, :])[0]
    delta = probs.copy()
    delta[classifier.class_index[sample.y]] -= 1.0
    return float(np.linalg.norm(delta) * np.sqrt(1.0 + emb @ emb))


def sample_loss(classifier: Classifier, sample: Sample) -> float:
    """Per-sample CE loss, the ablation alternative to the gradient norm."""
    loss, _ = ce_loss_and_grads(classifier, [sample])
    return loss


def top_p_indices(scores, p: int) -> list[int]:
    """Indices of the p largest scores; ties keep the lower index.

    Equivalent to the exhaustive argmax over all size-p subsets of the
    summed score, with ties resolved toward the lexicographically
    smallest index tuple.
    """
    if p < 0:
        raise ConfigError(f"p must be >= 0, got {p}")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:min(p, len(scores))])


def select_exemplars(classifier: Classifier, samples: list[Sample], p: int,
                     score_by: str = "grad_norm") -> list[ScoredSample]:
    """Score one class's candidates and keep the top p."""
    if score_by == "grad_norm":
        scorer = importance_score
    elif score_by == "loss":
        scorer = sample_loss
    else:
        raise ConfigError(f"unknown score_by {score_by!r}")
    scores = [scorer(classifier, s) for s in samples]
    return [ScoredSample(sample=samples[i], score=scores[i])
            for i in top_p_indices(scores, p)]


class ExemplarMemory:
    """Append-only store of retained samples, keyed task -> class.

    Stored sample vectors are defensive read-only copies; a task can be
    written once and its sets are replayed in arrival order forever.
    """

    def __init__(self, p: int):
        if p < 0:
            raise ConfigError(f"p must be >= 0, got {p}")
        self.p = p
        self._store: dict[int, dict[int, list[ScoredSample]]] = {}

    @property
    def task_ids(self) -> list[int]:
        return list(self._store)

    @property
    def size(self) -> int:
        return sum(len(lst) for per_class in self._store.values()
                   for lst in per_class.values())

    def add_task(self, task_id: int,
                 per_class: dict[int, list[ScoredSample]]) -> None:
        if task_id in self._store:
            raise ProtocolError(f"task {task_id} is already remembered")
        frozen: dict[int, list[ScoredSample]] = {}
        for k in sorted(per_class):
            chosen = per_class[k]
            if len(chosen) > self.p:
                raise ProtocolError(
                    f"{len(chosen)} exemplars for class {k} exceed p={self.p}")
            copies = []
            for sc in chosen:
                x = sc.sample.x.copy()
                x.flags.writeable = False
                copies.append(ScoredSample(
                    sample=Sample(x=x, y=sc.sample.y, domain=sc.sample.domain,
                                  task=sc.sample.task),
                    score=sc.score))
            frozen[k] = copies
        self._store[task_id] = frozen

    def replay_sets(self, current_task: int | None = None
                    ) -> list[list[Sample]]:
        """Remembered samples grouped by task, oldest first, excluding
        the task currently being learned."""
        sets = []
        for task_id, per_class in self._store.items():
            if current_task is not None and task_id == current_task:
                continue
            sets.append([sc.sample for k in sorted(per_class)
                         for sc in per_class[k]])
        return sets

    def dump_text(self) -> str:
        """Human-readable table: task, class, slot, score, vector."""
        lines = ["task\tclass\tslot\tscore\tvector"]
        for task_id, per_class in self._store.items():
            for k in sorted(per_class):
                for slot, sc in enumerate(per_class[k]):
                    vec = " ".join(repr(float(v)) for v in sc.sample.x)
                    lines.append(
                        f"{task_id}\t{k}\t{slot}\t{sc.score!r}\t{vec}")
        return "\n".join(lines) + "\n"
