"""Prediction layer over event-vector sequences.

A single-layer GRU (hidden 256) consumes the per-event vectors, the final
hidden state passes through dropout 0.3 and a linear head, and every output
goes through a sigmoid. The final hidden state doubles as the ICU-stay
representation used for PCA.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import init_gru, gru_sequence
from .errors import ConfigError, InputError
from .tensor import RngStream, Tensor

PRED_HIDDEN = 256
PRED_DROPOUT = 0.3

TASKS = ("readm", "mort", "los3", "los7", "dx")
N_DX_CLASSES = 18


def task_arity(task: str) -> int:
    if task not in TASKS:
        raise ConfigError(f"unknown task '{task}' (expected one of {TASKS})")
    return N_DX_CLASSES if task == "dx" else 1


def init_predictor(input_dim: int, task: str, rng: RngStream) -> dict[str, Tensor]:
    p = init_gru("pred", input_dim, PRED_HIDDEN, rng)
    k = task_arity(task)
    p["pred.head_w"] = Tensor(rng.normal(0.02, (PRED_HIDDEN, k)), requires_grad=True)
    p["pred.head_b"] = Tensor(np.zeros(k), requires_grad=True)
    return p


def predict(event_vecs: Tensor, mask: np.ndarray, params: dict[str, Tensor],
            train: bool = False, gen=None,
            return_hidden: bool = False):
    """Sequence of event vectors [B, T, D] -> probabilities [B, k] in (0, 1)."""
    if event_vecs.shape[1] < 1 or mask.sum() == 0:
        raise InputError("predict: empty event sequence")
    h = gru_sequence(event_vecs, mask, params, "pred", PRED_HIDDEN)
    hd = T.dropout(h, PRED_DROPOUT, train, gen)
    logits = T.add(T.matmul(hd, params["pred.head_w"]), params["pred.head_b"])
    probs = T.sigmoid(logits)
    if return_hidden:
        return probs, h
    return probs


def task_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over outputs and batch."""
    return T.binary_cross_entropy(probs, labels)


def labels_matrix(records, task: str) -> np.ndarray:
    k = task_arity(task)
    out = np.zeros((len(records), k))
    for i, r in enumerate(records):
        if task == "dx":
            for c in r.labels.dx:
                out[i, c - 1] = 1.0
        else:
            out[i, 0] = float(r.labels.binary(task))
    return out


@dataclass
class StayRepresentation:
    stay_id: str
    vector: np.ndarray  # 256-d final GRU hidden state, dropout disabled
