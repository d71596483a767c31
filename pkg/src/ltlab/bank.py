"""Momentum branch bookkeeping: EMA shadow parameters and the key queue.

The queue stores unit-norm embeddings produced by the momentum encoder,
together with their labels, oldest first. Each training step snapshots the
current batch's momentum keys plus the queue into an immutable KeyBank; the
contrastive losses draw their positive and negative sets from that snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams


class KeyQueue:
    """Fixed-capacity FIFO of labeled embeddings; oldest entries evicted first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._keys = np.zeros((0, dim), dtype=np.float64)
        self._labels = np.zeros(0, dtype=np.int64)
        self.total_pushed = 0
        self.total_evicted = 0

    def push(self, keys: np.ndarray, labels: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"expected keys of dim {self.dim}, got {keys.shape}")
        if labels.shape != (keys.shape[0],):
            raise ValueError("one label per key required")
        if keys.shape[0] == 0:
            return
        self._keys = np.concatenate([self._keys, keys])
        self._labels = np.concatenate([self._labels, labels])
        self.total_pushed += keys.shape[0]
        overflow = self._keys.shape[0] - self.capacity
        if overflow > 0:
            self._keys = self._keys[overflow:]
            self._labels = self._labels[overflow:]
            self.total_evicted += overflow

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    def __len__(self) -> int:
        return self._keys.shape[0]


@dataclass(frozen=True)
class KeyBank:
    """Immutable per-step snapshot: current-batch momentum keys, then queue keys."""

    keys: np.ndarray  # (M, E), batch keys first
    labels: np.ndarray  # (M,)
    batch_size: int  # number of leading rows that came from the batch

    @classmethod
    def assemble(
        cls, batch_keys: np.ndarray, batch_labels: np.ndarray, queue: KeyQueue
    ) -> "KeyBank":
        batch_keys = np.asarray(batch_keys, dtype=np.float64)
        batch_labels = np.asarray(batch_labels, dtype=np.int64)
        keys = np.concatenate([batch_keys, queue.keys])
        labels = np.concatenate([batch_labels, queue.labels])
        return cls(keys=keys, labels=labels, batch_size=batch_keys.shape[0])

    def __len__(self) -> int:
        return self.keys.shape[0]


def positive_and_all_sets(
    bank: KeyBank, instance_index: int, instance_label: int
) -> tuple[np.ndarray, np.ndarray]:
    """Index sets used by the contrastive losses for one query instance.

    The full set is every bank element: the query itself lives on the main
    branch and is never a bank member, while the instance's own momentum key
    (row instance_index of the batch keys) is a bank member and is kept as a
    positive, so isolated rare-class instances still have at least one
    positive. The positive set is every bank element sharing the query label.
    """
    if len(bank) == 0:
        raise ValueError("bank is empty")
    if not 0 <= instance_index < bank.batch_size:
        raise ValueError("instance_index outside the current batch")
    all_idx = np.arange(len(bank))
    pos_idx = all_idx[bank.labels == instance_label]
    return pos_idx, all_idx


@dataclass
class MomentumParams:
    """EMA shadow copy of the main-branch parameters."""

    params: ModelParams
    m: float = 0.999  # EMA coefficient; the usual momentum-encoder default

    def __post_init__(self) -> None:
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1]")

    @classmethod
    def from_main(cls, main: ModelParams, m: float = 0.999) -> "MomentumParams":
        return cls(params=main.copy(), m=m)


def ema_update(main: ModelParams, shadow: MomentumParams) -> MomentumParams:
    """shadow <- m * shadow + (1 - m) * main, elementwise over every tensor."""
    m = shadow.m
    main_arrays = main.arrays()
    shadow_arrays = shadow.params.arrays()
    if len(main_arrays) != len(shadow_arrays):
        raise ValueError("parameter structure mismatch")
    for src, dst in zip(main_arrays, shadow_arrays):
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch: {src.shape} vs {dst.shape}")
        dst *= m
        dst += (1.0 - m) * src
    return shadow
