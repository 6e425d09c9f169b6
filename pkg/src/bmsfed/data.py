"""Synthetic bimodal datasets and federated partitions.

Class j's mean in each modality is √2·scale·e_j, so any two class means are
2·scale apart. Per-modality noise has std 1/snr: the modality with the larger
snr is the dominant one by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Union

import numpy as np

from .errors import bms_assert, create_error, wrap_exception
from .models import BOTH_MODALITIES, Modality
from .numkit import Matrix, RngStream, rng_subset

MAGIC = b"BMSD"
FORMAT_VERSION = 1
MAX_PARTITION_RETRIES = 100


@dataclass
class BimodalDataset:
    """Paired A/I feature rows with class labels."""
    x_a: Matrix
    x_i: Matrix
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        bms_assert(
            self.x_a.shape[0] == n and self.x_i.shape[0] == n, "BMS-100",
            f"rows x_a={self.x_a.shape[0]} x_i={self.x_i.shape[0]} labels={n}",
        )
        if n:
            bms_assert(
                int(self.labels.min()) >= 0 and int(self.labels.max()) < self.num_classes,
                "BMS-201", f"labels outside [0, {self.num_classes})",
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim_a(self) -> int:
        return self.x_a.shape[1]

    @property
    def dim_i(self) -> int:
        return self.x_i.shape[1]

    def modality(self, m: Modality) -> Matrix:
        return self.x_a if m is Modality.A else self.x_i

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "BimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return BimodalDataset(
            x_a=self.x_a[idx], x_i=self.x_i[idx], labels=self.labels[idx],
            num_classes=self.num_classes,
        )

    def dump(self, path: Union[str, Path]) -> None:
        """Write the BMSD little-endian binary format."""
        header = np.array(
            [FORMAT_VERSION, len(self), self.dim_a, self.dim_i, self.num_classes], dtype="<u4"
        )
        payload = b"".join([
            MAGIC,
            header.tobytes(),
            np.ascontiguousarray(self.x_a, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.x_i, dtype="<f8").tobytes(),
            self.labels.astype("<u4").tobytes(),
        ])
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
        except OSError as e:
            raise wrap_exception(e, "BMS-801", context={'path': str(path)})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BimodalDataset":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise wrap_exception(e, "BMS-603", context={'path': str(path)})
        if len(raw) < 24 or raw[:4] != MAGIC:
            raise create_error("BMS-603", technical_details=f"{path}: bad magic")
        version, n, d_a, d_i, num_classes = (
            int(v) for v in np.frombuffer(raw, dtype="<u4", count=5, offset=4)
        )
        if version != FORMAT_VERSION:
            raise create_error("BMS-603", technical_details=f"{path}: version {version}")
        expected = 24 + 8 * n * (d_a + d_i) + 4 * n
        if len(raw) != expected:
            raise create_error(
                "BMS-603", technical_details=f"{path}: {len(raw)} bytes, expected {expected}",
            )
        offset = 24
        x_a = np.frombuffer(raw, dtype="<f8", count=n * d_a, offset=offset).reshape(n, d_a)
        offset += 8 * n * d_a
        x_i = np.frombuffer(raw, dtype="<f8", count=n * d_i, offset=offset).reshape(n, d_i)
        offset += 8 * n * d_i
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset)
        return cls(
            x_a=x_a.astype(np.float64), x_i=x_i.astype(np.float64),
            labels=labels.astype(np.int64), num_classes=num_classes,
        )


@dataclass
class PartitionPlan:
    """Client → sample indices, plus each client's modality mask."""
    assignment: Dict[int, np.ndarray]
    alpha: Optional[float] = None
    masks: Dict[int, FrozenSet[Modality]] = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.assignment)

    @property
    def is_iid(self) -> bool:
        return self.alpha is None

    def mask_of(self, client: int) -> FrozenSet[Modality]:
        return self.masks.get(client, BOTH_MODALITIES)

    def sizes(self) -> List[int]:
        return [len(self.assignment[k]) for k in sorted(self.assignment)]

    def check(self, n_samples: int) -> None:
        """Shards must be nonempty, disjoint and cover 0..n_samples−1."""
        seen = np.concatenate([self.assignment[k] for k in sorted(self.assignment)])
        bms_assert(all(s > 0 for s in self.sizes()), "BMS-601", "a client holds no samples")
        bms_assert(
            seen.size == n_samples and np.array_equal(np.sort(seen), np.arange(n_samples)),
            "BMS-601", "shards are not a partition of the training set",
        )


def generate(
    num_classes: int,
    per_class: int,
    dim_a: int,
    dim_i: int,
    snr_a: float,
    snr_i: float,
    stream: RngStream,
    class_scale: float = 1.0,
) -> BimodalDataset:
    """Gaussian class clusters in two modalities.

    ``snr = inf`` puts every sample on its class mean. ``snr = 0`` makes the
    modality pure unit noise around the origin.
    """
    if num_classes < 2:
        raise create_error("BMS-600", technical_details=f"num_classes={num_classes}")
    if per_class < 1:
        raise create_error("BMS-600", technical_details=f"per_class={per_class}")
    if snr_a < 0 or snr_i < 0:
        raise create_error("BMS-600", technical_details=f"snr_a={snr_a} snr_i={snr_i}")
    if min(dim_a, dim_i) < num_classes:
        raise create_error(
            "BMS-600",
            technical_details=f"dims ({dim_a}, {dim_i}) must be >= num_classes {num_classes}",
        )
    if class_scale <= 0:
        raise create_error("BMS-600", technical_details=f"class_scale={class_scale}")

    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    n = labels.shape[0]

    def modality(dim: int, snr: float) -> Matrix:
        if snr == 0:
            return stream.gaussian(n, dim, 0.0, 1.0)
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = np.sqrt(2.0) * class_scale
        noise = stream.gaussian(n, dim, 0.0, 1.0 / snr)
        return means[labels] + noise

    x_a = modality(dim_a, snr_a)
    x_i = modality(dim_i, snr_i)
    return BimodalDataset(x_a=x_a, x_i=x_i, labels=labels, num_classes=num_classes)


def partition_iid(n_samples: int, n_clients: int, stream: RngStream) -> PartitionPlan:
    """Random permutation cut into near-equal shards."""
    if n_clients < 1 or n_clients > n_samples:
        raise create_error(
            "BMS-601", technical_details=f"{n_clients} clients for {n_samples} samples",
        )
    shards = np.array_split(stream.permutation(n_samples), n_clients)
    return PartitionPlan(assignment={k: np.sort(s) for k, s in enumerate(shards)}, alpha=None)


def _split_counts(total: int, proportions: np.ndarray) -> np.ndarray:
    """Floor of total·p, remainder handed out by largest fractional part."""
    raw = total * proportions
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    labels: Sequence[int],
    n_clients: int,
    alpha: float,
    stream: RngStream,
    max_retries: int = MAX_PARTITION_RETRIES,
) -> PartitionPlan:
    """Per class, deal samples to clients by Dir(alpha) proportions.

    Draws that leave a client empty are redrawn whole.
    """
    y = np.asarray(labels, dtype=np.int64)
    if alpha <= 0:
        raise create_error("BMS-601", technical_details=f"alpha={alpha}")
    if n_clients < 1 or n_clients > y.size:
        raise create_error("BMS-601", technical_details=f"{n_clients} clients for {y.size} samples")

    for _ in range(max_retries):
        shards: List[List[int]] = [[] for _ in range(n_clients)]
        for cls_id in np.unique(y):
            idx = np.flatnonzero(y == cls_id)
            idx = idx[stream.permutation(idx.size)]
            counts = _split_counts(idx.size, stream.dirichlet([alpha] * n_clients))
            start = 0
            for k, c in enumerate(counts):
                shards[k].extend(int(i) for i in idx[start:start + c])
                start += c
        if all(shards):
            return PartitionPlan(
                assignment={k: np.sort(np.array(s, dtype=np.int64)) for k, s in enumerate(shards)},
                alpha=alpha,
            )
    raise create_error(
        "BMS-602",
        technical_details=f"{max_retries} draws with alpha={alpha} left a client empty",
    )


def apply_incongruity(plan: PartitionPlan, fraction_uni: float, stream: RngStream) -> PartitionPlan:
    """⌊fraction·N⌋ random clients keep only A or only I (even odds)."""
    if not 0.0 <= fraction_uni <= 1.0:
        raise create_error("BMS-601", technical_details=f"fraction_uni={fraction_uni}")
    clients = sorted(plan.assignment)
    count = int(np.floor(fraction_uni * len(clients) + 1e-12))
    masks: Dict[int, FrozenSet[Modality]] = {k: BOTH_MODALITIES for k in clients}
    for k in rng_subset(stream, clients, count):
        kept = Modality.A if float(stream.uniform()) < 0.5 else Modality.I
        masks[k] = frozenset({kept})
    return PartitionPlan(assignment=dict(plan.assignment), alpha=plan.alpha, masks=masks)
