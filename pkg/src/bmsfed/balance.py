"""Prototypes, the modal-enhancement loss and imbalance ratios.

A prototype is the per-class mean of one modality's embeddings. Distances
are plain Euclidean norms; scores and the ME loss are softmaxes over the
negated distances to every prototype of that modality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import bms_assert, create_error
from .models import ImbalanceReport, Modality
from .numkit import Matrix, ensure_finite, matmul

DEGENERATE_SUM = 1e-12


@dataclass
class PrototypeSet:
    """Class centroids of one modality with their sample counts."""
    dim: int
    centroids: Dict[int, np.ndarray] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)
    modality: Optional[Modality] = None

    def __post_init__(self) -> None:
        for cls_id, c in self.centroids.items():
            bms_assert(
                c.shape == (self.dim,), "BMS-100",
                f"centroid of class {cls_id} has shape {c.shape}, expected ({self.dim},)",
            )
            bms_assert(self.counts.get(cls_id, 0) >= 1, "BMS-302",
                       f"class {cls_id} has count {self.counts.get(cls_id)}")

    @property
    def classes(self) -> List[int]:
        return sorted(self.centroids)

    def __len__(self) -> int:
        return len(self.centroids)

    def __contains__(self, cls_id: int) -> bool:
        return cls_id in self.centroids

    def covers(self, labels: Iterable[int]) -> bool:
        return all(int(y) in self.centroids for y in labels)

    def matrix(self) -> Tuple[List[int], Matrix]:
        """(sorted class ids, stacked centroids)."""
        classes = self.classes
        if not classes:
            return [], np.zeros((0, self.dim))
        return classes, np.vstack([self.centroids[c] for c in classes])

    def to_dict(self) -> Dict:
        return {
            'dim': self.dim,
            'modality': self.modality.value if self.modality else None,
            'classes': {
                str(c): {'count': self.counts[c], 'centroid': self.centroids[c].tolist()}
                for c in self.classes
            },
        }


def _distances(z: Matrix, centroids: Matrix) -> Matrix:
    """(batch, classes) Euclidean distances."""
    if z.shape[1] != centroids.shape[1]:
        raise create_error(
            "BMS-100",
            technical_details=f"embeddings {z.shape} vs prototypes {centroids.shape}",
        )
    diff = z[:, None, :] - centroids[None, :, :]
    return np.sqrt(np.einsum("bkd,bkd->bk", diff, diff))


def _label_columns(labels: Sequence[int], classes: List[int], batch: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    bms_assert(y.shape == (batch,), "BMS-100", f"{y.size} labels for {batch} rows")
    index = {c: j for j, c in enumerate(classes)}
    missing = sorted({int(v) for v in y if int(v) not in index})
    if missing:
        raise create_error(
            "BMS-300",
            technical_details=f"no prototype for classes {missing}",
            context={'missing': missing},
        )
    return np.array([index[int(v)] for v in y], dtype=np.int64)


def _log_softmax_neg(d: Matrix) -> Matrix:
    u = -d
    u = u - u.max(axis=1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=1, keepdims=True))


def local_prototypes(
    z: Matrix, labels: Sequence[int], modality: Optional[Modality] = None
) -> PrototypeSet:
    """Per-class mean of the rows of ``z``."""
    y = np.asarray(labels, dtype=np.int64)
    bms_assert(z.ndim == 2 and y.shape == (z.shape[0],), "BMS-100",
               f"{y.size} labels for embeddings {z.shape}")
    protos = PrototypeSet(dim=z.shape[1], modality=modality)
    for cls_id in np.unique(y):
        rows = z[y == cls_id]
        protos.centroids[int(cls_id)] = rows.mean(axis=0)
        protos.counts[int(cls_id)] = int(rows.shape[0])
    return protos


def aggregate_prototypes(reports: Sequence[PrototypeSet]) -> PrototypeSet:
    """Count-weighted mean of centroids per class across reports."""
    if not reports:
        raise create_error("BMS-303", technical_details="no prototype sets")
    dim = reports[0].dim
    for p in reports:
        bms_assert(p.dim == dim, "BMS-100", f"prototype widths {p.dim} and {dim}")
    sums: Dict[int, np.ndarray] = {}
    totals: Dict[int, int] = {}
    for p in reports:
        for cls_id, c in p.centroids.items():
            n = p.counts[cls_id]
            sums[cls_id] = sums.get(cls_id, np.zeros(dim)) + n * c
            totals[cls_id] = totals.get(cls_id, 0) + n
    return PrototypeSet(
        dim=dim,
        centroids={c: sums[c] / totals[c] for c in sums},
        counts=dict(totals),
        modality=reports[0].modality,
    )


def merge_with_previous(current: PrototypeSet, previous: Optional[PrototypeSet]) -> PrototypeSet:
    """Classes nobody reported this round keep last round's centroid."""
    if previous is None:
        return current
    centroids = dict(current.centroids)
    counts = dict(current.counts)
    for cls_id in previous.classes:
        if cls_id not in centroids:
            centroids[cls_id] = previous.centroids[cls_id]
            counts[cls_id] = previous.counts[cls_id]
    return PrototypeSet(dim=current.dim, centroids=centroids, counts=counts,
                        modality=current.modality or previous.modality)


def me_loss_and_grad(
    z: Matrix,
    labels: Sequence[int],
    protos: PrototypeSet,
    modality: Optional[Modality] = None,
) -> Tuple[float, Matrix]:
    """Modal-enhancement loss −mean log softmax(−d(z, c))_y and its gradient in z.

    Prototypes are constants. Where z sits exactly on a prototype that
    prototype contributes a zero distance gradient.
    """
    if modality is not None and protos.modality is not None:
        bms_assert(protos.modality is modality, "BMS-300",
                   f"prototypes are for {protos.modality.value}, not {modality.value}")
    batch = z.shape[0]
    classes, centroids = protos.matrix()
    cols = _label_columns(labels, classes, batch)
    if batch == 0:
        return 0.0, np.zeros_like(z)

    d = _distances(z, centroids)
    log_p = _log_softmax_neg(d)
    rows = np.arange(batch)
    loss = float(-log_p[rows, cols].mean())

    # ∂loss/∂d_j = δ_jy − p_j ; ∂d_j/∂z = (z − c_j)/d_j
    weight = -np.exp(log_p)
    weight[rows, cols] += 1.0
    safe_d = np.where(d > 0.0, d, 1.0)
    coef = np.where(d > 0.0, weight / safe_d, 0.0)
    dz = coef.sum(axis=1, keepdims=True) * z - matmul(coef, centroids)
    return loss, ensure_finite(dz / batch, "me gradient")


def gt_scores(z: Matrix, labels: Sequence[int], protos: PrototypeSet) -> np.ndarray:
    """softmax(−d(z_i, c))[y_i] per row."""
    classes, centroids = protos.matrix()
    cols = _label_columns(labels, classes, z.shape[0])
    if z.shape[0] == 0:
        return np.zeros(0)
    log_p = _log_softmax_neg(_distances(z, centroids))
    return np.exp(log_p[np.arange(z.shape[0]), cols])


def local_ratio(s_a: Sequence[float], s_i: Sequence[float]) -> float:
    """ρ = Σ s_A / Σ s_I; above 1 means A is learned better than I."""
    a = np.asarray(s_a, dtype=np.float64)
    i = np.asarray(s_i, dtype=np.float64)
    if a.size == 0 or i.size == 0:
        raise create_error("BMS-301", technical_details="empty score vector")
    bms_assert(a.shape == i.shape, "BMS-100", f"score lengths {a.size} and {i.size}")
    denom = float(i.sum())
    if denom < DEGENERATE_SUM:
        raise create_error("BMS-301", technical_details=f"Σ s_I = {denom:.3e}")
    return float(a.sum()) / denom


def coefficients(rho: float) -> Tuple[float, float]:
    """(γ, β): γ enhances A when ρ < 1, β enhances I when ρ ≥ 1."""
    if not rho > 0 or not np.isfinite(rho):
        raise create_error("BMS-302", technical_details=f"ratio {rho}")
    if rho < 1.0:
        return float(np.clip(1.0 / rho - 1.0, 0.0, 1.0)), 0.0
    return 0.0, float(np.clip(rho - 1.0, 0.0, 1.0))


def imbalance_report(rho: float, sample_count: int) -> ImbalanceReport:
    bms_assert(sample_count >= 1, "BMS-302", f"sample_count={sample_count}")
    gamma, beta = coefficients(rho)
    return ImbalanceReport(local_ratio=rho, sample_count=sample_count, gamma=gamma, beta=beta)


def global_ratio(reports: Sequence[ImbalanceReport]) -> float:
    """Σ ρ_k n_k / Σ n_k over reporting clients."""
    if not reports:
        raise create_error("BMS-303", technical_details="no imbalance reports")
    for r in reports:
        bms_assert(r.sample_count >= 1 and r.local_ratio > 0, "BMS-302",
                   f"report ratio={r.local_ratio} n={r.sample_count}")
    n = np.array([r.sample_count for r in reports], dtype=np.float64)
    rho = np.array([r.local_ratio for r in reports], dtype=np.float64)
    return float((rho * n).sum() / n.sum())


def weak_modality(rho: float) -> Modality:
    """I is the weak modality when the global ratio exceeds 1."""
    return Modality.I if rho > 1.0 else Modality.A


def nearest_prototype_classify(z: Matrix, protos: PrototypeSet) -> np.ndarray:
    """Class id of the nearest centroid per row; ties go to the smallest id."""
    if len(protos) == 0:
        raise create_error("BMS-300", technical_details="empty prototype set")
    classes, centroids = protos.matrix()
    idx = np.argmin(_distances(z, centroids), axis=1)
    return np.asarray(classes, dtype=np.int64)[idx]
