"""Data models for bmsfed.

Dataclasses for modality tags, imbalance reports, selection outcomes and
per-round metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional


class Modality(str, Enum):
    """The two input modalities. A is the audio-like slot, I the visual-like one."""
    A = "A"
    I = "I"  # noqa: E741

    @property
    def other(self) -> "Modality":
        return Modality.I if self is Modality.A else Modality.A


BOTH_MODALITIES: FrozenSet[Modality] = frozenset({Modality.A, Modality.I})


@dataclass(frozen=True)
class ImbalanceReport:
    """A client's local imbalance ratio and the coefficients derived from it."""
    local_ratio: float
    sample_count: int
    gamma: float = 0.0
    beta: float = 0.0

    def coefficient_for(self, modality: Modality) -> float:
        """ME coefficient applied when ``modality`` is enhanced (γ for A, β for I)."""
        return self.gamma if modality is Modality.A else self.beta

    def to_dict(self) -> Dict[str, Any]:
        return {
            'local_ratio': self.local_ratio,
            'sample_count': self.sample_count,
            'gamma': self.gamma,
            'beta': self.beta,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ImbalanceReport':
        return cls(
            local_ratio=float(data['local_ratio']),
            sample_count=int(data['sample_count']),
            gamma=float(data.get('gamma', 0.0)),
            beta=float(data.get('beta', 0.0)),
        )


@dataclass
class SelectionOutcome:
    """Client roles for one round: multi-modal trainers and weak-modality trainers."""
    s_m: List[int] = field(default_factory=list)
    s_uni: List[int] = field(default_factory=list)
    weak_modality: Modality = Modality.I

    # Trained modality per uni client; defaults to the weak modality.
    uni_modality: Dict[int, Modality] = field(default_factory=dict)

    @property
    def selected(self) -> List[int]:
        return sorted(self.s_m + self.s_uni)

    def role_of(self, client_id: int) -> Optional[Modality]:
        """None for multi-modal clients, else the single modality trained."""
        if client_id in self.s_m:
            return None
        return self.uni_modality.get(client_id, self.weak_modality)

    def to_dict(self) -> Dict[str, Any]:
        return {
            's_m': sorted(self.s_m),
            's_uni': sorted(self.s_uni),
            'weak_modality': self.weak_modality.value,
            'uni_modality': {
                str(k): v.value for k, v in sorted(self.uni_modality.items())
            },
        }


@dataclass
class RoundMetrics:
    """Everything recorded after one communication round."""
    round: int
    acc_multi: float = 0.0
    acc_uni_a: float = 0.0
    acc_uni_i: float = 0.0
    global_ratio: float = 1.0
    n_selected_multi: int = 0
    n_selected_uni: int = 0
    mean_train_loss: float = 0.0
    weak_modality: Modality = Modality.I

    CSV_HEADER = (
        "round", "acc_multi", "acc_uni_a", "acc_uni_i",
        "global_ratio", "n_multi", "n_uni", "train_loss",
    )

    def csv_row(self) -> List[str]:
        """Row for metrics.csv: integers bare, floats with 6 decimals."""
        return [
            str(self.round),
            f"{self.acc_multi:.6f}",
            f"{self.acc_uni_a:.6f}",
            f"{self.acc_uni_i:.6f}",
            f"{self.global_ratio:.6f}",
            str(self.n_selected_multi),
            str(self.n_selected_uni),
            f"{self.mean_train_loss:.6f}",
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'round': self.round,
            'acc_multi': self.acc_multi,
            'acc_uni_a': self.acc_uni_a,
            'acc_uni_i': self.acc_uni_i,
            'global_ratio': self.global_ratio,
            'n_multi': self.n_selected_multi,
            'n_uni': self.n_selected_uni,
            'train_loss': self.mean_train_loss,
            'weak_modality': self.weak_modality.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RoundMetrics':
        return cls(
            round=int(data['round']),
            acc_multi=float(data.get('acc_multi', 0.0)),
            acc_uni_a=float(data.get('acc_uni_a', 0.0)),
            acc_uni_i=float(data.get('acc_uni_i', 0.0)),
            global_ratio=float(data.get('global_ratio', 1.0)),
            n_selected_multi=int(data.get('n_multi', 0)),
            n_selected_uni=int(data.get('n_uni', 0)),
            mean_train_loss=float(data.get('train_loss', 0.0)),
            weak_modality=Modality(data.get('weak_modality', 'I')),
        )


@dataclass
class RunSummary:
    """Final-round and best-round metrics of one run."""
    label: str
    method: str
    seed: int
    rounds: int
    final: RoundMetrics
    best: RoundMetrics

    def to_dict(self) -> Dict[str, Any]:
        return {
            'label': self.label,
            'method': self.method,
            'seed': self.seed,
            'rounds': self.rounds,
            'final': self.final.to_dict(),
            'best': self.best.to_dict(),
        }
