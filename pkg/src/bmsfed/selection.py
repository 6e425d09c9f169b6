"""Submodular client selection.

Clients are points in gradient space. A set S "covers" client k at cost
min_{i∈S} dist[k, i]; the facility-location objective G(S) sums those costs
and the maximized surrogate is Ḡ(S) = Σ_k (C_max − min_{i∈S} dist[k, i]),
with C_max the largest matrix entry and Ḡ(∅) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .balance import weak_modality as weak_modality_for
from .errors import bms_assert, create_error
from .logging import get_logger
from .models import BOTH_MODALITIES, Modality, SelectionOutcome
from .numkit import Matrix, RngStream, flatten_l2_distance, rng_subset


@dataclass
class SimilarityMatrix:
    """Pairwise gradient distances plus the gradients they were built from.

    ``freshness[k]`` is the round client k's gradient was last refreshed,
    −1 if never.
    """
    n: int
    dist: Matrix = field(default=None)  # type: ignore[assignment]
    freshness: np.ndarray = field(default=None)  # type: ignore[assignment]
    grads: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dist is None:
            self.dist = np.zeros((self.n, self.n))
        if self.freshness is None:
            self.freshness = np.full(self.n, -1, dtype=np.int64)
        bms_assert(self.dist.shape == (self.n, self.n), "BMS-100",
                   f"distance matrix {self.dist.shape} for {self.n} clients")

    @property
    def initialized(self) -> bool:
        return bool(self.grads) and len(self.grads) == self.n

    @property
    def c_max(self) -> float:
        return float(self.dist.max()) if self.n else 0.0


DistanceLike = Union[SimilarityMatrix, Matrix]


def _matrix(dist: DistanceLike) -> Matrix:
    return dist.dist if isinstance(dist, SimilarityMatrix) else np.asarray(dist, dtype=np.float64)


def update_similarity(
    sim: SimilarityMatrix,
    fresh_grads: Mapping[int, np.ndarray],
    round_index: int,
) -> SimilarityMatrix:
    """Refresh the rows and columns of clients with new gradients.

    The first refresh must supply every client; afterwards any subset.
    """
    if not fresh_grads:
        return sim
    for k in fresh_grads:
        bms_assert(0 <= k < sim.n, "BMS-403", f"client {k} outside [0, {sim.n})")
    if not sim.initialized and set(fresh_grads) != set(range(sim.n)) - set(sim.grads):
        raise create_error(
            "BMS-403",
            technical_details=(
                f"first refresh covers {len(fresh_grads)} of {sim.n} clients"
            ),
        )

    grads = dict(sim.grads)
    for k, g in fresh_grads.items():
        grads[k] = np.asarray(g, dtype=np.float64).ravel()
    width = {g.shape for g in grads.values()}
    if len(width) != 1:
        raise create_error("BMS-403", technical_details=f"gradient shapes {sorted(width)}")

    dist = sim.dist.copy()
    freshness = sim.freshness.copy()
    for k in sorted(fresh_grads):
        for j in range(sim.n):
            d = 0.0 if j == k else flatten_l2_distance(grads[k], grads[j])
            dist[k, j] = d
            dist[j, k] = d
        freshness[k] = round_index
    return SimilarityMatrix(n=sim.n, dist=dist, freshness=freshness, grads=grads)


def build_similarity(grads: Mapping[int, np.ndarray], round_index: int = 0) -> SimilarityMatrix:
    """Full rebuild from a gradient per client 0..n−1."""
    return update_similarity(SimilarityMatrix(n=len(grads)), grads, round_index)


def facility_location_value(dist: DistanceLike, s: Iterable[int]) -> float:
    """G(S) = Σ_k min_{i∈S} dist[k, i]; G(∅) = n·C_max."""
    d = _matrix(dist)
    members = sorted(set(s))
    if not members:
        return float(d.shape[0] * d.max()) if d.size else 0.0
    return float(d[:, members].min(axis=1).sum())


def surrogate_value(dist: DistanceLike, s: Iterable[int]) -> float:
    """Ḡ(S) = n·C_max − G(S)."""
    d = _matrix(dist)
    if not d.size:
        return 0.0
    return float(d.shape[0] * d.max()) - facility_location_value(d, s)


def _cover(d: Matrix, s: Iterable[int]) -> np.ndarray:
    members = sorted(set(s))
    if not members:
        return np.full(d.shape[0], d.max() if d.size else 0.0)
    return d[:, members].min(axis=1)


def _gain(d: Matrix, cover: np.ndarray, v: int) -> float:
    return float(np.maximum(cover - d[:, v], 0.0).sum())


def marginal_gain(dist: DistanceLike, s: Iterable[int], candidate: int) -> float:
    """Ḡ(S ∪ {v}) − Ḡ(S)."""
    d = _matrix(dist)
    members = set(s)
    if candidate in members or not 0 <= candidate < d.shape[0]:
        raise create_error(
            "BMS-400",
            technical_details=f"candidate {candidate} already selected or outside universe",
        )
    return _gain(d, _cover(d, members), candidate)


def _argmax_gain(d: Matrix, cover: np.ndarray, pool: Sequence[int]) -> Optional[int]:
    best: Optional[int] = None
    best_gain = -np.inf
    for v in sorted(pool):
        g = _gain(d, cover, v)
        if g > best_gain:
            best, best_gain = v, g
    return best


def _draw_pool(remaining: List[int], s_sample: int, rng: RngStream) -> List[int]:
    if s_sample >= len(remaining):
        return list(remaining)
    return rng_subset(rng, remaining, s_sample)


def stochastic_greedy(
    dist: DistanceLike,
    budget: int,
    s_sample: int,
    rng: RngStream,
    universe: Optional[Iterable[int]] = None,
) -> List[int]:
    """Greedy maximization of Ḡ over random candidate pools.

    Each step draws ``s_sample`` unselected clients (all of them when fewer
    remain) and keeps the best marginal gain, smallest id on ties. Returns
    ids in pick order.
    """
    d = _matrix(dist)
    ids = sorted(set(universe)) if universe is not None else list(range(d.shape[0]))
    if budget < 0 or budget > len(ids):
        raise create_error("BMS-401", technical_details=f"budget {budget} for {len(ids)} clients")
    if s_sample < 1:
        raise create_error("BMS-401", technical_details=f"s_sample={s_sample}")

    chosen: List[int] = []
    cover = _cover(d, chosen)
    while len(chosen) < budget:
        remaining = [k for k in ids if k not in chosen]
        pick = _argmax_gain(d, cover, _draw_pool(remaining, s_sample, rng))
        assert pick is not None
        chosen.append(pick)
        cover = np.minimum(cover, d[:, pick])
    return chosen


def greedy(dist: DistanceLike, budget: int) -> List[int]:
    """Deterministic greedy: every step scans all unselected clients."""
    d = _matrix(dist)
    # full pools never touch the stream
    return stochastic_greedy(d, budget, max(d.shape[0], 1), RngStream(0, 0))


def _uni_is_preferred(ratio: float, weak: Modality, chi: float) -> bool:
    weak_direction = ratio if weak is Modality.I else 1.0 / ratio
    return weak_direction > chi


def bms_select(
    dist_multi: DistanceLike,
    dist_enh: DistanceLike,
    ratios: Mapping[int, float],
    global_ratio: float,
    budget: int,
    s_sample: int,
    chi: float,
    availability: Mapping[int, FrozenSet[Modality]],
    rng: RngStream,
) -> SelectionOutcome:
    """Pick multi-modal trainers and weak-modality trainers for one round.

    Every step draws one pool from the unselected eligible clients. k1 is
    the best bimodal client on ``dist_multi`` relative to S_M; k2 the best
    client on ``dist_enh`` relative to S_M ∪ S_uni. Agreement adds one
    client to S_M. Otherwise k1 joins S_M and k2 joins S_uni when it lacks
    the strong modality or its weak-direction ratio exceeds ``chi``, else
    S_M. With one slot left only k1 is added.
    """
    d_m = _matrix(dist_multi)
    d_e = _matrix(dist_enh)
    n = d_m.shape[0]
    bms_assert(d_e.shape == d_m.shape, "BMS-100",
               f"matrices {d_m.shape} and {d_e.shape} over different universes")
    if chi < 1.0:
        raise create_error("BMS-401", technical_details=f"chi={chi} < 1")
    if s_sample < 1:
        raise create_error("BMS-401", technical_details=f"s_sample={s_sample}")

    weak = weak_modality_for(global_ratio)
    strong = weak.other
    eligible = [k for k in range(n) if weak in availability.get(k, BOTH_MODALITIES)]
    if budget < 0 or budget > len(eligible):
        raise create_error(
            "BMS-402",
            technical_details=f"budget {budget} but {len(eligible)} clients hold {weak.value}",
        )

    def has_both(k: int) -> bool:
        return availability.get(k, BOTH_MODALITIES) >= BOTH_MODALITIES

    s_m: List[int] = []
    s_uni: List[int] = []

    def route(k: int) -> None:
        if strong not in availability.get(k, BOTH_MODALITIES):
            s_uni.append(k)
        elif _uni_is_preferred(ratios.get(k, 1.0), weak, chi):
            s_uni.append(k)
        else:
            s_m.append(k)

    while len(s_m) + len(s_uni) < budget:
        taken = set(s_m) | set(s_uni)
        remaining = [k for k in eligible if k not in taken]
        pool = _draw_pool(remaining, s_sample, rng)
        k1 = _argmax_gain(d_m, _cover(d_m, s_m), [k for k in pool if has_both(k)])
        k2 = _argmax_gain(d_e, _cover(d_e, taken), pool)
        assert k2 is not None
        if k1 is None:
            route(k2)
        elif k1 == k2:
            s_m.append(k1)
        else:
            s_m.append(k1)
            if budget - len(taken) >= 2:
                route(k2)

    outcome = SelectionOutcome(
        s_m=sorted(s_m),
        s_uni=sorted(s_uni),
        weak_modality=weak,
        uni_modality={k: weak for k in s_uni},
    )
    get_logger().debug(
        "bms_select", weak=weak.value, s_m=outcome.s_m, s_uni=outcome.s_uni, chi=chi,
    )
    return outcome


def baseline_random(universe: Iterable[int], budget: int, rng: RngStream) -> List[int]:
    """Uniform subset of ``universe``."""
    ids = sorted(set(universe))
    if budget < 0 or budget > len(ids):
        raise create_error("BMS-401", technical_details=f"budget {budget} for {len(ids)} clients")
    return rng_subset(rng, ids, budget)


def baseline_powd(
    candidate_losses: Mapping[int, float],
    d_pool: int,
    budget: int,
    rng: RngStream,
) -> List[int]:
    """Draw ``d_pool`` clients, keep the ``budget`` with the largest loss."""
    ids = sorted(candidate_losses)
    if d_pool < 0 or d_pool > len(ids):
        raise create_error("BMS-401", technical_details=f"pool {d_pool} from {len(ids)} clients")
    if budget < 0 or budget > d_pool:
        raise create_error("BMS-401", technical_details=f"budget {budget} > pool {d_pool}")
    pool = rng_subset(rng, ids, d_pool)
    ranked = sorted(pool, key=lambda k: (-candidate_losses[k], k))
    return sorted(ranked[:budget])


def baseline_divfl(dist_multi: DistanceLike, budget: int, s_sample: int, rng: RngStream) -> List[int]:
    """Stochastic greedy on the multi-modal matrix alone."""
    return sorted(stochastic_greedy(dist_multi, budget, s_sample, rng))


def baseline_modality_drop(
    selected: Iterable[int],
    drop_prob: float,
    rng: RngStream,
    availability: Optional[Mapping[int, FrozenSet[Modality]]] = None,
) -> Dict[int, FrozenSet[Modality]]:
    """With probability ``drop_prob`` a bimodal client loses one modality.

    The dropped modality is A or I with equal probability. Clients that are
    already uni-modal keep their mask.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise create_error("BMS-401", technical_details=f"drop_prob={drop_prob}")
    masks: Dict[int, FrozenSet[Modality]] = {}
    for k in sorted(set(selected)):
        base = (availability or {}).get(k, BOTH_MODALITIES)
        drop_draw = float(rng.uniform())
        side_draw = float(rng.uniform())
        if base >= BOTH_MODALITIES and drop_draw < drop_prob:
            dropped = Modality.A if side_draw < 0.5 else Modality.I
            masks[k] = frozenset(base - {dropped})
        else:
            masks[k] = frozenset(base)
    return masks
