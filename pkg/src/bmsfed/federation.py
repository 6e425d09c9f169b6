"""Client and server sides of the federated protocol.

Round 1 is a bootstrap: every client trains from the initial model so the
server can fill both similarity matrices, the global prototypes and the
global imbalance ratio. Every later round selects clients, trains them
from the broadcast model, aggregates their uploads group by group and
evaluates the new global model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .balance import (
    PrototypeSet,
    aggregate_prototypes,
    coefficients,
    global_ratio as weighted_global_ratio,
    gt_scores,
    imbalance_report,
    local_prototypes,
    local_ratio,
    me_loss_and_grad,
    merge_with_previous,
    nearest_prototype_classify,
    weak_modality,
)
from .data import BimodalDataset, PartitionPlan
from .errors import BmsError, bms_assert, create_error
from .logging import get_logger
from .models import BOTH_MODALITIES, ImbalanceReport, Modality, RoundMetrics, SelectionOutcome
from .network import (
    GROUPS,
    MODALITY_GROUPS,
    GradientVector,
    ModelParams,
    backward,
    ce_loss_and_grad,
    encode,
    forward_multi,
    forward_uni,
    param_delta,
    sgd_step,
)
from .numkit import Matrix, RngStream
from .selection import (
    SimilarityMatrix,
    baseline_divfl,
    baseline_modality_drop,
    baseline_powd,
    baseline_random,
    bms_select,
    update_similarity,
)

if TYPE_CHECKING:
    from .config import ExperimentConfig


@dataclass(frozen=True)
class MethodProfile:
    """How a training method selects clients and shapes the local loss."""
    selector: str  # bms | random | powd | divfl
    use_me: bool
    local_protos: bool = False
    drop: bool = False

    @property
    def uses_matrices(self) -> bool:
        return self.selector in ("bms", "divfl")


METHODS: Dict[str, MethodProfile] = {
    "bmsfed": MethodProfile(selector="bms", use_me=True),
    "bmsfed_local": MethodProfile(selector="bms", use_me=True, local_protos=True),
    "fedavg": MethodProfile(selector="random", use_me=False),
    "fedavg_me": MethodProfile(selector="random", use_me=True),
    "fedavg_drop": MethodProfile(selector="random", use_me=False, drop=True),
    "powd": MethodProfile(selector="powd", use_me=False),
    "divfl": MethodProfile(selector="divfl", use_me=False),
    "divfl_me": MethodProfile(selector="divfl", use_me=True),
}


def get_profile(method: str) -> MethodProfile:
    try:
        return METHODS[method]
    except KeyError:
        raise create_error(
            "BMS-500",
            technical_details=f"unknown method '{method}'",
            suggestions=[f"Choose one of: {', '.join(METHODS)}"],
        )


@dataclass
class ClientState:
    """One client's shard and everything it last reported."""
    id: int
    labels: np.ndarray
    x_a: Optional[Matrix] = None
    x_i: Optional[Matrix] = None
    last_multi_grad: Optional[np.ndarray] = None
    last_enh_grads: Dict[Modality, np.ndarray] = field(default_factory=dict)
    last_protos: Dict[Modality, PrototypeSet] = field(default_factory=dict)
    last_report: Optional[ImbalanceReport] = None
    last_loss: float = 0.0

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.n_k == 0:
            raise create_error("BMS-500", technical_details=f"client {self.id} holds no samples")
        if self.x_a is None and self.x_i is None:
            raise create_error("BMS-500", technical_details=f"client {self.id} holds no modality")
        for x in (self.x_a, self.x_i):
            if x is not None:
                bms_assert(x.shape[0] == self.n_k, "BMS-100",
                           f"client {self.id}: {x.shape[0]} rows for {self.n_k} labels")

    @classmethod
    def from_dataset(
        cls, client_id: int, dataset: BimodalDataset, indices: Sequence[int],
        mask: FrozenSet[Modality] = BOTH_MODALITIES,
    ) -> "ClientState":
        shard = dataset.subset(indices)
        return cls(
            id=client_id,
            labels=shard.labels,
            x_a=shard.x_a if Modality.A in mask else None,
            x_i=shard.x_i if Modality.I in mask else None,
        )

    @property
    def n_k(self) -> int:
        return int(self.labels.shape[0])

    @property
    def mask(self) -> FrozenSet[Modality]:
        held = set()
        if self.x_a is not None:
            held.add(Modality.A)
        if self.x_i is not None:
            held.add(Modality.I)
        return frozenset(held)

    @property
    def is_bimodal(self) -> bool:
        return self.mask >= BOTH_MODALITIES

    def features(self, modality: Modality) -> Matrix:
        x = self.x_a if modality is Modality.A else self.x_i
        if x is None:
            raise create_error(
                "BMS-200",
                technical_details=f"client {self.id} has no {modality.value} data",
            )
        return x


@dataclass
class ServerState:
    """Global model plus everything aggregated from client reports."""
    global_model: ModelParams
    dist_multi: SimilarityMatrix
    dist_enh: Dict[Modality, SimilarityMatrix]
    global_protos: Dict[Modality, PrototypeSet] = field(default_factory=dict)
    global_ratio: float = 1.0
    round: int = 0

    @classmethod
    def initial(cls, model: ModelParams, n_clients: int) -> "ServerState":
        return cls(
            global_model=model,
            dist_multi=SimilarityMatrix(n=n_clients),
            dist_enh={m: SimilarityMatrix(n=n_clients) for m in (Modality.A, Modality.I)},
        )

    @property
    def weak_modality(self) -> Modality:
        return weak_modality(self.global_ratio)


@dataclass
class LocalResult:
    """What a client hands back after local training."""
    client: int
    delta: GradientVector
    n_k: int
    protos: Dict[Modality, PrototypeSet]
    report: Optional[ImbalanceReport]
    mean_loss: float
    trained: Optional[Modality] = None  # None for multi-modal runs


def _batches(n: int, batch_size: int, stream: RngStream) -> List[np.ndarray]:
    order = stream.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _apply_me(
    z: Matrix, labels: np.ndarray, protos: Optional[PrototypeSet], coeff: float,
) -> Tuple[float, Optional[Matrix]]:
    """coeff·ME and its embedding gradient; skipped if prototypes miss a label."""
    if coeff <= 0.0 or protos is None or not protos.covers(labels):
        return 0.0, None
    loss, dz = me_loss_and_grad(z, labels, protos)
    return coeff * loss, coeff * dz


def local_train_multi(
    client: ClientState,
    global_model: ModelParams,
    global_protos: Optional[Mapping[Modality, PrototypeSet]],
    epochs: int,
    lr: float,
    batch_size: int,
    stream: RngStream,
    use_me: bool = True,
) -> LocalResult:
    """Joint training on CE plus the branched ME term.

    Each mini-batch measures its own ratio against local prototypes taken at
    the start of the epoch. ρ < 1 adds γ·ME on A, ρ ≥ 1 adds β·ME on I, both
    against ``global_protos`` (pass None to use the local prototypes). The
    reported ratio averages the final epoch's batches. ``lr = 0`` trains
    nothing.
    """
    if not client.is_bimodal:
        raise create_error(
            "BMS-200", technical_details=f"client {client.id} lacks a modality for joint training",
        )
    x_a, x_i, y = client.x_a, client.x_i, client.labels
    assert x_a is not None and x_i is not None
    params = global_model
    losses: List[float] = []
    final_ratios: List[float] = []

    for epoch in range(epochs):
        local = {
            Modality.A: local_prototypes(encode(params, x_a, Modality.A), y, Modality.A),
            Modality.I: local_prototypes(encode(params, x_i, Modality.I), y, Modality.I),
        }
        me_protos = local if global_protos is None else global_protos
        epoch_ratios: List[float] = []
        for idx in _batches(client.n_k, batch_size, stream):
            y_b = y[idx]
            fwd = forward_multi(params, x_a[idx], x_i[idx])
            loss, dlogits = ce_loss_and_grad(fwd.logits, y_b)
            try:
                rho: Optional[float] = local_ratio(
                    gt_scores(fwd.z_a, y_b, local[Modality.A]),
                    gt_scores(fwd.z_i, y_b, local[Modality.I]),
                )
            except BmsError as e:
                if e.code != "BMS-301":
                    raise
                rho = None
            dz_a = dz_i = None
            if rho is not None:
                epoch_ratios.append(rho)
                if use_me:
                    gamma, beta = coefficients(rho)
                    me_a, dz_a = _apply_me(fwd.z_a, y_b, me_protos.get(Modality.A), gamma)
                    me_i, dz_i = _apply_me(fwd.z_i, y_b, me_protos.get(Modality.I), beta)
                    loss += me_a + me_i
            losses.append(loss)
            if lr > 0:
                grads = backward(params, fwd, dlogits, dz_a=dz_a, dz_i=dz_i)
                params = sgd_step(params, grads, lr)
        if epoch == epochs - 1:
            final_ratios = epoch_ratios

    rho_report = float(np.mean(final_ratios)) if final_ratios else 1.0
    return LocalResult(
        client=client.id,
        delta=param_delta(global_model, params, GROUPS),
        n_k=client.n_k,
        protos={
            Modality.A: local_prototypes(encode(params, x_a, Modality.A), y, Modality.A),
            Modality.I: local_prototypes(encode(params, x_i, Modality.I), y, Modality.I),
        },
        report=imbalance_report(rho_report, client.n_k),
        mean_loss=float(np.mean(losses)) if losses else 0.0,
    )


def local_train_uni(
    client: ClientState,
    global_model: ModelParams,
    global_protos: Optional[Mapping[Modality, PrototypeSet]],
    modality: Modality,
    epochs: int,
    lr: float,
    batch_size: int,
    stream: RngStream,
    me_coefficient: float = 0.0,
) -> LocalResult:
    """Train one modality's encoder and fusion block.

    ``me_coefficient`` is zero when ``modality`` is the strong one. The
    upload carries only the modality's encoder and fusion row block.
    """
    x = client.features(modality)
    y = client.labels
    params = global_model
    losses: List[float] = []
    for _ in range(epochs):
        if global_protos is None:
            protos: Optional[PrototypeSet] = local_prototypes(encode(params, x, modality), y, modality)
        else:
            protos = global_protos.get(modality)
        for idx in _batches(client.n_k, batch_size, stream):
            y_b = y[idx]
            fwd = forward_uni(params, x[idx], modality, available=client.mask)
            loss, dlogits = ce_loss_and_grad(fwd.logits, y_b)
            me, dz = _apply_me(fwd.z, y_b, protos, me_coefficient)
            losses.append(loss + me)
            if lr > 0:
                extra = {"dz_a": dz} if modality is Modality.A else {"dz_i": dz}
                grads = backward(params, fwd, dlogits, **extra)
                params = sgd_step(params, grads, lr)

    return LocalResult(
        client=client.id,
        delta=param_delta(global_model, params, MODALITY_GROUPS[modality]),
        n_k=client.n_k,
        protos={modality: local_prototypes(encode(params, x, modality), y, modality)},
        report=None,
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        trained=modality,
    )


def enhancing_gradient(
    params: ModelParams,
    client: ClientState,
    modality: Modality,
    protos: Optional[PrototypeSet],
    coeff: float,
) -> np.ndarray:
    """Flattened gradient of uni-CE + coeff·ME over one modality's encoder and fusion block.

    Clients without the modality get a zero vector of the same width.
    """
    scope = MODALITY_GROUPS[modality]
    if modality not in client.mask:
        return GradientVector.zeros_like(params, ()).flatten(only=scope)
    x = client.features(modality)
    fwd = forward_uni(params, x, modality, available=client.mask)
    _, dlogits = ce_loss_and_grad(fwd.logits, client.labels)
    _, dz = _apply_me(fwd.z, client.labels, protos, coeff)
    extra = {"dz_a": dz} if modality is Modality.A else {"dz_i": dz}
    return backward(params, fwd, dlogits, **extra).flatten(only=scope)


def aggregate_models(global_model: ModelParams, uploads: Sequence[LocalResult]) -> ModelParams:
    """n_k-weighted mean per parameter group over the uploads that carry it.

    Groups nobody uploaded keep the broadcast value.
    """
    current = global_model.groups()
    updated: Dict[str, List[Matrix]] = {}
    for name in GROUPS:
        contributors = [u for u in uploads if u.delta.get(name) is not None]
        if not contributors:
            updated[name] = [a.copy() for a in current[name]]
            continue
        total = float(sum(u.n_k for u in contributors))
        merged = []
        for pos, base in enumerate(current[name]):
            step = np.zeros_like(base)
            for u in contributors:
                d = u.delta.get(name)[pos]  # type: ignore[index]
                if d.shape != base.shape:
                    raise create_error(
                        "BMS-501",
                        technical_details=f"client {u.client} group {name}: {d.shape} vs {base.shape}",
                    )
                step += (u.n_k / total) * d
            merged.append(base - step)
        updated[name] = merged
    return ModelParams.from_groups(updated)


def evaluate(
    global_model: ModelParams,
    global_protos: Mapping[Modality, PrototypeSet],
    test_set: BimodalDataset,
) -> Tuple[float, float, float]:
    """(acc_multi, acc_uni_a, acc_uni_i) top-1 accuracies.

    Multi-modal predictions come from the fused logits; uni-modal ones from
    the nearest global prototype of each modality's embedding.
    """
    if len(test_set) == 0:
        raise create_error("BMS-502")
    y = test_set.labels
    fwd = forward_multi(global_model, test_set.x_a, test_set.x_i)
    acc_multi = float(np.mean(np.argmax(fwd.logits, axis=1) == y))

    def uni(modality: Modality, z: Matrix) -> float:
        protos = global_protos.get(modality)
        if protos is None or len(protos) == 0:
            return 0.0
        return float(np.mean(nearest_prototype_classify(z, protos) == y))

    assert fwd.z_a is not None and fwd.z_i is not None
    return acc_multi, uni(Modality.A, fwd.z_a), uni(Modality.I, fwd.z_i)


def client_loss(params: ModelParams, client: ClientState) -> float:
    """CE of the global model on the client's full shard."""
    if client.is_bimodal:
        assert client.x_a is not None and client.x_i is not None
        fwd = forward_multi(params, client.x_a, client.x_i)
    else:
        (modality,) = tuple(client.mask)
        fwd = forward_uni(params, client.features(modality), modality, available=client.mask)
    loss, _ = ce_loss_and_grad(fwd.logits, client.labels)
    return loss


def learning_rate(config: "ExperimentConfig", round_index: int) -> float:
    """Constant lr with one optional decay step."""
    if config.lr_decay_round > 0 and round_index >= config.lr_decay_round:
        return config.lr * config.lr_decay_factor
    return config.lr


def powd_pool_size(config: "ExperimentConfig") -> int:
    """Configured pow-d pool, or half the clients (never below the budget) when unset."""
    if config.powd_pool:
        return config.powd_pool
    return max(int(np.ceil(config.clients / 2)), config.budget)


def build_clients(dataset: BimodalDataset, plan: PartitionPlan) -> List[ClientState]:
    plan.check(len(dataset))
    return [
        ClientState.from_dataset(k, dataset, plan.assignment[k], plan.mask_of(k))
        for k in sorted(plan.assignment)
    ]


def _me_coefficient(client: ClientState, modality: Modality, rho_global: float) -> float:
    report = client.last_report
    if report is not None:
        return report.coefficient_for(modality)
    gamma, beta = coefficients(rho_global)
    return gamma if modality is Modality.A else beta


def _train_selected(
    server: ServerState,
    clients: Mapping[int, ClientState],
    outcome: SelectionOutcome,
    masks: Mapping[int, FrozenSet[Modality]],
    config: "ExperimentConfig",
    profile: MethodProfile,
    epochs: int,
    round_index: int,
    bootstrap: bool = False,
) -> List[LocalResult]:
    lr = learning_rate(config, round_index)
    protos: Optional[Mapping[Modality, PrototypeSet]] = (
        None if bootstrap or profile.local_protos else server.global_protos
    )
    results: List[LocalResult] = []
    for k in outcome.selected:
        client = clients[k]
        stream = RngStream.for_purpose(config.seed, "train", k, round_index)
        role = outcome.role_of(k)
        available = masks.get(k, client.mask)
        if role is None and available >= BOTH_MODALITIES:
            result = local_train_multi(
                client, server.global_model, protos, epochs, lr, config.batch_size, stream,
                use_me=profile.use_me,
            )
        else:
            modality = role if role is not None else next(iter(available))
            coeff = 0.0
            if profile.use_me and not bootstrap and modality is server.weak_modality:
                coeff = _me_coefficient(client, modality, server.global_ratio)
            result = local_train_uni(
                client, server.global_model, protos, modality, epochs, lr, config.batch_size,
                stream, me_coefficient=coeff,
            )
        client.last_protos = dict(result.protos)
        client.last_loss = result.mean_loss
        if result.report is not None:
            client.last_report = result.report
        results.append(result)
    return results


def _absorb_reports(server: ServerState, results: Sequence[LocalResult]) -> None:
    """Global prototypes and ratio from this round's reporters."""
    for modality in (Modality.A, Modality.I):
        sets = [r.protos[modality] for r in results if modality in r.protos]
        if sets:
            fresh = aggregate_prototypes(sets)
            fresh.modality = modality
            server.global_protos[modality] = merge_with_previous(
                fresh, server.global_protos.get(modality)
            )
    reports = [r.report for r in results if r.report is not None]
    if reports:
        server.global_ratio = weighted_global_ratio(reports)


def _refresh_matrices(
    server: ServerState,
    clients: Mapping[int, ClientState],
    results: Sequence[LocalResult],
    start_model: ModelParams,
    round_index: int,
    enhancing: bool = True,
    bootstrap: bool = False,
) -> None:
    """Recompute matrix rows of this round's participants.

    Multi-modal rows come from multi-modal uploads only; a client that
    trained one modality keeps its previous row. At bootstrap every client
    fills its row, a single-modality client with zeros for the modality it
    lacks.
    """
    multi: Dict[int, np.ndarray] = {}
    enh: Dict[Modality, Dict[int, np.ndarray]] = {Modality.A: {}, Modality.I: {}}
    for r in results:
        client = clients[r.client]
        if bootstrap or r.trained is None:
            multi[r.client] = r.delta.flatten()
            client.last_multi_grad = multi[r.client]
        for modality in (Modality.A, Modality.I) if enhancing else ():
            coeff = _me_coefficient(client, modality, server.global_ratio)
            g = enhancing_gradient(
                start_model, client, modality, server.global_protos.get(modality), coeff,
            )
            client.last_enh_grads[modality] = g
            enh[modality][r.client] = g
    server.dist_multi = update_similarity(server.dist_multi, multi, round_index)
    for modality in (Modality.A, Modality.I) if enhancing else ():
        server.dist_enh[modality] = update_similarity(
            server.dist_enh[modality], enh[modality], round_index
        )


def _metrics(
    server: ServerState,
    test_set: BimodalDataset,
    round_index: int,
    n_multi: int,
    n_uni: int,
    results: Sequence[LocalResult],
) -> RoundMetrics:
    acc_multi, acc_a, acc_i = evaluate(server.global_model, server.global_protos, test_set)
    return RoundMetrics(
        round=round_index,
        acc_multi=acc_multi,
        acc_uni_a=acc_a,
        acc_uni_i=acc_i,
        global_ratio=server.global_ratio,
        n_selected_multi=n_multi,
        n_selected_uni=n_uni,
        mean_train_loss=float(np.mean([r.mean_loss for r in results])) if results else 0.0,
        weak_modality=server.weak_modality,
    )


def bootstrap_round(
    server: ServerState,
    clients: Sequence[ClientState],
    config: "ExperimentConfig",
    test_set: BimodalDataset,
) -> RoundMetrics:
    """Round 1: everyone trains so every report and matrix row exists."""
    if server.round != 0:
        raise create_error("BMS-500", technical_details=f"bootstrap at round {server.round + 1}")
    profile = get_profile(config.method)
    by_id = {c.id: c for c in clients}
    round_index = 1
    outcome = SelectionOutcome(
        s_m=[c.id for c in clients if c.is_bimodal],
        s_uni=[c.id for c in clients if not c.is_bimodal],
        weak_modality=server.weak_modality,
        uni_modality={c.id: next(iter(c.mask)) for c in clients if not c.is_bimodal},
    )
    start = server.global_model
    results = _train_selected(
        server, by_id, outcome, {}, config, profile, config.bootstrap_epochs, round_index,
        bootstrap=True,
    )
    server.global_model = aggregate_models(start, results)
    _absorb_reports(server, results)
    if profile.uses_matrices:
        _refresh_matrices(
            server, by_id, results, start, round_index, enhancing=profile.selector == "bms",
            bootstrap=True,
        )
    server.round = round_index
    return _metrics(server, test_set, round_index, len(outcome.s_m), len(outcome.s_uni), results)


def select_clients(
    server: ServerState,
    clients: Sequence[ClientState],
    config: "ExperimentConfig",
    round_index: int,
) -> Tuple[SelectionOutcome, Dict[int, FrozenSet[Modality]]]:
    """Roles for one round plus the per-client modality masks in force."""
    profile = get_profile(config.method)
    stream = RngStream.for_purpose(config.seed, "select", None, round_index)
    weak = server.weak_modality
    availability = {c.id: c.mask for c in clients}

    if profile.selector == "bms":
        ratios = {
            c.id: c.last_report.local_ratio for c in clients if c.last_report is not None
        }
        outcome = bms_select(
            server.dist_multi, server.dist_enh[weak], ratios, server.global_ratio,
            config.budget, config.s_sample, config.chi, availability, stream,
        )
        return outcome, availability

    if profile.selector == "random":
        chosen = baseline_random(sorted(availability), config.budget, stream)
    elif profile.selector == "powd":
        losses = {c.id: client_loss(server.global_model, c) for c in clients}
        chosen = baseline_powd(losses, powd_pool_size(config), config.budget, stream)
    else:
        chosen = baseline_divfl(server.dist_multi, config.budget, config.s_sample, stream)

    masks = dict(availability)
    if profile.drop:
        drop_stream = RngStream.for_purpose(config.seed, "drop", None, round_index)
        masks.update(baseline_modality_drop(chosen, config.drop_prob, drop_stream, availability))
    s_uni = [k for k in chosen if not masks[k] >= BOTH_MODALITIES]
    outcome = SelectionOutcome(
        s_m=sorted(k for k in chosen if k not in s_uni),
        s_uni=sorted(s_uni),
        weak_modality=weak,
        uni_modality={k: next(iter(masks[k])) for k in s_uni},
    )
    return outcome, masks


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    config: "ExperimentConfig",
    test_set: BimodalDataset,
) -> RoundMetrics:
    """One post-bootstrap round: select, train, aggregate, refresh, evaluate."""
    if server.round < 1:
        raise create_error("BMS-500", technical_details="run_round before bootstrap")
    profile = get_profile(config.method)
    round_index = server.round + 1
    by_id = {c.id: c for c in clients}

    outcome, masks = select_clients(server, clients, config, round_index)
    get_logger().log_selection(round_index, outcome)

    start = server.global_model
    results = _train_selected(
        server, by_id, outcome, masks, config, profile, config.local_epochs, round_index,
    )
    server.global_model = aggregate_models(start, results)
    _absorb_reports(server, results)
    if profile.uses_matrices:
        _refresh_matrices(
            server, by_id, results, start, round_index, enhancing=profile.selector == "bms",
        )
    server.round = round_index
    return _metrics(server, test_set, round_index, len(outcome.s_m), len(outcome.s_uni), results)


class Federation:
    """Server, clients and held-out test set of one run."""

    def __init__(
        self,
        config: "ExperimentConfig",
        clients: Sequence[ClientState],
        test_set: BimodalDataset,
        initial_model: ModelParams,
    ):
        self.config = config
        self.clients = list(clients)
        self.test_set = test_set
        self.server = ServerState.initial(initial_model, len(self.clients))
        self.logger = get_logger()

    def rounds(self) -> Iterable[RoundMetrics]:
        """Yield metrics for round 1 (bootstrap) through ``config.rounds``."""
        metrics = bootstrap_round(self.server, self.clients, self.config, self.test_set)
        self.logger.log_round(metrics)
        yield metrics
        while self.server.round < self.config.rounds:
            metrics = run_round(self.server, self.clients, self.config, self.test_set)
            self.logger.log_round(metrics)
            yield metrics

    def run(self) -> List[RoundMetrics]:
        return list(self.rounds())
