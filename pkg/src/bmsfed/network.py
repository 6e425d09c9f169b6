"""Two-encoder concatenation-fusion classifier with hand-written backprop.

Each modality has a dense ReLU encoder emitting ``embedding_dim`` features.
The fusion classifier multiplies the concatenation [z_A ; z_I] by a
(2·embedding_dim, num_classes) weight whose first ``embedding_dim`` rows form
the A block and whose last rows form the I block. A uni-modal pass uses only
its modality's row block plus the full bias.

Parameters are grouped for masking, updating and aggregation:

    encoder_a    all layers of the A encoder
    encoder_i    all layers of the I encoder
    fusion_a     A row block of the fusion weight
    fusion_i     I row block of the fusion weight
    fusion_bias  fusion bias
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import create_error
from .models import BOTH_MODALITIES, Modality
from .numkit import Matrix, RngStream, ensure_finite, matmul

GROUPS: Tuple[str, ...] = ("encoder_a", "encoder_i", "fusion_a", "fusion_i", "fusion_bias")

MODALITY_GROUPS: Dict[Modality, Tuple[str, str]] = {
    Modality.A: ("encoder_a", "fusion_a"),
    Modality.I: ("encoder_i", "fusion_i"),
}

_SERIALS = itertools.count(1)


class ExecPath(str, Enum):
    """Which branches a forward pass executed."""
    MULTI = "multi"
    UNI_A = "uni-A"
    UNI_I = "uni-I"

    @classmethod
    def uni(cls, modality: Modality) -> "ExecPath":
        return cls.UNI_A if modality is Modality.A else cls.UNI_I

    @property
    def groups(self) -> FrozenSet[str]:
        if self is ExecPath.MULTI:
            return frozenset(GROUPS)
        modality = Modality.A if self is ExecPath.UNI_A else Modality.I
        return frozenset(MODALITY_GROUPS[modality]) | {"fusion_bias"}


@dataclass
class EncoderParams:
    """Dense encoder: ReLU after every layer except the last."""
    weights: List[Matrix]
    biases: List[Matrix]

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise create_error("BMS-203", technical_details="encoder needs >= 1 layer")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (1, w.shape[1]):
                raise create_error(
                    "BMS-100",
                    technical_details=f"bias {b.shape} does not fit weight {w.shape}",
                )
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise create_error(
                    "BMS-100",
                    technical_details=f"layers {prev.shape} -> {nxt.shape} do not chain",
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> List[Matrix]:
        """Interleaved [W0, b0, W1, b1, ...]."""
        out: List[Matrix] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[Matrix]) -> "EncoderParams":
        return cls(
            weights=[np.array(a, dtype=np.float64) for a in arrays[0::2]],
            biases=[np.array(a, dtype=np.float64) for a in arrays[1::2]],
        )


@dataclass
class FusionParams:
    """Concatenation-fusion linear head."""
    weight: Matrix
    bias: Matrix

    @property
    def embedding_dim(self) -> int:
        return self.weight.shape[0] // 2

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def block(self, modality: Modality) -> Matrix:
        d = self.embedding_dim
        return self.weight[:d] if modality is Modality.A else self.weight[d:]


@dataclass
class ModelParams:
    """θ = {θ^A, θ^I, ω}. Treated as an immutable value once built."""
    encoder_a: EncoderParams
    encoder_i: EncoderParams
    fusion: FusionParams
    serial: int = field(default_factory=lambda: next(_SERIALS), compare=False, repr=False)

    def __post_init__(self) -> None:
        d = self.fusion.embedding_dim
        if self.fusion.weight.shape[0] != 2 * d:
            raise create_error("BMS-100", technical_details="fusion weight rows must be even")
        for enc in (self.encoder_a, self.encoder_i):
            if enc.output_dim != d:
                raise create_error(
                    "BMS-100",
                    technical_details=f"encoder emits {enc.output_dim}, fusion expects {d}",
                )
        if self.fusion.bias.shape != (1, self.fusion.num_classes):
            raise create_error("BMS-100", technical_details="fusion bias shape")

    @property
    def embedding_dim(self) -> int:
        return self.fusion.embedding_dim

    @property
    def num_classes(self) -> int:
        return self.fusion.num_classes

    def encoder(self, modality: Modality) -> EncoderParams:
        return self.encoder_a if modality is Modality.A else self.encoder_i

    def groups(self) -> Dict[str, List[Matrix]]:
        d = self.embedding_dim
        return {
            "encoder_a": self.encoder_a.arrays(),
            "encoder_i": self.encoder_i.arrays(),
            "fusion_a": [self.fusion.weight[:d]],
            "fusion_i": [self.fusion.weight[d:]],
            "fusion_bias": [self.fusion.bias],
        }

    def group_shapes(self) -> Dict[str, List[Tuple[int, ...]]]:
        return {name: [a.shape for a in arrays] for name, arrays in self.groups().items()}

    @classmethod
    def from_groups(cls, groups: Dict[str, Sequence[Matrix]]) -> "ModelParams":
        missing = [g for g in GROUPS if g not in groups]
        if missing:
            raise create_error("BMS-100", technical_details=f"missing groups {missing}")
        return cls(
            encoder_a=EncoderParams.from_arrays(groups["encoder_a"]),
            encoder_i=EncoderParams.from_arrays(groups["encoder_i"]),
            fusion=FusionParams(
                weight=np.vstack([groups["fusion_a"][0], groups["fusion_i"][0]]).astype(np.float64),
                bias=np.array(groups["fusion_bias"][0], dtype=np.float64),
            ),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_groups(self.groups())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for g in GROUPS for a in self.groups()[g]])


@dataclass
class GradientVector:
    """Gradients (or parameter deltas) per group; ``None`` marks an absent group.

    Absent differs from zero: aggregation skips absent groups entirely.
    """
    groups: Dict[str, Optional[List[Matrix]]]
    shapes: Dict[str, List[Tuple[int, ...]]]

    @property
    def mask(self) -> FrozenSet[str]:
        return frozenset(g for g, arrays in self.groups.items() if arrays is not None)

    def get(self, group: str) -> Optional[List[Matrix]]:
        return self.groups.get(group)

    def flatten(self, only: Optional[Iterable[str]] = None) -> np.ndarray:
        """Concatenate groups in canonical order, zero-filling absent ones."""
        names = [g for g in GROUPS if only is None or g in set(only)]
        parts: List[np.ndarray] = []
        for name in names:
            arrays = self.groups.get(name)
            if arrays is None:
                parts.extend(np.zeros(int(np.prod(s))) for s in self.shapes[name])
            else:
                parts.extend(a.ravel() for a in arrays)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def zeros_like(cls, params: ModelParams, mask: Iterable[str]) -> "GradientVector":
        mask = set(mask)
        return cls(
            groups={
                g: ([np.zeros_like(a) for a in arrays] if g in mask else None)
                for g, arrays in params.groups().items()
            },
            shapes=params.group_shapes(),
        )


@dataclass
class _EncoderCache:
    inputs: List[Matrix]
    preacts: List[Matrix]


@dataclass
class ForwardPass:
    """Outputs of a forward pass plus what backward() needs."""
    path: ExecPath
    logits: Matrix
    z_a: Optional[Matrix]
    z_i: Optional[Matrix]
    params_serial: int
    caches: Dict[Modality, _EncoderCache]

    @property
    def z(self) -> Matrix:
        """The single embedding of a uni-modal pass."""
        z = self.z_a if self.path is ExecPath.UNI_A else self.z_i
        if self.path is ExecPath.MULTI or z is None:
            raise create_error("BMS-202", technical_details="z is only defined for uni passes")
        return z


def init_params(
    dim_a: int,
    dim_i: int,
    num_classes: int,
    stream: RngStream,
    hidden_dim: int = 32,
    embedding_dim: int = 16,
    layers: int = 2,
) -> ModelParams:
    """Gaussian init with std 1/sqrt(fan_in); zero biases."""
    if layers < 1 or hidden_dim < 1 or embedding_dim < 1 or num_classes < 2:
        raise create_error(
            "BMS-203",
            technical_details=f"layers={layers} hidden={hidden_dim} emb={embedding_dim} Y={num_classes}",
        )

    def encoder(d_in: int) -> EncoderParams:
        widths = [d_in] + [hidden_dim] * (layers - 1) + [embedding_dim]
        weights = [
            stream.gaussian(w_in, w_out, 0.0, 1.0 / np.sqrt(w_in))
            for w_in, w_out in zip(widths, widths[1:])
        ]
        biases = [np.zeros((1, w_out)) for w_out in widths[1:]]
        return EncoderParams(weights=weights, biases=biases)

    enc_a = encoder(dim_a)
    enc_i = encoder(dim_i)
    fan_in = 2 * embedding_dim
    fusion = FusionParams(
        weight=stream.gaussian(fan_in, num_classes, 0.0, 1.0 / np.sqrt(fan_in)),
        bias=np.zeros((1, num_classes)),
    )
    return ModelParams(encoder_a=enc_a, encoder_i=enc_i, fusion=fusion)


def _encode(enc: EncoderParams, x: Matrix) -> Tuple[Matrix, _EncoderCache]:
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise create_error(
            "BMS-100",
            technical_details=f"input {x.shape} for encoder expecting width {enc.input_dim}",
        )
    inputs: List[Matrix] = []
    preacts: List[Matrix] = []
    h = x
    last = len(enc.weights) - 1
    for idx, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        inputs.append(h)
        pre = matmul(h, w) + b
        preacts.append(pre)
        h = pre if idx == last else np.maximum(pre, 0.0)
    return ensure_finite(h, "encoder forward"), _EncoderCache(inputs, preacts)


def _check_available(modality: Modality, available: Optional[Iterable[Modality]]) -> None:
    if available is not None and modality not in set(available):
        raise create_error(
            "BMS-200",
            technical_details=f"modality {modality.value} not in client mask",
        )


def encode(params: ModelParams, x: Matrix, modality: Modality) -> Matrix:
    """Embeddings only, no cache."""
    z, _ = _encode(params.encoder(modality), x)
    return z


def forward_multi(params: ModelParams, x_a: Matrix, x_i: Matrix) -> ForwardPass:
    """logits = [z_a ; z_i] · ω + bias."""
    if x_a.shape[0] != x_i.shape[0]:
        raise create_error(
            "BMS-100",
            technical_details=f"batch sizes differ: {x_a.shape[0]} vs {x_i.shape[0]}",
        )
    z_a, cache_a = _encode(params.encoder_a, x_a)
    z_i, cache_i = _encode(params.encoder_i, x_i)
    fused = np.hstack([z_a, z_i])
    logits = ensure_finite(matmul(fused, params.fusion.weight) + params.fusion.bias, "fusion forward")
    return ForwardPass(
        path=ExecPath.MULTI,
        logits=logits,
        z_a=z_a,
        z_i=z_i,
        params_serial=params.serial,
        caches={Modality.A: cache_a, Modality.I: cache_i},
    )


def forward_uni(
    params: ModelParams,
    x: Matrix,
    modality: Modality,
    available: Optional[Iterable[Modality]] = None,
) -> ForwardPass:
    """logits = z · ω_block(modality) + full bias."""
    _check_available(modality, available)
    z, cache = _encode(params.encoder(modality), x)
    logits = ensure_finite(matmul(z, params.fusion.block(modality)) + params.fusion.bias, "uni forward")
    return ForwardPass(
        path=ExecPath.uni(modality),
        logits=logits,
        z_a=z if modality is Modality.A else None,
        z_i=z if modality is Modality.I else None,
        params_serial=params.serial,
        caches={modality: cache},
    )


def ce_loss_and_grad(logits: Matrix, labels: Sequence[int]) -> Tuple[float, Matrix]:
    """Mean cross-entropy and dlogits = (softmax − onehot) / batch."""
    y = np.asarray(labels, dtype=np.int64)
    batch, num_classes = logits.shape
    if y.shape != (batch,):
        raise create_error(
            "BMS-100",
            technical_details=f"{y.shape[0] if y.ndim else 0} labels for {batch} rows",
        )
    if batch and (y.min() < 0 or y.max() >= num_classes):
        raise create_error(
            "BMS-201",
            technical_details=f"labels must lie in [0, {num_classes})",
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = float(-log_probs[rows, y].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, y] -= 1.0
    dlogits /= batch
    return loss, ensure_finite(dlogits, "ce gradient")


def _encoder_backward(enc: EncoderParams, cache: _EncoderCache, dz: Matrix) -> List[Matrix]:
    grads: List[Matrix] = [np.empty(0)] * (2 * len(enc.weights))
    dout = dz
    last = len(enc.weights) - 1
    for idx in range(last, -1, -1):
        dpre = dout if idx == last else dout * (cache.preacts[idx] > 0.0)
        grads[2 * idx] = matmul(cache.inputs[idx].T, dpre)
        grads[2 * idx + 1] = dpre.sum(axis=0, keepdims=True)
        if idx:
            dout = matmul(dpre, enc.weights[idx].T)
    return grads


def backward(
    params: ModelParams,
    fwd: Optional[ForwardPass],
    dlogits: Matrix,
    dz_a: Optional[Matrix] = None,
    dz_i: Optional[Matrix] = None,
    path: Optional[ExecPath] = None,
) -> GradientVector:
    """Exact gradients for every group on the executed path.

    ``dz_a``/``dz_i`` inject extra upstream gradient at an embedding (the ME
    loss); groups off the executed path are absent in the result.
    """
    if fwd is None:
        raise create_error("BMS-202", technical_details="no forward pass cached")
    if fwd.params_serial != params.serial:
        raise create_error("BMS-202", technical_details="cache belongs to other parameters")
    if path is not None and path is not fwd.path:
        raise create_error(
            "BMS-202",
            technical_details=f"cache is for {fwd.path.value}, backward asked for {path.value}",
        )
    if dlogits.shape != fwd.logits.shape:
        raise create_error(
            "BMS-100",
            technical_details=f"dlogits {dlogits.shape} vs logits {fwd.logits.shape}",
        )

    groups: Dict[str, Optional[List[Matrix]]] = {g: None for g in GROUPS}
    groups["fusion_bias"] = [dlogits.sum(axis=0, keepdims=True)]

    executed = [Modality.A, Modality.I] if fwd.path is ExecPath.MULTI else (
        [Modality.A] if fwd.path is ExecPath.UNI_A else [Modality.I]
    )
    extra = {Modality.A: dz_a, Modality.I: dz_i}
    for modality in BOTH_MODALITIES:
        if modality not in executed and extra[modality] is not None:
            raise create_error(
                "BMS-202",
                technical_details=f"dz for {modality.value} on a {fwd.path.value} pass",
            )

    for modality in executed:
        z = fwd.z_a if modality is Modality.A else fwd.z_i
        enc_group, fusion_group = MODALITY_GROUPS[modality]
        block = params.fusion.block(modality)
        groups[fusion_group] = [matmul(z.T, dlogits)]
        dz = matmul(dlogits, block.T)
        if extra[modality] is not None:
            dz = dz + extra[modality]
        groups[enc_group] = _encoder_backward(params.encoder(modality), fwd.caches[modality], dz)

    for arrays in groups.values():
        for a in arrays or ():
            ensure_finite(a, "backward")
    return GradientVector(groups=groups, shapes=params.group_shapes())


def sgd_step(params: ModelParams, grads: GradientVector, lr: float) -> ModelParams:
    """p ← p − lr·g for populated groups; absent groups are untouched."""
    if lr <= 0:
        raise create_error("BMS-203", technical_details=f"lr={lr} must be > 0")
    updated: Dict[str, List[Matrix]] = {}
    for name, arrays in params.groups().items():
        g = grads.get(name)
        if g is None:
            updated[name] = [a.copy() for a in arrays]
            continue
        if [x.shape for x in g] != [a.shape for a in arrays]:
            raise create_error("BMS-100", technical_details=f"gradient shapes for {name}")
        updated[name] = [ensure_finite(a - lr * d, "sgd_step") for a, d in zip(arrays, g)]
    return ModelParams.from_groups(updated)


def param_delta(
    start: ModelParams, end: ModelParams, mask: Iterable[str] = GROUPS
) -> GradientVector:
    """start − end for the groups in ``mask``; the upload of a local run."""
    mask = set(mask)
    start_groups = start.groups()
    end_groups = end.groups()
    return GradientVector(
        groups={
            g: ([s - e for s, e in zip(start_groups[g], end_groups[g])] if g in mask else None)
            for g in GROUPS
        },
        shapes=start.group_shapes(),
    )
