"""Learnable parameters of the three flow layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Dense, dense_init
from .tensor import Tensor


@dataclass
class UFlowParams:
    message: tuple[Dense, Dense]  # [h_src, e_r, h_dst] (3D) -> D -> D
    update: tuple[Dense, Dense]  # [mu, h, e_v] (3D) -> D -> D


@dataclass
class CFlowParams:
    message: tuple[Dense, Dense]  # [h_src, e_r, q_head, q_rel, h_dst] (5D) -> D -> D
    update: tuple[Dense, Dense]  # [mu, h, eta, q_head, q_rel] (5D) -> D -> D
    attend: Tensor  # (D, D)


@dataclass
class AFlowParams:
    src_cc: Dense  # [h_src, c_r] (4D) -> D_a
    dst_cc: Dense  # [h_dst, c_r] -> D_a
    src_cu: Dense
    dst_cu: Dense  # [u_dst, c_r] -> D_a
    theta_cc: Tensor  # (D_a, D_a)
    theta_cu: Tensor


@dataclass
class ModelParams:
    entity_emb: Tensor
    relation_emb: Tensor
    uflow: UFlowParams
    cflow: CFlowParams
    aflow: AFlowParams

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    @property
    def att_dim(self) -> int:
        return self.aflow.theta_cc.shape[0]

    @property
    def num_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_emb.shape[0]

    @property
    def dtype(self):
        return self.entity_emb.dtype

    def named(self) -> dict[str, Tensor]:
        """All parameters keyed by their (stable) names."""
        tensors = [self.entity_emb, self.relation_emb]
        for layer in (*self.uflow.message, *self.uflow.update, *self.cflow.message, *self.cflow.update):
            tensors.extend(layer.parameters())
        tensors.append(self.cflow.attend)
        a = self.aflow
        for layer in (a.src_cc, a.dst_cc, a.src_cu, a.dst_cu):
            tensors.extend(layer.parameters())
        tensors.extend([a.theta_cc, a.theta_cu])
        return {t.name: t for t in tensors}

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every array cast to ``dtype``."""
        arrays = {k: v.data.astype(dtype) for k, v in self.named().items()}
        return params_from_arrays(arrays)

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)


def init_params(num_entities: int, num_relations: int, dim: int, att_dim: int,
                seed: int | np.random.Generator = 0, dtype=np.float32) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)

    def emb(n, name):
        return Tensor(rng.normal(0.0, scale, size=(n, dim)).astype(dtype), requires_grad=True, name=name)

    def square(n, name, gain=1.0):
        limit = gain * np.sqrt(3.0 / n)
        return Tensor(rng.uniform(-limit, limit, size=(n, n)).astype(dtype), requires_grad=True, name=name)

    D, Da = dim, att_dim
    entity = emb(num_entities, "entity_emb")
    relation = emb(num_relations, "relation_emb")
    uflow = UFlowParams(
        message=(dense_init(rng, 3 * D, D, "uflow.message.0", dtype), dense_init(rng, D, D, "uflow.message.1", dtype)),
        update=(dense_init(rng, 3 * D, D, "uflow.update.0", dtype), dense_init(rng, D, D, "uflow.update.1", dtype)),
    )
    cflow = CFlowParams(
        message=(dense_init(rng, 5 * D, D, "cflow.message.0", dtype), dense_init(rng, D, D, "cflow.message.1", dtype)),
        update=(dense_init(rng, 5 * D, D, "cflow.update.0", dtype), dense_init(rng, D, D, "cflow.update.1", dtype)),
        attend=square(D, "cflow.attend"),
    )
    aflow = AFlowParams(
        src_cc=dense_init(rng, 4 * D, Da, "aflow.src_cc", dtype),
        dst_cc=dense_init(rng, 4 * D, Da, "aflow.dst_cc", dtype),
        src_cu=dense_init(rng, 4 * D, Da, "aflow.src_cu", dtype),
        dst_cu=dense_init(rng, 4 * D, Da, "aflow.dst_cu", dtype),
        theta_cc=square(Da, "aflow.theta_cc"),
        theta_cu=square(Da, "aflow.theta_cu"),
    )
    return ModelParams(entity, relation, uflow, cflow, aflow)


def params_from_arrays(arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild parameters from a name->array mapping produced by :meth:`ModelParams.named`."""

    def t(name):
        return Tensor(np.array(arrays[name]), requires_grad=True, name=name)

    def dense(name):
        return Dense(t(f"{name}.weight"), t(f"{name}.bias"))

    return ModelParams(
        entity_emb=t("entity_emb"),
        relation_emb=t("relation_emb"),
        uflow=UFlowParams(
            message=(dense("uflow.message.0"), dense("uflow.message.1")),
            update=(dense("uflow.update.0"), dense("uflow.update.1")),
        ),
        cflow=CFlowParams(
            message=(dense("cflow.message.0"), dense("cflow.message.1")),
            update=(dense("cflow.update.0"), dense("cflow.update.1")),
            attend=t("cflow.attend"),
        ),
        aflow=AFlowParams(
            src_cc=dense("aflow.src_cc"),
            dst_cc=dense("aflow.dst_cc"),
            src_cu=dense("aflow.src_cu"),
            dst_cu=dense("aflow.dst_cu"),
            theta_cc=t("aflow.theta_cc"),
            theta_cu=t("aflow.theta_cu"),
        ),
    )
