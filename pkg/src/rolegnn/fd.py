"""Functional-dependency regularization on embeddings.

Per foreign-key relation, embedding differences of linked pairs are pulled
toward a learnable low-rank affine subspace (table level), and a relation
scoring head is trained contrastively to rank the true referenced row above
in-batch mismatches (entity level).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sampler import BatchSubgraph
from .schema_graph import RelationalEntityGraph, RelationKey
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class FdDiagnostics:
    relation: str
    n_pairs: int
    loss_emb: float
    loss_pair: float
    pos_score_mean: float
    neg_score_mean: float


class FdModule:
    """Per-relation subspace parameters and scoring heads."""

    def __init__(self, reg: RelationalEntityGraph, channels: int,
                 subspace_dim: int = 0, seed: int = 0):
        from .model import _param_seed  # shared stable seeding

        if subspace_dim <= 0:
            subspace_dim = max(channels // 4, 1)
        if subspace_dim >= channels:
            raise ValueError(f"subspace_dim must be < channels, got "
                             f"{subspace_dim} >= {channels}")
        self.channels = channels
        self.subspace_dim = subspace_dim
        self.relations = sorted(
            (es.key for es in reg.edges.values()), key=lambda k: k.id)
        self.params: dict[str, Tensor] = {}
        for key in self.relations:
            rid = key.id
            self.params[f"fd.{rid}.P"] = T.init_param(
                (channels, subspace_dim), fan_in=channels,
                seed=_param_seed(seed, f"fd.{rid}.P"))
            self.params[f"fd.{rid}.s"] = T.zeros_param((channels,))
            self.params[f"fd.{rid}.ms.W1"] = T.init_param(
                (channels, channels), fan_in=channels,
                seed=_param_seed(seed, f"fd.{rid}.ms.W1"))
            self.params[f"fd.{rid}.ms.b1"] = T.zeros_param((channels,))
            self.params[f"fd.{rid}.ms.W2"] = T.init_param(
                (channels, 1), fan_in=channels,
                seed=_param_seed(seed, f"fd.{rid}.ms.W2"))
            self.params[f"fd.{rid}.ms.b2"] = T.zeros_param((1,))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def subspace(self, relation_id: str) -> tuple[Tensor, Tensor]:
        return self.params[f"fd.{relation_id}.P"], self.params[f"fd.{relation_id}.s"]

    def reorthonormalize(self) -> None:
        """Optional: replace each P by an orthonormal basis of its column span."""
        for key in self.relations:
            P = self.params[f"fd.{key.id}.P"]
            q, _ = np.linalg.qr(P.values)
            P.values[:] = q[:, :P.values.shape[1]]


def diff_pairs(batch: BatchSubgraph, embeddings: dict[str, Tensor],
               relations: list[RelationKey]) -> dict[str, tuple[Tensor, np.ndarray, np.ndarray]]:
    """Per relation: difference vectors h_referenced - h_holder over the
    distinct FK links present in the batch (sampled in either direction)."""
    out = {}
    for key in relations:
        if key.reverse:
            continue
        links = []
        fwd = batch.edges.get(key.id)
        if fwd is not None:
            links.append(np.stack([fwd[0], fwd[1]], axis=1))
        rev = batch.edges.get(key.flipped().id)
        if rev is not None:
            links.append(np.stack([rev[1], rev[0]], axis=1))
        if not links or key.holder not in embeddings \
                or key.referenced not in embeddings:
            continue
        pairs = np.unique(np.concatenate(links, axis=0), axis=0)
        holder_locals, ref_locals = pairs[:, 0], pairs[:, 1]
        h_i = T.take_rows(embeddings[key.holder], holder_locals)
        h_j = T.take_rows(embeddings[key.referenced], ref_locals)
        out[key.id] = (T.sub(h_j, h_i), holder_locals, ref_locals)
    return out


def loss_emb(diffs: Tensor, P: Tensor, s: Tensor) -> Tensor:
    """Mean squared residual of (diff - s) against its P P^T image."""
    if diffs.shape[0] == 0:
        log.info("loss_emb: no pairs in batch, contributing zero")
        return Tensor(np.array(0.0))
    centered = T.sub(diffs, s)
    projected = T.matmul(T.matmul(centered, P), T.transpose(P))
    return T.mean(T.sumsq(T.sub(centered, projected), axis=1))


def score_pairs(fd: FdModule, relation_id: str, h_i: Tensor, h_j: Tensor) -> Tensor:
    """Relation scoring head applied to h_i - h_j (holder minus referenced)."""
    x = T.sub(h_i, h_j)
    hidden = T.relu(T.add(T.matmul(x, fd.params[f"fd.{relation_id}.ms.W1"]),
                          fd.params[f"fd.{relation_id}.ms.b1"]))
    raw = T.add(T.matmul(hidden, fd.params[f"fd.{relation_id}.ms.W2"]),
                fd.params[f"fd.{relation_id}.ms.b2"])
    return T.reshape(raw, (x.shape[0],))


def loss_pair(pos: Tensor, negs: Tensor, tau: float) -> Tensor:
    """Contrastive ranking loss of one positive against k negatives.

    -log d(pos) / (d(pos) + sum_k d(neg_k)), d(x) = exp(x / tau), computed via
    logsumexp.
    """
    if negs.shape[1] < 1:
        raise ValueError("loss_pair needs at least one negative per positive")
    n = pos.shape[0]
    stacked = T.scale(T.concat([T.reshape(pos, (n, 1)), negs], axis=1), 1.0 / tau)
    return T.mean(T.sub(T.logsumexp(stacked, axis=1), T.scale(pos, 1.0 / tau)))


def sample_negative_targets(batch: BatchSubgraph, target_table: str,
                            true_target_locals: np.ndarray, k: int,
                            rng: np.random.Generator) -> np.ndarray | None:
    """In-batch negatives: locals of the target type whose underlying rows
    differ from each pair's true target. Falls back to any other row of the
    type; returns None when the batch has no alternative at all."""
    rows = batch.nodes[target_table].rows
    n_local = len(rows)
    if n_local <= 1:
        return None
    out = np.empty((len(true_target_locals), k), dtype=np.int64)
    for i, j in enumerate(true_target_locals):
        true_row = rows[int(j)]
        cands = np.flatnonzero(rows != true_row)
        if len(cands) == 0:
            return None
        out[i] = rng.choice(cands, size=k, replace=len(cands) < k)
    return out


def fd_losses(batch: BatchSubgraph, embeddings: dict[str, Tensor], fd: FdModule,
              beta: float, gamma: float, tau: float, negatives: int,
              rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor, list[FdDiagnostics]]:
    """Combined regularizer beta * L_emb + gamma * L_pair, each averaged over
    the relations that have pairs in the batch."""
    pairs = diff_pairs(batch, embeddings, fd.relations)
    emb_terms: list[Tensor] = []
    pair_terms: list[Tensor] = []
    diagnostics: list[FdDiagnostics] = []
    for rid, (diffs, holder_locals, ref_locals) in sorted(pairs.items()):
        key = next(k for k in fd.relations if k.id == rid)
        P, s = fd.subspace(rid)
        l_emb = loss_emb(diffs, P, s)
        emb_terms.append(l_emb)

        h_i = T.take_rows(embeddings[key.holder], holder_locals)
        h_j = T.take_rows(embeddings[key.referenced], ref_locals)
        pos = score_pairs(fd, rid, h_i, h_j)
        neg_locals = sample_negative_targets(batch, key.referenced, ref_locals,
                                             negatives, rng)
        if neg_locals is None:
            log.info("fd: no negative targets available for %s, pair loss skipped", rid)
            diagnostics.append(FdDiagnostics(rid, diffs.shape[0],
                                             l_emb.item(), float("nan"),
                                             float(pos.values.mean()), float("nan")))
            continue
        neg_cols = []
        for kk in range(negatives):
            h_neg = T.take_rows(embeddings[key.referenced], neg_locals[:, kk])
            neg_cols.append(T.reshape(score_pairs(fd, rid, h_i, h_neg),
                                      (pos.shape[0], 1)))
        negs = T.concat(neg_cols, axis=1)
        l_pair = loss_pair(pos, negs, tau)
        pair_terms.append(l_pair)
        diagnostics.append(FdDiagnostics(rid, diffs.shape[0], l_emb.item(),
                                         l_pair.item(),
                                         float(pos.values.mean()),
                                         float(negs.values.mean())))

    zero = Tensor(np.array(0.0))
    l_emb_mean = (T.scale(_sum_tensors(emb_terms), 1.0 / len(emb_terms))
                  if emb_terms else zero)
    l_pair_mean = (T.scale(_sum_tensors(pair_terms), 1.0 / len(pair_terms))
                   if pair_terms else zero)
    total = T.add(T.scale(l_emb_mean, beta), T.scale(l_pair_mean, gamma))
    return total, l_emb_mean, l_pair_mean, diagnostics


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total
