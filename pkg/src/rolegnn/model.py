"""The two-branch relational GNN with learnable table roles.

Per layer, each node type gets a self transform plus mean-aggregated messages
over every foreign-key relation (node branch), while each active triple
contributes a path-convolution message (edge branch): a concatenation map for
co-occurring endpoints, a multiplicative gate for mediated chains. A
relation-conditioned gate blended with a running table-level average weighs
the two branches; fusion sums the blended pairs over triples, and node types
with no active triple keep the plain node-branch update.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .sampler import BatchSubgraph
from .schema_graph import RelationalEntityGraph
from .tensor import Tensor

ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 128
    layers: int = 2
    dropout: float = 0.0
    alpha: float = 0.9        # blend toward the running gate
    mu: float = 0.9           # running-gate momentum
    activation: str = "relu"
    cat_dim: int = 8
    aggregation: str = "mean"  # mean | sum | max
    seed: int = 0

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.aggregation not in ("mean", "sum", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("channels", "layers", "dropout", "alpha", "mu", "activation",
                 "cat_dim", "aggregation", "seed")}


@dataclass
class GateState:
    """Running table-level gates, one per active triple; the learned structure."""
    values: dict[str, float]
    alpha: float
    mu: float

    def copy(self) -> "GateState":
        return GateState(dict(self.values), self.alpha, self.mu)

    def to_json(self) -> str:
        return json.dumps({"gates": self.values, "alpha": self.alpha,
                           "mu": self.mu}, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "GateState":
        d = json.loads(text)
        return GateState(dict(d["gates"]), float(d["alpha"]), float(d["mu"]))


def _param_seed(master: int, name: str) -> int:
    """Stable per-parameter seed: independent of creation order."""
    ss = np.random.SeedSequence([master, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _agg(kind: str, values: Tensor, segments: np.ndarray, n: int) -> Tensor:
    if kind == "mean":
        return T.segment_mean(values, segments, n)
    if kind == "sum":
        return T.segment_sum(values, segments, n)
    return T.segment_max(values, segments, n)


# ---------------------------------------------------------------------------
# feature encoding
# ---------------------------------------------------------------------------

class FeatureEncoder:
    """Raw rows to layer-0 embeddings.

    Numeric columns are standardized by statistics over train-visible rows
    (timestamp <= train cut), categorical columns go through learned embedding
    lookups (index 0 reserved for unknown/missing), the row timestamp becomes
    a scaled distance to the prediction time, and nullable columns contribute
    presence bits. Everything is concatenated and linearly projected.
    """

    def __init__(self, reg: RelationalEntityGraph, cfg: ModelConfig,
                 train_cut: float, stats: dict | None = None):
        self.cfg = cfg
        self.train_cut = train_cut
        self.params: dict[str, Tensor] = {}
        self.stats = stats if stats is not None else self._compute_stats(reg)
        self._build_params(reg)

    def _compute_stats(self, reg: RelationalEntityGraph) -> dict:
        stats: dict = {"tables": {}, "time_scale": 1.0}
        max_span = 1.0
        for name in sorted(reg.nodes):
            store = reg.nodes[name]
            spec = reg.specs[name]
            visible = store.times <= self.train_cut
            tstats: dict = {"columns": {}, "vocab": {}}
            for col_name in sorted(store.attrs):
                cd = store.attrs[col_name]
                if cd.kind == "categorical":
                    # vocabulary frozen here; unseen values map to index 0
                    tstats["vocab"][col_name] = list(cd.vocab or [])
                    continue
                sel = visible & cd.mask
                vals = np.asarray(cd.values, dtype=np.float64)[sel]
                mean = float(vals.mean()) if len(vals) else 0.0
                std = float(vals.std()) if len(vals) else 0.0
                tstats["columns"][col_name] = {"mean": mean,
                                               "std": std if std > 0 else 1.0}
            if spec.time_column is not None:
                finite = np.isfinite(store.times) & visible
                if finite.any():
                    span = self.train_cut - float(store.times[finite].min())
                    max_span = max(max_span, span)
            stats["tables"][name] = tstats
        stats["time_scale"] = max_span
        return stats

    def _feature_plan(self, reg: RelationalEntityGraph, name: str):
        """Ordered numeric/mask/time slots and categorical columns for a table."""
        spec = reg.specs[name]
        store = reg.nodes[name]
        numeric, categorical = [], []
        for col_name in sorted(store.attrs):
            cd = store.attrs[col_name]
            if cd.kind == "categorical":
                categorical.append(col_name)
            else:
                numeric.append(col_name)
        has_time = spec.time_column is not None
        return numeric, categorical, has_time

    def _raw_dim(self, reg: RelationalEntityGraph, name: str) -> int:
        numeric, categorical, has_time = self._feature_plan(reg, name)
        store = reg.nodes[name]
        dim = 1  # constant slot
        for col_name in numeric:
            dim += 1
            if self._nullable(reg, name, col_name):
                dim += 1
        if has_time:
            dim += 2  # scaled distance to prediction time + presence bit
        for col_name in categorical:
            dim += self.cfg.cat_dim
        return dim

    @staticmethod
    def _nullable(reg: RelationalEntityGraph, table: str, column: str) -> bool:
        return reg.specs[table].column(column).nullable

    def vocab(self, table: str, column: str) -> list[str]:
        return self.stats["tables"][table]["vocab"][column]

    def _build_params(self, reg: RelationalEntityGraph):
        ch = self.cfg.channels
        for name in sorted(reg.nodes):
            _, categorical, _ = self._feature_plan(reg, name)
            for col_name in categorical:
                vocab = self.vocab(name, col_name)
                pname = f"enc.{name}.cat.{col_name}"
                self.params[pname] = T.init_param(
                    (len(vocab) + 1, self.cfg.cat_dim), fan_in=1,
                    seed=_param_seed(self.cfg.seed, pname))
            raw = self._raw_dim(reg, name)
            wname = f"enc.{name}.proj.W"
            self.params[wname] = T.init_param((raw, ch), fan_in=raw,
                                              seed=_param_seed(self.cfg.seed, wname))
            self.params[f"enc.{name}.proj.b"] = T.zeros_param((ch,))

    def encode(self, reg: RelationalEntityGraph, batch: BatchSubgraph) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in sorted(batch.nodes):
            tn = batch.nodes[name]
            store = reg.nodes[name]
            numeric, categorical, has_time = self._feature_plan(reg, name)
            tstats = self.stats["tables"][name]["columns"]
            cols = [np.ones((tn.n, 1))]
            for col_name in numeric:
                cd = store.attrs[col_name]
                vals = np.asarray(cd.values, dtype=np.float64)[tn.rows]
                mask = cd.mask[tn.rows]
                st = tstats[col_name]
                std_vals = np.where(mask, (vals - st["mean"]) / st["std"], 0.0)
                cols.append(std_vals[:, None])
                if self._nullable(reg, name, col_name):
                    cols.append(mask.astype(np.float64)[:, None])
            if has_time:
                times = store.times[tn.rows]
                present = np.isfinite(times)
                dt = np.where(present,
                              (tn.t_predict - times) / self.stats["time_scale"],
                              0.0)
                cols.append(dt[:, None])
                cols.append(present.astype(np.float64)[:, None])
            parts = [Tensor(np.concatenate(cols, axis=1))]
            for col_name in categorical:
                cd = store.attrs[col_name]
                index = {v: i + 1 for i, v in enumerate(self.vocab(name, col_name))}
                codes = np.zeros(tn.n, dtype=np.int64)
                for i, row in enumerate(tn.rows):
                    v = cd.values[int(row)] if cd.mask[int(row)] else None
                    codes[i] = index.get(v, 0)
                parts.append(T.take_rows(self.params[f"enc.{name}.cat.{col_name}"],
                                         codes))
            raw = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
            out[name] = T.add(T.matmul(raw, self.params[f"enc.{name}.proj.W"]),
                              self.params[f"enc.{name}.proj.b"])
        return out


# ---------------------------------------------------------------------------
# branch primitives (also unit-test surfaces)
# ---------------------------------------------------------------------------

def relation_message(W: Tensor, h_src: Tensor, src_idx: np.ndarray,
                     dst_idx: np.ndarray, n_dst: int, aggregation: str = "mean") -> Tensor:
    """Aggregate a relation-specific linear map of neighbor embeddings."""
    mapped = T.matmul(T.take_rows(h_src, src_idx), W)
    return _agg(aggregation, mapped, dst_idx, n_dst)


def cooccurrence_message(W: Tensor, h_w: Tensor, h_v: Tensor, h_u: Tensor) -> Tensor:
    """Joint message for u <- v -> w instances: W (h_w || h_v || h_u)."""
    return T.matmul(T.concat([h_w, h_v, h_u], axis=1), W)


def completion_message(W1: Tensor, W2: Tensor, fW: Tensor, fb: Tensor,
                       h_w: Tensor, h_v: Tensor, h_u: Tensor) -> Tensor:
    """Mediated message for u -> v -> w: W2 (h_w || sig(f(h_v||h_u)) * W1(h_v||h_u))."""
    vu = T.concat([h_v, h_u], axis=1)
    gate = T.sigmoid(T.add(T.matmul(vu, fW), fb))
    return T.matmul(T.concat([h_w, T.mul(gate, T.matmul(vu, W1))], axis=1), W2)


def compute_gate(att_W: Tensor, att_b: Tensor, h_n: Tensor, h_e: Tensor,
                 gbar: float, alpha: float, mu: float,
                 train: bool) -> tuple[Tensor, Tensor, Tensor]:
    """Per-node adaptive gate, blended gate, and the table-level gate to use.

    During training the returned table-level gate is the freshly updated
    running mean (kept on the tape so the gate head receives gradient); at
    evaluation it is the stored constant.
    """
    logits = T.add(T.matmul(T.concat([h_n, h_e], axis=1), att_W), att_b)
    g_tilde = T.sigmoid(logits)
    g = T.add(T.scale(g_tilde, 1.0 - alpha), Tensor(np.array(alpha * gbar)))
    if train:
        g_used = T.add(T.scale(T.mean(g), 1.0 - mu), Tensor(np.array(mu * gbar)))
    else:
        g_used = Tensor(np.array(gbar))
    return g_tilde, g, g_used


def fuse(pairs: list[tuple[Tensor, Tensor, Tensor]]) -> Tensor:
    """Sum over relations of (1 - gate) * node branch + gate * edge branch."""
    total = None
    for h_n, h_e, gate in pairs:
        one_minus = T.add(T.scale(gate, -1.0), Tensor(np.array(1.0)))
        term = T.add(T.mul(one_minus, h_n), T.mul(gate, h_e))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ShapeError("fuse needs at least one branch pair")
    return total


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    output: Tensor                       # per-seed head output (logit / value)
    embeddings: dict[str, Tensor]        # final-layer embeddings per type
    gates_after: dict[str, float]        # committed running gates
    gate_diag: dict[str, tuple[float, float]]  # triple -> (mean g~, mean g)


class Model:
    """Parameters plus the layered forward pass for one schema and task."""

    def __init__(self, reg: RelationalEntityGraph, cfg: ModelConfig,
                 task_type: str, train_cut: float = np.inf,
                 fixed_gates: dict[str, float] | None = None,
                 encoder_stats: dict | None = None):
        self.reg = reg
        self.cfg = cfg
        self.task_type = task_type
        self.fixed_gates = fixed_gates or {}
        self.encoder = FeatureEncoder(reg, cfg, train_cut=train_cut,
                                      stats=encoder_stats)
        self.params: dict[str, Tensor] = dict(self.encoder.params)
        self.relations = sorted(reg.relation_keys, key=lambda k: k.id)
        self.active_triples = sorted(
            (t for t in reg.triples if reg.roles.role(t.id) != "node"),
            key=lambda t: t.id)
        self.node_types = sorted(reg.nodes)
        self._build_params()

    def _p(self, name: str, shape: tuple[int, ...], fan_in: int,
           zero: bool = False) -> Tensor:
        if name not in self.params:
            if zero:
                self.params[name] = T.zeros_param(shape)
            else:
                self.params[name] = T.init_param(
                    shape, fan_in, seed=_param_seed(self.cfg.seed, name))
        return self.params[name]

    def _build_params(self):
        ch = self.cfg.channels
        for l in range(self.cfg.layers):
            for c in self.node_types:
                self._p(f"L{l}.self.{c}.W", (ch, ch), ch)
                self._p(f"L{l}.self.{c}.b", (ch,), ch, zero=True)
            for key in self.relations:
                self._p(f"L{l}.rel.{key.id}.W", (ch, ch), ch)
            for tr in self.active_triples:
                if tr.pattern == "cooccurrence":
                    self._p(f"L{l}.co.{tr.id}.W", (3 * ch, ch), 3 * ch)
                else:
                    self._p(f"L{l}.comp.{tr.id}.W1", (2 * ch, ch), 2 * ch)
                    self._p(f"L{l}.comp.{tr.id}.W2", (2 * ch, ch), 2 * ch)
                    self._p(f"L{l}.comp.{tr.id}.f.W", (2 * ch, 1), 2 * ch)
                    self._p(f"L{l}.comp.{tr.id}.f.b", (1,), 1, zero=True)
                if self.reg.roles.role(tr.id) == "learn" and tr.id not in self.fixed_gates:
                    self._p(f"L{l}.gate.{tr.id}.W", (2 * ch, 1), 2 * ch, zero=True)
                    self._p(f"L{l}.gate.{tr.id}.b", (1,), 1, zero=True)
        if self.task_type in ("classification", "regression"):
            self._p("head.W", (ch, 1), ch)
            self._p("head.b", (1,), 1, zero=True)

    def init_gates(self) -> GateState:
        values = {}
        for tr in self.active_triples:
            if tr.id in self.fixed_gates:
                values[tr.id] = float(self.fixed_gates[tr.id])
            elif self.reg.roles.role(tr.id) == "edge":
                values[tr.id] = 1.0
            else:
                values[tr.id] = 0.5
        return GateState(values, self.cfg.alpha, self.cfg.mu)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- forward ----------------------------------------------------------

    def forward(self, batch: BatchSubgraph, gates: GateState, train: bool,
                rng: np.random.Generator | None = None) -> ForwardResult:
        act = ACTIVATIONS[self.cfg.activation]
        agg = self.cfg.aggregation
        h = self.encoder.encode(self.reg, batch)
        running = dict(gates.values)
        gate_diag: dict[str, tuple[float, float]] = {}

        for l in range(self.cfg.layers):
            self_term = {}
            for c, hc in h.items():
                self_term[c] = T.add(
                    T.matmul(hc, self.params[f"L{l}.self.{c}.W"]),
                    self.params[f"L{l}.self.{c}.b"])

            messages: dict[str, Tensor] = {}
            for key in self.relations:
                pair = batch.edges.get(key.id)
                if pair is None or key.dst_table not in h or key.src_table not in h:
                    continue
                src, dst = pair
                messages[key.id] = relation_message(
                    self.params[f"L{l}.rel.{key.id}.W"], h[key.src_table],
                    src, dst, batch.nodes[key.dst_table].n, agg)

            by_dst: dict[str, list[str]] = {}
            for key in self.relations:
                if key.id in messages:
                    by_dst.setdefault(key.dst_table, []).append(key.id)

            node_full = {}
            for c, hc in h.items():
                total = self_term[c]
                for kid in by_dst.get(c, []):
                    total = T.add(total, messages[kid])
                node_full[c] = act(total)

            fusion_pairs: dict[str, list[tuple[Tensor, Tensor, Tensor]]] = {}
            for tr in self.active_triples:
                c = tr.w_table
                trip = batch.paths.get(tr.id)
                if trip is None or c not in h:
                    continue
                u_idx, v_idx, w_idx = trip
                h_w = T.take_rows(h[c], w_idx)
                h_v = T.take_rows(h[tr.v_table], v_idx)
                h_u = T.take_rows(h[tr.u_table], u_idx)
                if tr.pattern == "cooccurrence":
                    msg = cooccurrence_message(
                        self.params[f"L{l}.co.{tr.id}.W"], h_w, h_v, h_u)
                else:
                    msg = completion_message(
                        self.params[f"L{l}.comp.{tr.id}.W1"],
                        self.params[f"L{l}.comp.{tr.id}.W2"],
                        self.params[f"L{l}.comp.{tr.id}.f.W"],
                        self.params[f"L{l}.comp.{tr.id}.f.b"],
                        h_w, h_v, h_u)
                e_agg = _agg(agg, msg, w_idx, batch.nodes[c].n)
                h_e = act(T.add(self_term[c], e_agg))

                match_id = tr.matching_relation().id
                if match_id in messages:
                    h_n = act(T.add(self_term[c], messages[match_id]))
                else:
                    h_n = act(self_term[c])

                role = self.reg.roles.role(tr.id)
                if tr.id in self.fixed_gates:
                    g_used = Tensor(np.array(self.fixed_gates[tr.id]))
                elif role == "edge":
                    g_used = Tensor(np.array(1.0))
                else:
                    g_tilde, g, g_used = compute_gate(
                        self.params[f"L{l}.gate.{tr.id}.W"],
                        self.params[f"L{l}.gate.{tr.id}.b"],
                        h_n, h_e, running[tr.id], gates.alpha, gates.mu, train)
                    gate_diag[tr.id] = (float(g_tilde.values.mean()),
                                        float(g.values.mean()))
                    if train:
                        running[tr.id] = float(g_used.values)
                fusion_pairs.setdefault(c, []).append((h_n, h_e, g_used))

            h_next = {}
            for c in h:
                if c in fusion_pairs:
                    h_next[c] = fuse(fusion_pairs[c])
                else:
                    h_next[c] = node_full[c]
                if self.cfg.dropout > 0:
                    h_next[c] = T.dropout(h_next[c], self.cfg.dropout, train, rng)
            h = h_next

        seed_h = T.take_rows(h[batch.entity_table], batch.seed_locals)
        if self.task_type in ("classification", "regression"):
            out = T.reshape(T.add(T.matmul(seed_h, self.params["head.W"]),
                                  self.params["head.b"]),
                            (len(batch.seed_locals),))
        else:
            out = seed_h
        return ForwardResult(out, h, running, gate_diag)


def link_scores(src_emb: Tensor, dst_emb: Tensor) -> Tensor:
    """Pairwise link score: inner product of final embeddings (row-aligned)."""
    return T.sum_(T.mul(src_emb, dst_emb), axis=1)
