"""Schema graph, relation triples, and the full-resolution entity graph.

Tables become typed node sets; each foreign key becomes a pair of directed
typed edge sets (forward = referencing row to referenced row, plus a tagged
reverse). Three-table join patterns are materialized as path relations:

    CoOccurrence  u <- v -> w   (v references both endpoints)
    Completion    u -> v -> w   (v mediates)

The u -> v <- w pattern is never generated. The entity graph carries enough
provenance (primary keys per row, per-edge origin rows, direction tags) that
the originating database is reconstructed exactly, whatever the role
assignment; `strip_provenance` demonstrates the failure mode without it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PathCapExceeded, ProvenanceError, RoleError
from .kernels import lookup_positions
from .rdb import ColumnData, RelationalDatabase, TableSpec, build_database

ROLES = ("node", "edge", "learn")


# ---------------------------------------------------------------------------
# schema graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SchemaArc:
    """One declared foreign key: src table holds the column, arrow points FK -> PK."""
    src_table: str
    fk_column: str
    dst_table: str


@dataclass(frozen=True)
class SchemaGraph:
    vertices: tuple[str, ...]
    arcs: tuple[SchemaArc, ...]


def build_schema_graph(db: RelationalDatabase) -> SchemaGraph:
    arcs = []
    for name in db.table_names:
        for fk in db.specs[name].foreign_keys:
            arcs.append(SchemaArc(name, fk.column, fk.references))
    return SchemaGraph(tuple(db.table_names), tuple(arcs))


# ---------------------------------------------------------------------------
# relation keys (directed typed edge sets) and triples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelationKey:
    """A directed message relation derived from one foreign key."""
    holder: str       # table holding the foreign key
    fk_column: str
    referenced: str
    reverse: bool = False  # False: messages flow holder -> referenced

    @property
    def src_table(self) -> str:
        return self.referenced if self.reverse else self.holder

    @property
    def dst_table(self) -> str:
        return self.holder if self.reverse else self.referenced

    def flipped(self) -> "RelationKey":
        return replace(self, reverse=not self.reverse)

    @property
    def id(self) -> str:
        arrow = "<-" if self.reverse else "->"
        return f"{self.holder}.{self.fk_column}{arrow}{self.referenced}"


@dataclass(frozen=True)
class EdgeRelationTriple:
    """A three-table message pattern with v as the intermediate."""
    pattern: str  # "cooccurrence" | "completion"
    u_table: str
    v_table: str
    w_table: str
    # cooccurrence: both columns live on v (fk_u -> u_table, fk_w -> w_table)
    # completion:   fk_u lives on u (-> v_table), fk_w lives on v (-> w_table)
    fk_u: str
    fk_w: str

    @property
    def id(self) -> str:
        if self.pattern == "cooccurrence":
            return (f"co:{self.u_table}<~{self.v_table}.{self.fk_u}"
                    f"|{self.v_table}.{self.fk_w}~>{self.w_table}")
        return (f"comp:{self.u_table}.{self.fk_u}~>{self.v_table}"
                f"|{self.v_table}.{self.fk_w}~>{self.w_table}")

    def orientation_partner_id(self) -> str | None:
        """Id of the same CoOccurrence pair traversed in the other direction."""
        if self.pattern != "cooccurrence":
            return None
        return replace(self, u_table=self.w_table, w_table=self.u_table,
                       fk_u=self.fk_w, fk_w=self.fk_u).id

    def matching_relation(self) -> RelationKey:
        """The one-hop node relation (v -> w) this triple competes with."""
        return RelationKey(self.v_table, self.fk_w, self.w_table, reverse=False)


def enumerate_edge_triples(sg: SchemaGraph) -> list[EdgeRelationTriple]:
    """All CoOccurrence (both orientations) and Completion triples.

    Self-referential arcs never participate; the u -> v <- w pattern is never
    generated.
    """
    triples: list[EdgeRelationTriple] = []
    usable = [a for a in sg.arcs if a.src_table != a.dst_table]
    by_src: dict[str, list[SchemaArc]] = {}
    for arc in usable:
        by_src.setdefault(arc.src_table, []).append(arc)

    for v, arcs in by_src.items():
        for a1, a2 in itertools.permutations(arcs, 2):
            triples.append(EdgeRelationTriple(
                "cooccurrence", u_table=a1.dst_table, v_table=v,
                w_table=a2.dst_table, fk_u=a1.fk_column, fk_w=a2.fk_column))
    for a1 in usable:
        for a2 in by_src.get(a1.dst_table, []):
            triples.append(EdgeRelationTriple(
                "completion", u_table=a1.src_table, v_table=a1.dst_table,
                w_table=a2.dst_table, fk_u=a1.fk_column, fk_w=a2.fk_column))
    return triples


@dataclass
class RoleAssignment:
    """Role per relation triple; plain FK relations are always node-level."""
    roles: dict[str, str] = field(default_factory=dict)

    @staticmethod
    def uniform(triples: list[EdgeRelationTriple], role: str) -> "RoleAssignment":
        return RoleAssignment({t.id: role for t in triples})

    @staticmethod
    def learn_all(triples: list[EdgeRelationTriple]) -> "RoleAssignment":
        return RoleAssignment.uniform(triples, "learn")

    @staticmethod
    def random(triples: list[EdgeRelationTriple], seed: int) -> "RoleAssignment":
        rng = np.random.default_rng(seed)
        return RoleAssignment(
            {t.id: ("edge" if rng.random() < 0.5 else "node") for t in triples})

    def role(self, triple_id: str) -> str:
        return self.roles.get(triple_id, "node")

    def validate(self, triples: list[EdgeRelationTriple]) -> None:
        known = {t.id for t in triples}
        extra = set(self.roles) - known
        if extra:
            raise RoleError(f"role assignment references unknown triples: "
                            f"{sorted(extra)}")
        bad = {k: v for k, v in self.roles.items() if v not in ROLES}
        if bad:
            raise RoleError(f"invalid roles: {bad}")

    def edge_role_tables(self, triples: list[EdgeRelationTriple]) -> dict[str, str]:
        """Intermediate tables assigned the edge role, with the covering triple."""
        out: dict[str, str] = {}
        for t in triples:
            if self.roles.get(t.id) == "edge" and t.v_table not in out:
                out[t.v_table] = t.id
        return out


# ---------------------------------------------------------------------------
# entity graph storage
# ---------------------------------------------------------------------------

class NodeStore:
    """Rows of one table, ordered by primary key.

    Attributes hold non-key columns only; key structure lives on the edges.
    """

    def __init__(self, pk: np.ndarray, times: np.ndarray,
                 attrs: dict[str, ColumnData]):
        self.pk = pk
        self.times = times
        self.attrs = attrs

    @property
    def n_rows(self) -> int:
        return len(self.times)


class EdgeSet:
    """Instances of one foreign key: positions into the two node stores."""

    def __init__(self, key: RelationKey, holder_rows: np.ndarray,
                 ref_rows: np.ndarray):
        self.key = key
        self.holder_rows = holder_rows
        self.ref_rows = ref_rows

    @property
    def n_edges(self) -> int:
        return len(self.ref_rows)


class PathRelation:
    """Materialized exact join of one triple.

    `v_attr_rows`/`v_attrs` are the intermediate rows' attribute copy (the
    edge features); reconstruction of an edge-role table reads these, not the
    node store.
    """

    def __init__(self, triple: EdgeRelationTriple, u_pos: np.ndarray,
                 v_pos: np.ndarray, w_pos: np.ndarray, v_pk: np.ndarray,
                 t_path: np.ndarray, t_admissible: np.ndarray,
                 v_attr_rows: np.ndarray, v_attrs: dict[str, ColumnData]):
        self.triple = triple
        self.u_pos = u_pos
        self.v_pos = v_pos
        self.w_pos = w_pos
        self.v_pk = v_pk
        self.t_path = t_path            # the v row's timestamp per instance
        self.t_admissible = t_admissible  # max(u, v) timestamps per instance
        self.v_attr_rows = v_attr_rows  # v positions covered by the attr copy
        self.v_attrs = v_attrs          # columns restricted to v_attr_rows

    @property
    def n_instances(self) -> int:
        return len(self.v_pos)


class RelationalEntityGraph:
    def __init__(self, specs: dict[str, TableSpec], triples: list[EdgeRelationTriple],
                 roles: RoleAssignment, nodes: dict[str, NodeStore],
                 edges: dict[str, EdgeSet], paths: dict[str, PathRelation],
                 null_link_counts: dict[str, int], provenance: bool = True):
        self.specs = specs
        self.triples = triples
        self.roles = roles
        self.nodes = nodes
        self.edges = edges
        self.paths = paths
        self.null_link_counts = null_link_counts
        self.provenance = provenance
        self._adjacency: dict[str, tuple] = {}
        self._path_adjacency: dict[str, tuple] = {}

    @property
    def relation_keys(self) -> list[RelationKey]:
        out = []
        for es in self.edges.values():
            out.append(es.key)
            out.append(es.key.flipped())
        return out

    def triple_by_id(self, triple_id: str) -> EdgeRelationTriple:
        for t in self.triples:
            if t.id == triple_id:
                return t
        raise KeyError(triple_id)

    def summary(self) -> dict:
        return {
            "nodes": {t: s.n_rows for t, s in self.nodes.items()},
            "edges": {k: es.n_edges for k, es in self.edges.items()},
            "paths": {k: p.n_instances for k, p in self.paths.items()},
            "null_links": dict(self.null_link_counts),
            "provenance": self.provenance,
        }

    def strip_provenance(self) -> "RelationalEntityGraph":
        """Copy with row identities removed; reconstruction becomes impossible."""
        nodes = {t: NodeStore(None, s.times, s.attrs)  # type: ignore[arg-type]
                 for t, s in self.nodes.items()}
        return RelationalEntityGraph(self.specs, self.triples, self.roles,
                                     nodes, self.edges, self.paths,
                                     self.null_link_counts, provenance=False)

    # -- adjacency caches for the sampler ---------------------------------

    def adjacency(self, key: RelationKey) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR over dst nodes: (indptr, src rows, src timestamps), each dst
        segment sorted by (timestamp, src row)."""
        if key.id in self._adjacency:
            return self._adjacency[key.id]
        es = self.edges[RelationKey(key.holder, key.fk_column, key.referenced).id]
        if key.reverse:
            src, dst = es.ref_rows, es.holder_rows
        else:
            src, dst = es.holder_rows, es.ref_rows
        src_times = self.nodes[key.src_table].times[src] if len(src) else np.empty(0)
        n_dst = self.nodes[key.dst_table].n_rows
        order = np.lexsort((src, src_times, dst))
        dst_sorted = dst[order]
        indptr = np.zeros(n_dst + 1, dtype=np.int64)
        np.add.at(indptr, dst_sorted + 1, 1)
        indptr = np.cumsum(indptr)
        adj = (indptr, src[order].astype(np.int64),
               src_times[order].astype(np.float64))
        self._adjacency[key.id] = adj
        return adj

    def path_adjacency(self, triple_id: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR over w nodes: (indptr, instance indices, admissibility times)."""
        if triple_id in self._path_adjacency:
            return self._path_adjacency[triple_id]
        pr = self.paths[triple_id]
        n_w = self.nodes[pr.triple.w_table].n_rows
        idx = np.arange(pr.n_instances, dtype=np.int64)
        order = np.lexsort((idx, pr.t_admissible, pr.w_pos))
        w_sorted = pr.w_pos[order]
        indptr = np.zeros(n_w + 1, dtype=np.int64)
        np.add.at(indptr, w_sorted + 1, 1)
        indptr = np.cumsum(indptr)
        adj = (indptr, idx[order], pr.t_admissible[order])
        self._path_adjacency[triple_id] = adj
        return adj


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _node_store(db: RelationalDatabase, name: str) -> tuple[NodeStore, np.ndarray]:
    spec = db.specs[name]
    data = db.data[name]
    order = np.argsort(data.pk, kind="stable")
    pk = data.pk[order].astype(np.int64)
    times = db.timestamps(name)[order]
    attrs = {}
    for col in spec.columns:
        if col.name == spec.primary_key or col.name in spec.fk_columns:
            continue
        cd = data.cols[col.name]
        if cd.kind == "categorical":
            values = [cd.values[int(i)] for i in order]
        else:
            values = cd.values[order]
        attrs[col.name] = ColumnData(cd.kind, values, cd.mask[order],
                                     list(cd.vocab) if cd.vocab is not None else None)
    return NodeStore(pk, times, attrs), order


def _restrict_columns(attrs: dict[str, ColumnData], rows: np.ndarray) -> dict[str, ColumnData]:
    out = {}
    for name, cd in attrs.items():
        if cd.kind == "categorical":
            values = [cd.values[int(i)] for i in rows]
        else:
            values = cd.values[rows].copy()
        out[name] = ColumnData(cd.kind, values, cd.mask[rows].copy(),
                               list(cd.vocab) if cd.vocab is not None else None)
    return out


def construct_reg(db: RelationalDatabase, sg: SchemaGraph, roles: RoleAssignment,
                  path_cap: int = 5_000_000) -> RelationalEntityGraph:
    """Materialize node sets, both FK edge directions, and exact path joins."""
    triples = enumerate_edge_triples(sg)
    roles.validate(triples)

    nodes: dict[str, NodeStore] = {}
    for name in db.table_names:
        nodes[name], _ = _node_store(db, name)

    # FK columns reordered to node-store (pk-sorted) row order
    fk_cols: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
    for name, spec in db.specs.items():
        data = db.data[name]
        order = np.argsort(data.pk, kind="stable")
        for fk in spec.foreign_keys:
            cd = data.cols[fk.column]
            fk_cols[(name, fk.column)] = (cd.values[order].astype(np.int64),
                                          cd.mask[order].copy())

    edges: dict[str, EdgeSet] = {}
    null_links: dict[str, int] = {}
    for arc in sg.arcs:
        key = RelationKey(arc.src_table, arc.fk_column, arc.dst_table)
        values, mask = fk_cols[(arc.src_table, arc.fk_column)]
        holder_rows = np.flatnonzero(mask).astype(np.int64)
        ref_rows = lookup_positions(nodes[arc.dst_table].pk, values[holder_rows])
        if (ref_rows < 0).any():
            bad = int(holder_rows[int(np.flatnonzero(ref_rows < 0)[0])])
            raise ProvenanceError(
                f"dangling key during construction: {arc.src_table}.{arc.fk_column}"
                f" row {bad}")
        edges[key.id] = EdgeSet(key, holder_rows, ref_rows)
        null_links[key.id] = int((~mask).sum())

    paths: dict[str, PathRelation] = {}
    for triple in triples:
        if triple.pattern == "cooccurrence":
            vals_u, mask_u = fk_cols[(triple.v_table, triple.fk_u)]
            vals_w, mask_w = fk_cols[(triple.v_table, triple.fk_w)]
            both = mask_u & mask_w
            projected = int(both.sum())
            if projected > path_cap:
                raise PathCapExceeded(triple.id, projected, path_cap)
            v_pos = np.flatnonzero(both).astype(np.int64)
            u_pos = lookup_positions(nodes[triple.u_table].pk, vals_u[v_pos])
            w_pos = lookup_positions(nodes[triple.w_table].pk, vals_w[v_pos])
        else:
            vals_uv, mask_uv = fk_cols[(triple.u_table, triple.fk_u)]
            vals_vw, mask_vw = fk_cols[(triple.v_table, triple.fk_w)]
            u_all = np.flatnonzero(mask_uv).astype(np.int64)
            v_of_u = lookup_positions(nodes[triple.v_table].pk, vals_uv[u_all])
            keep = mask_vw[v_of_u]
            projected = int(keep.sum())
            if projected > path_cap:
                raise PathCapExceeded(triple.id, projected, path_cap)
            u_pos = u_all[keep]
            v_pos = v_of_u[keep]
            w_pos = lookup_positions(nodes[triple.w_table].pk, vals_vw[v_pos])

        v_store = nodes[triple.v_table]
        u_store = nodes[triple.u_table]
        t_path = v_store.times[v_pos]
        t_admissible = np.maximum(t_path, u_store.times[u_pos])
        v_attr_rows = np.unique(v_pos)
        paths[triple.id] = PathRelation(
            triple, u_pos, v_pos, w_pos, v_pk=v_store.pk[v_pos],
            t_path=t_path, t_admissible=t_admissible,
            v_attr_rows=v_attr_rows,
            v_attrs=_restrict_columns(v_store.attrs, v_attr_rows))

    return RelationalEntityGraph(dict(db.specs), triples, roles, nodes, edges,
                                 paths, null_links)


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------

def invert_reg(reg: RelationalEntityGraph) -> RelationalDatabase:
    """Reconstruct the database; exact under canonical_form.

    Node-role tables read attributes from their node store; edge-role
    intermediates read them from the covering path relation's attribute copy
    (rows never joined, e.g. NULL foreign keys, fall back to the node store and
    are counted).
    """
    if not reg.provenance or any(s.pk is None for s in reg.nodes.values()):
        raise ProvenanceError("entity graph carries no provenance; the original "
                              "database cannot be reconstructed")

    edge_tables = reg.roles.edge_role_tables(reg.triples)
    fallback_counts: dict[str, int] = {}

    rows: dict[str, list[dict]] = {}
    for name, spec in reg.specs.items():
        store = reg.nodes[name]
        n = store.n_rows
        table_rows = [dict() for _ in range(n)]
        for i in range(n):
            table_rows[i][spec.primary_key] = int(store.pk[i])

        # attributes (includes the time column)
        if name in edge_tables:
            pr = reg.paths[edge_tables[name]]
            covered = {int(p): j for j, p in enumerate(pr.v_attr_rows)}
            fallback_counts[name] = 0
            for i in range(n):
                j = covered.get(i)
                if j is None:
                    fallback_counts[name] += 1
                    src, idx = store.attrs, i
                else:
                    src, idx = pr.v_attrs, j
                for col_name, cd in src.items():
                    table_rows[i][col_name] = cd.cell(idx)
        else:
            for col_name, cd in store.attrs.items():
                for i in range(n):
                    table_rows[i][col_name] = cd.cell(i)

        # foreign keys from edge incidence
        for fk in spec.foreign_keys:
            key = RelationKey(name, fk.column, fk.references)
            es = reg.edges[key.id]
            ref_pk = reg.nodes[fk.references].pk
            for i in range(n):
                table_rows[i][fk.column] = None
            for holder, ref in zip(es.holder_rows, es.ref_rows):
                table_rows[int(holder)][fk.column] = int(ref_pk[int(ref)])
        rows[name] = table_rows

    db = build_database(list(reg.specs.values()), rows)
    db.reconstruction_fallbacks = fallback_counts  # type: ignore[attr-defined]
    return db


# ---------------------------------------------------------------------------
# structure-learning incompatibility demos (pruning / addition)
# ---------------------------------------------------------------------------

Graph = tuple[frozenset, frozenset]


def _graph(vertices, edges) -> Graph:
    return (frozenset(vertices), frozenset(frozenset(e) for e in edges))


def demo_prune_counterexample() -> tuple[Graph, Graph, Graph]:
    """Two distinct graphs whose pruned images coincide.

    The criterion 'drop edges outside the kept core' is not recorded in the
    output, so the pruning map cannot be inverted.
    """
    v = ("a", "b", "c")
    core = [("a", "b")]
    g1 = _graph(v, core + [("b", "c")])
    g2 = _graph(v, core + [("a", "c")])
    pruned = _graph(v, core)
    assert g1 != g2 and prune_to_core(g1, pruned[1]) == prune_to_core(g2, pruned[1])
    return g1, g2, pruned


def prune_to_core(g: Graph, core: frozenset) -> Graph:
    return (g[0], g[1] & core)


def close_common_neighbors(g: Graph) -> Graph:
    """Deterministic edge addition: connect vertices sharing a neighbor."""
    verts, edges = g
    adj = {x: set() for x in verts}
    for e in edges:
        x, y = tuple(e)
        adj[x].add(y)
        adj[y].add(x)
    added = set()
    for x, y in itertools.combinations(sorted(verts), 2):
        if frozenset((x, y)) not in edges and adj[x] & adj[y]:
            added.add(frozenset((x, y)))
    return (verts, edges | added)


def demo_add_counterexample() -> tuple[Graph, Graph, Graph]:
    """Two distinct originals producing the same augmented graph when the
    inferred edges are not tagged."""
    v = ("a", "b", "c")
    g1 = _graph(v, [("a", "b"), ("b", "c")])
    g2 = _graph(v, [("a", "b"), ("b", "c"), ("a", "c")])
    aug1 = close_common_neighbors(g1)
    aug2 = close_common_neighbors(g2)
    assert g1 != g2 and aug1 == aug2
    return g1, g2, aug1


def all_three_node_graphs() -> list[frozenset]:
    """Edge sets of every labeled graph on {a, b, c}."""
    pairs = [frozenset(p) for p in itertools.combinations(("a", "b", "c"), 2)]
    out = []
    for r in range(len(pairs) + 1):
        for combo in itertools.combinations(pairs, r):
            out.append(frozenset(combo))
    return out


def enumerate_pruning_maps() -> tuple[int, int]:
    """Check every pruning map on 3-node graphs for collisions.

    A pruning map sends each edge set E to some subset of E. Returns
    (number of non-identity maps, number of those with a collision); the two
    counts must match - only the identity (which prunes nothing and is
    excluded by the strict-subset precondition) is collision-free.
    """
    graphs = all_three_node_graphs()
    choices_per_graph = []
    for g in graphs:
        subsets = []
        for r in range(len(g) + 1):
            for combo in itertools.combinations(sorted(g, key=sorted), r):
                subsets.append(frozenset(combo))
        choices_per_graph.append(subsets)

    non_identity = 0
    collisions = 0
    for assignment in itertools.product(*choices_per_graph):
        if all(img == g for img, g in zip(assignment, graphs)):
            continue  # identity: prunes nothing, excluded
        non_identity += 1
        if len(set(assignment)) < len(assignment):
            collisions += 1
    return non_identity, collisions
