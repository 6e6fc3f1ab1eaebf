"""Alternating training loop, evaluation metrics, and structure export.

Each epoch runs phase A (representation parameters trained on task loss plus
the FD regularizer, FD parameters frozen) then phase B (FD parameters trained
on the regularizer alone, representation frozen, gates frozen). Running gates
update only in phase A. With beta = gamma = 0 the FD machinery is skipped
entirely, which makes the trajectory bit-identical to a task-only run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import DEFAULTS
from .errors import CheckpointMismatch, TrainingDiverged
from .fd import FdModule, fd_losses
from .model import GateState, Model, ModelConfig, link_scores
from .rdb import RelationalDatabase, TaskSpec, canonical_form
from .sampler import BatchSubgraph, SamplerConfig, make_epoch_batches, sample_batch
from .schema_graph import (EdgeRelationTriple, RelationalEntityGraph,
                           RoleAssignment, build_schema_graph, construct_reg,
                           enumerate_edge_triples)
from .tensor import Adam, Tensor

ROLE_MODES = ("learn", "all-node", "all-edge", "random", "transfer")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = DEFAULTS["epochs"]
    batch_size: int = DEFAULTS["batch_size"]
    lr: float = DEFAULTS["lr"]
    beta: float = DEFAULTS["beta"]
    gamma: float = DEFAULTS["gamma"]
    alpha: float = DEFAULTS["alpha"]
    mu: float = DEFAULTS["mu"]
    tau: float = DEFAULTS["tau"]
    negatives: int = DEFAULTS["negatives"]
    neighbor_samples: int = DEFAULTS["neighbor_samples"]
    seed: int = 0
    patience: int = DEFAULTS["patience"]
    subspace_dim: int = DEFAULTS["subspace_dim"]
    link_negatives: int = 10
    fd_inner_steps: int = 1
    disable_fd: bool = False
    allow_future: bool = False  # test-only causality switch, forwarded to sampling
    reorthonormalize: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if min(self.beta, self.gamma) < 0:
            raise ValueError("beta and gamma must be >= 0")

    @property
    def fd_enabled(self) -> bool:
        return not self.disable_fd and (self.beta > 0 or self.gamma > 0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic AUC with average ranks on ties; NaN when single-class."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(np.asarray(pred) - np.asarray(target)).mean())


def map_at_k(scores: np.ndarray, candidate_ids: np.ndarray,
             relevant: list[set], k: int) -> float:
    """Mean over sources of average precision of the top-k ranked candidates.

    Candidate columns must be in ascending id order; ties rank lower ids
    first. Sources with no relevant candidates are skipped.
    """
    order = np.argsort(-scores, axis=1, kind="mergesort")
    aps = []
    for i in range(scores.shape[0]):
        rel = relevant[i]
        if not rel:
            continue
        ranked = candidate_ids[order[i, :k]]
        hits = 0
        total = 0.0
        for rank, cid in enumerate(ranked, start=1):
            if int(cid) in rel:
                hits += 1
                total += hits / rank
        aps.append(total / min(k, len(rel)))
    return float(np.mean(aps)) if aps else float("nan")


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    reg: RelationalEntityGraph
    model: Model
    fdmod: FdModule | None
    gates: GateState
    task: TaskSpec
    train_cfg: TrainConfig
    history: list[dict] = field(default_factory=list)
    fd_diag_rows: list[dict] = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.model.parameters())
        if self.fdmod is not None:
            out.update(self.fdmod.parameters())
        return out


def param_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].values, dtype="<f8").tobytes())
    return h.hexdigest()


def _roles_for_mode(triples, mode: str, seed: int,
                    transfer_gates: dict[str, float] | None = None):
    if mode == "all-node":
        return RoleAssignment.uniform(triples, "node"), None
    if mode == "all-edge":
        return RoleAssignment.uniform(triples, "edge"), None
    if mode == "learn":
        return RoleAssignment.learn_all(triples), None
    if mode == "random":
        rng = np.random.default_rng([seed, 0x5EED])
        fixed = {t.id: float(rng.uniform(0.0, 1.0)) for t in triples}
        return RoleAssignment.learn_all(triples), fixed
    if mode == "transfer":
        if transfer_gates is None:
            raise CheckpointMismatch("transfer mode needs source gates")
        return RoleAssignment.learn_all(triples), dict(transfer_gates)
    raise ValueError(f"unknown roles mode {mode!r}")


def build_state(db: RelationalDatabase, task: TaskSpec, model_cfg: ModelConfig,
                train_cfg: TrainConfig, roles_mode: str = "learn",
                transfer_gates: dict[str, float] | None = None,
                path_cap: int = DEFAULTS["path_cap"]) -> TrainState:
    sg = build_schema_graph(db)
    triples = enumerate_edge_triples(sg)
    roles, fixed = _roles_for_mode(triples, roles_mode, train_cfg.seed,
                                   transfer_gates)
    if transfer_gates is not None:
        missing = sorted({t.id for t in triples} - set(transfer_gates))
        extra = sorted(set(transfer_gates) - {t.id for t in triples})
        if missing or extra:
            raise CheckpointMismatch(
                f"triple sets differ: missing={missing} extra={extra}")
    reg = construct_reg(db, sg, roles, path_cap=path_cap)
    model_cfg = replace(model_cfg, alpha=train_cfg.alpha, mu=train_cfg.mu)
    model = Model(reg, model_cfg, task.task_type, train_cut=task.split[0],
                  fixed_gates=fixed)
    fdmod = None
    if train_cfg.fd_enabled:
        fdmod = FdModule(reg, model_cfg.channels, train_cfg.subspace_dim,
                         seed=model_cfg.seed)
    return TrainState(reg, model, fdmod, model.init_gates(), task, train_cfg)


# ---------------------------------------------------------------------------
# batch construction and losses
# ---------------------------------------------------------------------------

def _seed_list(task: TaskSpec, split: str, idx: np.ndarray):
    recs = task.labels[split]
    return ([(int(recs.entity[i]), float(recs.t_predict[i])) for i in idx],
            recs.label[idx],
            recs.target[idx] if recs.target is not None else None)


def _sampler_cfg(state: TrainState, seed: int) -> SamplerConfig:
    return SamplerConfig(neighbor_samples=state.train_cfg.neighbor_samples,
                         num_hops=state.model.cfg.layers, seed=seed,
                         allow_future=state.train_cfg.allow_future)


def _task_loss(state: TrainState, idx: np.ndarray, split: str, train: bool,
               gates: GateState, rng: np.random.Generator
               ) -> tuple[Tensor, dict[str, Tensor], BatchSubgraph, GateState]:
    task = state.task
    seeds, labels, targets = _seed_list(task, split, idx)
    scfg = _sampler_cfg(state, int(rng.integers(2 ** 62)))
    batch = sample_batch(state.reg, seeds, scfg, task.entity_table, rng=rng)
    result = state.model.forward(batch, gates, train=train, rng=rng)
    new_gates = GateState(result.gates_after, gates.alpha, gates.mu)

    if task.task_type == "classification":
        loss = T.bce_with_logits(result.output, labels)
    elif task.task_type == "regression":
        loss = T.mean(T.abs_(T.sub(result.output, Tensor(labels))))
    else:
        n = len(seeds)
        k = state.train_cfg.link_negatives
        target_pk = state.reg.nodes[task.target_table].pk
        neg_pk = target_pk[rng.integers(0, len(target_pk), size=n * k)]
        dst_seeds = [(int(p), seeds[i % n][1])
                     for i, p in enumerate(np.concatenate([targets, neg_pk]))]
        dst_cfg = _sampler_cfg(state, int(rng.integers(2 ** 62)))
        dst_batch = sample_batch(state.reg, dst_seeds, dst_cfg,
                                 task.target_table, rng=rng)
        dst_res = state.model.forward(dst_batch, new_gates, train=train, rng=rng)
        new_gates = GateState(dst_res.gates_after, gates.alpha, gates.mu)
        h_dst = T.take_rows(dst_res.embeddings[task.target_table],
                            dst_batch.seed_locals)
        h_src = T.take_rows(result.embeddings[task.entity_table],
                            batch.seed_locals)
        src_rep = T.take_rows(h_src, np.tile(np.arange(n), 1 + k))
        logits = link_scores(src_rep, h_dst)
        y = np.concatenate([np.ones(n), np.zeros(n * k)])
        loss = T.bce_with_logits(logits, y)
    return loss, result.embeddings, batch, new_gates


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train(state: TrainState, out_dir: str | Path | None = None,
          quiet: bool = True, phase_hook=None) -> dict:
    """Run the alternating loop; returns a summary with history and report.

    `phase_hook(event, epoch, state)` fires at "epoch_start", "after_phase_a"
    and "after_phase_b"; tests use it to audit the freezing contract.
    """
    cfg = state.train_cfg
    task = state.task
    model_params = [state.model.params[k] for k in sorted(state.model.params)]
    opt_model = Adam(model_params, lr=cfg.lr)
    opt_fd = None
    if state.fdmod is not None:
        fd_params = [state.fdmod.params[k] for k in sorted(state.fdmod.params)]
        opt_fd = Adam(fd_params, lr=cfg.lr)

    direction = "min" if task.task_type == "regression" else "max"
    best = None
    best_metric = None
    bad_epochs = 0
    t0 = time.time()

    for epoch in range(cfg.epochs):
        if phase_hook is not None:
            phase_hook("epoch_start", epoch, state)
        # phase A: representation on task + FD, FD parameters frozen
        batches = make_epoch_batches(task.labels["train"], cfg.batch_size,
                                     seed=_mix(cfg.seed, epoch, 0))
        sums = {"l_task": 0.0, "l_emb": 0.0, "l_pair": 0.0}
        for bi, idx in enumerate(batches):
            rng = np.random.default_rng([cfg.seed, epoch, 1, bi])
            opt_model.zero_grad()
            if opt_fd is not None:
                opt_fd.zero_grad()
            loss, embeddings, batch, new_gates = _task_loss(
                state, idx, "train", True, state.gates, rng)
            l_task = loss.item()
            l_emb_v = l_pair_v = 0.0
            if state.fdmod is not None:
                total, l_emb, l_pair, diag = fd_losses(
                    batch, embeddings, state.fdmod, cfg.beta, cfg.gamma,
                    cfg.tau, cfg.negatives, rng)
                loss = T.add(loss, total)
                l_emb_v, l_pair_v = l_emb.item(), l_pair.item()
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {bi}",
                    {"epoch": epoch, "batch": bi, "l_task": l_task,
                     "l_emb": l_emb_v, "l_pair": l_pair_v})
            T.backward(loss)
            opt_model.step()
            if opt_fd is not None:
                opt_fd.zero_grad()  # phase A never moves FD parameters
            state.gates = new_gates
            sums["l_task"] += l_task
            sums["l_emb"] += l_emb_v
            sums["l_pair"] += l_pair_v
        if phase_hook is not None:
            phase_hook("after_phase_a", epoch, state)

        # phase B: FD parameters on the regularizer, representation frozen
        if state.fdmod is not None:
            for inner in range(cfg.fd_inner_steps):
                batches_b = make_epoch_batches(
                    task.labels["train"], cfg.batch_size,
                    seed=_mix(cfg.seed, epoch, 2 + inner))
                for bi, idx in enumerate(batches_b):
                    rng = np.random.default_rng([cfg.seed, epoch, 3 + inner, bi])
                    opt_fd.zero_grad()
                    opt_model.zero_grad()
                    seeds, _, _ = _seed_list(task, "train", idx)
                    scfg = _sampler_cfg(state, int(rng.integers(2 ** 62)))
                    batch = sample_batch(state.reg, seeds, scfg,
                                         task.entity_table, rng=rng)
                    result = state.model.forward(batch, state.gates,
                                                 train=False, rng=rng)
                    total, l_emb, l_pair, diag = fd_losses(
                        batch, result.embeddings, state.fdmod, cfg.beta,
                        cfg.gamma, cfg.tau, cfg.negatives, rng)
                    if not np.isfinite(total.item()):
                        raise TrainingDiverged(
                            f"non-finite FD loss at epoch {epoch} batch {bi}",
                            {"epoch": epoch, "batch": bi})
                    T.backward(total)
                    opt_fd.step()
                    opt_model.zero_grad()
                    for d in diag:
                        state.fd_diag_rows.append({
                            "epoch": epoch, "relation": d.relation,
                            "l_emb": d.loss_emb, "l_pair": d.loss_pair,
                            "pos_score_mean": d.pos_score_mean,
                            "neg_score_mean": d.neg_score_mean})
            if cfg.reorthonormalize:
                state.fdmod.reorthonormalize()
        if phase_hook is not None:
            phase_hook("after_phase_b", epoch, state)

        n_batches = max(len(batches), 1)
        val = evaluate_state(state, "val")
        row = {"epoch": epoch, "split": "val", "metric": val["metric"],
               "l_task": sums["l_task"] / n_batches,
               "l_emb": sums["l_emb"] / n_batches,
               "l_pair": sums["l_pair"] / n_batches}
        state.history.append(row)
        if not quiet:
            print(f"epoch {epoch}: val {val['name']}={val['metric']:.4f} "
                  f"l_task={row['l_task']:.4f}")

        metric = val["metric"]
        strictly_better = (best_metric is None or
                           (direction == "max" and metric > best_metric) or
                           (direction == "min" and metric < best_metric))
        tie = best_metric is not None and metric == best_metric
        if (strictly_better or tie) and np.isfinite(metric):
            # ties refresh the snapshot: equal validation, more training
            best_metric = metric
            best = _snapshot(state)
        if strictly_better and np.isfinite(metric):
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    if best is not None:
        _restore(state, best)

    summary = {
        "best_val_metric": best_metric,
        "metric_name": _metric_name(task.task_type),
        "epochs_run": len(state.history),
        "wall_clock_s": time.time() - t0,
        "structure": structure_report(state.reg.triples, state.gates),
        "history": state.history,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint", state)
        _write_history_csv(out_dir / "metrics.csv", state.history)
        _write_fd_csv(out_dir / "fd_diagnostics.csv", state.fd_diag_rows)
        with open(out_dir / "structure.json", "w", encoding="utf-8") as fh:
            json.dump(summary["structure"], fh, indent=2)
        summary["checkpoint"] = str(out_dir / "checkpoint")
        summary["structure_path"] = str(out_dir / "structure.json")
    return summary


def _mix(*parts: int) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") % (2 ** 62)


def _snapshot(state: TrainState) -> dict:
    return {
        "params": {k: v.values.copy() for k, v in state.parameters().items()},
        "gates": state.gates.copy(),
    }


def _restore(state: TrainState, snap: dict) -> None:
    params = state.parameters()
    for k, v in snap["params"].items():
        params[k].values[:] = v
    state.gates = snap["gates"].copy()


def _metric_name(task_type: str) -> str:
    return {"classification": "auc", "regression": "mae",
            "link_prediction": "map"}[task_type]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_state(state: TrainState, split: str) -> dict:
    task = state.task
    if split not in task.labels:
        return {"name": _metric_name(task.task_type), "metric": float("nan"),
                "defined": False, "note": f"split {split!r} has no labels"}
    with T.no_grad():
        if task.task_type == "link_prediction":
            return _evaluate_links(state, split)
        recs = task.labels[split]
        outputs = np.empty(len(recs), dtype=np.float64)
        for lo in range(0, len(recs), state.train_cfg.batch_size):
            idx = np.arange(lo, min(lo + state.train_cfg.batch_size, len(recs)))
            seeds, _, _ = _seed_list(task, split, idx)
            rng = np.random.default_rng([state.train_cfg.seed, 99, lo])
            scfg = _sampler_cfg(state, int(rng.integers(2 ** 62)))
            batch = sample_batch(state.reg, seeds, scfg, task.entity_table,
                                 rng=rng)
            res = state.model.forward(batch, state.gates, train=False)
            outputs[idx] = res.output.values
        if task.task_type == "classification":
            value = roc_auc(recs.label, outputs)
            return {"name": "auc", "metric": value,
                    "defined": bool(np.isfinite(value)),
                    "note": None if np.isfinite(value)
                    else "undefined: single-class labels"}
        return {"name": "mae", "metric": mae(outputs, recs.label),
                "defined": True}


def _evaluate_links(state: TrainState, split: str) -> dict:
    task = state.task
    recs = task.labels[split]
    target_store = state.reg.nodes[task.target_table]
    by_source: dict[tuple[int, float], set] = {}
    for i in range(len(recs)):
        key = (int(recs.entity[i]), float(recs.t_predict[i]))
        if recs.label[i] == 1:
            by_source.setdefault(key, set()).add(int(recs.target[i]))
        else:
            by_source.setdefault(key, set())

    sources = sorted(by_source)
    src_seeds = [(pk, t) for pk, t in sources]
    rng = np.random.default_rng([state.train_cfg.seed, 98])
    scfg = _sampler_cfg(state, int(rng.integers(2 ** 62)))
    src_batch = sample_batch(state.reg, src_seeds, scfg, task.entity_table,
                             rng=rng)
    src_res = state.model.forward(src_batch, state.gates, train=False)
    h_src = src_res.embeddings[task.entity_table].values[src_batch.seed_locals]

    ap_scores = []
    cand_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    for si, (pk, t_pred) in enumerate(sources):
        if t_pred not in cand_cache:
            admissible = target_store.times <= t_pred
            cand_pk = target_store.pk[admissible]
            seeds = [(int(p), t_pred) for p in cand_pk]
            rng2 = np.random.default_rng([state.train_cfg.seed, 97,
                                          int(t_pred)])
            scfg2 = _sampler_cfg(state, int(rng2.integers(2 ** 62)))
            tb = sample_batch(state.reg, seeds, scfg2, task.target_table,
                              rng=rng2)
            tres = state.model.forward(tb, state.gates, train=False)
            h_t = tres.embeddings[task.target_table].values[tb.seed_locals]
            cand_cache[t_pred] = (cand_pk, h_t)
        cand_pk, h_t = cand_cache[t_pred]
        scores = h_src[si] @ h_t.T
        ap_scores.append((scores, cand_pk, by_source[(pk, t_pred)]))

    if not ap_scores:
        return {"name": "map", "metric": float("nan"), "defined": False}
    n_cand = {len(c) for _, c, _ in ap_scores}
    if len(n_cand) == 1:
        mat = np.stack([s for s, _, _ in ap_scores])
        value = map_at_k(mat, ap_scores[0][1], [r for _, _, r in ap_scores],
                         task.eval_k)
    else:
        vals = [map_at_k(s[None, :], c, [r], task.eval_k)
                for s, c, r in ap_scores if r]
        value = float(np.mean(vals)) if vals else float("nan")
    return {"name": "map", "metric": value, "defined": bool(np.isfinite(value))}


# ---------------------------------------------------------------------------
# structure report, checkpoints, transfer
# ---------------------------------------------------------------------------

def structure_report(triples: list, gates: GateState) -> dict:
    by_id = {t.id: t for t in triples}
    entries = []
    for tid in sorted(gates.values):
        triple = by_id[tid]
        g = gates.values[tid]
        partner = triple.orientation_partner_id()
        consistency = None
        if partner is not None and partner in gates.values:
            consistency = ("same" if abs(g - gates.values[partner]) < 0.1
                           else "diff")
        entries.append({
            "triple": tid,
            "pattern": triple.pattern,
            "tables": [triple.u_table, triple.v_table, triple.w_table],
            "gate": g,
            "dominant_role": "node" if g < 0.5 else "edge",
            "orientation_consistency": consistency,
        })
    return {"triples": entries, "alpha": gates.alpha, "mu": gates.mu}


def export_structure(checkpoint_dir: str | Path,
                     out_path: str | Path | None = None) -> dict:
    """Build the structure report from a checkpoint alone."""
    path = Path(checkpoint_dir)
    if not (path / "meta.json").exists():
        raise CheckpointMismatch(f"no checkpoint at {path}")
    with open(path / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(path / "gates.json", encoding="utf-8") as fh:
        gates = GateState.from_json(fh.read())
    triples = [EdgeRelationTriple(**d) for d in meta["triples"]]
    report = structure_report(triples, gates)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    return report


def schema_digest(db: RelationalDatabase) -> str:
    payload = json.dumps([db.specs[n].to_dict() for n in sorted(db.table_names)],
                         sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def dataset_digest(db: RelationalDatabase) -> str:
    return hashlib.sha256(canonical_form(db)).hexdigest()


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    T.save_tensors(path / "params.bin", state.parameters())
    with open(path / "gates.json", "w", encoding="utf-8") as fh:
        fh.write(state.gates.to_json())
    meta = {
        "model_config": state.model.cfg.to_dict(),
        "encoder_stats": state.model.encoder.stats,
        "task": {
            "name": state.task.name,
            "task_type": state.task.task_type,
            "entity_table": state.task.entity_table,
            "target_table": state.task.target_table,
            "eval_k": state.task.eval_k,
            "split": list(state.task.split),
        },
        "train_config": {k: getattr(state.train_cfg, k)
                         for k in TrainConfig.__dataclass_fields__},
        "roles": dict(state.reg.roles.roles),
        "fixed_gates": state.model.fixed_gates,
        "triples": [{"pattern": t.pattern, "u_table": t.u_table,
                     "v_table": t.v_table, "w_table": t.w_table,
                     "fk_u": t.fk_u, "fk_w": t.fk_w}
                    for t in state.reg.triples],
        "schema_digest": schema_digest_from_specs(state.reg.specs),
    }
    with open(path / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return path


def schema_digest_from_specs(specs: dict) -> str:
    payload = json.dumps([specs[n].to_dict() for n in sorted(specs)],
                         sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path: str | Path, db: RelationalDatabase,
                    task: TaskSpec | None = None) -> TrainState:
    path = Path(path)
    if not (path / "meta.json").exists():
        raise CheckpointMismatch(f"no checkpoint at {path}")
    with open(path / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["schema_digest"] != schema_digest(db):
        raise CheckpointMismatch("checkpoint schema does not match database")

    model_cfg = ModelConfig(**meta["model_config"])
    tcfg_raw = meta["train_config"]
    train_cfg = TrainConfig(**tcfg_raw)
    if task is None:
        tmeta = meta["task"]
        task = TaskSpec(name=tmeta["name"], task_type=tmeta["task_type"],
                        entity_table=tmeta["entity_table"],
                        target_table=tmeta["target_table"],
                        eval_k=tmeta["eval_k"], split=tuple(tmeta["split"]))
    sg = build_schema_graph(db)
    triples = enumerate_edge_triples(sg)
    current = {t.id for t in triples}
    saved = {EdgeRelationTriple(**d).id for d in meta["triples"]}
    if current != saved:
        raise CheckpointMismatch(
            f"triple sets differ: missing={sorted(saved - current)} "
            f"extra={sorted(current - saved)}")
    roles = RoleAssignment(dict(meta["roles"]))
    reg = construct_reg(db, sg, roles)
    model = Model(reg, model_cfg, task.task_type, train_cut=task.split[0],
                  fixed_gates=meta["fixed_gates"] or None,
                  encoder_stats=meta["encoder_stats"])
    fdmod = None
    if train_cfg.fd_enabled:
        fdmod = FdModule(reg, model_cfg.channels, train_cfg.subspace_dim,
                         seed=model_cfg.seed)
    state = TrainState(reg, model, fdmod, model.init_gates(), task, train_cfg)
    with open(path / "gates.json", encoding="utf-8") as fh:
        state.gates = GateState.from_json(fh.read())
    stored = T.load_tensors(path / "params.bin")
    params = state.parameters()
    missing = sorted(set(params) - set(stored))
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks parameters: {missing[:5]}")
    for name, arr in stored.items():
        if name in params:
            if params[name].values.shape != arr.shape:
                raise CheckpointMismatch(
                    f"parameter {name} shape {arr.shape} != "
                    f"{params[name].values.shape}")
            params[name].values[:] = arr
    return state


def evaluate(checkpoint_dir: str | Path, db: RelationalDatabase,
             task: TaskSpec, split: str) -> dict:
    state = load_checkpoint(checkpoint_dir, db, task)
    return evaluate_state(state, split)


def transfer_structure(source_checkpoint: str | Path, db: RelationalDatabase,
                       task: TaskSpec, model_cfg: ModelConfig,
                       train_cfg: TrainConfig,
                       out_dir: str | Path | None = None) -> dict:
    """Train task B with table-level gates copied from checkpoint A and frozen."""
    src = Path(source_checkpoint)
    with open(src / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["schema_digest"] != schema_digest(db):
        raise CheckpointMismatch("source checkpoint schema does not match "
                                 "target database")
    with open(src / "gates.json", encoding="utf-8") as fh:
        gates = GateState.from_json(fh.read())
    state = build_state(db, task, model_cfg, train_cfg, roles_mode="transfer",
                        transfer_gates=gates.values)
    summary = train(state, out_dir=out_dir)
    summary["transfer"] = {"source_task": meta["task"]["name"],
                           "target_task": task.name}
    return summary


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def _write_history_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "split", "metric",
                                                "l_task", "l_emb", "l_pair"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def _write_fd_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "relation", "l_emb",
                                                "l_pair", "pos_score_mean",
                                                "neg_score_mean"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
