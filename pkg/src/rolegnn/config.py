"""Shipped defaults, the hyperparameter grid, and the hop-budget rule.

Everything here is data; `defaults_self_test` re-derives the values that other
modules rely on so a run can assert its own configuration.
"""

from __future__ import annotations

import os

# Shipped defaults. Flags > config file > these.
DEFAULTS = {
    "lr": 0.001,
    "channels": 128,
    "layers": 2,
    "dropout": 0.0,
    "neighbor_samples": 128,
    "beta": 1e-6,
    "gamma": 0.1,
    "alpha": 0.9,     # gate blend toward the running table-level gate
    "mu": 0.9,        # running-gate momentum
    "tau": 0.1,       # contrastive temperature
    "negatives": 8,
    "epochs": 30,
    "batch_size": 256,
    "patience": 10,
    "cat_dim": 8,
    "subspace_dim": 0,   # 0 -> channels // 4 (min 1)
    "path_cap": 5_000_000,
}

# Search grid used by the reference experiments.
GRID = {
    "lr": [0.005, 0.001, 0.0005, 0.0001],
    "neighbor_samples": [64, 128],
    "channels": [32, 64, 128],
    "layers": list(range(1, 9)),
    "dropout": [0.0, 0.2, 0.3, 0.5],
}

SEED_ENV_VAR = "ROLEGNN_SEED"


def hop_budget(neighbor_samples: int, hop: int) -> int:
    """Per-node sampling budget at 0-indexed hop `hop`: budget // 2**hop."""
    if hop < 0:
        raise ValueError(f"hop must be >= 0, got {hop}")
    return neighbor_samples // (2 ** hop)


def default_seed() -> int:
    """Seed default, overridable through the environment."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    return int(raw)


def defaults_self_test() -> list[tuple[str, bool, str]]:
    """Re-check the shipped defaults and the hop-budget rule.

    Returns (check name, passed, detail) rows; all rows must pass for a
    configuration to be considered authentic.
    """
    checks = []
    checks.append(("beta_default", DEFAULTS["beta"] == 1e-6,
                   f"beta={DEFAULTS['beta']!r}"))
    checks.append(("gamma_default", DEFAULTS["gamma"] == 0.1,
                   f"gamma={DEFAULTS['gamma']!r}"))
    budgets_64 = [hop_budget(64, i) for i in range(4)]
    checks.append(("hop_budget_rule_64", budgets_64 == [64, 32, 16, 8],
                   f"budgets(64)={budgets_64}"))
    budgets_128 = [hop_budget(128, i) for i in range(4)]
    checks.append(("hop_budget_rule_128", budgets_128 == [128, 64, 32, 16],
                   f"budgets(128)={budgets_128}"))
    checks.append(("lr_in_grid", DEFAULTS["lr"] in GRID["lr"],
                   f"lr={DEFAULTS['lr']}"))
    checks.append(("channels_in_grid", DEFAULTS["channels"] in GRID["channels"],
                   f"channels={DEFAULTS['channels']}"))
    checks.append(("dropout_in_grid", DEFAULTS["dropout"] in GRID["dropout"],
                   f"dropout={DEFAULTS['dropout']}"))
    checks.append(("neighbor_samples_in_grid",
                   DEFAULTS["neighbor_samples"] in GRID["neighbor_samples"],
                   f"B={DEFAULTS['neighbor_samples']}"))
    return checks
