import pytest

from windensemble.config import config_from_dict

SMOKE = {
    "synthetic": {"n_farms": 3, "length": 900},
    "window": 16,
    "embedding": {"stse_dim": 8, "mle_dim": 4},
    "mle_epochs": 5,
    "pool": [
        {"kind": "persistence"},
        {"kind": "autoregressive", "p": 2},
        {"kind": "boosted_stumps", "rounds": 20},
        {"kind": "graph_regressor", "epochs": 3},
    ],
    "agent": {"total_steps": 600, "actor_delay": 100, "batch_size": 16},
    "seed": 3,
}


@pytest.fixture
def smoke_doc():
    """A small but complete run configuration (seconds to execute)."""
    import copy

    return copy.deepcopy(SMOKE)


@pytest.fixture
def smoke_cfg(smoke_doc):
    return config_from_dict(smoke_doc)
