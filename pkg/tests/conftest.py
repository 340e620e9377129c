import pytest

from fosp import trainer
from fosp.config import desk_config


def tiny_config(**kw):
    """Smallest setting that still exercises every code path."""
    base = dict(D_h=8, N_l=2, C_l=3, mlp_units=8, B=4, T=4, H=3, N_offline=6, log_every=2, eval_episodes=1,
                counts="3,3,3", N_online=2, updates_per_episode=2, eval_every=1)
    base.update(kw)
    return desk_config(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "grid.bin"
    data = trainer.generate(tiny_config(), path)
    return path, data
