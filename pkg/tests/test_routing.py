import numpy as np
import pytest

from fast_stg.analysis import cosine_similarity_matrix, expert_weight_profile
from fast_stg.data import synth_generate, synth_groups
from fast_stg.model import ModelConfig
from fast_stg.sweeps import routing_weights
from fast_stg.training import TrainConfig, train


@pytest.fixture(scope="module")
def trained():
    ds = synth_generate(16, 14, 15, seed=0)
    cfg = ModelConfig(N=16, T=24, P=12, d=16, e=4, a=8, L=2, steps_per_day=96)
    return ds, train(cfg, TrainConfig(max_epochs=30, seed=0), ds)


@pytest.mark.slow
@pytest.mark.parametrize("layer", [0, 1, 2])
def test_shared_phase_groups_route_alike(trained, layer):
    ds, res = trained
    prof = expert_weight_profile(routing_weights(res.model, res.normalizer, ds, res.train_cfg.split, "test", layer))
    assert prof.shape == (16, 4)
    assert np.allclose(prof.sum(axis=1), 1.0, atol=1e-9)
    S = cosine_similarity_matrix(prof)
    ga, gb = synth_groups(16)
    within = np.mean([S[i, j] for g in (ga, gb) for i in g for j in g if i < j])
    across = np.mean([S[i, j] for i in ga for j in gb])
    assert within > across
