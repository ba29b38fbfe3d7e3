"""Shared fixtures: tiny simulated datasets and quickly trained bundles."""

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from stflow.events import AffineMap, DomainSpec
from stflow.model import ModelConfig, TrainedBundle, VelocityModel
from stflow.simulate import HawkesParams, HawkesProcess, simulate_thinning
from stflow.train import TrainConfig, fit

TINY_MODEL = dict(embed_dim=16, sin_dim=16, n_enc_layers=1, n_dec_layers=1,
                  ff_dim=16, state_hidden=16, time_hidden=16, head_hidden=32,
                  dropout=0.0)


def desk_dir() -> Path:
    return Path(os.environ.get("STFLOW_DESK_DIR", Path(__file__).resolve().parents[1] / "desk_runs"))


@pytest.fixture(scope="session")
def short_process():
    # small horizon keeps sequences around a dozen events
    return HawkesProcess(HawkesParams(lambda0=1.0, alpha=0.5, beta=2.0, sigma=0.1),
                         DomainSpec(10.0, [[0.0, 1.0], [0.0, 1.0]]))


@pytest.fixture(scope="session")
def short_sequences(short_process):
    return [simulate_thinning(short_process, rng=np.random.default_rng(100 + i))
            for i in range(28)]


@pytest.fixture(scope="session")
def tiny_bundle(short_process, short_sequences):
    """A briefly trained small model over the short synthetic dataset."""
    cfg = TrainConfig(batch_size=8, max_epochs=4, seed=3, patience=10, p_cond=0.7)
    mcfg = ModelConfig(spatial_dim=2, **TINY_MODEL)
    model, _, _ = fit(short_sequences[:24], short_sequences[24:], short_process.domain,
                      mcfg, cfg)
    return TrainedBundle(model, mcfg, AffineMap.identity(2), cfg.eps,
                         {"domain": short_process.domain.to_dict()})


@pytest.fixture()
def random_bundle():
    torch.manual_seed(11)
    mcfg = ModelConfig(spatial_dim=2, **TINY_MODEL)
    model = VelocityModel(mcfg).eval()
    return TrainedBundle(model, mcfg, AffineMap.identity(2), 1e-6, {})


def make_zero_velocity_model(mcfg: ModelConfig | None = None) -> VelocityModel:
    torch.manual_seed(5)
    model = VelocityModel(mcfg or ModelConfig(spatial_dim=2, **TINY_MODEL)).eval()
    with torch.no_grad():
        model.head_t[2].weight.zero_()
        model.head_t[2].bias.zero_()
        model.head_x[2].weight.zero_()
        model.head_x[2].bias.zero_()
    return model


def make_constant_velocity_model(vt: float, vx: float, mcfg: ModelConfig | None = None) -> VelocityModel:
    model = make_zero_velocity_model(mcfg)
    with torch.no_grad():
        model.head_t[2].bias.fill_(vt)
        model.head_x[2].bias.fill_(vx)
    return model
