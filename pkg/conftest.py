import numpy as np
import pytest

from core_types import Allocation, ModelData, ModelState, PosteriorDraws, as_model_data, n_pairs
from simulate import SimConfig, generate


def _blank_state(Q=1, N=1, S=1, V=2, P=0, labels=None, **values):
    """Hand-built state with zero coefficients, unit variances and every indicator on"""
    D = n_pairs(Q)
    state = ModelState(
        allocation=Allocation(np.zeros(V, dtype=int) if labels is None else labels, Q),
        pi=np.full(Q, 1.0 / Q), M=np.zeros((N, D)), m_meas=np.zeros((S, D)),
        sigma2_qr=np.ones(D), omega2_qr=np.ones(D), beta_x=np.zeros(P + 1), beta_m=np.zeros(D),
        beta_z=0.0, alpha_x=np.zeros((D, P + 1)), alpha_z=np.zeros(D),
        tau=np.ones(D, dtype=np.int8), gamma=np.ones(D, dtype=np.int8),
        sigma2_1=1.0, sigma2_2=1.0, sigma2_zm=1.0, sigma2_my=1.0,
    )
    for name, value in values.items():
        setattr(state, name, np.asarray(value, dtype=float) if isinstance(value, list) else value)
    return state


def _draws(Q=1, V=2, chains=None, contrast=(1.0, 0.0)):
    return PosteriorDraws(chains=chains, n_iter=10, burn_in=0, thin=1, seeds=list(range(len(chains))),
                          Q=Q, V=V, contrast=contrast)


@pytest.fixture
def blank_state():
    return _blank_state


@pytest.fixture
def make_draws():
    return _draws


@pytest.fixture
def model_data():
    """Factory for ModelData with zero connectomes"""
    def build(y, z, X, S=None, V=2, meas_subject=None):
        y = np.asarray(y, dtype=float)
        meas_subject = np.arange(len(y)) if meas_subject is None else np.asarray(meas_subject)
        return ModelData.from_arrays(y, z, np.asarray(X, dtype=float), np.zeros((len(meas_subject), V, V)),
                                     meas_subject)
    return build


@pytest.fixture(scope='session')
def tiny_sim():
    """N=8, K=2, V=12, Q=2 simulated dataset with its truth"""
    dataset, truth = generate(SimConfig(N=8, K=2, V=12, Q=2, seed=3))
    return dataset, truth


@pytest.fixture(scope='session')
def tiny_data(tiny_sim):
    return as_model_data(tiny_sim[0])
