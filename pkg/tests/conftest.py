"""
Shared fixtures: a small synthetic family dataset and its graphs.
"""
import os
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from src.config import RunConfig
from src.featurize import RbfBank, build_graph
from src.protein_io import ProteinChain, Residue
from src.synth import FamilySpec, generate

TINY_K = 4
TINY_RBF = 4


def tiny_run_config(**overrides) -> RunConfig:
    """Encoder and loss small enough for a few optimizer steps in a unit test."""
    values = dict(hidden_dim=8, n_layers=2, code_length=16, k_nn=TINY_K, n_rbf=TINY_RBF,
                  n_negatives=2, accumulation=2, max_steps=3, log_every=1, lr=1e-3, seed=7)
    values.update(overrides)
    return RunConfig(**values).validate()


def point_chain(points, chain_id='points') -> ProteinChain:
    """Chain whose backbone atoms all sit on the given CA positions."""
    residues = tuple(
        Residue(index=i, n=np.asarray(p, float), ca=np.asarray(p, float),
                c=np.asarray(p, float), o=np.asarray(p, float))
        for i, p in enumerate(points)
    )
    return ProteinChain(chain_id, residues)


@pytest.fixture(scope='session')
def family_dataset():
    return generate(FamilySpec(n_families=3, members=3, min_length=20, max_length=24,
                               sigma=0.3, seed=1))


@pytest.fixture(scope='session')
def tiny_bank():
    return RbfBank.linear(TINY_RBF, 0.0, 20.0)


@pytest.fixture(scope='session')
def tiny_graphs(family_dataset, tiny_bank):
    return [build_graph(c, TINY_K, tiny_bank) for c in family_dataset.chains]


@pytest.fixture
def chain(family_dataset):
    return family_dataset.chains[0]


@pytest.fixture
def tiny_config():
    return tiny_run_config()
