#!/usr/bin/env python
"""
Tests for the conditional denoisers and the exact posterior.
"""
import numpy as np
import pytest
from scipy.special import softmax

from absorb.models import (check_probs, UniformModel, FixedModel, JointTable,
                           exact_posterior, ExactOracle, TabularModel,
                           posterior_targets, tabular_train)
from absorb.grid import full_mask, grid_index
from absorb.utils.testing import kl_divergence
from absorb.utils.errors import (ConfigurationError, ModelOutputError,
                                 CapacityError)

def bimodal_table():
    """ L=2, D=1, K=2 with mass on the grids (0,0) and (1,1) only. """
    uninformative = np.ones((2,2))/2.
    return JointTable.from_factors([0.5, 0., 0., 0.5], uninformative, 2, 1, 2)

def test_check_probs():
    row = np.array([0.25, 0.75])
    np.testing.assert_equal(check_probs(row, 2), row)
    with pytest.raises(ModelOutputError, match='sums to'):
        check_probs([0.5, 0.6], 2)
    with pytest.raises(ModelOutputError, match='negative'):
        check_probs([1.5, -0.5], 2)
    with pytest.raises(ModelOutputError, match='non-finite'):
        check_probs([np.nan, 1.], 2)
    with pytest.raises(ModelOutputError, match='length'):
        check_probs([1.], 2)
    with pytest.raises(ModelOutputError, match='step 7') as err:
        check_probs([0.5, 0.6], 2, step=7)
    assert err.value.step == 7

def test_uniform_model():
    model = UniformModel(5)
    masked = full_mask(3, 2, 5)
    noisy = np.zeros((3,2), dtype=int)
    probs = model.forward(masked, noisy)
    assert probs.shape == (3,2,5)
    np.testing.assert_allclose(probs, 0.2)

    probs = model.predict(np.stack([masked]*4), np.stack([noisy]*4))
    assert probs.shape == (4,3,2,5)

    with pytest.raises(ConfigurationError):
        model.forward(masked, np.zeros((3,1), dtype=int))

def test_fixed_model():
    model = FixedModel([0.2, 0.8])
    probs = model.forward(full_mask(4, 2, 2), np.zeros((4,2), dtype=int))
    assert probs.shape == (4,2,2)
    np.testing.assert_equal(probs[...,1], 0.8)
    with pytest.raises(ModelOutputError):
        FixedModel([0.2, 0.7])

def test_joint_table():
    table = JointTable.fixture()
    assert (table.L, table.D, table.K) == (2, 2, 3)
    assert table.size == 81
    np.testing.assert_allclose(table.table.sum(), 1)
    np.testing.assert_equal(table.noisy, [[0,1],[2,1]])
    np.testing.assert_allclose(table.conditional(table.noisy).sum(), 1)

    clean, noisy = table.sample(10, rng=0)
    assert clean.shape == (10,2,2)
    assert noisy.shape == (10,2,2)

    with pytest.raises(ConfigurationError):
        JointTable(np.ones((4,4)), 2, 1, 2)
    with pytest.raises(CapacityError):
        JointTable(np.zeros(1), 4, 2, 3)

def test_joint_table_io(tmp_path):
    table = JointTable.random(2, 1, 2, rng=3)
    filename = str(tmp_path/'table.json')
    table.write(filename)
    other = JointTable.read(filename)
    np.testing.assert_allclose(other.table, table.table)

def test_exact_posterior_deterministic():
    table = JointTable.identity_channel(2, 1, 2)
    noisy = np.array([[1],[0]])
    probs = exact_posterior(table, full_mask(2, 1, 2), noisy)
    np.testing.assert_allclose(probs[:,0], [[0,1],[1,0]])

def test_exact_posterior_uninformative():
    table = JointTable.independent_uniform(2, 2, 2)
    probs = exact_posterior(table, [[2,0],[2,2]], np.zeros((2,2), dtype=int))
    np.testing.assert_allclose(probs, 0.5)

def test_exact_posterior_bimodal():
    table = bimodal_table()
    noisy = np.array([[1],[0]])
    probs = exact_posterior(table, [[0],[2]], noisy)
    np.testing.assert_allclose(probs[1,0], [1,0])
    probs = exact_posterior(table, [[1],[2]], noisy)
    np.testing.assert_allclose(probs[1,0], [0,1])

def test_exact_posterior_zero_mass():
    diagnostics = dict()
    # Position 1 observed as 1 while position 0 is 0: no support
    table = JointTable.identity_channel(2, 1, 2, prior=[0.5, 0., 0., 0.5])
    probs = exact_posterior(table, [[2],[1]], np.array([[0],[0]]), diagnostics)
    np.testing.assert_allclose(probs, 0.5)
    assert diagnostics['zero_mass'] == 1

def test_oracle_fixture():
    table = JointTable.fixture()
    oracle = ExactOracle(table)
    noisy = table.noisy
    masked = np.array([[0,1],[3,1]])
    probs = oracle.forward(masked, noisy)

    # Brute force over the three completions of position (1,0)
    b = grid_index(noisy, 3)
    weights = []
    for k in range(3):
        grid = np.array([[0,1],[k,1]])
        weights.append(table.table[grid_index(grid, 3), b])
    expected = np.array(weights)/np.sum(weights)
    np.testing.assert_allclose(probs[1,0], expected, atol=1e-14)
    check_probs(probs, 3)

    # Fully unmasked input still returns valid rows
    check_probs(oracle.forward(np.array([[0,1],[2,1]]), noisy), 3)

    # Batched evaluation matches per-grid evaluation
    batch = np.stack([masked, full_mask(2, 2, 3), masked])
    out = oracle.forward(batch, np.stack([noisy]*3))
    np.testing.assert_equal(out[0], probs)
    np.testing.assert_equal(out[2], probs)
    np.testing.assert_allclose(out[1], exact_posterior(table, full_mask(2,2,3), noisy))

    with pytest.raises(ConfigurationError):
        oracle.forward(np.zeros((3,2), dtype=int), np.zeros((3,2), dtype=int))

def test_tabular_model():
    model = TabularModel(2, 1, 2)
    assert model.params['logits'].shape == (4, 9, 2, 2)
    probs = model.forward(full_mask(2, 1, 2), np.zeros((2,1), dtype=int))
    np.testing.assert_allclose(probs, 0.5)

    grads = model.backward(np.ones((2,1,2)))
    assert grads['logits'].sum() == 4
    assert np.count_nonzero(grads['logits']) == 4

    with pytest.raises(CapacityError):
        TabularModel(4, 2, 4)

def test_tabular_train_single():
    prior = [0.7, 0.3]
    table = JointTable.from_factors(prior, np.ones((2,2))/2., 1, 1, 2)
    model = TabularModel(1, 1, 2)
    model, history = tabular_train(model, table, steps=2000, lr=1., log_every=0)
    assert history[-1] < history[0]
    row = softmax(model.params['logits'][0, 2, 0])
    np.testing.assert_allclose(row, prior, atol=1e-3)

    with pytest.raises(ConfigurationError):
        tabular_train(model, table, steps=1, lr=0.)

def test_tabular_train_bimodal():
    table = bimodal_table()
    model = TabularModel(2, 1, 2)
    model, history = tabular_train(model, table, steps=20000, lr=1., log_every=0)
    probs = model.forward([[0],[2]], [[1],[0]])
    np.testing.assert_allclose(probs[1,0], [1,0], atol=1e-3)

def test_tabular_train_random():
    table = JointTable.random(2, 1, 2, rng=11)
    model = TabularModel(2, 1, 2)
    model, history = tabular_train(model, table, steps=20000, lr=1., log_every=0)
    targets, masked_pos = posterior_targets(table, model)
    learned = softmax(model.params['logits'], axis=-1)
    kl = kl_divergence(targets, learned)
    active = np.broadcast_to(masked_pos[None], kl.shape)
    assert np.mean(kl[active]) < 1e-3

def test_tabular_io(tmp_path):
    model = TabularModel(1, 1, 2)
    model.params['logits'][...] = np.arange(model.params['logits'].size).reshape(
        model.params['logits'].shape)
    filename = str(tmp_path/'tabular.json')
    model.write(filename)
    other = TabularModel.read(filename)
    np.testing.assert_equal(other.params['logits'], model.params['logits'])

if __name__ == "__main__":
    test_oracle_fixture()
