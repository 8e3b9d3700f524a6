#!/usr/bin/env python
"""
Tests for the reverse-time sampler.
"""
import numpy as np
import pytest

from absorb.sampler import (SamplerConfig, SampleTrace, step_grid, categorical,
                            reverse_step, sample, sample_batch,
                            expected_distribution_one_step)
from absorb.models import UniformModel, FixedModel, JointTable, ExactOracle
from absorb.grid import full_mask, mask_count, grid_index
from absorb.utils.rng import get_rng
from absorb.utils.testing import binomial_sigma, tv_distance, histogram
from absorb.utils.errors import (ConfigurationError, RangeError, CapacityError,
                                 ModelOutputError, NumericError)

class NaNModel(UniformModel):
    def forward(self, masked, noisy):
        probs = super(NaNModel,self).forward(masked, noisy)
        probs[...] = np.nan
        return probs

class OverflowModel(UniformModel):
    def forward(self, masked, noisy):
        raise NumericError("overflow in layer head")

class FailingModel(UniformModel):
    """ Raises `error` on evaluation number `fail_at`. """
    def __init__(self, K, error, fail_at=0):
        super(FailingModel,self).__init__(K)
        self.error = error
        self.fail_at = fail_at
        self.calls = 0

    def forward(self, masked, noisy):
        self.calls += 1
        if self.calls > self.fail_at:
            raise self.error("model failed")
        return super(FailingModel,self).forward(masked, noisy)

class ScrambledOracle(ExactOracle):
    """ Exact posterior at masked positions, arbitrary rows elsewhere. """
    def forward(self, masked, noisy):
        probs = super(ScrambledOracle,self).forward(masked, noisy)
        rows = np.eye(self.K)[(np.asarray(masked) + 1) % self.K]
        unmasked = np.asarray(masked) != self.K
        return np.where(unmasked[...,None], rows, probs)

def test_sampler_config():
    cfg = SamplerConfig()
    assert cfg.n_steps == 64
    assert cfg.decode_mode == 'categorical'
    assert cfg.cache
    assert SamplerConfig(decode_mode='ARGMAX').decode_mode == 'argmax'
    with pytest.raises(ConfigurationError):
        SamplerConfig(n_steps=0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(decode_mode='greedy')

def test_step_grid():
    assert step_grid(1) == [(1.,0.)]
    assert step_grid(2) == [(1.,0.5),(0.5,0.)]
    pairs = step_grid(4)
    assert len(pairs) == 4
    np.testing.assert_allclose([t - s for t,s in pairs], 0.25)
    pairs = step_grid(1024, T=2.)
    assert pairs[0][0] == 2.
    assert pairs[-1][1] == 0.
    times = [t for t,s in pairs] + [0.]
    assert np.all(np.diff(times) < 0)
    with pytest.raises(ConfigurationError):
        step_grid(0)

def test_categorical():
    probs = np.array([[0.2, 0.8]]*3)
    np.testing.assert_equal(categorical(probs, np.array([0.1, 0.2, 0.9])), [0,1,1])
    probs = np.array([0., 0., 1.])
    assert categorical(probs, np.array(0.)) == 2

def test_reverse_step_statistics():
    rng = get_rng(0)
    n = 100000
    grid = full_mask(n, 1, 2)
    probs = np.broadcast_to([0.2, 0.8], (n,1,2))
    out = reverse_step(grid, probs, 1., 0.75, rng)
    unmasked = out[out != 2]
    frac = len(unmasked)/float(n)
    assert abs(frac - 0.25) < 4*binomial_sigma(0.25, n)
    ones = np.mean(unmasked == 1)
    assert abs(ones - 0.8) < 4*binomial_sigma(0.8, len(unmasked))

def test_reverse_step_unmasked():
    rng = get_rng(1)
    grid = np.array([[0,3],[1,3]])
    probs = np.broadcast_to([0., 0., 1.], (2,2,3))
    out = reverse_step(grid, probs, 0.5, 0., rng)
    np.testing.assert_equal(out, [[0,2],[1,2]])
    assert mask_count(out, 3) == 0

    # Unmasked codes survive even when the row puts no mass on them
    grid = np.array([[0,1],[1,0]])
    out = reverse_step(grid, probs, 1., 0.5, rng)
    np.testing.assert_equal(out, grid)

def test_reverse_step_errors():
    grid = full_mask(2, 1, 2)
    probs = np.broadcast_to([0.5, 0.5], (2,1,2))
    with pytest.raises(RangeError):
        reverse_step(grid, probs, 0.5, 0.5, 0)
    with pytest.raises(RangeError):
        reverse_step(grid, probs, 1.5, 0.5, 0)
    with pytest.raises(ModelOutputError, match='step 3'):
        reverse_step(grid, np.broadcast_to([0.5, 0.6], (2,1,2)), 1., 0.5, 0, step=3)
    with pytest.raises(ModelOutputError):
        reverse_step(grid, np.broadcast_to([0.5, 0.5], (2,2,2)), 1., 0.5, 0)

def test_sample_one_step():
    model = FixedModel([0.3, 0.7])
    grid, trace = sample(model, np.zeros((5,2), dtype=int), SamplerConfig(n_steps=1))
    assert trace.nfe == 1
    assert mask_count(grid, 2) == 0
    assert trace.final_mask_count == 0
    assert trace.unmasked == 10

def test_sample_deterministic():
    model = UniformModel(4)
    noisy = np.zeros((6,3), dtype=int)
    cfg = SamplerConfig(n_steps=16, seed=5)
    a, ta = sample(model, noisy, cfg)
    b, tb = sample(model, noisy, cfg)
    np.testing.assert_equal(a, b)
    assert ta.records == tb.records
    c, tc = sample(model, noisy, SamplerConfig(n_steps=16, seed=6))
    assert not np.array_equal(a, c)

def test_nfe_bound():
    L, D, K = 10, 4, 4
    model = UniformModel(K)
    noisy = np.zeros((200,L,D), dtype=int)
    for n_steps in (8, 64, 256):
        grids, trace = sample_batch(model, noisy, SamplerConfig(n_steps=n_steps, seed=n_steps))
        assert mask_count(grids, K) == 0
        assert trace.unmask_count.shape == (n_steps, 200)
        assert np.all(trace.nfe <= min(n_steps, L*D + 1))
        np.testing.assert_equal(trace.unmask_count.sum(axis=0), L*D)
        assert trace.unmask_count.min() >= 0
        np.testing.assert_equal(trace.final_mask_count, 0)
        # Every evaluation after the first follows an unmasking step
        assert np.all(trace.evaluated[0])
        np.testing.assert_equal(trace.evaluated[1:], trace.unmask_count[:-1] > 0)

def test_batch_trace():
    model = UniformModel(3)
    noisy = np.zeros((5,4,2), dtype=int)
    grids, trace = sample_batch(model, noisy, SamplerConfig(n_steps=16, seed=3))
    assert len(trace) == 5
    np.testing.assert_equal(trace.times, step_grid(16))
    for r,run in enumerate(trace):
        assert run.nfe == trace.nfe[r]
        assert len(run.records) == 16
        assert [rec['unmask_count'] for rec in run.records] == list(trace.unmask_count[:,r])
        assert run.final_mask_count == 0
    with pytest.raises(IndexError):
        trace[5]

    # A single run matches the same chain drawn through sample()
    grid, single = sample(model, noisy[0], SamplerConfig(n_steps=16, seed=3))
    other, batch = sample_batch(model, noisy[:1], SamplerConfig(n_steps=16, seed=3))
    np.testing.assert_equal(grid, other[0])
    assert single.records == batch[0].records

def test_nfe_long_grid():
    model = UniformModel(4)
    grid, trace = sample(model, np.zeros((200,4), dtype=int),
                         SamplerConfig(n_steps=1024, seed=0))
    assert trace.nfe < 1024
    assert mask_count(grid, 4) == 0

def test_cache_soundness():
    table = JointTable.fixture()
    noisy = np.stack([table.noisy]*50)
    cached, tc = sample_batch(ExactOracle(table), noisy, SamplerConfig(n_steps=32, seed=2))
    fresh, tf = sample_batch(ExactOracle(table), noisy,
                             SamplerConfig(n_steps=32, seed=2, cache=False))
    np.testing.assert_equal(cached, fresh)
    np.testing.assert_equal(tc.unmask_count, tf.unmask_count)
    np.testing.assert_equal(tf.nfe, 32)
    assert np.all(tc.nfe <= tf.nfe)
    assert tc.nfe.sum() < tf.nfe.sum()

def test_model_errors():
    noisy = np.zeros((2,2), dtype=int)
    with pytest.raises(ModelOutputError, match='step 0') as err:
        sample(NaNModel(2), noisy, SamplerConfig(n_steps=4))
    assert err.value.step == 0
    with pytest.raises(NumericError, match='step 0'):
        sample(OverflowModel(2), noisy, SamplerConfig(n_steps=4))
    with pytest.raises(ConfigurationError):
        sample_batch(UniformModel(2), noisy, SamplerConfig())

def test_model_errors_carry_step():
    noisy = np.zeros((3,2), dtype=int)
    with pytest.raises(ConfigurationError, match='step 0: model failed') as err:
        sample(FailingModel(2, ConfigurationError), noisy, SamplerConfig(n_steps=8))
    assert err.value.step == 0

    model = FailingModel(2, CapacityError, fail_at=1)
    with pytest.raises(CapacityError, match=r'step \d+: model failed') as err:
        sample(model, noisy, SamplerConfig(n_steps=8, seed=1))
    assert err.value.step >= 1
    assert isinstance(err.value.__cause__, CapacityError)

def test_unmasked_rows_ignored():
    table = JointTable.fixture()
    noisy = np.stack([table.noisy]*200)
    for n_steps in (1, 4, 32):
        cfg = SamplerConfig(n_steps=n_steps, seed=n_steps)
        a, ta = sample_batch(ExactOracle(table), noisy, cfg)
        b, tb = sample_batch(ScrambledOracle(table), noisy, cfg)
        np.testing.assert_equal(a, b)
        np.testing.assert_equal(ta.unmask_count, tb.unmask_count)
    grid, trace = sample(ScrambledOracle(table), table.noisy, SamplerConfig(n_steps=8, seed=0))
    other, _ = sample(ExactOracle(table), table.noisy, SamplerConfig(n_steps=8, seed=0))
    np.testing.assert_equal(grid, other)

def test_sampler_tv_convergence():
    table = JointTable.fixture()
    oracle = ExactOracle(table)
    truth = table.conditional(table.noisy)
    n = 200000
    noisy = np.broadcast_to(table.noisy, (n,)+table.noisy.shape)
    tvs = []
    for n_steps in (1, 4, 16, 64, 256):
        grids, trace = sample_batch(oracle, noisy, SamplerConfig(n_steps=n_steps, seed=0))
        assert trace.nfe.max() <= min(n_steps, table.L*table.D + 1)
        tvs.append(tv_distance(histogram(grid_index(grids, table.K), table.size), truth))
    assert tvs[-1] < 0.02
    assert np.max(np.diff(tvs)) <= 0.01

def test_argmax_mode():
    model = FixedModel([0.1, 0.6, 0.3])
    grid, trace = sample(model, np.zeros((4,2), dtype=int),
                         SamplerConfig(n_steps=8, decode_mode='argmax'))
    np.testing.assert_equal(grid, 1)

def test_expected_distribution():
    model = FixedModel([0.25, 0.75])
    np.testing.assert_allclose(expected_distribution_one_step(model, [[0]]), [0.25, 0.75])

    model = FixedModel([0.5, 0.5])
    dist = expected_distribution_one_step(model, np.zeros((1,2), dtype=int))
    np.testing.assert_allclose(dist, 0.25)

    with pytest.raises(CapacityError):
        expected_distribution_one_step(model, np.zeros((30,1), dtype=int), capacity=2**20)

def test_one_step_histogram():
    table = JointTable.random(2, 1, 2, rng=4)
    oracle = ExactOracle(table)
    noisy = np.array([[1],[0]])
    expected = expected_distribution_one_step(oracle, noisy)
    n = 200000
    grids, trace = sample_batch(oracle, np.stack([noisy]*n), SamplerConfig(n_steps=1, seed=9))
    np.testing.assert_equal(trace.nfe, 1)
    empirical = histogram(grid_index(grids, 2), 4)
    assert tv_distance(empirical, expected) < 0.01

def test_trace_io(tmp_path):
    model = UniformModel(3)
    grid, trace = sample(model, np.zeros((3,2), dtype=int), SamplerConfig(n_steps=8))
    filename = str(tmp_path/'trace.jsonl')
    trace.write(filename)
    other = SampleTrace.read(filename)
    assert other.nfe == trace.nfe
    assert other.n_steps == 8
    assert (other.L, other.D) == (3, 2)
    assert other.final_mask_count == 0
    assert [dict(r) for r in other.records] == [dict(r) for r in trace.records]

if __name__ == "__main__":
    test_nfe_bound()
