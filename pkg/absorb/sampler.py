#!/usr/bin/env python
"""
Reverse-time sampling of clean codes conditioned on noisy codes.

Sampling starts from the fully absorbed grid. On a uniform time grid each
step keeps unmasked codes and unmasks each masked position with probability
(t - s)/t, drawing the code from the model's conditional probabilities. The
model is re-evaluated only after a step that unmasked something; otherwise
the previous prediction is reused.

Randomness: a PCG64 generator seeded from SamplerConfig.seed. Each step
draws one uniform array of shape (N, L, D) for the unmask decisions and one
for the categorical draws, both in row-major (run, frame, depth) order and
regardless of the mask state, so traces are reproducible.
"""
import logging
from collections import OrderedDict as odict

import numpy as np

from absorb.grid import (full_mask, mask_value, check_grid,
                         CODE_DTYPE)
from absorb.models import check_probs
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.rng import get_rng
from absorb.utils.parser import setdefaults
from absorb.utils.errors import (AbsorbError, ConfigurationError, RangeError,
                                 CapacityError, ModelOutputError)

DECODE_MODES = ('categorical','argmax')

class SamplerConfig(object):
    _defaults = odict([
        ('n_steps', 64),
        ('decode_mode', 'categorical'),
        ('seed', 0),
        ('cache', True),
        ('T', constants.HORIZON),
    ])

    def __init__(self, **kwargs):
        kwargs = setdefaults(kwargs, self._defaults)
        self.n_steps = int(kwargs['n_steps'])
        self.decode_mode = str(kwargs['decode_mode']).lower()
        self.seed = kwargs['seed']
        self.cache = bool(kwargs['cache'])
        self.T = float(kwargs['T'])
        if self.n_steps < 1:
            msg = "n_steps must be >= 1; got %s"%self.n_steps
            raise ConfigurationError(msg)
        if self.decode_mode not in DECODE_MODES:
            msg = "Unrecognized decode_mode: %s"%self.decode_mode
            raise ConfigurationError(msg)

    def to_dict(self):
        return odict([(k,getattr(self,k)) for k in self._defaults])

class SampleTrace(object):
    """ Per-step record of a sampling run. """

    def __init__(self, n_steps, L, D):
        self.n_steps = n_steps
        self.L, self.D = L, D
        self.records = []
        self.final_mask_count = None

    def append(self, step, t, s, unmask_count, evaluated):
        self.records.append(odict([('step',int(step)),('t',float(t)),('s',float(s)),
                                   ('unmask_count',int(unmask_count)),
                                   ('evaluated',bool(evaluated))]))

    @property
    def nfe(self):
        return sum(r['evaluated'] for r in self.records)

    @property
    def unmasked(self):
        return sum(r['unmask_count'] for r in self.records)

    def summary(self):
        return odict([('nfe',self.nfe),('n_steps',self.n_steps),('L',self.L),
                      ('D',self.D),('final_mask_count',self.final_mask_count)])

    def write(self, filename):
        """ JSON lines: one record per step followed by the summary. """
        fileio.write_jsonl(filename, self.records + [self.summary()])

    @classmethod
    def read(cls, filename):
        lines = fileio.read_jsonl(filename)
        summary = lines[-1]
        self = cls(summary['n_steps'], summary['L'], summary['D'])
        self.records = [odict(sorted(r.items())) for r in lines[:-1]]
        self.final_mask_count = summary['final_mask_count']
        return self

class BatchTrace(object):
    """Per-step counts for a batch of sampling runs.

    Counts are stored as (n_steps, N) arrays; a per-run SampleTrace is
    built only when indexed.
    """

    def __init__(self, n_steps, N, L, D):
        self.n_steps = n_steps
        self.N, self.L, self.D = N, L, D
        self.times = np.zeros((n_steps,2))
        self.unmask_count = np.zeros((n_steps,N), dtype=np.int64)
        self.evaluated = np.zeros((n_steps,N), dtype=bool)
        self.final_mask_count = np.zeros(N, dtype=np.int64)

    def record(self, step, t, s, unmask_count, evaluated):
        self.times[step] = (t, s)
        self.unmask_count[step] = unmask_count
        self.evaluated[step] = evaluated

    @property
    def nfe(self):
        """ Model evaluations per run, shape (N,). """
        return self.evaluated.sum(axis=0)

    def __len__(self):
        return self.N

    def __getitem__(self, r):
        if not -self.N <= r < self.N:
            raise IndexError("Run %i out of range for %i runs"%(r,self.N))
        trace = SampleTrace(self.n_steps, self.L, self.D)
        for n,(t,s) in enumerate(self.times):
            trace.append(n, t, s, self.unmask_count[n,r], self.evaluated[n,r])
        trace.final_mask_count = int(self.final_mask_count[r])
        return trace

    def __iter__(self):
        for r in range(self.N):
            yield self[r]

def step_grid(n_steps, T=constants.HORIZON):
    """Uniform reverse-time grid.

    Returns:
    --------
    pairs : [(t_n, t_{n+1}) for n = 0..n_steps-1] with t_n = T (1 - n/n_steps)
            and the final s exactly 0
    """
    if n_steps < 1:
        msg = "n_steps must be >= 1; got %s"%n_steps
        raise ConfigurationError(msg)
    times = [T*(1. - n/float(n_steps)) for n in range(n_steps)] + [0.]
    return list(zip(times[:-1], times[1:]))

def categorical(probs, u):
    """ Inverse-CDF draw; `u` has the shape of probs without the last axis. """
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[...,-1:]
    return np.sum(u[...,None] >= cdf, axis=-1).astype(CODE_DTYPE)

def reverse_step(grid, probs, t, s, rng, K=None, decode_mode='categorical',
                 step=None, T=constants.HORIZON):
    """One reverse transition from time t to time s < t.

    Parameters:
    -----------
    grid  : Masked grid(s) of shape (..., L, D)
    probs : ConditionalProbs of shape (..., L, D, K)
    t, s  : Times with 0 <= s < t <= T
    rng   : Seed or numpy Generator
    K     : Codebook size (defaults to probs.shape[-1])
    decode_mode : 'categorical' or 'argmax'
    step  : Step index attached to model-output errors

    Returns:
    --------
    grid  : New masked grid; s == 0 leaves no masks
    """
    if not 0 <= s < t <= T:
        msg = "Reverse step requires 0 <= s < t <= T; got t=%s, s=%s"%(t,s)
        raise RangeError(msg)
    probs = np.asarray(probs, dtype=np.float64)
    if K is None: K = probs.shape[-1]
    grid = check_grid(grid, K, allow_mask=True)
    if probs.shape != grid.shape + (K,):
        msg = "Probabilities have shape %s; expected %s"%(probs.shape, grid.shape+(K,))
        raise ModelOutputError(msg, step)
    check_probs(probs, K, step=step)

    rng = get_rng(rng)
    u_unmask = rng.random(grid.shape)
    u_code = rng.random(grid.shape)

    if decode_mode == 'argmax':
        drawn = np.argmax(probs, axis=-1).astype(CODE_DTYPE)
    else:
        drawn = categorical(probs, u_code)
    p_unmask = 1. if s == 0 else (t - s)/t
    unmask = (grid == mask_value(K)) & (u_unmask < p_unmask)
    return np.where(unmask, drawn, grid).astype(CODE_DTYPE)

def _evaluate(model, masked, noisy, step):
    try:
        probs = model.predict(masked, noisy)
    except AbsorbError as e:
        if e.step is not None: raise
        if isinstance(e, ModelOutputError):
            raise ModelOutputError(str(e), step)
        err = type(e)('step %i: %s'%(step,e))
        err.step = step
        raise err from e
    return check_probs(probs, model.K, step=step)

def sample_batch(model, noisy, cfg, rng=None):
    """Run independent sampling chains for a batch of noisy grids.

    Parameters:
    -----------
    model : ConditionalModel
    noisy : Noisy grids of shape (N, L, D)
    cfg   : SamplerConfig
    rng   : Generator (default: seeded from cfg.seed)

    Returns:
    --------
    grids, trace : Mask-free grids (N, L, D) and the BatchTrace of all runs
    """
    K = model.K
    noisy = check_grid(noisy, K, allow_mask=False, name='noisy')
    if noisy.ndim != 3:
        msg = "Batched noisy grids must have shape (N, L, D); got %s"%(noisy.shape,)
        raise ConfigurationError(msg)
    N, L, D = noisy.shape
    rng = get_rng(cfg.seed if rng is None else rng)

    grid = np.broadcast_to(full_mask(L, D, K), noisy.shape).copy()
    trace = BatchTrace(cfg.n_steps, N, L, D)
    probs = np.empty(noisy.shape + (K,))
    changed = np.ones(N, dtype=bool)
    before = np.full(N, L*D, dtype=np.int64)

    for n,(t,s) in enumerate(step_grid(cfg.n_steps, cfg.T)):
        evaluate = changed if cfg.cache else np.ones(N, dtype=bool)
        if evaluate.any():
            idx = np.flatnonzero(evaluate)
            if len(idx) == N:
                probs[:] = _evaluate(model, grid, noisy, n)
            else:
                probs[idx] = _evaluate(model, grid[idx], noisy[idx], n)
        grid = reverse_step(grid, probs, t, s, rng, K, cfg.decode_mode, n, cfg.T)
        after = np.sum(grid == mask_value(K), axis=(1,2))
        changed = after < before
        trace.record(n, t, s, before - after, evaluate)
        logging.debug("step %i: t=%.6g s=%.6g unmasked=%i evaluated=%i"%(
            n, t, s, np.sum(before - after), np.sum(evaluate)))
        before = after

    trace.final_mask_count[:] = before
    return grid, trace

def sample(model, noisy, cfg, rng=None):
    """Generate a clean grid conditioned on one noisy grid.

    Returns:
    --------
    grid, trace : Mask-free grid (L, D) and its SampleTrace
    """
    noisy = check_grid(noisy, model.K, allow_mask=False, name='noisy')
    grids, trace = sample_batch(model, noisy[None], cfg, rng)
    return grids[0], trace[0]

def expected_distribution_one_step(model, noisy, capacity=constants.CAPACITY):
    """Exact distribution of a single-step sample.

    A single step unmasks every position independently from the model's
    all-masked prediction, so the law is the product of those rows.

    Returns:
    --------
    dist : Probability vector of length K^(L*D), indexed like
           `absorb.grid.enumerate_grids`
    """
    K = model.K
    noisy = check_grid(noisy, K, allow_mask=False, name='noisy')
    L, D = noisy.shape
    if float(K)**(L*D) > capacity:
        msg = "Cannot enumerate %i^%i grids (capacity %i)"%(K,L*D,capacity)
        raise CapacityError(msg)
    rows = check_probs(model.predict(full_mask(L, D, K), noisy), K).reshape(-1, K)
    dist = np.ones(1)
    for row in rows:
        dist = np.outer(dist, row).ravel()
    return dist
