#!/usr/bin/env python
"""
Conditional denoisers q(c^{i,j} | c_lambda, c_noisy).

A model maps a (partially) masked clean grid and a noisy grid to
probabilities over the K clean codes at every (frame, depth) position.
Grids may carry a leading batch axis; outputs then have shape
(N, L, D, K). Rows at unmasked positions are valid probabilities but
carry no meaning; the sampler ignores them.
"""
import logging
from collections import OrderedDict as odict

import numpy as np
from scipy.special import softmax

from absorb.grid import (check_grid, check_shapes, enumerate_grids,
                         grid_index, mask_value, CODE_DTYPE)
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.rng import get_rng
from absorb.utils.errors import (ConfigurationError, ModelOutputError,
                                 CapacityError, TrainingError, FormatError)

def check_probs(probs, K, atol=1e-6, step=None):
    """Validate ConditionalProbs rows (non-negative, finite, sum to 1).

    Raises:
    -------
    ModelOutputError
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != K:
        msg = "Probability rows have length %i; expected K=%i"%(probs.shape[-1],K)
        raise ModelOutputError(msg, step)
    if not np.all(np.isfinite(probs)):
        raise ModelOutputError("Probability rows contain non-finite values", step)
    if np.any(probs < 0):
        raise ModelOutputError("Probability rows contain negative values", step)
    err = np.abs(probs.sum(axis=-1) - 1)
    if err.size and err.max() > atol:
        idx = np.unravel_index(np.argmax(err), err.shape)
        msg = "Probability row %s sums to %.9g"%(idx,probs[idx].sum())
        raise ModelOutputError(msg, step)
    return probs

class ConditionalModel(object):
    """Base class for conditional denoisers.

    Trainable subclasses expose `params` (ordered name -> array) and
    implement `forward` (caching what `backward` needs) and `backward`
    (gradient of the loss w.r.t. the output logits -> parameter
    gradients).
    """
    name = 'model'

    def __init__(self, K, D=None, L=None):
        self.K = int(K)
        self.D = D
        self.L = L
        self.params = odict()
        self.cache = None

    def _inputs(self, masked, noisy):
        check_shapes(masked, noisy)
        masked = check_grid(masked, self.K, allow_mask=True, name='masked')
        noisy = check_grid(noisy, self.K, allow_mask=False, name='noisy')
        if self.D is not None and masked.shape[-1] != self.D:
            msg = "Grid depth %i does not match model depth %i"%(masked.shape[-1],self.D)
            raise ConfigurationError(msg)
        if self.L is not None and masked.shape[-2] != self.L:
            msg = "Grid length %i does not match model length %i"%(masked.shape[-2],self.L)
            raise ConfigurationError(msg)
        return masked, noisy

    def logits(self, masked, noisy):
        raise NotImplementedError

    def forward(self, masked, noisy):
        """ Probabilities over clean codes; retains the cache for backward. """
        return softmax(self.logits(masked, noisy), axis=-1)

    def predict(self, masked, noisy):
        probs = self.forward(masked, noisy)
        self.cache = None
        return probs

    def backward(self, dlogits):
        return odict()

    def zero_grads(self):
        return odict([(k,np.zeros_like(v)) for k,v in self.params.items()])

class UniformModel(ConditionalModel):
    """ Predicts 1/K everywhere. """
    name = 'uniform'

    def logits(self, masked, noisy):
        masked, noisy = self._inputs(masked, noisy)
        return np.zeros(masked.shape + (self.K,))

class FixedModel(ConditionalModel):
    """ Predicts the same probability row at every position. """
    name = 'fixed'

    def __init__(self, row):
        row = np.asarray(row, dtype=np.float64)
        super(FixedModel,self).__init__(len(row))
        self.row = check_probs(row, len(row))

    def forward(self, masked, noisy):
        masked, noisy = self._inputs(masked, noisy)
        return np.broadcast_to(self.row, masked.shape+(self.K,)).copy()

############################################################

class JointTable(object):
    """Explicit joint distribution over (clean grid, noisy grid) pairs.

    `table[a, b]` is the probability of the clean grid with flat index a
    and the noisy grid with flat index b (row-major, see
    `absorb.grid.enumerate_grids`).
    """

    def __init__(self, table, L, D, K, capacity=constants.CAPACITY):
        self.L, self.D, self.K = int(L), int(D), int(K)
        n = K**(L*D)
        if float(n)**2 > capacity:
            msg = "Joint table with %i^2 entries exceeds capacity %i"%(n,capacity)
            raise CapacityError(msg)
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (n,n):
            msg = "Joint table shape %s; expected %s"%(table.shape,(n,n))
            raise ConfigurationError(msg)
        if np.any(table < 0) or abs(table.sum() - 1) > 1e-12:
            msg = "Joint table must be non-negative and sum to 1 (sum=%.15g)"%table.sum()
            raise ConfigurationError(msg)
        self.table = table
        self.grids = enumerate_grids(L, D, K)
        self.noisy = None

    @property
    def n(self):
        return self.L*self.D

    @property
    def size(self):
        return len(self.grids)

    @classmethod
    def from_factors(cls, prior, channel, L, D, K):
        """ Table from a clean-grid prior and a per-position channel. """
        grids = enumerate_grids(L, D, K).reshape(-1, L*D)
        channel = np.asarray(channel, dtype=np.float64)
        # p(noisy | clean) = prod over positions channel[c_i, n_i]
        like = np.ones((len(grids),len(grids)))
        for i in range(L*D):
            like *= channel[grids[:,i][:,None], grids[:,i][None,:]]
        table = np.asarray(prior)[:,None]*like
        return cls(table/table.sum(), L, D, K)

    @classmethod
    def from_recipe(cls, recipe):
        """Enumerate the table of a chain-structured clean prior.

        c[0,0] ~ initial, c[i,0] | c[i-1,0] ~ frame_transition,
        c[i,j] | c[i,j-1] ~ depth_transition, noisy ~ channel[clean].
        """
        L, D, K = recipe['L'], recipe['D'], recipe['K']
        initial = np.asarray(recipe['initial'], dtype=np.float64)
        frame = np.asarray(recipe['frame_transition'], dtype=np.float64)
        depth = np.asarray(recipe['depth_transition'], dtype=np.float64)
        grids = enumerate_grids(L, D, K)
        prior = initial[grids[:,0,0]]
        for i in range(1, L):
            prior = prior*frame[grids[:,i-1,0], grids[:,i,0]]
        for j in range(1, D):
            prior = prior*np.prod(depth[grids[:,:,j-1], grids[:,:,j]], axis=1)
        self = cls.from_factors(prior, recipe['channel'], L, D, K)
        if 'noisy' in recipe:
            self.noisy = np.array(recipe['noisy'], dtype=CODE_DTYPE)
        return self

    @classmethod
    def fixture(cls, filename='joint_fixture.json'):
        """ The committed reference instance (L=2, D=2, K=3). """
        return cls.from_recipe(fileio.read_json(fileio.get_datafile(filename)))

    @classmethod
    def random(cls, L, D, K, rng=None, concentration=1.0):
        rng = get_rng(rng)
        n = K**(L*D)
        table = rng.dirichlet(concentration*np.ones(n*n)).reshape(n,n)
        return cls(table, L, D, K)

    @classmethod
    def identity_channel(cls, L, D, K, prior=None):
        """ Clean and noisy grids are always equal. """
        n = K**(L*D)
        prior = np.ones(n)/n if prior is None else np.asarray(prior)
        return cls(np.diag(prior), L, D, K)

    @classmethod
    def independent_uniform(cls, L, D, K):
        n = K**(L*D)
        return cls(np.ones((n,n))/float(n*n), L, D, K)

    def conditional(self, noisy):
        """ p(clean grid | noisy grid) as a vector over all clean grids. """
        col = self.table[:, grid_index(noisy, self.K)]
        total = col.sum()
        if total == 0:
            msg = "Noisy grid has zero probability under the table"
            raise ConfigurationError(msg)
        return col/total

    def sample(self, n, rng=None):
        """ Draw n (clean, noisy) grid pairs. """
        rng = get_rng(rng)
        flat = rng.choice(self.table.size, size=n, p=self.table.ravel())
        clean, noisy = np.divmod(flat, self.size)
        return self.grids[clean], self.grids[noisy]

    def to_dict(self):
        return odict([('L',self.L),('D',self.D),('K',self.K),
                      ('table',self.table.tolist())])

    def write(self, filename):
        fileio.write_json(filename, self.to_dict())

    @classmethod
    def read(cls, filename):
        data = fileio.read_json(filename)
        if 'table' not in data:
            if 'initial' in data: return cls.from_recipe(data)
            msg = "Joint table field 'table' missing in %s"%filename
            raise FormatError(msg)
        return cls(data['table'], data['L'], data['D'], data['K'])

def exact_posterior(table, masked, noisy, diagnostics=None):
    """Enumerated p(c^{i,j} = k | unmasked clean codes, noisy grid).

    Parameters:
    -----------
    table       : JointTable
    masked      : Masked grid of shape (L, D)
    noisy       : Noisy grid of shape (L, D)
    diagnostics : Optional dict; 'zero_mass' counts conditioning events
                  with zero probability (answered with uniform rows)

    Returns:
    --------
    probs       : Array of shape (L, D, K)
    """
    K = table.K
    masked = check_grid(masked, K, allow_mask=True, name='masked')
    noisy = check_grid(noisy, K, allow_mask=False, name='noisy')
    if masked.shape != (table.L,table.D):
        msg = "Grid shape %s does not match table (%i, %i)"%(masked.shape,table.L,table.D)
        raise ConfigurationError(msg)
    check_shapes(masked, noisy)

    grids = table.grids.reshape(table.size, -1)
    m = masked.ravel()
    observed = m != mask_value(K)
    weight = table.table[:, grid_index(noisy, K)].copy()
    weight *= np.all(grids[:,observed] == m[observed], axis=1)
    total = weight.sum()
    if total <= 0:
        if diagnostics is not None:
            diagnostics['zero_mass'] = diagnostics.get('zero_mass',0) + 1
        logging.debug("Zero conditioning mass; returning uniform rows")
        return np.ones((table.L,table.D,K))/K

    probs = np.empty((table.n,K))
    for i in range(table.n):
        probs[i] = np.bincount(grids[:,i], weights=weight, minlength=K)/total
    return probs.reshape(table.L,table.D,K)

class ExactOracle(ConditionalModel):
    """ The true posterior of a JointTable, memoized per configuration. """
    name = 'oracle'

    def __init__(self, table):
        super(ExactOracle,self).__init__(table.K, table.D, table.L)
        self.table = table
        self.memo = dict()
        self.diagnostics = odict(zero_mass=0)

    def forward(self, masked, noisy):
        masked, noisy = self._inputs(masked, noisy)
        shape = masked.shape
        masked = masked.reshape((-1,)+shape[-2:])
        noisy = noisy.reshape((-1,)+shape[-2:])
        keys = np.stack([grid_index(noisy, self.K), grid_index(masked, self.K+1)], axis=1)
        uniq, first, inverse = np.unique(keys, axis=0, return_index=True,
                                         return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        rows = np.empty((len(uniq),)+shape[-2:]+(self.K,))
        for u,key in enumerate(map(tuple,uniq)):
            if key not in self.memo:
                self.memo[key] = exact_posterior(self.table, masked[first[u]],
                                                 noisy[first[u]], self.diagnostics)
            rows[u] = self.memo[key]
        out = rows[inverse]
        return out.reshape(shape + (self.K,))

############################################################

class TabularModel(ConditionalModel):
    """Logit table indexed by (noisy grid, masked grid, position).

    The table covers every configuration at the instance's (L, D, K)
    and is initialized to zero logits (uniform rows).
    """
    name = 'tabular'

    def __init__(self, L, D, K, capacity=constants.TABULAR_CAPACITY):
        super(TabularModel,self).__init__(K, D, L)
        n = L*D
        rows = float(K)**n * float(K+1)**n * n
        if rows > capacity:
            msg = "Tabular model needs %i rows (capacity %i)"%(rows,capacity)
            raise CapacityError(msg)
        self.params['logits'] = np.zeros((K**n,(K+1)**n,n,K))

    def _index(self, masked, noisy):
        shape = masked.shape
        nidx = grid_index(noisy.reshape((-1,)+shape[-2:]), self.K)
        midx = grid_index(masked.reshape((-1,)+shape[-2:]), self.K+1)
        return nidx, midx

    def logits(self, masked, noisy):
        masked, noisy = self._inputs(masked, noisy)
        nidx, midx = self._index(masked, noisy)
        self.cache = (nidx, midx, masked.shape)
        z = self.params['logits'][nidx, midx]
        return z.reshape(masked.shape + (self.K,))

    def backward(self, dlogits):
        if self.cache is None:
            raise ConfigurationError("backward called without a cached forward")
        nidx, midx, shape = self.cache
        grads = self.zero_grads()
        dz = np.asarray(dlogits).reshape((len(nidx),-1,self.K))
        np.add.at(grads['logits'], (nidx, midx), dz)
        return grads

    def to_dict(self):
        return odict([('L',self.L),('D',self.D),('K',self.K),
                      ('logits',self.params['logits'].tolist())])

    def write(self, filename):
        fileio.write_json(filename, self.to_dict())

    @classmethod
    def read(cls, filename):
        data = fileio.read_json(filename)
        self = cls(data['L'], data['D'], data['K'])
        logits = np.asarray(data['logits'], dtype=np.float64)
        if logits.shape != self.params['logits'].shape:
            msg = "Tabular field 'logits': shape %s"%(logits.shape,)
            raise FormatError(msg)
        self.params['logits'] = logits
        return self

def posterior_targets(table, model):
    """ Exact posterior rows for every (noisy, masked) configuration. """
    n = table.n
    masked_grids = enumerate_grids(table.L, table.D, table.K+1)
    targets = np.ones(model.params['logits'].shape)/table.K
    for b,noisy in enumerate(table.grids):
        if table.table[:,b].sum() == 0: continue
        for a,masked in enumerate(masked_grids):
            targets[b,a] = exact_posterior(table, masked, noisy).reshape(n,table.K)
    return targets, masked_grids.reshape(len(masked_grids),-1) == table.K

def tabular_train(model, data, steps, lr, seed=0, mode=None, cfg=None,
                  log_every=1000):
    """Fit a TabularModel by gradient descent on the conditional DCE.

    Parameters:
    -----------
    model : TabularModel
    data  : JointTable (exact expectations or sampled stream) or an
            iterable of (clean, noisy) batches
    steps : Number of updates
    lr    : Learning rate (> 0)
    seed  : Seed for the sample stream
    mode  : 'exact' (per-configuration expected gradient, JointTable only)
            or 'stream' (stochastic DCE gradients); default 'exact' for a
            JointTable
    cfg   : DCEConfig for the stream mode

    Returns:
    --------
    model, history : The trained model and the per-step loss
    """
    from absorb.training import DCEConfig, dce_loss
    from absorb.diffusion import forward_corrupt

    if not lr > 0:
        msg = "Learning rate must be positive; got %s"%lr
        raise ConfigurationError(msg)
    if mode is None:
        mode = 'exact' if isinstance(data, JointTable) else 'stream'
    history = []

    if mode == 'exact':
        targets, masked_pos = posterior_targets(data, model)
        active = masked_pos[None,:,:,None]
        z = model.params['logits']
        for step in range(steps):
            p = softmax(z, axis=-1)
            with np.errstate(divide='ignore', invalid='ignore'):
                ce = -np.where(targets > 0, targets*np.log(p), 0.).sum(-1)
            loss = np.mean(ce[np.broadcast_to(masked_pos[None], ce.shape)])
            if not np.isfinite(loss):
                raise TrainingError("Loss is %s at step %i"%(loss,step),
                                    dict(step=step))
            history.append(loss)
            z -= lr*np.where(active, p - targets, 0.)
            if log_every and step % log_every == 0:
                logging.info("step %i: expected cross-entropy %.6f"%(step,loss))
        return model, np.array(history)

    cfg = cfg or DCEConfig()
    rng = get_rng(seed)
    for step in range(steps):
        if isinstance(data, JointTable):
            clean, noisy = data.sample(cfg.batch_size, rng)
        else:
            clean, noisy = next(data)
        lam = rng.uniform(cfg.lambda_min, 1., size=len(clean))
        masked = forward_corrupt(clean, lam, rng, K=model.K)
        probs = model.forward(masked, noisy)
        result = dce_loss(probs, clean, masked, lam, K=model.K)
        if not np.isfinite(result.loss):
            raise TrainingError("Loss is %s at step %i"%(result.loss,step),
                                dict(step=step, lam=lam.tolist()))
        grads = model.backward(result.dlogits)
        model.params['logits'] -= lr*grads['logits']
        history.append(result.loss)
        if log_every and step % log_every == 0:
            logging.info("step %i: DCE %.6f"%(step,result.loss))
    return model, np.array(history)

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
