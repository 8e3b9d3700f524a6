#!/usr/bin/env python
"""
Conditional diffusion cross-entropy (DCE) training.

The objective weights the cross-entropy at absorbed positions by 1/lam so
that its expectation over lam ~ U[lambda_min, 1] tracks the ELBO. Losses
are reported per position (divided by L*D); the optimizer consumes the
same normalized loss.

Paired training data is synthetic: clean latents follow an order-1
autoregressive Gaussian process, noise is white Gaussian at a latent-domain
SNR, and both are encoded with the same codebooks.
"""
import logging
from collections import OrderedDict as odict

import numpy as np

from absorb import __version__
from absorb.codec import rvq_encode
from absorb.diffusion import forward_corrupt
from absorb.rqdit import AdamState, optimizer_step
from absorb.grid import check_grid, check_shapes, mask_value, CODE_DTYPE
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.rng import get_rng, spawn_seeds
from absorb.utils.parser import setdefaults
from absorb.utils.errors import (ConfigurationError, RangeError, TrainingError,
                                 FormatError, InvalidInputError)

NDECILES = 10

class DCEConfig(object):
    """ Optimization settings for DCE training. """
    _defaults = odict([
        ('lambda_min', constants.LAMBDA_MIN),
        ('batch_size', constants.BATCH_SIZE),
        ('segment', constants.SEGMENT),
        ('steps', 1000),
        ('lr', constants.LEARNING_RATE),
        ('clip_norm', constants.CLIP_NORM),
        ('weight_decay', constants.WEIGHT_DECAY),
        ('seed', 0),
        ('log_every', 100),
    ])

    def __init__(self, **kwargs):
        kwargs = setdefaults(kwargs, self._defaults)
        for k in self._defaults:
            setattr(self, k, kwargs[k])
        self.lambda_min = float(self.lambda_min)
        self.batch_size = int(self.batch_size)
        self.steps = int(self.steps)
        self.lr = float(self.lr)
        if not 0 < self.lambda_min < 1:
            msg = "lambda_min must be in (0, 1); got %s"%self.lambda_min
            raise ConfigurationError(msg)
        if self.batch_size < 1:
            msg = "batch_size must be >= 1; got %s"%self.batch_size
            raise ConfigurationError(msg)
        if self.lr < 0:
            msg = "Learning rate must be non-negative; got %s"%self.lr
            raise ConfigurationError(msg)

    def to_dict(self):
        return odict([(k,getattr(self,k)) for k in self._defaults])

class DCEResult(object):
    """Value and logit gradient of the conditional DCE on a batch.

    Attributes:
    -----------
    loss         : Batch mean of the per-position normalized DCE
    unnormalized : Batch mean without the 1/(L*D) factor
    per_example  : Normalized DCE per batch element
    dlogits      : d(loss)/d(logits), zero at unmasked positions
    inf_events   : Index tuples (batch, frame, depth) where the clean
                   code had probability zero
    n_masked     : Number of masked positions per batch element
    """
    def __init__(self, loss, unnormalized, per_example, dlogits, inf_events, n_masked):
        self.loss = loss
        self.unnormalized = unnormalized
        self.per_example = per_example
        self.dlogits = dlogits
        self.inf_events = inf_events
        self.n_masked = n_masked

def dce_loss(probs, clean, masked, lam, K=None):
    """Conditional DCE: (1/lam) sum_masked -log p[clean] / (L*D).

    Parameters:
    -----------
    probs  : ConditionalProbs of shape ([N,] L, D, K)
    clean  : Clean grid(s) of shape ([N,] L, D)
    masked : The corrupted clean grid(s); mask entries equal K
    lam    : Absorption probability in (0, 1], scalar or one per example
    K      : Codebook size (defaults to probs.shape[-1])

    Returns:
    --------
    result : DCEResult
    """
    probs = np.asarray(probs, dtype=np.float64)
    if K is None: K = probs.shape[-1]
    check_shapes(clean, masked, ('clean','masked'))
    clean = check_grid(clean, K, allow_mask=False, name='clean')
    masked = check_grid(masked, K, allow_mask=True, name='masked')
    if probs.shape != clean.shape + (K,):
        msg = "Probabilities have shape %s; expected %s"%(probs.shape, clean.shape+(K,))
        raise ConfigurationError(msg)

    single = clean.ndim == 2
    if single:
        probs, clean, masked = probs[None], clean[None], masked[None]
    N, L, D = clean.shape
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (N,))
    if np.any(lam <= 0) or np.any(lam > 1):
        msg = "lam must be in (0, 1]; got %s"%lam
        raise RangeError(msg)

    sel = (masked == mask_value(K))
    ptrue = np.take_along_axis(probs, clean[...,None], axis=-1)[...,0]
    with np.errstate(divide='ignore'):
        nll = np.where(sel, -np.log(np.where(sel, ptrue, 1.)), 0.)
    inf_events = [tuple(int(i) for i in idx) for idx in np.argwhere(sel & (ptrue <= 0))]
    if inf_events:
        logging.warning("Clean code has zero probability at %i masked position(s); first %s"%(
            len(inf_events), inf_events[0]))

    weight = 1./lam
    unnorm = weight*nll.reshape(N,-1).sum(axis=1)
    per_example = unnorm/(L*D)

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, clean[...,None], 1., axis=-1)
    scale = (weight/(L*D)/N)[:,None,None,None]
    dlogits = np.where(sel[...,None], scale*(probs - onehot), 0.)

    if single: dlogits = dlogits[0]
    return DCEResult(float(per_example.mean()), float(unnorm.mean()), per_example,
                     dlogits, inf_events, sel.reshape(N,-1).sum(axis=1))

def lambda_decile(lam, lambda_min):
    """ Index of the equal-width bin of [lambda_min, 1] containing lam. """
    frac = (np.asarray(lam) - lambda_min)/(1. - lambda_min)
    return np.clip((frac*NDECILES).astype(int), 0, NDECILES-1)

def train_epoch(model, dataset, cfg, rng, state=None, n_batches=None, step0=0):
    """Run DCE training batches over a paired dataset.

    Parameters:
    -----------
    model     : ConditionalModel (parameters updated in place)
    dataset   : PairedCodeDataset
    cfg       : DCEConfig
    rng       : Seed or numpy Generator
    state     : AdamState carried between epochs (created if None)
    n_batches : Number of batches (default: one pass over the dataset)
    step0     : Global step index of the first batch

    Returns:
    --------
    metrics   : dict with 'mean_loss', 'decile_loss', 'records', 'state'
    """
    if len(dataset) == 0:
        raise InvalidInputError("Training dataset is empty")
    rng = get_rng(rng)
    if n_batches is None:
        n_batches = -(-len(dataset)//cfg.batch_size)
    if state is None and model.params:
        state = AdamState(model.params)

    total, count = 0., 0
    dsum, dcount = np.zeros(NDECILES), np.zeros(NDECILES, dtype=int)
    records = []
    order = rng.permutation(len(dataset))
    pos = 0
    for b in range(n_batches):
        step = step0 + b
        if pos + cfg.batch_size > len(order):
            order = np.concatenate([order[pos:], rng.permutation(len(dataset))])
            pos = 0
        idx = order[pos:pos+cfg.batch_size]
        pos += cfg.batch_size
        clean, noisy = dataset.clean[idx], dataset.noisy[idx]

        lam = rng.uniform(cfg.lambda_min, 1., size=len(idx))
        masked = forward_corrupt(clean, lam, rng, K=dataset.K)
        probs = model.forward(masked, noisy)
        result = dce_loss(probs, clean, masked, lam, K=dataset.K)
        if np.isnan(result.loss):
            diagnostics = odict([('step',step),('indices',idx.tolist()),
                                 ('lambda',lam.tolist()),
                                 ('n_masked',result.n_masked.tolist())])
            msg = "NaN loss at step %i"%step
            raise TrainingError(msg, diagnostics)

        grad_norm = 0.
        if model.params:
            grads = model.backward(result.dlogits)
            grad_norm = optimizer_step(model.params, grads, state, cfg.lr,
                                       cfg.weight_decay, cfg.clip_norm)

        deciles = lambda_decile(lam, cfg.lambda_min)
        record = odict([('step',step),('loss',result.loss),('lr',cfg.lr),
                        ('grad_norm',grad_norm)])
        for d in range(NDECILES):
            sel = deciles == d
            value = result.per_example[sel].mean() if sel.any() else np.nan
            record['lambda_d%i'%d] = value
            dsum[d] += result.per_example[sel].sum()
            dcount[d] += sel.sum()
        records.append(record)

        total += result.loss
        count += 1
        if cfg.log_every and step % cfg.log_every == 0:
            logging.info("step %i: loss %.5f (running %.5f), grad norm %.3g"%(
                step, result.loss, total/count, grad_norm))

    with np.errstate(invalid='ignore'):
        decile_loss = dsum/dcount
    return dict(mean_loss=total/max(count,1), decile_loss=decile_loss,
                records=records, state=state)

def eval_dce(model, dataset, cfg, n_lambda, rng):
    """Stratified Monte Carlo estimate of the DCE on a dataset.

    Every example is corrupted once at each of the `n_lambda` midpoints of
    equal bins over [lambda_min, 1].

    Returns:
    --------
    dce : Mean normalized DCE over examples and lambda strata
    """
    if n_lambda < 1:
        msg = "n_lambda must be >= 1; got %s"%n_lambda
        raise ConfigurationError(msg)
    rng = get_rng(rng)
    width = (1. - cfg.lambda_min)/n_lambda
    lams = cfg.lambda_min + width*(np.arange(n_lambda) + 0.5)
    total, count = 0., 0
    for start in range(0, len(dataset), cfg.batch_size):
        clean = dataset.clean[start:start+cfg.batch_size]
        noisy = dataset.noisy[start:start+cfg.batch_size]
        for lam in lams:
            masked = forward_corrupt(clean, lam, rng, K=dataset.K)
            probs = model.predict(masked, noisy)
            result = dce_loss(probs, clean, masked, lam, K=dataset.K)
            total += result.per_example.sum()
            count += len(clean)
    return total/count

def write_metrics(filename, records):
    """ Per-step metrics CSV (step, loss, lr, grad_norm, lambda deciles). """
    logging.debug('Writing %s...'%filename)
    fileio.rec2csv(filename, records)

############################################################
# Paired data

class GeneratorConfig(object):
    """ Synthetic clean/noisy latent generator. """
    _defaults = odict([
        ('n_frames', constants.SEGMENT),
        ('ar_coef', constants.AR_COEF),
        ('snr_min', constants.SNR_RANGE[0]),
        ('snr_max', constants.SNR_RANGE[1]),
        ('snr_db', None),
    ])

    def __init__(self, **kwargs):
        kwargs = setdefaults(kwargs, self._defaults)
        self.n_frames = int(kwargs['n_frames'])
        self.ar_coef = float(kwargs['ar_coef'])
        self.snr_min = float(kwargs['snr_min'])
        self.snr_max = float(kwargs['snr_max'])
        self.snr_db = None if kwargs['snr_db'] is None else float(kwargs['snr_db'])
        if not -1 < self.ar_coef < 1:
            msg = "ar_coef must be in (-1, 1); got %s"%self.ar_coef
            raise ConfigurationError(msg)
        if self.n_frames < 1:
            msg = "n_frames must be >= 1; got %s"%self.n_frames
            raise ConfigurationError(msg)

    def to_dict(self):
        return odict([(k,getattr(self,k)) for k in self._defaults])

def ar_latents(n_frames, H, ar_coef, rng):
    """ Unit-variance stationary AR(1) Gaussian sequence of shape (L, H). """
    rng = get_rng(rng)
    innov = rng.normal(size=(n_frames, H))
    out = np.empty((n_frames, H))
    out[0] = innov[0]
    scale = np.sqrt(1 - ar_coef**2)
    for i in range(1, n_frames):
        out[i] = ar_coef*out[i-1] + scale*innov[i]
    return out

def generate_pair(gen_cfg, H, rng):
    """Draw one (clean, noisy, snr_db) latent triple.

    The noise power is set from the empirical clean power so the latent
    SNR equals snr_db.
    """
    rng = get_rng(rng)
    clean = ar_latents(gen_cfg.n_frames, H, gen_cfg.ar_coef, rng)
    if gen_cfg.snr_db is None:
        snr = rng.uniform(gen_cfg.snr_min, gen_cfg.snr_max)
    else:
        snr = gen_cfg.snr_db
    power = np.mean(clean**2)
    sigma = np.sqrt(power/10**(snr/10.))
    noisy = clean + sigma*rng.normal(size=clean.shape)
    return clean, noisy, snr

def _base_seed(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63))
    return rng

def generate_latents(gen_cfg, H, n_pairs, rng):
    """ Clean and noisy latent sequences (per-pair seeded). """
    seeds = spawn_seeds(_base_seed(rng), n_pairs)
    clean, noisy, snr = zip(*[generate_pair(gen_cfg, H, s) for s in seeds])
    return np.array(clean), np.array(noisy), np.array(snr), seeds

def generate_paired_dataset(gen_cfg, books, n_pairs, rng):
    """Encode synthetic clean/noisy latent pairs with shared codebooks.

    Parameters:
    -----------
    gen_cfg : GeneratorConfig
    books   : CodebookSet used for both clean and noisy latents
    n_pairs : Number of pairs (>= 1)
    rng     : Seed or numpy Generator; pair i uses the i-th spawned seed

    Returns:
    --------
    dataset : PairedCodeDataset
    """
    if n_pairs < 1:
        msg = "n_pairs must be >= 1; got %s"%n_pairs
        raise ConfigurationError(msg)
    clean, noisy, snr, seeds = generate_latents(gen_cfg, books.H, n_pairs, rng)
    ccodes = np.array([rvq_encode(c, books) for c in clean])
    ncodes = np.array([rvq_encode(n, books) for n in noisy])
    metadata = odict([
        ('generator', gen_cfg.to_dict()),
        ('snr_domain', 'latent'),
        ('snr_db', snr.tolist()),
        ('seeds', seeds),
    ])
    logging.debug("Generated %i pairs (L=%i, D=%i)"%(n_pairs,gen_cfg.n_frames,books.D))
    return PairedCodeDataset(ccodes, ncodes, books.K, metadata)

class PairedCodeDataset(object):
    """ Clean and noisy code grids of equal shape (N, L, D). """

    def __init__(self, clean, noisy, K, metadata=None):
        clean = np.asarray(clean, dtype=CODE_DTYPE)
        noisy = np.asarray(noisy, dtype=CODE_DTYPE)
        if clean.ndim != 3:
            msg = "Dataset grids must have shape (N, L, D); got %s"%(clean.shape,)
            raise ConfigurationError(msg)
        check_shapes(clean, noisy, ('clean','noisy'))
        self.K = int(K)
        self.clean = check_grid(clean, self.K, allow_mask=False, name='clean')
        self.noisy = check_grid(noisy, self.K, allow_mask=False, name='noisy')
        self.metadata = odict(metadata or {})

    def __len__(self):
        return len(self.clean)

    def __getitem__(self, i):
        return self.clean[i], self.noisy[i]

    @property
    def L(self): return self.clean.shape[1]

    @property
    def D(self): return self.clean.shape[2]

    @property
    def snr_db(self):
        return np.array(self.metadata.get('snr_db', [np.nan]*len(self)), dtype=float)

    def subset(self, indices):
        indices = np.asarray(indices)
        metadata = odict(self.metadata)
        for key in ('snr_db','seeds'):
            if key in metadata:
                metadata[key] = [metadata[key][i] for i in indices]
        return self.__class__(self.clean[indices], self.noisy[indices], self.K, metadata)

    def split(self, n_train):
        """ First `n_train` pairs and the remainder. """
        idx = np.arange(len(self))
        return self.subset(idx[:n_train]), self.subset(idx[n_train:])

    def agreement(self):
        """ Fraction of positions where clean and noisy codes agree. """
        return float(np.mean(self.clean == self.noisy))

    def write(self, filename):
        """ Little-endian uint16 payload with a JSON manifest. """
        if self.K > np.iinfo(np.uint16).max:
            msg = "K=%i does not fit the 16-bit code payload"%self.K
            raise ConfigurationError(msg)
        manifest = odict([('absorb',__version__),('K',self.K),('L',self.L),
                          ('D',self.D),('n_pairs',len(self))])
        manifest.update(self.metadata)
        arrays = odict([('clean',self.clean),('noisy',self.noisy)])
        logging.debug('Writing %s...'%filename)
        return fileio.write_payload(filename, arrays, '<u2', manifest)

    @classmethod
    def read(cls, filename):
        arrays, manifest = fileio.read_payload(filename)
        if 'K' not in manifest:
            raise FormatError("Dataset field 'K' missing")
        for key in ('clean','noisy'):
            if key not in arrays:
                msg = "Dataset tensor '%s' missing"%key
                raise FormatError(msg)
        metadata = odict([(k,v) for k,v in manifest.items()
                          if k not in ('absorb','K','L','D','n_pairs','dtype','payload','tensors')])
        return cls(arrays['clean'].astype(CODE_DTYPE), arrays['noisy'].astype(CODE_DTYPE),
                   manifest['K'], metadata)

def chance_agreement(dataset):
    """Agreement rate expected if clean and noisy codes were independent.

    Computed per depth from the empirical code histograms.
    """
    rates = []
    for j in range(dataset.D):
        pc = np.bincount(dataset.clean[...,j].ravel(), minlength=dataset.K)
        pn = np.bincount(dataset.noisy[...,j].ravel(), minlength=dataset.K)
        rates.append(np.sum(pc/pc.sum()*pn/pn.sum()))
    return float(np.mean(rates))

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
