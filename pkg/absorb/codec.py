#!/usr/bin/env python
"""
Residual vector quantization and a linear analysis-synthesis codec.

Latent sequences are (L, H) float arrays; code grids are (L, D) integer
arrays (see `absorb.grid`). The pseudo-codec replaces a neural audio
codec encoder/decoder with a truncated orthonormal DCT-II basis over
non-overlapping frames.
"""
import logging
from collections import OrderedDict as odict

import numpy as np
import scipy.fft
from scipy.spatial.distance import cdist

from absorb import __version__
from absorb.grid import check_grid, CODE_DTYPE
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.fileio import wav_read, wav_write
from absorb.utils.rng import get_rng
from absorb.utils.parser import setdefaults
from absorb.utils.errors import (ConfigurationError, InvalidInputError,
                                 DegenerateDataError, FormatError)

CODEBOOK_VERSION = 1
INDEX_CONVENTION = "codes are 0-indexed in [0, K-1]; the mask symbol is M = K"

class CodebookSet(object):
    """ D codebooks of K entries in an H-dimensional latent space. """

    def __init__(self, entries):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 3:
            msg = "Codebook entries must have shape (D, K, H); got %s"%(entries.shape,)
            raise ConfigurationError(msg)
        D,K,H = entries.shape
        if D < 1 or K < 1 or H < 1:
            msg = "Invalid codebook shape: D=%i, K=%i, H=%i"%(D,K,H)
            raise ConfigurationError(msg)
        if not np.all(np.isfinite(entries)):
            raise ConfigurationError("Codebook entries must be finite")
        for j in range(D):
            if len(np.unique(entries[j],axis=0)) != K:
                msg = "Codebook %i contains duplicate entries"%j
                raise ConfigurationError(msg)
        entries.flags.writeable = False
        self.entries = entries

    @property
    def D(self): return self.entries.shape[0]

    @property
    def K(self): return self.entries.shape[1]

    @property
    def H(self): return self.entries.shape[2]

    @property
    def shape(self): return self.entries.shape

    def truncate(self, D):
        """ The nested CodebookSet made of the first D codebooks. """
        return CodebookSet(self.entries[:D])

    def lookup(self, codes):
        """ Entries e(c^{i,j}; j) for a mask-free grid; shape (..., L, D, H). """
        codes = np.asarray(codes)
        depth = np.arange(codes.shape[-1])
        return self.entries[depth, codes]

    def to_dict(self):
        return odict([
            ('version', CODEBOOK_VERSION),
            ('absorb', __version__),
            ('index_convention', INDEX_CONVENTION),
            ('D', self.D), ('K', self.K), ('H', self.H),
            ('entries', self.entries.tolist()),
        ])

    def write(self, filename):
        logging.debug('Writing %s...'%filename)
        fileio.write_json(filename, self.to_dict())

    @classmethod
    def read(cls, filename):
        data = fileio.read_json(filename)
        for key in ('version','D','K','H','entries'):
            if key not in data:
                msg = "Codebook field '%s' missing in %s"%(key,filename)
                raise FormatError(msg)
        books = cls(data['entries'])
        if books.shape != (data['D'],data['K'],data['H']):
            msg = "Codebook field 'entries': shape %s does not match header %s"%(
                books.shape,(data['D'],data['K'],data['H']))
            raise FormatError(msg)
        return books

    def __repr__(self):
        return "CodebookSet(D=%i, K=%i, H=%i)"%self.shape

def _check_latents(latents, H=None):
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        msg = "Latents must have shape (L, H); got %s"%(latents.shape,)
        raise ConfigurationError(msg)
    if H is not None and latents.shape[1] != H:
        msg = "Latent dimension %i does not match codebook dimension %i"%(latents.shape[1],H)
        raise ConfigurationError(msg)
    if not np.all(np.isfinite(latents)):
        raise InvalidInputError("Latents must be finite")
    return latents

############################################################

def rvq_encode(latents, books, return_residual=False):
    """Residual vector quantization of a latent sequence.

    At each depth the code is the entry closest (squared Euclidean) to
    the running residual; ties go to the smallest index.

    Parameters:
    -----------
    latents : Latent sequence of shape (L, H)
    books   : CodebookSet
    return_residual : Also return the final residual r^{i,D}

    Returns:
    --------
    codes   : Integer grid of shape (L, D)
    """
    latents = _check_latents(latents, books.H)
    L = len(latents)
    codes = np.zeros((L,books.D), dtype=CODE_DTYPE)
    residual = latents.copy()
    for j in range(books.D):
        dist = cdist(residual, books.entries[j], 'sqeuclidean')
        # argmin returns the first minimum
        codes[:,j] = np.argmin(dist, axis=1)
        residual -= books.entries[j][codes[:,j]]
    if return_residual:
        return codes, residual
    return codes

def rvq_decode(codes, books):
    """Map codes back to latents by codebook lookup and summation.

    Parameters:
    -----------
    codes : Mask-free grid of shape (L, D)
    books : CodebookSet

    Returns:
    --------
    latents : Array of shape (L, H)
    """
    codes = check_grid(codes, books.K, allow_mask=False, name='codes')
    if codes.shape[-1] != books.D:
        msg = "Code depth %i does not match codebook depth %i"%(codes.shape[-1],books.D)
        raise ConfigurationError(msg)
    return books.lookup(codes).sum(axis=-2)

def kmeans(data, K, iterations=constants.KMEANS_ITERS, rng=None):
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are re-seeded from the point farthest from its
    assigned centroid.

    Parameters:
    -----------
    data       : Array of shape (N, H)
    K          : Number of clusters
    iterations : Maximum number of Lloyd iterations
    rng        : Random generator for seeding

    Returns:
    --------
    centroids, labels
    """
    rng = get_rng(rng)
    if K == 1:
        centroids = data.mean(axis=0, keepdims=True)
        return centroids, np.zeros(len(data), dtype=int)

    # k-means++ over distinct points
    points = np.unique(data, axis=0)
    first = rng.integers(len(points))
    centroids = [points[first]]
    d2 = cdist(points, points[first:first+1], 'sqeuclidean')[:,0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(points), p=d2/total)
        else:
            idx = rng.integers(len(points))
        centroids.append(points[idx])
        d2 = np.minimum(d2, cdist(points, points[idx:idx+1], 'sqeuclidean')[:,0])
    centroids = np.array(centroids)

    labels = None
    for it in range(iterations):
        dist = cdist(data, centroids, 'sqeuclidean')
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=K)
        for k in np.where(counts == 0)[0]:
            far = np.argmax(dist[np.arange(len(data)),new])
            logging.debug("Re-seeding empty cluster %i from point %i"%(k,far))
            centroids[k] = data[far]
            new[far] = k
            dist[far] = cdist(data[far:far+1], centroids, 'sqeuclidean')[0]
            counts = np.bincount(new, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, new, data)
        centroids = sums/counts[:,None]
        if labels is not None and np.array_equal(new, labels):
            logging.debug("k-means converged after %i iterations"%(it+1))
            break
        labels = new

    labels = np.argmin(cdist(data, centroids, 'sqeuclidean'), axis=1)
    return centroids, labels

def train_codebooks(latent_dataset, D=constants.DEPTH, K=constants.CODEBOOK_SIZE,
                    iterations=constants.KMEANS_ITERS, seed=0):
    """Fit RVQ codebooks by residual k-means, depth by depth.

    Parameters:
    -----------
    latent_dataset : Collection of (L, H) latent sequences
    D, K           : Number of codebooks and entries per codebook
    iterations     : Lloyd iterations per depth
    seed           : Seed for k-means++ initialization

    Returns:
    --------
    books          : CodebookSet
    """
    if isinstance(latent_dataset, np.ndarray) and latent_dataset.ndim == 2:
        latent_dataset = [latent_dataset]
    data = np.vstack([_check_latents(h) for h in latent_dataset])
    ndistinct = len(np.unique(data, axis=0))
    if ndistinct < K:
        msg = "Only %i distinct frames for K=%i codebook entries"%(ndistinct,K)
        raise DegenerateDataError(msg)

    rng = get_rng(seed)
    residual = data.copy()
    entries = []
    for j in range(D):
        if K > 1 and len(np.unique(residual, axis=0)) < K:
            msg = "Only %i distinct residuals at depth %i for K=%i"%(
                len(np.unique(residual,axis=0)),j,K)
            raise DegenerateDataError(msg)
        centroids, labels = kmeans(residual, K, iterations, rng)
        residual = residual - centroids[labels]
        mse = np.mean(np.sum(residual**2, axis=1))
        logging.info("Depth %i: residual mse = %.6g"%(j,mse))
        entries.append(centroids)
    return CodebookSet(np.array(entries))

############################################################

class PseudoCodecConfig(object):
    """ Frame geometry and analysis basis of the linear pseudo-codec. """
    _defaults = odict([
        ('frame_size', constants.FRAME_SIZE),
        ('latent_dim', constants.LATENT_DIM),
        ('sample_rate', constants.SAMPLE_RATE),
    ])

    def __init__(self, **kwargs):
        kwargs = setdefaults(kwargs, self._defaults)
        self.frame_size = int(kwargs['frame_size'])
        self.latent_dim = int(kwargs['latent_dim'])
        self.sample_rate = int(kwargs['sample_rate'])
        if not 1 <= self.latent_dim <= self.frame_size:
            msg = "latent_dim must be in [1, frame_size]; got %i"%self.latent_dim
            raise ConfigurationError(msg)
        self.basis = dct_basis(self.frame_size, self.latent_dim)

    @property
    def frame_rate(self):
        return self.sample_rate/float(self.frame_size)

    def to_dict(self):
        return odict([(k,getattr(self,k)) for k in self._defaults])

def dct_basis(frame_size, latent_dim):
    """ First `latent_dim` orthonormal DCT-II vectors as columns. """
    matrix = scipy.fft.dct(np.eye(frame_size), type=2, norm='ortho', axis=0)
    return matrix[:latent_dim].T.copy()

def analyze(waveform, cfg):
    """Project non-overlapping frames onto the analysis basis.

    The final partial frame is zero-padded.

    Parameters:
    -----------
    waveform : 1-D sample array
    cfg      : PseudoCodecConfig

    Returns:
    --------
    latents  : Array of shape (L, H) with L = ceil(len / frame_size)
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) == 0:
        raise InvalidInputError("Waveform must be a non-empty 1-D array")
    L = -(-len(waveform)//cfg.frame_size)
    frames = np.zeros(L*cfg.frame_size)
    frames[:len(waveform)] = waveform
    return frames.reshape(L,cfg.frame_size).dot(cfg.basis)

def synthesize(latents, cfg):
    """Inverse projection; returns L * frame_size samples.

    Callers truncate to the original waveform length.
    """
    latents = _check_latents(latents, cfg.latent_dim)
    return latents.dot(cfg.basis.T).ravel()

def latent_snr(reference, estimate):
    """ SNR (dB) of `estimate` against `reference` in latent space. """
    reference = np.asarray(reference)
    noise = np.sum((reference - estimate)**2)
    signal = np.sum(reference**2)
    if noise == 0: return np.inf
    return 10*np.log10(signal/noise)

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
