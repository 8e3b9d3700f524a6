"""
Code grids: L x D integer arrays of RVQ codes in {0..K-1} with the mask
symbol M = K.

Grids are plain integer numpy arrays; batched grids carry a leading
axis. The helpers here validate and index them.
"""
import numpy as np

from absorb.utils.errors import ConfigurationError, InvalidInputError, CapacityError
from absorb.utils.constants import CAPACITY

CODE_DTYPE = np.int64

def mask_value(K):
    """ The mask symbol for a codebook of size K (0-indexed codes). """
    return int(K)

def full_mask(L, D, K):
    """ The fully absorbed grid. """
    return np.full((L,D), mask_value(K), dtype=CODE_DTYPE)

def is_masked(grid, K):
    return np.asarray(grid) == mask_value(K)

def mask_count(grid, K):
    return int(np.count_nonzero(is_masked(grid, K)))

def check_grid(grid, K, allow_mask=False, name='grid'):
    """Validate a code grid and return it as an integer array.

    Parameters:
    -----------
    grid       : Array-like of shape (..., L, D)
    K          : Codebook size
    allow_mask : Whether the mask value K is permitted

    Returns:
    --------
    grid       : The validated integer array
    """
    grid = np.asarray(grid)
    if grid.ndim < 2:
        msg = "%s must have shape (L, D); got %s"%(name,grid.shape)
        raise ConfigurationError(msg)
    if not np.issubdtype(grid.dtype, np.integer):
        msg = "%s must be integer; got %s"%(name,grid.dtype)
        raise ConfigurationError(msg)
    upper = K if allow_mask else K - 1
    if grid.size and (grid.min() < 0 or grid.max() > upper):
        if not allow_mask and grid.max() == K:
            msg = "%s contains mask entries"%name
        else:
            msg = "%s entries outside [0, %i]"%(name,upper)
        raise InvalidInputError(msg)
    return grid.astype(CODE_DTYPE, copy=False)

def check_shapes(a, b, names=('masked','noisy')):
    if np.shape(a) != np.shape(b):
        msg = "Shape mismatch: %s %s vs %s %s"%(names[0],np.shape(a),names[1],np.shape(b))
        raise ConfigurationError(msg)

############################################################
# Enumeration helpers for oracle-scale instances

def enumerate_grids(L, D, K, capacity=CAPACITY):
    """All K^(L*D) grids in row-major lexicographic order.

    Returns:
    --------
    grids : Array of shape (K^(L*D), L, D)
    """
    n = L*D
    if float(K)**n > capacity:
        msg = "Cannot enumerate %i^%i grids (capacity %i)"%(K,n,capacity)
        raise CapacityError(msg)
    idx = np.arange(K**n)
    digits = (idx[:,None] // (K**np.arange(n-1,-1,-1))[None,:]) % K
    return digits.reshape(-1,L,D).astype(CODE_DTYPE)

def grid_index(grids, base):
    """Row-major flat index of grid(s) with digits in [0, base).

    Inverse of `enumerate_grids` when base == K.
    """
    grids = np.asarray(grids)
    n = grids.shape[-1]*grids.shape[-2]
    flat = grids.reshape(grids.shape[:-2]+(n,)).astype(np.int64)
    weights = base**np.arange(n-1,-1,-1, dtype=np.int64)
    return flat.dot(weights)
