#!/usr/bin/env python
"""
Continuous-time absorbing diffusion.

The forward process moves each code independently to the mask state M
with absorption probability lambda(t) = t/T. The exact oracles in this
module (forward-equation integrator, reverse rate matrix) are used for
validation at small K.
"""
import logging
from collections import OrderedDict as odict

import numpy as np

from absorb.grid import check_grid, mask_value, CODE_DTYPE
from absorb.utils import constants
from absorb.utils.rng import get_rng
from absorb.utils.errors import (ConfigurationError, RangeError, InvalidInputError,
                                 SingularityError)

class NoiseSchedule(object):
    """Log-linear noise schedule on [0, T].

    sigma(t) = 1/(T - t) so that lambda(t) = 1 - exp(-int_0^t sigma) = t/T.
    The same schedule is sometimes written sigma(t) = T/(T - t);
    the time normalization here is the one under which the reverse
    coefficient (t - s)/t equals (lambda_t - lambda_s)/lambda_t.
    """
    kind = 'loglinear'

    def __init__(self, T=constants.HORIZON):
        if not T > 0:
            msg = "Horizon must be positive; got %s"%T
            raise RangeError(msg)
        self.T = float(T)

    def check_time(self, t):
        if not (0 <= t <= self.T):
            msg = "Time %s outside [0, %s]"%(t,self.T)
            raise RangeError(msg)
        return float(t)

    def lambda_at(self, t):
        """ Absorption probability at time t. """
        return self.check_time(t)/self.T

    def sigma(self, t):
        """ Rate multiplier sigma(t); capped at the singular endpoint t = T. """
        t = self.check_time(t)
        remaining = self.T - t
        return min(1./remaining if remaining > 0 else np.inf, constants.SIGMA_MAX/self.T)

    def time_at(self, lam):
        """ Inverse of lambda_at. """
        if not 0 <= lam <= 1:
            msg = "Absorption probability %s outside [0, 1]"%lam
            raise RangeError(msg)
        return lam*self.T

    def to_dict(self):
        return odict([('kind',self.kind),('T',self.T)])

def lambda_at(sched, t):
    return sched.lambda_at(t)

def forward_corrupt(codes, lam, rng, K=None):
    """Independently replace each position by the mask with probability lam.

    Parameters:
    -----------
    codes : Mask-free grid of shape (..., L, D)
    lam   : Absorption probability in [0, 1]; scalar or one per leading index
    rng   : Seed or numpy Generator
    K     : Codebook size; the mask value is K (required)

    Returns:
    --------
    masked : Grid with mask entries equal to K
    """
    if K is None:
        msg = "Codebook size K is required to place the mask"
        raise ConfigurationError(msg)
    codes = check_grid(codes, K, allow_mask=False, name='codes')
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        msg = "Absorption probability outside [0, 1]: %s"%lam
        raise RangeError(msg)
    lam = lam.reshape(lam.shape + (1,)*(codes.ndim - lam.ndim))
    rng = get_rng(rng)
    u = rng.random(codes.shape)
    return np.where(u < lam, mask_value(K), codes).astype(CODE_DTYPE)

def absorbing_rate_matrix(K):
    """The (K+1)x(K+1) absorbing rate matrix.

    Columns index the source state, rows the destination; the last
    state is the mask.
    """
    if K < 1:
        msg = "K must be >= 1; got %s"%K
        raise InvalidInputError(msg)
    Q = np.zeros((K+1,K+1))
    Q[np.arange(K),np.arange(K)] = -1.
    Q[K,:K] = 1.
    return Q

def check_distribution(p, atol=1e-12):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1) > atol:
        msg = "Invalid distribution: %s"%p
        raise InvalidInputError(msg)
    return p

def absorbing_marginal(p0, lam):
    """ Closed-form p_t = (1 - lam) p0 + lam * delta_M for mask-free mass. """
    p0 = np.asarray(p0, dtype=np.float64)
    pt = (1 - lam)*p0
    pt[-1] = p0[-1] + lam*p0[:-1].sum()
    return pt

def solve_forward_exact(p0, sched, t, step=constants.ODE_STEP):
    """Integrate dp/dt = sigma(t) Q p with classical fixed-step RK4.

    Parameters:
    -----------
    p0    : Initial distribution over K+1 states (mask last)
    sched : NoiseSchedule
    t     : End time in [0, T]
    step  : Step as a fraction of T

    Returns:
    --------
    pt    : Distribution at time t
    """
    p = check_distribution(p0).copy()
    t = sched.check_time(t)
    Q = absorbing_rate_matrix(len(p)-1)
    h = step*sched.T
    nsteps = int(np.ceil(t/h - 1e-9))
    if nsteps == 0: return p

    f = lambda tau, x: sched.sigma(min(tau, sched.T))*Q.dot(x)
    times = np.linspace(0., t, nsteps+1)
    for a,b in zip(times[:-1],times[1:]):
        dt = b - a
        k1 = f(a, p)
        k2 = f(a + dt/2, p + dt/2*k1)
        k3 = f(a + dt/2, p + dt/2*k2)
        k4 = f(b, p + dt*k3)
        p = p + dt/6*(k1 + 2*k2 + 2*k3 + k4)
    logging.debug("Integrated %i RK4 steps to t=%s"%(nsteps,t))
    return p

def reverse_rate_matrix(p_t, sched, t):
    """Reverse-time rate matrix built from the concrete score p^m/p^n.

    Off-diagonal entries: Qbar[m,n] = (p^m/p^n) Q_t[n,m]; the diagonal is
    the negative column sum. A state with p^n = 0 has zero outgoing
    reverse rate at t = 0; at t > 0 a zero-mass state that receives
    forward flow from a state with positive mass is a singularity.

    Parameters:
    -----------
    p_t   : Marginal distribution at time t
    sched : NoiseSchedule
    t     : Time in [0, T]

    Returns:
    --------
    Qbar  : Reverse rate matrix
    """
    p = check_distribution(p_t, atol=1e-9)
    t = sched.check_time(t)
    Qt = sched.sigma(t)*absorbing_rate_matrix(len(p)-1)
    n = len(p)
    Qbar = np.zeros((n,n))
    for src in range(n):
        flux = p*Qt[src,:]
        flux[src] = 0
        if p[src] == 0:
            if t > 0 and np.any(flux > 0):
                msg = "Reverse rate singular: state %i has zero mass at t=%s"%(src,t)
                raise SingularityError(msg)
            continue
        Qbar[:,src] = flux/p[src]
    Qbar[np.arange(n),np.arange(n)] = -Qbar.sum(axis=0)
    return Qbar

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
