#!/usr/bin/env python
"""
Testing code
"""
import numpy as np

def check_dict(value,test):
    for k,v in value.items():
        val = test[k]
        if val != v:
            msg = '%s: %s (in), %s (out)'%(k,v,val)
            raise ValueError(msg)

    return test

def make_options(kwargs):
    return ' '.join(['--%s %s'%(k.replace('_','-'),v) for k,v in kwargs.items()])

def tv_distance(p, q):
    """ Total variation distance between two probability vectors. """
    return 0.5*np.abs(np.asarray(p,dtype=float)-np.asarray(q,dtype=float)).sum()

def kl_divergence(p, q, axis=-1):
    """ KL(p || q) along `axis`, with 0 log 0 = 0. """
    p = np.asarray(p,dtype=float)
    q = np.asarray(q,dtype=float)
    with np.errstate(divide='ignore',invalid='ignore'):
        terms = np.where(p > 0, p*(np.log(p)-np.log(q)), 0.)
    return terms.sum(axis=axis)

def binomial_sigma(p, n):
    """ Standard deviation of an empirical fraction. """
    return np.sqrt(p*(1-p)/float(n))

def histogram(indices, size):
    """ Empirical distribution of integer outcomes. """
    counts = np.bincount(np.asarray(indices).ravel(), minlength=size)
    return counts/float(counts.sum())
