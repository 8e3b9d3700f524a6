#!/usr/bin/env python
"""
Tests for the oracle verification suites.
"""
import numpy as np
import pytest

from absorb.verify import Report, SUITES, OPTIONAL, run_suites, suite_learning
from absorb.utils import fileio
from absorb.utils.errors import VerificationError

def test_report():
    report = Report()
    assert report.check('a', 0.5, 1.)
    assert report.check('b', 2, 2, '==')
    assert report.passed
    assert not report.check('c', np.nan, 1.)
    assert not report.check('d', 3., 1., '<=')
    assert not report.passed
    assert report.first_failure['name'] == 'c'
    np.testing.assert_allclose(report.checks[0]['margin'], 0.5)
    with pytest.raises(ValueError):
        report.check('e', 1., 1., '!=')

def test_unknown_suite():
    with pytest.raises(VerificationError, match='no-such-suite'):
        run_suites(['no-such-suite'])

def test_default_suites(tmp_path):
    # Every default suite passes at its acceptance size
    outfile = str(tmp_path/'verify.json')
    report = run_suites(outfile=outfile)
    assert report.passed
    out = fileio.read_json(outfile)
    assert out['passed']
    assert out['suites'] == [n for n in SUITES if n not in OPTIONAL]
    names = [c['name'] for c in out['checks']]
    assert 'sampler-tv:n_steps=256' in names
    assert 'sampler-tv:non-increasing' in names
    assert 'one-step:tv' in names
    assert not any(n.endswith(':exception') for n in names)

def test_learning_checks():
    # Tiny run: the checks are recorded, whatever their outcome
    report = Report()
    opts = dict(seed=0, n_pairs=60, learning_steps=2, n_enhance=2, enhance_steps=4)
    suite_learning(report, opts)
    names = [c['name'] for c in report.checks]
    assert names == ['learning:dce-reduction', 'learning:accuracy-gain@0dB',
                     'learning:agreement@60dB']
    for c in report.checks:
        assert np.isfinite(c['value'])

if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__]))
