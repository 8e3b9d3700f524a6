#!/usr/bin/env python
"""
Oracle verification suites.

Each suite compares an implementation against an independent oracle
(closed forms, exhaustive enumeration, finite differences) and records
one entry per check with its value, threshold and margin. A run passes
only if every check passes.
"""
import itertools
import logging
from collections import OrderedDict as odict

import numpy as np

from absorb import __version__
from absorb.codec import CodebookSet, rvq_encode, rvq_decode, train_codebooks
from absorb.diffusion import (NoiseSchedule, absorbing_marginal, solve_forward_exact,
                              reverse_rate_matrix, forward_corrupt)
from absorb.grid import (full_mask, mask_value, grid_index, enumerate_grids,
                         CODE_DTYPE)
from absorb.models import (JointTable, ExactOracle, UniformModel, TabularModel,
                           exact_posterior, posterior_targets, tabular_train)
from absorb.sampler import (SamplerConfig, sample_batch,
                            expected_distribution_one_step)
from absorb.rqdit import (RQDiT, RQDiTConfig, embed_codes, rope_apply,
                          gradient_check)
from absorb.training import (DCEConfig, GeneratorConfig, dce_loss, eval_dce,
                             train_epoch, generate_latents, generate_paired_dataset)
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.rng import get_rng
from absorb.utils.parser import setdefaults
from absorb.utils.testing import tv_distance, kl_divergence, histogram
from absorb.utils.errors import AbsorbError, VerificationError

class Report(object):
    """ Ordered collection of check results. """

    def __init__(self):
        self.checks = []

    def check(self, name, value, threshold, op='<', detail=None):
        value = float(value)
        if op == '<':
            passed, margin = value < threshold, threshold - value
        elif op == '<=':
            passed, margin = value <= threshold, threshold - value
        elif op == '>':
            passed, margin = value > threshold, value - threshold
        elif op == '>=':
            passed, margin = value >= threshold, value - threshold
        elif op == '==':
            passed, margin = value == threshold, -abs(value - threshold)
        else:
            raise ValueError("Unrecognized comparison: %s"%op)
        if not np.isfinite(value): passed = False
        entry = odict([('name',name),('value',value),('op',op),
                       ('threshold',float(threshold)),('margin',float(margin)),
                       ('passed',bool(passed))])
        if detail is not None: entry['detail'] = detail
        self.checks.append(entry)
        log = logging.info if passed else logging.warning
        log("%-48s %s (%.4g %s %.4g)"%(name, 'PASS' if passed else 'FAIL',
                                      value, op, threshold))
        return passed

    def fail(self, name, detail):
        self.checks.append(odict([('name',name),('passed',False),('detail',detail)]))
        logging.warning("%-48s FAIL (%s)"%(name, detail))

    @property
    def passed(self):
        return all(c['passed'] for c in self.checks)

    @property
    def first_failure(self):
        for c in self.checks:
            if not c['passed']: return c
        return None

############################################################
# Suites

def suite_forward_marginal(report, opts):
    """ Closed-form absorbing marginal against the RK4 integrator. """
    rng = get_rng(opts['seed'])
    sched = NoiseSchedule()
    for K in (2, 4, 8):
        worst = 0.
        for _ in range(20):
            p0 = np.append(rng.dirichlet(np.ones(K)), 0.)
            t = rng.uniform(0, sched.T)
            exact = absorbing_marginal(p0, sched.lambda_at(t))
            numeric = solve_forward_exact(p0, sched, t)
            worst = max(worst, np.abs(exact - numeric).max())
        report.check('forward-marginal:K=%i'%K, worst, 1e-8)
    delta = np.zeros(4); delta[-1] = 1
    err = np.abs(solve_forward_exact(delta, sched, 0.7) - delta).max()
    report.check('forward-marginal:absorbing-fixed', err, 1e-12, '<=')

def _posterior_bruteforce(table, masked, noisy):
    """ Posterior by nested loops over grids enumerated last-position-major. """
    L, D, K = table.L, table.D, table.K
    n = L*D
    m = np.asarray(masked).ravel()
    b = grid_index(noisy, K)
    probs = np.zeros((n,K))
    for digits in itertools.product(range(K), repeat=n):
        grid = digits[::-1]
        if any(m[i] != K and m[i] != grid[i] for i in range(n)): continue
        a = 0
        for g in grid: a = a*K + g
        w = table.table[a,b]
        for i in range(n): probs[i,grid[i]] += w
    total = probs[0].sum()
    if total == 0: return np.ones((L,D,K))/K
    return (probs/total).reshape(L,D,K)

def suite_posterior_equivalence(report, opts):
    """Reverse-rate tau-leap against the exact reverse transition, and the
    enumerated posterior against an independent enumeration."""
    rng = get_rng(opts['seed'])
    sched = NoiseSchedule()
    worst = 0.
    for K in (2, 3, 5):
        for _ in range(20):
            p0 = rng.dirichlet(np.ones(K))
            t = rng.uniform(0.05, 0.95)
            s = rng.uniform(0, t)
            lam_t, lam_s = sched.lambda_at(t), sched.lambda_at(s)
            pt = absorbing_marginal(np.append(p0, 0.), lam_t)
            Qbar = reverse_rate_matrix(pt, sched, t)
            # tau-leap over [s, t] with the reverse rate mask -> k
            euler = (t - s)*Qbar[:K,K]
            # p(c_s = k, c_t = M) / p(c_t = M)
            tweedie = p0*(lam_t - lam_s)/lam_t
            sampler = (t - s)/t*p0
            worst = max(worst, np.abs(euler - tweedie).max(),
                        np.abs(sampler - tweedie).max())
    report.check('posterior-equivalence:reverse-transition', worst, 1e-12)

    table = JointTable.fixture()
    K = table.K
    masked_grids = enumerate_grids(table.L, table.D, K+1)
    worst = 0.
    for _ in range(opts.get('n_configs', 100)):
        masked = masked_grids[rng.integers(len(masked_grids))]
        noisy = table.grids[rng.integers(table.size)]
        a = exact_posterior(table, masked, noisy)
        b = _posterior_bruteforce(table, masked, noisy)
        worst = max(worst, np.abs(a - b).max())
    report.check('posterior-equivalence:oracle-consistency', worst, 1e-12)

def suite_sampler_tv(report, opts):
    """ Sampled grids from the exact oracle against p(c | noisy). """
    table = JointTable.fixture()
    model = ExactOracle(table)
    noisy = table.noisy
    truth = table.conditional(noisy)
    n = opts['n_samples']
    batch = np.broadcast_to(noisy, (n,)+noisy.shape)
    tvs = odict()
    for n_steps in opts['tv_steps']:
        cfg = SamplerConfig(n_steps=n_steps, seed=opts['seed'])
        grids, trace = sample_batch(model, batch, cfg)
        tvs[n_steps] = tv_distance(histogram(grid_index(grids, table.K), table.size), truth)
        logging.debug("n_steps=%i: TV=%.5f"%(n_steps,tvs[n_steps]))
    report.check('sampler-tv:n_steps=%i'%max(tvs), tvs[max(tvs)], 0.02)
    steps = list(tvs)
    excess = max([tvs[b] - tvs[a] for a,b in zip(steps[:-1],steps[1:])] + [0.])
    report.check('sampler-tv:non-increasing', excess, 0.01, '<=')

def suite_one_step(report, opts):
    """ Single-step samples against the analytic product law. """
    table = JointTable.fixture()
    model = ExactOracle(table)
    noisy = table.noisy
    expected = expected_distribution_one_step(model, noisy)
    n = opts['n_samples']
    cfg = SamplerConfig(n_steps=1, seed=opts['seed'])
    grids, trace = sample_batch(model, np.broadcast_to(noisy, (n,)+noisy.shape), cfg)
    empirical = histogram(grid_index(grids, table.K), table.size)
    report.check('one-step:tv', tv_distance(empirical, expected), 0.01)
    report.check('one-step:nfe', trace.nfe.max(), 1, '==')

def suite_dce_uniform(report, opts):
    """ Uniform-model DCE equals log K (1/lambda weighting). """
    rng = get_rng(opts['seed'])
    K, L, D = 8, 4, 2
    cfg = DCEConfig()
    ndraws = opts['n_draws']
    clean = rng.integers(0, K, size=(ndraws, L, D))
    lam = rng.uniform(cfg.lambda_min, 1., size=ndraws)
    masked = forward_corrupt(clean, lam, rng, K=K)
    probs = UniformModel(K).predict(masked, clean)
    loss = dce_loss(probs, clean, masked, lam, K=K).loss
    report.check('dce-uniform:relative-error', abs(loss/np.log(K) - 1), 0.02)

    table = JointTable.random(2, 1, 2, rng)
    model = TabularModel(2, 1, 2)
    tabular_train(model, table, steps=opts['tabular_steps'], lr=1.0, log_every=0)
    targets, masked_pos = posterior_targets(table, model)
    probs = model.predict(*_all_configs(table))
    probs = probs.reshape(targets.shape)
    active = np.broadcast_to(masked_pos[None], targets.shape[:-1])
    kl = kl_divergence(targets, probs)[active]
    report.check('dce-uniform:tabular-kl', kl.max(), 1e-3)

def _all_configs(table):
    """ (masked, noisy) grids for every configuration in TabularModel order. """
    masked = enumerate_grids(table.L, table.D, table.K+1)
    nm, nn = len(masked), table.size
    return (np.tile(masked, (nn,1,1)),
            np.repeat(table.grids, nm, axis=0))

def suite_nfe_cache(report, opts):
    """ NFE bounds and caching soundness on a (200, 4) grid. """
    L, D, K = 200, 4, 4
    rng = get_rng(opts['seed'])
    model = UniformModel(K)
    noisy = rng.integers(0, K, size=(opts['n_runs'], L, D))
    bound = L*D + 1
    worst = -np.inf
    for n_steps in constants.NSTEPS_SWEEP:
        cfg = SamplerConfig(n_steps=n_steps, seed=opts['seed'])
        grids, trace = sample_batch(model, noisy, cfg)
        nfe = trace.nfe
        worst = max(worst, (nfe - min(n_steps, bound)).max())
        if n_steps == constants.NSTEPS_SWEEP[-1]:
            report.check('nfe-cache:nfe<n_steps@%i'%n_steps, nfe.max(), n_steps)
    report.check('nfe-cache:bound', worst, 0, '<=')

    cfg_on = SamplerConfig(n_steps=64, seed=opts['seed'], cache=True)
    cfg_off = SamplerConfig(n_steps=64, seed=opts['seed'], cache=False)
    g_on, t_on = sample_batch(model, noisy[:4], cfg_on)
    g_off, t_off = sample_batch(model, noisy[:4], cfg_off)
    same = (np.array_equal(g_on, g_off) and np.array_equal(t_on.times, t_off.times)
            and np.array_equal(t_on.unmask_count, t_off.unmask_count))
    report.check('nfe-cache:cache-invariance', float(same), 1, '==')

def _toy_books(rng, D=2, K=4, H=4):
    return CodebookSet(rng.normal(size=(D,K,H))*0.5**np.arange(D)[:,None,None])

def suite_gradient_check(report, opts):
    """ Finite-difference check of every RQDiT parameter gradient. """
    rng = get_rng(opts['seed'])
    checkpoint = opts.get('checkpoint')
    if checkpoint:
        books = CodebookSet.read(opts['codebooks'])
        model = RQDiT.read(checkpoint, books)
        max_entries = opts.get('max_entries', 4)
    else:
        books = _toy_books(rng)
        config = RQDiTConfig(hidden_dim=8, K=books.K, D=books.D, H=books.H)
        model = RQDiT(config, books, seed=opts['seed']).randomize(opts['seed'])
        max_entries = None

    for name,value in model.params.items():
        if not np.all(np.isfinite(value)):
            layer = name.rsplit('.',1)[0]
            report.fail('gradient-check:finite', "non-finite values in tensor '%s' (layer %s)"%(name,layer))
            return

    L = opts.get('L', 3)
    clean = rng.integers(0, books.K, size=(2, L, books.D))
    masked = forward_corrupt(clean, 0.5, rng, K=books.K)
    noisy = rng.integers(0, books.K, size=clean.shape)
    errors = gradient_check(model, masked, noisy, seed=opts['seed'],
                            max_entries=max_entries)
    name = max(errors, key=errors.get)
    report.check('gradient-check:max-relative-error', errors[name], 1e-4,
                 detail="worst tensor '%s'"%name)

def suite_rqdit_structure(report, opts):
    """ adaLN-zero identity, mask-zero equivalence, frame independence, RoPE. """
    rng = get_rng(opts['seed'])
    books = _toy_books(rng, D=3, K=5, H=4)
    config = RQDiTConfig(hidden_dim=16, n_heads=2, K=books.K, D=books.D, H=books.H)
    model = RQDiT(config, books, seed=opts['seed'])
    h = config.hidden_dim

    x = rng.normal(size=(2, 6, h))
    c = rng.normal(size=(2, 6, h))
    err = max(np.abs(model.run_dit(dit, x, c) - x).max() for dit in ('frame','depth'))
    report.check('rqdit-structure:adaln-zero-identity', err, 1e-12, '<=')

    model.randomize(opts['seed'])
    L = 5
    clean = rng.integers(0, books.K, size=(L, books.D))
    masked = forward_corrupt(clean, 0.5, rng, K=books.K)
    noisy = rng.integers(0, books.K, size=(L, books.D))
    probs = model.forward(masked, noisy)
    emb = embed_codes(masked, books)
    emb[masked == mask_value(books.K)] = 0.
    probs0 = model.forward_embedded(emb[None], embed_codes(noisy, books)[None])[0]
    report.check('rqdit-structure:mask-zero', float(np.array_equal(probs, probs0)), 1, '==')

    frozen = rng.normal(size=(L, h))
    base = model.forward(masked, noisy, frame_override=frozen)
    i = 2
    changed = masked.copy()
    changed[i,0] = (changed[i,0] + 1) % (books.K + 1)
    perturbed = model.forward(changed, noisy, frame_override=frozen)
    diff = np.abs(perturbed - base).max(axis=(1,2))
    leak = np.delete(diff, i).max()
    report.check('rqdit-structure:depth-frame-independence', leak, 0, '<=')
    report.check('rqdit-structure:depth-frame-sensitivity', diff[i], 0, '>')

    q, k = rng.normal(size=(2, 8))
    worst = 0.
    for _ in range(20):
        m, n, d = rng.integers(0, 50, size=3)
        a = rope_apply(q[None], [m]).dot(rope_apply(k[None], [n]).T)
        b = rope_apply(q[None], [m+d]).dot(rope_apply(k[None], [n+d]).T)
        worst = max(worst, abs(a - b).max())
    report.check('rqdit-structure:rope-shift-invariance', worst, 1e-8, '<=')

    model.use_rope = False
    perm = rng.permutation(6)
    y = model.run_dit('frame', x, c)
    yp = model.run_dit('frame', x[:,perm], c[:,perm])
    report.check('rqdit-structure:permutation-equivariance',
                 np.abs(yp - y[:,perm]).max(), 1e-10, '<=')
    model.use_rope = True

def suite_rvq(report, opts):
    """ Idempotence, residual telescoping and depth monotonicity. """
    rng = get_rng(opts['seed'])
    gen = GeneratorConfig(n_frames=100)
    clean, noisy, snr, seeds = generate_latents(gen, 8, 10, rng)
    latents = clean.reshape(-1, 8)
    books = train_codebooks(latents, D=3, K=16, iterations=20, seed=opts['seed'])
    codes, residual = rvq_encode(latents, books, return_residual=True)
    decoded = rvq_decode(codes, books)
    report.check('rvq:telescoping', np.abs(latents - decoded - residual).max(), 1e-10)
    mse = [np.mean((latents - rvq_decode(rvq_encode(latents, books.truncate(d)),
                                         books.truncate(d)))**2) for d in range(1, books.D+1)]
    report.check('rvq:depth-monotone', np.max(np.diff(mse)), 0, '<=')

    # Entries shrink by 0.05 per depth so quantized points stay inside their cells
    nested = CodebookSet(rng.normal(size=(3,16,8))*0.05**np.arange(3)[:,None,None])
    codes = rvq_encode(latents, nested)
    fixed = np.mean(np.all(rvq_encode(rvq_decode(codes, nested), nested) == codes, axis=1))
    report.check('rvq:idempotence', fixed, 1, '==')

def _train_rqdit(dataset, books, cfg, n_batches, seed):
    config = RQDiTConfig.preset('desk', K=books.K, D=books.D, H=books.H)
    model = RQDiT(config, books, seed=seed)
    metrics = train_epoch(model, dataset, cfg, get_rng(seed), n_batches=n_batches)
    return model, metrics

def suite_overfit(report, opts):
    """ Desk RQDiT drives training DCE on 32 fixed pairs near zero. """
    rng = get_rng(opts['seed'])
    gen = GeneratorConfig(n_frames=16)
    clean, noisy, snr, seeds = generate_latents(gen, 8, 64, rng)
    books = train_codebooks(clean.reshape(-1,8), D=2, K=16, iterations=20, seed=opts['seed'])
    dataset = generate_paired_dataset(gen, books, 32, rng)
    cfg = DCEConfig(lr=1e-3, batch_size=16, log_every=1000)
    model, metrics = _train_rqdit(dataset, books, cfg, opts['overfit_steps'], opts['seed'])
    dce = eval_dce(model, dataset, cfg, 10, opts['seed'])
    report.check('overfit:train-dce', dce, constants.OVERFIT_DCE)

def suite_learning(report, opts):
    """Held-out DCE reduction relative to the uniform baseline, and token
    accuracy of enhanced codes at 0 dB and at high latent SNR."""
    rng = get_rng(opts['seed'])
    gen = GeneratorConfig(n_frames=50)
    clean, noisy, snr, seeds = generate_latents(gen, 8, 200, rng)
    books = train_codebooks(np.vstack([clean.reshape(-1,8), noisy.reshape(-1,8)]),
                            D=2, K=64, iterations=20, seed=opts['seed'])
    dataset = generate_paired_dataset(gen, books, opts['n_pairs'], rng)
    train, test = dataset.split(int(0.9*len(dataset)))
    cfg = DCEConfig(lr=1e-3, log_every=1000)
    model, metrics = _train_rqdit(train, books, cfg, opts['learning_steps'], opts['seed'])
    dce = eval_dce(model, test, cfg, 10, opts['seed'])
    reduction = 1 - dce/np.log(books.K)
    report.check('learning:dce-reduction', reduction, constants.DCE_REDUCTION, '>=')

    scfg = SamplerConfig(n_steps=opts['enhance_steps'], seed=opts['seed'])
    for snr_db in (0., constants.HIGH_SNR):
        pairs = generate_paired_dataset(GeneratorConfig(n_frames=50, snr_db=snr_db),
                                        books, opts['n_enhance'], rng)
        grids, trace = sample_batch(model, pairs.noisy, scfg)
        enhanced = np.mean(grids == pairs.clean)
        baseline = np.mean(pairs.noisy == pairs.clean)
        logging.info("latent SNR %g dB: enhanced accuracy %.4f, noisy accuracy %.4f"%(
            snr_db, enhanced, baseline))
        if snr_db == 0:
            report.check('learning:accuracy-gain@0dB', enhanced - baseline, 0, '>',
                         detail="enhanced %.4f, noisy %.4f"%(enhanced, baseline))
        else:
            report.check('learning:agreement@%gdB'%snr_db, enhanced,
                         constants.ENHANCE_AGREEMENT, '>')

SUITES = odict([
    ('forward-marginal', suite_forward_marginal),
    ('posterior-equivalence', suite_posterior_equivalence),
    ('sampler-tv', suite_sampler_tv),
    ('one-step', suite_one_step),
    ('dce-uniform', suite_dce_uniform),
    ('nfe-cache', suite_nfe_cache),
    ('gradient-check', suite_gradient_check),
    ('rqdit-structure', suite_rqdit_structure),
    ('rvq', suite_rvq),
    ('overfit', suite_overfit),
    ('learning', suite_learning),
])

# Long-running suites only run when named explicitly
OPTIONAL = ('overfit','learning')

DEFAULTS = odict([
    ('seed', 0),
    ('n_samples', 200000),
    ('tv_steps', [1, 4, 16, 64, 256]),
    ('n_draws', 100000),
    ('tabular_steps', 20000),
    ('n_runs', 100),
    ('n_configs', 100),
    ('checkpoint', None),
    ('codebooks', None),
    ('overfit_steps', 20000),
    ('learning_steps', 20000),
    ('n_pairs', 5000),
    ('n_enhance', 64),
    ('enhance_steps', 64),
])

def run_suites(names=None, outfile=None, **kwargs):
    """Run verification suites and write a JSON report.

    Parameters:
    -----------
    names   : Suite names ('all' or None for every non-optional suite)
    outfile : Optional path of the JSON report
    kwargs  : Overrides of DEFAULTS

    Returns:
    --------
    report  : Report

    Raises:
    -------
    VerificationError naming the first failing check
    """
    opts = setdefaults(dict(kwargs), DEFAULTS)
    if names is None or names == 'all' or names == ['all']:
        names = [n for n in SUITES if n not in OPTIONAL]
    elif isinstance(names, str):
        names = [names]
    for name in names:
        if name not in SUITES:
            msg = "Unrecognized suite: %s"%name
            raise VerificationError(msg)

    report = Report()
    for name in names:
        logging.info(30*'-')
        logging.info("Suite: %s"%name)
        try:
            SUITES[name](report, opts)
        except AbsorbError as e:
            report.fail('%s:exception'%name, "%s: %s"%(type(e).__name__, e))

    if outfile:
        out = odict([('absorb',__version__),('suites',names),
                     ('passed',report.passed),('checks',report.checks)])
        fileio.write_json(outfile, out)
    if not report.passed:
        first = report.first_failure
        msg = "Verification failed at '%s'"%first['name']
        if 'detail' in first: msg += ": %s"%first['detail']
        raise VerificationError(msg)
    return report

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
