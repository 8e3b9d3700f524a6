#!/usr/bin/env python
"""
Command-line harness for codebooks, datasets, training, enhancement,
step sweeps, evaluation and verification.

Every subcommand resolves its parameters as defaults < config file
section < command-line flags and writes the resolved configuration
(with the tool version) to config.json in its output directory, plus
config.ini, which `-c` accepts to replay the run.
"""
import os
import logging
from collections import OrderedDict as odict

import numpy as np

from absorb import __version__
from absorb.codec import (CodebookSet, PseudoCodecConfig, train_codebooks,
                          rvq_encode, rvq_decode, analyze, synthesize, latent_snr)
from absorb.rqdit import RQDiTConfig
from absorb.factory import model_class, model_factory
from absorb.sampler import SamplerConfig, sample, sample_batch
from absorb.training import (DCEConfig, GeneratorConfig, PairedCodeDataset,
                             generate_latents, generate_pair, generate_paired_dataset,
                             train_epoch, eval_dce, write_metrics)
from absorb.verify import run_suites, SUITES
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.rng import get_rng, spawn_seeds
from absorb.utils.parser import Parser, resolve, write_config
from absorb.utils.errors import (AbsorbError, ConfigurationError, UsageError,
                                 FormatError, VerificationError)

COMMON = odict([
    ('outdir', '.'),
    ('seed', 0),
])

DEFAULTS = odict([
    ('train-codebooks', odict([
        ('depth', constants.DEPTH),
        ('codebook_size', constants.CODEBOOK_SIZE),
        ('latent_dim', constants.LATENT_DIM),
        ('iterations', constants.KMEANS_ITERS),
        ('n_pairs', 100),
        ('n_frames', constants.SEGMENT),
        ('wav', None),
        ('frame_size', constants.FRAME_SIZE),
    ])),
    ('make-dataset', odict([
        ('codebooks', None),
        ('n_pairs', 1000),
        ('n_frames', constants.SEGMENT),
        ('ar_coef', constants.AR_COEF),
        ('snr_min', constants.SNR_RANGE[0]),
        ('snr_max', constants.SNR_RANGE[1]),
        ('snr_db', None),
    ])),
    ('train', odict([
        ('dataset', None),
        ('codebooks', None),
        ('preset', 'desk'),
        ('steps', 1000),
        ('batch_size', constants.BATCH_SIZE),
        ('lr', constants.LEARNING_RATE),
        ('clip_norm', constants.CLIP_NORM),
        ('weight_decay', constants.WEIGHT_DECAY),
        ('lambda_min', constants.LAMBDA_MIN),
        ('log_every', 100),
        ('n_eval', 64),
        ('n_lambda', 4),
    ])),
    ('enhance', odict([
        ('input', None),
        ('output', None),
        ('codebooks', None),
        ('checkpoint', None),
        ('n_steps', 64),
        ('decode_mode', 'categorical'),
        ('frame_size', constants.FRAME_SIZE),
    ])),
    ('sample', odict([
        ('dataset', None),
        ('index', 0),
        ('codebooks', None),
        ('checkpoint', None),
        ('n_steps', 64),
        ('decode_mode', 'categorical'),
    ])),
    ('sweep-steps', odict([
        ('dataset', None),
        ('codebooks', None),
        ('checkpoint', None),
        ('steps', constants.NSTEPS_SWEEP),
        ('n_items', 16),
        ('n_lambda', 4),
        ('lambda_min', constants.LAMBDA_MIN),
    ])),
    ('eval', odict([
        ('dataset', None),
        ('codebooks', None),
        ('checkpoint', None),
        ('n_steps', 64),
        ('n_items', 64),
        ('n_lambda', 4),
        ('lambda_min', constants.LAMBDA_MIN),
    ])),
    ('verify', odict([
        ('suite', ['all']),
        ('checkpoint', None),
        ('codebooks', None),
        ('n_samples', 200000),
        ('report', 'verify.json'),
    ])),
])

# Models stored as binary checkpoints
CHECKPOINT_MODELS = ('rqdit',)

# Converters for config-file keys whose default is None
TYPES = dict(snr_db=float)

HINTS = odict([
    ('codebooks', "run 'absorb train-codebooks' first"),
    ('dataset', "run 'absorb make-dataset' first"),
    ('checkpoint', "run 'absorb train' first"),
    ('input', "pass a 16-bit mono WAV file"),
    ('output', "pass an output WAV path"),
])

############################################################

def _argtype(default):
    if isinstance(default, bool): return lambda v: v.lower() in ('1','true','yes','on')
    if isinstance(default, int): return int
    if isinstance(default, float): return float
    return str

def parser():
    """ Top-level parser with one subparser per command. """
    p = Parser(description=__doc__)
    sub = p.add_subparsers(dest='command', metavar='command')
    for name,defaults in DEFAULTS.items():
        s = sub.add_parser(name, help=COMMANDS[name].__doc__.strip().split('\n')[0])
        s.add_argument('-c','--config', default=None,
                       help='config file (INI, or a config.json snapshot)')
        for key,default in list(COMMON.items()) + list(defaults.items()):
            flag = '--' + key.replace('_','-')
            if isinstance(default, list):
                s.add_argument(flag, nargs='+', default=None,
                               type=_argtype(default[0]) if default else str)
            elif key == 'snr_db':
                s.add_argument(flag, default=None, type=float)
            else:
                s.add_argument(flag, default=None, type=_argtype(default),
                               help='default: %s'%(default,))
    return p

def _require(opts, key, exists=True):
    value = opts.get(key)
    hint = HINTS.get(key, '')
    if value is None:
        msg = "Missing --%s; %s"%(key.replace('_','-'), hint)
        raise UsageError(msg)
    if exists and not os.path.exists(value):
        msg = "File not found: %s; %s"%(value, hint)
        raise UsageError(msg)
    return value

def _snapshot(command, opts):
    outdir = fileio.mkdir(opts['outdir'])
    config = odict([('command',command),('absorb',__version__),('config',opts)])
    fileio.write_json(os.path.join(outdir,'config.json'), config)
    write_config(os.path.join(outdir,'config.ini'), command, opts)
    return outdir

def _load_model(opts, books):
    """ Load a checkpoint through the model class named in its manifest. """
    filename = _require(opts,'checkpoint')
    manifest = os.path.splitext(filename)[0]+'.json'
    if not os.path.exists(manifest):
        msg = "Checkpoint manifest not found: %s"%manifest
        raise FormatError(msg)
    name = fileio.read_json(manifest).get('model')
    if name not in CHECKPOINT_MODELS:
        msg = "Checkpoint field 'model': %s"%name
        raise FormatError(msg)
    return model_class(name).read(filename, books)

def _load_dataset(opts, books=None):
    dataset = PairedCodeDataset.read(_require(opts,'dataset'))
    if books is not None and (dataset.K,dataset.D) != (books.K,books.D):
        msg = "Dataset (K=%i, D=%i) does not match codebooks (K=%i, D=%i)"%(
            dataset.K,dataset.D,books.K,books.D)
        raise ConfigurationError(msg)
    return dataset

def accuracy(a, b):
    """ Token accuracy: fraction of equal codes. """
    return float(np.mean(np.asarray(a) == np.asarray(b)))

############################################################
# Commands

def cmd_train_codebooks(opts):
    """Fit RVQ codebooks by residual k-means.

    Latents come from WAV files (--wav, through the pseudo-codec) or from
    the synthetic generator (clean and noisy latents pooled).
    """
    outdir = _snapshot('train-codebooks', opts)
    if opts['wav']:
        cfg = PseudoCodecConfig(frame_size=opts['frame_size'], latent_dim=opts['latent_dim'])
        latents = [analyze(fileio.wav_read(f)[0], cfg) for f in opts['wav'].split(',')]
    else:
        gen = GeneratorConfig(n_frames=opts['n_frames'])
        clean, noisy, snr, seeds = generate_latents(gen, opts['latent_dim'], opts['n_pairs'],
                                                    opts['seed'])
        latents = list(clean) + list(noisy)
    books = train_codebooks(latents, D=opts['depth'], K=opts['codebook_size'],
                            iterations=opts['iterations'], seed=opts['seed'])
    outfile = os.path.join(outdir,'codebooks.json')
    logging.info("Writing %s..."%outfile)
    books.write(outfile)
    return books

def cmd_make_dataset(opts):
    """ Generate and encode synthetic clean/noisy latent pairs. """
    books = CodebookSet.read(_require(opts,'codebooks'))
    outdir = _snapshot('make-dataset', opts)
    gen = GeneratorConfig(n_frames=opts['n_frames'], ar_coef=opts['ar_coef'],
                          snr_min=opts['snr_min'], snr_max=opts['snr_max'],
                          snr_db=opts['snr_db'])
    dataset = generate_paired_dataset(gen, books, opts['n_pairs'], opts['seed'])
    dataset.metadata['seed'] = opts['seed']
    outfile = os.path.join(outdir,'dataset.bin')
    logging.info("Writing %s..."%outfile)
    dataset.write(outfile)
    logging.info("Clean/noisy agreement: %.4f"%dataset.agreement())
    return dataset

def cmd_train(opts):
    """ Train a desk-scale RQDiT on a paired code dataset. """
    books = CodebookSet.read(_require(opts,'codebooks'))
    dataset = _load_dataset(opts, books)
    outdir = _snapshot('train', opts)
    config = RQDiTConfig.preset(opts['preset'], K=books.K, D=books.D, H=books.H)
    model = model_factory('rqdit', config=config, books=books, seed=opts['seed'])
    cfg = DCEConfig(lambda_min=opts['lambda_min'], batch_size=opts['batch_size'],
                    steps=opts['steps'], lr=opts['lr'], clip_norm=opts['clip_norm'],
                    weight_decay=opts['weight_decay'], seed=opts['seed'],
                    log_every=opts['log_every'])
    rng = get_rng(opts['seed'])
    metrics = dict(records=[], mean_loss=np.nan)
    if cfg.steps > 0:
        metrics = train_epoch(model, dataset, cfg, rng, n_batches=cfg.steps)
        write_metrics(os.path.join(outdir,'metrics.csv'), metrics['records'])

    outfile = os.path.join(outdir,'model.bin')
    logging.info("Writing %s..."%outfile)
    model.write(outfile)

    n_eval = min(opts['n_eval'], len(dataset))
    dce = eval_dce(model, dataset.subset(np.arange(n_eval)), cfg, opts['n_lambda'],
                   opts['seed'])
    summary = odict([('steps',cfg.steps),('mean_loss',float(metrics['mean_loss'])),
                     ('eval_dce',float(dce)),('uniform_dce',float(np.log(books.K))),
                     ('lambda_min',cfg.lambda_min),('nparams',model.nparams)])
    fileio.write_json(os.path.join(outdir,'summary.json'), summary)
    logging.info("DCE %.4f (uniform %.4f)"%(dce, np.log(books.K)))
    return model

def cmd_enhance(opts):
    """ Enhance a WAV file: analyze, encode, sample, decode, synthesize. """
    books = CodebookSet.read(_require(opts,'codebooks'))
    model = _load_model(opts, books)
    infile = _require(opts,'input')
    outfile = _require(opts,'output', exists=False)
    outdir = fileio.mkdir(os.path.dirname(outfile) or '.')
    _snapshot('enhance', odict(opts, outdir=outdir))

    waveform, rate = fileio.wav_read(infile)
    codec = PseudoCodecConfig(frame_size=opts['frame_size'], latent_dim=books.H,
                              sample_rate=rate)
    noisy = rvq_encode(analyze(waveform, codec), books)
    cfg = SamplerConfig(n_steps=opts['n_steps'], decode_mode=opts['decode_mode'],
                        seed=opts['seed'])
    codes, trace = sample(model, noisy, cfg)
    enhanced = synthesize(rvq_decode(codes, books), codec)[:len(waveform)]
    fileio.wav_write(outfile, enhanced, rate)
    trace.write(os.path.splitext(outfile)[0]+'.trace.jsonl')
    logging.info("NFE %i for %i steps; %i of %i codes changed"%(
        trace.nfe, cfg.n_steps, np.sum(codes != noisy), codes.size))
    return codes, trace

def cmd_sample(opts):
    """ Generate clean codes for one stored dataset item. """
    books = CodebookSet.read(_require(opts,'codebooks'))
    dataset = _load_dataset(opts, books)
    model = _load_model(opts, books)
    outdir = _snapshot('sample', opts)
    if not 0 <= opts['index'] < len(dataset):
        msg = "Index %i outside dataset of %i pairs"%(opts['index'],len(dataset))
        raise UsageError(msg)
    clean, noisy = dataset[opts['index']]
    cfg = SamplerConfig(n_steps=opts['n_steps'], decode_mode=opts['decode_mode'],
                        seed=opts['seed'])
    codes, trace = sample(model, noisy, cfg)
    out = odict([('index',opts['index']),('clean',clean.tolist()),
                 ('noisy',noisy.tolist()),('generated',codes.tolist()),
                 ('accuracy',accuracy(codes, clean)),
                 ('noisy_accuracy',accuracy(noisy, clean))])
    fileio.write_json(os.path.join(outdir,'codes.json'), out)
    trace.write(os.path.join(outdir,'trace.jsonl'))
    return codes, trace

def cmd_sweep_steps(opts):
    """ NFE, DCE and token accuracy as a function of the step count. """
    books = CodebookSet.read(_require(opts,'codebooks'))
    dataset = _load_dataset(opts, books)
    model = _load_model(opts, books)
    outdir = _snapshot('sweep-steps', opts)
    items = dataset.subset(np.arange(min(opts['n_items'], len(dataset))))

    cfg = DCEConfig(lambda_min=opts['lambda_min'])
    dce = eval_dce(model, items, cfg, opts['n_lambda'], opts['seed'])
    noisy_acc = accuracy(items.noisy, items.clean)
    rows = []
    for n_steps,seed in zip(opts['steps'], spawn_seeds(opts['seed'], len(opts['steps']))):
        scfg = SamplerConfig(n_steps=n_steps, seed=seed)
        grids, trace = sample_batch(model, items.noisy, scfg)
        nfe = trace.nfe
        rows.append(odict([('n_steps',n_steps),('nfe_mean',nfe.mean()),
                           ('nfe_max',nfe.max()),('dce',dce),
                           ('accuracy',accuracy(grids, items.clean)),
                           ('noisy_accuracy',noisy_acc)]))
        logging.info("n_steps %4i: NFE %.1f, accuracy %.4f"%(
            n_steps, nfe.mean(), rows[-1]['accuracy']))
    fileio.rec2csv(os.path.join(outdir,'sweep.csv'), rows)
    return rows

def cmd_eval(opts):
    """Token accuracy, latent SNR gain, DCE and SNR bins on a dataset.

    Also reports the codec-only latent SNR at every truncated depth.
    """
    books = CodebookSet.read(_require(opts,'codebooks'))
    dataset = _load_dataset(opts, books)
    model = _load_model(opts, books)
    outdir = _snapshot('eval', opts)
    items = dataset.subset(np.arange(min(opts['n_items'], len(dataset))))

    cfg = DCEConfig(lambda_min=opts['lambda_min'])
    dce = eval_dce(model, items, cfg, opts['n_lambda'], opts['seed'])
    scfg = SamplerConfig(n_steps=opts['n_steps'], seed=opts['seed'])
    grids, trace = sample_batch(model, items.noisy, scfg)

    enh_acc = np.mean(grids == items.clean, axis=(1,2))
    noisy_acc = np.mean(items.noisy == items.clean, axis=(1,2))
    report = odict([('dce',dce),('uniform_dce',float(np.log(books.K))),
                    ('accuracy',float(enh_acc.mean())),
                    ('noisy_accuracy',float(noisy_acc.mean())),
                    ('nfe_mean',float(trace.nfe.mean())),
                    ('n_steps',scfg.n_steps),('snr_domain','latent')])

    # Reference latents are regenerated from the per-pair seeds
    generator = items.metadata.get('generator')
    seeds = items.metadata.get('seeds')
    if generator and seeds:
        gen = GeneratorConfig(**generator)
        clean = [generate_pair(gen, books.H, s)[0] for s in seeds]
        snr_noisy = [latent_snr(c, rvq_decode(n, books)) for c,n in zip(clean, items.noisy)]
        snr_enh = [latent_snr(c, rvq_decode(g, books)) for c,g in zip(clean, grids)]
        report['snr_improvement_db'] = float(np.mean(np.subtract(snr_enh, snr_noisy)))
        codec_only = []
        for d in range(1, books.D+1):
            sub = books.truncate(d)
            codec_only.append(float(np.mean([latent_snr(c, rvq_decode(rvq_encode(c, sub), sub))
                                             for c in clean])))
        report['codec_only_snr_db'] = codec_only
    else:
        logging.warning("Dataset lacks generator metadata; skipping latent SNR metrics")

    snr = items.snr_db
    centers = np.array(constants.SNR_BINS)
    nearest = np.argmin(np.abs(snr[:,None] - centers[None,:]), axis=1)
    rows = []
    for b,center in enumerate(centers):
        sel = (nearest == b) & np.isfinite(snr)
        rows.append(odict([('snr_db',center),('n_pairs',int(sel.sum())),
                           ('noisy_accuracy',noisy_acc[sel].mean() if sel.any() else np.nan),
                           ('accuracy',enh_acc[sel].mean() if sel.any() else np.nan)]))
    fileio.rec2csv(os.path.join(outdir,'snr_bins.csv'), rows)
    fileio.write_json(os.path.join(outdir,'eval.json'), report)
    logging.info("Accuracy %.4f (noisy %.4f), DCE %.4f"%(
        report['accuracy'], report['noisy_accuracy'], dce))
    return report

def cmd_verify(opts):
    """ Run the oracle verification suites. """
    outdir = _snapshot('verify', opts)
    kwargs = dict(seed=opts['seed'], n_samples=opts['n_samples'])
    if opts['checkpoint']:
        kwargs['checkpoint'] = _require(opts,'checkpoint')
        kwargs['codebooks'] = _require(opts,'codebooks')
    suites = opts['suite']
    if suites != ['all']:
        for s in suites:
            if s not in SUITES:
                msg = "Unrecognized suite '%s'; choose from %s"%(s, ', '.join(SUITES))
                raise UsageError(msg)
    return run_suites(suites, os.path.join(outdir, opts['report']), **kwargs)

COMMANDS = odict([
    ('train-codebooks', cmd_train_codebooks),
    ('make-dataset', cmd_make_dataset),
    ('train', cmd_train),
    ('enhance', cmd_enhance),
    ('sample', cmd_sample),
    ('sweep-steps', cmd_sweep_steps),
    ('eval', cmd_eval),
    ('verify', cmd_verify),
])

def main(argv=None):
    """ Entry point; returns the process exit code. """
    try:
        args = parser().parse_args(argv)
        if args.command is None:
            raise UsageError("No command given; choose from %s"%', '.join(COMMANDS))
        defaults = odict(COMMON)
        defaults.update(DEFAULTS[args.command])
        opts = resolve(args, defaults, args.command, TYPES)
        logging.info(30*'-')
        logging.info("absorb %s"%args.command)
        COMMANDS[args.command](opts)
    except VerificationError as e:
        logging.error(str(e))
        return constants.EXIT_FAIL
    except (ConfigurationError, FormatError) as e:
        logging.error(str(e))
        return constants.EXIT_USAGE
    except AbsorbError as e:
        logging.error(str(e))
        return constants.EXIT_FAIL
    return constants.EXIT_OK

if __name__ == "__main__":
    import sys
    sys.exit(main())
