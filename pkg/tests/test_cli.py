#!/usr/bin/env python
"""
End-to-end tests of the command-line harness on tiny instances.
"""
import os

import numpy as np
import pytest

from absorb.cli import main, parser
from absorb.codec import CodebookSet
from absorb.rqdit import RQDiT, RQDiTConfig
from absorb.sampler import SampleTrace
from absorb.training import PairedCodeDataset
from absorb.utils import fileio
from absorb.utils.testing import check_dict, make_options

CODEBOOKS = dict(depth=2, codebook_size=4, latent_dim=4, n_pairs=4, n_frames=20,
                 iterations=5)
DATASET = dict(n_pairs=6, n_frames=8)

def run(*args, **kwargs):
    argv = list(args) + make_options(kwargs).split()
    return main(argv)

@pytest.fixture(scope='module')
def workdir(tmp_path_factory):
    """ Codebooks, dataset and an untrained checkpoint shared by the tests. """
    path = tmp_path_factory.mktemp('cli')
    books = str(path/'codebooks.json')
    data = str(path/'dataset.bin')
    assert run('train-codebooks', outdir=path, **CODEBOOKS) == 0
    assert run('make-dataset', outdir=path, codebooks=books, **DATASET) == 0
    assert run('train', outdir=path, codebooks=books, dataset=data, steps=0) == 0
    return path

def test_parser():
    p = parser()
    args = p.parse_args(['sweep-steps','--steps','1','4','--n-items','3'])
    assert args.command == 'sweep-steps'
    assert args.steps == [1,4]
    assert args.n_items == 3
    assert args.checkpoint is None

def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(['unknown-command']) == 2
    assert run('make-dataset', outdir=tmp_path) == 2
    assert run('make-dataset', outdir=tmp_path, codebooks=tmp_path/'missing.json') == 2
    assert run('verify', outdir=tmp_path, suite='no-such-suite') == 2

def test_train_codebooks(workdir, tmp_path):
    books = CodebookSet.read(str(workdir/'codebooks.json'))
    assert books.shape == (2,4,4)
    config = fileio.read_json(str(workdir/'config.json'))
    assert 'command' in config and 'absorb' in config

    # Same seed, same bytes
    assert run('train-codebooks', outdir=tmp_path, **CODEBOOKS) == 0
    a = open(str(workdir/'codebooks.json'),'rb').read()
    b = open(str(tmp_path/'codebooks.json'),'rb').read()
    assert a == b

def test_make_dataset(workdir, tmp_path):
    dataset = PairedCodeDataset.read(str(workdir/'dataset.bin'))
    assert len(dataset) == 6
    assert (dataset.L, dataset.D, dataset.K) == (8, 2, 4)

    books = str(workdir/'codebooks.json')
    assert run('make-dataset', outdir=tmp_path, codebooks=books, **DATASET) == 0
    a = open(str(workdir/'dataset.bin'),'rb').read()
    b = open(str(tmp_path/'dataset.bin'),'rb').read()
    assert a == b

def test_config_file(workdir, tmp_path):
    filename = str(tmp_path/'absorb.ini')
    with open(filename,'w') as out:
        out.write("[global]\nseed = 3\n[make-dataset]\nn_pairs = 2\nn_frames = 5\n")
    books = str(workdir/'codebooks.json')
    assert run('make-dataset', '-c', filename, outdir=tmp_path, codebooks=books) == 0
    dataset = PairedCodeDataset.read(str(tmp_path/'dataset.bin'))
    assert dataset.clean.shape == (2,5,2)

    # Flags override the config file
    assert run('make-dataset', '-c', filename, outdir=tmp_path, codebooks=books,
               n_pairs=3) == 0
    dataset = PairedCodeDataset.read(str(tmp_path/'dataset.bin'))
    assert dataset.clean.shape == (3,5,2)
    config = fileio.read_json(str(tmp_path/'config.json'))
    assert config['command'] == 'make-dataset'
    check_dict(dict(seed=3, n_pairs=3, n_frames=5), config['config'])

def test_config_replay(workdir, tmp_path):
    # The snapshot of a run reproduces it, in either format
    original = tmp_path/'original'
    assert run('train-codebooks', outdir=original, seed=7, **CODEBOOKS) == 0
    for name in ('config.ini', 'config.json'):
        outdir = tmp_path/name.split('.')[1]
        assert run('train-codebooks', '-c', str(original/name), outdir=outdir) == 0
        a = open(str(original/'codebooks.json'),'rb').read()
        b = open(str(outdir/'codebooks.json'),'rb').read()
        assert a == b
    config = fileio.read_json(str(tmp_path/'ini'/'config.json'))
    check_dict(dict(seed=7, depth=2, codebook_size=4, n_pairs=4, wav=None), config['config'])

    books = str(workdir/'codebooks.json')
    first = tmp_path/'first'
    assert run('make-dataset', outdir=first, codebooks=books, snr_db=5.0, **DATASET) == 0
    assert run('make-dataset', '-c', str(first/'config.ini'),
               outdir=tmp_path/'again') == 0
    config = fileio.read_json(str(tmp_path/'again'/'config.json'))
    assert config['config']['snr_db'] == 5.0
    a = open(str(first/'dataset.bin'),'rb').read()
    b = open(str(tmp_path/'again'/'dataset.bin'),'rb').read()
    assert a == b

def test_config_malformed(tmp_path):
    filename = str(tmp_path/'bad.ini')
    with open(filename,'w') as out:
        out.write("seed = 3\n")
    assert run('train-codebooks', '-c', filename, outdir=tmp_path) == 2
    with open(filename,'w') as out:
        out.write("[global]\nseed = three\n")
    assert run('train-codebooks', '-c', filename, outdir=tmp_path) == 2
    filename = str(tmp_path/'bad.json')
    with open(filename,'w') as out:
        out.write("{\"seed\": ")
    assert run('train-codebooks', '-c', filename, outdir=tmp_path) == 2
    assert run('train-codebooks', '-c', str(tmp_path/'missing.ini'), outdir=tmp_path) == 2

def test_train_initialization(workdir):
    books = CodebookSet.read(str(workdir/'codebooks.json'))
    model = RQDiT.read(str(workdir/'model.bin'), books)
    config = RQDiTConfig.preset('desk', K=4, D=2, H=4)
    init = RQDiT(config, books, seed=0)
    for k,v in init.params.items():
        np.testing.assert_equal(model.params[k], v.astype('<f4'))
    summary = fileio.read_json(str(workdir/'summary.json'))
    assert summary['steps'] == 0
    assert not os.path.exists(str(workdir/'metrics.csv'))

def test_train_steps(workdir, tmp_path):
    books = str(workdir/'codebooks.json')
    data = str(workdir/'dataset.bin')
    assert run('train', outdir=tmp_path, codebooks=books, dataset=data,
               steps=3, batch_size=2, n_eval=2) == 0
    rec = fileio.csv2rec(str(tmp_path/'metrics.csv'))
    assert len(rec) == 3
    summary = fileio.read_json(str(tmp_path/'summary.json'))
    np.testing.assert_allclose(summary['uniform_dce'], np.log(4))

def test_codebook_mismatch(workdir, tmp_path):
    assert run('train-codebooks', outdir=tmp_path, **dict(CODEBOOKS, codebook_size=8)) == 0
    assert run('train', outdir=tmp_path, codebooks=tmp_path/'codebooks.json',
               dataset=workdir/'dataset.bin', steps=0) == 2

def test_enhance(workdir, tmp_path):
    infile = str(tmp_path/'noisy.wav')
    t = np.arange(1600)/16000.
    fileio.wav_write(infile, 0.5*np.sin(2*np.pi*440*t))
    opts = dict(codebooks=workdir/'codebooks.json', checkpoint=workdir/'model.bin',
                input=infile, n_steps=1)
    assert run('enhance', output=tmp_path/'a.wav', **opts) == 0
    assert run('enhance', output=tmp_path/'b.wav', **opts) == 0

    samples, rate = fileio.wav_read(str(tmp_path/'a.wav'))
    assert rate == 16000
    assert len(samples) == 1600
    assert open(str(tmp_path/'a.wav'),'rb').read() == open(str(tmp_path/'b.wav'),'rb').read()

    trace = SampleTrace.read(str(tmp_path/'a.trace.jsonl'))
    assert trace.nfe == 1
    assert (trace.L, trace.D) == (5, 2)
    assert trace.final_mask_count == 0

    assert run('enhance', output=tmp_path/'c.wav', **dict(opts, input=tmp_path/'nope.wav')) == 2
    opts.pop('input')
    assert run('enhance', output=tmp_path/'c.wav', **opts) == 2

def test_sample(workdir, tmp_path):
    assert run('sample', outdir=tmp_path, codebooks=workdir/'codebooks.json',
               checkpoint=workdir/'model.bin', dataset=workdir/'dataset.bin',
               index=2, n_steps=4) == 0
    out = fileio.read_json(str(tmp_path/'codes.json'))
    assert np.shape(out['generated']) == (8,2)
    assert 0 <= out['accuracy'] <= 1
    trace = SampleTrace.read(str(tmp_path/'trace.jsonl'))
    assert trace.nfe <= 4

    assert run('sample', outdir=tmp_path, codebooks=workdir/'codebooks.json',
               checkpoint=workdir/'model.bin', dataset=workdir/'dataset.bin',
               index=6) == 2

def test_sweep_steps(workdir, tmp_path):
    assert run('sweep-steps', outdir=tmp_path, codebooks=workdir/'codebooks.json',
               checkpoint=workdir/'model.bin', dataset=workdir/'dataset.bin',
               steps='1 4 64', n_items=3) == 0
    rec = fileio.csv2rec(str(tmp_path/'sweep.csv'))
    np.testing.assert_equal(rec['n_steps'], [1,4,64])
    assert np.all(rec['nfe_max'] <= np.minimum(rec['n_steps'], 8*2 + 1))
    assert rec['nfe_max'][0] == 1
    assert len(np.unique(rec['dce'])) == 1

def test_eval(workdir, tmp_path):
    assert run('eval', outdir=tmp_path, codebooks=workdir/'codebooks.json',
               checkpoint=workdir/'model.bin', dataset=workdir/'dataset.bin',
               n_items=3, n_steps=4) == 0
    report = fileio.read_json(str(tmp_path/'eval.json'))
    for key in ('dce','accuracy','noisy_accuracy','snr_improvement_db'):
        assert key in report
    assert report['snr_domain'] == 'latent'
    assert len(report['codec_only_snr_db']) == 2
    rec = fileio.csv2rec(str(tmp_path/'snr_bins.csv'))
    assert rec['n_pairs'].sum() == 3

def test_verify_corrupt_checkpoint(workdir, tmp_path):
    checkpoint = str(tmp_path/'model.bin')
    data = bytearray(open(str(workdir/'model.bin'),'rb').read())
    data[:4] = np.array([np.nan], dtype='<f4').tobytes()
    with open(checkpoint,'wb') as out:
        out.write(bytes(data))
    with open(str(tmp_path/'model.json'),'w') as out:
        out.write(open(str(workdir/'model.json')).read())

    assert run('verify', outdir=tmp_path, suite='gradient-check', checkpoint=checkpoint,
               codebooks=workdir/'codebooks.json') == 1
    report = fileio.read_json(str(tmp_path/'verify.json'))
    assert not report['passed']
    assert 'clean_in.w1' in report['checks'][0]['detail']

def test_checkpoint_model_field(workdir, tmp_path):
    # The manifest names the class that reads the checkpoint
    checkpoint = str(tmp_path/'model.bin')
    with open(checkpoint,'wb') as out:
        out.write(open(str(workdir/'model.bin'),'rb').read())
    opts = dict(outdir=tmp_path, codebooks=workdir/'codebooks.json', checkpoint=checkpoint,
                dataset=workdir/'dataset.bin', index=0, n_steps=1)
    assert run('sample', **opts) == 2
    manifest = fileio.read_json(str(workdir/'model.json'))
    for name in ('tabular', None):
        fileio.write_json(str(tmp_path/'model.json'), dict(manifest, model=name))
        assert run('sample', **opts) == 2
    fileio.write_json(str(tmp_path/'model.json'), manifest)
    assert run('sample', **opts) == 0

def test_verify(tmp_path):
    assert run('verify', outdir=tmp_path, suite='forward-marginal posterior-equivalence') == 0
    report = fileio.read_json(str(tmp_path/'verify.json'))
    assert report['passed']
    assert report['suites'] == ['forward-marginal','posterior-equivalence']

if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__]))
