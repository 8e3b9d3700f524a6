#!/usr/bin/env python
"""
Deal with file input/output
"""
import os
import json
import struct
import getpass
import platform
import datetime
import logging
from collections import OrderedDict as odict

import numpy as np
import pandas as pd
from scipy.io import wavfile

from absorb import __version__
from absorb.utils.errors import FormatError
from absorb.utils.constants import SAMPLE_RATE

def get_username():
    try: return getpass.getuser()
    except Exception: return 'unknown'

def get_hostname():
    return platform.node()

def get_datadir():
    from os.path import abspath,dirname,join
    return join(dirname(dirname(abspath(__file__))),'data')

def get_datafile(filename):
    dirname = get_datadir()
    filepath = os.path.join(dirname,filename)

    if not os.path.exists(filepath):
        msg = "File does not exists: %s"%filepath
        raise IOError(msg)
    else:
        return filepath

def mkdir(path):
    if path and not os.path.exists(path):
        logging.debug("Creating %s..."%path)
        os.makedirs(path)
    return path

def csv2rec(filename, **kwargs):
    kwargs.setdefault('comment','#')
    kwargs.setdefault('skip_blank_lines',True)
    return pd.read_csv(filename,**kwargs).to_records(index=False)

def rec2csv(filename,data,**kwargs):
    """
    Write a record array (or DataFrame/dict of columns) to csv with the
    absorb header.
    """
    df = pd.DataFrame(data)

    kwargs.setdefault('float_format','%.10g')
    kwargs.setdefault('index',False)
    kwargs.setdefault('na_rep','nan')

    with open(filename,'w') as out:
        out.write(header())
        df.to_csv(out,**kwargs)

def write_json(outfile,data,**kwargs):
    kwargs.setdefault('indent',4)
    kwargs.setdefault('sort_keys',True)
    with open(outfile,'w') as out:
        out.write(json.dumps(data,**kwargs))
        out.write('\n')

def read_json(filename,**kwargs):
    with open(filename,'r') as f:
        return json.loads(f.read(),**kwargs)

def write_jsonl(outfile,records):
    with open(outfile,'w') as out:
        for r in records:
            out.write(json.dumps(r,sort_keys=True))
            out.write('\n')

def read_jsonl(filename):
    with open(filename,'r') as f:
        return [json.loads(l) for l in f if l.strip()]

def header(date=False):
    """Comment block identifying who (and optionally when) wrote a file.

    The date line is omitted unless requested.
    """
    header  = "# author: %s@%s\n"%(get_username(),get_hostname())
    if date:
        now = datetime.datetime.utcnow().strftime('%Y/%m/%d %H:%M:%S')
        header += "# date: %s UTC\n"%(now)
    header += "# version: absorb v%s\n"%(__version__)
    return header

############################################################
# Binary payloads

def write_payload(filename, arrays, dtype, manifest):
    """Write arrays to a flat binary file with a JSON manifest.

    Parameters:
    -----------
    filename : Output path of the binary payload; manifest goes to
               <base>.json
    arrays   : Ordered dict of name -> array
    dtype    : Little-endian storage dtype (e.g., '<f4', '<u2')
    manifest : Extra manifest entries

    Returns:
    --------
    manifest : The written manifest
    """
    entries = []
    offset = 0
    with open(filename,'wb') as out:
        for name,arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=dtype)
            data.tofile(out)
            entries.append(odict([('name',name),('shape',list(data.shape)),
                                  ('offset',offset)]))
            offset += data.nbytes

    manifest = odict(manifest)
    manifest['dtype'] = np.dtype(dtype).str
    manifest['payload'] = os.path.basename(filename)
    manifest['tensors'] = entries
    write_json(os.path.splitext(filename)[0]+'.json', manifest)
    return manifest

def read_payload(filename):
    """ Read a binary payload written by `write_payload`. """
    manifest = read_json(os.path.splitext(filename)[0]+'.json')
    dtype = np.dtype(manifest['dtype'])
    raw = np.fromfile(filename, dtype=np.uint8)
    arrays = odict()
    for entry in manifest['tensors']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape))
        start = entry['offset']
        stop = start + count*dtype.itemsize
        if stop > len(raw):
            msg = "Payload truncated at tensor '%s'"%entry['name']
            raise FormatError(msg)
        arrays[entry['name']] = raw[start:stop].view(dtype).reshape(shape)
    return arrays, manifest

############################################################
# WAV

def _parse_wav_header(data):
    """ Validate a RIFF/WAVE header; return (channels, rate, bits). """
    if len(data) < 12:
        raise FormatError("WAV field 'RIFF': file too short")
    riff, size, wave = struct.unpack('<4sI4s',data[:12])
    if riff != b'RIFF':
        raise FormatError("WAV field 'RIFF': found %r"%riff)
    if wave != b'WAVE':
        raise FormatError("WAV field 'WAVE': found %r"%wave)
    if size != len(data) - 8:
        msg = "WAV field 'chunk size': header %i, file %i"%(size,len(data)-8)
        raise FormatError(msg)

    fmt = None
    pos = 12
    while pos + 8 <= len(data):
        cid, csize = struct.unpack('<4sI',data[pos:pos+8])
        if cid == b'fmt ':
            if csize < 16:
                raise FormatError("WAV field 'fmt size': %i"%csize)
            fmt = struct.unpack('<HHIIHH',data[pos+8:pos+24])
        elif cid == b'data':
            if fmt is None:
                raise FormatError("WAV field 'fmt ': missing before data")
            if pos + 8 + csize > len(data):
                raise FormatError("WAV field 'data size': %i"%csize)
            break
        pos += 8 + csize + (csize % 2)
    else:
        raise FormatError("WAV field 'data': chunk not found")

    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise FormatError("WAV field 'audio format': %i (expected PCM)"%audio_format)
    if channels != 1:
        raise FormatError("WAV field 'channels': %i (expected mono)"%channels)
    if bits != 16:
        raise FormatError("WAV field 'bits per sample': %i (expected 16)"%bits)
    return channels, rate, bits

def wav_read(filename):
    """Read a 16-bit PCM mono WAV file.

    Returns:
    --------
    samples, rate : Float samples in [-1, 1) and the sample rate
    """
    with open(filename,'rb') as f:
        data = f.read()
    _parse_wav_header(data)
    rate, samples = wavfile.read(filename)
    return samples.astype(np.float64)/32768., rate

def wav_write(filename, samples, rate=SAMPLE_RATE):
    """ Write float samples in [-1, 1] as 16-bit PCM mono. """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise FormatError("WAV field 'channels': expected mono samples")
    pcm = quantize_pcm16(samples)
    logging.debug('Writing %s...'%filename)
    wavfile.write(filename, int(rate), pcm)
    return pcm

def quantize_pcm16(samples):
    """ Map floats in [-1, 1] to int16, clipping at full scale. """
    scaled = np.round(np.asarray(samples)*32768.)
    return np.clip(scaled, -32768, 32767).astype('<i2')

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
