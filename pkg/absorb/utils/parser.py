#!/usr/bin/env python
"""
Argument parsing, logging setup, and config-file handling.
"""
import os
import json
import logging
import argparse
import configparser
from collections import OrderedDict as odict

from absorb import __version__
from absorb.utils.errors import UsageError

class SpecialFormatter(logging.Formatter):
    """
    Class for overloading log formatting based on level.
    """
    FORMATS = {'DEFAULT'       : "%(message)s",
               logging.WARNING : "WARNING: %(message)s",
               logging.ERROR   : "ERROR: %(message)s",
               logging.DEBUG   : "DEBUG: %(message)s"}

    def format(self, record):
        self._style._fmt = self.FORMATS.get(record.levelno, self.FORMATS['DEFAULT'])
        return logging.Formatter.format(self, record)

class VerboseAction(argparse._StoreTrueAction):
    """
    Class for setting logging level from verbosity.
    """
    def __call__(self, parser, namespace, values, option_string=None):
        super(VerboseAction,self).__call__(parser, namespace, values, option_string)
        if self.const: logging.getLogger().setLevel(logging.DEBUG)

class Parser(argparse.ArgumentParser):
    def __init__(self,*args,**kwargs):
        super(Parser,self).__init__(*args,**kwargs)
        self.add_argument('-v','--verbose',action=VerboseAction,
                          help='output verbosity')
        self.add_argument('-V','--version', action='version',
                          version='absorb v'+__version__,
                          help="print version number and exit")

    def error(self, message):
        # Usage errors exit with code 2 through the CLI's error handler
        raise UsageError(message)

def setdefaults(kwargs,defaults):
    for k,v in defaults.items():
        kwargs.setdefault(k,v)
    return kwargs

def _convert(value, default):
    """ Convert a config-file string to the type of its default. """
    if isinstance(default, bool):
        return value.strip().lower() in ('1','true','yes','on')
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, (list, tuple)):
        items = [v for v in value.replace(',',' ').split() if v]
        if len(default): return [type(default[0])(v) for v in items]
        return items
    if default is None and value.strip().lower() == 'none':
        return None
    return value

def _format(value):
    """ Render a value so that `_convert` reads it back unchanged. """
    if value is None: return 'none'
    if isinstance(value, bool): return 'true' if value else 'false'
    if isinstance(value, float): return repr(value)
    if isinstance(value, (list, tuple)): return ' '.join(_format(v) for v in value)
    return str(value)

def write_config(filename, section, config):
    """ Write resolved parameters as a config file section. """
    cp = configparser.ConfigParser(interpolation=None)
    cp[section] = odict([(k,_format(v)) for k,v in config.items()])
    with open(filename,'w') as out:
        cp.write(out)
    return filename

def _read_json_config(filename, section):
    try:
        with open(filename) as f:
            snapshot = json.load(f)
    except ValueError as e:
        msg = "Malformed config file %s: %s"%(filename,e)
        raise UsageError(msg)
    if not isinstance(snapshot, dict) or not isinstance(snapshot.get('config'), dict):
        msg = "Config snapshot %s has no 'config' table"%filename
        raise UsageError(msg)
    command = snapshot.get('command')
    if command is not None and command != section:
        logging.warning("Snapshot %s was written by '%s', not '%s'"%(filename,command,section))
    return [('snapshot', snapshot['config'].items())]

def read_config(filename, section, defaults, types=None):
    """Read one section (plus [global]) of a config file.

    INI files hold `key = value` lines under [global] and per-command
    sections. A JSON run snapshot (config.json) is accepted as well.

    Parameters:
    -----------
    filename : Path to the config file (or None).
    section  : Subcommand section to read.
    defaults : Ordered dict of defaults used for type conversion.
    types    : Converters for keys whose default is None.

    Returns:
    --------
    config   : Ordered dict of values found in the file.
    """
    config = odict()
    if filename is None: return config
    if not os.path.exists(filename):
        msg = "Config file not found: %s"%filename
        raise UsageError(msg)
    types = types or dict()

    if filename.endswith('.json'):
        items = _read_json_config(filename, section)
        convert = lambda value, key: value
    else:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(filename)
        except configparser.Error as e:
            msg = "Malformed config file %s: %s"%(filename,e)
            raise UsageError(msg)
        items = [(name, cp.items(name)) for name in ('global', section)
                 if cp.has_section(name)]
        def convert(value, key):
            if key in types and value.strip().lower() != 'none':
                return types[key](value)
            return _convert(value, defaults[key])

    for name,values in items:
        for key,value in values:
            key = key.replace('-','_')
            if key not in defaults:
                logging.warning("Unrecognized config key [%s] %s"%(name,key))
                continue
            try:
                config[key] = convert(value, key)
            except ValueError:
                msg = "Bad value for [%s] %s: %s"%(name,key,value)
                raise UsageError(msg)
    return config

def resolve(args, defaults, section, types=None):
    """Resolve parameters: defaults < config file < command-line flags.

    Flags left at `None` on the namespace do not override.
    """
    resolved = odict(defaults)
    resolved.update(read_config(getattr(args,'config',None), section, defaults, types))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None: resolved[key] = value
    return resolved

logger = logging.getLogger()
if not any(isinstance(h.formatter, SpecialFormatter) for h in logger.handlers):
    handler = logging.StreamHandler()
    handler.setFormatter(SpecialFormatter())
    logger.addHandler(handler)
logger.setLevel(logging.INFO)
