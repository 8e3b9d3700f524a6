#!/usr/bin/env python
"""
Factories for generating objects
"""
import sys
from collections import OrderedDict as odict
import inspect
import importlib

MODELS = odict([
    (None,'UniformModel'),
    ('uniform','UniformModel'),
    ('fixed','FixedModel'),
    ('oracle','ExactOracle'),
    ('exact','ExactOracle'),
    ('tabular','TabularModel'),
    ('rqdit','RQDiT'),
])
MODEL_MODULES = ['absorb.models','absorb.rqdit']

def find_class(cls, modules=None):
    """ Class named `cls` (case-insensitive) defined in one of `modules`. """
    # Format modules into a list
    if modules is None: modules = [__name__]
    elif isinstance(modules,str): modules = [modules]

    for module in modules:
        importlib.import_module(module)

    def fn(member):
        return inspect.isclass(member) and member.__module__ in modules

    classes = odict()
    for module in modules:
        classes.update(inspect.getmembers(sys.modules[module], fn))

    members = odict([(k.lower(),v) for k,v in classes.items()])
    lower = str(cls).lower()
    if lower not in members.keys():
        msg = "Unrecognized class: %s"%(cls)
        raise KeyError(msg)
    return members[lower]

def factory(cls, modules=None, **kwargs):
    """
    Factory for creating objects. Arguments are passed directly to the
    constructor of the chosen class.
    """
    return find_class(cls, modules)(**kwargs)

def model_class(cls=None):
    """ Conditional denoiser class for an alias or class name. """
    cls = MODELS.get(cls.lower() if cls else cls, cls)
    return find_class(cls, MODEL_MODULES)

def model_factory(cls=None, **kwargs):
    """Create a conditional denoiser.

    Parameters:
    -----------
    cls : Model alias ('uniform', 'oracle', 'tabular', 'rqdit') or class name

    Returns:
    --------
    model : The ConditionalModel
    """
    return model_class(cls)(**kwargs)
