from setuptools import setup, find_packages
import glob
import re

NAME = 'absorb'
CLASSIFIERS = """\
Development Status :: 2 - Pre-Alpha
Intended Audience :: Science/Research
Intended Audience :: Developers
Programming Language :: Python
Natural Language :: English
Topic :: Scientific/Engineering
Topic :: Scientific/Engineering :: Artificial Intelligence
Topic :: Multimedia :: Sound/Audio :: Analysis
Operating System :: MacOS
Operating System :: POSIX
License :: OSI Approved :: MIT License
"""
URL = 'https://github.com/absorb/%s'%NAME
DESC = "Conditional absorbing discrete diffusion over residual vector quantized codes"
LONG_DESC = "See %s"%URL

def get_version():
    with open('%s/__init__.py'%NAME) as f:
        return re.search(r"__version__ = '([^']+)'", f.read()).group(1)

setup(
    name=NAME,
    version=get_version(),
    url=URL,
    scripts = glob.glob('bin/*'),
    install_requires=[
        'numpy >= 1.17',
        'scipy >= 1.4',
        'pandas >= 0.25',
        'setuptools',
    ],
    extras_require={'test': ['pytest']},
    packages=find_packages(exclude=['tests']),
    package_data={'absorb':['data/*.json']},
    description=DESC,
    long_description=LONG_DESC,
    platforms='any',
    classifiers = [_f for _f in CLASSIFIERS.split('\n') if _f]
)
