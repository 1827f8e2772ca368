#!/usr/bin/env python
# -----------------------------------------------------------------------------
# File Name : experiment_tools.py
#
# Run directories and provenance files.
#
# Licence : Apache License, Version 2.0
# -----------------------------------------------------------------------------

import glob
import os
import tarfile
import time
import fnmatch

import numpy as np
import yaml


def annotate(d, text='', filename='notes.txt'):
    """Create a file FILENAME in the directory D with contents TEXT."""
    with open(os.path.join(d, filename), 'w') as f:
        f.write(text)


def echo_config(d, config, filename='config.yaml'):
    """Write the effective configuration CONFIG (a dict) as YAML into directory D."""
    annotate(d, yaml.safe_dump(config, default_flow_style=False, sort_keys=True), filename)


def save_source(directory, root='.'):
    """Archive every Python file of the project found under ROOT into DIRECTORY."""
    all_src = glob.glob(os.path.join(root, '*.py'))
    for package in ('eyeshift', 'networks', 'data'):
        all_src += glob.glob(os.path.join(root, package, '*.py'))
        all_src += glob.glob(os.path.join(root, package, '*.yaml'))
    with tarfile.open(os.path.join(directory, 'exp_scripts.tar.bz2'), 'w:bz2') as h:
        for i in sorted(all_src):
            h.add(i, arcname=os.path.relpath(i, root))


def mksavedir(pre='results/'):
    """
    Creates a results directory in the subdirectory `pre`.
    The directory name is given by ###__dd-mm-YYYY, where ### is the next unused 3-digit number.
    """
    if not pre.endswith('/'):
        pre += '/'
    if not os.path.exists(pre):
        os.makedirs(pre)
    prelist = np.sort(fnmatch.filter(os.listdir(pre), '[0-9][0-9][0-9]__*'))

    if len(prelist) == 0:
        expDirN = '001'
    else:
        expDirN = '%03d' % (
            int((prelist[len(prelist) - 1].split('__'))[0]) + 1)

    directory = os.path.join(pre, expDirN + '__' + '%d-%m-%Y')
    directory = time.strftime(directory, time.localtime())
    assert not os.path.exists(directory)

    os.mkdir(directory)
    directory += '/'
    return directory


def prepare_run_dir(out_dir, config, banner=None):
    """Create OUT_DIR (a fresh numbered one if OUT_DIR is None) and write its provenance files."""
    if out_dir is None:
        out_dir = mksavedir('results/')
    os.makedirs(out_dir, exist_ok=True)
    echo_config(out_dir, config)
    annotate(out_dir, text=os.path.abspath(out_dir), filename='log_dir.txt')
    if banner:
        annotate(out_dir, text=banner, filename='notes.txt')
    return out_dir
