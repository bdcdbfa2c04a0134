"""
Common utilities for the yaml files of the SNOW toolbox: configuration files and
dataset manifests.

A manifest lists the images of a dataset and the mask container of each, relative to
the manifest's directory:

    schema_version: 1
    dataset: toy
    classes: [epithelial, lymphocyte, neutrophil]
    images:
    - image_id: img_000
      container: masks/img_000.snwb
      metadata: {patient: P1}
    provenance: {}
"""
import os
import re
import tempfile
from dataclasses import dataclass, field

import numpy as np
import yaml

from SNOW_toolbox.annotations import (ConfigError, CorruptFileError, DataError, Dataset, MissingFileError,
                                      VersionUnsupportedError)
from SNOW_toolbox.utilities import read_container, write_container

MANIFEST_VERSION = 1
CONFIG_SECTIONS = ('path_params', 'noise_params', 'stop_params', 'eval_params', 'tile_params')


def remove_numpy(data):
    # recursively replace numpy scalars and arrays by python types before writing yaml
    if isinstance(data, dict):
        return {k: remove_numpy(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [remove_numpy(v) for v in data]
    if isinstance(data, np.ndarray):
        return remove_numpy(data.tolist())
    if isinstance(data, np.bool_):
        return bool(data)
    if isinstance(data, np.integer):
        return int(data)
    if isinstance(data, np.floating):
        return float(data)
    return data


def load_yaml(fname_input):
    # Import a .yaml file
    if not os.path.isfile(fname_input):
        raise MissingFileError('{} does not exist'.format(fname_input))
    with open(fname_input) as f:
        try:
            return yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise CorruptFileError('{} is not valid yaml: {}'.format(fname_input, err)) from err


def atomic_write(fname, text):
    '''Write text to a temporary file next to fname, then rename it over fname'''
    outdir = os.path.dirname(os.path.abspath(fname))
    os.makedirs(outdir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=outdir, prefix='.' + os.path.basename(fname), suffix='.tmp')
    try:
        with os.fdopen(fd, 'w') as f:
            f.write(text)
        os.replace(tmp, fname)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_yaml(outdir, fname, data_out):
    if outdir:
        fname = os.path.join(outdir, fname)
    text = yaml.safe_dump(remove_numpy(data_out), sort_keys=False, default_flow_style=None, width=float('inf'))
    atomic_write(fname, text)
    return fname


def load_config(fname_input):
    '''
    Load a SNOW configuration file

    Returns:
    --------
    config: dict
        One dictionary per section of CONFIG_SECTIONS, empty when absent
    '''
    data = load_yaml(fname_input) or {}
    if not isinstance(data, dict):
        raise ConfigError('{} must hold a mapping of parameter sections'.format(fname_input))
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError('Unknown configuration section(s) in {}: {}'.format(fname_input, ', '.join(sorted(unknown))),
                          parameter=sorted(unknown)[0])
    return {section: dict(data.get(section) or {}) for section in CONFIG_SECTIONS}


# ------------------------------------- Manifests -------------------------------------
def sanitize_id(image_id):
    return re.sub(r'[^A-Za-z0-9._-]', '_', str(image_id))


@dataclass(frozen=True)
class DatasetManifest():
    '''
    dataset: str
    classes: list of class names 1..K
    images: list of {'image_id', 'container', 'metadata'}, container paths relative
        to ``root``
    provenance: dict
    root: directory of the manifest file
    '''
    dataset: str
    classes: list
    images: list
    provenance: dict = field(default_factory=dict)
    root: str = '.'

    @property
    def K(self):
        return len(self.classes)

    def container_path(self, entry):
        return os.path.join(self.root, entry['container'])

    def to_dict(self):
        return {'schema_version': MANIFEST_VERSION,
                'dataset': self.dataset,
                'classes': list(self.classes),
                'images': [{'image_id': e['image_id'], 'container': e['container'],
                            'metadata': e.get('metadata') or {}} for e in self.images],
                'provenance': self.provenance or {}}


def load_manifest(fname):
    '''
    Read and check a manifest: schema version, unique image ids, existing containers
    '''
    data = load_yaml(fname)
    if not isinstance(data, dict) or 'images' not in data or 'classes' not in data:
        raise CorruptFileError('{} is not a dataset manifest'.format(fname))
    version = data.get('schema_version')
    if version != MANIFEST_VERSION:
        raise VersionUnsupportedError('{}: manifest schema version {} is not supported'.format(fname, version))
    if not isinstance(data['classes'], list) or not isinstance(data['images'] or [], list):
        raise CorruptFileError('{}: classes and images must be lists'.format(fname))

    manifest = DatasetManifest(dataset=data.get('dataset') or os.path.splitext(os.path.basename(fname))[0],
                               classes=list(data['classes']),
                               images=list(data['images'] or []),
                               provenance=dict(data.get('provenance') or {}),
                               root=os.path.dirname(os.path.abspath(fname)))
    seen = set()
    for k, entry in enumerate(manifest.images):
        if not isinstance(entry, dict):
            raise CorruptFileError('{}: image entry {} is not a mapping'.format(fname, k))
        for key in ('image_id', 'container'):
            if key not in entry:
                raise CorruptFileError('{}: image entry {} has no {!r}'.format(fname, k, key))
        if entry['image_id'] in seen:
            raise DataError('{}: duplicate image_id {}'.format(fname, entry['image_id']))
        seen.add(entry['image_id'])
        if not os.path.isfile(manifest.container_path(entry)):
            raise MissingFileError('{}: container {} of image {} does not exist'.format(
                fname, entry['container'], entry['image_id']))
    return manifest


def save_manifest(manifest, fname):
    return save_yaml('', fname, manifest.to_dict())


def load_dataset(fname, predicted=False):
    '''
    Load a manifest and all of its containers into a Dataset

    Parameters:
    -----------
    fname: str
        manifest path
    predicted: bool
        Read the containers as PredictedImage (OTHER class allowed)
    '''
    manifest = load_manifest(fname)
    images = [read_container(manifest.container_path(e), e['image_id'], e.get('metadata'), predicted)
              for e in manifest.images]
    return Dataset(manifest.dataset, manifest.classes, images, manifest.provenance)


def save_dataset(dataset, fname, provenance=None):
    '''
    Write the containers of a dataset to masks/ next to ``fname``, then the manifest

    Parameters:
    -----------
    dataset: Dataset
    fname: str
        manifest path
    provenance: dict, optional
        Overrides dataset.provenance

    Returns:
    --------
    written: list of str
        Every file written, manifest last
    '''
    root = os.path.dirname(os.path.abspath(fname))
    os.makedirs(os.path.join(root, 'masks'), exist_ok=True)
    entries, written, used = [], [], set()
    for img in dataset.images:
        stem = sanitize_id(img.image_id)
        name, k = stem, 1
        while name in used:
            name, k = '{}-{}'.format(stem, k), k + 1
        used.add(name)
        container = 'masks/{}.snwb'.format(name)
        write_container(os.path.join(root, container), img)
        written.append(os.path.join(root, container))
        entries.append({'image_id': img.image_id, 'container': container, 'metadata': img.metadata})

    manifest = DatasetManifest(dataset.name, list(dataset.class_names), entries,
                               dataset.provenance if provenance is None else provenance, root)
    written.append(save_manifest(manifest, fname))
    return written
