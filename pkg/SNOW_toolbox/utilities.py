# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Readers and writers of the toolbox files: binary mask containers, loss traces,
corruption logs and metric reports.

Mask container layout (little-endian):
    magic       4 bytes     b'SNWB'
    version     u16         1
    width       u32
    height      u32
    instances   u32 x width*height, row-major
    classes     u16 x width*height, row-major, 0 on background
    crc         u32         CRC-32 of all preceding bytes

Functions:
----------
write_container
read_container
read_trace
write_trace
write_log
read_log
report_to_dict
breakdown_to_dict
report_rows
write_report
"""
import json
import logging
import os
import struct
import zlib

import numpy as np
import pandas as pd
import yaml

from SNOW_toolbox.annotations import (BACKGROUND, OTHER, AnnotatedImage, ConfigError, CorruptFileError, EmptyTraceError,
                                      InconsistentPlanesError, MissingFileError, PredictedImage,
                                      VersionUnsupportedError)
from SNOW_toolbox.corruption import CorruptionLog
from SNOW_toolbox.stopping import LossTrace, parse_trace_record

logger = logging.getLogger(__name__)

MAGIC = b'SNWB'
CONTAINER_VERSION = 1
HEADER = struct.Struct('<4sHII')
CRC = struct.Struct('<I')
REPORT_FORMATS = ('yaml', 'csv', 'txt')
UNDEFINED = '-'


# ------------------------------------ Containers ------------------------------------
def _class_plane(image):
    ids, inverse = np.unique(image.instance_map, return_inverse=True)
    lut = np.array([BACKGROUND if i == BACKGROUND else image.classes[int(i)] for i in ids], dtype='<u2')
    return lut[inverse.reshape(-1)].reshape(image.instance_map.shape)


def container_bytes(image):
    '''Serialized mask container of an image'''
    missing = set(int(i) for i in image.ids) - set(image.classes)
    if missing:
        raise InconsistentPlanesError('Image {}: no class for instance id(s) {}'.format(
            image.image_id, sorted(missing)))
    body = (HEADER.pack(MAGIC, CONTAINER_VERSION, image.width, image.height)
            + image.instance_map.astype('<u4').tobytes()
            + _class_plane(image).tobytes())
    return body + CRC.pack(zlib.crc32(body))


def write_container(path, image):
    '''
    Write an AnnotatedImage or PredictedImage to a mask container

    Parameters:
    -----------
    path: str
    image: AnnotatedImage
    '''
    with open(path, 'wb') as f:
        f.write(container_bytes(image))


def read_container(path, image_id=None, metadata=None, predicted=False):
    '''
    Read a mask container

    Checks run in the order size, CRC, magic, version, plane consistency.

    Parameters:
    -----------
    path: str
    image_id: str, optional
        Defaults to the file name without extension
    metadata: dict, optional
    predicted: bool
        Return a PredictedImage, allowing the OTHER class

    Returns:
    --------
    AnnotatedImage or PredictedImage
    '''
    if not os.path.isfile(path):
        raise MissingFileError('Mask container {} does not exist'.format(path))
    with open(path, 'rb') as f:
        data = f.read()

    if len(data) < HEADER.size + CRC.size:
        raise CorruptFileError('{}: {} bytes is too short for a mask container'.format(path, len(data)))
    magic, version, width, height = HEADER.unpack_from(data)
    expected = HEADER.size + 6 * width * height + CRC.size
    if len(data) != expected:
        raise CorruptFileError('{}: expected {} bytes for {}x{} planes, found {}'.format(
            path, expected, width, height, len(data)))
    (crc,) = CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(data[:-CRC.size]) != crc:
        raise CorruptFileError('{}: CRC-32 mismatch'.format(path))
    if magic != MAGIC:
        raise CorruptFileError('{}: bad magic {!r}'.format(path, magic))
    if version != CONTAINER_VERSION:
        raise VersionUnsupportedError('{}: container version {} is not supported'.format(path, version))

    n = width * height
    instances = np.frombuffer(data, dtype='<u4', count=n, offset=HEADER.size).reshape(height, width)
    classes = np.frombuffer(data, dtype='<u2', count=n, offset=HEADER.size + 4 * n).reshape(height, width)

    pairs = np.unique(np.column_stack([instances.reshape(-1), classes.reshape(-1)]), axis=0)
    background = pairs[pairs[:, 0] == BACKGROUND]
    if np.any(background[:, 1] != BACKGROUND):
        raise InconsistentPlanesError('{}: background pixels carry a class'.format(path))
    pairs = pairs[pairs[:, 0] != BACKGROUND]
    ids, counts = np.unique(pairs[:, 0], return_counts=True)
    if np.any(counts > 1):
        raise InconsistentPlanesError('{}: instance id(s) {} carry more than one class'.format(
            path, ids[counts > 1].tolist()))
    if np.any(pairs[:, 1] == BACKGROUND):
        raise InconsistentPlanesError('{}: instance pixels labelled as background class'.format(path))
    if not predicted and np.any(pairs[:, 1] == OTHER):
        raise InconsistentPlanesError('{}: OTHER class in an annotation container'.format(path))

    if image_id is None:
        image_id = os.path.splitext(os.path.basename(path))[0]
    cls = PredictedImage if predicted else AnnotatedImage
    return cls(image_id, instances, {int(i): int(c) for i, c in pairs}, metadata or {})


# ----------------------------------- Loss traces -----------------------------------
def read_trace(path):
    '''
    Read a line-delimited loss-trace file

    Returns:
    --------
    traces: dict
        stage -> LossTrace, only the stages present
    '''
    if not os.path.isfile(path):
        raise MissingFileError('Loss trace {} does not exist'.format(path))
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            rec = parse_trace_record(line, lineno)
            if rec is not None:
                records.append(rec)
    if not records:
        raise EmptyTraceError('Loss trace {} holds no records'.format(path))
    stages = sorted({rec['stage'] for rec in records})
    return {stage: LossTrace.from_records(records, stage) for stage in stages}


def write_trace(path, *traces):
    '''Write LossTraces as line-delimited {"stage", "epoch", "loss"} records'''
    with open(path, 'w') as f:
        for trace in traces:
            for rec in trace.to_records():
                f.write(json.dumps({'stage': trace.stage or 1, 'epoch': rec['epoch'], 'loss': rec['loss']}) + '\n')


# --------------------------------- Corruption logs ---------------------------------
def _plain(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError('{!r} is not JSON serializable'.format(value))


def write_log(path, log):
    '''
    Write a CorruptionLog as JSON lines: a {"noise_spec": ...} header, then one line per
    record
    '''
    with open(path, 'w') as f:
        f.write(json.dumps({'noise_spec': log.noise_spec}, sort_keys=True, default=_plain) + '\n')
        for rec in log.records:
            f.write(json.dumps(rec, sort_keys=True, default=_plain) + '\n')


def read_log(path):
    if not os.path.isfile(path):
        raise MissingFileError('Corruption log {} does not exist'.format(path))
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    try:
        header = json.loads(lines[0])['noise_spec']
        records = [json.loads(line) for line in lines[1:]]
    except (IndexError, KeyError, ValueError) as err:
        raise CorruptFileError('{} is not a corruption log'.format(path)) from err
    return CorruptionLog(noise_spec=header, records=records)


# ------------------------------------- Reports -------------------------------------
def _fmt(value):
    '''One decimal for ratios and distances, '-' for undefined'''
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return UNDEFINED
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    return round(float(value), 1)


def _fmt_section(section, class_names):
    out = {}
    for key, value in section.items():
        if key == 'per_class':
            out[key] = {class_names[c - 1]: {k: _fmt(v) for k, v in metrics.items()}
                        for c, metrics in sorted(value.items())}
        elif isinstance(value, dict):
            out[key] = {k: _fmt(v) for k, v in value.items()}
        else:
            out[key] = _fmt(value)
    return out


def report_to_dict(report):
    '''
    Plain, rounded copy of a MetricsReport, in the layout of the yaml report
    '''
    names = list(report.class_names)
    raw = report.confusion.raw.tolist()
    raw[0][0] = UNDEFINED
    return {'classes': names,
            'config': dict(report.config),
            'detection': _fmt_section(report.detection, names),
            'segmentation': _fmt_section(report.segmentation, names),
            'classification': _fmt_section(report.classification, names),
            'confusion': {'rows': ['none'] + names,
                          'columns': ['U', 'Other'] + names,
                          'raw': raw,
                          'ncm': [[_fmt(v) for v in row] for row in report.confusion.ncm.tolist()]}}


def breakdown_to_dict(report):
    '''Rounded per-image breakdown of a MetricsReport'''
    names = list(report.class_names)
    return {image_id: {'detection': _fmt_section(entry['detection'], names), 'counts': dict(entry['counts'])}
            for image_id, entry in sorted(report.per_image.items())}


def report_rows(report_dict):
    '''Flat (task, class, metric, value) rows of a report dictionary'''
    rows = []
    for task in ('detection', 'segmentation', 'classification'):
        section = report_dict[task]
        for key, value in section.items():
            if key == 'per_class':
                for name, metrics in value.items():
                    rows += [(task, name, metric, v) for metric, v in metrics.items()]
            elif key == 'overall':
                rows += [(task, 'all', metric, v) for metric, v in value.items()]
            else:
                rows.append((task, 'all', key, value))
    return rows


def _cell(value):
    if isinstance(value, float):
        return '{:.1f}'.format(value)
    return str(value)


def _mean_std(metrics, name):
    mean, std = metrics[name + '_mean'], metrics[name + '_std']
    if mean == UNDEFINED:
        return UNDEFINED
    return '{}({})'.format(_cell(mean), _cell(std))


def report_text(report_dict):
    '''Tabular text rendering of a report dictionary'''
    names = report_dict['classes']
    det, seg, cls = report_dict['detection'], report_dict['segmentation'], report_dict['classification']

    detection = pd.DataFrame([[_cell(det['per_class'][n][m]) for m in ('precision', 'recall', 'f1')] for n in names]
                             + [[_cell(det['overall'][m]) for m in ('precision', 'recall', 'f1')]],
                             index=names + ['Overall'], columns=['P', 'R', 'F1'])
    segmentation = pd.DataFrame([[_mean_std(seg['per_class'][n], 'iou'), _mean_std(seg['per_class'][n], 'hd')]
                                 for n in names]
                                + [[_mean_std(seg['overall'], 'iou'), _mean_std(seg['overall'], 'hd')]],
                                index=names + ['Overall'], columns=['IoU', 'HD'])
    classification = pd.DataFrame([[_cell(cls['per_class'][n][m]) for m in ('nuclei', 'precision', 'recall', 'f1')]
                                   for n in names],
                                  index=names, columns=['Nuclei', 'P', 'R', 'F1'])
    conf = report_dict['confusion']
    raw = pd.DataFrame([[_cell(v) for v in row] for row in conf['raw']],
                       index=conf['rows'], columns=conf['columns'])
    ncm = pd.DataFrame([[_cell(v) for v in row] for row in conf['ncm']],
                       index=conf['rows'][1:], columns=conf['columns'][1:])

    lines = ['Detection', detection.to_string(), '',
             'Segmentation',
             segmentation.to_string(),
             'over-segmented: {}  under-segmented: {}  FP: {}  FN: {}'.format(
                 seg['over_seg_count'], seg['under_seg_count'], seg['fp_count'], seg['fn_count']), '',
             'Classification (balanced accuracy {})'.format(_cell(cls['balanced_accuracy'])),
             classification.to_string(), '',
             'Confusion matrix', raw.to_string(), '',
             'Normalised confusion matrix (%)', ncm.to_string(), '']
    return '\n'.join(lines)


def write_report(report, directory, formats=REPORT_FORMATS, basename='metrics'):
    '''
    Write a MetricsReport (or its report_to_dict form) in the requested formats

    Parameters:
    -----------
    report: MetricsReport or dict
    directory: str
    formats: sequence of str
        any of 'yaml', 'csv', 'txt'
    basename: str

    Returns:
    --------
    paths: list of str
        Written files, in ``formats`` order
    '''
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ConfigError('Unknown report format(s): {}'.format(', '.join(sorted(unknown))), parameter='formats')
    report_dict = report if isinstance(report, dict) else report_to_dict(report)
    os.makedirs(directory, exist_ok=True)

    paths = []
    for fmt in formats:
        path = os.path.join(directory, '{}.{}'.format(basename, fmt))
        if fmt == 'yaml':
            with open(path, 'w') as f:
                yaml.safe_dump(report_dict, f, sort_keys=False, default_flow_style=None)
        elif fmt == 'csv':
            frame = pd.DataFrame([(t, c, m, _cell(v)) for t, c, m, v in report_rows(report_dict)],
                                 columns=['task', 'class', 'metric', 'value'])
            frame.to_csv(path, index=False, lineterminator='\n')
        else:
            with open(path, 'w') as f:
                f.write(report_text(report_dict))
        logger.info('Wrote %s', path)
        paths.append(path)
    return paths


def read_report(path):
    '''Load a yaml report written by write_report'''
    if not os.path.isfile(path):
        raise MissingFileError('Report {} does not exist'.format(path))
    with open(path) as f:
        return yaml.safe_load(f)
