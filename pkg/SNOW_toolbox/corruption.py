# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Seeded annotation noise: detection (removal), segmentation (contour distortion and
merging of touching nuclei) and classification (relabelling) noise, with a
provenance log that replays bit-exactly.

Per-class counts are exact: round-half-up(rho * n_i) instances of class i are chosen
by a seeded shuffle of the dataset-wide sorted (image_id, instance id) list. Every
stage and class draws from its own sub-seed, see ``derive_seed``.

Classes:
--------
CorruptionLog

Functions:
----------
apply_detection_noise
apply_classification_noise
distort_contours
merge_adjacent
apply_segmentation_noise
apply_noise_pipeline
replay_log
detection_transition_matrix
classification_transition_matrix
empirical_detection_matrix
empirical_classification_matrix
"""
import hashlib
import logging
import multiprocessing
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from SNOW_toolbox import geometry
from SNOW_toolbox.annotations import (BACKGROUND, DegenerateInputError, InvalidClassCountError,
                                      NoiseSpec, SegmentationNoise, check_rho)

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 6


@dataclass(frozen=True)
class CorruptionLog():
    """
    Provenance of a corruption run.

    Parameters:
    -----------
    noise_spec: dict
        NoiseSpec.to_dict() of the run
    records: tuple of dict
        One event per record, each with 'stage' and 'event' keys:
          population  stage, class_id, n, selected
          remove      image_id, instance_id, class_id
          distort     image_id, instance_id, phase, n_vertices, fallback, kept_original,
                      area_before, area_after
          merge       image_id, kept, absorbed, class_id, border, pixels_added
          relabel     image_id, instance_id, old_class, new_class
    """
    noise_spec: dict = field(default_factory=dict)
    records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(self.records))

    def __len__(self):
        return len(self.records)

    def events(self, event, stage=None):
        return [r for r in self.records
                if r['event'] == event and (stage is None or r['stage'] == stage)]

    def extend(self, other):
        return CorruptionLog(self.noise_spec, self.records + tuple(other.records))

    def summary(self):
        '''Event counts and the realised merge fraction of each class'''
        summary = {'removed': len(self.events('remove')),
                   'distorted': len(self.events('distort')),
                   'fallbacks': sum(1 for r in self.events('distort') if r['fallback']),
                   'merged': len(self.events('merge')),
                   'relabelled': len(self.events('relabel'))}
        fractions = {}
        for pop in self.events('population', 'segmentation'):
            n = pop['n']
            fractions[pop['class_id']] = 2.0 * pop['selected'] / n if n else None
        summary['merge_fraction'] = fractions
        return summary


# ------------------------------------ Helpers ------------------------------------
def derive_seed(seed, stage, key=0):
    '''
    64-bit sub-seed of (master seed, stage tag, key), key being a class id or image id
    '''
    tag = '{}:{}:{}'.format(int(seed), stage, key).encode('utf-8')
    return int.from_bytes(hashlib.blake2b(tag, digest_size=8).digest(), 'little')


def round_half_up(rho, n):
    '''round(rho * n) with halves rounded up, exact for decimal rho'''
    product = Decimal(repr(float(rho))) * n
    return int(product.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _parallel_map(func, jobs, processes):
    if processes is None or processes <= 1 or len(jobs) <= 1:
        return [func(job) for job in jobs]
    with multiprocessing.Pool(processes) as pool:
        return pool.map(func, jobs)


def _stratified_selection(dataset, rho, seed, stage):
    '''
    Yield (class_id, n_i, selected (image_id, instance id) list, rng) for every class
    '''
    for class_id in range(1, dataset.K + 1):
        members = dataset.instances_of_class(class_id)
        k = round_half_up(rho, len(members))
        rng = np.random.default_rng(derive_seed(seed, stage, class_id))
        order = rng.permutation(len(members))[:k]
        yield class_id, len(members), [members[i] for i in order], rng


def _remove_instances(img, removed):
    if not removed:
        return img
    new_map = np.array(img.instance_map)
    new_map[np.isin(new_map, sorted(removed))] = BACKGROUND
    classes = {inst: c for inst, c in img.classes.items() if inst not in removed}
    return img.replace(instance_map=new_map, classes=classes)


def _relabel_instances(img, relabels):
    if not relabels:
        return img
    classes = dict(img.classes)
    classes.update(relabels)
    return img.replace(classes=classes)


# ----------------------------------- Detection -----------------------------------
def apply_detection_noise(dataset, rho, seed):
    '''
    Remove round(rho * n_i) instances of every class i, removed instances become
    background

    Parameters:
    -----------
    dataset: Dataset
    rho: float
        Removal fraction in [0, 1)
    seed: int
        Master seed

    Returns:
    --------
    dataset: Dataset
    log: CorruptionLog
    '''
    check_rho(rho, 'detection_rho')
    if rho == 0:
        return dataset, CorruptionLog()

    logger.info('Applying detection noise, rho = %s', rho)
    removed = {}
    records = []
    for class_id, n, selected, _ in _stratified_selection(dataset, rho, seed, 'detection'):
        records.append({'stage': 'detection', 'event': 'population',
                        'class_id': class_id, 'n': n, 'selected': len(selected)})
        for image_id, inst in selected:
            removed.setdefault(image_id, set()).add(inst)
            records.append({'stage': 'detection', 'event': 'remove', 'image_id': image_id,
                            'instance_id': int(inst), 'class_id': class_id})

    images = [_remove_instances(img, removed.get(img.image_id)) for img in dataset.images]
    return dataset.replace(images=images), CorruptionLog(records=records)


# --------------------------------- Classification ---------------------------------
def apply_classification_noise(dataset, rho, seed, K=None):
    '''
    Relabel round(rho * n_i) instances of every class i, each to a class drawn
    uniformly among the K - 1 other classes. Geometry is untouched.
    '''
    check_rho(rho, 'classification_rho')
    K = dataset.K if K is None else K
    if K < 2:
        raise InvalidClassCountError('Classification noise needs K >= 2, got K = {}'.format(K), parameter='K')
    if rho == 0:
        return dataset, CorruptionLog()

    logger.info('Applying classification noise, rho = %s, K = %d', rho, K)
    relabels = {}
    records = []
    for class_id, n, selected, rng in _stratified_selection(dataset, rho, seed, 'classification'):
        records.append({'stage': 'classification', 'event': 'population',
                        'class_id': class_id, 'n': n, 'selected': len(selected)})
        others = [c for c in range(1, K + 1) if c != class_id]
        targets = rng.integers(0, K - 1, size=len(selected))
        for (image_id, inst), t in zip(selected, targets):
            new_class = others[int(t)]
            relabels.setdefault(image_id, {})[inst] = new_class
            records.append({'stage': 'classification', 'event': 'relabel', 'image_id': image_id,
                            'instance_id': int(inst), 'old_class': class_id, 'new_class': new_class})

    images = [_relabel_instances(img, relabels.get(img.image_id)) for img in dataset.images]
    return dataset.replace(images=images), CorruptionLog(records=records)


# ---------------------------------- Segmentation ----------------------------------
def _instance_windows(instance_map):
    '''Bounding box (x0, y0, x1, y1), exclusive ends, of every instance'''
    ys, xs = np.nonzero(instance_map)
    labels = instance_map[ys, xs]
    windows = {}
    if len(labels) == 0:
        return windows
    order = np.argsort(labels, kind='stable')
    labels, xs, ys = labels[order], xs[order], ys[order]
    starts = np.r_[0, np.nonzero(np.diff(labels))[0] + 1]
    ends = np.r_[starts[1:], len(labels)]
    for s, e in zip(starts, ends):
        windows[int(labels[s])] = (int(xs[s:e].min()), int(ys[s:e].min()),
                                   int(xs[s:e].max()) + 1, int(ys[s:e].max()) + 1)
    return windows


def _fit_or_fallback(local_mask, x_off, y_off):
    '''Ellipse fitted to an instance outline, extent ellipse when the fit degenerates'''
    contour = geometry.trace_contour(local_mask)
    if len(np.unique(contour, axis=0)) >= MIN_FIT_POINTS:
        try:
            ellipse = geometry.fit_ellipse(geometry.outline_points(local_mask), min_points=MIN_FIT_POINTS)
            h, w = local_mask.shape
            inside = (0 <= ellipse.cx <= w) and (0 <= ellipse.cy <= h)
            if inside and ellipse.a <= np.hypot(w, h):
                return geometry.EllipseParams(ellipse.cx + x_off, ellipse.cy + y_off,
                                              ellipse.a, ellipse.b, ellipse.theta), False
        except DegenerateInputError:
            pass
    ellipse = geometry.extent_ellipse(local_mask)
    return geometry.EllipseParams(ellipse.cx + x_off, ellipse.cy + y_off,
                                  ellipse.a, ellipse.b, ellipse.theta), True


def _distort_image(image, segmentation, phases):
    '''
    Replace every instance mask by its simplified ellipse polygon. A new pixel is only
    taken from the instance itself or from background of the original map, and
    background pixels claimed by several instances stay background.
    '''
    orig = image.instance_map
    height, width = orig.shape
    claims = np.zeros(orig.shape, dtype=np.int32)
    replacements = []
    records = []

    for inst, (x0, y0, x1, y1) in sorted(_instance_windows(orig).items()):
        own = orig[y0:y1, x0:x1] == inst
        ellipse, fallback = _fit_or_fallback(own, x0, y0)
        ring = geometry.sample_ellipse(ellipse.scaled(segmentation.ellipse_scale),
                                       segmentation.ellipse_samples, phases.get(inst, 0.0))
        simplified = geometry.douglas_peucker(ring.vertices, segmentation.epsilon_px, closed=True)
        if len(simplified) < 3:
            logger.debug('%s: simplification of id %d collapsed, keeping the sampled ellipse',
                         image.image_id, inst)
            simplified = ring.vertices
        polygon = geometry.Polygon(simplified)

        vx, vy = polygon.vertices[:, 0], polygon.vertices[:, 1]
        wx0 = max(0, min(x0, int(np.floor(vx.min()))))
        wy0 = max(0, min(y0, int(np.floor(vy.min()))))
        wx1 = min(width, max(x1, int(np.ceil(vx.max())) + 1))
        wy1 = min(height, max(y1, int(np.ceil(vy.max())) + 1))
        raster = geometry.rasterize_window(polygon, (wx0, wy0, wx1 - wx0, wy1 - wy0))

        window = orig[wy0:wy1, wx0:wx1]
        allowed = raster & ((window == BACKGROUND) | (window == inst))
        claims[wy0:wy1, wx0:wx1] += allowed & (window == BACKGROUND)
        replacements.append((inst, (wx0, wy0, wx1, wy1), allowed))

        if fallback:
            logger.debug('%s: degenerate ellipse fit for id %d, using its extent ellipse',
                         image.image_id, inst)
        records.append({'stage': 'segmentation', 'event': 'distort', 'image_id': image.image_id,
                        'instance_id': int(inst), 'phase': float(phases.get(inst, 0.0)),
                        'n_vertices': int(len(polygon)), 'fallback': bool(fallback),
                        'kept_original': False, 'area_before': int(own.sum()), 'area_after': 0})

    contested = claims > 1
    new_map = np.zeros_like(orig)
    for (inst, (wx0, wy0, wx1, wy1), allowed), record in zip(replacements, records):
        mask = allowed & ~contested[wy0:wy1, wx0:wx1]
        if mask.any():
            new_map[wy0:wy1, wx0:wx1][mask] = inst
            record['area_after'] = int(mask.sum())
        else:
            new_map[orig == inst] = inst
            record['kept_original'] = True
            record['area_after'] = record['area_before']

    n_fallback = sum(r['fallback'] for r in records)
    if n_fallback:
        logger.info('%s: %d of %d instances used the extent ellipse', image.image_id, n_fallback, len(records))
    return image.replace(instance_map=new_map), records


def distort_contours(image, epsilon_px=2.0, ellipse_scale=1.0, ellipse_samples=64, seed=None):
    '''
    Replace each instance by a polygonal approximation of its scaled, fitted ellipse

    Parameters:
    -----------
    image: AnnotatedImage
    epsilon_px: float
        Douglas-Peucker tolerance [px]
    ellipse_scale: float
        Factor applied to both fitted semi-axes
    ellipse_samples: int
        Vertices sampled on the ellipse before simplification
    seed: int, optional
        Draws the parametric start angle of each instance's sampling. None starts every
        ellipse at angle 0.

    Returns:
    --------
    image: AnnotatedImage
        Same classes, distorted masks
    summaries: list of dict
        'distort' records, one per instance
    '''
    segmentation = SegmentationNoise(epsilon_px=epsilon_px, ellipse_scale=ellipse_scale,
                                     ellipse_samples=ellipse_samples, merge_enabled=False)
    ids = [int(i) for i in image.ids]
    if seed is None:
        phases = {}
    else:
        offsets = np.random.default_rng(seed).uniform(0.0, 2 * np.pi / ellipse_samples, size=len(ids))
        phases = dict(zip(ids, offsets.tolist()))
    return _distort_image(image, segmentation, phases)


def _merge_candidates(image):
    counts = geometry.border_counts(image.instance_map)
    candidates = [(pair, n) for pair, n in counts.items()
                  if image.classes[pair[0]] == image.classes[pair[1]]]
    candidates.sort(key=lambda item: (-item[1], item[0]))
    used = set()
    merges = []
    for (a, b), n in candidates:
        if a in used or b in used:
            continue
        used.update((a, b))
        merges.append((a, b, n))
    return merges


def _apply_merges(image, merges, smooth_radius_px):
    '''
    Give the absorbed instance the keeper's id then close the merged mask; closing
    only claims background pixels
    '''
    new_map = np.array(image.instance_map)
    classes = dict(image.classes)
    records = []
    r = int(np.floor(smooth_radius_px))
    height, width = new_map.shape
    for keeper, absorbed, border in merges:
        new_map[new_map == absorbed] = keeper
        del classes[absorbed]
        added = 0
        if r > 0:
            ys, xs = np.nonzero(new_map == keeper)
            y0, y1 = max(0, ys.min() - r), min(height, ys.max() + r + 1)
            x0, x1 = max(0, xs.min() - r), min(width, xs.max() + r + 1)
            window = new_map[y0:y1, x0:x1]
            grown = geometry.smooth_mask(window == keeper, smooth_radius_px) & (window == BACKGROUND)
            window[grown] = keeper
            added = int(grown.sum())
        records.append({'stage': 'segmentation', 'event': 'merge', 'image_id': image.image_id,
                        'kept': int(keeper), 'absorbed': int(absorbed), 'class_id': classes[keeper],
                        'border': int(border), 'pixels_added': added})
    return image.replace(instance_map=new_map, classes=classes), records


def merge_adjacent(image, smooth_radius_px=3.0):
    '''
    Merge touching same-class instances, greedily by descending shared border (ties by
    id pair); every instance merges at most once and the smaller id is kept

    Returns:
    --------
    image: AnnotatedImage
    merge_log: list of dict
        'merge' records in merge order
    '''
    return _apply_merges(image, _merge_candidates(image), smooth_radius_px)


def _segment_image(job):
    image, segmentation, phases, merges = job
    image, records = _distort_image(image, segmentation, phases)
    if merges is None and segmentation.merge_enabled:
        merges = _merge_candidates(image)
    if merges:
        image, merge_records = _apply_merges(image, merges, segmentation.smooth_radius_px)
        records += merge_records
    return image, records


def apply_segmentation_noise(dataset, segmentation, seed, processes=1):
    '''
    Distort every instance then, when enabled, merge touching same-class pairs.
    Images are processed independently, optionally in a process pool.
    '''
    logger.info('Applying segmentation noise, epsilon = %s px, scale = %s, merge = %s',
                segmentation.epsilon_px, segmentation.ellipse_scale, segmentation.merge_enabled)
    jobs = []
    for img in dataset.images:
        ids = [int(i) for i in img.ids]
        rng = np.random.default_rng(derive_seed(seed, 'segmentation', img.image_id))
        offsets = rng.uniform(0.0, 2 * np.pi / segmentation.ellipse_samples, size=len(ids))
        jobs.append((img, segmentation, dict(zip(ids, offsets.tolist())), None))
    results = _parallel_map(_segment_image, jobs, processes)

    before = dataset.class_counts()
    records = [{'stage': 'segmentation', 'event': 'population', 'class_id': c, 'n': n, 'selected': 0}
               for c, n in before.items()]
    for _, image_records in results:
        for rec in image_records:
            if rec['event'] == 'merge':
                records[rec['class_id'] - 1]['selected'] += 1
        records.extend(image_records)
    images = [img for img, _ in results]
    return dataset.replace(images=images), CorruptionLog(records=records)


# ------------------------------------ Pipeline ------------------------------------
def apply_noise_pipeline(dataset, spec, processes=1):
    '''
    Detection, then segmentation, then classification noise, as configured by a
    NoiseSpec. Classification counts are taken on the post-merge dataset.

    Parameters:
    -----------
    dataset: Dataset
    spec: NoiseSpec
    processes: int
        Size of the per-image process pool of the segmentation stage

    Returns:
    --------
    dataset: Dataset
        provenance holds the noise spec and the parent dataset name
    log: CorruptionLog
    '''
    log = CorruptionLog(noise_spec=spec.to_dict())
    if not spec.is_identity:
        logger.info('Corrupting dataset %s (%d images, %d instances)',
                    dataset.name, len(dataset.images), dataset.n_instances())
    if spec.detection_rho > 0:
        dataset, stage_log = apply_detection_noise(dataset, spec.detection_rho, spec.seed)
        log = log.extend(stage_log)
    if spec.segmentation is not None:
        dataset, stage_log = apply_segmentation_noise(dataset, spec.segmentation, spec.seed, processes)
        log = log.extend(stage_log)
    if spec.classification_rho > 0:
        dataset, stage_log = apply_classification_noise(dataset, spec.classification_rho, spec.seed)
        log = log.extend(stage_log)

    if spec.is_identity:
        return dataset, log
    provenance = {'noise_spec': spec.to_dict(), 'parent': dataset.name}
    return dataset.replace(provenance=provenance), log


def replay_log(dataset, log, processes=1):
    '''
    Re-apply a CorruptionLog to the clean dataset it was produced from
    '''
    spec = NoiseSpec.from_dict(log.noise_spec)

    removed = {}
    for rec in log.events('remove'):
        removed.setdefault(rec['image_id'], set()).add(rec['instance_id'])
    dataset = dataset.replace(images=[_remove_instances(img, removed.get(img.image_id))
                                      for img in dataset.images])

    if spec.segmentation is not None:
        phases, merges = {}, {}
        for rec in log.events('distort'):
            phases.setdefault(rec['image_id'], {})[rec['instance_id']] = rec['phase']
        for rec in log.events('merge'):
            merges.setdefault(rec['image_id'], []).append((rec['kept'], rec['absorbed'], rec['border']))
        jobs = [(img, spec.segmentation, phases.get(img.image_id, {}), merges.get(img.image_id, []))
                for img in dataset.images]
        dataset = dataset.replace(images=[img for img, _ in _parallel_map(_segment_image, jobs, processes)])

    relabels = {}
    for rec in log.events('relabel'):
        relabels.setdefault(rec['image_id'], {})[rec['instance_id']] = rec['new_class']
    dataset = dataset.replace(images=[_relabel_instances(img, relabels.get(img.image_id))
                                      for img in dataset.images])

    if spec.is_identity:
        return dataset
    return dataset.replace(provenance={'noise_spec': spec.to_dict(), 'parent': dataset.name})


# ------------------------------- Transition matrices -------------------------------
def detection_transition_matrix(rho):
    '''
    P(observed | true) for detection noise, rows and columns ordered (background,
    annotated): [[1, rho], [0, 1 - rho]]
    '''
    check_rho(rho, 'detection_rho')
    return np.array([[1.0, rho], [0.0, 1.0 - rho]])


def classification_transition_matrix(rho, K):
    '''K x K matrix with 1 - rho on the diagonal and rho / (K - 1) elsewhere'''
    check_rho(rho, 'classification_rho')
    if K < 2:
        raise InvalidClassCountError('Classification noise needs K >= 2, got K = {}'.format(K), parameter='K')
    Q = np.full((K, K), rho / (K - 1))
    np.fill_diagonal(Q, 1.0 - rho)
    return Q


def empirical_detection_matrix(log):
    '''
    Realised detection transition matrix of each class from a log

    Returns:
    --------
    matrices: dict
        class id -> 2 x 2 array
    '''
    matrices = {}
    for pop in log.events('population', 'detection'):
        r = pop['selected'] / pop['n'] if pop['n'] else 0.0
        matrices[pop['class_id']] = np.array([[1.0, r], [0.0, 1.0 - r]])
    return matrices


def empirical_classification_matrix(log, K):
    '''
    Realised classification transition matrix from a log, entry [i-1, j-1] is the
    fraction of true class j annotated as class i; columns sum to 1
    '''
    counts = np.zeros((K, K))
    n = np.zeros(K)
    for pop in log.events('population', 'classification'):
        n[pop['class_id'] - 1] = pop['n']
    for rec in log.events('relabel'):
        counts[rec['new_class'] - 1, rec['old_class'] - 1] += 1
    counts[np.diag_indices(K)] = n - counts.sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(n > 0, counts / np.where(n > 0, n, 1), np.nan)
