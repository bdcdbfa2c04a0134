# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Task-separated scoring of instance predictions: matching, detection, segmentation
and classification metrics.

Percentages are on a 0-100 scale, Hausdorff distances in pixels. A ratio with a zero
denominator is undefined and reported as None, never as 0.

Classes:
--------
MatchSet
ConfusionTables
MetricsReport

Functions:
----------
match_instances
find_over_segmentation
find_under_segmentation
detection_metrics
segmentation_metrics
build_confusion
classification_metrics
evaluate_dataset
"""
import logging
import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from SNOW_toolbox import geometry
from SNOW_toolbox.annotations import (BACKGROUND, OTHER, ConfigError, DimensionMismatchError,
                                      IdSetMismatchError, InvalidAnnotationError)

logger = logging.getLogger(__name__)

CRITERIA = ('coverage', 'iou')
ATTRIBUTIONS = ('predicted', 'true')


@dataclass(frozen=True)
class MatchSet():
    '''
    Outcome of the matching rule. Ids are instance ids of one image, or
    (image_id, instance id) tuples once pooled over a dataset.

    matches: tuple of (gt_id, pred_id, iou)
    unmatched_gt: false negatives
    unmatched_pred: false positives
    rejected_by_centroid: (gt_id, pred_id, iou) pairs discarded by the centroid test
    '''
    matches: tuple = ()
    unmatched_gt: tuple = ()
    unmatched_pred: tuple = ()
    rejected_by_centroid: tuple = ()

    @classmethod
    def pool(cls, keyed):
        '''Merge {image_id: MatchSet} into one MatchSet with (image_id, id) keys'''
        matches, fn, fp, rejected = [], [], [], []
        for image_id in sorted(keyed):
            ms = keyed[image_id]
            matches += [((image_id, g), (image_id, p), v) for g, p, v in ms.matches]
            fn += [(image_id, g) for g in ms.unmatched_gt]
            fp += [(image_id, p) for p in ms.unmatched_pred]
            rejected += [((image_id, g), (image_id, p), v) for g, p, v in ms.rejected_by_centroid]
        return cls(tuple(matches), tuple(fn), tuple(fp), tuple(rejected))

    @property
    def n_gt(self):
        return len(self.matches) + len(self.unmatched_gt)

    @property
    def n_pred(self):
        return len(self.matches) + len(self.unmatched_pred)


# ------------------------------------ Matching ------------------------------------
def _areas(label_map):
    ids, counts = np.unique(label_map[label_map != BACKGROUND], return_counts=True)
    return dict(zip(ids.tolist(), counts.tolist()))


def _overlaps(gt_map, pred_map):
    '''(gt_id, pred_id, intersection) for every pair with nonzero intersection'''
    both = (gt_map != BACKGROUND) & (pred_map != BACKGROUND)
    if not both.any():
        return []
    pairs, inter = np.unique(np.column_stack([gt_map[both], pred_map[both]]), axis=0, return_counts=True)
    return [(int(g), int(p), int(n)) for (g, p), n in zip(pairs, inter)]


def _centroid_pixels(label_map):
    '''
    Nearest pixel to the centroid of every instance, halves rounded toward negative
    '''
    ys, xs = np.nonzero(label_map)
    labels = label_map[ys, xs]
    ids, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    cx = np.bincount(inverse, weights=xs) / counts
    cy = np.bincount(inverse, weights=ys) / counts
    return {int(i): (math.ceil(x - 0.5), math.ceil(y - 0.5)) for i, x, y in zip(ids, cx, cy)}


def _check_shapes(gt, pred):
    if gt.instance_map.shape != pred.instance_map.shape:
        raise DimensionMismatchError('Image {}: ground truth is {}x{} but prediction is {}x{}'.format(
            gt.image_id, gt.width, gt.height, pred.width, pred.height))


def match_instances(gt, pred):
    '''
    Greedy highest-IoU matching gated by the predicted centroid

    Pairs are visited by decreasing IoU, ties by (gt_id, pred_id). A pair whose objects
    are both still free becomes a match when the pixel nearest to the predicted
    centroid belongs to the ground-truth instance; otherwise only that pair is
    discarded.

    Parameters:
    -----------
    gt: AnnotatedImage
    pred: PredictedImage

    Returns:
    --------
    MatchSet
    '''
    _check_shapes(gt, pred)
    gt_map, pred_map = gt.instance_map, pred.instance_map
    gt_area, pred_area = _areas(gt_map), _areas(pred_map)

    candidates = []
    for g, p, inter in _overlaps(gt_map, pred_map):
        candidates.append((inter / (gt_area[g] + pred_area[p] - inter), g, p))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    centroids = _centroid_pixels(pred_map) if candidates else {}
    height, width = gt_map.shape
    matched_gt, matched_pred = set(), set()
    matches, rejected = [], []
    for value, g, p in candidates:
        if g in matched_gt or p in matched_pred:
            continue
        x, y = centroids[p]
        if 0 <= x < width and 0 <= y < height and gt_map[y, x] == g:
            matches.append((g, p, value))
            matched_gt.add(g)
            matched_pred.add(p)
        else:
            rejected.append((g, p, value))

    return MatchSet(matches=tuple(matches),
                    unmatched_gt=tuple(g for g in sorted(gt_area) if g not in matched_gt),
                    unmatched_pred=tuple(p for p in sorted(pred_area) if p not in matched_pred),
                    rejected_by_centroid=tuple(rejected))


def _overlap_score(inter, own_area, other_area, criterion):
    if criterion == 'coverage':
        return inter / own_area
    return inter / (own_area + other_area - inter)


def find_over_segmentation(ms, gt, pred, criterion='coverage', threshold=0.5):
    '''
    Unmatched predictions lying predominantly on an already matched ground-truth
    instance. ``criterion`` 'coverage' scores |P & g| / |P|, 'iou' scores IoU(P, g).
    '''
    _check_criterion(criterion)
    matched_gt = {g for g, _, _ in ms.matches}
    unmatched_pred = set(ms.unmatched_pred)
    gt_area, pred_area = _areas(gt.instance_map), _areas(pred.instance_map)
    flagged = set()
    for g, p, inter in _overlaps(gt.instance_map, pred.instance_map):
        if p in unmatched_pred and g in matched_gt:
            if _overlap_score(inter, pred_area[p], gt_area[g], criterion) >= threshold:
                flagged.add(p)
    return sorted(flagged)


def find_under_segmentation(ms, gt, pred, criterion='coverage', threshold=0.5):
    '''
    Unmatched ground-truth instances lying predominantly under an already matched
    prediction
    '''
    _check_criterion(criterion)
    matched_pred = {p for _, p, _ in ms.matches}
    unmatched_gt = set(ms.unmatched_gt)
    gt_area, pred_area = _areas(gt.instance_map), _areas(pred.instance_map)
    flagged = set()
    for g, p, inter in _overlaps(gt.instance_map, pred.instance_map):
        if g in unmatched_gt and p in matched_pred:
            if _overlap_score(inter, gt_area[g], pred_area[p], criterion) >= threshold:
                flagged.add(g)
    return sorted(flagged)


def _check_criterion(criterion):
    if criterion not in CRITERIA:
        raise ConfigError('Overlap criterion must be one of {}, got {!r}'.format(CRITERIA, criterion),
                          parameter='overseg_criterion')


def _check_classes(gt_classes, pred_classes, K):
    # ground truth in 1..K, predictions in 1..K or OTHER
    for g, c in gt_classes.items():
        if not 1 <= c <= K:
            raise InvalidAnnotationError('Ground-truth id {} has class {} outside 1..{}'.format(g, c, K))
    for p, c in pred_classes.items():
        if c != OTHER and not 1 <= c <= K:
            raise InvalidAnnotationError('Predicted id {} has class {} outside 1..{} and is not OTHER'.format(
                p, c, K))


# ----------------------------------- Detection -----------------------------------
def _ratio(num, den, percent=True):
    if den == 0:
        return None
    return (100.0 if percent else 1.0) * num / den


def f1_score(precision, recall):
    '''Harmonic mean, None unless both are defined'''
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def detection_metrics(ms, gt_classes, pred_classes, K, attribution='predicted'):
    '''
    Detection precision, recall and F1, per class and overall (micro)

    Parameters:
    -----------
    ms: MatchSet
    gt_classes, pred_classes: dict
        id -> class, pred classes may be OTHER
    K: int
    attribution: str
        'predicted' attributes a matched prediction to its predicted class for the
        headline per-class precision, 'true' to the class of its ground truth. Both
        are always listed as 'precision_predicted' and 'precision_true'.

    Returns:
    --------
    section: dict
        {'overall': {...}, 'per_class': {class_id: {...}}}
    '''
    if attribution not in ATTRIBUTIONS:
        raise ConfigError('precision attribution must be one of {}, got {!r}'.format(ATTRIBUTIONS, attribution),
                          parameter='precision_attribution')
    _check_classes(gt_classes, pred_classes, K)
    n_match = len(ms.matches)
    precision = _ratio(n_match, ms.n_pred)
    recall = _ratio(n_match, ms.n_gt)
    section = {'overall': {'precision': precision, 'recall': recall, 'f1': f1_score(precision, recall),
                           'tp': n_match, 'fp': len(ms.unmatched_pred), 'fn': len(ms.unmatched_gt)},
               'per_class': {}}

    gt_total = np.zeros(K + 1, dtype=int)
    for c in gt_classes.values():
        gt_total[c] += 1
    pred_total = {}
    for c in pred_classes.values():
        pred_total[c] = pred_total.get(c, 0) + 1
    fp_by_class = {}
    for p in ms.unmatched_pred:
        c = pred_classes[p]
        fp_by_class[c] = fp_by_class.get(c, 0) + 1

    for c in range(1, K + 1):
        matched_true = sum(1 for g, _, _ in ms.matches if gt_classes[g] == c)
        matched_pred = sum(1 for _, p, _ in ms.matches if pred_classes[p] == c)
        rec = _ratio(matched_true, gt_total[c])
        prec_pred = _ratio(matched_pred, pred_total.get(c, 0))
        prec_true = _ratio(matched_true, matched_true + fp_by_class.get(c, 0))
        prec = prec_pred if attribution == 'predicted' else prec_true
        section['per_class'][c] = {'precision': prec, 'recall': rec, 'f1': f1_score(prec, rec),
                                   'precision_predicted': prec_pred, 'precision_true': prec_true}
    return section


# ---------------------------------- Segmentation ----------------------------------
def _crop_pair(a, b):
    rows = np.nonzero((a | b).any(axis=1))[0]
    cols = np.nonzero((a | b).any(axis=0))[0]
    y0, y1 = max(0, rows[0] - 1), min(a.shape[0], rows[-1] + 2)
    x0, x1 = max(0, cols[0] - 1), min(a.shape[1], cols[-1] + 2)
    return a[y0:y1, x0:x1], b[y0:y1, x0:x1]


def pair_statistics(ms, gt, pred):
    '''(gt_id, true class, IoU %, Hausdorff px) for every matched pair'''
    stats = []
    for g, p, _ in ms.matches:
        a, b = _crop_pair(gt.instance_map == g, pred.instance_map == p)
        stats.append((g, gt.classes[g], 100.0 * geometry.iou(a, b), geometry.hausdorff(a, b)))
    return stats


def _mean_std(values):
    if len(values) == 0:
        return None, None
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std())


def summarize_segmentation(stats, K, over_seg_count, under_seg_count, fp_count, fn_count):
    '''Aggregate pair statistics into the segmentation section'''
    def block(rows):
        iou_mean, iou_std = _mean_std([r[2] for r in rows])
        hd_mean, hd_std = _mean_std([r[3] for r in rows])
        return {'iou_mean': iou_mean, 'iou_std': iou_std, 'hd_mean': hd_mean, 'hd_std': hd_std,
                'pairs': len(rows)}

    return {'overall': block(stats),
            'per_class': {c: block([r for r in stats if r[1] == c]) for c in range(1, K + 1)},
            'over_seg_count': int(over_seg_count), 'under_seg_count': int(under_seg_count),
            'fp_count': int(fp_count), 'fn_count': int(fn_count)}


def segmentation_metrics(ms, gt, pred, K=None, criterion='coverage', threshold=0.5):
    '''
    IoU and Hausdorff distance of matched pairs (mean and population std, per true class
    and overall) with over-/under-segmentation and FP/FN counts
    '''
    K = max(gt.classes.values(), default=0) if K is None else K
    over = find_over_segmentation(ms, gt, pred, criterion, threshold)
    under = find_under_segmentation(ms, gt, pred, criterion, threshold)
    return summarize_segmentation(pair_statistics(ms, gt, pred), K, len(over), len(under),
                                  len(ms.unmatched_pred), len(ms.unmatched_gt))


# --------------------------------- Classification ---------------------------------
def _column(pred_class):
    return 1 if pred_class == OTHER else int(pred_class) + 1


@dataclass(frozen=True, eq=False)
class ConfusionTables():
    '''
    raw: (K+1) x (K+2) counts, rows (none, 1..K), columns (U, Other, 1..K). The
         (none, U) cell has no meaning and holds 0.
    ncm: K x (K+1) percentages over matched nuclei, rows 1..K, columns (Other, 1..K),
         each row summing to 100; rows without matched nuclei are NaN
    '''
    raw: np.ndarray
    ncm: np.ndarray

    @classmethod
    def from_raw(cls, raw):
        raw = np.array(raw, dtype=np.int64)
        if raw.ndim != 2 or raw.shape[1] != raw.shape[0] + 1:
            raise DimensionMismatchError('Raw confusion table must be (K+1) x (K+2), got {}'.format(raw.shape))
        raw[0, 0] = 0
        detected = raw[1:, 1:].astype(float)
        totals = detected.sum(axis=1, keepdims=True)
        with np.errstate(invalid='ignore', divide='ignore'):
            ncm = np.where(totals > 0, 100.0 * detected / np.where(totals > 0, totals, 1), np.nan)
        return cls(raw, ncm)

    @property
    def K(self):
        return self.ncm.shape[0]

    @property
    def defined_rows(self):
        return ~np.isnan(self.ncm[:, 0])

    def frames(self, class_names=None):
        '''
        Labelled pandas copies of both tables; the undefined (none, U) cell is missing
        '''
        names = list(class_names) if class_names else [str(c) for c in range(1, self.K + 1)]
        raw = pd.DataFrame(self.raw, index=['none'] + names, columns=['U', 'Other'] + names).astype('Int64')
        raw.iloc[0, 0] = pd.NA
        ncm = pd.DataFrame(self.ncm, index=names, columns=['Other'] + names)
        return raw, ncm


def build_confusion(ms, gt_classes, pred_classes, K):
    '''Raw confusion counts of a MatchSet and their row-normalised matrix'''
    _check_classes(gt_classes, pred_classes, K)
    raw = np.zeros((K + 1, K + 2), dtype=np.int64)
    for g in ms.unmatched_gt:
        raw[gt_classes[g], 0] += 1
    for g, p, _ in ms.matches:
        raw[gt_classes[g], _column(pred_classes[p])] += 1
    for p in ms.unmatched_pred:
        raw[0, _column(pred_classes[p])] += 1
    return ConfusionTables.from_raw(raw)


def classification_metrics(ct):
    '''
    Balanced classification metrics of the normalised confusion matrix

    recall_c = NCM[c, c]; precision_c = NCM[c, c] over the column sum of the defined
    class rows; balanced accuracy is the mean defined diagonal entry.
    '''
    K = ct.K
    defined = ct.defined_rows
    section = {'per_class': {}}
    diagonal = []
    for c in range(1, K + 1):
        nuclei = int(ct.raw[c, 1:].sum())
        if not defined[c - 1]:
            logger.debug('Class %d has no matched nuclei, its classification metrics are undefined', c)
            section['per_class'][c] = {'precision': None, 'recall': None, 'f1': None, 'nuclei': nuclei}
            continue
        recall = float(ct.ncm[c - 1, c])
        column = float(ct.ncm[defined, c].sum())
        precision = 100.0 * recall / column if column > 0 else None
        section['per_class'][c] = {'precision': precision, 'recall': recall,
                                   'f1': f1_score(precision, recall), 'nuclei': nuclei}
        diagonal.append(recall)
    section['balanced_accuracy'] = float(np.mean(diagonal)) if diagonal else None
    return section


# ------------------------------------ Datasets ------------------------------------
@dataclass(frozen=True)
class MetricsReport():
    '''
    Dataset-level metrics. detection, segmentation and classification follow the
    sections returned by the functions of this module, with class ids as keys.
    '''
    class_names: tuple
    detection: dict
    segmentation: dict
    classification: dict
    confusion: ConfusionTables
    config: dict = field(default_factory=dict)
    per_image: dict = field(default_factory=dict)


def _evaluate_image(job):
    gt, pred, criterion, threshold, K, attribution = job
    ms = match_instances(gt, pred)
    over = find_over_segmentation(ms, gt, pred, criterion, threshold)
    under = find_under_segmentation(ms, gt, pred, criterion, threshold)
    detection = detection_metrics(ms, gt.classes, pred.classes, K, attribution)
    return ms, pair_statistics(ms, gt, pred), over, under, detection


def evaluate_dataset(gt_dataset, pred_dataset, criterion='coverage', threshold=0.5,
                     attribution='predicted', processes=1):
    '''
    Score a prediction dataset against its ground truth. Counts from all images are
    pooled before any ratio is taken.

    Parameters:
    -----------
    gt_dataset, pred_dataset: Dataset
        Same image_id sets
    criterion: str
        Over-/under-segmentation overlap, 'coverage' or 'iou'
    threshold: float
        Minimum overlap for the over-/under-segmentation flags
    attribution: str
        Per-class detection precision attribution, 'predicted' or 'true'
    processes: int
        Size of the per-image process pool

    Returns:
    --------
    MetricsReport
    '''
    _check_criterion(criterion)
    gt_ids = {img.image_id for img in gt_dataset.images}
    pred_ids = {img.image_id for img in pred_dataset.images}
    if gt_ids != pred_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        raise IdSetMismatchError('Image ids differ: missing predictions {}, unexpected predictions {}'.format(
            missing, extra))

    K = gt_dataset.K
    image_ids = sorted(gt_ids)
    jobs = [(gt_dataset.image(i), pred_dataset.image(i), criterion, threshold, K, attribution)
            for i in image_ids]
    logger.info('Evaluating %d images', len(jobs))
    if processes is None or processes <= 1 or len(jobs) <= 1:
        results = [_evaluate_image(job) for job in jobs]
    else:
        with multiprocessing.Pool(processes) as pool:
            results = pool.map(_evaluate_image, jobs)

    keyed, stats, per_image = {}, [], {}
    gt_classes, pred_classes = {}, {}
    n_over = n_under = 0
    for image_id, (gt, pred, *_), (ms, image_stats, over, under, detection) in zip(image_ids, jobs, results):
        keyed[image_id] = ms
        stats += image_stats
        n_over += len(over)
        n_under += len(under)
        gt_classes.update({(image_id, g): c for g, c in gt.classes.items()})
        pred_classes.update({(image_id, p): c for p, c in pred.classes.items()})
        per_image[image_id] = {'detection': detection,
                               'counts': {'tp': len(ms.matches), 'fp': len(ms.unmatched_pred),
                                          'fn': len(ms.unmatched_gt), 'over_seg': len(over),
                                          'under_seg': len(under),
                                          'centroid_rejections': len(ms.rejected_by_centroid)}}

    pooled = MatchSet.pool(keyed)
    confusion = build_confusion(pooled, gt_classes, pred_classes, K)
    return MetricsReport(class_names=gt_dataset.class_names,
                         detection=detection_metrics(pooled, gt_classes, pred_classes, K, attribution),
                         segmentation=summarize_segmentation(stats, K, n_over, n_under,
                                                             len(pooled.unmatched_pred), len(pooled.unmatched_gt)),
                         classification=classification_metrics(confusion),
                         confusion=confusion,
                         config={'overseg_criterion': criterion, 'overseg_threshold': threshold,
                                 'precision_attribution': attribution},
                         per_image=per_image)
