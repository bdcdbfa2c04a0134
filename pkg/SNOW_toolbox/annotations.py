# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Data model shared by the SNOW toolbox: annotated images, predictions, datasets
and the noise configuration, plus the toolbox exceptions.

An instance map is a read-only ``uint32`` array of shape (height, width); pixel
(x, y) is ``instance_map[y, x]`` and 0 is background. Classes are 1..K, the
predicted-only value OTHER marks detections assigned to no class of interest.

Classes:
--------
AnnotatedImage
PredictedImage
Dataset
SegmentationNoise
NoiseSpec

Functions:
----------
validate_image
instance_mask
instance_pixel_set
"""
import dataclasses
from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 0
OTHER = 0xFFFF      # largest u16 class value, never a class of interest
NOISE_ORDER = ('detection', 'segmentation', 'classification')


# ----------------------------------- Exceptions -----------------------------------
class SnowError(Exception):
    '''Base class of all toolbox errors'''


class ConfigError(SnowError, ValueError):
    '''
    Invalid parameters. ``parameter`` names the offending configuration key when known.
    '''
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class DataError(SnowError):
    '''Invalid or unreadable data'''


class InvalidRhoError(ConfigError):
    pass


class InvalidClassCountError(ConfigError):
    pass


class InvalidWindowError(ConfigError):
    pass


class InvalidGeometryError(ConfigError):
    pass


class UnknownIdError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else 'unknown id'


class DegenerateInputError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class IdSetMismatchError(DataError):
    pass


class ObserveAfterStopError(DataError):
    pass


class EmptyTraceError(DataError):
    pass


class MalformedTraceError(DataError):
    pass


class CorruptFileError(DataError):
    pass


class VersionUnsupportedError(DataError):
    pass


class InconsistentPlanesError(DataError):
    pass


class MissingFileError(DataError):
    pass


class InvalidAnnotationError(DataError):
    '''Image failing validate_image: class out of 1..K, dangling or unclassified id'''
    pass


def check_rho(rho, parameter='rho'):
    '''Raise InvalidRhoError unless 0 <= rho < 1'''
    if not (0.0 <= rho < 1.0):
        raise InvalidRhoError('{} must lie in [0, 1), got {}'.format(parameter, rho), parameter=parameter)


# ---------------------------------- Images ----------------------------------
@dataclass(frozen=True, eq=False)
class AnnotatedImage():
    """
    One annotated image: an instance map and the class of each instance.

    Parameters:
    -----------
    image_id: str
        Identifier, unique within a dataset
    instance_map: array_like
        (height, width) instance ids, converted to a read-only uint32 array
    classes: dict
        instance id -> class id, keyed by exactly the nonzero ids of instance_map
    metadata: dict, optional
        Free key-value information (patient, tissue type, tile origin...)
    """
    image_id: str
    instance_map: np.ndarray
    classes: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        instance_map = np.array(self.instance_map, dtype=np.uint32)
        if instance_map.ndim != 2:
            raise DimensionMismatchError('Instance map of {} must be 2-D, got shape {}'.format(self.image_id, instance_map.shape))
        instance_map.setflags(write=False)
        object.__setattr__(self, 'image_id', str(self.image_id))
        object.__setattr__(self, 'instance_map', instance_map)
        object.__setattr__(self, 'classes', {int(k): int(v) for k, v in sorted(self.classes.items())})
        object.__setattr__(self, 'metadata', dict(self.metadata or {}))

    @property
    def width(self):
        return self.instance_map.shape[1]

    @property
    def height(self):
        return self.instance_map.shape[0]

    @property
    def ids(self):
        '''Sorted nonzero instance ids present in the map'''
        ids = np.unique(self.instance_map)
        return ids[ids != BACKGROUND]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        return (type(self) is type(other)
                and self.image_id == other.image_id
                and self.classes == other.classes
                and self.metadata == other.metadata
                and self.instance_map.shape == other.instance_map.shape
                and np.array_equal(self.instance_map, other.instance_map))

    def __repr__(self):
        return '{}({!r}, {}x{}, {} instances)'.format(type(self).__name__, self.image_id,
                                                      self.width, self.height, len(self.classes))


class PredictedImage(AnnotatedImage):
    '''
    Model output. Same layout as AnnotatedImage, classes may take the value OTHER.
    '''
    @property
    def pred_classes(self):
        return self.classes


def validate_image(img, K=None):
    '''
    List every invariant violation of an image, never raises

    Parameters:
    -----------
    img: AnnotatedImage or PredictedImage
    K: int, optional
        Number of classes of interest; class range is only checked when given

    Returns:
    --------
    violations: list of str
        Empty when the image is valid
    '''
    violations = []
    present = set(int(i) for i in img.ids)
    allow_other = isinstance(img, PredictedImage)

    for inst in sorted(present - set(img.classes)):
        violations.append('missing class for id {}'.format(inst))
    for inst in sorted(set(img.classes) - present):
        violations.append('dangling id {}'.format(inst))
    for inst, class_id in img.classes.items():
        if class_id == OTHER:
            if not allow_other:
                violations.append('OTHER class on annotation id {}'.format(inst))
        elif class_id < 1 or (K is not None and class_id > K):
            violations.append('class out of range: id {} has class {} (K={})'.format(inst, class_id, K))
    return violations


def instance_mask(img, inst):
    '''Boolean (height, width) mask of one instance'''
    mask = img.instance_map == inst
    if inst == BACKGROUND or not mask.any():
        raise UnknownIdError('id {} is not present in image {}'.format(inst, img.image_id))
    return mask


def instance_pixel_set(img, inst):
    '''Exact set of (x, y) pixels labelled ``inst``'''
    ys, xs = np.nonzero(instance_mask(img, inst))
    return frozenset(zip(xs.tolist(), ys.tolist()))


# --------------------------------- Datasets ---------------------------------
@dataclass(frozen=True)
class Dataset():
    """
    In-memory dataset: class names and images in manifest order.

    Parameters:
    -----------
    name: str
    class_names: sequence of str
        Names of classes 1..K
    images: sequence of AnnotatedImage
    provenance: dict, optional
        Noise configuration and parent reference of derived datasets
    """
    name: str
    class_names: tuple
    images: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'class_names', tuple(self.class_names))
        object.__setattr__(self, 'images', tuple(self.images))
        object.__setattr__(self, 'provenance', dict(self.provenance or {}))
        if len(self.class_names) < 1:
            raise InvalidClassCountError('A dataset needs at least one class of interest', parameter='classes')
        image_ids = [img.image_id for img in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise DataError('Duplicate image_id in dataset {}'.format(self.name))
        for img in self.images:
            violations = validate_image(img, len(self.class_names))
            if violations:
                raise InvalidAnnotationError('Image {} of dataset {}: {}'.format(
                    img.image_id, self.name, '; '.join(violations)))

    @property
    def K(self):
        return len(self.class_names)

    def image(self, image_id):
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise UnknownIdError('image {} is not part of dataset {}'.format(image_id, self.name))

    def instances_of_class(self, class_id):
        '''Globally sorted (image_id, instance id) list of one class'''
        members = [(img.image_id, inst) for img in self.images
                   for inst, c in img.classes.items() if c == class_id]
        return sorted(members)

    def class_counts(self):
        '''Dataset-wide instance count of each class 1..K'''
        counts = {c: 0 for c in range(1, self.K + 1)}
        for img in self.images:
            for c in img.classes.values():
                counts[c] = counts.get(c, 0) + 1
        return counts

    def n_instances(self):
        return sum(len(img.classes) for img in self.images)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ------------------------------ Noise configuration ------------------------------
@dataclass(frozen=True)
class SegmentationNoise():
    '''
    Contour distortion and merging settings

    epsilon_px: Douglas-Peucker tolerance [px]
    ellipse_scale: factor applied to both fitted semi-axes [-]
    ellipse_samples: number of vertices sampled on the fitted ellipse
    merge_enabled: merge adjacent same-class instances after distortion
    smooth_radius_px: disk radius of the closing applied to merged masks [px]
    '''
    epsilon_px: float = 2.0
    ellipse_scale: float = 1.0
    ellipse_samples: int = 64
    merge_enabled: bool = True
    smooth_radius_px: float = 3.0

    def __post_init__(self):
        if self.epsilon_px < 0:
            raise ConfigError('epsilon_px must be >= 0, got {}'.format(self.epsilon_px), parameter='epsilon_px')
        if self.ellipse_scale <= 0:
            raise ConfigError('ellipse_scale must be > 0, got {}'.format(self.ellipse_scale), parameter='ellipse_scale')
        if int(self.ellipse_samples) != self.ellipse_samples or self.ellipse_samples < 8:
            raise ConfigError('ellipse_samples must be an integer >= 8, got {}'.format(self.ellipse_samples),
                              parameter='ellipse_samples')
        if self.smooth_radius_px < 0:
            raise ConfigError('smooth_radius_px must be >= 0, got {}'.format(self.smooth_radius_px),
                              parameter='smooth_radius_px')
        object.__setattr__(self, 'ellipse_samples', int(self.ellipse_samples))


@dataclass(frozen=True)
class NoiseSpec():
    """
    Full corruption configuration. Stages always run in NOISE_ORDER.

    Parameters:
    -----------
    detection_rho: float
        Fraction of instances removed per class, in [0, 1)
    classification_rho: float
        Fraction of instances relabelled per class, in [0, 1)
    segmentation: SegmentationNoise or None
        Contour noise settings, None disables the stage
    seed: int
        Master seed, unsigned 64-bit
    """
    detection_rho: float = 0.0
    classification_rho: float = 0.0
    segmentation: SegmentationNoise = None
    seed: int = 0

    def __post_init__(self):
        check_rho(self.detection_rho, 'detection_rho')
        check_rho(self.classification_rho, 'classification_rho')
        if int(self.seed) != self.seed or not (0 <= self.seed < 2**64):
            raise ConfigError('seed must be an unsigned 64-bit integer, got {}'.format(self.seed), parameter='seed')
        object.__setattr__(self, 'seed', int(self.seed))

    @property
    def order(self):
        return NOISE_ORDER

    @property
    def is_identity(self):
        return self.detection_rho == 0 and self.classification_rho == 0 and self.segmentation is None

    @classmethod
    def from_dict(cls, noise_params):
        '''
        Build a NoiseSpec from a ``noise_params`` dictionary, missing keys default
        '''
        known = {'detection_rho', 'classification_rho', 'seed', 'segmentation', 'order'}
        unknown = set(noise_params) - known
        if unknown:
            raise ConfigError('Unknown noise parameter(s): {}'.format(', '.join(sorted(unknown))),
                              parameter=sorted(unknown)[0])

        seg_params = noise_params.get('segmentation')
        if seg_params:
            fields = {f.name for f in dataclasses.fields(SegmentationNoise)}
            unknown = set(seg_params) - fields - {'enabled'}
            if unknown:
                raise ConfigError('Unknown segmentation parameter(s): {}'.format(', '.join(sorted(unknown))),
                                  parameter=sorted(unknown)[0])
            if seg_params.get('enabled', True):
                segmentation = SegmentationNoise(**{k: v for k, v in seg_params.items()
                                                    if k != 'enabled' and v is not None})
            else:
                segmentation = None
        else:
            segmentation = None

        return cls(detection_rho=noise_params.get('detection_rho') or 0.0,
                   classification_rho=noise_params.get('classification_rho') or 0.0,
                   segmentation=segmentation,
                   seed=noise_params.get('seed') or 0)

    def to_dict(self):
        return {'detection_rho': float(self.detection_rho),
                'classification_rho': float(self.classification_rho),
                'segmentation': dataclasses.asdict(self.segmentation) if self.segmentation else None,
                'seed': self.seed,
                'order': list(NOISE_ORDER)}
