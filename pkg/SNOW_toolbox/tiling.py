# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Square tiling of annotated images with an id-remap back to the parent, and the
per-tile weights of a class-balancing sampler.

Tiles lie on a stride-(size - overlap) grid; when the image is not covered exactly
the last origin of an axis is clamped to (dim - size), so tiles never leave the image
and nothing is padded. Instances crossing a tile edge are clipped, never dropped.

Classes:
--------
Tile
TileSet

Functions:
----------
tile_origins
tile_image
tile_dataset
stitch_tiles
class_counts
sampling_weights
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from SNOW_toolbox.annotations import BACKGROUND, AnnotatedImage, InvalidGeometryError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tile():
    '''
    origin: (x, y) of the tile in its parent
    image: AnnotatedImage with densified ids 1..n
    remap: dict child id -> parent id
    '''
    origin: tuple
    image: AnnotatedImage
    remap: dict


@dataclass(frozen=True)
class TileSet():
    parent_id: str
    width: int
    height: int
    size: int
    overlap: int
    tiles: tuple
    parent_metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tiles)

    @property
    def images(self):
        return [tile.image for tile in self.tiles]


def _check_geometry(size, overlap):
    if int(size) != size or size < 1:
        raise InvalidGeometryError('Tile size must be an integer >= 1, got {}'.format(size), parameter='size')
    if int(overlap) != overlap or not (0 <= overlap < size):
        raise InvalidGeometryError('Tile overlap must satisfy 0 <= overlap < size ({}), got {}'.format(size, overlap),
                                   parameter='overlap')


def tile_origins(dim, size, overlap):
    '''Origins of the tiles along one axis of length ``dim``'''
    _check_geometry(size, overlap)
    if dim <= size:
        return [0]
    origins = list(range(0, dim - size + 1, size - overlap))
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return origins


def _tile_id(parent_id, x, y):
    return '{}_x{}_y{}'.format(parent_id, x, y)


def tile_image(img, size=256, overlap=0):
    '''
    Cut an image into square tiles

    Parameters:
    -----------
    img: AnnotatedImage
    size: int
        Tile side s in pixels; images smaller than s give one truncated tile
    overlap: int
        Overlap v between neighbouring tiles, 0 <= v < s

    Returns:
    --------
    TileSet
        Tiles in row-major order of their origins, empty tiles included
    '''
    xs = tile_origins(img.width, size, overlap)
    ys = tile_origins(img.height, size, overlap)

    tiles = []
    for y in ys:
        for x in xs:
            crop = img.instance_map[y:y + size, x:x + size]
            parents = np.unique(crop)
            parents = parents[parents != BACKGROUND]
            # child ids follow the sorted parent ids
            lut_keys = np.concatenate([[BACKGROUND], parents]).astype(np.uint32)
            child = np.searchsorted(lut_keys, crop).astype(np.uint32)
            remap = {i + 1: int(p) for i, p in enumerate(parents)}
            metadata = {**img.metadata, 'parent_id': img.image_id, 'origin': [int(x), int(y)],
                        'remap': dict(remap)}
            image = type(img)(_tile_id(img.image_id, x, y), child,
                              {c: img.classes[p] for c, p in remap.items()}, metadata)
            tiles.append(Tile((int(x), int(y)), image, remap))

    logger.debug('Image %s: %d tiles of %d px, overlap %d', img.image_id, len(tiles), size, overlap)
    return TileSet(img.image_id, img.width, img.height, size, overlap, tuple(tiles), dict(img.metadata))


def tile_dataset(dataset, size=256, overlap=0):
    '''Tile every image of a dataset, returning the dataset of all tiles'''
    images = []
    for img in dataset.images:
        images += tile_image(img, size, overlap).images
    logger.info('Tiled %d images into %d tiles', len(dataset.images), len(images))
    return dataset.replace(images=images)


def stitch_tiles(tileset):
    '''
    Reassemble the parent image of a TileSet through the remap tables. Exact for
    overlap 0; with overlap, later tiles overwrite the shared pixels they agree on.
    '''
    canvas = np.zeros((tileset.height, tileset.width), dtype=np.uint32)
    classes = {}
    for tile in tileset.tiles:
        x, y = tile.origin
        child = tile.image.instance_map
        lut = np.zeros(len(tile.remap) + 1, dtype=np.uint32)
        for c, p in tile.remap.items():
            lut[c] = p
            classes[p] = tile.image.classes[c]
        canvas[y:y + child.shape[0], x:x + child.shape[1]] = lut[child]
    image_type = type(tileset.tiles[0].image) if tileset.tiles else AnnotatedImage
    return image_type(tileset.parent_id, canvas, classes, tileset.parent_metadata)


def class_counts(images, K=None):
    '''Instance count of each class over a sequence of images'''
    counts = {c: 0 for c in range(1, (K or 0) + 1)}
    for img in images:
        for c in img.classes.values():
            counts[c] = counts.get(c, 0) + 1
    return counts


def sampling_weights(tiles, counts):
    '''
    Sampling weight of each tile for a class-balancing sampler

    weight = max over the classes present in the tile of (total instances / count of
    that class). Tiles without instances get the smallest weight of the others.
    Weights are normalised to mean 1.

    Parameters:
    -----------
    tiles: TileSet or sequence of AnnotatedImage
    counts: dict
        Dataset-level class id -> instance count

    Returns:
    --------
    weights: 1d array, > 0
    '''
    images = tiles.images if isinstance(tiles, TileSet) else list(tiles)
    if not images:
        return np.zeros(0)
    total = float(sum(counts.values()))
    raw = np.full(len(images), np.nan)
    for k, img in enumerate(images):
        present = {c for c in img.classes.values() if counts.get(c, 0) > 0}
        if present:
            raw[k] = max(total / counts[c] for c in present)
    filled = raw[~np.isnan(raw)]
    raw[np.isnan(raw)] = filled.min() if filled.size else 1.0
    return raw / raw.mean()
