"""
Synthetic datasets used by the examples and the test suite.

make_nuclei_image   ellipse-shaped nuclei on a grid, a share of them in touching pairs
make_toy_dataset    a few nuclei images with per-image class mixes
make_count_dataset  single-pixel instances with exact per-class counts, for the
                    bookkeeping of large corruption runs
three_nuclei_image  two touching nuclei of one class plus an isolated one
"""
import numpy as np

from SNOW_toolbox import geometry
from SNOW_toolbox.annotations import AnnotatedImage, Dataset

CLASS_NAMES = ('epithelial', 'lymphocyte', 'neutrophil')


def make_nuclei_image(image_id, width=128, height=128, K=3, seed=0, pitch=24, touching=0.25):
    '''
    Nuclei laid out on a jittered grid of cell ``pitch``; with probability ``touching``
    a nucleus gets a same-class neighbour glued to its right side.

    Returns:
    --------
    AnnotatedImage
    '''
    rng = np.random.default_rng(seed)
    instance_map = np.zeros((height, width), dtype=np.uint32)
    classes = {}
    next_id = 1
    for gy in range(pitch // 2, height - pitch // 2, pitch):
        for gx in range(pitch // 2, width - pitch // 2, pitch):
            a = rng.uniform(4.0, 7.0)
            b = rng.uniform(3.0, a)
            cx = gx + rng.uniform(-1.5, 1.5) - 3.0
            cy = gy + rng.uniform(-1.5, 1.5)
            theta = rng.uniform(0.0, np.pi)
            class_id = int(rng.integers(1, K + 1))
            glued = rng.random() < touching

            shapes = [geometry.EllipseParams(cx, cy, a, b, theta)]
            if glued:
                # right neighbour overlapping the first one; the first keeps the overlap
                shapes.append(geometry.EllipseParams(cx + a + 3.0, cy, 5.0, 3.5, 0.0))
            for ellipse in shapes:
                mask = geometry.rasterize_polygon(geometry.sample_ellipse(ellipse, 48), width, height)
                mask &= instance_map == 0
                if mask.sum() < 6:
                    continue
                instance_map[mask] = next_id
                classes[next_id] = class_id
                next_id += 1
    return AnnotatedImage(image_id, instance_map, classes)


def make_toy_dataset(n_images=3, width=128, height=128, seed=0, name='toy', class_names=CLASS_NAMES):
    images = [make_nuclei_image('img_{:03d}'.format(k), width, height, len(class_names), seed=seed + k)
              for k in range(n_images)]
    return Dataset(name, class_names, images)


def make_count_dataset(counts, width=200, height=200, name='counts', class_names=CLASS_NAMES):
    '''
    Dataset whose class c has exactly counts[c] instances, one pixel each, placed on
    every other pixel of as many width x height images as needed

    Parameters:
    -----------
    counts: dict
        class id -> instance count
    '''
    labels = np.concatenate([np.full(n, c, dtype=np.uint16) for c, n in sorted(counts.items())])
    # spread the classes over the images
    labels = labels[np.random.default_rng(0).permutation(len(labels))]
    ys, xs = np.mgrid[0:height:2, 0:width:2]
    slots = np.column_stack([ys.ravel(), xs.ravel()])
    per_image = len(slots)

    images = []
    for k, start in enumerate(range(0, len(labels), per_image)):
        chunk = labels[start:start + per_image]
        instance_map = np.zeros((height, width), dtype=np.uint32)
        ids = np.arange(1, len(chunk) + 1, dtype=np.uint32)
        instance_map[slots[:len(chunk), 0], slots[:len(chunk), 1]] = ids
        images.append(AnnotatedImage('grid_{:03d}'.format(k), instance_map,
                                     dict(zip(ids.tolist(), chunk.tolist()))))
    return Dataset(name, class_names, images)


def three_nuclei_image(image_id='three', width=64, height=32):
    '''
    Ids 1 and 2 (class 1) are 16 x 24 blocks sharing their 24 px long side, so
    they still touch once both are redrawn as ellipses; id 3 (class 2) is an isolated
    disc of radius 6.
    '''
    yy, xx = np.mgrid[0:height, 0:width]
    instance_map = np.zeros((height, width), dtype=np.uint32)
    instance_map[4:28, 4:20] = 1
    instance_map[4:28, 20:36] = 2
    instance_map[(xx - 50) ** 2 + (yy - 16) ** 2 <= 36] = 3
    return AnnotatedImage(image_id, instance_map, {1: 1, 2: 1, 3: 2})
