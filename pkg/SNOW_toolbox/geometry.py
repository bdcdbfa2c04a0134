# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Raster and polygon geometry used to corrupt and score nucleus masks.

Pixel sets are boolean (height, width) masks. Pixel coordinates are (x, y) =
(column, row). Two coordinate conventions are used:
  - pixel-index space (trace_contour, centroid, hausdorff): pixel (x, y) sits at (x, y)
  - polygon space (rasterize_polygon, outline_points): pixel (x, y) covers the unit
    square [x, x+1) x [y, y+1), its center is (x + 0.5, y + 0.5)
"Counterclockwise" means positive signed area in (x, y) axes.

Classes:
--------
EllipseParams
Polygon

Functions:
----------
largest_component, trace_contour, outline_points, centroid, fit_ellipse,
extent_ellipse, sample_ellipse, douglas_peucker, rasterize_polygon, smooth_mask,
border_counts, shared_border, iou, boundary_pixels, hausdorff
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, ndimage
from scipy.spatial.distance import cdist, directed_hausdorff

from SNOW_toolbox.annotations import (BACKGROUND, DegenerateInputError, EmptyInputError,
                                      InvalidGeometryError, UnknownIdError)

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
MIN_SAMPLES = 8          # vertices of a sampled ellipse
# Moore neighbourhood (dx, dy), clockwise on screen starting west
MOORE = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))


@dataclass(frozen=True)
class EllipseParams():
    '''
    Ellipse with center (cx, cy), semi-axes a >= b > 0 and rotation theta in [0, pi)
    of the major axis from the x axis
    '''
    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise DegenerateInputError('Ellipse needs a >= b > 0, got a={}, b={}'.format(self.a, self.b))
        object.__setattr__(self, 'theta', float(np.mod(self.theta, np.pi)))

    def scaled(self, factor):
        '''Uniformly scale both semi-axes about the center'''
        return EllipseParams(self.cx, self.cy, self.a * factor, self.b * factor, self.theta)


@dataclass(frozen=True, eq=False)
class Polygon():
    '''
    Implicitly closed polygon, vertices as an (n, 2) float array of (x, y), n >= 3
    '''
    vertices: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 2)
        if len(vertices) < 3:
            raise InvalidGeometryError('A polygon needs at least 3 vertices, got {}'.format(len(vertices)))
        vertices.setflags(write=False)
        object.__setattr__(self, 'vertices', vertices)

    def __len__(self):
        return len(self.vertices)

    @property
    def signed_area(self):
        return _signed_area(self.vertices)

    def is_simple(self):
        '''True when no two non-adjacent edges intersect'''
        v = self.vertices
        n = len(v)
        edges = [(v[i], v[(i + 1) % n]) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_intersect(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                    return False
        return True


def _signed_area(vertices):
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_segment(p1, p2, q1)) or (o2 == 0 and on_segment(p1, p2, q2))
            or (o3 == 0 and on_segment(q1, q2, p1)) or (o4 == 0 and on_segment(q1, q2, p2)))


# ------------------------------------ Masks ------------------------------------
def pixels_to_mask(pixels, width, height):
    '''Boolean mask from an iterable of (x, y), pixels outside the grid are dropped'''
    mask = np.zeros((height, width), dtype=bool)
    for x, y in pixels:
        if 0 <= x < width and 0 <= y < height:
            mask[y, x] = True
    return mask


def mask_to_pixels(mask):
    ys, xs = np.nonzero(mask)
    return frozenset(zip(xs.tolist(), ys.tolist()))


def largest_component(mask):
    '''
    Largest 8-connected component of a mask, ties go to the component found first in
    raster order
    '''
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def trace_contour(mask):
    '''
    Ordered outer boundary of the largest 8-connected component (Moore-neighbour tracing)

    Parameters:
    -----------
    mask: array_like
        Boolean (height, width) pixel set, nonempty

    Returns:
    --------
    contour: ndarray
        (n, 2) int array of (x, y) boundary pixels, counterclockwise, starting at the
        top-left pixel of the component. Pixels on one-pixel-wide parts appear once per
        visit.
    '''
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyInputError('Cannot trace the contour of an empty pixel set')
    comp = np.pad(largest_component(mask), 1)

    ys, xs = np.nonzero(comp)
    start = (int(xs[0]), int(ys[0]))
    contour = [start]
    p, back = start, 0          # west of the top-left pixel is never in the component
    second = None
    for _ in range(4 * int(comp.sum()) + 8):
        for k in range(1, 9):
            d = (back + k) % 8
            q = (p[0] + MOORE[d][0], p[1] + MOORE[d][1])
            if comp[q[1], q[0]]:
                break
        else:
            break               # isolated pixel
        prev = MOORE[(d - 1) % 8]
        back = MOORE.index((p[0] + prev[0] - q[0], p[1] + prev[1] - q[1]))
        if second is None:
            second = q
        elif p == start and q == second:
            break
        contour.append(q)
        p = q

    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    contour = np.array(contour, dtype=int) - 1
    if len(contour) > 2 and _signed_area(contour.astype(float)) < 0:
        contour = np.concatenate([contour[:1], contour[:0:-1]])
    return contour


def outline_points(mask):
    '''
    Midpoints of the pixel edges separating the (hole-filled) largest component from
    its outside, in polygon space. These points lie on the exact outline of the
    rasterized shape and are what ellipses are fitted to.
    '''
    comp = ndimage.binary_fill_holes(largest_component(np.asarray(mask, dtype=bool)))
    pad = np.pad(comp, 1)
    h, w = comp.shape
    points = []
    #           neighbour     edge midpoint offset
    for (dx, dy), (ox, oy) in (((-1, 0), (0.0, 0.5)), ((1, 0), (1.0, 0.5)),
                               ((0, -1), (0.5, 0.0)), ((0, 1), (0.5, 1.0))):
        neighbour = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        ys, xs = np.nonzero(comp & ~neighbour)
        points.append(np.column_stack([xs + ox, ys + oy]))
    return np.concatenate(points)


def centroid(mask):
    '''Mean (x, y) of the pixels of a nonempty mask'''
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyInputError('Centroid of an empty pixel set is undefined')
    return float(xs.mean()), float(ys.mean())


# ----------------------------------- Ellipses -----------------------------------
def fit_ellipse(points, min_points=6):
    '''
    Direct least-squares ellipse fit minimising the algebraic distance under the
    constraint 4ac - b^2 = 1, solved on centred and scale-normalised points through the
    reduced 3x3 eigenproblem.

    Parameters:
    -----------
    points: array_like
        (n, 2) array of (x, y)
    min_points: int
        Fewer points than this raise DegenerateInputError

    Returns:
    --------
    EllipseParams
    '''
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < min_points:
        raise DegenerateInputError('Ellipse fit needs at least {} points, got {}'.format(min_points, len(pts)))

    mean = pts.mean(axis=0)
    centred = pts - mean
    scale = np.sqrt((centred ** 2).sum(axis=1).mean())
    if scale == 0:
        raise DegenerateInputError('Ellipse fit on coincident points')
    u = centred / scale
    sv = np.linalg.svd(u, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        raise DegenerateInputError('Ellipse fit on collinear points')

    x, y = u[:, 0], u[:, 1]
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError:
        raise DegenerateInputError('Singular scatter matrix in ellipse fit')
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])

    eigval, eigvec = linalg.eig(M)
    eigval, eigvec = np.real(eigval), np.real(eigvec)
    admissible = np.nonzero(4 * eigvec[0] * eigvec[2] - eigvec[1] ** 2 > 0)[0]
    if len(admissible) == 0:
        raise DegenerateInputError('No elliptical solution in ellipse fit')
    a1 = eigvec[:, admissible[np.argmin(np.abs(eigval[admissible]))]]
    conic = np.concatenate([a1, T @ a1])

    ellipse = _conic_to_params(conic)
    return EllipseParams(ellipse.cx * scale + mean[0], ellipse.cy * scale + mean[1],
                         ellipse.a * scale, ellipse.b * scale, ellipse.theta)


def _conic_to_params(conic):
    # A x^2 + B xy + C y^2 + D x + E y + F = 0
    A, B, C, D, E, F = conic
    den = 4 * A * C - B * B
    if den <= 0:
        raise DegenerateInputError('Fitted conic is not an ellipse')
    x0 = (B * E - 2 * C * D) / den
    y0 = (B * D - 2 * A * E) / den
    f0 = F + (D * x0 + E * y0) / 2.0

    lam, vec = np.linalg.eigh(np.array([[A, B / 2.0], [B / 2.0, C]]))
    axes_sq = -f0 / lam
    if np.any(axes_sq <= 0) or not np.all(np.isfinite(axes_sq)):
        raise DegenerateInputError('Fitted conic is imaginary or unbounded')
    major = int(np.argmax(axes_sq))
    theta = np.arctan2(vec[1, major], vec[0, major])
    return EllipseParams(x0, y0, np.sqrt(axes_sq[major]), np.sqrt(axes_sq[1 - major]), theta)


def extent_ellipse(mask):
    '''
    Axis-aligned ellipse inscribed in the pixel extent of a mask, in polygon space
    '''
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyInputError('Extent of an empty pixel set is undefined')
    cx = (xs.min() + xs.max() + 1) / 2.0
    cy = (ys.min() + ys.max() + 1) / 2.0
    half_w = (xs.max() - xs.min() + 1) / 2.0
    half_h = (ys.max() - ys.min() + 1) / 2.0
    if half_w >= half_h:
        return EllipseParams(cx, cy, half_w, half_h, 0.0)
    return EllipseParams(cx, cy, half_h, half_w, np.pi / 2)


def sample_ellipse(ellipse, n, phase=0.0):
    '''
    Polygon of n vertices at uniformly spaced parametric angles phase + 2*pi*k/n,
    counterclockwise
    '''
    if n < MIN_SAMPLES:
        raise InvalidGeometryError('Sampling an ellipse needs n >= {}, got {}'.format(MIN_SAMPLES, n),
                                   parameter='ellipse_samples')
    t = phase + 2 * np.pi * np.arange(n) / n
    cos_t, sin_t = np.cos(t), np.sin(t)
    cos_r, sin_r = np.cos(ellipse.theta), np.sin(ellipse.theta)
    x = ellipse.cx + ellipse.a * cos_t * cos_r - ellipse.b * sin_t * sin_r
    y = ellipse.cy + ellipse.a * cos_t * sin_r + ellipse.b * sin_t * cos_r
    return Polygon(np.column_stack([x, y]))


# ------------------------------- Douglas-Peucker -------------------------------
def _chord_deviation(points, a, b):
    # distance from each point to the segment a-b
    ab = b - a
    length_sq = float(ab @ ab)
    if length_sq == 0.0:
        return np.hypot(points[:, 0] - a[0], points[:, 1] - a[1])
    t = np.clip(((points - a) @ ab) / length_sq, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.hypot(points[:, 0] - closest[:, 0], points[:, 1] - closest[:, 1])


def _simplify_indices(pts, epsilon):
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        dev = _chord_deviation(pts[i + 1:j], pts[i], pts[j])
        k = int(np.argmax(dev))
        if dev[k] > epsilon:
            k += i + 1
            keep[k] = True
            stack.append((k, j))
            stack.append((i, k))
    return np.nonzero(keep)[0]


def douglas_peucker(vertices, epsilon, closed=False):
    '''
    Douglas-Peucker simplification. A vertex is kept iff its distance to the current
    chord is strictly greater than epsilon; ties on the farthest vertex go to the
    first one.

    Parameters:
    -----------
    vertices: array_like
        (n, 2) polyline, n >= 2
    epsilon: float
        Tolerance [px], >= 0
    closed: bool
        Treat the vertices as a ring (a repeated first vertex at the end is dropped).
        The ring is split at its two mutually farthest vertices and both arcs are
        simplified.

    Returns:
    --------
    simplified: ndarray
        Subsequence of the input vertices, in input order
    '''
    pts = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if epsilon < 0:
        raise InvalidGeometryError('epsilon must be >= 0, got {}'.format(epsilon))
    if closed and len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    n = len(pts)
    if n < 2:
        raise InvalidGeometryError('Simplification needs at least 2 vertices, got {}'.format(n))
    if n == 2:
        return pts.copy()
    if not closed:
        return pts[_simplify_indices(pts, epsilon)]

    dist = cdist(pts, pts)
    iu = np.triu_indices(n, 1)
    best = int(np.argmax(dist[iu]))
    i, j = int(iu[0][best]), int(iu[1][best])

    first = np.arange(i, j + 1)
    second = np.concatenate([np.arange(j, n), np.arange(0, i + 1)])
    kept = set(first[_simplify_indices(pts[first], epsilon)].tolist())
    kept |= set(second[_simplify_indices(pts[second], epsilon)].tolist())
    return pts[sorted(kept)]


# --------------------------------- Rasterizing ---------------------------------
def _rasterize(vertices, x_off, y_off, width, height):
    '''
    Fill the window [x_off, x_off+width) x [y_off, y_off+height) of the even-odd
    interior. Pixel centers on an edge resolve as follows: an edge spans the rows in
    [y_min, y_max) so top endpoints count and bottom endpoints do not, and horizontal
    spans are closed so centers exactly on a left or right edge are inside.
    '''
    mask = np.zeros((height, width), dtype=bool)
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)

    row_start = max(y_off, int(np.floor(lo.min() - 0.5)))
    row_stop = min(y_off + height - 1, int(np.ceil(hi.max() - 0.5)))
    for row in range(row_start, row_stop + 1):
        yc = row + 0.5
        active = (lo <= yc) & (yc < hi)
        if not active.any():
            continue
        t = (yc - y0[active]) / (y1[active] - y0[active])
        xs = np.sort(x0[active] + t * (x1[active] - x0[active]))
        for left, right in zip(xs[0::2], xs[1::2]):
            c0 = max(x_off, int(np.ceil(left - 0.5)))
            c1 = min(x_off + width - 1, int(np.floor(right - 0.5)))
            if c1 >= c0:
                mask[row - y_off, c0 - x_off:c1 - x_off + 1] = True
    return mask


def rasterize_polygon(polygon, width, height):
    '''
    Pixels of a width x height grid whose centers lie inside the polygon (even-odd
    rule), as a boolean (height, width) mask. See ``_rasterize`` for edge ties.
    '''
    if not isinstance(polygon, Polygon):
        polygon = Polygon(polygon)
    return _rasterize(polygon.vertices, 0, 0, width, height)


def rasterize_window(polygon, window):
    '''
    Rasterize inside a window ``(x_off, y_off, width, height)`` of a larger grid
    '''
    x_off, y_off, width, height = window
    return _rasterize(polygon.vertices, x_off, y_off, width, height)


# --------------------------------- Morphology ---------------------------------
def disk(radius):
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= radius ** 2


def smooth_mask(mask, radius):
    '''
    Morphological closing with a discrete disk, computed as if the grid were unbounded
    and cropped back. radius 0 returns the input.
    '''
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise InvalidGeometryError('radius must be >= 0, got {}'.format(radius))
    r = int(np.floor(radius))
    if r == 0:
        return mask.copy()
    se = disk(radius)
    padded = np.pad(mask, r)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    return closed[r:-r, r:-r]


# ------------------------------ Borders and scores ------------------------------
def border_counts(instance_map):
    '''
    Number of 4-adjacent pixel pairs between every pair of touching instances

    Returns:
    --------
    counts: dict
        (id_a, id_b) with id_a < id_b -> count
    '''
    m = np.asarray(instance_map)
    pairs = np.concatenate([np.column_stack([m[:, :-1].ravel(), m[:, 1:].ravel()]),
                            np.column_stack([m[:-1, :].ravel(), m[1:, :].ravel()])])
    pairs = pairs[(pairs[:, 0] != pairs[:, 1]) & (pairs.min(axis=1) != BACKGROUND)]
    if len(pairs) == 0:
        return {}
    pairs.sort(axis=1)
    unique, counts = np.unique(pairs, axis=0, return_counts=True)
    return {(int(a), int(b)): int(c) for (a, b), c in zip(unique, counts)}


def shared_border(instance_map, id_a, id_b):
    '''Number of 4-adjacent pixel pairs (p, q) with map[p] = id_a and map[q] = id_b'''
    m = np.asarray(instance_map)
    for inst in (id_a, id_b):
        if inst == BACKGROUND or not np.any(m == inst):
            raise UnknownIdError('id {} is not present in the instance map'.format(inst))
    a, b = m == id_a, m == id_b
    horizontal = (a[:, :-1] & b[:, 1:]) | (b[:, :-1] & a[:, 1:])
    vertical = (a[:-1, :] & b[1:, :]) | (b[:-1, :] & a[1:, :])
    return int(horizontal.sum() + vertical.sum())


def iou(a, b):
    '''Intersection over union of two masks, 0 when both are empty'''
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def boundary_pixels(mask):
    '''Pixels of the mask 8-adjacent to a non-member, outside the grid counts as non-member'''
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=EIGHT_CONNECTED, border_value=0)


def hausdorff(a, b):
    '''
    Symmetric Hausdorff distance [px] between the boundary pixel sets of two masks
    '''
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        raise EmptyInputError('Hausdorff distance needs two nonempty masks')
    u = np.argwhere(boundary_pixels(a)).astype(float)
    v = np.argwhere(boundary_pixels(b)).astype(float)
    return float(max(directed_hausdorff(u, v)[0], directed_hausdorff(v, u)[0]))
