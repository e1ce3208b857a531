# SECTION: Necessary imports
import zlib
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw
from scipy.spatial.distance import directed_hausdorff

from .errors import PreconditionError
from .grid import SdfGrid
#!SECTION

# SECTION: Constants
SURFACE_BAND = 0.02     # |prediction| at or below this counts as surface
RENDER_CLAMP = 0.5
PREDICT_CHUNK = 20000
#!SECTION

# SECTION: Grid prediction
def predict_grid(ens, g, mode='individual'):
    """Ensemble mean at every cell center of `g`."""
    centers = g.centers()
    values = np.empty(len(centers))
    for start in range(0, len(centers), PREDICT_CHUNK):
        values[start:start + PREDICT_CHUNK] = ens.predict(centers[start:start + PREDICT_CHUNK], mode=mode)
    return SdfGrid(g, values.reshape(g.shape))
#!SECTION

# SECTION: Metrics
def _check_specs(pred, gt):
    if not pred.spec.matches(gt.spec):
        raise PreconditionError(f"Grid specs differ: {pred.spec} vs {gt.spec}")


def surface_band_mask(grid):
    return np.abs(grid.values) <= SURFACE_BAND


def true_surface_mask(gt):
    '''
    Cells touched by the ground-truth surface: a sign change against any 4-neighbor, or a value
    within half a cell of zero.
    '''
    v = gt.values
    mask = np.abs(v) <= 0.5 * gt.spec.resolution
    flip_x = np.sign(v[:, 1:]) * np.sign(v[:, :-1]) < 0
    flip_y = np.sign(v[1:, :]) * np.sign(v[:-1, :]) < 0
    mask[:, 1:] |= flip_x
    mask[:, :-1] |= flip_x
    mask[1:, :] |= flip_y
    mask[:-1, :] |= flip_y
    return mask


def rmsd(pred, gt):
    '''
    Root mean square of the ground truth over the cells predicted as surface.
    Returns None when no cell is predicted as surface.
    '''
    _check_specs(pred, gt)
    band = surface_band_mask(pred)
    if not band.any():
        return None
    return float(np.sqrt(np.mean(gt.values[band] ** 2)))


def hausdorff_sets(A, B):
    """Symmetric Hausdorff distance between two point sets; None if either is empty."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 2)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 2)
    if len(A) == 0 or len(B) == 0:
        return None
    return float(max(directed_hausdorff(A, B)[0], directed_hausdorff(B, A)[0]))


def hausdorff(pred, gt):
    '''
    Hausdorff distance between the centers of the cells predicted as surface and the centers
    of the cells touched by the true surface. Returns None when either set is empty.
    '''
    _check_specs(pred, gt)
    centers = pred.spec.centers()
    A = centers[surface_band_mask(pred).ravel()]
    B = centers[true_surface_mask(gt).ravel()]
    return hausdorff_sets(A, B)
#!SECTION

# SECTION: Rendering
def sdf_colors(values):
    '''
    Blue (negative) -> white (zero) -> red (positive), clamped at +-0.5 m, with the surface band
    forced to pure white.

    Returns:
        uint8 array of shape values.shape + (3,)
    '''
    t = np.clip(np.asarray(values, dtype=np.float64) / RENDER_CLAMP, -1.0, 1.0)
    rgb = np.ones(t.shape + (3,))
    neg, pos = t < 0, t > 0
    rgb[neg, 0] = 1.0 + t[neg]
    rgb[neg, 1] = 1.0 + t[neg]
    rgb[pos, 1] = 1.0 - t[pos]
    rgb[pos, 2] = 1.0 - t[pos]
    rgb[np.abs(values) <= SURFACE_BAND] = 1.0
    return np.rint(255.0 * rgb).astype(np.uint8)


def expert_color(eid):
    """Stable per-expert RGB color from a hash of the id."""
    rgba = colormaps['tab20'](zlib.crc32(str(eid).encode()) % 20)
    return tuple(int(round(255 * c)) for c in rgba[:3])


def _to_image(rgb):
    # Grid row 0 is the lowest y, image row 0 is the top
    return Image.fromarray(np.ascontiguousarray(rgb[::-1]))


def draw_points(img, spec, points, color, radius=1):
    '''
    Draws one dot per point that falls inside the grid. Returns the number of dots drawn.
    '''
    draw = ImageDraw.Draw(img)
    rows, cols = spec.cell_of(points)
    drawn = 0
    for r, c in zip(rows.tolist(), cols.tolist()):
        if not (0 <= r < spec.height and 0 <= c < spec.width):
            continue
        y = spec.height - 1 - r
        draw.ellipse([c - radius, y - radius, c + radius, y + radius], fill=color)
        drawn += 1
    return drawn


def _save(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format='PPM')


def render(grid, path, overlay=None):
    '''
    Writes the grid as a binary PPM image.

    Args:
        grid: SdfGrid
        path: output path
        overlay: optional mapping expert id -> [N, 2] points drawn as dots in the expert's color

    Returns:
        number of overlay dots drawn
    '''
    img = _to_image(sdf_colors(grid.values))
    drawn = 0
    if overlay:
        radius = max(1, min(grid.spec.width, grid.spec.height) // 200)
        for eid in sorted(overlay):
            drawn += draw_points(img, grid.spec, overlay[eid], expert_color(eid), radius)
    _save(img, path)
    return drawn


def render_regions(ens, g, path):
    '''
    Areas of responsibility: every cell in the color of its responsible expert, primary PIs on
    top in black.
    '''
    owners = ens.idx.responsible_experts(g.centers()).reshape(g.shape)
    palette = {eid: expert_color(eid) for eid in ens.ids}
    rgb = np.zeros(g.shape + (3,), dtype=np.uint8)
    for eid, color in palette.items():
        rgb[owners == eid] = color
    img = _to_image(rgb)
    for eid in ens.ids:
        draw_points(img, g, ens.experts[eid].primary_pis, (0, 0, 0), radius=0)
    _save(img, path)
#!SECTION
