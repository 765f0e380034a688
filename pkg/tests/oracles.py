"""Independent reference computations used by several test modules."""
import numpy as np


def grid_giou(a, b, resolution: int = 512) -> float:
    """GIoU of two (cx, cy, w, h) boxes by counting unit-square cell centers.

    Areas are cell counts on a ``resolution`` x ``resolution`` grid; nothing
    here shares code with the closed-form implementation.
    """
    centers = (np.arange(resolution) + 0.5) / resolution
    xs, ys = centers[None, :], centers[:, None]

    def inside(x0, y0, x1, y1):
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)

    def corners(box):
        cx, cy, w, h = box
        return (max(cx - w / 2, 0.0), max(cy - h / 2, 0.0),
                min(cx + w / 2, 1.0), min(cy + h / 2, 1.0))

    ca, cb = corners(a), corners(b)
    ma, mb = inside(*ca), inside(*cb)
    hull = inside(min(ca[0], cb[0]), min(ca[1], cb[1]), max(ca[2], cb[2]), max(ca[3], cb[3]))
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    enclosing = np.count_nonzero(hull)
    return inter / union - (enclosing - union) / enclosing
