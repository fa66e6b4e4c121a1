"""Gaussian joint heatmaps: encoding, sub-cell decoding, and binary blobs.

One channel per joint on an H' x W' grid at ``stride`` input pixels per
cell.  Cell (r, c) is centered at input pixel ((c + 0.5) * stride,
(r + 0.5) * stride); sigma is measured in heatmap cells.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .projection import FRAME_HEIGHT, FRAME_WIDTH, Pose2D
from .skeleton import NUM_JOINTS, ValidationError

DEFAULT_STRIDE = 4
DEFAULT_SIGMA = 2.0
DEFAULT_GRID_H = FRAME_HEIGHT // DEFAULT_STRIDE  # 64
DEFAULT_GRID_W = FRAME_WIDTH // DEFAULT_STRIDE   # 48

_HEADER = struct.Struct("<4I")  # K, H', W', stride


@dataclass
class Heatmap:
    """K-channel Gaussian heatmaps with values in [0, 1].

    ``data`` has shape (K, H', W'); ``sigma`` is the Gaussian std in heatmap
    cells; ``stride`` maps cells back to input pixels.
    """

    data: np.ndarray
    sigma: float
    stride: int


def encode_heatmap(
    pose2d: Pose2D,
    included: np.ndarray,
    grid_h: int = DEFAULT_GRID_H,
    grid_w: int = DEFAULT_GRID_W,
    stride: int = DEFAULT_STRIDE,
    sigma: float = DEFAULT_SIGMA,
) -> Heatmap:
    """Render one unit-peak Gaussian per joint; excluded joints give zero channels.

    Joints outside the frame still render (truncated Gaussian); the peak is 1
    exactly when the joint lies on a cell center.
    """
    if sigma <= 0.0:
        raise ValidationError("sigma must be positive")
    if grid_h < 1 or grid_w < 1 or stride < 1:
        raise ValidationError("grid dimensions and stride must be positive")
    included = np.asarray(included, dtype=bool)

    cols = np.arange(grid_w)
    rows = np.arange(grid_h)
    # Joint positions in continuous cell coordinates.
    cu = pose2d.joints[:, 0] / stride - 0.5
    cv = pose2d.joints[:, 1] / stride - 0.5

    du2 = (cols[None, :] - cu[:, None]) ** 2          # (K, W')
    dv2 = (rows[None, :] - cv[:, None]) ** 2          # (K, H')
    inv = 1.0 / (2.0 * sigma * sigma)
    data = np.exp(-(dv2[:, :, None] + du2[:, None, :]) * inv)
    data[~included] = 0.0
    return Heatmap(data=data, sigma=float(sigma), stride=int(stride))


def _parabolic_offset(values: np.ndarray) -> float:
    """Vertex offset (relative to the middle sample) of a log-space parabola.

    ``values`` are three consecutive positive channel samples.  For exact
    Gaussian data the fitted vertex is the true sub-cell peak position.
    """
    y = np.log(values)
    denom = y[0] - 2.0 * y[1] + y[2]
    if denom >= -1e-12:  # flat or non-concave: no refinement
        return 0.0
    off = 0.5 * (y[0] - y[2]) / denom
    return float(np.clip(off, -1.5, 1.5))


def _refine_axis(line: np.ndarray, idx: int) -> float:
    """Continuous cell coordinate of a 1D peak near ``idx``."""
    n = line.shape[0]
    if n < 3:
        return float(idx)
    lo = min(max(idx - 1, 0), n - 3)
    window = line[lo : lo + 3]
    if np.any(window <= 0.0):
        return float(idx)
    return lo + 1 + _parabolic_offset(window)


def decode_heatmap(hm: Heatmap) -> tuple[Pose2D, np.ndarray]:
    """Recover joint pixel positions and peak confidences from heatmaps.

    Per channel: argmax cell, then an independent log-parabolic sub-cell fit
    along each axis (exact for untruncated Gaussian channels), mapped back
    through the stride.  All-zero channels decode to (0, 0) with confidence 0.
    """
    k, _, _ = hm.data.shape
    joints = np.zeros((k, 2))
    conf = np.zeros(k)
    for j in range(k):
        channel = hm.data[j]
        peak = float(channel.max())
        if peak <= 0.0:
            continue
        r, c = np.unravel_index(int(channel.argmax()), channel.shape)
        cc = _refine_axis(channel[r, :], int(c))
        rr = _refine_axis(channel[:, c], int(r))
        joints[j, 0] = (cc + 0.5) * hm.stride
        joints[j, 1] = (rr + 0.5) * hm.stride
        conf[j] = peak
    return Pose2D(joints), conf


# ---------------------------------------------------------------------------
# Binary blob serialization
# ---------------------------------------------------------------------------


def heatmap_to_blob(hm: Heatmap) -> bytes:
    """Serialize: 16-byte header (K, H', W', stride as uint32 LE) + row-major float32."""
    k, h, w = hm.data.shape
    header = _HEADER.pack(k, h, w, hm.stride)
    return header + np.ascontiguousarray(hm.data, dtype="<f4").tobytes()


def blob_to_heatmap(blob: bytes, sigma: float = DEFAULT_SIGMA) -> Heatmap:
    """Inverse of ``heatmap_to_blob``.

    The blob header does not carry sigma, so the caller supplies it (dataset
    configs record the value used at encoding time).
    """
    if len(blob) < _HEADER.size:
        raise ValidationError("heatmap blob too short for header")
    k, h, w, stride = _HEADER.unpack_from(blob)
    expected = _HEADER.size + 4 * k * h * w
    if len(blob) < expected:
        raise ValidationError("heatmap blob truncated")
    data = (
        np.frombuffer(blob, dtype="<f4", count=k * h * w, offset=_HEADER.size)
        .astype(np.float64)
        .reshape(k, h, w)
    )
    return Heatmap(data=data, sigma=float(sigma), stride=int(stride))


def write_heatmap_file(path, heatmaps) -> None:
    """Concatenate per-sample blobs, in sample order, into a sidecar file."""
    with open(path, "wb") as fh:
        for hm in heatmaps:
            fh.write(heatmap_to_blob(hm))


def read_heatmap_file(path, sigma: float = DEFAULT_SIGMA) -> list[Heatmap]:
    """Read every blob from a sidecar file written by ``write_heatmap_file``."""
    out = []
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    while pos < len(raw):
        if len(raw) - pos < _HEADER.size:
            raise ValidationError("trailing bytes do not form a heatmap header")
        k, h, w, _ = _HEADER.unpack_from(raw, pos)
        size = _HEADER.size + 4 * k * h * w
        out.append(blob_to_heatmap(raw[pos : pos + size], sigma=sigma))
        pos += size
    return out
