"""Grayscale image I/O (binary PGM/PPM) and a Lowe-style SIFT detector/descriptor."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

SIGMA0 = 1.6
INPUT_SIGMA = 0.5
IMG_BORDER = 5
MAX_INTERP_STEPS = 5
ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
DESC_WIDTH = 4
DESC_BINS = 8
DESC_MAG_THR = 0.2


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # (height, width) float in [0, 1]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def load_image(path) -> Image:
    """Read a binary PGM (P5) or PPM (P6); color is reduced by luma weights."""
    with open(path, "rb") as fh:
        data = fh.read()
    m = _HEADER.match(data)
    if not m:
        magic = data[:2].decode("latin-1")
        raise ImageFormatError(f"unsupported or malformed image header (magic {magic!r})")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad dimensions or maxval: {w}x{h}, {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    body = data[m.end():]
    if len(body) < count * dtype.itemsize:
        raise ImageFormatError(f"truncated pixel data: need {count * dtype.itemsize} bytes, "
                               f"got {len(body)}")
    raw = np.frombuffer(body, dtype=dtype, count=count).astype(float) / maxval
    if channels == 3:
        raw = raw.reshape(h, w, 3)
        raw = 0.299 * raw[..., 0] + 0.587 * raw[..., 1] + 0.114 * raw[..., 2]
    return Image(np.clip(raw.reshape(h, w), 0.0, 1.0))


def save_pgm(image, path) -> None:
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    data = np.clip(np.round(px * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


@dataclass(frozen=True)
class Keypoints2D:
    """SIFT keypoints in image pixel coordinates.

    ``octave`` and ``layer`` locate each keypoint in the scale space it was
    found in; ``layer`` is fractional after sub-pixel refinement.
    """

    uv: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray
    octave: np.ndarray
    layer: np.ndarray
    response: np.ndarray

    def __len__(self) -> int:
        return len(self.scale)

    @classmethod
    def empty(cls) -> "Keypoints2D":
        return cls(np.empty((0, 2)), np.empty(0), np.empty(0), np.empty(0, np.int64),
                   np.empty(0), np.empty(0))

    @classmethod
    def from_uv(cls, uv, scale=None, orientation=None, scales_per_octave: int = 3) -> "Keypoints2D":
        """Keypoints at given pixels, for descriptors at externally chosen locations."""
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        n = len(uv)
        scale = np.full(n, SIGMA0) if scale is None else np.broadcast_to(np.asarray(scale, float), (n,)).copy()
        ori = np.zeros(n) if orientation is None else np.broadcast_to(np.asarray(orientation, float), (n,)).copy()
        # place each keypoint in the octave whose in-octave sigma falls in [SIGMA0, 2*SIGMA0)
        octave = np.maximum(np.floor(np.log2(scale / SIGMA0)), 0).astype(np.int64)
        layer = scales_per_octave * np.log2(scale / (SIGMA0 * 2.0 ** octave))
        return cls(uv, scale, ori, octave, layer, np.zeros(n))


@dataclass
class ScaleSpace:
    gaussians: list     # per octave: (s+3, h, w)
    dogs: list          # per octave: (s+2, h, w)
    scales_per_octave: int


def default_octaves(width: int, height: int) -> int:
    return max(1, int(math.floor(math.log2(min(width, height)))) - 3)


def build_scale_space(image: Image, octaves: int = None, scales_per_octave: int = 3) -> ScaleSpace:
    if image.width < 32 or image.height < 32:
        raise ValueError(f"image too small for SIFT: {image.width}x{image.height} (need >= 32x32)")
    s = scales_per_octave
    octaves = octaves or default_octaves(image.width, image.height)
    k = 2.0 ** (1.0 / s)
    sig = [SIGMA0 * k ** i for i in range(s + 3)]
    incr = [math.sqrt(sig[i] ** 2 - sig[i - 1] ** 2) for i in range(1, s + 3)]
    base = ndimage.gaussian_filter(image.pixels.astype(float),
                                   math.sqrt(SIGMA0 ** 2 - INPUT_SIGMA ** 2), mode="nearest")
    gaussians, dogs = [], []
    for o in range(octaves):
        if o > 0:
            base = gaussians[-1][s][::2, ::2]
            if min(base.shape) < 2 * IMG_BORDER + 3:
                break
        layers = [base]
        for sd in incr:
            layers.append(ndimage.gaussian_filter(layers[-1], sd, mode="nearest"))
        g = np.stack(layers)
        gaussians.append(g)
        dogs.append(g[1:] - g[:-1])
    return ScaleSpace(gaussians, dogs, s)


def _derivatives(D, l, y, x):
    c = D[l, y, x]
    dx = (D[l, y, x + 1] - D[l, y, x - 1]) * 0.5
    dy = (D[l, y + 1, x] - D[l, y - 1, x]) * 0.5
    ds = (D[l + 1, y, x] - D[l - 1, y, x]) * 0.5
    dxx = D[l, y, x + 1] + D[l, y, x - 1] - 2 * c
    dyy = D[l, y + 1, x] + D[l, y - 1, x] - 2 * c
    dss = D[l + 1, y, x] + D[l - 1, y, x] - 2 * c
    dxy = (D[l, y + 1, x + 1] - D[l, y + 1, x - 1] - D[l, y - 1, x + 1] + D[l, y - 1, x - 1]) * 0.25
    dxs = (D[l + 1, y, x + 1] - D[l + 1, y, x - 1] - D[l - 1, y, x + 1] + D[l - 1, y, x - 1]) * 0.25
    dys = (D[l + 1, y + 1, x] - D[l + 1, y - 1, x] - D[l - 1, y + 1, x] + D[l - 1, y - 1, x]) * 0.25
    g = np.array([dx, dy, ds])
    H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return g, H


def _refine(D, l, y, x, s, contrast_thresh, edge_thresh):
    """Quadratic sub-pixel/sub-scale refinement; None when the extremum is rejected."""
    nl, h, w = D.shape
    for _ in range(MAX_INTERP_STEPS):
        g, H = _derivatives(D, l, y, x)
        try:
            off = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            break
        x += int(round(off[0]))
        y += int(round(off[1]))
        l += int(round(off[2]))
        if (l < 1 or l > nl - 2 or x < IMG_BORDER or x >= w - IMG_BORDER
                or y < IMG_BORDER or y >= h - IMG_BORDER):
            return None
    else:
        return None
    g, H = _derivatives(D, l, y, x)
    contrast = D[l, y, x] + 0.5 * g @ off
    if abs(contrast) * s < contrast_thresh:
        return None
    tr = H[0, 0] + H[1, 1]
    det = H[0, 0] * H[1, 1] - H[0, 1] ** 2
    if det <= 0 or tr * tr * edge_thresh >= (edge_thresh + 1) ** 2 * det:
        return None
    return l, y, x, off, contrast


def _orientation_histogram(img, x, y, radius, sigma):
    h, w = img.shape
    x0, x1 = max(x - radius, 1), min(x + radius, w - 2)
    y0, y1 = max(y - radius, 1), min(y + radius, h - 2)
    if x0 > x1 or y0 > y1:
        return np.zeros(ORI_BINS)
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dx = img[yy, xx + 1] - img[yy, xx - 1]
    dy = img[yy + 1, xx] - img[yy - 1, xx]
    wgt = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma * sigma))
    mag = np.hypot(dx, dy) * wgt
    ang = np.arctan2(dy, dx)
    b = np.round(ORI_BINS * ang / (2 * math.pi)).astype(np.int64) % ORI_BINS
    hist = np.bincount(b.ravel(), weights=mag.ravel(), minlength=ORI_BINS)
    smooth = (np.roll(hist, 2) + np.roll(hist, -2)) / 16 + (np.roll(hist, 1) + np.roll(hist, -1)) * 4 / 16 + hist * 6 / 16
    return smooth


def detect_sift_keypoints(image: Image, octaves: int = None, scales_per_octave: int = 3,
                          contrast_thresh: float = 0.04, edge_thresh: float = 10.0,
                          scale_space: ScaleSpace = None) -> Keypoints2D:
    """Difference-of-Gaussian keypoints with dominant orientations.

    Pixel intensities are in [0, 1]; ``contrast_thresh`` is compared with
    ``|D| * scales_per_octave`` as in the usual OpenCV convention.
    """
    ss = scale_space or build_scale_space(image, octaves, scales_per_octave)
    s = ss.scales_per_octave
    pre = 0.5 * contrast_thresh / s
    rows = []
    for o, D in enumerate(ss.dogs):
        nl, h, w = D.shape
        mx = ndimage.maximum_filter(D, size=3, mode="nearest")
        mn = ndimage.minimum_filter(D, size=3, mode="nearest")
        cand = ((D == mx) | (D == mn)) & (np.abs(D) > pre)
        cand[0] = cand[-1] = False
        cand[:, :IMG_BORDER] = cand[:, h - IMG_BORDER:] = False
        cand[:, :, :IMG_BORDER] = cand[:, :, w - IMG_BORDER:] = False
        for l, y, x in zip(*np.nonzero(cand)):
            ref = _refine(D, int(l), int(y), int(x), s, contrast_thresh, edge_thresh)
            if ref is None:
                continue
            l2, y2, x2, off, contrast = ref
            sig_oct = SIGMA0 * 2.0 ** ((l2 + off[2]) / s)
            img = ss.gaussians[o][l2]
            hist = _orientation_histogram(img, x2, y2, int(round(3 * 1.5 * sig_oct)), 1.5 * sig_oct)
            hmax = hist.max()
            if hmax <= 0:
                continue
            left, right = np.roll(hist, 1), np.roll(hist, -1)
            for b in np.nonzero((hist > left) & (hist > right) & (hist >= ORI_PEAK_RATIO * hmax))[0]:
                denom = left[b] - 2 * hist[b] + right[b]
                shift = 0.5 * (left[b] - right[b]) / denom if denom != 0 else 0.0
                ang = ((b + shift) * 2 * math.pi / ORI_BINS) % (2 * math.pi)
                u = (x2 + off[0]) * 2 ** o
                v = (y2 + off[1]) * 2 ** o
                if not (0 <= u < image.width and 0 <= v < image.height):
                    continue
                rows.append((u, v, sig_oct * 2 ** o, ang, o, l2 + off[2], abs(contrast)))
    if not rows:
        return Keypoints2D.empty()
    rows.sort(key=lambda r: (r[4], r[1], r[0], r[3]))
    a = np.array(rows)
    return Keypoints2D(a[:, :2].copy(), a[:, 2].copy(), a[:, 3].copy(), a[:, 4].astype(np.int64),
                       a[:, 5].copy(), a[:, 6].copy())


def _descriptor(img, x, y, sig_oct, angle):
    """128-D descriptor at octave-image coords (x, y); None if the window leaves the image."""
    d, n = DESC_WIDTH, DESC_BINS
    hist_width = 3.0 * sig_oct
    radius = int(round(hist_width * math.sqrt(2) * (d + 1) * 0.5))
    h, w = img.shape
    xi, yi = int(round(x)), int(round(y))
    if xi - radius < 1 or yi - radius < 1 or xi + radius > w - 2 or yi + radius > h - 2:
        return None
    c, s_ = math.cos(angle), math.sin(angle)
    yy, xx = np.mgrid[yi - radius:yi + radius + 1, xi - radius:xi + radius + 1]
    ox, oy = xx - x, yy - y
    xr = (c * ox + s_ * oy) / hist_width
    yr = (-s_ * ox + c * oy) / hist_width
    rbin = yr + d / 2 - 0.5
    cbin = xr + d / 2 - 0.5
    inside = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    xx, yy, rbin, cbin, xr, yr = xx[inside], yy[inside], rbin[inside], cbin[inside], xr[inside], yr[inside]
    dx = img[yy, xx + 1] - img[yy, xx - 1]
    dy = img[yy + 1, xx] - img[yy - 1, xx]
    wgt = np.exp(-(xr * xr + yr * yr) / (2 * (0.5 * d) ** 2))
    mag = np.hypot(dx, dy) * wgt
    obin = ((np.arctan2(dy, dx) - angle) % (2 * math.pi)) * n / (2 * math.pi)

    r0, c0, o0 = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    hist = np.zeros((d + 2, d + 2, n))
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + dr + 1, c0 + dc + 1, (o0 + do) % n), mag * wr * wc * wo)
    vec = hist[1:d + 1, 1:d + 1].reshape(-1)
    nrm = np.linalg.norm(vec)
    if nrm <= 0:
        return None
    vec = np.minimum(vec / nrm, DESC_MAG_THR)
    return vec / np.linalg.norm(vec)


def extract_sift_descriptors(image: Image, keypoints: Keypoints2D, scales_per_octave: int = 3,
                             scale_space: ScaleSpace = None):
    """Descriptors for ``keypoints``. Returns ``(values (K,128), valid (K,))``;
    rows of invalid keypoints are zero."""
    ss = scale_space
    if ss is None:
        need = int(keypoints.octave.max()) + 1 if len(keypoints) else 1
        ss = build_scale_space(image, max(need, 1), scales_per_octave)
    s = ss.scales_per_octave
    out = np.zeros((len(keypoints), DESC_WIDTH * DESC_WIDTH * DESC_BINS))
    valid = np.zeros(len(keypoints), dtype=bool)
    for i in range(len(keypoints)):
        o = int(keypoints.octave[i])
        if o >= len(ss.gaussians):
            continue
        layer = float(keypoints.layer[i])
        li = int(np.clip(round(layer), 0, s + 2))
        sig_oct = keypoints.scale[i] / 2 ** o
        u, v = keypoints.uv[i]
        vec = _descriptor(ss.gaussians[o][li], u / 2 ** o, v / 2 ** o, sig_oct, keypoints.orientation[i])
        if vec is not None:
            out[i] = vec
            valid[i] = True
    return out, valid


def sift(image: Image, octaves: int = None, scales_per_octave: int = 3,
         contrast_thresh: float = 0.04, edge_thresh: float = 10.0):
    """Detect and describe; only keypoints with valid descriptors are returned."""
    ss = build_scale_space(image, octaves, scales_per_octave)
    kp = detect_sift_keypoints(image, scales_per_octave=scales_per_octave,
                               contrast_thresh=contrast_thresh, edge_thresh=edge_thresh, scale_space=ss)
    desc, valid = extract_sift_descriptors(image, kp, scales_per_octave, scale_space=ss)
    keep = np.nonzero(valid)[0]
    kp = Keypoints2D(kp.uv[keep], kp.scale[keep], kp.orientation[keep], kp.octave[keep],
                     kp.layer[keep], kp.response[keep])
    return kp, desc[keep]
