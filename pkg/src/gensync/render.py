"""Orthographic Gaussian splatting with depth-sorted alpha compositing.

Image-plane coordinates are scene units after the view rotation: ``u`` to the
right, ``v`` up, image centre at (0, 0), half-extent ``camera.scale``. Depth
is the rotated z coordinate; smaller depth is nearer the camera and is
composited first.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, make_result, matmul, mean, reshape, sub, square, tabs, index
from .errors import DimensionError

COV_EPS = 1e-6
ALPHA_MAX = 0.999
CULL_SIGMA = 3.0


@dataclass(frozen=True)
class Camera:
    azimuth: float = 0.0
    elevation: float = 0.0
    scale: float = 1.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not self.scale > 0:
            raise ValueError(f"camera scale must be positive, got {self.scale}")

    @classmethod
    def from_viewpoint(cls, v, scale=1.0, width=64, height=64):
        return cls(float(v[0]), float(v[1]), scale, width, height)

    def view_matrix(self):
        """Rotate the scene by -azimuth about y, then -elevation about x."""
        ca, sa = np.cos(-self.azimuth), np.sin(-self.azimuth)
        ce, se = np.cos(-self.elevation), np.sin(-self.elevation)
        ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
        return rx @ ry

    def pixel_centers(self):
        u = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * self.scale
        v = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * self.scale
        return u, v

    def to_pixels(self, uv):
        """Image-plane coordinates to continuous (column, row) pixel coordinates."""
        uv = np.asarray(uv, dtype=np.float64)
        col = (uv[..., 0] / self.scale + 1.0) * self.width / 2.0
        row = (1.0 - uv[..., 1] / self.scale) * self.height / 2.0
        return np.stack([col, row], axis=-1)


# ---------------------------------------------------------------- projection

def quat_to_rotmat(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_grad_to_quat(q, G):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: G[:, i, j]
    dq = np.empty_like(q)
    dq[:, 0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dq[:, 1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
                    + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dq[:, 2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
                    - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dq[:, 3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
                    + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return dq


def projected_covariance(rotations, log_scales, cam):
    """2x2 image-plane covariance of each Gaussian, regularized by COV_EPS * I.

    ``rotations`` must already be unit quaternions (w, x, y, z).
    """
    q = rotations.data
    s = np.exp(log_scales.data)
    P = cam.view_matrix()[:2]
    R = quat_to_rotmat(q)
    M = R * s[:, None, :]
    L = np.einsum("ij,njk->nik", P, M)
    cov = L @ L.transpose(0, 2, 1)
    cov[:, 0, 0] += COV_EPS
    cov[:, 1, 1] += COV_EPS

    def bw(g):
        dL = (g + g.transpose(0, 2, 1)) @ L
        dM = np.einsum("ji,njk->nik", P, dL)
        dR = dM * s[:, None, :]
        ds = (dM * R).sum(axis=1)
        return _rotmat_grad_to_quat(q, dR), ds * s

    return make_result(cov, (rotations, log_scales), bw, "projected_covariance")


def project(positions, rotations, log_scales, cam):
    """Image-plane means (N x 2), covariances (N x 2 x 2) and depths (N,)."""
    V = Tensor(cam.view_matrix().T)
    p_cam = matmul(positions, V)
    means = index(p_cam, (slice(None), slice(0, 2)))
    depth = p_cam.data[:, 2].copy()
    return means, projected_covariance(rotations, log_scales, cam), depth


# ---------------------------------------------------------------- rasterizer

def _splat_footprints(mu, cov, cam):
    """Per-Gaussian pixel boxes covering +-3 sigma along each image axis."""
    W, H, sc = cam.width, cam.height, cam.scale
    su = CULL_SIGMA * np.sqrt(cov[:, 0, 0])
    sv = CULL_SIGMA * np.sqrt(cov[:, 1, 1])
    j0 = np.ceil(((mu[:, 0] - su) / sc + 1.0) * W / 2.0 - 0.5)
    j1 = np.floor(((mu[:, 0] + su) / sc + 1.0) * W / 2.0 - 0.5)
    i0 = np.ceil((1.0 - (mu[:, 1] + sv) / sc) * H / 2.0 - 0.5)
    i1 = np.floor((1.0 - (mu[:, 1] - sv) / sc) * H / 2.0 - 0.5)
    j0 = np.clip(j0, 0, W).astype(np.int64)
    j1 = np.clip(j1, -1, W - 1).astype(np.int64)
    i0 = np.clip(i0, 0, H).astype(np.int64)
    i1 = np.clip(i1, -1, H - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    return j0, i0, nx, ny


def rasterize(means, covs, opacities, colors, depth, cam):
    """Composite splats front to back into an H x W x 3 image on black."""
    n = means.shape[0]
    H, W = cam.height, cam.width
    if n == 0:
        return Tensor(np.zeros((H, W, 3)))
    mu, cov = means.data, covs.data
    op = opacities.data.reshape(-1)
    col = colors.data
    if not (mu.shape == (n, 2) and cov.shape == (n, 2, 2) and op.shape == (n,) and col.shape == (n, 3)):
        raise DimensionError(
            f"inconsistent splat arrays: means {mu.shape}, covs {cov.shape}, "
            f"opacities {opacities.shape}, colors {col.shape}")

    order = np.lexsort((np.arange(n), depth))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    j0, i0, nx, ny = _splat_footprints(mu, cov, cam)
    cnt = nx * ny
    image = np.zeros((H * W, 3))
    total = int(cnt.sum())
    if total == 0:
        return make_result(image.reshape(H, W, 3), (means, covs, opacities, colors),
                           lambda g: (None, None, None, None), "rasterize")

    gid = np.repeat(np.arange(n), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nxg = nx[gid]
    jj = j0[gid] + local % nxg
    ii = i0[gid] + local // nxg
    pix = ii * W + jj

    perm = np.argsort(pix * n + rank[gid], kind="stable")
    gid, jj, ii, pix = gid[perm], jj[perm], ii[perm], pix[perm]

    ucol, vrow = cam.pixel_centers()
    du = ucol[jj] - mu[gid, 0]
    dv = vrow[ii] - mu[gid, 1]
    a, b, c, d = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 0], cov[:, 1, 1]
    det = a * d - b * c
    inv = np.empty_like(cov)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c / det
    inv[:, 1, 1] = a / det
    iA, iB, iC, iD = inv[gid, 0, 0], inv[gid, 0, 1], inv[gid, 1, 0], inv[gid, 1, 1]
    q = iA * du * du + (iB + iC) * du * dv + iD * dv * dv
    gauss = np.exp(-0.5 * q)
    alpha_raw = op[gid] * gauss
    live = alpha_raw <= ALPHA_MAX
    alpha = np.where(live, alpha_raw, ALPHA_MAX)

    first = np.empty(total, dtype=bool)
    first[0] = True
    first[1:] = pix[1:] != pix[:-1]
    starts = np.flatnonzero(first)
    seg = np.cumsum(first) - 1
    pos = np.arange(total) - starts[seg]
    P, Mx = starts.size, int(pos.max()) + 1

    A = np.zeros((P, Mx))
    A[seg, pos] = alpha
    C = np.zeros((P, Mx, 3))
    C[seg, pos] = col[gid]
    T = np.ones((P, Mx))
    if Mx > 1:
        T[:, 1:] = np.cumprod(1.0 - A[:, :-1], axis=1)
    w = A * T
    upix = pix[starts]
    image[upix] = (w[:, :, None] * C).sum(axis=1)

    def bw(g):
        Gp = g.reshape(-1, 3)[upix]
        contrib = (C * Gp[:, None, :]).sum(axis=2)
        wc = w * contrib
        suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
        d_alpha = (contrib * T - suffix / (1.0 - A))[seg, pos]
        d_alpha = np.where(live, d_alpha, 0.0)

        wp = w[seg, pos]
        gsel = Gp[seg]
        d_col = np.stack([np.bincount(gid, wp * gsel[:, k], minlength=n) for k in range(3)], axis=1)
        d_op = np.bincount(gid, d_alpha * gauss, minlength=n)

        dq = d_alpha * op[gid] * gauss * -0.5
        bc = iB + iC
        ddu = dq * (2.0 * iA * du + bc * dv)
        ddv = dq * (bc * du + 2.0 * iD * dv)
        d_mu = -np.stack([np.bincount(gid, ddu, minlength=n), np.bincount(gid, ddv, minlength=n)], axis=1)
        d_inv = np.empty((n, 2, 2))
        d_inv[:, 0, 0] = np.bincount(gid, dq * du * du, minlength=n)
        uv = np.bincount(gid, dq * du * dv, minlength=n)
        d_inv[:, 0, 1] = uv
        d_inv[:, 1, 0] = uv
        d_inv[:, 1, 1] = np.bincount(gid, dq * dv * dv, minlength=n)
        invT = inv.transpose(0, 2, 1)
        d_cov = -(invT @ d_inv @ invT)
        return d_mu, d_cov, d_op.reshape(opacities.shape), d_col

    return make_result(image.reshape(H, W, 3), (means, covs, opacities, colors), bw, "rasterize")


def render(positions, rotations, log_scales, opacities, colors, cam):
    """Project and composite; every argument except ``cam`` is an N-row Tensor."""
    n = positions.shape[0]
    if not (rotations.shape[0] == log_scales.shape[0] == opacities.shape[0] == colors.shape[0] == n):
        raise DimensionError("per-Gaussian arrays must share their first dimension")
    if n == 0:
        return Tensor(np.zeros((cam.height, cam.width, 3)))
    means, covs, depth = project(positions, rotations, log_scales, cam)
    return rasterize(means, covs, reshape(opacities, (n,)), colors, depth, cam)


# ---------------------------------------------------------------- loss and I/O

def image_loss(rendered, target):
    """Mean over pixels and channels of 0.8 * |diff| + 0.2 * diff**2."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if rendered.shape != target_data.shape:
        raise DimensionError(f"image sizes differ: {rendered.shape} vs {target_data.shape}")
    diff = sub(rendered, target if isinstance(target, Tensor) else Tensor(target_data))
    return mean(tabs(diff)) * 0.8 + mean(square(diff)) * 0.2


PYRAMID_FACTORS = (4, 8)


def _blur_downsample_matrix(n, factor):
    """(n // factor) x n rows of normalized Gaussian weights, sigma = factor pixels."""
    m = n // factor
    centers = (np.arange(m) + 0.5) * factor - 0.5
    d = np.arange(n)[None, :] - centers[:, None]
    w = np.exp(-0.5 * (d / factor) ** 2)
    return w / w.sum(axis=1, keepdims=True)


def downsample(img, factor):
    """Blur and subsample an H x W x 3 image (Tensor or array) by ``factor``."""
    is_tensor = isinstance(img, Tensor)
    data = img.data if is_tensor else np.asarray(img, dtype=np.float64)
    h, w, c = data.shape
    if h < factor or w < factor:
        raise DimensionError(f"cannot downsample {h}x{w} by {factor}")
    rows = _blur_downsample_matrix(h, factor)
    cols = np.kron(_blur_downsample_matrix(w, factor), np.eye(c)).T
    if not is_tensor:
        return (rows @ data.reshape(h, w * c) @ cols).reshape(h // factor, w // factor, c)
    out = matmul(matmul(Tensor(rows), reshape(img, (h, w * c))), Tensor(cols))
    return reshape(out, (h // factor, w // factor, c))


def pyramid_loss(rendered, target, coarse_weight=1.0, factors=PYRAMID_FACTORS):
    """:func:`image_loss` plus the same loss on blurred, subsampled copies.

    The coarse terms give displaced features a gradient long before they
    overlap their target at full resolution.
    """
    loss = image_loss(rendered, target)
    if coarse_weight == 0.0:
        return loss
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    for f in factors:
        loss = loss + image_loss(downsample(rendered, f), downsample(target_data, f)) * coarse_weight
    return loss


def to_bytes(img):
    img = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(img):
    q = to_bytes(img)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def export_frame(img, path, png=False):
    """Write a binary P6 PPM; with ``png`` also write a lossless PNG beside it."""
    try:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(img))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write frame: {exc.strerror}", os.fspath(path)) from exc
    if png:
        from PIL import Image as PILImage

        PILImage.fromarray(to_bytes(img)).save(os.path.splitext(path)[0] + ".png")


def decode_ppm(raw):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError("only 8-bit binary P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = np.frombuffer(raw[pos:pos + 3 * w * h], dtype=np.uint8)
    if body.size != 3 * w * h:
        raise ValueError("truncated PPM body")
    return body.reshape(h, w, 3).astype(np.float64) / 255.0


def import_frame(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
