"""Projective geometry on pixel coordinates.

Conventions used across the package:

* corners are ordered top-left, top-right, bottom-left, bottom-right and sit
  on pixel centres, i.e. ``(0, 0), (W-1, 0), (0, H-1), (W-1, H-1)``;
* a point is ``(u, v) = (column, row)``;
* a homography ``H`` maps source coordinates to target coordinates, and
  ``warp_image(img, H)`` samples ``img`` at ``H^-1 x`` for every output pixel
  ``x``, so ``warp_image(I_A, H_AB)`` lands in the frame of ``I_B``.

All functions accept an optional leading batch dimension.
"""
import torch

from .errors import ProjectiveOverflow, SingularSystem

W_EPS = 1e-8
# smallest accepted ratio of singular values of the 8x8 DLT system
RANK_TOL = 1e-13


def image_corners(height, width, dtype=torch.float32, device=None):
    return torch.tensor(
        [[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]],
        dtype=dtype,
        device=device,
    )


def dlt_system(src, dst):
    """Build ``A`` and ``b`` of ``A h = b`` for 4 correspondences.

    ``src`` and ``dst`` are ``(B, 4, 2)``; returns ``(B, 8, 8)`` and ``(B, 8)``.
    Row ``2i`` constrains ``u_i'`` and row ``2i+1`` constrains ``v_i'``.
    """
    u, v = src[..., 0], src[..., 1]
    up, vp = dst[..., 0], dst[..., 1]
    one, zero = torch.ones_like(u), torch.zeros_like(u)
    row_u = torch.stack([u, v, one, zero, zero, zero, -u * up, -v * up], dim=-1)
    row_v = torch.stack([zero, zero, zero, u, v, one, -u * vp, -v * vp], dim=-1)
    A = torch.stack([row_u, row_v], dim=-2).reshape(src.shape[0], 8, 8)
    b = torch.stack([up, vp], dim=-1).reshape(src.shape[0], 8)
    return A, b


def _batched(x, n):
    return x.unsqueeze(0) if x.dim() == n else x


def solve_dlt(corners, displacement, iteration=None):
    """Homography taking ``corners`` to ``corners + displacement``.

    The 8x8 system is solved densely in float64 and the result is cast back
    to the displacement dtype; gradients flow to ``displacement``.
    """
    squeeze = displacement.dim() == 2
    disp = _batched(displacement, 2)
    src = _batched(corners, 2).to(torch.float64)
    if src.shape[0] != disp.shape[0]:
        src = src.expand(disp.shape[0], 4, 2)
    dst = src + disp.to(torch.float64)
    if not torch.isfinite(dst).all():
        raise SingularSystem("non-finite corner displacement", iteration)
    A, b = dlt_system(src, dst)

    with torch.no_grad():
        sv = torch.linalg.svdvals(A)
        ratio = sv[:, -1] / sv[:, 0].clamp_min(1e-300)
        bad = ~(ratio > RANK_TOL)
    if bad.any():
        idx = bad.nonzero().flatten().tolist()
        raise SingularSystem(f"DLT system is rank deficient for batch entries {idx}", iteration)

    h = torch.linalg.solve(A, b.unsqueeze(-1)).squeeze(-1)
    H = torch.cat([h, torch.ones_like(h[:, :1])], dim=1).reshape(-1, 3, 3)
    H = H.to(displacement.dtype)
    return H[0] if squeeze else H


def normalize_homography(h):
    return h / h[..., 2:3, 2:3]


def _expand_h(h, pts):
    # align h (..., 3, 3) with pts (..., N1, N2, ..., 2)
    if h.dim() == 2:
        return h
    extra = pts.dim() - 1 - (h.dim() - 2)
    return h.reshape(h.shape[:-2] + (1,) * extra + (3, 3))


def project_points(h, pts, return_valid=False):
    """Map ``(u, v)`` points through ``h``.

    ``pts`` may be any ``(..., 2)`` tensor whose leading dims start with the
    batch dims of ``h``. Points whose homogeneous ``w`` is below ``1e-8`` in
    magnitude come back as NaN and are flagged in the optional mask.
    """
    he = _expand_h(h.to(pts.dtype), pts)
    u, v = pts[..., 0], pts[..., 1]
    x = he[..., 0, 0] * u + he[..., 0, 1] * v + he[..., 0, 2]
    y = he[..., 1, 0] * u + he[..., 1, 1] * v + he[..., 1, 2]
    w = he[..., 2, 0] * u + he[..., 2, 1] * v + he[..., 2, 2]
    valid = w.abs() >= W_EPS
    safe_w = torch.where(valid, w, torch.ones_like(w))
    out = torch.stack([x / safe_w, y / safe_w], dim=-1)
    out = torch.where(valid.unsqueeze(-1), out, torch.full_like(out, float("nan")))
    if return_valid:
        return out, valid
    return out


def displacement_from_homography(h, corners):
    squeeze = h.dim() == 2
    hb = _batched(h, 2)
    c = _batched(corners, 2).to(hb.dtype).expand(hb.shape[0], 4, 2)
    he = hb.unsqueeze(1)
    w = he[..., 2, 0] * c[..., 0] + he[..., 2, 1] * c[..., 1] + he[..., 2, 2]
    if (w <= W_EPS).any():
        raise ProjectiveOverflow("a corner maps to a point at or beyond infinity (w <= 1e-8)")
    d = project_points(hb, c) - c
    return d[0] if squeeze else d


def compose(h1, h2):
    """``h1 o h2``: apply ``h2`` first."""
    return normalize_homography(h1 @ h2)


def pixel_grid(height, width, dtype=torch.float32, device=None):
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([u, v], dim=-1)


def bilinear_sample(img, coords):
    """Sample ``img`` (B, C, H, W) at pixel ``coords`` (B, *S, 2) with zero fill.

    Integer coordinates reproduce pixel values exactly. NaN coordinates
    sample zero.
    """
    B, C, H, W = img.shape
    shape = coords.shape[1:-1]
    coords = coords.reshape(B, -1, 2)
    u, v = coords[..., 0], coords[..., 1]
    finite = torch.isfinite(u) & torch.isfinite(v)
    u = torch.where(finite, u, torch.full_like(u, -10.0))
    v = torch.where(finite, v, torch.full_like(v, -10.0))
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    wu = u - u0
    wv = v - v0
    u0 = u0.long()
    v0 = v0.long()
    flat = img.reshape(B, C, H * W)
    out = 0
    for du, dv, wt in (
        (0, 0, (1 - wu) * (1 - wv)),
        (1, 0, wu * (1 - wv)),
        (0, 1, (1 - wu) * wv),
        (1, 1, wu * wv),
    ):
        uu = u0 + du
        vv = v0 + dv
        inside = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        idx = (vv.clamp(0, H - 1) * W + uu.clamp(0, W - 1)).unsqueeze(1).expand(B, C, -1)
        vals = torch.gather(flat, 2, idx)
        out = out + vals * (wt * inside).unsqueeze(1)
    return out.reshape((B, C) + tuple(shape))


def warp_image(img, h):
    """Backward-warp ``img`` by ``h`` (bilinear, zero fill outside)."""
    squeeze = img.dim() == 3
    x = _batched(img, 3)
    hb = _batched(h, 2)
    if hb.shape[0] != x.shape[0]:
        hb = hb.expand(x.shape[0], 3, 3)
    h_inv = torch.linalg.inv(hb.to(torch.float64)).to(x.dtype)
    grid = pixel_grid(x.shape[-2], x.shape[-1], dtype=x.dtype, device=x.device)
    grid = grid.unsqueeze(0).expand(x.shape[0], -1, -1, -1)
    src = project_points(h_inv, grid)
    out = bilinear_sample(x, src)
    return out[0] if squeeze else out


def valid_mask(height, width, h, dtype=torch.float32):
    """1 where ``warp_image`` reads inside the source frame."""
    hb = _batched(h, 2)
    ones = torch.ones(hb.shape[0], 1, height, width, dtype=dtype, device=hb.device)
    return warp_image(ones, hb.to(dtype))
