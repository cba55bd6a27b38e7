"""Hybrid ray integration and training losses.

Stage 1 composites per-hit colors: lattice hits get alpha from the opacity
net and color from the color net over the feature net's output; base hits
are opaque textured surface samples; cavity hits use the cavity texture.
Stage 2 mimics deferred rendering: features are alpha-composited into one
vector per ray, the color net runs once per ray, and rays that end on the
base mesh blend the lattice color with the surface color by the remaining
transmittance.

Losses: an L1 log-sRGB photometric term and a mean-square accumulated-alpha
term over background pixels. Stage 2 computes each loss twice, with and
without straight-through binarized alphas, and blends the two linearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import lattice as lattice_mod
from .rig import KIND_BASE, KIND_CAVITY, KIND_LATTICE, PoseParams, RigModel, deform
from .tracer import TraceResult

SRGB_EPS = 1.0 / 255.0

tallies = {"negative_pred_clamped": 0}


class RenderError(Exception):
    pass


# ---------------------------------------------------------------------------
# posed scene soup

@dataclass
class SceneGeometry:
    """Posed triangle soup: rig (base + cavity) triangles first, lattice after."""

    tri_verts: np.ndarray  # (T, 3, 3) f8
    tri_kinds: np.ndarray  # (T,) u8
    n_rig_tris: int
    rig: RigModel
    lattice: lattice_mod.PrismLattice | None

    def lattice_tri_of_soup(self, soup_ids: np.ndarray) -> np.ndarray:
        return np.asarray(soup_ids) - self.n_rig_tris


def build_scene(
    rig: RigModel, lat: lattice_mod.PrismLattice | None, params: PoseParams
) -> SceneGeometry:
    posed = deform(rig, params)
    rig_tris = posed[rig.triangles.astype(np.int64)]
    kinds = [rig.triangle_kinds.astype(np.uint8)]
    parts = [rig_tris]
    if lat is not None:
        posed_lat = lattice_mod.pose_lattice(lat, rig, params)
        parts.append(posed_lat[lat.lattice_triangles.astype(np.int64)])
        kinds.append(np.full(lat.n_triangles, KIND_LATTICE, dtype=np.uint8))
    return SceneGeometry(
        tri_verts=np.concatenate(parts),
        tri_kinds=np.concatenate(kinds),
        n_rig_tris=rig.n_triangles,
        rig=rig,
        lattice=lat,
    )


# ---------------------------------------------------------------------------
# learnable textures

class TextureSet(nn.Module):
    """Linear-RGB learnable images: face color, face alpha map, cavity color."""

    def __init__(self, face: np.ndarray, face_alpha: np.ndarray, cavity: np.ndarray):
        super().__init__()
        self.face = nn.Parameter(torch.as_tensor(face, dtype=torch.float32))
        self.face_alpha = nn.Parameter(torch.as_tensor(face_alpha, dtype=torch.float32))
        self.cavity = nn.Parameter(torch.as_tensor(cavity, dtype=torch.float32))

    @staticmethod
    def from_rig(rig: RigModel) -> "TextureSet":
        return TextureSet(
            face=rig.textures["face"].astype(np.float32) / 255.0,
            face_alpha=rig.textures["face_alpha"].astype(np.float32) / 255.0,
            cavity=rig.textures["cavity"].astype(np.float32) / 255.0,
        )

    def parameters_list(self) -> list[nn.Parameter]:
        return [self.face, self.face_alpha, self.cavity]


def sample_texture(tex: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample with clamp-to-edge; texel centers at (i + 0.5)/size.

    `uv` is (B, 2) in [0,1], u along columns, v down rows. Gradients scatter
    to the four corner texels of each tap.
    """
    h, w = tex.shape[0], tex.shape[1]
    squeeze = tex.ndim == 2
    if squeeze:
        tex = tex[:, :, None]
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x0c = x0.clamp(0, w - 1)
    x1c = (x0 + 1).clamp(0, w - 1)
    y0c = y0.clamp(0, h - 1)
    y1c = (y0 + 1).clamp(0, h - 1)
    c00 = tex[y0c, x0c]
    c10 = tex[y0c, x1c]
    c01 = tex[y1c, x0c]
    c11 = tex[y1c, x1c]
    out = (
        c00 * (1 - fx) * (1 - fy)
        + c10 * fx * (1 - fy)
        + c01 * (1 - fx) * fy
        + c11 * fx * fy
    )
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# ray sample batches

@dataclass
class RaySampleBatch:
    """Traced rays with hits padded to (R, K); K is the batch's max hit count."""

    origins: torch.Tensor  # (R, 3)
    dirs: torch.Tensor  # (R, 3) unit
    valid: torch.Tensor  # (R, K) bool
    kind: torch.Tensor  # (R, K) int8, -1 padding
    canon: torch.Tensor  # (R, K, 3) canonical points, zero off-lattice
    uv: torch.Tensor  # (R, K, 2) surface uvs, zero off-surface
    gt_srgb: torch.Tensor  # (R, 3)
    bg_mask: torch.Tensor  # (R,) bool ground-truth background

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    @property
    def max_hits(self) -> int:
        return self.valid.shape[1]

    @property
    def lat_mask(self) -> torch.Tensor:
        return self.kind == KIND_LATTICE

    @property
    def base_mask(self) -> torch.Tensor:
        return self.kind == KIND_BASE

    @property
    def cavity_mask(self) -> torch.Tensor:
        return self.kind == KIND_CAVITY


def make_ray_batch(
    scene: SceneGeometry,
    trace: TraceResult,
    origins: np.ndarray,
    dirs: np.ndarray,
    gt_srgb: np.ndarray,
    bg_mask: np.ndarray,
    dtype: torch.dtype = torch.float32,
) -> RaySampleBatch:
    n_rays = trace.n_rays
    counts = np.diff(trace.ray_ptr)
    k = max(int(counts.max()), 1) if n_rays else 1
    ray_of_hit = np.repeat(np.arange(n_rays), counts)
    slot = np.arange(trace.n_hits) - trace.ray_ptr[:-1][ray_of_hit]

    valid = np.zeros((n_rays, k), dtype=bool)
    kind = np.full((n_rays, k), -1, dtype=np.int8)
    canon = np.zeros((n_rays, k, 3))
    uv = np.zeros((n_rays, k, 2))
    valid[ray_of_hit, slot] = True
    kind[ray_of_hit, slot] = trace.kind.astype(np.int8)

    is_lat = trace.kind == KIND_LATTICE
    if is_lat.any():
        if scene.lattice is None:
            raise RenderError("trace contains lattice hits but scene has no lattice")
        lat_tris = scene.lattice_tri_of_soup(trace.tri_id[is_lat])
        pts = lattice_mod.canonical_points(scene.lattice, lat_tris, trace.bary[is_lat])
        canon[ray_of_hit[is_lat], slot[is_lat]] = pts
    is_surf = ~is_lat
    if is_surf.any():
        rig = scene.rig
        tri_uv = rig.uvs.astype(np.float64)[rig.triangles[trace.tri_id[is_surf]].astype(np.int64)]
        uvs = np.einsum("bk,bkc->bc", trace.bary[is_surf], tri_uv)
        uv[ray_of_hit[is_surf], slot[is_surf]] = uvs

    return RaySampleBatch(
        origins=torch.as_tensor(origins, dtype=dtype),
        dirs=torch.as_tensor(dirs, dtype=dtype),
        valid=torch.as_tensor(valid),
        kind=torch.as_tensor(kind),
        canon=torch.as_tensor(canon, dtype=dtype),
        uv=torch.as_tensor(uv, dtype=dtype),
        gt_srgb=torch.as_tensor(gt_srgb, dtype=dtype),
        bg_mask=torch.as_tensor(np.asarray(bg_mask, dtype=bool)),
    )


# ---------------------------------------------------------------------------
# compositing

def binarize_st(a: torch.Tensor) -> torch.Tensor:
    """Hard threshold at 0.5 forward; identity Jacobian backward."""
    hard = (a >= 0.5).to(a.dtype)
    return a + (hard - a).detach()


@dataclass
class CompositeResult:
    rgb: torch.Tensor  # (R, 3) linear
    acc_alpha: torch.Tensor  # (R,) sum of T_k a_k over lattice hits
    transmittance: torch.Tensor  # (R,) T_K left after all lattice hits
    predicted_alpha: torch.Tensor  # (R,) acc_alpha + T_K * terminal alpha
    per_hit_t: torch.Tensor  # (R, K) transmittance before each hit
    per_hit_alpha: torch.Tensor  # (R, K)


def _per_hit_alphas(
    batch: RaySampleBatch,
    fields,
    textures: TextureSet,
    binarize: bool,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(alpha (R,K), flat lattice canon points, flat lattice index tuple)."""
    lat = batch.lat_mask & batch.valid
    base = batch.base_mask & batch.valid
    cav = batch.cavity_mask & batch.valid
    r, k = batch.valid.shape
    alpha = torch.zeros((r, k), dtype=batch.origins.dtype)

    idx_lat = lat.nonzero(as_tuple=True)
    if idx_lat[0].numel():
        a_lat = fields.forward_opacity(batch.canon[idx_lat])
        if binarize:
            a_lat = binarize_st(a_lat)
        alpha = alpha.index_put(idx_lat, a_lat)

    idx_base = base.nonzero(as_tuple=True)
    if idx_base[0].numel():
        a_map = sample_texture(textures.face_alpha, batch.uv[idx_base])
        # base surface opacity is alpha-tested; straight-through keeps the
        # alpha map trainable through the threshold
        alpha = alpha.index_put(idx_base, binarize_st(a_map))

    idx_cav = cav.nonzero(as_tuple=True)
    if idx_cav[0].numel():
        alpha = alpha.index_put(
            idx_cav, torch.ones(idx_cav[0].numel(), dtype=alpha.dtype)
        )
    return alpha, idx_lat, idx_base, idx_cav


def _transmittance(alpha: torch.Tensor) -> torch.Tensor:
    """Exclusive cumulative product of (1 - alpha) along hits: T_1 = 1."""
    one = torch.ones_like(alpha[:, :1])
    return torch.cumprod(torch.cat([one, 1.0 - alpha[:, :-1]], dim=1), dim=1)


def _surface_colors(batch, textures, idx_base, idx_cav):
    r, k = batch.valid.shape
    colors = torch.zeros((r, k, 3), dtype=batch.origins.dtype)
    if idx_base[0].numel():
        colors = colors.index_put(idx_base, sample_texture(textures.face, batch.uv[idx_base]))
    if idx_cav[0].numel():
        colors = colors.index_put(idx_cav, sample_texture(textures.cavity, batch.uv[idx_cav]))
    return colors


def integrate_stage1(
    batch: RaySampleBatch, fields, textures: TextureSet, binarize: bool = False
) -> CompositeResult:
    """Per-hit compositing: I = sum_k T_k a_k c_k, surface hits included."""
    alpha, idx_lat, idx_base, idx_cav = _per_hit_alphas(batch, fields, textures, binarize)
    colors = _surface_colors(batch, textures, idx_base, idx_cav)
    if idx_lat[0].numel():
        f = fields.forward_feature(batch.canon[idx_lat])
        d = batch.dirs[idx_lat[0]]
        colors = colors.index_put(idx_lat, fields.forward_color(f, d))

    trans = _transmittance(alpha)
    weights = trans * alpha
    rgb = (weights[:, :, None] * colors).sum(dim=1)
    lat = batch.lat_mask & batch.valid
    acc_alpha = (weights * lat).sum(dim=1)
    t_k = torch.where(lat, 1.0 - alpha, torch.ones_like(alpha)).prod(dim=1)
    predicted_alpha = weights.sum(dim=1)
    return CompositeResult(rgb, acc_alpha, t_k, predicted_alpha, trans, alpha)


def integrate_stage2(
    batch: RaySampleBatch, fields, textures: TextureSet, binarize: bool = False
) -> CompositeResult:
    """Aggregated-feature compositing: the color net runs once per ray.

    I_lat = C(sum_k T_k a_k F(p_k), d) over lattice hits; rays whose final
    hit is base/cavity blend I_lat with the surface color by the remaining
    transmittance. Rays with no hits return black.
    """
    alpha, idx_lat, idx_base, idx_cav = _per_hit_alphas(batch, fields, textures, binarize)
    r, k = batch.valid.shape
    dtype = batch.origins.dtype

    trans = _transmittance(alpha)
    weights = trans * alpha
    lat = batch.lat_mask & batch.valid
    w_lat = weights * lat

    feats = torch.zeros((r, k, fields.mlp_feature.widths[-1]), dtype=dtype)
    if idx_lat[0].numel():
        feats = feats.index_put(idx_lat, fields.forward_feature(batch.canon[idx_lat]))
    f_bar = (w_lat[:, :, None] * feats).sum(dim=1)
    i_lat = fields.forward_color(f_bar, batch.dirs)

    surf_colors = _surface_colors(batch, textures, idx_base, idx_cav)
    surf_mask = (batch.base_mask | batch.cavity_mask) & batch.valid  # at most one per ray
    c_term = (surf_colors * surf_mask[:, :, None]).sum(dim=1)
    alpha_term = (alpha * surf_mask).sum(dim=1)

    t_k = torch.where(lat, 1.0 - alpha, torch.ones_like(alpha)).prod(dim=1)
    blend = t_k * alpha_term
    rgb = (1.0 - blend)[:, None] * i_lat + blend[:, None] * c_term

    empty = ~batch.valid.any(dim=1)
    rgb = torch.where(empty[:, None], torch.zeros_like(rgb), rgb)

    acc_alpha = (weights * lat).sum(dim=1)
    predicted_alpha = weights.sum(dim=1)
    return CompositeResult(rgb, acc_alpha, t_k, predicted_alpha, trans, alpha)


# ---------------------------------------------------------------------------
# losses

def srgb_encode(x: torch.Tensor) -> torch.Tensor:
    """Standard linear -> sRGB transfer, elementwise, differentiable."""
    x = torch.clamp(x, min=0.0)
    lo = 12.92 * x
    hi = 1.055 * torch.pow(torch.clamp(x, min=0.0031308), 1.0 / 2.4) - 0.055
    return torch.where(x <= 0.0031308, lo, hi)


def srgb_decode(x: torch.Tensor) -> torch.Tensor:
    lo = x / 12.92
    hi = torch.pow((torch.clamp(x, min=0.04045) + 0.055) / 1.055, 2.4)
    return torch.where(x <= 0.04045, lo, hi)


def loss_photo(pred_linear: torch.Tensor, gt_srgb: torch.Tensor) -> torch.Tensor:
    """Mean |log(srgb(pred) + eps) - log(gt + eps)|, eps = 1/255."""
    if bool((pred_linear < 0).any()):
        tallies["negative_pred_clamped"] += int((pred_linear < 0).sum())
    pred = srgb_encode(pred_linear)  # clamps negatives
    return (torch.log(pred + SRGB_EPS) - torch.log(gt_srgb + SRGB_EPS)).abs().mean()


def loss_alpha(predicted_alpha: torch.Tensor, bg_mask: torch.Tensor) -> torch.Tensor:
    """Mean square of the predicted per-ray alpha over background rays."""
    if not bool(bg_mask.any()):
        return torch.zeros((), dtype=predicted_alpha.dtype)
    a = predicted_alpha[bg_mask]
    return (a * a).mean()


def stage_loss(
    batch: RaySampleBatch,
    fields,
    textures: TextureSet,
    stage: int,
    binarize: bool,
    alpha_weight: float = 1.0,
) -> tuple[torch.Tensor, dict]:
    integrate = integrate_stage1 if stage == 1 else integrate_stage2
    res = integrate(batch, fields, textures, binarize=binarize)
    lp = loss_photo(res.rgb, batch.gt_srgb)
    la = loss_alpha(res.predicted_alpha, batch.bg_mask)
    return lp + alpha_weight * la, {"photo": float(lp), "alpha": float(la)}


def blended_loss(
    batch: RaySampleBatch,
    fields,
    textures: TextureSet,
    lam: float,
    stage: int = 2,
    alpha_weight: float = 1.0,
) -> tuple[torch.Tensor, dict]:
    """(1 - lam) * soft loss + lam * straight-through binarized loss."""
    if not (0.0 <= lam <= 1.0):
        raise RenderError(f"blend factor must be in [0, 1], got {lam}")
    if lam == 0.0:
        loss, parts = stage_loss(batch, fields, textures, stage, binarize=False,
                                 alpha_weight=alpha_weight)
    elif lam == 1.0:
        loss, parts = stage_loss(batch, fields, textures, stage, binarize=True,
                                 alpha_weight=alpha_weight)
    else:
        soft, p_soft = stage_loss(batch, fields, textures, stage, binarize=False,
                                  alpha_weight=alpha_weight)
        hard, p_hard = stage_loss(batch, fields, textures, stage, binarize=True,
                                  alpha_weight=alpha_weight)
        loss = (1.0 - lam) * soft + lam * hard
        parts = {k: (1.0 - lam) * p_soft[k] + lam * p_hard[k] for k in p_soft}
    parts["lambda"] = lam
    return loss, parts
