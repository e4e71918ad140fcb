"""Synthetic differentiable renderer and frozen perceptual feature stub.

The renderer turns coefficient frames into 64x64 grayscale images: blendshape
landmarks are posed by the frame's global rotation (Rodrigues) and
translation, orthographically projected, and drawn as Gaussian splats with a
trainable per-landmark intensity; the accumulated field is squashed smoothly
into [0, 1).  Everything is differentiable with respect to the coefficients
and the intensities.

Image files use a 16-byte little-endian header: magic ``FFIM``, image count,
height, width; float64 pixels follow row-major.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
from torch import nn

from .errors import NumericError
from .motion import EXPR, JAW, MOTION_DIM, ROT, TRANS, BlendshapeModel, make_blendshape_model

IMAGE_SIZE = 64
SPLAT_SIGMA = 1.5
ORTHO_SCALE = 10.0
ORTHO_OFFSET = 32.0

IMAGE_MAGIC = b"FFIM"


def rotation_matrices(rotvec: torch.Tensor) -> torch.Tensor:
    """Batched differentiable Rodrigues map: (..., 3) -> (..., 3, 3).

    The angle uses sqrt(|r|^2 + tiny) so the gradient stays finite at the
    identity rotation.
    """
    theta = torch.sqrt((rotvec**2).sum(-1) + 1e-30)
    k = rotvec / theta.unsqueeze(-1)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = torch.zeros_like(kx)
    km = torch.stack([
        torch.stack([zero, -kz, ky], dim=-1),
        torch.stack([kz, zero, -kx], dim=-1),
        torch.stack([-ky, kx, zero], dim=-1),
    ], dim=-2)
    eye = torch.eye(3, dtype=rotvec.dtype).expand(km.shape)
    s = torch.sin(theta)[..., None, None]
    c = torch.cos(theta)[..., None, None]
    return eye + s * km + (1.0 - c) * (km @ km)


class SyntheticRenderer(nn.Module):
    """Landmark splat renderer over the synthetic blendshape geometry."""

    def __init__(self, blendshape: BlendshapeModel | None = None,
                 image_size: int = IMAGE_SIZE, sigma: float = SPLAT_SIGMA,
                 scale: float = ORTHO_SCALE, offset: float = ORTHO_OFFSET):
        super().__init__()
        blendshape = blendshape or make_blendshape_model()
        self.blendshape = blendshape
        self.image_size = image_size
        self.sigma = sigma
        self.scale = scale
        self.offset = offset
        idx = list(blendshape.landmark_indices)
        self.register_buffer("template", torch.as_tensor(blendshape.template_vertices[idx], dtype=torch.float64))
        self.register_buffer("expr_basis", torch.as_tensor(blendshape.expression_basis[idx], dtype=torch.float64))
        self.register_buffer("jaw_basis", torch.as_tensor(blendshape.jaw_basis[idx], dtype=torch.float64))
        self.register_buffer("grid", torch.arange(image_size, dtype=torch.float64))
        self.intensity = nn.Parameter(torch.ones(len(idx), dtype=torch.float64))

    def landmarks(self, coeffs: torch.Tensor) -> torch.Tensor:
        """Posed 3-D landmarks for coefficient frames: (..., 115) -> (..., 68, 3)."""
        if coeffs.shape[-1] != MOTION_DIM:
            raise ValueError(f"coefficients must have dim {MOTION_DIM}")
        verts = (
            self.template
            + torch.einsum("vck,...k->...vc", self.expr_basis, coeffs[..., EXPR])
            + torch.einsum("vck,...k->...vc", self.jaw_basis, coeffs[..., JAW])
        )
        rot = rotation_matrices(coeffs[..., ROT])
        verts = torch.einsum("...ij,...vj->...vi", rot, verts)
        return verts + coeffs[..., None, TRANS]

    def forward(self, coeffs: torch.Tensor) -> torch.Tensor:
        """Render frames: (..., 115) -> (..., S, S) grayscale in [0, 1)."""
        pts = self.landmarks(coeffs)
        # orthographic: x -> column, y -> row, z dropped
        col = self.scale * pts[..., 0] + self.offset
        row = self.scale * pts[..., 1] + self.offset
        inv = -0.5 / (self.sigma**2)
        wrow = torch.exp(inv * (self.grid - row.unsqueeze(-1)) ** 2)   # (..., 68, S)
        wcol = torch.exp(inv * (self.grid - col.unsqueeze(-1)) ** 2)   # (..., 68, S)
        raw = torch.einsum("...lr,...lc,l->...rc", wrow, wcol, self.intensity)
        return torch.tanh(raw)

    def render_numpy(self, coeffs) -> np.ndarray:
        """Convenience wrapper: ndarray coefficients in, ndarray images out."""
        with torch.no_grad():
            out = self.forward(torch.as_tensor(np.asarray(coeffs, dtype=np.float64)))
        img = out.numpy()
        if not np.all(np.isfinite(img)):
            raise NumericError("renderer produced non-finite pixels")
        return img


class PerceptualStub(nn.Module):
    """Frozen seeded three-layer conv stack standing in for a deep feature net."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [1, 4, 8, 16]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, dtype=torch.float64)
            with torch.no_grad():
                conv.weight.normal_(0.0, (cin * 9) ** -0.5, generator=gen)
                conv.bias.zero_()
            layers.append(conv)
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(..., S, S) -> (..., 16, S/8, S/8) frozen features."""
        lead = images.shape[:-2]
        x = images.reshape(-1, 1, images.shape[-2], images.shape[-1])
        x = torch.tanh(self.convs[0](x))
        x = torch.tanh(self.convs[1](x))
        x = self.convs[2](x)
        return x.reshape(*lead, *x.shape[1:])


# ---------------------------------------------------------------------------
# image container


def write_images(path, images):
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("images must be (count, H, W) or (H, W)")
    count, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack("<III", count, h, w))
        f.write(arr.astype("<f8").tobytes())


def read_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != IMAGE_MAGIC:
            raise ValueError(f"{path}: not an image container (bad magic)")
        count, h, w = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(count * h * w * 8), dtype="<f8")
        if data.size != count * h * w:
            raise ValueError(f"{path}: truncated payload")
    return data.reshape(count, h, w).astype(np.float64)
