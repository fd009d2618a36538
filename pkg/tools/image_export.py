"""
Canvas export: PNG for viewing, raw float64 dump for exact comparisons.

Raw dump layout (little-endian):
    b"MSD1" | u32 C | u32 H | u32 W | C*H*W float64 values, C-major.
"""
import io
import os
import struct
from typing import List, Sequence

import numpy as np
import torch
from PIL import Image

from msd.core import DTYPE, LatentImage, check_latent
from msd.errors import ContractError
from utils import atomic_write, get_logger

logger = get_logger(__name__)

MAGIC = b"MSD1"
VALUE_RANGE = (-3.0, 3.0)


def _unit_interval(z: LatentImage) -> np.ndarray:
    lo, hi = VALUE_RANGE
    return ((z.clamp(lo, hi) - lo) / (hi - lo)).numpy()


def to_image(z: LatentImage) -> Image.Image:
    """16-bit grayscale for one channel, 8-bit RGB for three."""
    check_latent(z, "canvas")
    channels = z.shape[0]
    unit = _unit_interval(z)
    if channels == 1:
        return Image.fromarray(np.rint(unit[0] * 65535.0).astype(np.uint16))
    if channels != 3:
        logger.warning(f"{channels}-channel canvas: exporting the first channel as grayscale")
        return Image.fromarray(np.rint(unit[0] * 65535.0).astype(np.uint16))
    rgb = np.rint(np.transpose(unit, (1, 2, 0)) * 255.0).astype(np.uint8)
    return Image.fromarray(rgb)


def write_png(z: LatentImage, path: str) -> str:
    buffer = io.BytesIO()
    to_image(z).save(buffer, format="PNG")
    atomic_write(path, buffer.getvalue())
    return path


def raw_bytes(z: LatentImage) -> bytes:
    check_latent(z, "canvas")
    channels, height, width = z.shape
    header = MAGIC + struct.pack("<III", channels, height, width)
    return header + z.contiguous().numpy().astype("<f8").tobytes()


def write_raw_dump(z: LatentImage, path: str) -> str:
    atomic_write(path, raw_bytes(z))
    return path


def read_raw_dump(path: str) -> LatentImage:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise ContractError(f"{path} is not a raw canvas dump")
    channels, height, width = struct.unpack("<III", data[4:16])
    values = np.frombuffer(data[16:], dtype="<f8")
    if values.size != channels * height * width:
        raise ContractError(f"{path}: expected {channels * height * width} values, found {values.size}")
    return torch.from_numpy(values.astype(np.float64).reshape(channels, height, width)).to(DTYPE)


def export_templates(templates: Sequence[Sequence[LatentImage]], directory: str, name: str) -> List[str]:
    paths = []
    for condition, images in enumerate(templates):
        for i, template in enumerate(images):
            path = os.path.join(directory, f"{name}_template_c{condition}_{i}.png")
            paths.append(write_png(template, path))
    logger.info(f"exported {len(paths)} template image(s) to {directory}")
    return paths
