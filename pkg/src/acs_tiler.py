"""
Recorte adaptativo para IMDN_AS: cuatro parches solapados anclados a las esquinas

Cada parche tiene lados divisibles por 4, se procesa por separado y se pega en
su sitio descartando los incrementos de solape.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, PaddingError, TileSizeError
from imaging import ImageBuffer, resize_array

logger = logging.getLogger(__name__)

DEFAULT_PADDING = 4
MIN_SIDE = 8


@dataclass(frozen=True)
class TileSpec:
    """Rectángulo fuente, rectángulo de pegado y recorte local de un parche"""
    row0: int
    col0: int
    height: int
    width: int
    paste_row0: int
    paste_col0: int
    paste_height: int
    paste_width: int

    @property
    def crop_top(self) -> int:
        return self.paste_row0 - self.row0

    @property
    def crop_left(self) -> int:
        return self.paste_col0 - self.col0


@dataclass
class TiledOutput:
    tensor: np.ndarray
    tiles: List[TileSpec]
    seam: float = 0.0
    tile_outputs: List[np.ndarray] = field(default_factory=list, repr=False)


def check_padding(padding: int) -> None:
    if padding < 4 or padding % 4:
        raise PaddingError(f"padding inválido ({padding}): debe cumplir padding = 4k, k ≥ 1")


def _increment(size: int, padding: int) -> int:
    half = size // 2
    increment = padding - (half + padding) % 4
    if half + increment > size:
        raise TileSizeError(
            f"El parche ({half + increment}) supera la imagen ({size}); "
            f"reduce el padding o usa imágenes de al menos {MIN_SIDE} píxeles"
        )
    return increment


def compute_increments(height: int, width: int, padding: int = DEFAULT_PADDING) -> Tuple[int, int]:
    """
    Incrementos (Δl_H, Δl_W) que hacen floor(lado/2) + Δl divisible por 4

    Raises:
        PaddingError: padding que no es 4k con k >= 1
        TileSizeError: el parche no cabe en la imagen
    """
    check_padding(padding)
    return _increment(height, padding), _increment(width, padding)


def compute_tiles(height: int, width: int, padding: int = DEFAULT_PADDING) -> List[TileSpec]:
    """
    Los cuatro parches en orden TL, TR, BL, BR

    Arriba/izquierda pegan [0, floor(lado/2)); abajo/derecha pegan el resto.
    """
    dh, dw = compute_increments(height, width, padding)
    half_h, half_w = height // 2, width // 2
    side_h, side_w = half_h + dh, half_w + dw

    rows = [(0, 0, half_h), (height - side_h, half_h, height - half_h)]
    cols = [(0, 0, half_w), (width - side_w, half_w, width - half_w)]
    return [
        TileSpec(r0, c0, side_h, side_w, pr, pc, ph, pw)
        for r0, pr, ph in rows
        for c0, pc, pw in cols
    ]


def seam_discontinuity(tiles: Sequence[TileSpec], outputs: Sequence[np.ndarray]) -> float:
    """Máxima diferencia absoluta entre parches en sus zonas de solape"""
    worst = 0.0
    for i, j in combinations(range(len(tiles)), 2):
        a, b = tiles[i], tiles[j]
        top, bottom = max(a.row0, b.row0), min(a.row0 + a.height, b.row0 + b.height)
        left, right = max(a.col0, b.col0), min(a.col0 + a.width, b.col0 + b.width)
        if top >= bottom or left >= right:
            continue
        region_a = outputs[i][..., top - a.row0:bottom - a.row0, left - a.col0:right - a.col0]
        region_b = outputs[j][..., top - b.row0:bottom - b.row0, left - b.col0:right - b.col0]
        worst = max(worst, float(np.max(np.abs(region_a - region_b))))
    return worst


def super_resolve_tensor(x: np.ndarray, model, padding: int = DEFAULT_PADDING, workers: int = 4,
                         order: Optional[Sequence[int]] = None) -> TiledOutput:
    """
    Ejecuta IMDN_AS por parches sobre un tensor (N, 3, H, W)

    Args:
        x: Entrada
        model: ModelGraph IMDN_AS
        padding: 4k, k >= 1
        workers: Hilos para los cuatro forwards
        order: Permutación de los índices de parche para lanzarlos

    Returns:
        TiledOutput con la salida (mismo tamaño), los TileSpec y la discontinuidad de costura
    """
    if not model.config.any_size:
        raise ConfigError("El recorte adaptativo necesita una red IMDN_AS")
    height, width = x.shape[2:]
    if min(height, width) < MIN_SIDE:
        raise TileSizeError(f"Imagen {height}x{width}: el lado mínimo es {MIN_SIDE}")

    tiles = compute_tiles(height, width, padding)
    order = list(order) if order is not None else list(range(len(tiles)))
    if sorted(order) != list(range(len(tiles))):
        raise ConfigError(f"Orden de parches inválido: {order}")

    def run(index: int) -> np.ndarray:
        t = tiles[index]
        return model.forward(x[:, :, t.row0:t.row0 + t.height, t.col0:t.col0 + t.width])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {index: pool.submit(run, index) for index in order}
        outputs = [futures[index].result() for index in range(len(tiles))]

    out = np.zeros((x.shape[0], outputs[0].shape[1], height, width))
    for t, tile_out in zip(tiles, outputs):
        out[:, :, t.paste_row0:t.paste_row0 + t.paste_height, t.paste_col0:t.paste_col0 + t.paste_width] = \
            tile_out[:, :, t.crop_top:t.crop_top + t.paste_height, t.crop_left:t.crop_left + t.paste_width]

    seam = seam_discontinuity(tiles, outputs)
    logger.info(f"ACS: {len(tiles)} parches de {tiles[0].height}x{tiles[0].width}, "
                f"padding {padding}, discontinuidad {seam:.3e}")
    return TiledOutput(out, tiles, seam, outputs)


def super_resolve_tiled(image: ImageBuffer, model, padding: int = DEFAULT_PADDING,
                        workers: int = 4) -> ImageBuffer:
    """Imagen de cualquier tamaño -> imagen del mismo tamaño"""
    result = super_resolve_tensor(image.to_tensor(), model, padding, workers)
    return ImageBuffer.from_tensor(result.tensor)


def super_resolve_any_scale(image: ImageBuffer, model, factor: float = 1.0,
                            padding: int = DEFAULT_PADDING, workers: int = 4) -> Tuple[ImageBuffer, TiledOutput]:
    """
    Ampliación arbitraria: bicúbico a round(factor·lado) y después ACS + IMDN_AS

    Returns:
        (imagen resultante, detalle del recorte)
    """
    if factor <= 0:
        raise ConfigError(f"El factor de ampliación debe ser positivo: {factor}")
    out_h = int(math.floor(factor * image.height + 0.5))
    out_w = int(math.floor(factor * image.width + 0.5))
    values = resize_array(image.to_float(), out_h, out_w)
    tensor = np.ascontiguousarray(values.transpose(2, 0, 1)[None])
    result = super_resolve_tensor(tensor, model, padding, workers)
    logger.info(f"Ampliación x{factor}: {image.height}x{image.width} -> {out_h}x{out_w}")
    return ImageBuffer.from_tensor(result.tensor), result
