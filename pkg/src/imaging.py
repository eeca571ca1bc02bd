"""
Imágenes RGB de 8 bits, conversión a Y, reescalado bicúbico, parches de entrenamiento y métricas
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from skimage.metrics import structural_similarity

from errors import EmptyDatasetError, ImageFormatError, ShapeError

logger = logging.getLogger(__name__)

# Coeficientes BT.601 de rango reducido (sobre RGB en [0, 1])
Y_COEFFS = np.array([65.481, 128.553, 24.966])
Y_MIN = 16.0 / 255.0
Y_MAX = 235.0 / 255.0

CUBIC_A = -0.5


@dataclass
class ImageBuffer:
    """Imagen RGB de 8 bits, pixels (H, W, 3) uint8"""
    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ImageFormatError(f"Se esperaban píxeles uint8, recibido {self.pixels.dtype}")
        if self.pixels.shape != (self.height, self.width, 3):
            raise ShapeError(
                f"ImageBuffer {self.height}x{self.width} con array de forma {self.pixels.shape}"
            )

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "ImageBuffer":
        return cls(pixels.shape[0], pixels.shape[1], np.ascontiguousarray(pixels, dtype=np.uint8))

    @classmethod
    def from_float(cls, values: np.ndarray) -> "ImageBuffer":
        """(H, W, 3) en [0, 1] -> 8 bits con recorte y redondeo"""
        quantized = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
        return cls.from_array(quantized)

    @classmethod
    def from_tensor(cls, tensor: np.ndarray) -> "ImageBuffer":
        """Acepta (1, 3, H, W) o (3, H, W)"""
        if tensor.ndim == 4:
            if tensor.shape[0] != 1:
                raise ShapeError(f"from_tensor necesita N = 1, recibido {tensor.shape}")
            tensor = tensor[0]
        if tensor.ndim != 3 or tensor.shape[0] != 3:
            raise ShapeError(f"from_tensor necesita 3 canales, recibido {tensor.shape}")
        return cls.from_float(tensor.transpose(1, 2, 0))

    def to_float(self) -> np.ndarray:
        """(H, W, 3) float64 en [0, 1]"""
        return self.pixels.astype(np.float64) / 255.0

    def to_tensor(self) -> np.ndarray:
        """(1, 3, H, W) float64 en [0, 1]"""
        return np.ascontiguousarray(self.to_float().transpose(2, 0, 1)[None])

    def crop(self, top: int, left: int, height: int, width: int) -> "ImageBuffer":
        return ImageBuffer.from_array(self.pixels[top:top + height, left:left + width])


# ===== E/S PNG =====

def load_png(path: Union[str, Path]) -> ImageBuffer:
    """
    Lee un PNG de 8 bits (RGB, escala de grises o paleta)

    Raises:
        ImageFormatError: formato, profundidad o tipo de color no soportados; fallo de E/S
    """
    path = Path(path)
    try:
        with Image.open(path) as image:
            if image.format != "PNG":
                raise ImageFormatError(f"{path}: se esperaba PNG, es {image.format}")
            if image.mode == "RGB":
                pixels = np.array(image)
            elif image.mode in ("L", "P"):
                pixels = np.array(image.convert("RGB"))
            else:
                raise ImageFormatError(f"{path}: modo de color no soportado ({image.mode})")
    except (OSError, UnidentifiedImageError) as e:
        raise ImageFormatError(f"No se pudo leer {path}: {e}")
    return ImageBuffer.from_array(pixels)


def save_png(image: ImageBuffer, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image.pixels).save(path, format="PNG")
    except OSError as e:
        raise ImageFormatError(f"No se pudo escribir {path}: {e}")
    return path


def list_pngs(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyDatasetError(f"No existe el directorio {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


# ===== COLOR =====

def rgb_to_y(image) -> np.ndarray:
    """
    Luminancia Y en [16/255, 235/255]

    Args:
        image: ImageBuffer, array (..., 3) en [0, 1] o tensor (N, 3, H, W)

    Returns:
        Plano (H, W) (o (N, H, W) para tensores)
    """
    if isinstance(image, ImageBuffer):
        rgb = image.to_float()
    else:
        rgb = np.asarray(image, dtype=np.float64)
        if rgb.ndim == 4:
            rgb = np.moveaxis(rgb, 1, -1)
    if rgb.shape[-1] != 3:
        raise ShapeError(f"rgb_to_y necesita 3 canales, forma {rgb.shape}")
    y = (np.clip(rgb, 0.0, 1.0) @ Y_COEFFS + 16.0) / 255.0
    return np.clip(y, Y_MIN, Y_MAX)


# ===== BICÚBICO =====

def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Núcleo cúbico de Keys con soporte [-2, 2]"""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax <= 2.0, far, 0.0))


def resize_weights(in_size: int, out_size: int, antialias: bool = True) -> np.ndarray:
    """
    Matriz (out, in) de pesos bicúbicos a lo largo de un eje

    Centros alineados por píxel; al reducir con antialias el núcleo se ensancha
    por 1/escala. Los índices fuera de rango se replican al borde y cada fila
    suma 1.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"resize_weights: tamaños no positivos {in_size} -> {out_size}")
    scale = out_size / in_size
    kernel_scale = scale if (antialias and scale < 1.0) else 1.0
    width = 4.0 / kernel_scale

    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2.0).astype(int)
    taps = int(math.ceil(width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = kernel_scale * cubic(kernel_scale * (centers[:, None] - indices))
    weights /= weights.sum(axis=1, keepdims=True)

    matrix = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(matrix, (rows, np.clip(indices, 0, in_size - 1).ravel()), weights.ravel())
    return matrix


def resize_array(values: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Reescalado bicúbico separable de un array (H, W) o (H, W, C) en coma flotante"""
    values = np.asarray(values, dtype=np.float64)
    height, width = values.shape[:2]
    if (out_h, out_w) == (height, width):
        return values.copy()
    rows = resize_weights(height, out_h, antialias)
    cols = resize_weights(width, out_w, antialias)
    if values.ndim == 2:
        return rows @ values @ cols.T
    return np.einsum("ai,ijc,bj->abc", rows, values, cols, optimize=True)


def bicubic_resize(image: Union[ImageBuffer, np.ndarray], out_h: int, out_w: int,
                   antialias: bool = True) -> Union[ImageBuffer, np.ndarray]:
    """
    Reescalado bicúbico (a = -0.5) con bordes replicados

    Un ImageBuffer se devuelve cuantizado a 8 bits; un array, en coma flotante.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bicubic_resize: tamaño de salida inválido {out_h}x{out_w}")
    if isinstance(image, ImageBuffer):
        if (out_h, out_w) == (image.height, image.width):
            return ImageBuffer.from_array(image.pixels.copy())
        return ImageBuffer.from_float(resize_array(image.to_float(), out_h, out_w, antialias))
    return resize_array(image, out_h, out_w, antialias)


def modcrop(image: ImageBuffer, scale: int) -> ImageBuffer:
    """Recorta abajo/derecha hasta múltiplos de scale"""
    height = image.height - image.height % scale
    width = image.width - image.width % scale
    if height < 1 or width < 1:
        raise ShapeError(f"Imagen {image.height}x{image.width} menor que la escala {scale}")
    return image.crop(0, 0, height, width)


def synthesize_lr(hr: ImageBuffer, scale: int) -> Tuple[ImageBuffer, ImageBuffer]:
    """
    Par (HR recortado, LR) por reducción bicúbica con antialias

    Returns:
        (HR con lados múltiplos de scale, LR de lados HR/scale)
    """
    hr = modcrop(hr, scale)
    lr = bicubic_resize(hr, hr.height // scale, hr.width // scale, antialias=True)
    return hr, lr


# ===== MÉTRICAS =====

def _y_plane(image) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return rgb_to_y(image)
    plane = np.asarray(image, dtype=np.float64)
    if plane.ndim == 3 and plane.shape[-1] == 3:
        return rgb_to_y(plane)
    if plane.ndim != 2:
        raise ShapeError(f"Se esperaba un plano Y (H, W), forma {plane.shape}")
    return plane


def _shaved_pair(sr, hr, shave: int) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _y_plane(sr), _y_plane(hr)
    if a.shape != b.shape:
        raise ShapeError(f"Dimensiones distintas: {a.shape} y {b.shape}")
    if shave < 0:
        raise ShapeError(f"shave negativo: {shave}")
    if shave:
        if 2 * shave >= min(a.shape):
            raise ShapeError(f"shave {shave} deja vacía una imagen {a.shape}")
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    return a, b


def psnr_y(sr, hr, shave: int = 0) -> float:
    """
    PSNR en dB sobre Y en [0, 1] tras recortar shave píxeles por borde

    Returns:
        10·log10(1 / MSE), o inf si las imágenes son idénticas
    """
    a, b = _shaved_pair(sr, hr, shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_y(sr, hr, shave: int = 0) -> float:
    """SSIM medio con ventana gaussiana 11x11 (σ = 1.5), K1 = 0.01, K2 = 0.03, rango 1"""
    a, b = _shaved_pair(sr, hr, shave)
    try:
        return float(structural_similarity(
            a, b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        ))
    except ValueError as e:
        raise ShapeError(f"ssim_y: imagen demasiado pequeña para la ventana 11x11 ({a.shape}): {e}")


# ===== PARCHES =====

def augment_pair(lr: np.ndarray, hr: np.ndarray, flip: bool, rotations: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mismo volteo horizontal y giro de 90°·rotations a ambos (C, H, W)"""
    if flip:
        lr, hr = lr[:, :, ::-1], hr[:, :, ::-1]
    if rotations % 4:
        lr = np.rot90(lr, rotations, axes=(1, 2))
        hr = np.rot90(hr, rotations, axes=(1, 2))
    return np.ascontiguousarray(lr), np.ascontiguousarray(hr)


def sample_patch_pair(hr_image: Union[ImageBuffer, np.ndarray], scale: int, hr_patch: int,
                      rng: np.random.Generator, lr_image: Optional[np.ndarray] = None,
                      anchor: Optional[Tuple[int, int]] = None,
                      flip: bool = True, rotate: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Recorte alineado de un par LR/HR con aumentación

    Args:
        hr_image: HR (ImageBuffer o (H, W, 3) en [0, 1])
        scale: Factor entre HR y LR
        hr_patch: Lado del parche HR (divisible por scale)
        rng: Generador aleatorio
        lr_image: LR precalculado (H/scale, W/scale, 3); se calcula si falta
        anchor: Esquina LR fija (fila, columna) en lugar de una aleatoria
        flip: Permitir volteo horizontal aleatorio
        rotate: Permitir giros de 90° aleatorios

    Returns:
        (parche LR (3, p/s, p/s), parche HR (3, p, p)) en [0, 1]
    """
    if hr_patch % scale:
        raise ShapeError(f"hr_patch {hr_patch} no divisible por scale {scale}")
    hr = hr_image.to_float() if isinstance(hr_image, ImageBuffer) else np.asarray(hr_image, dtype=np.float64)
    if lr_image is None:
        hr = hr[:hr.shape[0] - hr.shape[0] % scale, :hr.shape[1] - hr.shape[1] % scale]
        lr_image = resize_array(hr, hr.shape[0] // scale, hr.shape[1] // scale)

    lr_patch = hr_patch // scale
    lr_h, lr_w = lr_image.shape[:2]
    if lr_h < lr_patch or lr_w < lr_patch:
        raise ShapeError(f"Imagen {hr.shape[0]}x{hr.shape[1]} menor que el parche {hr_patch}")

    if anchor is None:
        top = int(rng.integers(lr_h - lr_patch + 1))
        left = int(rng.integers(lr_w - lr_patch + 1))
    else:
        top, left = anchor

    lr = lr_image[top:top + lr_patch, left:left + lr_patch].transpose(2, 0, 1)
    hr_crop = hr[top * scale:(top + lr_patch) * scale, left * scale:(left + lr_patch) * scale].transpose(2, 0, 1)

    do_flip = flip and bool(rng.random() < 0.5)
    rotations = int(rng.integers(4)) if rotate else 0
    return augment_pair(lr, hr_crop, do_flip, rotations)


class PatchDataset:
    """
    Imágenes HR en memoria con su LR precalculado

    Con any_size el LR se vuelve a ampliar al tamaño HR (entrada de IMDN_AS) y
    los parches de entrada y objetivo tienen el mismo lado.
    """

    def __init__(self, hr_images: Sequence[ImageBuffer], scale: int, hr_patch: int,
                 flip: bool = True, rotate: bool = True, any_size: bool = False,
                 names: Optional[Sequence[str]] = None):
        self.scale = scale
        self.hr_patch = hr_patch
        self.flip = flip
        self.rotate = rotate
        self.any_size = any_size
        self.names = list(names) if names is not None else [f"image_{i}" for i in range(len(hr_images))]
        self.targets: List[np.ndarray] = []
        self.inputs: List[np.ndarray] = []

        for image in hr_images:
            hr, lr = synthesize_lr(image, scale)
            if min(hr.height, hr.width) < hr_patch:
                raise ShapeError(f"Imagen {hr.height}x{hr.width} menor que el parche {hr_patch}")
            target = hr.to_float()
            source = lr.to_float()
            if any_size:
                source = resize_array(source, hr.height, hr.width)
            self.targets.append(target)
            self.inputs.append(source)
        logger.info(f"Dataset: {len(self.targets)} imágenes, escala x{scale}, parche {hr_patch}")

    @classmethod
    def from_directory(cls, directory: Union[str, Path], **kwargs) -> "PatchDataset":
        paths = list_pngs(directory)
        if not paths:
            raise EmptyDatasetError(f"No hay PNG en {directory}")
        return cls([load_png(p) for p in paths], names=[p.name for p in paths], **kwargs)

    def __len__(self) -> int:
        return len(self.targets)

    def sample_pair(self, index: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        if self.any_size:
            return sample_patch_pair(self.targets[index], 1, self.hr_patch, rng,
                                     lr_image=self.inputs[index], flip=self.flip, rotate=self.rotate)
        return sample_patch_pair(self.targets[index], self.scale, self.hr_patch, rng,
                                 lr_image=self.inputs[index], flip=self.flip, rotate=self.rotate)

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Lote (B, 3, h, w) de entradas y (B, 3, H, W) de objetivos"""
        if not self.targets:
            raise EmptyDatasetError("El dataset está vacío")
        pairs = [self.sample_pair(int(rng.integers(len(self))), rng) for _ in range(batch_size)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# ===== INFORME =====

@dataclass
class EvalRow:
    image: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    """PSNR/SSIM por imagen y medias sobre Y"""
    shave: int
    scale: int
    method: str = "model"
    rows: List[EvalRow] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return math.fsum(r.psnr_db for r in self.rows) / len(self.rows) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return math.fsum(r.ssim for r in self.rows) / len(self.rows) if self.rows else math.nan

    def to_frame(self) -> pd.DataFrame:
        """Filas por imagen más una fila 'mean'"""
        records = [(r.image, r.psnr_db, r.ssim) for r in self.rows]
        records.append(("mean", self.mean_psnr, self.mean_ssim))
        return pd.DataFrame(records, columns=["image", "psnr_db", "ssim"])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def _score(item: Tuple[str, object, object], shave: int) -> EvalRow:
    name, sr, hr = item
    return EvalRow(name, psnr_y(sr, hr, shave), ssim_y(sr, hr, shave))


def evaluate_pairs(pairs: Iterable[Tuple[str, object, object]], shave: int, scale: int,
                   method: str = "model", workers: int = 1) -> EvalReport:
    """
    Puntúa pares (nombre, SR, HR) en paralelo; el orden del informe es el de entrada

    Raises:
        EmptyDatasetError: si no hay pares
    """
    items = list(pairs)
    if not items:
        raise EmptyDatasetError("No hay imágenes que evaluar")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda item: _score(item, shave), items))
    report = EvalReport(shave=shave, scale=scale, method=method, rows=rows)
    logger.info(f"Evaluadas {len(rows)} imágenes: PSNR {report.mean_psnr:.4f} dB, SSIM {report.mean_ssim:.4f}")
    return report
