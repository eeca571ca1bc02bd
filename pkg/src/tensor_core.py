"""
Núcleo numérico del motor IMDN
Tensores NCHW en doble precisión y las primitivas forward que usa la arquitectura
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import ConfigError, ShapeError


# Un Tensor es un ndarray float64 de rango 4 (N, C, H, W)
Tensor = np.ndarray


def as_tensor(data) -> Tensor:
    """
    Convierte datos a Tensor float64 de rango 4

    Raises:
        ShapeError: si el rango no es 4
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"Se esperaba un tensor (N, C, H, W), rango recibido {arr.ndim}")
    return arr


@dataclass
class ConvLayer:
    """Parámetros de una convolución 2-D con zero padding simétrico"""
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"Pesos de conv deben ser (out, in, k, k): {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"Bias de longitud {self.bias.shape} para {self.weights.shape[0]} canales de salida"
            )
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"stride={self.stride} / padding={self.padding} inválidos")

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, kernel_size: int,
              stride: int = 1, padding: Optional[int] = None) -> "ConvLayer":
        """Capa con pesos y bias a cero; padding 'same' por defecto"""
        if padding is None:
            padding = kernel_size // 2
        return cls(
            weights=np.zeros((out_channels, in_channels, kernel_size, kernel_size)),
            bias=np.zeros(out_channels),
            stride=stride,
            padding=padding,
        )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def param_count(self) -> int:
        """out·in·k² + out"""
        k = self.kernel_size
        return self.out_channels * self.in_channels * k * k + self.out_channels


def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """floor((size + 2·padding − k) / stride) + 1"""
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: Tensor, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Vista (N, C, Ho, Wo, k, k) de los campos receptivos"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d_raw(x: Tensor, weights: np.ndarray, bias: np.ndarray,
               stride: int = 1, padding: int = 0) -> Tensor:
    """
    Correlación cruzada 2-D con bias (im2col + tensordot)

    Args:
        x: Entrada (N, C, H, W)
        weights: Pesos (out, C, k, k)
        bias: Bias (out,)
        stride: Paso
        padding: Zero padding simétrico

    Returns:
        Tensor (N, out, H', W')
    """
    n, channels, height, width = x.shape
    out_channels, in_channels, kernel, _ = weights.shape
    if channels != in_channels:
        raise ShapeError(f"conv2d: la entrada tiene {channels} canales, la capa espera {in_channels}")

    out_h = output_size(height, kernel, stride, padding)
    out_w = output_size(width, kernel, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: salida espacial no positiva ({out_h}x{out_w}) para entrada {height}x{width}, "
            f"k={kernel}, stride={stride}, padding={padding}"
        )

    if kernel == 1 and stride == 1 and padding == 0:
        out = np.tensordot(x, weights[:, :, 0, 0], axes=([1], [1]))       # N, H, W, out
    else:
        windows = _windows(x, kernel, stride, padding)
        out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, out
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    """Aplica una ConvLayer"""
    return conv2d_raw(x, layer.weights, layer.bias, layer.stride, layer.padding)


def conv2d_backward(grad_out: Tensor, x: Tensor, weights: np.ndarray,
                    stride: int, padding: int) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Gradientes de conv2d respecto a entrada, pesos y bias

    Returns:
        (grad_x, grad_weights, grad_bias)
    """
    n, channels, height, width = x.shape
    kernel = weights.shape[2]
    out_h, out_w = grad_out.shape[2:]

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    windows = _windows(x, kernel, stride, padding)
    grad_weights = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))

    grad_padded = np.zeros((n, channels, height + 2 * padding, width + 2 * padding))
    rows = stride * (out_h - 1) + 1
    cols = stride * (out_w - 1) + 1
    for i in range(kernel):
        for j in range(kernel):
            contrib = np.tensordot(grad_out, weights[:, :, i, j], axes=([1], [0]))  # N, Ho, Wo, C
            grad_padded[:, :, i:i + rows:stride, j:j + cols:stride] += contrib.transpose(0, 3, 1, 2)
    grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
    return np.ascontiguousarray(grad_x), grad_weights, grad_bias


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """max(x, slope·x) elemento a elemento"""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu: slope debe estar en (0, 1), recibido {slope}")
    return np.maximum(x, slope * x)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """1 / (1 + e^-x), estable numéricamente"""
    return expit(x)


def channel_split(x: Tensor, first: int) -> Tuple[Tensor, Tensor]:
    """
    Parte los canales en [0, first) y [first, C)

    Raises:
        ShapeError: si first no está en (0, C)
    """
    channels = x.shape[1]
    if not 0 < first < channels:
        raise ShapeError(f"channel_split: first={first} fuera de (0, {channels})")
    return x[:, :first].copy(), x[:, first:].copy()


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """
    Concatena a lo largo del eje de canales conservando el orden

    Raises:
        ShapeError: sin partes, o N/H/W distintos
    """
    if not parts:
        raise ShapeError("concat_channels: se necesita al menos una parte")
    n, _, height, width = parts[0].shape
    for index, part in enumerate(parts):
        if part.ndim != 4 or (part.shape[0], part.shape[2], part.shape[3]) != (n, height, width):
            raise ShapeError(
                f"concat_channels: la parte {index} tiene forma {part.shape}, "
                f"se esperaba (N={n}, *, H={height}, W={width})"
            )
    return np.concatenate(parts, axis=1)


def pixel_shuffle(x: Tensor, scale: int) -> Tensor:
    """
    (N, C·s², H, W) -> (N, C, s·H, s·W)

    out[n, c, h·s + i, w·s + j] = in[n, c·s² + i·s + j, h, w]
    """
    n, channels, height, width = x.shape
    if scale < 1 or channels % (scale * scale) != 0:
        raise ShapeError(f"pixel_shuffle: {channels} canales no divisibles por s²={scale * scale}")
    out_channels = channels // (scale * scale)
    out = x.reshape(n, out_channels, scale, scale, height, width)
    out = out.transpose(0, 1, 4, 2, 5, 3)
    return out.reshape(n, out_channels, height * scale, width * scale).copy()


def space_to_depth(x: Tensor, scale: int) -> Tensor:
    """Inversa exacta de pixel_shuffle con el mismo mapa de índices"""
    n, channels, height, width = x.shape
    if height % scale or width % scale:
        raise ShapeError(f"space_to_depth: {height}x{width} no divisible por {scale}")
    out = x.reshape(n, channels, height // scale, scale, width // scale, scale)
    out = out.transpose(0, 1, 3, 5, 2, 4)
    return out.reshape(n, channels * scale * scale, height // scale, width // scale).copy()


def _channel_mean(x: Tensor) -> Tensor:
    """Media por canal; exacta en canales constantes"""
    mean = x.mean(axis=(2, 3), keepdims=True)
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    constant = (flat.max(axis=2) == flat.min(axis=2))[:, :, None, None]
    return np.where(constant, x[:, :, :1, :1], mean)


def global_contrast_pool(x: Tensor) -> Tensor:
    """
    Estadístico de contraste por canal: desviación típica poblacional + media

    Returns:
        Tensor (N, C, 1, 1)
    """
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("global_contrast_pool: mapa espacial vacío")
    mean = _channel_mean(x)
    std = np.sqrt(np.mean((x - mean) ** 2, axis=(2, 3), keepdims=True))
    return std + mean


def global_contrast_pool_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    """Gradiente de global_contrast_pool; la rama de la desviación vale 0 si std = 0"""
    area = x.shape[2] * x.shape[3]
    mean = _channel_mean(x)
    centered = x - mean
    std = np.sqrt(np.mean(centered ** 2, axis=(2, 3), keepdims=True))
    safe_std = np.where(std > 0, std, 1.0)
    d_std = np.where(std > 0, centered / (area * safe_std), 0.0)
    return grad_out * (1.0 / area + d_std)


def global_average_pool(x: Tensor) -> Tensor:
    """Media por canal, (N, C, 1, 1)"""
    return _channel_mean(x)


def channel_scale(x: Tensor, gates: Tensor) -> Tensor:
    """
    Multiplica cada canal por su compuerta

    Raises:
        ShapeError: si gates no es (N, C, 1, 1) de x
    """
    expected = (x.shape[0], x.shape[1], 1, 1)
    if gates.shape != expected:
        raise ShapeError(f"channel_scale: compuertas {gates.shape}, se esperaba {expected}")
    return x * gates


def add(x: Tensor, y: Tensor) -> Tensor:
    """Suma elemento a elemento de tensores de igual forma"""
    if x.shape != y.shape:
        raise ShapeError(f"add: formas distintas {x.shape} y {y.shape}")
    return x + y
