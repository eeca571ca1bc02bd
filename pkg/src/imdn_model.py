"""
Arquitecturas IMDN: IMDB (PRM + CCA), red completa, IMDN_AS y ablaciones de 4 bloques
Construcción del grafo, forward diferenciable, inicialización y fichero de pesos
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autograd as ag
from autograd import Node
from errors import DivisibilityError, ShapeError, VariantError, WeightFileError
from models import (
    VARIANT_IDS, AttentionPool, ImdnConfig, PrmVariant, Variant, config_for_variant, parse_variant,
)
from tensor_core import ConvLayer, as_tensor

logger = logging.getLogger(__name__)

WEIGHT_MAGIC = b"IMDNW1"
WEIGHT_VERSION = 1

ABLATION_VARIANTS = (
    Variant.PLAIN_3CONV_B4,
    Variant.BASIC_B4,
    Variant.BASIC_B4_CCA,
    Variant.BASIC_B4_CA,
    Variant.B4,
)


@dataclass(frozen=True)
class LayerSpec:
    """Metadatos estructurales de una convolución (para el analizador)"""
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    reduction: int = 1             # lado de la entrada / lado de salida de la capa
    branch: str = "trunk"          # trunk | attention
    activation: Optional[str] = None
    inputs: Tuple[str, ...] = ()   # convoluciones de las que depende directamente


class ModelGraph:
    """
    Red construida: capas con nombre en orden de ejecución y su topología

    Inmutable durante la inferencia; el entrenamiento sustituye los arrays con
    set_parameters.
    """

    def __init__(self, config: ImdnConfig):
        self.config = config
        self.layers: Dict[str, ConvLayer] = {}
        self.specs: Dict[str, LayerSpec] = {}

    def add_layer(self, name: str, in_channels: int, out_channels: int, kernel: int,
                  inputs: Sequence[str] = (), stride: int = 1, reduction: int = 1,
                  branch: str = "trunk", activation: Optional[str] = None) -> str:
        if name in self.layers:
            raise ShapeError(f"Capa duplicada: {name}")
        self.layers[name] = ConvLayer.zeros(in_channels, out_channels, kernel, stride=stride)
        self.specs[name] = LayerSpec(
            name, in_channels, out_channels, kernel, stride, reduction, branch, activation, tuple(inputs)
        )
        return name

    @property
    def scale(self) -> int:
        return self.config.scale

    @property
    def magnification(self) -> int:
        return self.config.magnification

    def block_prefix(self, index: int) -> str:
        if not 0 <= index < self.config.num_blocks:
            raise ShapeError(f"Bloque {index} fuera de rango (0..{self.config.num_blocks - 1})")
        return f"blocks.{index}"

    def parameter_count(self) -> int:
        """Elementos realmente reservados en pesos y bias"""
        return sum(layer.weights.size + layer.bias.size for layer in self.layers.values())

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, layer in self.layers.items():
            arrays[f"{name}.weight"] = layer.weights
            arrays[f"{name}.bias"] = layer.bias
        return arrays

    def parameter_nodes(self, trainable: bool = True) -> Dict[str, Node]:
        """Un nodo hoja por array (entrenable o constante)"""
        make = ag.parameter if trainable else ag.constant
        return {name: make(value, name) for name, value in self.parameter_arrays().items()}

    def set_parameters(self, values: Dict[str, np.ndarray]) -> None:
        """
        Sustituye pesos y bias por nombre ('<capa>.weight' / '<capa>.bias')

        Raises:
            ShapeError: nombre desconocido o forma distinta
        """
        for key, value in values.items():
            layer_name, _, kind = key.rpartition(".")
            layer = self.layers.get(layer_name)
            if layer is None or kind not in ("weight", "bias"):
                raise ShapeError(f"Parámetro desconocido: {key}")
            current = layer.weights if kind == "weight" else layer.bias
            value = np.asarray(value, dtype=np.float64)
            if value.shape != current.shape:
                raise ShapeError(f"{key}: forma {value.shape}, se esperaba {current.shape}")
            if kind == "weight":
                layer.weights = value
            else:
                layer.bias = value

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"La red espera (N, 3, H, W), recibido {x.shape}")
        if self.config.any_size and (x.shape[2] % 4 or x.shape[3] % 4):
            raise DivisibilityError(
                f"IMDN_AS necesita H y W divisibles por 4, recibido {x.shape[2]}x{x.shape[3]}"
            )

    def forward_nodes(self, x: Node, params: Dict[str, Node]) -> Node:
        self.check_input(x.value)
        return forward_model(self, x, params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inferencia sin grafo: (N, 3, H, W) -> (N, 3, H·m, W·m)"""
        x = as_tensor(x)
        self.check_input(x)
        with ag.no_grad():
            return forward_model(self, ag.constant(x), self.parameter_nodes(trainable=False)).value

    def __repr__(self) -> str:
        return (f"<ModelGraph {self.config.variant.value} x{self.config.scale} "
                f"blocks={self.config.num_blocks} layers={len(self.layers)}>")


# ===== CONSTRUCCIÓN =====

def _add_block(model: ModelGraph, index: int, source: Tuple[str, ...], reduction: int) -> Tuple[str, ...]:
    """Añade las capas de un IMDB; devuelve las dependencias de su salida"""
    c = model.config
    prefix = f"blocks.{index}"

    if c.prm_variant == PrmVariant.PLAIN_3CONV:
        previous = source
        for i in (1, 2, 3):
            name = model.add_layer(f"{prefix}.c{i}", c.channels, c.channels, 3, previous,
                                   reduction=reduction, activation="leaky")
            previous = (name,)
        body = previous
    else:
        c1 = model.add_layer(f"{prefix}.c1", c.channels, c.channels, 3, source,
                             reduction=reduction, activation="leaky")
        c2 = model.add_layer(f"{prefix}.c2", c.coarse, c.channels, 3, (c1,),
                             reduction=reduction, activation="leaky")
        c3 = model.add_layer(f"{prefix}.c3", c.coarse, c.channels, 3, (c2,),
                             reduction=reduction, activation="leaky")
        c4 = model.add_layer(f"{prefix}.c4", c.coarse, c.distilled, 3, (c3,),
                             reduction=reduction, activation="leaky")
        body = (c1, c2, c3, c4)

    if c.use_cca:
        down = model.add_layer(f"{prefix}.cca_down", c.channels, c.cca_squeeze, 1, body,
                               reduction=reduction, branch="attention", activation="relu")
        up = model.add_layer(f"{prefix}.cca_up", c.cca_squeeze, c.channels, 1, (down,),
                             reduction=reduction, branch="attention", activation="sigmoid")
        body = body + (up,)

    if c.prm_variant == PrmVariant.PLAIN_3CONV:
        return body + source

    c5 = model.add_layer(f"{prefix}.c5", c.channels, c.channels, 1, body, reduction=reduction)
    return (c5,) + source


def _add_trunk(model: ModelGraph, head: Tuple[str, ...], reduction: int, up_channels: int) -> None:
    c = model.config
    current = head
    outputs: List[str] = []
    for index in range(c.num_blocks):
        current = _add_block(model, index, current, reduction)
        outputs.extend(current)

    if c.use_iic:
        fused = model.add_layer("fusion_1x1", c.num_blocks * c.channels, c.channels, 1,
                                tuple(dict.fromkeys(outputs)), reduction=reduction, activation="leaky")
        current = (fused,)

    lr_conv = model.add_layer("lr_conv", c.channels, c.channels, 3, current, reduction=reduction)
    model.add_layer("up_conv", c.channels, up_channels, 3, (lr_conv,) + head, reduction=reduction)


def build_imdn(config: ImdnConfig) -> ModelGraph:
    """
    fea_conv -> IMDBs -> (IIC: concat + fusión 1x1) -> lr_conv -> + fea -> up_conv -> pixel shuffle

    Args:
        config: Configuración validada (no IMDN_AS)

    Returns:
        ModelGraph con todos los pesos a cero
    """
    config.validate()
    if config.any_size:
        return build_imdn_as(config)

    model = ModelGraph(config)
    fea = model.add_layer("fea_conv", 3, config.channels, 3)
    _add_trunk(model, (fea,), reduction=1, up_channels=3 * config.scale * config.scale)
    logger.debug(f"Construido {model!r}")
    return model


def build_ablation(variant: Union[Variant, str], scale: int = 4, **overrides) -> ModelGraph:
    """Red de 4 bloques de la tabla de ablación"""
    if isinstance(variant, str):
        variant = parse_variant(variant)
    if variant not in ABLATION_VARIANTS:
        raise VariantError(f"{variant.value} no es una variante de ablación")
    return build_variant(variant, scale=scale, **overrides)


def build_imdn_as(config: Optional[ImdnConfig] = None) -> ModelGraph:
    """
    IMDN con dos convoluciones stride 2 en cabeza y pixel shuffle x4

    La salida tiene el mismo tamaño que la entrada; el salto largo parte de la
    salida de la segunda convolución stride 2.
    """
    if config is None:
        config = config_for_variant(Variant.IMDN_AS)
    if not config.any_size or config.scale != 4:
        config = replace(config, variant=Variant.IMDN_AS, scale=4)
    config.validate()

    model = ModelGraph(config)
    down1 = model.add_layer("down1", 3, config.channels, 3, stride=2, reduction=2, activation="leaky")
    down2 = model.add_layer("down2", config.channels, config.channels, 3, (down1,),
                            stride=2, reduction=4, activation="leaky")
    _add_trunk(model, (down2,), reduction=4, up_channels=3 * 16)
    logger.debug(f"Construido {model!r}")
    return model


def build_model(config: ImdnConfig) -> ModelGraph:
    """Despacha al constructor de la variante"""
    return build_imdn_as(config) if config.any_size else build_imdn(config)


def build_variant(variant: Union[Variant, str], scale: int = 4, **overrides) -> ModelGraph:
    """Construye cualquier variante registrada por nombre o Enum"""
    if isinstance(variant, str):
        variant = parse_variant(variant)
    return build_model(config_for_variant(variant, scale=scale, **overrides))


# ===== FORWARD =====

def _node(x) -> Node:
    return x if isinstance(x, Node) else ag.constant(as_tensor(x))


def _params(model: ModelGraph, params: Optional[Dict[str, Node]]) -> Dict[str, Node]:
    return params if params is not None else model.parameter_nodes(trainable=False)


def _conv(model: ModelGraph, params: Dict[str, Node], name: str, x: Node) -> Node:
    layer = model.layers[name]
    out = ag.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], layer.stride, layer.padding)
    activation = model.specs[name].activation
    if activation == "leaky":
        return ag.leaky_relu(out, model.config.leaky_slope)
    if activation == "relu":
        return ag.relu(out)
    if activation == "sigmoid":
        return ag.sigmoid(out)
    return out


def forward_prm(model: ModelGraph, block: int, f_in, params: Optional[Dict[str, Node]] = None) -> Node:
    """
    Refinamiento progresivo: tres splits distilled/coarse y una última conv

    Returns:
        Concatenación de las cuatro partes refinadas (channels canales)
    """
    c = model.config
    prefix = model.block_prefix(block)
    params = _params(model, params)
    x = _node(f_in)
    if x.shape[1] != c.channels:
        raise ShapeError(f"forward_prm: entrada con {x.shape[1]} canales, se esperaban {c.channels}")

    if c.prm_variant == PrmVariant.PLAIN_3CONV:
        for i in (1, 2, 3):
            x = _conv(model, params, f"{prefix}.c{i}", x)
        return x

    refined = []
    coarse = x
    for i in (1, 2, 3):
        out = _conv(model, params, f"{prefix}.c{i}", coarse)
        distilled, coarse = ag.channel_split(out, c.distilled)
        refined.append(distilled)
    refined.append(_conv(model, params, f"{prefix}.c4", coarse))
    return ag.concat_channels(refined)


def forward_cca(model: ModelGraph, block: int, x, params: Optional[Dict[str, Node]] = None) -> Node:
    """Atención de canal: pool global -> 1x1 down -> ReLU -> 1x1 up -> sigmoide -> escala"""
    prefix = model.block_prefix(block)
    params = _params(model, params)
    x = _node(x)
    if x.shape[1] != model.config.channels:
        raise ShapeError(f"forward_cca: entrada con {x.shape[1]} canales, se esperaban {model.config.channels}")

    if model.config.attention_pool == AttentionPool.AVERAGE:
        pooled = ag.global_average_pool(x)
    else:
        pooled = ag.global_contrast_pool(x)
    gates = _conv(model, params, f"{prefix}.cca_down", pooled)
    gates = _conv(model, params, f"{prefix}.cca_up", gates)
    return ag.channel_scale(x, gates)


def forward_imdb(model: ModelGraph, block: int, f_in, params: Optional[Dict[str, Node]] = None) -> Node:
    """f_in + c5(cca(prm(f_in))); sin c5 en la variante de tres convs planas"""
    params = _params(model, params)
    f_in = _node(f_in)
    out = forward_prm(model, block, f_in, params)
    if model.config.use_cca:
        out = forward_cca(model, block, out, params)
    if model.config.prm_variant != PrmVariant.PLAIN_3CONV:
        out = _conv(model, params, f"{model.block_prefix(block)}.c5", out)
    return ag.add(f_in, out)


def forward_model(model: ModelGraph, x, params: Optional[Dict[str, Node]] = None) -> Node:
    """
    Forward completo de la red

    Args:
        model: Red construida
        x: Tensor (N, 3, H, W) o nodo
        params: Nodos de parámetros; por defecto constantes con los pesos actuales

    Returns:
        Nodo (N, 3, m·H, m·W), con m la magnificación de la red
    """
    c = model.config
    params = _params(model, params)
    x = _node(x)

    if c.any_size:
        head = _conv(model, params, "down2", _conv(model, params, "down1", x))
        shuffle = 4
    else:
        head = _conv(model, params, "fea_conv", x)
        shuffle = c.scale

    current = head
    outputs = []
    for block in range(c.num_blocks):
        current = forward_imdb(model, block, current, params)
        outputs.append(current)

    if c.use_iic:
        current = _conv(model, params, "fusion_1x1", ag.concat_channels(outputs))

    current = ag.add(_conv(model, params, "lr_conv", current), head)
    return ag.pixel_shuffle(_conv(model, params, "up_conv", current), shuffle)


# ===== INICIALIZACIÓN =====

_RELU_GAIN = np.sqrt(2.0)


def init_weights(model: ModelGraph, seed: int = 0) -> ModelGraph:
    """
    Normal escalada por fan-in con ganancia según la activación; bias a cero

    Determinista para una semilla: las capas se recorren en orden de construcción.
    """
    rng = np.random.default_rng(seed)
    slope = model.config.leaky_slope
    for name, layer in model.layers.items():
        activation = model.specs[name].activation
        if activation == "leaky":
            gain = np.sqrt(2.0 / (1.0 + slope * slope))
        elif activation == "relu":
            gain = _RELU_GAIN
        else:
            gain = 1.0
        fan_in = layer.in_channels * layer.kernel_size * layer.kernel_size
        layer.weights = rng.standard_normal(layer.weights.shape) * (gain / np.sqrt(fan_in))
        layer.bias = np.zeros_like(layer.bias)
    return model


# ===== FICHERO DE PESOS =====

_CONFIG_BLOCK = struct.Struct("<7Id")


def save_weights(model: ModelGraph, path: Union[str, Path]) -> Path:
    """
    Escribe el fichero de pesos (little-endian, float64 bit a bit)

    Formato: magic | versión u32 | bloque de config | nº de registros u32 |
    registros (nombre u16 + bytes, rango u8, dims u32·rango, payload f64)
    """
    c = model.config
    path = Path(path)
    chunks = [
        WEIGHT_MAGIC,
        struct.pack("<I", WEIGHT_VERSION),
        _CONFIG_BLOCK.pack(c.scale, c.num_blocks, c.flags, VARIANT_IDS[c.variant],
                           c.channels, c.distilled, c.cca_squeeze, c.leaky_slope),
    ]
    arrays = model.parameter_arrays()
    chunks.append(struct.pack("<I", len(arrays)))
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info(f"Pesos guardados en {path} ({len(arrays)} arrays)")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise WeightFileError(f"Fichero truncado en el byte {self.offset} (faltan {size} bytes)")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: Union[str, struct.Struct]):
        packer = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return packer.unpack(self.take(packer.size))


def _config_from_header(scale, num_blocks, flags, variant_id, channels, distilled, squeeze, slope) -> ImdnConfig:
    variants = {value: key for key, value in VARIANT_IDS.items()}
    variant = variants.get(variant_id)
    if variant is None:
        raise WeightFileError(f"Identificador de variante desconocido: {variant_id}")
    return ImdnConfig(
        num_blocks=num_blocks,
        channels=channels,
        distilled=distilled,
        coarse=channels - distilled,
        cca_squeeze=squeeze,
        leaky_slope=slope,
        scale=scale,
        use_cca=bool(flags & 1),
        use_iic=bool(flags & 2),
        prm_variant=PrmVariant.PLAIN_3CONV if flags & 4 else PrmVariant.PRM,
        attention_pool=AttentionPool.AVERAGE if flags & 8 else AttentionPool.CONTRAST,
        variant=variant,
    )


def load_weights(path: Union[str, Path]) -> ModelGraph:
    """
    Reconstruye la red descrita en la cabecera y carga sus arrays

    Raises:
        WeightFileError: magic/versión incorrectos, truncado, nombres o formas que no casan
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise WeightFileError(f"No se pudo leer {path}: {e}")

    reader = _Reader(data)
    if reader.take(len(WEIGHT_MAGIC)) != WEIGHT_MAGIC:
        raise WeightFileError(f"{path} no es un fichero de pesos IMDN (magic incorrecto)")
    (version,) = reader.unpack("<I")
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"Versión de formato {version} no soportada")

    try:
        config = _config_from_header(*reader.unpack(_CONFIG_BLOCK)).validate()
    except (ValueError, KeyError) as e:
        raise WeightFileError(f"Cabecera de configuración inválida: {e}")

    # cada bloque y lr_conv llevan al menos una 3x3 channels -> channels
    minimum_bytes = 8 * 9 * config.channels * config.channels * (config.num_blocks + 1)
    if minimum_bytes > len(data) - reader.offset:
        raise WeightFileError(
            f"La cabecera describe una red de al menos {minimum_bytes} bytes de pesos "
            f"y el fichero solo tiene {len(data) - reader.offset}"
        )
    try:
        model = build_model(config)
    except MemoryError as e:
        raise WeightFileError(f"No se puede reservar la red de la cabecera: {e}")
    expected = model.parameter_arrays()

    (count,) = reader.unpack("<I")
    loaded: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8", errors="replace")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        payload = reader.take(8 * size)
        if name not in expected:
            raise WeightFileError(f"Array inesperado en el fichero: {name}")
        if tuple(dims) != expected[name].shape:
            raise WeightFileError(f"{name}: forma {tuple(dims)}, la red espera {expected[name].shape}")
        loaded[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)

    missing = set(expected) - set(loaded)
    if missing:
        raise WeightFileError(f"Faltan arrays en el fichero: {sorted(missing)[:5]}")
    if reader.offset != len(data):
        raise WeightFileError(f"{len(data) - reader.offset} bytes sobrantes al final del fichero")

    model.set_parameters(loaded)
    logger.info(f"Pesos cargados de {path}: {model!r}")
    return model
