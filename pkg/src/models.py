"""
Configuración de arquitecturas IMDN, entrenamiento y evaluación
Registro de variantes (IMDN, IMDN_AS y ablaciones) y valores publicados
"""

from enum import Enum
from dataclasses import dataclass, asdict, replace
from typing import Dict, Optional, Tuple

from errors import ConfigError, VariantError


class Variant(Enum):
    """Variantes de red disponibles"""
    IMDN = "imdn"
    IMDN_AS = "imdn-as"

    # Ablaciones de 4 bloques
    PLAIN_3CONV_B4 = "plain-3conv-B4"
    BASIC_B4 = "basic-B4"
    BASIC_B4_CCA = "basic-B4+CCA"
    BASIC_B4_CA = "basic-B4+CA"
    B4 = "B4"


class PrmVariant(Enum):
    """Cuerpo del bloque: PRM con splits o tres convoluciones planas"""
    PRM = "prm"
    PLAIN_3CONV = "plain-3conv"


class AttentionPool(Enum):
    """Estadístico global que alimenta la atención de canal"""
    CONTRAST = "contrast"   # desviación típica + media
    AVERAGE = "average"     # media (atención de canal clásica)


# Identificadores estables para el fichero de pesos
VARIANT_IDS: Dict[Variant, int] = {
    Variant.IMDN: 0,
    Variant.IMDN_AS: 1,
    Variant.PLAIN_3CONV_B4: 2,
    Variant.BASIC_B4: 3,
    Variant.BASIC_B4_CCA: 4,
    Variant.BASIC_B4_CA: 5,
    Variant.B4: 6,
}


@dataclass
class ImdnConfig:
    """Hiperparámetros estructurales de una red IMDN"""
    num_blocks: int = 6
    channels: int = 64
    distilled: int = 16
    coarse: int = 48
    cca_squeeze: int = 4
    leaky_slope: float = 0.05
    scale: int = 4
    use_cca: bool = True
    use_iic: bool = True
    prm_variant: PrmVariant = PrmVariant.PRM
    attention_pool: AttentionPool = AttentionPool.CONTRAST
    variant: Variant = Variant.IMDN

    @property
    def any_size(self) -> bool:
        """True para IMDN_AS (entrada y salida del mismo tamaño)"""
        return self.variant == Variant.IMDN_AS

    @property
    def magnification(self) -> int:
        """Relación entre el lado de salida y el de entrada"""
        return 1 if self.any_size else self.scale

    def validate(self) -> "ImdnConfig":
        """
        Comprueba las invariantes de la configuración

        Returns:
            La propia configuración, para encadenar

        Raises:
            ConfigError: si alguna invariante no se cumple
        """
        if self.channels <= 0 or self.distilled <= 0 or self.coarse <= 0:
            raise ConfigError("channels, distilled y coarse deben ser positivos")
        if self.distilled + self.coarse != self.channels:
            raise ConfigError(
                f"distilled + coarse debe ser channels "
                f"({self.distilled} + {self.coarse} != {self.channels})"
            )
        if self.use_cca and not 0 < self.cca_squeeze <= self.channels:
            raise ConfigError(f"cca_squeeze fuera de rango: {self.cca_squeeze}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope debe estar en (0, 1): {self.leaky_slope}")
        if self.scale < 1:
            raise ConfigError(f"scale debe ser >= 1: {self.scale}")
        if self.num_blocks < 0:
            raise ConfigError(f"num_blocks no puede ser negativo: {self.num_blocks}")
        if self.use_iic and self.num_blocks == 0:
            raise ConfigError("IIC necesita al menos un bloque que concatenar")
        return self

    @property
    def flags(self) -> int:
        """Flags empaquetados para la cabecera del fichero de pesos"""
        value = 0
        if self.use_cca:
            value |= 1
        if self.use_iic:
            value |= 2
        if self.prm_variant == PrmVariant.PLAIN_3CONV:
            value |= 4
        if self.attention_pool == AttentionPool.AVERAGE:
            value |= 8
        return value


@dataclass
class VariantConfig:
    """Plantilla de cada variante registrada"""
    name: str
    description: str
    num_blocks: int
    use_cca: bool
    use_iic: bool
    prm_variant: PrmVariant = PrmVariant.PRM
    attention_pool: AttentionPool = AttentionPool.CONTRAST


VARIANT_CONFIGS: Dict[Variant, VariantConfig] = {
    Variant.IMDN: VariantConfig(
        name="IMDN",
        description="6 IMDB con CCA, IIC y upsampler sub-pixel",
        num_blocks=6, use_cca=True, use_iic=True,
    ),
    Variant.IMDN_AS: VariantConfig(
        name="IMDN_AS",
        description="IMDN con dos convoluciones stride 2; salida del tamaño de la entrada",
        num_blocks=6, use_cca=True, use_iic=True,
    ),
    Variant.PLAIN_3CONV_B4: VariantConfig(
        name="IMDN_plain-3conv_B4",
        description="PRM sustituido por tres 3x3 de 64 canales, sin la 1x1 final",
        num_blocks=4, use_cca=False, use_iic=False,
        prm_variant=PrmVariant.PLAIN_3CONV,
    ),
    Variant.BASIC_B4: VariantConfig(
        name="IMDN_basic_B4",
        description="4 IMDB encadenados sin CCA ni IIC",
        num_blocks=4, use_cca=False, use_iic=False,
    ),
    Variant.BASIC_B4_CCA: VariantConfig(
        name="IMDN_basic_B4 + CCA",
        description="basic_B4 con atención de canal por contraste",
        num_blocks=4, use_cca=True, use_iic=False,
    ),
    Variant.BASIC_B4_CA: VariantConfig(
        name="IMDN_basic_B4 + CA",
        description="basic_B4 con atención de canal por media global",
        num_blocks=4, use_cca=True, use_iic=False,
        attention_pool=AttentionPool.AVERAGE,
    ),
    Variant.B4: VariantConfig(
        name="IMDN_B4",
        description="4 IMDB con CCA e IIC",
        num_blocks=4, use_cca=True, use_iic=True,
    ),
}


def parse_variant(value: str) -> Variant:
    """
    Convierte un nombre (CLI o fichero) en Variant

    Raises:
        VariantError: si el nombre no corresponde a ninguna variante
    """
    for variant in Variant:
        if variant.value.lower() == value.lower():
            return variant
    known = ", ".join(v.value for v in Variant)
    raise VariantError(f"Variante desconocida '{value}'. Disponibles: {known}")


def config_for_variant(variant: Variant, scale: int = 4, **overrides) -> ImdnConfig:
    """
    Construye la ImdnConfig de una variante registrada

    Args:
        variant: Variante del registro
        scale: Factor de escala s
        **overrides: Campos de ImdnConfig a sustituir (p.ej. channels para modelos de juguete)

    Returns:
        Configuración validada
    """
    template = VARIANT_CONFIGS.get(variant)
    if template is None:
        raise VariantError(f"Variante sin plantilla: {variant}")

    config = ImdnConfig(
        num_blocks=template.num_blocks,
        use_cca=template.use_cca,
        use_iic=template.use_iic,
        prm_variant=template.prm_variant,
        attention_pool=template.attention_pool,
        scale=4 if variant == Variant.IMDN_AS else scale,
        variant=variant,
    )
    if overrides:
        config = replace(config, **overrides)
    return config.validate()


@dataclass
class TrainConfig:
    """Protocolo de entrenamiento (ADAM + L1 con LR por escalones)"""
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    halve_every: int = 200_000
    batch_size: int = 16
    hr_patch: int = 192
    scale: int = 2
    flip: bool = True
    rotate: bool = True
    seed: int = 0

    def validate(self) -> "TrainConfig":
        """Comprueba positividad y divisibilidad del parche"""
        positives = {
            'learning_rate': self.learning_rate,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'epsilon': self.epsilon,
            'halve_every': self.halve_every,
            'batch_size': self.batch_size,
            'hr_patch': self.hr_patch,
            'scale': self.scale,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ConfigError(f"{name} debe ser positivo: {value}")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ConfigError("beta1 y beta2 deben ser < 1")
        if self.hr_patch % self.scale != 0:
            raise ConfigError(
                f"hr_patch ({self.hr_patch}) debe ser divisible por scale ({self.scale})"
            )
        return self


@dataclass
class EvalConfig:
    """Parámetros de evaluación PSNR/SSIM sobre Y"""
    scale: int = 4
    shave: Optional[int] = None
    method: str = "model"   # model, bicubic, identity

    @property
    def border(self) -> int:
        """Borde recortado; por defecto tantos píxeles como la escala"""
        return self.scale if self.shave is None else self.shave


@dataclass(frozen=True)
class PublishedExpectation:
    """Valores publicados, redondeados a K"""
    params_k: int
    macs_k: Optional[int] = None
    depth: Optional[int] = None
    params_m: Optional[float] = None


PUBLISHED_EXPECTATIONS: Dict[Tuple[Variant, int], PublishedExpectation] = {
    (Variant.IMDN, 2): PublishedExpectation(params_k=694, macs_k=173, depth=34, params_m=0.7),
    (Variant.IMDN, 3): PublishedExpectation(params_k=703, macs_k=78, depth=34, params_m=0.7),
    (Variant.IMDN, 4): PublishedExpectation(params_k=715, macs_k=45, depth=34, params_m=0.7),
    (Variant.PLAIN_3CONV_B4, 4): PublishedExpectation(params_k=510),
    (Variant.BASIC_B4, 4): PublishedExpectation(params_k=480),
    (Variant.BASIC_B4_CCA, 4): PublishedExpectation(params_k=482),
    (Variant.B4, 4): PublishedExpectation(params_k=499),
}


def _plain(value):
    """Convierte Enums anidados a su valor para JSON"""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def export_configs_to_json(**configs) -> Dict:
    """
    Exporta configuraciones a un dict serializable (para el manifest)

    Args:
        **configs: dataclasses de configuración por nombre (model=..., train=...)

    Returns:
        Diccionario listo para json.dump
    """
    exported = {}
    for name, config in configs.items():
        if config is None:
            continue
        exported[name] = _plain(asdict(config))
    return exported
