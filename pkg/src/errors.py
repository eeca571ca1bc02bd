"""
Errores estructurados del motor IMDN
Cada error lleva un código estable que la CLI usa para decidir el exit code
"""

from typing import Optional


class ImdnError(Exception):
    """Error base del motor"""

    code = "imdn_error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code:
            self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {self.args[0]}"


class ShapeError(ImdnError, ValueError):
    """Formas de tensores incompatibles"""
    code = "shape_mismatch"


class ConfigError(ImdnError, ValueError):
    """Configuración inválida (modelo, entrenamiento o flags)"""
    code = "invalid_config"


class VariantError(ConfigError):
    """Variante de arquitectura desconocida"""
    code = "unknown_variant"


class DivisibilityError(ShapeError):
    """Dimensiones espaciales no divisibles por el factor requerido"""
    code = "not_divisible"


class PaddingError(ConfigError):
    """Padding de ACS que no cumple padding = 4k, k >= 1"""
    code = "invalid_padding"


class TileSizeError(ImdnError, ValueError):
    """El parche de ACS no cabe dentro de la imagen"""
    code = "tile_exceeds_image"


class WeightFileError(ImdnError):
    """Fichero de pesos corrupto, truncado o incompatible"""
    code = "bad_weight_file"


class ScaleMismatchError(ImdnError):
    """La escala de los pesos no coincide con la pedida"""
    code = "scale_mismatch"


class ImageFormatError(ImdnError):
    """PNG con profundidad o tipo de color no soportado, o fallo de E/S"""
    code = "bad_image"


class EmptyDatasetError(ImdnError):
    """No hay imágenes con las que entrenar o evaluar"""
    code = "empty_dataset"


class GraphCycleError(ImdnError):
    """El grafo de autograd contiene un ciclo"""
    code = "graph_cycle"
