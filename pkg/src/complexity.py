"""
Análisis de complejidad: parámetros, MACs por píxel HR y profundidad
Recorre el ModelGraph sin ejecutar la red
"""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Dict, List, Optional, Union

import pandas as pd

from errors import ScaleMismatchError
from imdn_model import LayerSpec, ModelGraph
from models import PublishedExpectation

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["layer", "in", "out", "k", "params", "macs_coeff"]


@dataclass
class CostRow:
    """Una convolución: n_{l-1}, n_l, f_l y su resolución relativa al HR"""
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    hr_divisor: int          # lado HR / lado de la capa
    branch: str
    params: int
    macs: Fraction           # coeficiente de m²


@dataclass
class CostReport:
    variant: str
    scale: int
    rows: List[CostRow] = field(default_factory=list)
    depth: int = 0
    depth_with_attention: int = 0

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def total_macs(self) -> Fraction:
        return sum((row.macs for row in self.rows), Fraction(0))

    @property
    def macs_per_hr_pixel(self) -> float:
        return float(self.total_macs)

    def to_frame(self) -> pd.DataFrame:
        """Filas por capa con las columnas del CSV"""
        return pd.DataFrame(
            [(r.name, r.in_channels, r.out_channels, r.kernel, r.params, float(r.macs)) for r in self.rows],
            columns=CSV_COLUMNS,
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def summary(self) -> str:
        return (f"{round_k(self.total_params)}K, depth {self.depth}, "
                f"{round_k(self.total_macs)}K·m²")

    def to_text(self) -> str:
        """Tabla alineada más totales"""
        frame = self.to_frame()
        frame["macs_coeff"] = frame["macs_coeff"].map(lambda v: f"{v:.2f}")
        lines = [
            f"📊 {self.variant} x{self.scale}",
            frame.to_string(index=False),
            "",
            f"Params: {self.total_params:,} ({round_k(self.total_params)}K, {round_m(self.total_params)}M)",
            f"MACs:   {float(self.total_macs):,.2f}·m² ({round_k(self.total_macs)}K·m²)",
            f"Depth:  {self.depth} (con atención: {self.depth_with_attention})",
        ]
        return "\n".join(lines)


def _to_decimal(value: Union[int, float, Fraction]) -> Decimal:
    if isinstance(value, Fraction):
        return Decimal(value.numerator) / Decimal(value.denominator)
    return Decimal(str(value)) if isinstance(value, float) else Decimal(value)


def round_k(value: Union[int, float, Fraction]) -> int:
    """Redondeo al millar más cercano, mitades lejos de cero"""
    return int((_to_decimal(value) / 1000).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def round_m(value: Union[int, float, Fraction]) -> float:
    """Millones con un decimal, mitades lejos de cero"""
    return float((_to_decimal(value) / 1_000_000).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def layer_params(spec: LayerSpec) -> int:
    """n_{l-1}·n_l·f_l² + n_l"""
    return spec.in_channels * spec.out_channels * spec.kernel * spec.kernel + spec.out_channels


def _magnification(model: ModelGraph, scale: Optional[int]) -> int:
    magnification = model.magnification
    if scale is not None and not model.config.any_size and scale != magnification:
        raise ScaleMismatchError(f"La red es x{magnification}, se pidió x{scale}")
    return magnification


def cost_rows(model: ModelGraph, scale: Optional[int] = None) -> List[CostRow]:
    """
    Filas del informe en orden de construcción

    Las convoluciones de atención se cuentan a la resolución del tronco.
    """
    magnification = _magnification(model, scale)
    rows = []
    for name, spec in model.specs.items():
        divisor = magnification * spec.reduction
        macs = Fraction(spec.in_channels * spec.out_channels * spec.kernel * spec.kernel, divisor * divisor)
        rows.append(CostRow(name, spec.in_channels, spec.out_channels, spec.kernel,
                            divisor, spec.branch, layer_params(spec), macs))
    return rows


def count_params(model: ModelGraph) -> int:
    return sum(layer_params(spec) for spec in model.specs.values())


def count_macs(model: ModelGraph, scale: Optional[int] = None) -> float:
    """
    Coeficiente de m² de Σ n_{l-1}·n_l·f_l²·(m_l/m)², sin bias

    Args:
        model: Red construida
        scale: Escala esperada (debe coincidir con la de la red)
    """
    return float(sum((row.macs for row in cost_rows(model, scale)), Fraction(0)))


def _longest_chain(model: ModelGraph, include_attention: bool) -> int:
    longest: Dict[str, int] = {}
    for name, spec in model.specs.items():
        if spec.branch != "trunk" and not include_attention:
            continue
        preceding = [longest[p] for p in spec.inputs if p in longest]
        longest[name] = 1 + max(preceding, default=0)
    return max(longest.values(), default=0)


def depth(model: ModelGraph) -> int:
    """Convoluciones en la cadena más larga del tronco"""
    return _longest_chain(model, include_attention=False)


def depth_with_attention(model: ModelGraph) -> int:
    return _longest_chain(model, include_attention=True)


def analyze(model: ModelGraph, scale: Optional[int] = None) -> CostReport:
    """CostReport completo de una red"""
    report = CostReport(
        variant=model.config.variant.value,
        scale=model.config.scale,
        rows=cost_rows(model, scale),
        depth=depth(model),
        depth_with_attention=depth_with_attention(model),
    )
    logger.debug(f"{report.variant} x{report.scale}: {report.summary()}")
    return report


def check_expectation(report: CostReport, expected: PublishedExpectation) -> List[str]:
    """
    Compara el informe redondeado con los valores publicados

    Returns:
        Lista de discrepancias (vacía si todo coincide)
    """
    problems = []
    params_k = round_k(report.total_params)
    if params_k != expected.params_k:
        problems.append(f"params {params_k}K != {expected.params_k}K")
    if expected.macs_k is not None and round_k(report.total_macs) != expected.macs_k:
        problems.append(f"MACs {round_k(report.total_macs)}K != {expected.macs_k}K")
    if expected.depth is not None and report.depth != expected.depth:
        problems.append(f"depth {report.depth} != {expected.depth}")
    if expected.params_m is not None and round_m(report.total_params) != expected.params_m:
        problems.append(f"params {round_m(report.total_params)}M != {expected.params_m}M")
    return problems
