"""
Diferenciación automática en modo inverso sobre las primitivas de tensor_core
Pérdida L1, optimizador ADAM, calendario de learning rate y bucle de entrenamiento
"""

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor_core as tc
from errors import ConfigError, EmptyDatasetError, GraphCycleError, ShapeError
from models import TrainConfig

logger = logging.getLogger(__name__)

# Estado por hilo: las pasadas de inferencia concurrentes no se pisan el flag
_state = threading.local()

# Hook de verificación: ops cuya regla backward se corrompe a propósito
_BROKEN_OPS: set = set()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Desactiva la construcción del grafo en este hilo"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def kink_monitor() -> Iterator[List[np.ndarray]]:
    """Registra el patrón de signos en cada punto no derivable (leaky ReLU, ReLU, L1)"""
    previous = getattr(_state, "kinks", None)
    patterns: List[np.ndarray] = []
    _state.kinks = patterns
    try:
        yield patterns
    finally:
        _state.kinks = previous


@contextmanager
def broken_backward(op: str) -> Iterator[None]:
    """Corrompe la regla backward de una op (control negativo de check-grad)"""
    _BROKEN_OPS.add(op)
    try:
        yield
    finally:
        _BROKEN_OPS.discard(op)


def _record_kink(values: np.ndarray) -> None:
    patterns = getattr(_state, "kinks", None)
    if patterns is not None:
        patterns.append(np.sign(values).astype(np.int8))


class Node:
    """Valor del grafo con sus padres y la regla que reparte el gradiente"""

    __slots__ = ("value", "parents", "backward_rule", "requires_grad", "grad", "name", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_rule: Callable = None,
                 requires_grad: bool = False, name: Optional[str] = None, op: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        # Acumulador sólo en hojas; los intermedios se liberan tras backward
        self.grad = np.zeros_like(self.value) if requires_grad and not self.parents else None

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op or "node"
        return f"<Node {label} shape={self.value.shape} requires_grad={self.requires_grad}>"


def parameter(value, name: Optional[str] = None) -> Node:
    """Hoja entrenable con acumulador de gradiente"""
    return Node(value, requires_grad=True, name=name)


def constant(value, name: Optional[str] = None) -> Node:
    """Hoja sin gradiente"""
    return Node(value, requires_grad=False, name=name)


def _as_node(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


def _make(value, parents: Sequence[Node], rule: Callable, op: str) -> Node:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True, op=op)
    return Node(value, op=op)


# ===== OPERACIONES DIFERENCIABLES =====

def conv2d(x: Node, weight: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    value = tc.conv2d_raw(x.value, weight.value, bias.value, stride, padding)

    def rule(grad):
        grad_x, grad_w, grad_b = tc.conv2d_backward(grad, x.value, weight.value, stride, padding)
        if "conv2d" in _BROKEN_OPS:
            grad_w = grad_w * 1.5
        return grad_x, grad_w, grad_b

    return _make(value, (x, weight, bias), rule, "conv2d")


def leaky_relu(x: Node, slope: float) -> Node:
    value = tc.leaky_relu(x.value, slope)
    _record_kink(x.value)

    def rule(grad):
        return (grad * np.where(x.value >= 0, 1.0, slope),)

    return _make(value, (x,), rule, "leaky_relu")


def relu(x: Node) -> Node:
    value = tc.relu(x.value)
    _record_kink(x.value)

    def rule(grad):
        return (grad * (x.value > 0),)

    return _make(value, (x,), rule, "relu")


def sigmoid(x: Node) -> Node:
    value = tc.sigmoid(x.value)

    def rule(grad):
        return (grad * value * (1.0 - value),)

    return _make(value, (x,), rule, "sigmoid")


def channel_slice(x: Node, start: int, stop: int) -> Node:
    value = x.value[:, start:stop].copy()

    def rule(grad):
        full = np.zeros_like(x.value)
        full[:, start:stop] = grad
        return (full,)

    return _make(value, (x,), rule, "channel_slice")


def channel_split(x: Node, first: int) -> Tuple[Node, Node]:
    """Split diferenciable: ([0, first), [first, C))"""
    channels = x.shape[1]
    if not 0 < first < channels:
        raise ShapeError(f"channel_split: first={first} fuera de (0, {channels})")
    return channel_slice(x, 0, first), channel_slice(x, first, channels)


def concat_channels(parts: Sequence[Node]) -> Node:
    value = tc.concat_channels([p.value for p in parts])
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(grad):
        return tuple(grad[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(value, tuple(parts), rule, "concat")


def pixel_shuffle(x: Node, scale: int) -> Node:
    value = tc.pixel_shuffle(x.value, scale)

    def rule(grad):
        return (tc.space_to_depth(grad, scale),)

    return _make(value, (x,), rule, "pixel_shuffle")


def global_contrast_pool(x: Node) -> Node:
    value = tc.global_contrast_pool(x.value)

    def rule(grad):
        return (tc.global_contrast_pool_backward(grad, x.value),)

    return _make(value, (x,), rule, "contrast_pool")


def global_average_pool(x: Node) -> Node:
    value = tc.global_average_pool(x.value)
    area = x.shape[2] * x.shape[3]

    def rule(grad):
        return (np.broadcast_to(grad / area, x.shape).copy(),)

    return _make(value, (x,), rule, "average_pool")


def channel_scale(x: Node, gates: Node) -> Node:
    value = tc.channel_scale(x.value, gates.value)

    def rule(grad):
        return grad * gates.value, (grad * x.value).sum(axis=(2, 3), keepdims=True)

    return _make(value, (x, gates), rule, "channel_scale")


def add(x: Node, y: Node) -> Node:
    value = tc.add(x.value, y.value)

    def rule(grad):
        return grad, grad

    return _make(value, (x, y), rule, "add")


def sum_all(x: Node) -> Node:
    value = np.array(x.value.sum())

    def rule(grad):
        return (np.full(x.shape, grad.item()),)

    return _make(value, (x,), rule, "sum")


def weighted_sum(x: Node, weights: np.ndarray) -> Node:
    """Σ x·w con w constante; pérdida suave para verificar gradientes"""
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: pesos {weights.shape} para valor {x.shape}")
    value = np.array(np.sum(x.value * weights))

    def rule(grad):
        return (grad.item() * weights,)

    return _make(value, (x,), rule, "weighted_sum")


def l1_loss(pred, target) -> Node:
    """
    Media de |pred − target| sobre todos los elementos

    El subgradiente en 0 es 0.

    Raises:
        ShapeError: si las formas no coinciden
    """
    pred, target = _as_node(pred), _as_node(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: formas distintas {pred.shape} y {target.shape}")
    diff = pred.value - target.value
    numel = diff.size
    value = np.array(np.abs(diff).mean())
    _record_kink(diff)

    def rule(grad):
        local = grad.item() * np.sign(diff) / numel
        return local, -local

    return _make(value, (pred, target), rule, "l1_loss")


# ===== BACKWARD =====

def _topological_order(root: Node) -> List[Node]:
    """Post-orden iterativo; detecta ciclos por nodos en curso"""
    order: List[Node] = []
    state: Dict[int, int] = {}   # 1 = en curso, 2 = terminado
    stack: List[Tuple[Node, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        status = state.get(key)
        if status == 2:
            continue
        if status == 1:
            raise GraphCycleError(f"Ciclo detectado en el grafo en {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node.parents:
            if state.get(id(parent)) != 2:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> Dict[str, np.ndarray]:
    """
    Propaga ∂loss/∂· hasta las hojas y acumula en sus .grad

    Args:
        loss: Nodo escalar

    Returns:
        Mapa nombre de hoja -> acumulador de gradiente

    Raises:
        ShapeError: si la pérdida no es escalar
        GraphCycleError: si el grafo tiene ciclos
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward necesita una pérdida escalar, forma {loss.shape}")

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    gradients: Dict[str, np.ndarray] = {}

    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad += grad
                if node.name:
                    gradients[node.name] = node.grad
            continue

        for parent, parent_grad in zip(node.parents, node.backward_rule(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    return gradients


def zero_grad(nodes: Dict[str, Node]) -> None:
    for node in nodes.values():
        node.zero_grad()


# ===== OPTIMIZACIÓN =====

def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """initial_lr · 2^(−floor(iteration / halve_every))"""
    if iteration < 0:
        raise ConfigError(f"lr_schedule: iteración negativa {iteration}")
    return config.learning_rate * 2.0 ** -(iteration // config.halve_every)


@dataclass
class AdamState:
    """Momentos de ADAM por nombre de parámetro"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              config: TrainConfig, iteration: int) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Un paso de ADAM con corrección de sesgo

    Args:
        params: Valores actuales por nombre
        grads: Gradientes por nombre (los ausentes no se actualizan)
        state: Momentos acumulados
        config: beta1, beta2, epsilon y calendario de LR
        iteration: Iteración (>= 1); fija el LR y la corrección de sesgo

    Returns:
        (nuevos valores, estado actualizado)
    """
    if iteration < 1:
        raise ConfigError(f"adam_step: la iteración empieza en 1, recibido {iteration}")

    lr = lr_schedule(iteration, config)
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    correction1 = 1.0 - b1 ** iteration
    correction2 = 1.0 - b2 ** iteration

    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        if grad.shape != value.shape:
            raise ShapeError(f"adam_step: gradiente {grad.shape} para parámetro {name} {value.shape}")

        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * grad
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * grad * grad
        state.m[name], state.v[name] = m, v

        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)

    state.step = iteration
    return updated, state


# ===== ENTRENAMIENTO =====

@dataclass
class LossRecord:
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    """Modelo entrenado e historial de pérdidas"""
    model: object
    history: List[LossRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Historial como DataFrame con columnas step, lr, loss"""
        return pd.DataFrame(
            [(r.step, r.lr, r.loss) for r in self.history],
            columns=["step", "lr", "loss"],
        )


def train_loop(model, dataset, config: TrainConfig, steps: int,
               seed: Optional[int] = None, progress: bool = True) -> TrainResult:
    """
    Bucle muestreo -> forward -> L1 -> backward -> ADAM

    El lote siguiente se prepara en un hilo mientras se calcula el actual; el
    generador aleatorio sólo lo usa ese hilo, así que el resultado es determinista.

    Args:
        model: ModelGraph (parameter_nodes, forward_nodes, set_parameters)
        dataset: Objeto con __len__ y sample_batch(batch_size, rng)
        config: Protocolo de entrenamiento
        steps: Iteraciones a ejecutar
        seed: Semilla; por defecto config.seed
        progress: Mostrar barra tqdm

    Returns:
        TrainResult con el modelo y una fila por paso
    """
    config.validate()
    if len(dataset) == 0:
        raise EmptyDatasetError("train_loop: el dataset no tiene imágenes")

    result = TrainResult(model=model)
    if steps <= 0:
        return result

    rng = np.random.default_rng(config.seed if seed is None else seed)
    state = AdamState()
    logger.info(f"Entrenando {steps} pasos, batch {config.batch_size}, parche HR {config.hr_patch}")

    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(dataset.sample_batch, config.batch_size, rng)
        for step in tqdm(range(1, steps + 1), desc="train", unit="step", disable=not progress):
            lr_batch, hr_batch = pending.result()
            if step < steps:
                pending = pool.submit(dataset.sample_batch, config.batch_size, rng)

            params = model.parameter_nodes()
            prediction = model.forward_nodes(constant(lr_batch), params)
            loss = l1_loss(prediction, hr_batch)
            backward(loss)

            values = {name: node.value for name, node in params.items()}
            grads = {name: node.grad for name, node in params.items()}
            updated, state = adam_step(values, grads, state, config, step)
            model.set_parameters(updated)

            result.history.append(LossRecord(step, lr_schedule(step, config), loss.item()))
            if step == 1 or step % 100 == 0:
                logger.debug(f"step {step}: loss {loss.item():.6f}")

    return result


# ===== VERIFICACIÓN DE GRADIENTES =====

@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    probes: int
    skipped: int


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _probe(fn: Callable, inputs: Dict[str, np.ndarray], name: str,
           index: Tuple[int, ...], delta: float) -> Tuple[float, List[np.ndarray]]:
    values = dict(inputs)
    values[name] = inputs[name].copy()
    values[name][index] += delta
    with no_grad(), kink_monitor() as patterns:
        out = fn({key: constant(value, key) for key, value in values.items()})
    return out.item(), patterns


def _same_pattern(first: List[np.ndarray], second: List[np.ndarray]) -> bool:
    return len(first) == len(second) and all(np.array_equal(a, b) for a, b in zip(first, second))


def gradient_check(fn: Callable[[Dict[str, Node]], Node], inputs: Dict[str, np.ndarray],
                   probes: int = 5, step: float = 1e-5,
                   rng: Optional[np.random.Generator] = None) -> List[GradCheckResult]:
    """
    Compara el gradiente analítico con diferencias centrales

    Las sondas cuyo ±step cambia algún patrón de signos en un punto no derivable
    se descartan y se sortea otra posición.

    Args:
        fn: Función de nodos con nombre -> nodo escalar (determinista)
        inputs: Valores de cada tensor a comprobar
        probes: Sondas válidas por tensor
        step: Paso de la diferencia central
        rng: Generador para elegir posiciones

    Returns:
        Un GradCheckResult por tensor
    """
    rng = rng or np.random.default_rng(0)
    nodes = {name: parameter(value.copy(), name) for name, value in inputs.items()}
    backward(fn(nodes))
    analytic = {name: node.grad.copy() for name, node in nodes.items()}

    results = []
    for name, base in inputs.items():
        errors: List[float] = []
        skipped = 0
        attempts = 0
        while len(errors) < probes and attempts < probes * 20:
            attempts += 1
            index = tuple(int(rng.integers(dim)) for dim in base.shape)
            plus, plus_pattern = _probe(fn, inputs, name, index, step)
            minus, minus_pattern = _probe(fn, inputs, name, index, -step)
            if not _same_pattern(plus_pattern, minus_pattern):
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * step)
            errors.append(relative_error(float(analytic[name][index]), numeric))

        worst = max(errors) if errors else math.inf
        results.append(GradCheckResult(name, worst, len(errors), skipped))
        logger.debug(f"gradcheck {name}: max rel {worst:.3e} ({len(errors)} sondas, {skipped} descartadas)")
    return results
