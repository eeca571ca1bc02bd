"""
IMDN Engine - Core
Sesión que orquesta entrenamiento, inferencia, evaluación, análisis y verificación
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

import autograd as ag
from acs_tiler import DEFAULT_PADDING, TiledOutput, super_resolve_any_scale, super_resolve_tensor
from complexity import CostReport, analyze, check_expectation
from errors import ConfigError, ScaleMismatchError
from imaging import (
    EvalReport, ImageBuffer, PatchDataset, bicubic_resize, evaluate_pairs, list_pngs,
    load_png, save_png, synthesize_lr,
)
from imdn_model import ModelGraph, build_model, build_variant, init_weights, load_weights, save_weights
from models import (
    PUBLISHED_EXPECTATIONS, EvalConfig, ImdnConfig, TrainConfig, Variant, config_for_variant,
    export_configs_to_json,
)
from settings_manager import SettingsManager, get_settings_manager

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4


@dataclass
class RunManifest:
    """Registro de una ejecución, escrito junto a sus salidas"""
    run_id: str
    command: str
    seed: Optional[int]
    started: str
    finished: Optional[str] = None
    config: Dict[str, Any] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    results: Dict[str, Any] = field(default_factory=dict)

    def write(self, directory: Union[str, Path], name: str = "manifest.json") -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.__dict__, f, indent=2, ensure_ascii=False, default=str)
        return path


class ImdnEngine:
    """
    Motor IMDN
    Gestiona configuración, ejecuciones y sus manifiestos
    """

    def __init__(self, settings: Optional[SettingsManager] = None, verbose: bool = True):
        """
        Inicializa el motor

        Args:
            settings: Gestor de ajustes (por defecto el singleton)
            verbose: Mostrar mensajes de progreso por stdout
        """
        self.settings = settings or get_settings_manager()
        self.workers = max(1, self.settings.get_int("IMDN_WORKERS"))
        self.output_root = Path(self.settings.get_setting("IMDN_OUTPUT_DIR"))
        self.default_seed = self.settings.get_int("IMDN_SEED")
        self.verbose = verbose
        self.session_id = self._generate_session_id()
        self.history: List[RunManifest] = []

    def _generate_session_id(self) -> str:
        """Genera ID único de sesión"""
        timestamp = str(datetime.now())
        return hashlib.md5(timestamp.encode()).hexdigest()[:8]

    def _say(self, message: str) -> None:
        if self.verbose:
            print(message)

    def _start(self, command: str, seed: Optional[int], **configs) -> RunManifest:
        manifest = RunManifest(
            run_id=self.session_id,
            command=command,
            seed=seed,
            started=datetime.now().isoformat(),
            config=export_configs_to_json(**configs),
            settings=self.settings.snapshot(),
        )
        logger.info(f"[{manifest.run_id}] {command} iniciado")
        return manifest

    def _finish(self, manifest: RunManifest, directory: Path, name: str = "manifest.json") -> Path:
        manifest.finished = datetime.now().isoformat()
        path = manifest.write(directory, name)
        self.history.append(manifest)
        logger.info(f"[{manifest.run_id}] {manifest.command} terminado, manifest en {path}")
        return path

    def run_directory(self, command: str, out_dir: Optional[Union[str, Path]] = None) -> Path:
        """Directorio de salida: el indicado o <IMDN_OUTPUT_DIR>/<comando>-<sesión>"""
        directory = Path(out_dir) if out_dir else self.output_root / f"{command}-{self.session_id}"
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    # ===== ENTRENAMIENTO =====

    def train(self, hr_dir: Union[str, Path], model_config: ImdnConfig, train_config: TrainConfig,
              steps: int, out_dir: Optional[Union[str, Path]] = None,
              progress: bool = True) -> Tuple[ModelGraph, RunManifest]:
        """
        Entrena una red sobre un directorio de PNG HR

        Escribe weights.imdnw, loss.csv y manifest.json en el directorio de la ejecución.
        """
        train_config.validate()
        if model_config.any_size and train_config.hr_patch % 4:
            raise ConfigError(f"IMDN_AS necesita un parche divisible por 4: {train_config.hr_patch}")

        directory = self.run_directory("train", out_dir)
        manifest = self._start("train", train_config.seed, model=model_config, train=train_config)
        manifest.config["steps"] = steps
        manifest.config["hr_dir"] = str(hr_dir)

        self._say(f"⏳ Cargando imágenes de {hr_dir}...")
        dataset = PatchDataset.from_directory(
            hr_dir,
            scale=train_config.scale,
            hr_patch=train_config.hr_patch,
            flip=train_config.flip,
            rotate=train_config.rotate,
            any_size=model_config.any_size,
        )

        model = init_weights(build_model(model_config), seed=train_config.seed)
        self._say(f"🧠 {model!r}: {model.parameter_count():,} parámetros")

        result = ag.train_loop(model, dataset, train_config, steps, progress=progress)

        weights_path = save_weights(model, directory / "weights.imdnw")
        loss_path = directory / "loss.csv"
        result.to_frame().to_csv(loss_path, index=False)
        manifest.outputs.update({"weights": str(weights_path), "loss": str(loss_path)})
        if result.history:
            manifest.results = {
                "initial_loss": result.history[0].loss,
                "final_loss": result.history[-1].loss,
            }
            self._say(f"📊 Pérdida L1: {result.history[0].loss:.6f} -> {result.history[-1].loss:.6f}")
        self._finish(manifest, directory)
        self._say(f"✅ Pesos guardados en {weights_path}")
        return model, manifest

    # ===== INFERENCIA =====

    def super_resolve(self, weights: Union[str, Path], input_png: Union[str, Path],
                      output_png: Union[str, Path], scale: Optional[int] = None) -> ImageBuffer:
        """Amplía un PNG con una red IMDN de escala fija"""
        model = load_weights(weights)
        if model.config.any_size:
            raise ConfigError("Los pesos son de IMDN_AS; usa sr-any")
        if scale is not None and scale != model.config.scale:
            raise ScaleMismatchError(f"Los pesos son x{model.config.scale}, se pidió x{scale}")

        output_png = Path(output_png)
        manifest = self._start("sr", None, model=model.config)
        image = load_png(input_png)
        result = ImageBuffer.from_tensor(model.forward(image.to_tensor()))
        save_png(result, output_png)

        manifest.outputs["image"] = str(output_png)
        self._finish(manifest, output_png.parent, f"{output_png.stem}.manifest.json")
        self._say(f"✅ {image.height}x{image.width} -> {result.height}x{result.width}: {output_png}")
        return result

    def super_resolve_any(self, weights: Union[str, Path], input_png: Union[str, Path],
                          output_png: Union[str, Path], padding: int = DEFAULT_PADDING,
                          factor: float = 1.0) -> Tuple[ImageBuffer, TiledOutput]:
        """IMDN_AS + recorte adaptativo sobre una imagen de cualquier tamaño"""
        model = load_weights(weights)
        if not model.config.any_size:
            raise ConfigError("sr-any necesita pesos IMDN_AS")

        output_png = Path(output_png)
        manifest = self._start("sr-any", None, model=model.config)
        manifest.config.update({"padding": padding, "upscale": factor})
        image = load_png(input_png)
        result, tiled = super_resolve_any_scale(image, model, factor, padding, self.workers)
        save_png(result, output_png)

        manifest.outputs["image"] = str(output_png)
        manifest.results = {"tiles": len(tiled.tiles), "seam_discontinuity": tiled.seam}
        self._finish(manifest, output_png.parent, f"{output_png.stem}.manifest.json")
        self._say(f"🧩 {len(tiled.tiles)} parches de {tiled.tiles[0].height}x{tiled.tiles[0].width}, "
                  f"discontinuidad de costura {tiled.seam:.3e}")
        self._say(f"✅ {image.height}x{image.width} -> {result.height}x{result.width}: {output_png}")
        return result, tiled

    # ===== EVALUACIÓN =====

    def _pipeline(self, eval_config: EvalConfig, model: Optional[ModelGraph]) -> Callable:
        method = eval_config.method

        def run(hr: ImageBuffer) -> Tuple[ImageBuffer, ImageBuffer]:
            if method == "identity":
                return hr, hr
            hr, lr = synthesize_lr(hr, eval_config.scale)
            if method == "bicubic":
                return bicubic_resize(lr, hr.height, hr.width), hr
            if model.config.any_size:
                upsampled = bicubic_resize(lr.to_float(), hr.height, hr.width)
                tiled = super_resolve_tensor(upsampled.transpose(2, 0, 1)[None], model,
                                             DEFAULT_PADDING, self.workers)
                return ImageBuffer.from_tensor(tiled.tensor), hr
            return ImageBuffer.from_tensor(model.forward(lr.to_tensor())), hr

        return run

    def evaluate(self, hr_dir: Union[str, Path], eval_config: EvalConfig,
                 weights: Optional[Union[str, Path]] = None,
                 out_dir: Optional[Union[str, Path]] = None) -> EvalReport:
        """
        PSNR/SSIM sobre Y de un directorio de PNG HR

        Args:
            hr_dir: Directorio con las imágenes HR
            eval_config: Escala, borde recortado y método (model, bicubic, identity)
            weights: Fichero de pesos (método model)
            out_dir: Directorio de la ejecución

        Returns:
            EvalReport (también escrito como eval.csv)
        """
        if eval_config.method not in ("model", "bicubic", "identity"):
            raise ConfigError(f"Método de evaluación desconocido: {eval_config.method}")
        model = None
        if eval_config.method == "model":
            if weights is None:
                raise ConfigError("El método model necesita --weights")
            model = load_weights(weights)
            if not model.config.any_size and model.config.scale != eval_config.scale:
                raise ScaleMismatchError(
                    f"Los pesos son x{model.config.scale}, se evalúa x{eval_config.scale}"
                )

        paths = list_pngs(hr_dir)
        directory = self.run_directory("eval", out_dir)
        manifest = self._start("eval", None, eval=eval_config,
                               model=model.config if model else None)

        pipeline = self._pipeline(eval_config, model)
        self._say(f"⏳ Evaluando {len(paths)} imágenes ({eval_config.method}, x{eval_config.scale})...")
        pairs = []
        for path in paths:
            sr, hr = pipeline(load_png(path))
            pairs.append((path.name, sr, hr))

        report = evaluate_pairs(pairs, eval_config.border, eval_config.scale,
                                eval_config.method, self.workers)
        csv_path = report.to_csv(directory / "eval.csv")
        manifest.outputs["report"] = str(csv_path)
        manifest.results = {"mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim,
                            "shave": report.shave}
        self._finish(manifest, directory)
        self._say(f"📊 PSNR {report.mean_psnr:.4f} dB, SSIM {report.mean_ssim:.4f} (shave {report.shave})")
        return report

    # ===== ANÁLISIS =====

    def analyze(self, variant: Union[Variant, str], scale: int = 4,
                csv_path: Optional[Union[str, Path]] = None) -> Tuple[CostReport, Optional[List[str]]]:
        """
        Informe de complejidad y comparación con los valores publicados

        Returns:
            (informe, discrepancias o None si no hay valores publicados para esta variante)
        """
        model = build_variant(variant, scale=scale)
        report = analyze(model)
        if csv_path:
            report.to_csv(csv_path)

        expected = PUBLISHED_EXPECTATIONS.get((model.config.variant, model.config.scale))
        problems = check_expectation(report, expected) if expected else None
        return report, problems

    # ===== GRADIENTES =====

    def check_gradients(self, seed: int = 0, probes: int = 5,
                        break_op: Optional[str] = None) -> Dict[str, float]:
        """
        Diferencias finitas sobre cada primitiva y una IMDN de 1 bloque y 8 canales x2

        Args:
            seed: Semilla de datos y posiciones de sonda
            probes: Sondas válidas por tensor
            break_op: Op cuyo backward se corrompe (control negativo)

        Returns:
            Error relativo máximo por caso
        """
        rng = np.random.default_rng(seed)
        cases = gradient_suite(rng)
        errors: Dict[str, float] = {}

        def run_all():
            for name, (fn, inputs) in cases.items():
                results = ag.gradient_check(fn, inputs, probes=probes, rng=rng)
                errors[name] = max(r.max_rel_error for r in results)
                mark = "✅" if errors[name] < GRAD_TOLERANCE else "❌"
                self._say(f"{mark} {name:<16} max rel {errors[name]:.3e}")

        if break_op:
            self._say(f"⚠️ Backward de {break_op} corrompido a propósito")
            with ag.broken_backward(break_op):
                run_all()
        else:
            run_all()
        return errors


def _smooth(build: Callable, rng: np.random.Generator) -> Callable:
    """Envuelve build en Σ salida·w con w fija, creada con la forma de la primera salida"""
    cache: Dict[str, np.ndarray] = {}

    def fn(nodes):
        out = build(nodes)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(out.shape) / out.value.size
        return ag.weighted_sum(out, cache["w"])

    return fn


def gradient_suite(rng: np.random.Generator) -> Dict[str, Tuple[Callable, Dict[str, np.ndarray]]]:
    """Casos (función, entradas) para gradient_check"""
    normal = rng.standard_normal
    cases: Dict[str, Tuple[Callable, Dict[str, np.ndarray]]] = {
        "conv2d": (
            _smooth(lambda n: ag.conv2d(n["x"], n["w"], n["b"], 1, 1), rng),
            {"x": normal((2, 3, 5, 5)), "w": normal((4, 3, 3, 3)), "b": normal(4)},
        ),
        "conv2d_stride2": (
            _smooth(lambda n: ag.conv2d(n["x"], n["w"], n["b"], 2, 1), rng),
            {"x": normal((1, 2, 8, 8)), "w": normal((3, 2, 3, 3)), "b": normal(3)},
        ),
        "leaky_relu": (_smooth(lambda n: ag.leaky_relu(n["x"], 0.05), rng), {"x": normal((1, 2, 4, 4))}),
        "relu": (_smooth(lambda n: ag.relu(n["x"]), rng), {"x": normal((1, 2, 4, 4))}),
        "sigmoid": (_smooth(lambda n: ag.sigmoid(n["x"]), rng), {"x": normal((1, 2, 4, 4))}),
        "split_concat": (
            _smooth(lambda n: ag.concat_channels(list(reversed(ag.channel_split(n["x"], 2)))), rng),
            {"x": normal((1, 5, 3, 3))},
        ),
        "pixel_shuffle": (_smooth(lambda n: ag.pixel_shuffle(n["x"], 2), rng), {"x": normal((1, 8, 3, 3))}),
        "contrast_pool": (_smooth(lambda n: ag.global_contrast_pool(n["x"]), rng), {"x": normal((2, 3, 4, 4))}),
        "average_pool": (_smooth(lambda n: ag.global_average_pool(n["x"]), rng), {"x": normal((2, 3, 4, 4))}),
        "channel_scale": (
            _smooth(lambda n: ag.channel_scale(n["x"], n["g"]), rng),
            {"x": normal((2, 3, 4, 4)), "g": normal((2, 3, 1, 1))},
        ),
        "add": (_smooth(lambda n: ag.add(n["x"], n["y"]), rng),
                {"x": normal((1, 2, 3, 3)), "y": normal((1, 2, 3, 3))}),
        "l1_loss": (lambda n: ag.l1_loss(n["p"], n["t"]), {"p": normal((1, 3, 4, 4)), "t": normal((1, 3, 4, 4))}),
    }

    config = config_for_variant(Variant.IMDN, scale=2, num_blocks=1, channels=8,
                                distilled=2, coarse=6, cca_squeeze=2)
    model = init_weights(build_model(config), seed=int(rng.integers(2**31)))
    names = list(model.parameter_arrays())

    def forward(nodes):
        params = {name: nodes[name] for name in names}
        return model.forward_nodes(nodes["input"], params)

    inputs = dict(model.parameter_arrays())
    inputs["input"] = rng.random((1, 3, 6, 6))
    cases["imdn_1block"] = (_smooth(forward, rng), inputs)
    return cases
