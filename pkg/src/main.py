#!/usr/bin/env python3
"""
IMDN Engine - Main Entry Point
Super-resolución ligera: train, sr, sr-any, eval, analyze, check-grad
"""

import os
import sys
import argparse
import logging
import traceback
from typing import List, Optional

# Añadir src al path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from acs_tiler import DEFAULT_PADDING, check_padding
from engine import GRAD_TOLERANCE, ImdnEngine
from errors import ConfigError, ImdnError
from models import EvalConfig, TrainConfig, Variant, config_for_variant, parse_variant
from settings_manager import get_settings_manager

logger = logging.getLogger("imdn")


def _model_config(args):
    variant = parse_variant(args.variant)
    overrides = {}
    if args.blocks is not None:
        overrides["num_blocks"] = args.blocks
    if args.channels is not None:
        distilled = max(1, args.channels // 4)
        overrides.update(channels=args.channels, distilled=distilled,
                         coarse=args.channels - distilled,
                         cca_squeeze=min(4, args.channels))
    return config_for_variant(variant, scale=args.scale, **overrides)


def cmd_train(args, engine: ImdnEngine) -> int:
    train_config = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        hr_patch=args.patch,
        scale=args.scale,
        seed=args.seed if args.seed is not None else engine.default_seed,
        halve_every=args.halve_every,
    ).validate()
    model_config = _model_config(args)
    engine.train(args.data, model_config, train_config, args.steps,
                 out_dir=args.out, progress=not args.quiet)
    return 0


def cmd_sr(args, engine: ImdnEngine) -> int:
    engine.super_resolve(args.weights, args.input, args.output, scale=args.scale)
    return 0


def cmd_sr_any(args, engine: ImdnEngine) -> int:
    check_padding(args.padding)
    engine.super_resolve_any(args.weights, args.input, args.output,
                             padding=args.padding, factor=args.upscale)
    return 0


def cmd_eval(args, engine: ImdnEngine) -> int:
    eval_config = EvalConfig(scale=args.scale, shave=args.shave, method=args.method)
    engine.evaluate(args.data, eval_config, weights=args.weights, out_dir=args.out)
    return 0


def cmd_analyze(args, engine: ImdnEngine) -> int:
    report, problems = engine.analyze(parse_variant(args.variant), scale=args.scale, csv_path=args.csv)
    print(report.to_text())
    print(f"\n📊 {report.summary()}")

    if not args.assert_paper:
        return 0
    if problems is None:
        print(f"❌ No hay valores publicados para {args.variant} x{args.scale}", file=sys.stderr)
        return 1
    if problems:
        for problem in problems:
            print(f"❌ {problem}", file=sys.stderr)
        return 1
    print("✅ Coincide con los valores publicados")
    return 0


def cmd_check_grad(args, engine: ImdnEngine) -> int:
    errors = engine.check_gradients(seed=args.seed, probes=args.probes, break_op=args.break_op)
    worst = max(errors.values())
    print(f"\n📊 Error relativo máximo: {worst:.3e} (umbral {GRAD_TOLERANCE:.0e})")
    return 0 if worst < GRAD_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imdn",
        description="Motor IMDN de super-resolución ligera",
    )
    parser.add_argument("--log-level", default=None, help="Nivel de logging (por defecto IMDN_LOG_LEVEL)")
    parser.add_argument("--quiet", action="store_true", help="Sin barra de progreso")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Entrenar sobre un directorio de PNG HR")
    train.add_argument("--data", required=True, help="Directorio de imágenes HR")
    train.add_argument("--out", help="Directorio de salida")
    train.add_argument("--variant", default=Variant.IMDN.value)
    train.add_argument("--scale", type=int, default=2)
    train.add_argument("--steps", type=int, default=1000)
    train.add_argument("--blocks", type=int)
    train.add_argument("--channels", type=int, help="Ancho del tronco (modelos de prueba)")
    train.add_argument("--seed", type=int)
    train.add_argument("--lr", type=float, default=2e-4)
    train.add_argument("--batch", type=int, default=16)
    train.add_argument("--patch", type=int, default=192, help="Lado del parche HR")
    train.add_argument("--halve-every", type=int, default=200_000)
    train.set_defaults(handler=cmd_train)

    sr = sub.add_parser("sr", help="Ampliar un PNG con una red de escala fija")
    sr.add_argument("--weights", required=True)
    sr.add_argument("--input", required=True)
    sr.add_argument("--output", required=True)
    sr.add_argument("--scale", type=int)
    sr.set_defaults(handler=cmd_sr)

    sr_any = sub.add_parser("sr-any", help="IMDN_AS con recorte adaptativo")
    sr_any.add_argument("--weights", required=True)
    sr_any.add_argument("--input", required=True)
    sr_any.add_argument("--output", required=True)
    sr_any.add_argument("--padding", type=int, default=DEFAULT_PADDING, help="padding = 4k, k >= 1")
    sr_any.add_argument("--upscale", type=float, default=1.0, help="Ampliación bicúbica previa")
    sr_any.set_defaults(handler=cmd_sr_any)

    evaluate = sub.add_parser("eval", help="PSNR/SSIM sobre Y")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--weights")
    evaluate.add_argument("--scale", type=int, default=4)
    evaluate.add_argument("--shave", type=int)
    evaluate.add_argument("--method", choices=["model", "bicubic", "identity"], default="model")
    evaluate.add_argument("--out")
    evaluate.set_defaults(handler=cmd_eval)

    analyze = sub.add_parser("analyze", help="Parámetros, MACs y profundidad")
    analyze.add_argument("--variant", default=Variant.IMDN.value)
    analyze.add_argument("--scale", type=int, default=4)
    analyze.add_argument("--csv", help="Escribir el informe por capa en CSV")
    analyze.add_argument("--assert-paper", action="store_true",
                         help="Salir con error si no coincide con los valores publicados")
    analyze.set_defaults(handler=cmd_analyze)

    check = sub.add_parser("check-grad", help="Verificación por diferencias finitas")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--probes", type=int, default=5)
    check.add_argument("--break-op", choices=["conv2d"], help="Corromper un backward (control negativo)")
    check.set_defaults(handler=cmd_check_grad)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Función principal; devuelve el exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    settings = get_settings_manager()
    level = (args.log_level or settings.get_setting("IMDN_LOG_LEVEL")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        logger.debug(f"Comando {args.command} con ajustes {settings.snapshot()}")
        engine = ImdnEngine(settings)
        return args.handler(args, engine)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except ImdnError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n👋 Interrumpido")
        return 130
    except Exception as e:
        print(f"\n❌ Error fatal: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
