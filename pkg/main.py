from fastapi import FastAPI, Request
import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import uvicorn
from dotenv import load_dotenv

from utils import __version__
from utils.commands import cmd_bench, cmd_convert, cmd_mc, cmd_price, cmd_sweep, cmd_table_moments, SWEEP_AXES
from utils.errors import CtdError, EXIT_OK, exit_status_for
from utils.estimators import VARIANCE_MODES
from utils.reporting import CommandResult, MACHINE_FORMATS, emit, table_records
from utils.run_config import load_config, load_rate_config, parse_config, parse_rate_config

load_dotenv()  # process defaults from .env

LOG_LEVEL = os.getenv('CTD_LOG_LEVEL', 'INFO')
HOST = os.getenv('CTD_HOST', '127.0.0.1')
PORT = int(os.getenv('CTD_PORT', '8000'))

logging.basicConfig(level=LOG_LEVEL.upper(), format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

DEFAULT_RANGES = {"corr": "0:0.75", "kappa": "0.1:10", "vol": "0.5:3.9"}

app = FastAPI(title="CTD collateral pricer", version=__version__)


def _floats(text: str, sep: str = ",") -> List[float]:
    try:
        return [float(v) for v in text.split(sep) if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers separated by '{sep}', got {text!r}") from None


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags that override configuration keys"""
    return {
        "MATURITY": args.maturity,
        "DT": args.dt,
        "DELTA": args.delta,
        "MC_PATHS": args.paths,
        "MC_SEED": args.seed,
        "VARIANCE_MODE": args.variance_mode,
    }


def run_price(args: argparse.Namespace) -> CommandResult:
    return cmd_price(load_config(args.config, _overrides(args)), diagnostics=args.diagnostics)


def run_sweep(args: argparse.Namespace) -> CommandResult:
    bounds = _floats(args.range or DEFAULT_RANGES[args.axis], ":")
    if len(bounds) != 2:
        raise argparse.ArgumentTypeError("--range takes LO:HI")
    return cmd_sweep(load_config(args.config, _overrides(args)), args.axis, bounds[0], bounds[1], args.steps)


def run_table_moments(args: argparse.Namespace) -> CommandResult:
    cfg = load_config(args.config, _overrides(args))
    rules = [r.strip() for r in args.rules.split(",") if r.strip()] if args.rules else None
    return cmd_table_moments(cfg, _floats(args.deltas), _floats(args.maturities), rules)


def run_convert(args: argparse.Namespace) -> CommandResult:
    return cmd_convert(load_rate_config(args.config))


def run_mc(args: argparse.Namespace) -> CommandResult:
    return cmd_mc(load_config(args.config, _overrides(args)))


def run_bench(args: argparse.Namespace) -> CommandResult:
    counts = [int(c) for c in _floats(args.counts)]
    return cmd_bench(load_config(args.config, _overrides(args)), counts, seed=args.seed)


def run_serve(args: argparse.Namespace) -> None:
    logger.info(f"🚀 Serving on {HOST}:{PORT}")
    uvicorn.run(app, host=HOST, port=PORT)


# Subcommand handler mapping
command_handlers: Dict[str, Callable[[argparse.Namespace], Optional[CommandResult]]] = {
    "price": run_price,
    "sweep": run_sweep,
    "table-moments": run_table_moments,
    "convert": run_convert,
    "mc": run_mc,
    "bench": run_bench,
    "serve": run_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctd", description="Cheapest-to-deliver collateral discount factors")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="dotenv run configuration")
    common.add_argument("--out", help="write machine output here (sidecar <out>.meta.json)")
    common.add_argument("--format", choices=MACHINE_FORMATS, help="machine output format")

    run = argparse.ArgumentParser(add_help=False, parents=[common])
    run.add_argument("--maturity", type=float)
    run.add_argument("--dt", type=float)
    run.add_argument("--delta", type=float)
    run.add_argument("--paths", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--variance-mode", choices=VARIANCE_MODES)

    price = sub.add_parser("price", parents=[run], help="CF1 and second-order estimators")
    price.add_argument("--diagnostics", action="store_true", help="append the per-time series")

    sweep = sub.add_parser("sweep", parents=[run], help="estimators against MC along one axis")
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--range", help="LO:HI (correlations, or scale factors for kappa/vol)")
    sweep.add_argument("--steps", type=int, default=16)

    moments = sub.add_parser("table-moments", parents=[run], help="moment convergence table")
    moments.add_argument("--deltas", default="5e-5,1e-4,5e-4")
    moments.add_argument("--maturities", default="5,10,15,20")
    moments.add_argument("--rules", help="integration rules to compare, e.g. trapezoid,left (default: configured)")

    sub.add_parser("convert", parents=[common], help="collateral rates to spread configuration")
    sub.add_parser("mc", parents=[run], help="Monte Carlo reference values")

    bench = sub.add_parser("bench", parents=[run], help="timings against the currency count")
    bench.add_argument("--counts", default="3,4,5,6,7,8")

    sub.add_parser("serve", help="run the HTTP service")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = command_handlers[args.command]
    try:
        result = handler(args)
        if result is not None:
            emit(result, sys.stdout, args.out, args.format)
    except argparse.ArgumentTypeError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except (CtdError, OSError, np.linalg.LinAlgError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return exit_status_for(e)
    return EXIT_OK


# --- HTTP surface ---


def _response(result: CommandResult) -> Dict[str, Any]:
    body = {
        "success": True,
        "rows": table_records(result.table),
        "warnings": list(result.warnings),
        "metadata": result.metadata(),
    }
    if result.fragment is not None:
        body["config"] = result.fragment
    return body


async def _handle(request: Request, handler: Callable[[Dict[str, Any]], CommandResult]) -> Dict[str, Any]:
    try:
        data = await request.json()
        return _response(handler(data))
    except CtdError as e:
        logger.warning(f"❌ Request rejected: {e}")
        return {"success": False, "error": str(e), "exit_status": exit_status_for(e)}
    except Exception as e:
        return {"success": False, "error": f"Invalid request: {str(e)}"}


@app.get('/health')
def health():
    return {"status": "ok", "version": __version__}


@app.post('/price')
async def price_endpoint(request: Request):
    return await _handle(request, lambda data: cmd_price(
        parse_config(data.get('config', ''), '<request>', data.get('overrides')),
        diagnostics=bool(data.get('diagnostics', False)),
    ))


@app.post('/convert')
async def convert_endpoint(request: Request):
    return await _handle(request, lambda data: cmd_convert(parse_rate_config(data.get('config', ''), '<request>')))


@app.post('/mc')
async def mc_endpoint(request: Request):
    return await _handle(request, lambda data: cmd_mc(
        parse_config(data.get('config', ''), '<request>', data.get('overrides')),
    ))


if __name__ == "__main__":
    sys.exit(main())
