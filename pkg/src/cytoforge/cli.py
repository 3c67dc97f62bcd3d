"""``cytoforge`` command line.

Sub-commands mirror the pipeline stages; their options are generated from the
stage functions' keyword parameters (``slide_id`` becomes ``--slide-id``).
"""

import argparse
import inspect
import json
import logging
import sys
import typing
from pathlib import Path

from . import commands
from .errors import CytoforgeError
from .pipeline import parse_config, run_pipeline

COMMANDS = {
    "tile": commands.tile,
    "poisson": commands.poisson,
    "augment": commands.augment,
    "embed": commands.embed,
    "import-embeddings": commands.import_embeddings,
    "knn": commands.knn_eval,
    "mil-train": commands.mil_train,
    "mil-eval": commands.mil_eval,
}


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _add_options(parser, func):
    hints = typing.get_type_hints(func)
    for p in inspect.signature(func).parameters.values():
        kind = hints.get(p.name, str)
        flag = "--" + p.name.replace("_", "-")
        required = p.default is inspect.Parameter.empty
        kw = {"dest": p.name, "required": required}
        if not required:
            kw["default"] = p.default
        if typing.get_origin(kind) is list:
            (elem,) = typing.get_args(kind)
            if elem is int:
                kw["type"] = _int_list
                kw["metavar"] = "N,N,..."
            else:
                kw["nargs"] = "+"
        else:
            kw["type"] = kind
        parser.add_argument(flag, **kw)


def _demo_corpus(args):
    from .synthetic import render_slide, write_cell_directory
    from .rasters import save_png

    out = Path(args.out)
    for i in range(args.slides):
        positive = i % 2 == 1
        save_png(render_slide(args.seed + i, args.width, args.height, positive), out / f"slide{i}.png")
    write_cell_directory(out / "cells", args.cells, args.seed)
    return {"out": str(out), "slides": args.slides}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cytoforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        doc = inspect.getdoc(func) or ""
        sp = sub.add_parser(name, help=doc.splitlines()[0] if doc else None)
        _add_options(sp, func)

    run = sub.add_parser("run", help="run a JSON pipeline configuration")
    run.add_argument("--config", required=True)

    demo = sub.add_parser("demo-corpus", help="write synthetic slides and a cell bank")
    demo.add_argument("--out", required=True)
    demo.add_argument("--slides", type=int, default=4)
    demo.add_argument("--width", type=int, default=1600)
    demo.add_argument("--height", type=int, default=1280)
    demo.add_argument("--cells", type=int, default=12, help="cells per class")
    demo.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            summary = run_pipeline(parse_config(Path(args.config).read_text()))
            print(json.dumps({"n_failed": summary["n_failed"], "aggregate": summary["aggregate"]}, indent=1))
            return 0 if summary["n_failed"] == 0 else 1
        if args.command == "demo-corpus":
            result = _demo_corpus(args)
        else:
            func = COMMANDS[args.command]
            params = {p: getattr(args, p) for p in inspect.signature(func).parameters}
            result = func(**params)
    except (CytoforgeError, ValueError, OSError) as exc:
        print(f"cytoforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
