"""Command line surface: preset runs, convergence studies, mesh utilities.

Exit codes: 0 success, 1 solver failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .mesh import (BOTTOM, LEFT, RIGHT, TOP, BoundarySpec, MeshError, Segment,
                   UnsupportedGeometryError, load_mesh, reference_mesh, refine,
                   save_mesh, validate)
from .presets import RunConfig, UsageError, convergence_study, presets, run

BOUNDARY_NAMES = {
    "all-dirichlet": BoundarySpec.all_dirichlet(),
    "left-right": BoundarySpec(dirichlet=(LEFT, RIGHT), neumann=(BOTTOM, TOP)),
    "top-bottom": BoundarySpec(dirichlet=(TOP, BOTTOM), neumann=(LEFT, RIGHT)),
    "right": BoundarySpec(dirichlet=(RIGHT,), neumann=(LEFT, TOP, BOTTOM)),
    "pn": BoundarySpec(dirichlet=(BOTTOM, Segment(1, 1.0, 0.0, 0.25)),
                       neumann=(LEFT, RIGHT, Segment(1, 1.0, 0.25, 1.0))),
}

_CONFIG_KEYS = {
    "preset": str, "scheme": str, "level": int, "dt": float, "t_final": float,
    "entropy_floor": float, "out": str, "force_peclet": bool, "m": float,
    "m_dirichlet": float, "debye": float, "bias": float, "doping": float,
    "threads": int,
}


def parse_config_text(text: str, section: str | None = None) -> dict:
    """Flat key=value format with '#' comments and optional [preset] sections.

    Top-level keys apply always; keys inside a [name] section apply only when
    that preset is selected.
    """
    top: dict = {}
    sections: dict[str, dict] = {}
    current = top
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key == "lambda":
            key = "debye"
        if key not in _CONFIG_KEYS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        kind = _CONFIG_KEYS[key]
        try:
            if kind is bool:
                current[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                current[key] = kind(value)
        except ValueError as err:
            raise UsageError(f"config line {lineno}: {err}") from err
    chosen = section if section is not None else top.get("preset")
    merged = dict(top)
    if chosen and chosen in sections:
        merged.update(sections[chosen])
    return merged


def _config_from_target(target: str, args) -> RunConfig:
    values: dict = {}
    if target in presets():
        values["preset"] = target
    else:
        path = Path(target)
        if not path.exists():
            raise UsageError(f"{target!r} is neither a preset name nor a config file; "
                             f"presets: {sorted(presets())}")
        values.update(parse_config_text(path.read_text()))
        if "preset" not in values:
            raise UsageError(f"config file {target} does not select a preset")
    for key in ("scheme", "level", "dt", "out", "bias", "m", "m_dirichlet",
                "debye", "t_final", "entropy_floor", "threads"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "force_peclet", False):
        values["force_peclet"] = True
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in values.items() if k in known})


def _levels_arg(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def _mesh_source(args):
    if args.level is not None:
        return reference_mesh(args.level, BOUNDARY_NAMES[args.boundary])
    if args.file is not None:
        return load_mesh(Path(args.file).read_text())
    raise UsageError("give either --level or a mesh file")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="entrofv",
        description="finite volume solvers for boundary-driven "
                    "convection-diffusion with entropy diagnostics")
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run a preset or a config file")
    p_run.add_argument("target", help="preset name or config file path")
    p_run.add_argument("--scheme", choices=("upwind", "centered", "sg"))
    p_run.add_argument("--level", type=int)
    p_run.add_argument("--dt", type=float)
    p_run.add_argument("--t-final", dest="t_final", type=float)
    p_run.add_argument("--entropy-floor", dest="entropy_floor", type=float)
    p_run.add_argument("--out")
    p_run.add_argument("--force-peclet", dest="force_peclet", action="store_true")
    p_run.add_argument("--bias", type=float)
    p_run.add_argument("--m", type=float)
    p_run.add_argument("--m-dirichlet", dest="m_dirichlet", type=float)
    p_run.add_argument("--lambda", dest="debye", type=float)
    p_run.add_argument("--threads", type=int)

    p_conv = sub.add_parser("convergence", help="steady-state error study")
    p_conv.add_argument("preset")
    p_conv.add_argument("--levels", default="0..4")
    p_conv.add_argument("--schemes", default="upwind,centered,sg")
    p_conv.add_argument("--out")

    p_mesh = sub.add_parser("mesh", help="mesh utilities")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command")
    for name, help_text in (("gen", "generate a reference mesh"),
                            ("check", "validate admissibility"),
                            ("refine", "refine a generated mesh")):
        p = mesh_sub.add_parser(name, help=help_text)
        p.add_argument("file", nargs="?", help="TPFA graph file")
        p.add_argument("--level", type=int)
        p.add_argument("--boundary", choices=sorted(BOUNDARY_NAMES),
                       default="all-dirichlet")
        p.add_argument("--out")

    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0

    try:
        if args.command == "run":
            return run(_config_from_target(args.target, args))

        if args.command == "convergence":
            table, csv = convergence_study(args.preset, _levels_arg(args.levels),
                                           args.schemes.split(","))
            print(table, end="")
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(csv)
                print(f"wrote {args.out}")
            return 0

        if args.command == "mesh":
            if args.mesh_command == "gen":
                if args.level is None:
                    raise UsageError("mesh gen needs --level")
                mesh = reference_mesh(args.level, BOUNDARY_NAMES[args.boundary])
                text = save_mesh(mesh)
                if args.out:
                    Path(args.out).write_text(text)
                    print(f"wrote {args.out} ({mesh.n_cells} cells)")
                else:
                    print(text, end="")
                return 0
            if args.mesh_command == "check":
                mesh = _mesh_source(args)
                report = validate(mesh)
                print(report)
                return 0 if report.ok else 1
            if args.mesh_command == "refine":
                mesh = _mesh_source(args)
                refined = refine(mesh)
                text = save_mesh(refined)
                if args.out:
                    Path(args.out).write_text(text)
                    print(f"wrote {args.out} ({refined.n_cells} cells)")
                else:
                    print(text, end="")
                return 0
            raise UsageError("mesh needs a subcommand: gen, check or refine")

        parser.print_help()
        return 2

    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except UnsupportedGeometryError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except MeshError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
