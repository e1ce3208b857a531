# SECTION: Necessary imports
import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import lightning as L

from modules.checkpoint import load_checkpoint
from modules.config import MODES, RunConfig, build_config
from modules.errors import NumericalFailure, PreconditionError, ScanLogParseError
from modules.evaluation import predict_grid, render, render_regions
from modules.grid import GridSpec, SdfGrid
from modules.pipeline import GT_FILE, MODEL_FILE, SCANS_FILE, evaluate_run, grid_spec_for, load_world, map_run, simulate_run
#!SECTION

# SECTION: Exit codes
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3
#!SECTION

# SECTION: Argument parsing
def config_flags():
    '''
    Parent parser with one kebab-case flag per RunConfig key. Flags default to None so that only
    the ones given on the command line override the config file.
    '''
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--config', type=Path, default=None, help="JSON or YAML run configuration")
    for f in fields(RunConfig):
        flags = ['--' + f.name.replace('_', '-')]
        if f.name == 'scan_stride':
            flags.append('--stride')
        kwargs = {'dest': f.name, 'default': None}
        if f.name == 'mode':
            kwargs['choices'] = MODES
        elif f.type is list:
            kwargs['type'] = json.loads        # e.g. --waypoints '[[0, 0], [1, 0]]'
        else:
            kwargs['type'] = f.type
        parser.add_argument(*flags, **kwargs)
    return parser


def build_parser():
    common = config_flags()
    parser = argparse.ArgumentParser(description="Online GP implicit-surface mapping from 2D range scans.")
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('simulate', parents=[common], help="Simulate a scan log and its ground-truth SDF grid")

    p = sub.add_parser('map', parents=[common], help="Build the ensemble map from a scan log")
    p.add_argument('--scans', type=Path, default=None, help=f"Scan log (default: <output>/{SCANS_FILE})")
    p.add_argument('--no-progress', action='store_true')

    p = sub.add_parser('eval', parents=[common], help="Score a model checkpoint against a ground-truth grid")
    p.add_argument('--checkpoint', type=Path, default=None, help=f"Model checkpoint (default: <output>/{MODEL_FILE})")
    p.add_argument('--gt', type=Path, default=None, help=f"Ground-truth grid (default: <output>/{GT_FILE})")

    p = sub.add_parser('render', parents=[common], help="Render a grid file or a model checkpoint as a PPM image")
    p.add_argument('--input', type=Path, default=None, help=f"Grid file or checkpoint (default: <output>/{MODEL_FILE})")
    p.add_argument('--image', type=Path, default=None, help="Output image (default: <output>/map.ppm)")
    p.add_argument('--gt', type=Path, default=None, help="Grid file whose spec the checkpoint is predicted on")
    p.add_argument('--overlay', action='store_true', help="Draw primary PIs in per-expert colors")
    p.add_argument('--regions', action='store_true', help="Also render the areas of responsibility")
    return parser
#!SECTION

# SECTION: Commands
def cmd_simulate(opt, cfg):
    scans_path, gt_path, n_scans = simulate_run(cfg)
    print(f"Simulated {n_scans} scans with seed {cfg.seed}: {scans_path}, {gt_path}")
    return EXIT_OK


def cmd_map(opt, cfg):
    scans_path = opt.scans or cfg.output_dir / SCANS_FILE
    ens, summary = map_run(cfg, scans_path, progress=not opt.no_progress)
    print(f"Mapped {summary['n_used']} scans: {len(ens.experts)} experts, {ens.n_pi_total} PIs "
          f"({ens.n_pi_primary} primary), {summary['wall_s']:.2f}s wall, "
          f"real-time factor {summary['realtime_factor']:.2f}")
    return EXIT_OK


def configured_grid(cfg):
    if cfg.grid_origin is None or cfg.grid_width is None or cfg.grid_height is None:
        return None
    return GridSpec(tuple(cfg.grid_origin), cfg.grid_resolution, cfg.grid_width, cfg.grid_height)


def cmd_eval(opt, cfg):
    ens = load_checkpoint(opt.checkpoint or cfg.output_dir / MODEL_FILE)
    gt = SdfGrid.read(opt.gt or cfg.output_dir / GT_FILE)
    spec = configured_grid(cfg)
    if spec is not None and not spec.matches(gt.spec):
        raise PreconditionError(f"Configured grid {spec} does not match the ground truth grid {gt.spec}")

    report = evaluate_run(ens, gt, cfg.mode)
    print(json.dumps(report, indent=2))
    out = cfg.output_dir / 'metrics.json'
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open('w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)
    return EXIT_OK


def render_spec(opt, cfg):
    # Grid for rendering a checkpoint: --gt file, else <output>/gt.sdf, else the configured world
    gt_path = opt.gt or cfg.output_dir / GT_FILE
    if gt_path.is_file():
        return SdfGrid.read(gt_path).spec
    spec = configured_grid(cfg)
    return spec if spec is not None else grid_spec_for(load_world(cfg), cfg)


def cmd_render(opt, cfg):
    source = opt.input or cfg.output_dir / MODEL_FILE
    image = opt.image or cfg.output_dir / 'map.ppm'

    if source.suffix != '.json':
        if opt.overlay or opt.regions:
            raise PreconditionError("--overlay and --regions need a model checkpoint as input")
        render(SdfGrid.read(source), image)
        print(f"Rendered {source} -> {image}")
        return EXIT_OK

    ens = load_checkpoint(source)
    spec = render_spec(opt, cfg)
    overlay = {eid: ens.experts[eid].primary_pis for eid in ens.ids} if opt.overlay else None
    modes = ['individual', 'mixture'] if cfg.mode == 'both' else [cfg.mode]
    for mode in modes:
        path = image if len(modes) == 1 else image.with_name(f"{image.stem}_{mode}{image.suffix}")
        dots = render(predict_grid(ens, spec, mode), path, overlay=overlay)
        print(f"Rendered {mode} map -> {path}" + (f" with {dots} PI dots" if overlay else ""))
    if opt.regions:
        path = image.with_name(f"{image.stem}_regions{image.suffix}")
        render_regions(ens, spec, path)
        print(f"Rendered areas of responsibility -> {path}")
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'map': cmd_map,
    'eval': cmd_eval,
    'render': cmd_render,
}
#!SECTION

# SECTION: Entry point
def main(argv=None):
    opt = build_parser().parse_args(argv)
    overrides = {f.name: getattr(opt, f.name) for f in fields(RunConfig)}
    try:
        cfg = build_config(opt.config, overrides)
        L.seed_everything(cfg.seed)
        return COMMANDS[opt.command](opt, cfg)
    except NumericalFailure as err:
        print(f"Numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL_FAILURE
    except (PreconditionError, ScanLogParseError, ValueError, OSError) as err:
        print(f"Error: {err}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
#!SECTION
