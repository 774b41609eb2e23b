"""gridinfo, simulate and import-case: inspect, exercise and create grids."""
import sys
from dataclasses import asdict

import numpy as np

from utils.adjacency import AdjacencyVariant, build_adjacency, grid_operator, write_matrix_csv
from utils.cases import CASES, MachineDefaults, case_grid
from utils.dynamics import SystemState, classify_stability, find_equilibrium, integrate
from utils.errors import InputError
from utils.grid import load_grid, save_grid, validate
from utils.manifest import RunRecorder
from commands.options import add_seed, add_stability, stability_from


def gridinfo(args):
    recorder = RunRecorder("gridinfo", args.argv, args.settings.run_dir)
    recorder.input("grid", args.grid)
    with recorder.stage("load"):
        grid = load_grid(args.grid)
    recorder.manifest.fingerprint = grid.fingerprint

    problems = validate(grid)
    status = "connected" if not problems else "invalid"
    print(f"Grid '{grid.name}': N={grid.n_nodes} E={grid.n_edges} {status}")
    print(f"Fingerprint: {grid.fingerprint}")
    print(f"Power imbalance: {grid.power_imbalance:.3e}")
    for i, kind in enumerate(grid.node_kinds()):
        print(f"  node {i:>3} {grid.labels[i]:<12} {kind:<9} alpha={grid.alpha[i]:.6g} P={grid.power[i]:+.6g}")
    print("Validation: ok" if not problems else "Validation: " + "; ".join(problems))

    if args.adjacency is not None:
        variant = AdjacencyVariant.parse(args.adjacency)
        recorder.manifest.config["adjacency"] = int(variant)
        equilibrium = find_equilibrium(grid) if variant is AdjacencyVariant.POWER_FLOW else None
        with recorder.stage("adjacency"):
            raw = build_adjacency(grid, variant, equilibrium)
            operator = grid_operator(grid, variant, equilibrium).operator
        print(f"B (variant {variant.name}):")
        write_matrix_csv(raw, sys.stdout)
        print("B' (renormalized):")
        write_matrix_csv(operator, sys.stdout)

    recorder.finish()
    return 0


def simulate(args):
    recorder = RunRecorder("simulate", args.argv, args.settings.run_dir)
    recorder.input("grid", args.grid)
    grid = load_grid(args.grid)
    recorder.manifest.fingerprint = grid.fingerprint
    settings = stability_from(args)
    recorder.manifest.config["stability"] = settings.to_dict()
    recorder.manifest.seeds["seed"] = args.seed

    with recorder.stage("equilibrium"):
        equilibrium = find_equilibrium(grid)
    omega = equilibrium.omega.copy()
    nodes = args.node or []
    for i in nodes:
        if not 0 <= i < grid.n_nodes:
            raise InputError(f"node {i} is not in an N={grid.n_nodes} grid")
    if nodes:
        if args.kick is not None:
            kicks = np.full(len(nodes), args.kick)
        else:
            kicks = np.random.default_rng(args.seed).uniform(-args.omega_bound, args.omega_bound, size=len(nodes))
        omega[nodes] += kicks
        for i, k in zip(nodes, kicks):
            print(f"Kick on node {i}: delta_omega = {k:+.6g} rad/s")
    state0 = SystemState(equilibrium.delta, omega)

    with recorder.stage("classify"):
        verdict = classify_stability(grid, state0, settings)
    label = "stable" if verdict.stable else "unstable"
    print(f"Verdict: {label} (max |omega - frame| in final window = {verdict.max_omega:.4g}, "
          f"max edge gap = {verdict.max_gap:.4g}{', blew up' if verdict.blown_up else ''})")

    if args.out:
        t_end = args.t_end if args.t_end is not None else settings.t_label
        with recorder.stage("integrate"):
            trajectory = integrate(grid, state0, settings.dt, t_end)
        trajectory.to_csv(args.out)
        recorder.output("trajectory", args.out)
        print(f"Trajectory written to {args.out} ({len(trajectory)} samples)")

    recorder.finish()
    return 0


def import_case(args):
    recorder = RunRecorder("import-case", args.argv, args.settings.run_dir)
    defaults = MachineDefaults(gen_inertia=args.gen_inertia, load_inertia=args.load_inertia,
                               alpha=args.alpha, frequency=args.frequency)
    recorder.manifest.config.update(case=args.case, machines=asdict(defaults))
    with recorder.stage("convert"):
        grid = case_grid(args.case, defaults)
    recorder.manifest.fingerprint = grid.fingerprint
    save_grid(grid, args.out)
    recorder.output("grid", args.out)
    print(f"Grid '{grid.name}': N={grid.n_nodes} E={grid.n_edges} written to {args.out}")
    recorder.finish()
    return 0


def setup(subparsers, settings):
    parser = subparsers.add_parser("gridinfo", help="summarize and validate a grid file")
    parser.add_argument("grid", help="grid JSON file")
    parser.add_argument("--adjacency", help="dump B and B' for variant 1|2|3")
    parser.set_defaults(func=gridinfo)

    parser = subparsers.add_parser("simulate", help="kick nodes from equilibrium and label the outcome")
    parser.add_argument("grid", help="grid JSON file")
    parser.add_argument("--node", type=int, action="append", help="perturbed node (repeatable)")
    parser.add_argument("--kick", type=float, help="frequency kick in rad/s (default: uniform draw)")
    parser.add_argument("--omega-bound", type=float, default=20.0, help="bound of the uniform kick draw")
    parser.add_argument("--t-end", type=float, help="trajectory length in seconds (default: t-label)")
    parser.add_argument("--out", help="write the trajectory CSV here")
    add_seed(parser, settings)
    add_stability(parser)
    parser.set_defaults(func=simulate)

    parser = subparsers.add_parser("import-case", help="convert a standard test case into a grid file")
    parser.add_argument("case", choices=CASES, help="test case name")
    parser.add_argument("--out", required=True, help="grid JSON file to write")
    parser.add_argument("--gen-inertia", type=float, default=2.5, help="I * omega_syn at generator buses")
    parser.add_argument("--load-inertia", type=float, default=1.0, help="I * omega_syn at the other buses")
    parser.add_argument("--alpha", type=float, default=0.3, help="damping over inertia, every bus")
    parser.add_argument("--frequency", type=float, default=60.0, help="nominal frequency in Hz")
    parser.set_defaults(func=import_case)
