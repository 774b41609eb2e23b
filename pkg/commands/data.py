"""generate: build a labeled perturbation dataset from a grid."""
from utils.dynamics import find_equilibrium
from utils.grid import load_grid
from utils.manifest import RunRecorder
from utils.sampling import PerturbationSpec, generate_dataset, manifest_path, save_dataset
from commands.options import add_seed, add_stability, stability_from


def generate(args):
    recorder = RunRecorder("generate", args.argv, args.settings.run_dir)
    recorder.input("grid", args.grid)
    grid = load_grid(args.grid)
    recorder.manifest.fingerprint = grid.fingerprint

    spec = PerturbationSpec(
        mode=args.mode, omega_bound=args.omega_bound, m=args.m, per_node=args.per_node,
        combos=args.combos, per_combo=args.per_combo, seed=args.seed, window=args.window,
        perturb_delta=args.perturb_delta, stability=stability_from(args),
    )
    spec.validate(grid.n_nodes)
    recorder.manifest.config["perturbation"] = spec.to_dict()
    recorder.manifest.config["threads"] = args.threads
    recorder.manifest.seeds["seed"] = args.seed

    with recorder.stage("equilibrium"):
        equilibrium = find_equilibrium(grid)
    with recorder.stage("generate"):
        dataset = generate_dataset(grid, spec, equilibrium, workers=args.threads)
    save_dataset(dataset, args.out)
    recorder.output("dataset", args.out)
    recorder.output("dataset_manifest", manifest_path(args.out))

    counts = dataset.class_counts
    print(f"Generated {len(dataset)} samples: {counts['stable']} stable, {counts['unstable']} unstable")
    print(f"Dataset written to {args.out}")
    recorder.finish()
    return 0


def setup(subparsers, settings):
    parser = subparsers.add_parser("generate", help="sample perturbations and label them by simulation")
    parser.add_argument("grid", help="grid JSON file")
    parser.add_argument("--out", required=True, help="dataset file to write")
    parser.add_argument("--mode", choices=("single", "multi"), default="single")
    parser.add_argument("--per-node", type=int, default=1000, help="samples per node in single mode")
    parser.add_argument("--m", type=int, default=1, help="perturbed nodes per sample in multi mode")
    parser.add_argument("--combos", type=int, default=60, help="node combinations in multi mode")
    parser.add_argument("--per-combo", type=int, default=1000, help="samples per combination in multi mode")
    parser.add_argument("--window", type=int, default=101, help="omega samples kept per node (T)")
    parser.add_argument("--omega-bound", type=float, default=20.0, help="kicks drawn uniform in [-b, b] rad/s")
    parser.add_argument("--perturb-delta", action="store_true", help="also kick phases uniform in [-pi, pi]")
    parser.add_argument("--threads", type=int, default=settings.threads,
                        help="worker processes (default: $SYNCHRONY_THREADS or CPU count)")
    add_seed(parser, settings)
    add_stability(parser)
    parser.set_defaults(func=generate)
