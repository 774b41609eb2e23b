"""Flag groups shared by several subcommands."""
import math

from utils.dynamics import StabilitySettings
from utils.model import MODES, TTEDNNConfig
from utils.training import OPTIMIZERS, TrainConfig


def add_seed(parser, settings):
    parser.add_argument("--seed", type=int, default=settings.seed,
                        help="master seed (default: $SYNCHRONY_SEED or 0)")


def add_stability(parser):
    group = parser.add_argument_group("stability verdict")
    group.add_argument("--dt", type=float, default=0.0125, help="RK4 step in seconds")
    group.add_argument("--t-label", type=float, default=50.0, help="labeling horizon in seconds")
    group.add_argument("--omega-tol", type=float, default=0.1, help="max |omega| off the frame frequency over the final window")
    group.add_argument("--settle-window", type=float, default=5.0, help="final window length in seconds")
    group.add_argument("--gamma", type=float, default=math.pi / 2, help="max wrapped edge phase gap")


def stability_from(args):
    return StabilitySettings(dt=args.dt, t_label=args.t_label, omega_tol=args.omega_tol,
                             window=args.settle_window, gamma=args.gamma)


def add_model(parser):
    group = parser.add_argument_group("model")
    group.add_argument("--adjacency", default="3", help="adjacency variant 1|2|3 (or I|II|III)")
    group.add_argument("--mode", choices=MODES, default="literal", help="data-flow reading")
    group.add_argument("--gc-layers", type=int, default=2)
    group.add_argument("--gc-width", type=int, default=16)
    group.add_argument("--fc-width", type=int, default=64)
    group.add_argument("--blocks", type=int, default=5, help="residual blocks in the TC stack")
    group.add_argument("--kernel", type=int, default=2)
    group.add_argument("--filters", type=int, default=32)
    group.add_argument("--mlp-hidden", type=int, default=32)


def model_config_from(args, n_nodes, window, dt=StabilitySettings.dt):
    return TTEDNNConfig(
        n_nodes=n_nodes, window=window, gc_layers=args.gc_layers, gc_width=args.gc_width,
        fc_width=args.fc_width, blocks=args.blocks, kernel=args.kernel, filters=args.filters,
        mlp_hidden=args.mlp_hidden, variant=args.adjacency, mode=args.mode, dt=dt,
    )


def add_training(parser):
    group = parser.add_argument_group("training")
    group.add_argument("--lr", type=float, default=1e-3)
    group.add_argument("--batch-size", type=int, default=256)
    group.add_argument("--l2", type=float, default=5e-4, help="L2 weight beta")
    group.add_argument("--alpha0", type=float, default=1.0, help="weight of the unstable class")
    group.add_argument("--epochs", type=int, default=100)
    group.add_argument("--patience", type=int, default=20)
    group.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    group.add_argument("--no-class-weighting", action="store_true",
                       help="fix alpha1 = 1 instead of computing it per batch")


def train_config_from(args):
    return TrainConfig(
        lr=args.lr, batch_size=args.batch_size, l2=args.l2, alpha0=args.alpha0, epochs=args.epochs,
        patience=args.patience, seed=args.seed, optimizer=args.optimizer,
        class_weighting=not args.no_class_weighting,
    )
