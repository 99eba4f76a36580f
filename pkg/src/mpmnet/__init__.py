"""Deep minimax probability machines: a numpy autodiff engine, MPM heads and adversarial evaluation."""
from .attacks import CwConfig, FgsmGrid, cw_l2, eval_attack_grid, fgsm, perturbation_gap
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_config
from .data import BinaryTask, ImageDataset, StratifiedBatcher, load_dataset, make_binary_task
from .mpm import ClassStats, MpmHead, MpmSolution, class_stats, mpm_loss, solve_classical_mpm
from .network import Model, accuracy, build_arch, predict
from .tensor import Tape, Tensor, no_grad
from .training import TrainConfig, train_model

__version__ = "0.1.0"
