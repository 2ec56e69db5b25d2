"""gradlab: a numerical laboratory for first-order adversarial vulnerability.

Everything runs on a small reverse-mode tape over dense float64 tensors, so
input gradients, gradients of gradient norms, and the various penalized
objectives are exact to machine precision and checkable against finite
differences. Submodules:

    tensor     immutable tensors, conv/pool kernels, serialization
    autodiff   tape, primitives, grad (differentiable), finite differences
    objectives cross-entropy and its penalized / augmented variants
    nn         layer specs, networks, He init, checkpoints
    theory     path enumeration and Monte Carlo scaling predictions
    attacks    fgsm, scaled l2 step, pgd, minimal-norm boundary search
    datasets   loaders, normalization, resizing, synthetic fallbacks
    training   deterministic trainer with per-epoch vulnerability records
    cli        command-line entry points over JSON configs
"""

__version__ = "0.1.0"

from .autodiff import Tape, finite_diff, grad
from .nn import LayerSpec, Network, NetworkSpec, he_init, mlp_spec, standard_archs
from .objectives import ObjectiveSpec
from .tensor import ConvGeometry, Tensor
from . import autodiff, nn, objectives, tensor
