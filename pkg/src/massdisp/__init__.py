"""Differentiable geometric-voting operators and a desk-scale harness."""

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    MassDispError,
    ShapeError,
    SizeError,
)
from .field import (
    DisplacementField,
    GradSignal,
    ScalarField,
    displacement_from_arrays,
    export_pgm,
    field_from_array,
    load_mdnf,
    new_field,
    save_mdnf,
)
from .kernels import BILINEAR, GAUSSIAN, KernelSpec, kernel_grad, kernel_weight, support_window
from .supervision import (
    KeypointSet,
    LossParams,
    argmax_positions,
    bce_loss,
    huber_loss_masked,
    localization_errors,
    make_disk_target,
    make_gaussian_target,
    make_offset_target,
    mse_loss,
    pck_metric,
)
from .voting import (
    ADDITIVE,
    MAX,
    MODES,
    NOISY_OR,
    VoteContext,
    VoteGraph,
    chain_graph,
    tree_graph,
    vote_backward,
    vote_forward,
    within_graph,
)

__all__ = [
    "ADDITIVE",
    "BILINEAR",
    "ConfigError",
    "DisplacementField",
    "DomainError",
    "FormatError",
    "GAUSSIAN",
    "GradSignal",
    "KernelSpec",
    "KeypointSet",
    "LossParams",
    "MAX",
    "MODES",
    "MassDispError",
    "NOISY_OR",
    "ScalarField",
    "ShapeError",
    "SizeError",
    "VoteContext",
    "VoteGraph",
    "argmax_positions",
    "bce_loss",
    "chain_graph",
    "displacement_from_arrays",
    "export_pgm",
    "field_from_array",
    "huber_loss_masked",
    "kernel_grad",
    "kernel_weight",
    "load_mdnf",
    "localization_errors",
    "make_disk_target",
    "make_gaussian_target",
    "make_offset_target",
    "mse_loss",
    "new_field",
    "pck_metric",
    "save_mdnf",
    "support_window",
    "tree_graph",
    "vote_backward",
    "vote_forward",
    "within_graph",
]

__version__ = "0.1.0"
