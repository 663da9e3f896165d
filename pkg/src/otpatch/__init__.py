"""Patch-wise optimal-transport content loss with evaluation metrics and phantoms."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    MetaData,
    PatchGrid,
    Volume,
    load_volume,
    make_patch_grid,
    normalize,
    save_volume,
)
from .fit import FitConfig, compare_losses, fit_residual, fit_to_targets  # noqa: E402
from .metrics import CEMask, MetricsReport, ce_mask, evaluate, mae_ce, mae_sigma, psnr, ssim  # noqa: E402
from .nploss import NPLossConfig, multiscale_np_loss, np_loss, np_loss_grad  # noqa: E402
from .ot import (  # noqa: E402
    CostMatrix,
    SolverConfig,
    TransportPlan,
    build_cost,
    exact_ot_1d,
    gaussian_w2_closed_form,
    ipot,
    ot_gradient,
    sinkhorn,
)
from .phantom import Lesion, PhantomSpec, generate, generate_suite  # noqa: E402

__all__ = [
    "CEMask",
    "CostMatrix",
    "FitConfig",
    "Lesion",
    "MetaData",
    "MetricsReport",
    "NPLossConfig",
    "PatchGrid",
    "PhantomSpec",
    "SolverConfig",
    "TransportPlan",
    "Volume",
    "build_cost",
    "ce_mask",
    "compare_losses",
    "evaluate",
    "exact_ot_1d",
    "fit_residual",
    "fit_to_targets",
    "gaussian_w2_closed_form",
    "generate",
    "generate_suite",
    "ipot",
    "load_volume",
    "mae_ce",
    "mae_sigma",
    "make_patch_grid",
    "multiscale_np_loss",
    "normalize",
    "np_loss",
    "np_loss_grad",
    "ot_gradient",
    "psnr",
    "save_volume",
    "sinkhorn",
    "ssim",
]
