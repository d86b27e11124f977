"""Linear mixed models with semiparametric random-effects bootstrap inference.

Typical use::

    from lmmboot import (ClusteredDataset, MixedEffectTarget, reml_fit,
                         BootstrapConfig, run_bootstrap, bootstrap_intervals)

    data = ClusteredDataset.from_arrays(cluster_ids, y, X)
    fit = reml_fit(data)
    target = MixedEffectTarget.cluster_means(data)
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=1000, seed=1))
    individual, simultaneous = bootstrap_intervals(fit, target, boot)
"""
from .bootstrap import (
    BootstrapConfig,
    BootstrapDistribution,
    BootstrapFailure,
    InnerReplicates,
    ResidualPools,
    draw_parametric,
    draw_semiparametric,
    load_distribution,
    quantile_order_stat,
    run_bootstrap,
    run_double_bootstrap,
    save_distribution,
    scale_center_residuals,
    studentize,
)
from .estimation import (
    RemlConfig,
    blup_u,
    conditional_residuals,
    gls_beta,
    predict_theta,
    reml_fit,
    reml_objective,
)
from .inference import (
    IntervalSet,
    TestResult,
    asymptotic_intervals,
    bootstrap_intervals,
    hypothesis_test,
    individual_intervals,
    reference_statistics,
    simultaneous_intervals,
)
from .model import (
    ClusterBlock,
    ClusteredDataset,
    ConvergenceError,
    DataValidationError,
    FitResult,
    MixedEffectTarget,
    RankDeficiencyError,
    ValidationReport,
    VarianceParams,
    build_random_intercept,
    validate_dataset,
)
from .simulation import (
    DgpConfig,
    SimulationReport,
    draw_centered_scaled,
    evaluate_run,
    format_report,
    generate_dgp,
    run_study,
)
from .variability import (
    FisherInformation,
    MseComponents,
    fisher_information_reml,
    g1,
    g2,
    g3,
    mse_3t,
    mse_b1,
    mse_bc,
    mse_components,
    mse_l,
    mse_spa,
)

__version__ = "0.1.0"


def backend() -> str:
    """Name of the active kernel backend (``"compiled"`` or ``"python"``)."""
    from . import _backend

    return _backend.name


__all__ = [name for name in dir() if not name.startswith("_")]
