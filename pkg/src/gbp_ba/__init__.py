"""Gaussian belief propagation for bundle adjustment.

A factor graph of keyframes and landmarks is solved by synchronous,
bulk-synchronous-parallel message passing in information form, with Huber
robust factors, local relinearisation, message damping and automatically
generated weakening priors.  A dense MAP/marginal oracle and an internal
Levenberg-Marquardt baseline verify every claim the solver makes.
"""

from .camera import (
    BehindCameraError,
    Intrinsics,
    Landmark,
    Pose,
    measurement_jacobian,
    project,
    retract,
)
from .dataset_io import (
    FormatVersionError,
    GenerationError,
    ParseError,
    ProblemSpec,
    import_bal,
    inject_outliers,
    load,
    perturb,
    save,
    synthesize,
)
from .dense_oracle import (
    DenseSystem,
    LMParams,
    LMReport,
    OracleScaleError,
    SingularSystemError,
    assemble,
    finite_diff_jacobian,
    lm_solve,
    map_solve,
    marginals,
)
from .engine import (
    IterationReport,
    ScheduleParams,
    SolveReport,
    iterate,
    pairwise_message,
    run,
    solve,
)
from .factor_graph import (
    BuildError,
    FactorGraph,
    build,
    generate_priors,
    huber_energy,
    huber_weight,
)
from .info_gaussian import (
    DimensionMismatchError,
    InfoGaussian,
    NotInvertibleError,
    SingularMarginalizationError,
    from_moments,
    marginalize_onto,
    product,
    quotient,
    to_moments,
)

__version__ = "0.1.0"
