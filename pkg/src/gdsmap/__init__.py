"""Normal forms of generalized distance-squared mappings.

``G_(p,A)(x)_i = sum_j a_ij (x_j - p_ij)^2`` is reduced by explicit source
and target coordinate changes to the Whitney umbrella (``k = 2n``, full
rank) or to the inclusion (rank-deficient ``A`` or ``k > 2n``), with a
determinant certificate for the exceptional centers.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BadSet,
    CertificationError,
    ConditioningWarning,
    DegenerateKernel,
    DegreeOverflow,
    DimensionMismatch,
    GDSError,
    InvalidInstance,
    RankMismatch,
    SelfCheckFailure,
    SingularA1,
    WrongBranch,
)
from .gds import (  # noqa: E402
    PivotPlan,
    ProblemInstance,
    build_gds,
    distance_squared_matrix,
    instance_from_dict,
    lorentzian_matrix,
    select_pivot,
)
from .instability import (  # noqa: E402
    InstabilityWitness,
    build_instability_matrix,
    certify_witness,
    find_unstable_perturbation,
    psi_map,
)
from .polymap import (  # noqa: E402
    DiffeoChain,
    ElementaryTransform,
    PolyMap,
    TransformKind,
    apply_chains,
    compose,
)
from .reduction import (  # noqa: E402
    BadSetCertificate,
    Classification,
    ReductionResult,
    badset_certificate,
    classify,
    linear_part,
    reduce_full_rank,
    reduce_to_inclusion,
    solve_gamma,
    solve_lambda,
)
from .verify import (  # noqa: E402
    SampleSpec,
    check_image_flat,
    check_map_equality,
    check_roundtrip,
    find_singular_point,
)
