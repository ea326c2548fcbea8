"""Explicit local solutions ``X_t = phi(int U dW, t)`` for Ito diffusions.

Decide representability, build the representation, and sample paths
without time-stepping bias.
"""

from .catalog import CatalogEntry, get
from .commutator import (
    CheckReport,
    check_sigma_commutator,
    classify_canonical_drift,
    infer_generator,
)
from .diffeo import (
    Diffeomorphism,
    NumericDiffeo,
    closed_form_diffeo,
    flow_straighten,
    verify_p3,
)
from .errors import ExactSdeError
from .model import (
    SdeModel,
    StratonovichDrift,
    ito_to_stratonovich,
    stratonovich_to_ito,
    transform_sde,
)
from .numerics import Box, Grid, JacobianSpec, RngStream
from .pipeline import check_pipeline, full_pipeline
from .representation import (
    CanonicalParams,
    Representation,
    build_representation,
    compatible_drift,
    validate_representation,
)
from .simulate import (
    PathBundle,
    couple_and_compare,
    euler_maruyama,
    milstein,
    moment_stats,
    precompute_increment_laws,
    simulate_exact,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CanonicalParams",
    "CatalogEntry",
    "CheckReport",
    "Diffeomorphism",
    "ExactSdeError",
    "Grid",
    "JacobianSpec",
    "NumericDiffeo",
    "PathBundle",
    "Representation",
    "RngStream",
    "SdeModel",
    "StratonovichDrift",
    "build_representation",
    "check_pipeline",
    "check_sigma_commutator",
    "classify_canonical_drift",
    "closed_form_diffeo",
    "compatible_drift",
    "couple_and_compare",
    "euler_maruyama",
    "flow_straighten",
    "full_pipeline",
    "get",
    "infer_generator",
    "ito_to_stratonovich",
    "milstein",
    "moment_stats",
    "precompute_increment_laws",
    "simulate_exact",
    "stratonovich_to_ito",
    "transform_sde",
    "validate_representation",
    "verify_p3",
]
