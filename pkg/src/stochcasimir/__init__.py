"""Stochastic Lie-Poisson systems and stochastic energy-Casimir stability."""
from .algebra import (
    AlgebraElement,
    AlgebraMismatchError,
    DualElement,
    LieAlgebra,
    RepresentationError,
    SemidirectProduct,
    ad,
    ad_star,
    heavy_top_algebra,
    pairing,
    semidirect_product,
    so3,
)
from .sde import (
    EnsembleResult,
    EnsembleSpec,
    IntegratorConfig,
    LinearSDE,
    StepFailure,
    simulate_ensemble,
    simulate_path,
    step,
    strong_convergence_order,
)
from .shearflow import ShearFlowProfile, bernoulli_sign_test, read_profile_csv, shear_certificate, sigma1
from .stability import (
    CasimirJet,
    CertificationError,
    EquilibriumCertificate,
    certify,
    generator_quadratic_form,
    initial_offset,
    linearized_system,
    second_variation,
    sigma_tight,
    solve_first_variation,
    stopping_time,
)
from .systems import (
    StochasticLiePoissonSystem,
    check_equilibrium,
    make_custom,
    make_heavy_top,
    make_rigid_body,
    system_from_dict,
)

__version__ = "0.1.0"
